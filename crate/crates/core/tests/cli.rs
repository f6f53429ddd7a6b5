mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use plid_core::cli::{input_hash, RunManifest, MANIFEST_FILE};
use plid_core::report::{EvalReport, CURVE_CSV, CURVE_PLOT, REPORT_FILE};

fn plid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plid")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path) -> Output {
    plid(&["synth", "--descriptions", "16", "--seed", "7", "--out", p(out)])
}

fn artifact_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file() && e.file_name() != MANIFEST_FILE)
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn synth_reports_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(&dir.path().join("data"));
    ok(&o);
    assert!(stdout(&o).contains("18 seen / 12 unseen"), "{}", stdout(&o));
    assert!(dir.path().join("data").join(MANIFEST_FILE).exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(plid(&["synth"]).status.code(), Some(2));
    let out = dir.path().join("x");
    assert_eq!(plid(&["synth", "--seen-frac", "1.5", "--out", p(&out)]).status.code(), Some(2));
    assert!(!out.exists());

    let data = dir.path().join("data");
    ok(&synth(&data));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let o = plid(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&synth(&data));
    let cfg_path = dir.path().join("desk.json");
    common::write_config(&cfg_path, &common::desk(2));

    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&plid(&["train", "--config", p(&cfg_path), "--data", p(&data), "--out", p(&out)]));
        for setting in ["closed", "open"] {
            ok(&plid(&["eval", "--ckpt", p(&out.join("best")), "--data", p(&data), "--setting", setting]));
        }
        out
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(artifact_bytes(&a), artifact_bytes(&b));

    let open = a.join("best").join("eval_open");
    for f in [REPORT_FILE, CURVE_CSV, CURVE_PLOT] {
        assert!(open.join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(open.join(REPORT_FILE)).unwrap();
    assert!(text.contains(r#""setting": "open""#), "{text}");
    let report = EvalReport::load(&open.join(REPORT_FILE)).unwrap();
    assert!(report.feasibility_threshold.is_some());
    let kept = report.num_candidates;
    assert!((18..=30).contains(&kept), "{kept} open-world candidates");

    let closed = a.join("best").join("eval_closed");
    let o = plid(&["report", p(&closed), p(&open)]);
    ok(&o);
    let table = stdout(&o);
    assert!(table.starts_with("| run | setting |"), "{table}");
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains(&format!("| open | {kept} |")), "{table}");

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.config, Some(common::desk(2)));
    assert_eq!(
        manifest.input_hash,
        input_hash("train", manifest.config.as_ref(), &manifest.inputs).unwrap()
    );
    std::fs::write(data.join("samples.csv"), "tampered").unwrap();
    assert_ne!(
        manifest.input_hash,
        input_hash("train", manifest.config.as_ref(), &manifest.inputs).unwrap()
    );
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&synth(&data));
    let cfg_path = dir.path().join("desk.json");
    common::write_config(&cfg_path, &common::desk(1));
    let out = dir.path().join("run");
    ok(&plid(&["train", "--config", p(&cfg_path), "--data", p(&data), "--out", p(&out)]));
    ok(&plid(&["train", "--resume", "--epochs", "1", "--data", p(&data), "--out", p(&out)]));
    let log = plid_core::training::read_log(&out.join(plid_core::training::LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn gradcheck_passes_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&synth(&data));
    let cfg_path = dir.path().join("desk.json");
    common::write_config(&cfg_path, &common::desk(1));
    let o = plid(&["gradcheck", "--config", p(&cfg_path), "--data", p(&data), "--entries", "16"]);
    ok(&o);
    assert!(stdout(&o).contains("max rel err"), "{}", stdout(&o));
}
