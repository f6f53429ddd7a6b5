//! `plid` command line.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::corpus::{self, SplitKind, SynthSpec};
use crate::error::{PlidError, Result};
use crate::evaluation::{self, Setting};
use crate::exec::{self, Execution};
use crate::lid::dropout_mask;
use crate::model::ModelParams;
use crate::objective::{self, Example, StepNoise, TrainingProblem};
use crate::report::{self, EvalReport};
use crate::session::{BackendKind, Session};
use crate::training::{self, Checkpoint, TrainOutcome};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "plid", version, about = "Compositional zero-shot learning with prompt distributions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train and keep the best checkpoint by validation AUC.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Summarize evaluation reports and redraw their curves.
    Report(ReportArgs),
}

fn fraction(s: &str) -> std::result::Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 6)]
    pub objects: usize,
    #[arg(long = "seen-frac", default_value_t = 0.6, value_parser = fraction)]
    pub seen_frac: f64,
    #[arg(long = "samples-per-pair", default_value_t = 20)]
    pub samples_per_pair: usize,
    #[arg(long, default_value_t = 64)]
    pub descriptions: usize,
    #[arg(long = "embed-dim", default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write precomputed embeddings for the `precomputed` backend.
    #[arg(long)]
    pub export_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["synthetic", "precomputed"], default_value = "synthetic")]
    pub backend: String,
}

impl DataArgs {
    fn kind(&self) -> BackendKind {
        self.backend.parse().expect("clap restricts the values")
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue the run in `--out` for `--epochs` more epochs.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = ["closed", "open"], default_value = "closed")]
    pub setting: String,
    /// Defaults to `<ckpt>/eval_<setting>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Entries checked per tensor, at an even stride; 0 checks all.
    #[arg(long, default_value_t = 64)]
    pub entries: usize,
    /// Finite-difference step; the check also uses half of it.
    #[arg(long, default_value_t = 1e-2)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories holding `report.json`.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
    pub inputs: Vec<PathBuf>,
    /// sha256 over the command, resolved config and every input file.
    pub input_hash: String,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Content hash of a command over its inputs; file names enter relative to
/// their input root so the hash does not depend on where the data lives.
pub fn input_hash(command: &str, config: Option<&TrainConfig>, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    if let Some(c) = config {
        h.update(c.to_json().as_bytes());
    }
    for root in inputs {
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| PlidError::Validation(format!("{}: {e}", root.display())))?;
            let f = entry.path();
            if !entry.file_type().is_file() || entry.file_name() == MANIFEST_FILE {
                continue;
            }
            let rel = f.strip_prefix(root).unwrap_or(f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            let bytes = std::fs::read(f).map_err(|e| PlidError::io(f, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_json().as_bytes()))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PlidError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| PlidError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| PlidError::Load {
            path: path.clone(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| PlidError::parse(&path, e.to_string()))
    }

    /// Recomputes the input hash from the files on disk.
    pub fn verify(&self) -> Result<bool> {
        Ok(input_hash(&self.command, self.config.as_ref(), &self.inputs)? == self.input_hash)
    }
}

struct ManifestBuilder {
    command: String,
    config_path: Option<PathBuf>,
    config: Option<TrainConfig>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    started: u64,
    hash: String,
}

impl ManifestBuilder {
    fn start(
        command: &str,
        config_path: Option<PathBuf>,
        config: Option<TrainConfig>,
        inputs: Vec<PathBuf>,
    ) -> Result<Self> {
        let hash = input_hash(command, config.as_ref(), &inputs)?;
        Ok(ManifestBuilder {
            command: command.to_string(),
            seed: config.as_ref().map(|c| c.seed),
            config_path,
            config,
            inputs,
            started: now(),
            hash,
        })
    }

    fn finish(self, dir: &Path, artifacts: Vec<String>) -> Result<()> {
        RunManifest {
            command: self.command,
            config_path: self.config_path,
            config: self.config,
            seed: self.seed,
            started_unix: self.started,
            finished_unix: now(),
            artifacts,
            inputs: self.inputs,
            input_hash: self.hash,
        }
        .write(dir)
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn execution() -> Execution {
    exec::init_workers_from_env();
    Execution::default()
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        embed_dim: a.embed_dim,
        ..SynthSpec::new(
            a.states,
            a.objects,
            a.seen_frac,
            a.samples_per_pair,
            a.descriptions,
            a.seed,
        )
    };
    let manifest = ManifestBuilder::start("synth", None, None, vec![])?;
    let ds = corpus::make_synthetic_dataset(&spec, &a.out)?;
    if a.export_embeddings {
        let backend =
            crate::encoder::SyntheticBackend::from_dataset(&ds, spec.encoder_seed, spec.embed_dim)?;
        crate::encoder::PrecomputedBackend::export(&a.out, &ds, &backend, a.descriptions)?;
    }
    let count = |k| ds.samples_in(k).count();
    println!(
        "{} seen / {} unseen compositions ({} val, {} test); samples: {} train, {} val, {} test",
        ds.split.seen.len(),
        ds.vocab.all_pairs().len() - ds.split.seen.len(),
        ds.split.unseen_val.len(),
        ds.split.unseen_test.len(),
        count(SplitKind::Train),
        count(SplitKind::Val),
        count(SplitKind::Test),
    );
    manifest.finish(&a.out, vec![a.out.display().to_string()])
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let exec = execution();
    if a.resume {
        let probe = Checkpoint::load_config(&a.out.join("last"))?;
        let session = Session::open(&a.data.data, a.data.kind(), &probe, exec)?;
        let outcome = TrainOutcome::load(&a.out, &session)?;
        let extra = a.epochs.unwrap_or(0);
        let manifest = ManifestBuilder::start(
            "train --resume",
            None,
            Some(outcome.last.config.clone()),
            vec![a.data.data.clone(), a.out.join("last")],
        )?;
        let outcome = training::resume(&session, outcome, extra, exec)?;
        outcome.save(&a.out)?;
        print_training(&outcome);
        return manifest.finish(&a.out, train_artifacts());
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let manifest = ManifestBuilder::start(
        "train",
        a.config.clone(),
        Some(cfg.clone()),
        vec![a.data.data.clone()],
    )?;
    let session = Session::open(&a.data.data, a.data.kind(), &cfg, exec)?;
    let outcome = training::train(&session, &cfg, exec)?;
    outcome.save(&a.out)?;
    print_training(&outcome);
    manifest.finish(&a.out, train_artifacts())
}

fn train_artifacts() -> Vec<String> {
    vec!["best".into(), "last".into(), training::LOG_FILE.into()]
}

fn print_training(o: &TrainOutcome) {
    for row in &o.last.log {
        match (row.loss_y, row.lr) {
            (Some(l), Some(lr)) => println!(
                "epoch {:>3}  loss_y {l:.5}  lr {lr:.3e}  val AUC {:.3}",
                row.epoch, row.val_auc
            ),
            _ => println!("epoch {:>3}  val AUC {:.3}", row.epoch, row.val_auc),
        }
    }
    println!("best epoch {} (val AUC {:.3})", o.best.epoch, o.best.best_val_auc);
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let exec = execution();
    let setting: Setting = a.setting.parse()?;
    let cfg = Checkpoint::load_config(&a.ckpt)?;
    let mut session = Session::open(&a.data.data, a.data.kind(), &cfg, exec)?;
    let ckpt = Checkpoint::load(&a.ckpt, &session)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.ckpt.join(format!("eval_{}", setting.as_str())));
    let manifest = ManifestBuilder::start(
        &format!("eval --setting {}", setting.as_str()),
        None,
        Some(ckpt.config.clone()),
        vec![a.data.data.clone(), a.ckpt.join(training::MANIFEST_FILE), a.ckpt.join("params")],
    )?;
    let eval = evaluation::evaluate(&ckpt.params, &mut session, &ckpt.config, setting, exec)?;
    let report = EvalReport::new(eval, ckpt.epoch, config_hash(&ckpt.config));
    let artifacts = report::write_eval_outputs(&out, &report)?;
    print!("{}", report::metrics_table(&[(a.ckpt.display().to_string(), &report)]));
    manifest.finish(&out, artifacts)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let exec = execution();
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.recompute_every_step = true;
    cfg.validate()?;
    if a.samples == 0 {
        return Err(PlidError::InvalidArgument("--samples must be >= 1".into()));
    }
    let session = Session::open(&a.data.data, a.data.kind(), &cfg, exec)?;
    let seen = session.seen_classes().to_vec();
    let vocab = &session.dataset.vocab;
    let problem = TrainingProblem::new(
        session.backend.text(),
        seen.clone(),
        session.descriptions(&seen)?,
        vocab.num_states(),
        vocab.num_objects(),
        cfg.shares_covariance(seen.len()),
        exec,
    )?;
    let samples: Vec<_> = session.samples(SplitKind::Train).into_iter().take(a.samples).collect();
    let batch = samples
        .iter()
        .map(|s| {
            Ok(Example {
                views: session.features.image(&s.image_key)?,
                target: session.class_of(s.pair()).expect("train pairs are seen"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = ModelParams::init(session.backend.text(), vocab, cfg.context_len, cfg.seed)?;
    // move away from the identity initialization so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    for (_, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += 0.05 * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
        }
    }
    let d = cfg.embed_dim;
    let masks = |n: usize, rng: &mut ChaCha8Rng| {
        (cfg.attention_dropout > 0.0)
            .then(|| (0..n).map(|_| dropout_mask(cfg.attention_dropout, d, rng)).collect())
    };
    let noise = StepNoise {
        lambda: objective::sample_lambda(&cfg.beta(), &mut rng, objective::Mode::Train),
        class_masks: masks(seen.len(), &mut rng),
        sample_masks: masks(batch.len(), &mut rng),
    };
    let report = objective::gradient_check(
        &params,
        &problem,
        &batch,
        &noise,
        &cfg.loss_settings(),
        a.step,
        (a.entries > 0).then_some(a.entries),
        exec,
    )?;
    for (name, err, n) in &report.per_tensor {
        println!("{name:<16} {n:>6} entries  max rel err {err:.3e}");
    }
    let ok = report.max_rel_error < GRADCHECK_TOLERANCE;
    println!(
        "max relative error {:.3e} ({} {GRADCHECK_TOLERANCE:e})",
        report.max_rel_error,
        if ok { "<" } else { ">=" }
    );
    Ok(ok)
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let reports = a
        .dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), EvalReport::load(&d.join(report::REPORT_FILE))?)))
        .collect::<Result<Vec<_>>>()?;
    for (d, (_, r)) in a.dirs.iter().zip(&reports) {
        let path = d.join(report::CURVE_PLOT);
        std::fs::write(&path, report::curve_svg(&r.metrics)?).map_err(|e| PlidError::io(&path, e))?;
    }
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    print!("{}", report::metrics_table(&rows));
    Ok(())
}

/// Process exit code of an error: 2 for usage and configuration, 1 otherwise.
pub fn exit_code(e: &PlidError) -> i32 {
    match e {
        PlidError::Config(_) | PlidError::InvalidArgument(_) => 2,
        _ => 1,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
