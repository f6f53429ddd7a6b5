mod common;

use std::collections::BTreeMap;
use std::path::Path;

use plid_core::corpus::{
    load_dataset, make_synthetic_dataset, write_dataset, SplitKind, SynthSpec, SAMPLES_FILE,
    SPLITS_FILE, VOCABULARY_FILE,
};
use plid_core::encoder::{EncoderBackend, PrecomputedBackend, SyntheticBackend};
use plid_core::exec::Execution;
use plid_core::linalg::dot;
use plid_core::session::{BackendKind, Session};
use plid_core::PlidError;

fn file_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn fixture_counts_read_back() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fixture(dir.path());
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.vocab.num_states(), 5);
    assert_eq!(ds.vocab.num_objects(), 6);
    assert_eq!(ds.split.seen.len(), 18);
    assert_eq!(ds.vocab.all_pairs().len() - ds.split.seen.len(), 12);
    assert_eq!(ds.corpus.per_pair(), Some(16));
    for s in ds.samples_in(SplitKind::Train) {
        assert!(ds.split.is_seen(s.pair()));
    }
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::write_fixture(a.path());
    common::write_fixture(b.path());
    let fa = file_bytes(a.path());
    assert!(fa.contains_key(VOCABULARY_FILE) && fa.contains_key(SAMPLES_FILE));
    assert_eq!(fa, file_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    make_synthetic_dataset(&SynthSpec { seed: 8, ..common::fixture_spec() }, c.path()).unwrap();
    assert_ne!(fa, file_bytes(c.path()));
}

#[test]
fn write_then_load_round_trips() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ds = common::write_fixture(a.path());
    let loaded = load_dataset(a.path()).unwrap();
    write_dataset(&loaded, b.path()).unwrap();
    let again = load_dataset(b.path()).unwrap();
    for d in [&loaded, &again] {
        assert_eq!(d.vocab, ds.vocab);
        assert_eq!(d.split, ds.split);
        assert_eq!(d.corpus, ds.corpus);
        assert_eq!(d.samples, ds.samples);
    }
}

#[test]
fn train_sample_with_unseen_pair_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = common::write_fixture(dir.path());
    let unseen = ds.split.unseen_test[0];
    let rec = ds.samples.iter_mut().find(|s| s.split == SplitKind::Train).unwrap();
    rec.state = unseen.state;
    rec.object = unseen.object;
    write_dataset(&ds, dir.path()).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, PlidError::Validation(_)), "{err}");
    assert!(err.to_string().contains(&rec_key(&ds)), "{err}");
}

fn rec_key(ds: &plid_core::corpus::Dataset) -> String {
    ds.samples.iter().find(|s| s.split == SplitKind::Train).unwrap().image_key.clone()
}

#[test]
fn missing_file_error_names_it() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fixture(dir.path());
    std::fs::remove_file(dir.path().join(SPLITS_FILE)).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, PlidError::Load { .. }), "{err}");
    assert!(err.to_string().contains(SPLITS_FILE), "{err}");
}

#[test]
fn empty_state_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    common::write_fixture(dir.path());
    std::fs::write(
        dir.path().join(VOCABULARY_FILE),
        r#"{"states": [], "objects": ["apple", "box"]}"#,
    )
    .unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(PlidError::Validation(_))));
}

#[test]
fn full_and_infeasible_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_synthetic_dataset(&SynthSpec::new(2, 2, 1.0, 1, 1, 0), &dir.path().join("full")).unwrap();
    assert_eq!(ds.split.seen.len(), 4);
    assert!(ds.split.unseen_val.is_empty() && ds.split.unseen_test.is_empty());
    let err = make_synthetic_dataset(&SynthSpec::new(2, 2, 0.25, 1, 1, 3), &dir.path().join("thin"));
    assert!(matches!(err, Err(PlidError::Construction(_))), "{err:?}");
}

#[test]
fn views_stay_close_to_their_anchor_on_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::write_fixture(dir.path());
    let backend = SyntheticBackend::from_dataset(&ds, 7, 64).unwrap();
    let mut worst = f64::INFINITY;
    for s in ds.samples.iter().step_by(7) {
        let v = backend.augment_views(&s.image_key, 8, 11).unwrap();
        assert_eq!(v.views.nrows(), 8);
        for r in v.views.rows() {
            worst = worst.min(dot(r, v.anchor.view()));
        }
    }
    assert!(worst > 0.9, "lowest anchor/view cosine {worst}");
}

#[test]
fn precomputed_embeddings_match_the_synthetic_backend() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::write_fixture(dir.path());
    let synthetic = SyntheticBackend::from_dataset(&ds, 7, 64).unwrap();
    PrecomputedBackend::export(dir.path(), &ds, &synthetic, 16).unwrap();
    let cfg = common::desk(1);
    let a = Session::open(dir.path(), BackendKind::Synthetic, &cfg, Execution::Sequential).unwrap();
    let b = Session::open(dir.path(), BackendKind::Precomputed, &cfg, Execution::Sequential).unwrap();
    let seen = a.seen_classes().to_vec();
    for (x, y) in a.descriptions(&seen).unwrap().iter().zip(b.descriptions(&seen).unwrap()) {
        let diff = (*x - y).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-6, "description embeddings differ by {diff}");
    }
    for s in ds.samples.iter().step_by(13) {
        let x = a.features.image(&s.image_key).unwrap();
        let y = b.features.image(&s.image_key).unwrap();
        let diff = (&x.anchor - &y.anchor).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-6, "anchor {} differs by {diff}", s.image_key);
    }
}
