#![allow(dead_code)]

use std::path::Path;

use plid_core::config::TrainConfig;
use plid_core::corpus::{make_synthetic_dataset, Dataset, SynthSpec};
use plid_core::exec::Execution;
use plid_core::session::{BackendKind, Session};

/// The 5 x 6 fixture: 60% seen, 20 samples per pair, 16 descriptions, seed 7.
pub fn fixture_spec() -> SynthSpec {
    SynthSpec::new(5, 6, 0.6, 20, 16, 7)
}

pub fn write_fixture(dir: &Path) -> Dataset {
    make_synthetic_dataset(&fixture_spec(), dir).expect("fixture generation")
}

/// A small dataset for exhaustive gradient checks.
pub fn write_small(dir: &Path, embed_dim: usize, descriptions: usize) -> Dataset {
    let spec = SynthSpec {
        embed_dim,
        ..SynthSpec::new(3, 3, 0.67, 4, descriptions, 5)
    };
    make_synthetic_dataset(&spec, dir).expect("small dataset generation")
}

pub fn desk(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::desk()
    }
}

pub fn open(dir: &Path, cfg: &TrainConfig) -> Session {
    Session::open(dir, BackendKind::Synthetic, cfg, Execution::Parallel).expect("session")
}

pub fn write_config(path: &Path, cfg: &TrainConfig) {
    std::fs::write(path, cfg.to_json()).unwrap();
}
