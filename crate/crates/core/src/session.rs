//! A loaded dataset with its encoder backend and cached frozen features.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{self, Dataset, Pair, SampleRecord, SplitKind};
use crate::encoder::{
    EncoderBackend, FeatureStore, PrecomputedBackend, SyntheticBackend,
};
use crate::error::{PlidError, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Precomputed,
}

impl FromStr for BackendKind {
    type Err = PlidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(BackendKind::Synthetic),
            "precomputed" => Ok(BackendKind::Precomputed),
            other => Err(PlidError::InvalidArgument(format!("unknown backend {other:?}"))),
        }
    }
}

pub fn open_backend(
    kind: BackendKind,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Box<dyn EncoderBackend>> {
    Ok(match kind {
        BackendKind::Synthetic => Box::new(
            SyntheticBackend::from_dataset(ds, cfg.encoder_seed, cfg.embed_dim)?
                .with_view_noise(cfg.view_noise),
        ),
        BackendKind::Precomputed => Box::new(
            PrecomputedBackend::from_dataset(ds, cfg.encoder_seed, cfg.embed_dim)?
                .with_view_noise(cfg.view_noise),
        ),
    })
}

const VIEW_SEED_SALT: u64 = 0x7669_6577_7365_6564;

pub struct Session {
    pub dataset: Dataset,
    pub backend: Box<dyn EncoderBackend>,
    pub features: FeatureStore,
    pub descriptions_per_class: usize,
    class_index: HashMap<Pair, usize>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("root", &self.dataset.root)
            .field("pairs", &self.features.descriptions.len())
            .field("images", &self.features.images.len())
            .finish()
    }
}

impl Session {
    /// Loads `root` and caches descriptions of every closed-world pair and
    /// the views of every image.
    pub fn open(root: &Path, kind: BackendKind, cfg: &TrainConfig, exec: Execution) -> Result<Self> {
        let dataset = corpus::load_dataset(root)?;
        let backend = open_backend(kind, &dataset, cfg)?;
        Self::from_parts(dataset, backend, cfg, exec)
    }

    pub fn from_parts(
        dataset: Dataset,
        backend: Box<dyn EncoderBackend>,
        cfg: &TrainConfig,
        exec: Execution,
    ) -> Result<Self> {
        cfg.validate()?;
        if backend.text().embed_dim() != cfg.embed_dim {
            return Err(PlidError::Config(format!(
                "backend width {} differs from embed_dim {}",
                backend.text().embed_dim(),
                cfg.embed_dim
            )));
        }
        let features = FeatureStore::build(
            backend.as_ref(),
            &dataset,
            &dataset.split.closed_world_pairs(),
            cfg.descriptions_per_class,
            cfg.views_per_image,
            cfg.seed ^ VIEW_SEED_SALT,
            exec,
        )?;
        let class_index = dataset
            .split
            .seen
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i))
            .collect();
        Ok(Session {
            dataset,
            backend,
            features,
            descriptions_per_class: cfg.descriptions_per_class,
            class_index,
        })
    }

    pub fn seen_classes(&self) -> &[Pair] {
        &self.dataset.split.seen
    }

    /// Index of a seen pair in [`Session::seen_classes`].
    pub fn class_of(&self, p: Pair) -> Option<usize> {
        self.class_index.get(&p).copied()
    }

    pub fn samples(&self, kind: SplitKind) -> Vec<&SampleRecord> {
        self.dataset.samples_in(kind).collect()
    }

    pub fn descriptions(&self, pairs: &[Pair]) -> Result<Vec<&Array2<f64>>> {
        let missing: Vec<(usize, usize)> = pairs
            .iter()
            .filter(|p| !self.features.descriptions.contains_key(p))
            .map(|p| (p.state, p.object))
            .collect();
        if !missing.is_empty() {
            return Err(PlidError::MissingDescriptions(missing));
        }
        pairs.iter().map(|&p| self.features.description(p)).collect()
    }

    /// Caches descriptions for `pairs`. With `templates`, pairs the backend
    /// cannot describe get template sentences encoded by the surrogate text
    /// encoder.
    pub fn ensure_descriptions(&mut self, pairs: &[Pair], templates: bool, exec: Execution) -> Result<()> {
        let m = self.descriptions_per_class;
        match self
            .features
            .add_pairs(self.backend.as_ref(), &self.dataset, pairs, m, exec)
        {
            Err(PlidError::MissingDescriptions(missing)) if templates => {
                let text = self.backend.text();
                for (s, o) in missing {
                    let p = Pair::new(s, o);
                    let sentences =
                        corpus::template_descriptions(&self.dataset.vocab, p, m, text.seed());
                    let mut emb = Array2::zeros((m, text.embed_dim()));
                    for (i, t) in sentences.iter().enumerate() {
                        emb.row_mut(i).assign(&text.encode_sentence(t)?);
                    }
                    self.features.descriptions.insert(p, emb);
                }
                Ok(())
            }
            other => other,
        }
    }
}
