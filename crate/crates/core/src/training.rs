//! Optimization loop, model selection and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{Pair, SplitKind};
use crate::error::{PlidError, Result};
use crate::evaluation::{self, MetricsReport};
use crate::exec::Execution;
use crate::lid::dropout_mask;
use crate::matrix::{self, Precision};
use crate::model::{ModelParams, TENSOR_NAMES};
use crate::objective::{self, Example, LossReport, Mode, StepNoise, TrainingProblem};
use crate::session::Session;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let g = grad.tensors();
        let m = self.first_moment.tensors_mut();
        let v = self.second_moment.tensors_mut();
        for ((((_, p), (_, _, g)), (_, m)), (_, v)) in
            params.tensors_mut().into_iter().zip(g).zip(m).zip(v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * wd * p[i];
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_y: Option<f64>,
    pub loss_s: Option<f64>,
    pub loss_o: Option<f64>,
    pub lr: Option<f64>,
    #[serde(rename = "val_AUC")]
    pub val_auc: f64,
}

/// Parameters with the state needed to continue training from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub epoch: usize,
    pub validation: MetricsReport,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Highest validation AUC seen so far, earliest epoch on ties.
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Generator of epoch `epoch`; each epoch draws from its own stream so a
/// resumed run replays exactly the draws of an uninterrupted one.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

struct Prepared<'a> {
    problem: TrainingProblem<'a>,
    train: Vec<(&'a crate::encoder::ImageViews, usize)>,
}

fn prepare<'a>(session: &'a Session, cfg: &TrainConfig, exec: Execution) -> Result<Prepared<'a>> {
    let seen: Vec<Pair> = session.seen_classes().to_vec();
    let descs = session.descriptions(&seen)?;
    let vocab = &session.dataset.vocab;
    let problem = TrainingProblem::new(
        session.backend.text(),
        seen.clone(),
        descs,
        vocab.num_states(),
        vocab.num_objects(),
        cfg.shares_covariance(seen.len()),
        exec,
    )?;
    let train = session
        .dataset
        .samples_in(SplitKind::Train)
        .map(|s| {
            let class = session.class_of(s.pair()).ok_or_else(|| {
                PlidError::Validation(format!("train sample {} has unseen pair", s.image_key))
            })?;
            Ok((session.features.image(&s.image_key)?, class))
        })
        .collect::<Result<Vec<_>>>()?;
    if train.is_empty() {
        return Err(PlidError::Validation("no training samples".into()));
    }
    Ok(Prepared { problem, train })
}

fn check_compatible(ckpt: &Checkpoint, session: &Session, cfg: &TrainConfig) -> Result<()> {
    let fresh = ModelParams::init(
        session.backend.text(),
        &session.dataset.vocab,
        cfg.context_len,
        cfg.seed,
    )?;
    let want: Vec<_> = fresh.tensors().iter().map(|(n, s, _)| (*n, *s)).collect();
    let got: Vec<_> = ckpt.params.tensors().iter().map(|(n, s, _)| (*n, *s)).collect();
    if want != got {
        return Err(PlidError::Shape(format!(
            "checkpoint tensors {got:?} do not match the dataset/config {want:?}"
        )));
    }
    Ok(())
}

fn run_epochs(
    session: &Session,
    cfg: &TrainConfig,
    mut outcome: TrainOutcome,
    target_epoch: usize,
    exec: Execution,
) -> Result<TrainOutcome> {
    if outcome.last.epoch >= target_epoch {
        return Ok(outcome);
    }
    let prepared = prepare(session, cfg, exec)?;
    let settings = cfg.loss_settings();
    let prior = cfg.beta();
    let d = cfg.embed_dim;
    let num_classes = prepared.problem.num_classes();
    let last = &mut outcome.last;
    for epoch in last.epoch + 1..=target_epoch {
        let lr = cfg.lr_at_epoch(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..prepared.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_y, mut sum_s, mut sum_o) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&i| Example {
                    views: prepared.train[i].0,
                    target: prepared.train[i].1,
                })
                .collect();
            let lambda = if cfg.use_vlpd {
                objective::sample_lambda(&prior, &mut rng, Mode::Train)
            } else {
                0.0
            };
            let masks = |n: usize, rng: &mut ChaCha8Rng| {
                (cfg.attention_dropout > 0.0).then(|| {
                    (0..n).map(|_| dropout_mask(cfg.attention_dropout, d, rng)).collect()
                })
            };
            let class_masks = masks(num_classes, &mut rng);
            let sample_masks = masks(batch.len(), &mut rng);
            let noise = StepNoise {
                lambda,
                class_masks,
                sample_masks,
            };
            let (report, grad) = objective::total_loss_and_grad(
                &last.params,
                &prepared.problem,
                &batch,
                &noise,
                &settings,
                exec,
            )?;
            check_finite(&report, &grad, epoch, step)?;
            last.optimizer.update(&mut last.params, &grad, lr);
            let n = batch.len() as f64;
            sum_y += report.loss_y * n;
            sum_s += report.loss_s * n;
            sum_o += report.loss_o * n;
        }
        let n = prepared.train.len() as f64;
        let validation = evaluation::validation_metrics(&last.params, session, cfg, exec)?;
        last.log.push(EpochLog {
            epoch,
            loss_y: Some(sum_y / n),
            loss_s: Some(sum_s / n),
            loss_o: Some(sum_o / n),
            lr: Some(lr),
            val_auc: validation.auc,
        });
        last.epoch = epoch;
        last.validation = validation;
        if last.validation.auc > last.best_val_auc {
            last.best_epoch = epoch;
            last.best_val_auc = last.validation.auc;
            outcome.best = last.clone();
        }
    }
    // the best checkpoint carries the full history so either can seed a resume
    outcome.best.log = outcome.last.log.clone();
    Ok(outcome)
}

fn check_finite(report: &LossReport, grad: &ModelParams, epoch: usize, step: usize) -> Result<()> {
    if let Some(term) = report.first_nonfinite() {
        return Err(PlidError::NonFiniteLoss { term, epoch, step });
    }
    if !grad.all_finite() {
        return Err(PlidError::NonFiniteLoss {
            term: "gradient",
            epoch,
            step,
        });
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs from a seeded initialization.
pub fn train(session: &Session, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(
        session.backend.text(),
        &session.dataset.vocab,
        cfg.context_len,
        cfg.seed,
    )?;
    let validation = evaluation::validation_metrics(&params, session, cfg, exec)?;
    let init = Checkpoint {
        optimizer: AdamW::new(&params, cfg.weight_decay),
        params,
        config: cfg.clone(),
        epoch: 0,
        best_epoch: 0,
        best_val_auc: validation.auc,
        log: vec![EpochLog {
            epoch: 0,
            loss_y: None,
            loss_s: None,
            loss_o: None,
            lr: None,
            val_auc: validation.auc,
        }],
        validation,
    };
    let outcome = TrainOutcome {
        best: init.clone(),
        last: init,
    };
    run_epochs(session, cfg, outcome, cfg.epochs, exec)
}

/// Continues `outcome` for `extra_epochs` more epochs with its stored config.
pub fn resume(
    session: &Session,
    outcome: TrainOutcome,
    extra_epochs: usize,
    exec: Execution,
) -> Result<TrainOutcome> {
    let cfg = outcome.last.config.clone();
    check_compatible(&outcome.last, session, &cfg)?;
    check_compatible(&outcome.best, session, &cfg)?;
    let target = outcome.last.epoch + extra_epochs;
    let mut out = run_epochs(session, &cfg, outcome, target, exec)?;
    out.last.config.epochs = out.last.epoch;
    out.best.config.epochs = out.last.epoch;
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: u32,
    epoch: usize,
    best_epoch: usize,
    best_val_auc: f64,
    /// Epoch whose generator stream is drawn next.
    next_rng_stream: usize,
    config: TrainConfig,
    validation: MetricsReport,
    optimizer: OptimizerEntry,
    tensors: Vec<TensorEntry>,
    log: Vec<EpochLog>,
}

fn tensor_path(dir: &Path, group: &str, name: &str) -> PathBuf {
    dir.join(group).join(format!("{name}.mat"))
}

fn write_tensors(dir: &Path, group: &str, params: &ModelParams) -> Result<()> {
    let sub = dir.join(group);
    std::fs::create_dir_all(&sub).map_err(|e| PlidError::io(&sub, e))?;
    for (name, shape, data) in params.tensors() {
        let m = ndarray::Array2::from_shape_vec(shape, data.to_vec())
            .expect("tensor data matches its shape");
        matrix::write(&tensor_path(dir, group, name), &m, Precision::F64)?;
    }
    Ok(())
}

fn read_tensors(dir: &Path, group: &str, into: &mut ModelParams, entries: &[TensorEntry]) -> Result<()> {
    let loaded = entries
        .iter()
        .map(|e| {
            let m = matrix::read(&tensor_path(dir, group, &e.name))?;
            if m.dim() != e.shape {
                return Err(PlidError::Shape(format!(
                    "{group}/{}: file holds {:?}, manifest says {:?}",
                    e.name,
                    m.dim(),
                    e.shape
                )));
            }
            Ok((e.name.clone(), e.shape, m.iter().copied().collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    into.load_tensors(&loaded)
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| PlidError::Load {
        path: path.clone(),
        source: e,
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| PlidError::parse(&path, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(PlidError::parse(&path, format!("unsupported format {}", manifest.format)));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

impl Checkpoint {
    /// Writes `manifest.json` and one f64 matrix file per tensor, for the
    /// parameters and both optimizer moments.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PlidError::io(dir, e))?;
        write_tensors(dir, "params", &self.params)?;
        write_tensors(dir, "adam_m", &self.optimizer.first_moment)?;
        write_tensors(dir, "adam_v", &self.optimizer.second_moment)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            epoch: self.epoch,
            best_epoch: self.best_epoch,
            best_val_auc: self.best_val_auc,
            next_rng_stream: self.epoch + 1,
            config: self.config.clone(),
            validation: self.validation.clone(),
            optimizer: OptimizerEntry {
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                weight_decay: self.optimizer.weight_decay,
                step: self.optimizer.step,
            },
            tensors: self
                .params
                .tensors()
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.to_string(),
                    shape: *s,
                })
                .collect(),
            log: self.log.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| PlidError::io(&path, e))
    }

    /// Configuration stored in a checkpoint directory.
    pub fn load_config(dir: &Path) -> Result<TrainConfig> {
        Ok(read_manifest(dir)?.config)
    }

    /// Loads a checkpoint written by [`Checkpoint::save`]; tensor shapes are
    /// checked against the manifest and against `session`.
    pub fn load(dir: &Path, session: &Session) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        if names != TENSOR_NAMES {
            return Err(PlidError::Validation(format!("unexpected tensor list {names:?}")));
        }
        let cfg = &manifest.config;
        let mut params = ModelParams::init(
            session.backend.text(),
            &session.dataset.vocab,
            cfg.context_len,
            cfg.seed,
        )?;
        read_tensors(dir, "params", &mut params, &manifest.tensors)?;
        let mut optimizer = AdamW::new(&params, manifest.optimizer.weight_decay);
        read_tensors(dir, "adam_m", &mut optimizer.first_moment, &manifest.tensors)?;
        read_tensors(dir, "adam_v", &mut optimizer.second_moment, &manifest.tensors)?;
        optimizer.beta1 = manifest.optimizer.beta1;
        optimizer.beta2 = manifest.optimizer.beta2;
        optimizer.eps = manifest.optimizer.eps;
        optimizer.step = manifest.optimizer.step;
        if !params.all_finite() {
            return Err(PlidError::Validation(format!("{} holds non-finite parameters", dir.display())));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            config: manifest.config,
            epoch: manifest.epoch,
            validation: manifest.validation,
            best_epoch: manifest.best_epoch,
            best_val_auc: manifest.best_val_auc,
            log: manifest.log,
        })
    }
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PlidError::parse(path, e.to_string()))?;
    for row in log {
        w.serialize(row).map_err(|e| PlidError::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| PlidError::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PlidError::parse(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| PlidError::parse(path, e.to_string())))
        .collect()
}

impl TrainOutcome {
    /// Writes `best/`, `last/` and `train_log.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.best.save(&dir.join("best"))?;
        self.last.save(&dir.join("last"))?;
        write_log(&dir.join(LOG_FILE), &self.last.log)
    }

    pub fn load(dir: &Path, session: &Session) -> Result<Self> {
        Ok(TrainOutcome {
            best: Checkpoint::load(&dir.join("best"), session)?,
            last: Checkpoint::load(&dir.join("last"), session)?,
        })
    }
}
