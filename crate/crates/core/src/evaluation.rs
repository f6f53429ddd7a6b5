//! Closed- and open-world evaluation with a calibration-bias sweep.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{self, Pair, PrimitiveSimilarity, SampleRecord, SplitKind};
use crate::encoder::TextEncoder;
use crate::error::{PlidError, Result};
use crate::exec::{self, Execution};
use crate::model::ModelParams;
use crate::objective::{class_means, mix_logits};
use crate::session::Session;
use crate::vlpd::PrimitiveTargets;

/// Points on the finite bias grid.
pub const GRID_SIZE: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Closed,
    Open,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Closed => "closed",
            Setting::Open => "open",
        }
    }
}

impl FromStr for Setting {
    type Err = PlidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(Setting::Closed),
            "open" => Ok(Setting::Open),
            other => Err(PlidError::InvalidArgument(format!("unknown setting {other:?}"))),
        }
    }
}

/// JSON has no infinities; the sweep sentinels are written as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    #[serde(with = "extended_f64")]
    pub bias: f64,
    /// Percent.
    pub seen_acc: f64,
    /// Percent.
    pub unseen_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: Setting,
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    /// Area under the unseen-vs-seen accuracy curve, scaled so a perfect
    /// classifier scores 100.
    pub auc: f64,
    pub bias_grid: Vec<BiasPoint>,
}

fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 { 2.0 * s * u / (s + u) } else { 0.0 }
}

/// Trapezoidal area under unseen accuracy over seen accuracy, both as fractions.
pub fn curve_area(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// Biases added to unseen-candidate logits: `grid_size` points spanning
/// `[-gap, gap]`, where `gap` is the largest per-sample difference between
/// the best seen and best unseen logit, followed by the two sentinels that
/// mask one partition entirely.
pub fn bias_grid(logits: &Array2<f64>, candidate_seen: &[bool], grid_size: usize) -> Vec<f64> {
    let gap = logits
        .rows()
        .into_iter()
        .filter_map(|r| {
            let best = |want: bool| {
                r.iter()
                    .zip(candidate_seen)
                    .filter(|(_, &s)| s == want)
                    .map(|(&x, _)| x)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let d = best(true) - best(false);
            d.is_finite().then_some(d.abs())
        })
        .fold(0.0, f64::max);
    let half = (grid_size - 1) as f64 / 2.0;
    let mut grid: Vec<f64> = (0..grid_size)
        .map(|i| gap * (i as f64 - half) / half)
        .collect();
    grid.push(f64::NEG_INFINITY);
    grid.push(f64::INFINITY);
    grid
}

/// Prediction under bias `b`: argmax over candidates of
/// `logit + b * [candidate unseen]`. A tie between a seen and an unseen
/// candidate goes to the seen one, other ties to the lower index, so the
/// result does not depend on how seen and unseen candidates interleave.
fn predict(row: ndarray::ArrayView1<f64>, candidate_seen: &[bool], b: f64) -> Option<usize> {
    let mut best: Option<(f64, bool, usize)> = None;
    for (c, (&x, &seen)) in row.iter().zip(candidate_seen).enumerate() {
        let score = if seen {
            if b == f64::INFINITY {
                continue;
            }
            x
        } else {
            if b == f64::NEG_INFINITY {
                continue;
            }
            if b.is_finite() { x + b } else { x }
        };
        let wins = best.is_none_or(|(v, best_seen, _)| {
            score > v || (score == v && seen && !best_seen)
        });
        if wins {
            best = Some((score, seen, c));
        }
    }
    best.map(|(_, _, c)| c)
}

/// Sweeps a calibration bias over unseen-candidate logits.
///
/// `labels[i]` is the candidate index of sample `i`'s true pair, or `None`
/// when that pair is not among the candidates. `sample_seen[i]` tells which
/// accuracy the sample counts toward.
pub fn bias_sweep(
    logits: &Array2<f64>,
    labels: &[Option<usize>],
    candidate_seen: &[bool],
    sample_seen: &[bool],
    grid_size: usize,
    setting: Setting,
) -> Result<MetricsReport> {
    let (n, c) = logits.dim();
    if labels.len() != n || sample_seen.len() != n || candidate_seen.len() != c {
        return Err(PlidError::Shape(format!(
            "logits {n}x{c}, {} labels, {} sample flags, {} candidate flags",
            labels.len(),
            sample_seen.len(),
            candidate_seen.len()
        )));
    }
    if grid_size < 2 {
        return Err(PlidError::InvalidArgument(format!("grid size {grid_size} < 2")));
    }
    if c == 0 {
        return Err(PlidError::InvalidArgument("no candidates".into()));
    }
    let n_seen = sample_seen.iter().filter(|&&s| s).count();
    let n_unseen = n - n_seen;
    if n_seen == 0 || n_unseen == 0 {
        return Err(PlidError::Validation(format!(
            "need seen and unseen test samples, got {n_seen} seen and {n_unseen} unseen"
        )));
    }
    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
        return Err(PlidError::OutOfRange(format!("label {bad} with {c} candidates")));
    }
    let mut bias_grid_out = Vec::new();
    for b in bias_grid(logits, candidate_seen, grid_size) {
        let (mut hit_seen, mut hit_unseen) = (0usize, 0usize);
        for (i, row) in logits.rows().into_iter().enumerate() {
            let correct = labels[i].is_some() && predict(row, candidate_seen, b) == labels[i];
            if correct {
                if sample_seen[i] {
                    hit_seen += 1;
                } else {
                    hit_unseen += 1;
                }
            }
        }
        bias_grid_out.push(BiasPoint {
            bias: b,
            seen_acc: 100.0 * hit_seen as f64 / n_seen as f64,
            unseen_acc: 100.0 * hit_unseen as f64 / n_unseen as f64,
        });
    }
    let pts: Vec<(f64, f64)> = bias_grid_out
        .iter()
        .map(|p| (p.seen_acc / 100.0, p.unseen_acc / 100.0))
        .collect();
    Ok(MetricsReport {
        setting,
        best_seen: bias_grid_out.iter().map(|p| p.seen_acc).fold(0.0, f64::max),
        best_unseen: bias_grid_out.iter().map(|p| p.unseen_acc).fold(0.0, f64::max),
        best_hm: bias_grid_out
            .iter()
            .map(|p| harmonic_mean(p.seen_acc, p.unseen_acc))
            .fold(0.0, f64::max),
        auc: 100.0 * curve_area(&pts),
        bias_grid: bias_grid_out,
    })
}

/// Evaluation-time scorer: class means without dropout, primitive targets
/// grouped over the training classes.
pub struct Scorer<'a> {
    params: &'a ModelParams,
    targets: Option<PrimitiveTargets>,
    lambda: f64,
}

impl<'a> Scorer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &'a ModelParams,
        text: &TextEncoder,
        seen: &[Pair],
        seen_descriptions: &[&Array2<f64>],
        num_states: usize,
        num_objects: usize,
        lambda: f64,
        exec: Execution,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(PlidError::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        let targets = if lambda > 0.0 {
            let means = class_means(params, text, seen, seen_descriptions, exec)?;
            Some(PrimitiveTargets::new(&means, seen, num_states, num_objects)?)
        } else {
            None
        };
        Ok(Scorer {
            params,
            targets,
            lambda,
        })
    }

    /// `samples x candidates` logits.
    pub fn score(
        &self,
        text: &TextEncoder,
        views: &[&crate::encoder::ImageViews],
        candidates: &[Pair],
        candidate_descriptions: &[&Array2<f64>],
        exec: Execution,
    ) -> Result<Array2<f64>> {
        let means = class_means(self.params, text, candidates, candidate_descriptions, exec)?;
        let rows = exec::try_map_indexed(exec, views.len(), |i| -> Result<Array1<f64>> {
            let v = self.params.vfe.vfe(views[i], None)?;
            let h_comp = means.dot(&v);
            match &self.targets {
                None => Ok(h_comp),
                Some(t) => {
                    let hs = t.states.dot(&self.params.heads.state.apply(v.view()));
                    let ho = t.objects.dot(&self.params.heads.object.apply(v.view()));
                    let h_rc: Array1<f64> =
                        candidates.iter().map(|p| hs[p.state] + ho[p.object]).collect();
                    mix_logits(h_comp.view(), h_rc.view(), self.lambda)
                }
            }
        })?;
        let mut out = Array2::zeros((views.len(), candidates.len()));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        Ok(out)
    }
}

/// Logits of `samples` against `candidates` with the evaluation mixing weight.
pub fn score_test_set(
    params: &ModelParams,
    session: &Session,
    samples: &[&SampleRecord],
    candidates: &[Pair],
    lambda: f64,
    exec: Execution,
) -> Result<Array2<f64>> {
    let text = session.backend.text();
    let vocab = &session.dataset.vocab;
    let scorer = Scorer::new(
        params,
        text,
        session.seen_classes(),
        &session.descriptions(session.seen_classes())?,
        vocab.num_states(),
        vocab.num_objects(),
        lambda,
        exec,
    )?;
    let views = samples
        .iter()
        .map(|s| session.features.image(&s.image_key))
        .collect::<Result<Vec<_>>>()?;
    scorer.score(text, &views, candidates, &session.descriptions(candidates)?, exec)
}

/// Labels and seen flags of `samples` relative to `candidates`.
pub fn sweep_inputs(
    session: &Session,
    samples: &[&SampleRecord],
    candidates: &[Pair],
) -> (Vec<Option<usize>>, Vec<bool>, Vec<bool>) {
    let index: std::collections::HashMap<Pair, usize> =
        candidates.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let split = &session.dataset.split;
    let labels = samples.iter().map(|s| index.get(&s.pair()).copied()).collect();
    let sample_seen = samples.iter().map(|s| split.is_seen(s.pair())).collect();
    let candidate_seen = candidates.iter().map(|&p| split.is_seen(p)).collect();
    (labels, candidate_seen, sample_seen)
}

fn columns(logits: &Array2<f64>, keep: &[usize]) -> Array2<f64> {
    logits.select(ndarray::Axis(1), keep)
}

/// Seen pairs followed by `extra`, deduplicated in order.
fn with_seen(session: &Session, extra: &[Pair]) -> Vec<Pair> {
    let mut out: Vec<Pair> = session.seen_classes().to_vec();
    for &p in extra {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Closed-world validation metrics used for model selection.
pub fn validation_metrics(
    params: &ModelParams,
    session: &Session,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<MetricsReport> {
    let candidates = with_seen(session, &session.dataset.split.unseen_val);
    let samples = session.samples(SplitKind::Val);
    let logits = score_test_set(params, session, &samples, &candidates, cfg.eval_lambda(), exec)?;
    let (labels, cand_seen, sample_seen) = sweep_inputs(session, &samples, &candidates);
    bias_sweep(&logits, &labels, &cand_seen, &sample_seen, GRID_SIZE, Setting::Closed)
}

/// Primitive similarity from the learned primitive vocabulary of the prompt,
/// projected into the joint space.
pub fn learned_similarity(params: &ModelParams, text: &TextEncoder) -> PrimitiveSimilarity {
    let project = |rows: &Array2<f64>| {
        let mut out = Array2::zeros((rows.nrows(), text.embed_dim()));
        for (i, r) in rows.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&text.encode_pooled(r).0);
        }
        out
    };
    PrimitiveSimilarity::from_embeddings(
        &project(&params.prompt.states),
        &project(&params.prompt.objects),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub num_candidates: usize,
    /// Open world only: calibrated feasibility threshold and its validation H.
    pub feasibility: Option<FeasibilityCalibration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCalibration {
    pub threshold: f64,
    pub validation_hm: f64,
}

/// Test-split metrics in one setting. Open world scores every pair of the
/// vocabulary, keeping those whose feasibility reaches a threshold chosen to
/// maximize validation H.
pub fn evaluate(
    params: &ModelParams,
    session: &mut Session,
    cfg: &TrainConfig,
    setting: Setting,
    exec: Execution,
) -> Result<Evaluation> {
    let lambda = cfg.eval_lambda();
    let test = session.dataset.samples_in(SplitKind::Test).cloned().collect::<Vec<_>>();
    let test: Vec<&SampleRecord> = test.iter().collect();
    match setting {
        Setting::Closed => {
            let candidates = with_seen(session, &session.dataset.split.unseen_test);
            let logits = score_test_set(params, session, &test, &candidates, lambda, exec)?;
            let (labels, cand_seen, sample_seen) = sweep_inputs(session, &test, &candidates);
            Ok(Evaluation {
                metrics: bias_sweep(&logits, &labels, &cand_seen, &sample_seen, GRID_SIZE, setting)?,
                num_candidates: candidates.len(),
                feasibility: None,
            })
        }
        Setting::Open => {
            let all = with_seen(session, &session.dataset.vocab.all_pairs());
            session.ensure_descriptions(&all, true, exec)?;
            let val = session.dataset.samples_in(SplitKind::Val).cloned().collect::<Vec<_>>();
            let val: Vec<&SampleRecord> = val.iter().collect();
            let val_logits = score_test_set(params, session, &val, &all, lambda, exec)?;
            let test_logits = score_test_set(params, session, &test, &all, lambda, exec)?;

            let vocab = &session.dataset.vocab;
            let split = &session.dataset.split;
            let sim = learned_similarity(params, session.backend.text());
            let scores = corpus::feasibility_scores(vocab, split, &sim)?;
            let mut thresholds: Vec<f64> = all
                .iter()
                .filter(|p| !split.is_seen(**p))
                .map(|p| scores[[p.state, p.object]])
                .collect();
            thresholds.sort_by(f64::total_cmp);
            thresholds.dedup();
            if thresholds.is_empty() {
                thresholds.push(f64::MIN);
            }

            let keep_for = |t: f64| -> Vec<usize> {
                all.iter()
                    .enumerate()
                    .filter(|(_, p)| split.is_seen(**p) || scores[[p.state, p.object]] >= t)
                    .map(|(i, _)| i)
                    .collect()
            };
            let mut best: Option<FeasibilityCalibration> = None;
            for &t in &thresholds {
                let keep = keep_for(t);
                let cands: Vec<Pair> = keep.iter().map(|&i| all[i]).collect();
                let (labels, cand_seen, sample_seen) = sweep_inputs(session, &val, &cands);
                let m = bias_sweep(
                    &columns(&val_logits, &keep),
                    &labels,
                    &cand_seen,
                    &sample_seen,
                    GRID_SIZE,
                    Setting::Open,
                )?;
                if best.is_none_or(|b| m.best_hm > b.validation_hm) {
                    best = Some(FeasibilityCalibration {
                        threshold: t,
                        validation_hm: m.best_hm,
                    });
                }
            }
            let calib = best.expect("at least one threshold");
            let keep = keep_for(calib.threshold);
            let cands: Vec<Pair> = keep.iter().map(|&i| all[i]).collect();
            let (labels, cand_seen, sample_seen) = sweep_inputs(session, &test, &cands);
            Ok(Evaluation {
                metrics: bias_sweep(
                    &columns(&test_logits, &keep),
                    &labels,
                    &cand_seen,
                    &sample_seen,
                    GRID_SIZE,
                    setting,
                )?,
                num_candidates: cands.len(),
                feasibility: Some(calib),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn perfect_separation_scores_one_hundred() {
        // candidates 0,1 seen; 2,3 unseen
        let logits = array![
            [0.9, 0.1, 0.0, 0.0],
            [0.1, 0.9, 0.0, 0.0],
            [0.0, 0.0, 0.9, 0.1],
            [0.0, 0.0, 0.1, 0.9],
        ];
        let m = bias_sweep(
            &logits,
            &[Some(0), Some(1), Some(2), Some(3)],
            &[true, true, false, false],
            &[true, true, false, false],
            GRID_SIZE,
            Setting::Closed,
        )
        .unwrap();
        assert_eq!(m.best_seen, 100.0);
        assert_eq!(m.best_unseen, 100.0);
        assert_eq!(m.best_hm, 100.0);
        assert_abs_diff_eq!(m.auc, 100.0, epsilon = 1e-12);
        assert_eq!(m.bias_grid.len(), GRID_SIZE + 2);
    }

    #[test]
    fn sentinels_give_partition_only_accuracy() {
        let logits = array![[0.9, 0.5], [0.8, 0.3], [0.4, 0.2]];
        let m = bias_sweep(
            &logits,
            &[Some(0), Some(1), Some(1)],
            &[true, false],
            &[true, false, false],
            GRID_SIZE,
            Setting::Closed,
        )
        .unwrap();
        let plus = m.bias_grid.iter().find(|p| p.bias == f64::INFINITY).unwrap();
        assert_eq!(plus.unseen_acc, 100.0);
        assert_eq!(plus.seen_acc, 0.0);
        assert!(m.bias_grid.iter().all(|p| p.seen_acc >= plus.seen_acc));
        let minus = m.bias_grid.iter().find(|p| p.bias == f64::NEG_INFINITY).unwrap();
        assert_eq!(minus.unseen_acc, 0.0);
        assert_eq!(minus.seen_acc, 100.0);
    }

    #[test]
    fn empty_partition_is_an_error() {
        let logits = array![[0.9, 0.5]];
        let r = bias_sweep(&logits, &[Some(0)], &[true, false], &[true], GRID_SIZE, Setting::Closed);
        assert!(matches!(r, Err(PlidError::Validation(_))));
        let r = bias_sweep(&logits, &[Some(0)], &[true, false], &[true], 1, Setting::Closed);
        assert!(r.is_err());
    }

    #[test]
    fn unlisted_labels_are_always_wrong() {
        let logits = array![[0.9, 0.5], [0.1, 0.3]];
        let m = bias_sweep(&logits, &[None, Some(1)], &[true, false], &[true, false], 5, Setting::Open)
            .unwrap();
        assert_eq!(m.best_seen, 0.0);
        assert_eq!(m.best_unseen, 100.0);
    }

    #[test]
    fn curve_area_of_a_unit_step() {
        assert_abs_diff_eq!(curve_area(&[(0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]), 1.0);
        assert_abs_diff_eq!(curve_area(&[(0.0, 1.0), (1.0, 0.0)]), 0.5);
    }

    #[test]
    fn report_json_round_trip_keeps_sentinels() {
        let logits = array![[0.9, 0.5], [0.1, 0.3]];
        let m = bias_sweep(&logits, &[Some(0), Some(1)], &[true, false], &[true, false], 5, Setting::Open)
            .unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"setting\":\"open\""));
        assert!(text.contains("\"inf\""));
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
