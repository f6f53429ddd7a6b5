//! Losses, logit mixup and the full forward/backward pass.
//!
//! The compositional loss is the margin-augmented cross entropy
//! `-log exp(h_y/tau) / sum_k exp((h_k + m_ky)/tau)` with
//! `m_ky = sum_j v_j^2 A[j,k,y] / (2 tau)`, which upper-bounds the negative
//! log of the expected softmax likelihood when class embeddings are drawn
//! from the per-dimension joint Gaussians. The same form is used for the
//! state and object losses on the decomposed features.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::corpus::Pair;
use crate::encoder::{ImageViews, TextEncoder};
use crate::error::{PlidError, Result};
use crate::exec::{self, Execution};
use crate::lid::{
    self, AttentionCache, ClassDistributionSet, CrossAttention, MarginTensor,
};
use crate::linalg::{log_sum_exp, softmax_inplace};
use crate::model::ModelParams;
use crate::vlpd::{DecompositionHeads, PrimitiveTargets};

/// Cosine logits of a unit visual feature against unit class means.
pub fn csp_logits(v: ArrayView1<f64>, means: &Array2<f64>) -> Array1<f64> {
    means.dot(&v)
}

fn check_loss_inputs(
    logits: ArrayView1<f64>,
    margins: ArrayView1<f64>,
    target: usize,
    tau: f64,
) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 || tau.is_infinite() {
        return Err(PlidError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if logits.len() != margins.len() || target >= logits.len() {
        return Err(PlidError::Shape(format!(
            "{} logits, {} margins, target {target}",
            logits.len(),
            margins.len()
        )));
    }
    if logits.iter().chain(margins.iter()).any(|x| !x.is_finite()) {
        return Err(PlidError::InvalidArgument("non-finite logits or margins".into()));
    }
    if margins[target] != 0.0 {
        return Err(PlidError::InvalidArgument(format!(
            "target margin must be 0, got {}",
            margins[target]
        )));
    }
    Ok(())
}

/// Margin-augmented cross entropy of one sample.
pub fn loss_upper_bound(
    logits: ArrayView1<f64>,
    margins: ArrayView1<f64>,
    target: usize,
    tau: f64,
) -> Result<f64> {
    check_loss_inputs(logits, margins, target, tau)?;
    let z = (&logits + &margins) / tau;
    Ok(log_sum_exp(z.view()) - logits[target] / tau)
}

/// Loss value with gradients with respect to logits and margins.
pub fn loss_upper_bound_grad(
    logits: ArrayView1<f64>,
    margins: ArrayView1<f64>,
    target: usize,
    tau: f64,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    check_loss_inputs(logits, margins, target, tau)?;
    let mut p = (&logits + &margins) / tau;
    let loss = log_sum_exp(p.view()) - logits[target] / tau;
    softmax_inplace(p.view_mut());
    let d_margins = &p / tau;
    let mut d_logits = d_margins.clone();
    d_logits[target] -= 1.0 / tau;
    Ok((loss, d_logits, d_margins))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(PlidError::InvalidArgument(format!(
                "Beta prior needs a, b > 0; got ({a}, {b})"
            )));
        }
        Ok(BetaPrior { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One Beta draw in training; the prior mean in evaluation.
pub fn sample_lambda(prior: &BetaPrior, rng: &mut impl Rng, mode: Mode) -> f64 {
    match mode {
        Mode::Eval => prior.mean(),
        Mode::Train => Beta::new(prior.a, prior.b)
            .expect("validated prior")
            .sample(rng),
    }
}

/// `(1 - lambda) h_comp + lambda h_rc`; the endpoints return a pure path.
pub fn mix_logits(
    h_comp: ArrayView1<f64>,
    h_rc: ArrayView1<f64>,
    lambda: f64,
) -> Result<Array1<f64>> {
    if h_comp.len() != h_rc.len() {
        return Err(PlidError::Shape(format!(
            "compositional {} vs recomposed {}",
            h_comp.len(),
            h_rc.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PlidError::InvalidArgument(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    Ok(if lambda == 0.0 {
        h_comp.to_owned()
    } else if lambda == 1.0 {
        h_rc.to_owned()
    } else {
        Array1::from_shape_fn(h_comp.len(), |i| (1.0 - lambda) * h_comp[i] + lambda * h_rc[i])
    })
}

/// Loss knobs that change the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub state_weight: f64,
    pub object_weight: f64,
    /// Covariance margins on all three losses.
    pub use_margins: bool,
    /// Primitive heads, primitive losses and logit mixup.
    pub use_decomposition: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            tau: 0.01,
            state_weight: 0.1,
            object_weight: 0.1,
            use_margins: true,
            use_decomposition: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_y: f64,
    pub loss_s: f64,
    pub loss_o: f64,
    pub total: f64,
    pub weights: (f64, f64),
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        [
            ("loss_y", self.loss_y),
            ("loss_s", self.loss_s),
            ("loss_o", self.loss_o),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Logits of a batch in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub h_comp: Array2<f64>,
    pub h_rc_flat: Array2<f64>,
    pub h_mixed: Array2<f64>,
    pub h_state: Array2<f64>,
    pub h_object: Array2<f64>,
    pub lambda_used: f64,
}

/// Frozen inputs of the training objective: the class list, description
/// supports and the margin tensors derived from them.
#[derive(Debug, Clone)]
pub struct TrainingProblem<'a> {
    pub text: &'a TextEncoder,
    pub classes: Vec<Pair>,
    pub descriptions: Vec<&'a Array2<f64>>,
    pub num_states: usize,
    pub num_objects: usize,
    pub margins: MarginTensor,
    pub state_margins: MarginTensor,
    pub object_margins: MarginTensor,
}

impl<'a> TrainingProblem<'a> {
    /// Builds margins from the description offsets. Support points are
    /// `t_y + D_y`, so the covariance depends only on the frozen `D_y`.
    pub fn new(
        text: &'a TextEncoder,
        classes: Vec<Pair>,
        descriptions: Vec<&'a Array2<f64>>,
        num_states: usize,
        num_objects: usize,
        share_covariance: bool,
        exec: Execution,
    ) -> Result<Self> {
        let d = text.embed_dim();
        let dist = ClassDistributionSet::from_parts(
            classes.clone(),
            Array2::zeros((classes.len(), d)),
            &descriptions,
            exec,
        )?;
        let margins = if share_covariance {
            lid::share_covariance(&dist, num_objects, exec)?.margins
        } else {
            lid::margin_tensor(&dist)
        };
        let prim = lid::primitive_distributions(&dist, num_states, num_objects, exec)?;
        Ok(TrainingProblem {
            text,
            classes,
            descriptions,
            num_states,
            num_objects,
            margins,
            state_margins: MarginTensor::Dense(prim.states.margins()),
            object_margins: MarginTensor::Dense(prim.objects.margins()),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// One training example: image views and the index of its class.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub views: &'a ImageViews,
    pub target: usize,
}

/// Randomness of one optimization step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepNoise {
    pub lambda: f64,
    /// Text-enhancement dropout mask per class.
    pub class_masks: Option<Vec<Array1<f64>>>,
    /// Visual-enhancement dropout mask per example.
    pub sample_masks: Option<Vec<Array1<f64>>>,
}

impl StepNoise {
    pub fn eval(lambda: f64) -> Self {
        StepNoise {
            lambda,
            ..Default::default()
        }
    }
}

/// Class means `t_c` of `classes` without dropout.
pub fn class_means(
    params: &ModelParams,
    text: &TextEncoder,
    classes: &[Pair],
    descriptions: &[&Array2<f64>],
    exec: Execution,
) -> Result<Array2<f64>> {
    if classes.len() != descriptions.len() {
        return Err(PlidError::Shape(format!(
            "{} classes, {} description sets",
            classes.len(),
            descriptions.len()
        )));
    }
    let rows = exec::try_map_indexed(exec, classes.len(), |i| -> Result<Array1<f64>> {
        let pooled = params.prompt.pooled(classes[i])?;
        let (q, _) = text.encode_pooled(pooled.view());
        params.tfe.tfe(q.view(), descriptions[i].view(), None)
    })?;
    let mut means = Array2::zeros((classes.len(), params.embed_dim()));
    for (i, r) in rows.iter().enumerate() {
        means.row_mut(i).assign(r);
    }
    Ok(means)
}

struct ClassPass<'a> {
    queries: Vec<(Array1<f64>, f64)>,
    caches: Vec<AttentionCache<'a>>,
    means: Array2<f64>,
}

fn class_forward<'a>(
    params: &ModelParams,
    problem: &TrainingProblem<'a>,
    masks: Option<&Vec<Array1<f64>>>,
    exec: Execution,
) -> Result<ClassPass<'a>> {
    let c = problem.num_classes();
    let rows = exec::try_map_indexed(exec, c, |i| -> Result<_> {
        let pooled = params.prompt.pooled(problem.classes[i])?;
        let (q, qn) = problem.text.encode_pooled(pooled.view());
        let cache = params.tfe.forward(
            q.view(),
            problem.descriptions[i].view(),
            masks.map(|m| &m[i]),
        )?;
        Ok(((q, qn), cache))
    })?;
    let mut means = Array2::zeros((c, params.embed_dim()));
    let mut queries = Vec::with_capacity(c);
    let mut caches = Vec::with_capacity(c);
    for (i, (q, cache)) in rows.into_iter().enumerate() {
        means.row_mut(i).assign(&cache.output);
        queries.push(q);
        caches.push(cache);
    }
    Ok(ClassPass {
        queries,
        caches,
        means,
    })
}

struct SampleGrad {
    d_means: Array2<f64>,
    d_states: Array2<f64>,
    d_objects: Array2<f64>,
    vfe: CrossAttention,
    heads: DecompositionHeads,
}

/// `h_comp`, `h_rc`, mixed, state and object logits of one sample.
type SampleLogits = (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>);

struct SampleOut {
    loss_y: f64,
    loss_s: f64,
    loss_o: f64,
    grad: Option<SampleGrad>,
    logits: Option<SampleLogits>,
}

#[allow(clippy::too_many_arguments)]
fn sample_pass(
    params: &ModelParams,
    problem: &TrainingProblem<'_>,
    means: &Array2<f64>,
    targets: Option<&PrimitiveTargets>,
    example: &Example<'_>,
    mask: Option<&Array1<f64>>,
    lambda: f64,
    settings: &LossSettings,
    want_grad: bool,
    keep_logits: bool,
) -> Result<SampleOut> {
    let tau = settings.tau;
    let y = example.target;
    let pair = problem.classes[y];
    let support = example.views.support();
    let vcache = params.vfe.forward(example.views.anchor.view(), support.view(), mask)?;
    let v = &vcache.output;
    let h_comp = csp_logits(v.view(), means);
    let c = problem.num_classes();

    let margin_terms = |a: &MarginTensor, f: &Array1<f64>, target: usize| -> Array1<f64> {
        if settings.use_margins {
            let sq = f.mapv(|x| x * x);
            let mut m = a.weighted_column(sq.view(), target) / (2.0 * tau);
            m[target] = 0.0;
            m
        } else {
            Array1::zeros(a.num_classes())
        }
    };

    let m_y = margin_terms(&problem.margins, v, y);

    let decomposition = match targets {
        Some(t) if settings.use_decomposition => {
            let fs = params.heads.state.forward(v.view());
            let fo = params.heads.object.forward(v.view());
            let hs = t.states.dot(&fs.output);
            let ho = t.objects.dot(&fo.output);
            Some((t, fs, fo, hs, ho))
        }
        _ => None,
    };

    let (mixed, h_rc) = match &decomposition {
        Some((_, _, _, hs, ho)) => {
            let h_rc: Array1<f64> = problem
                .classes
                .iter()
                .map(|p| hs[p.state] + ho[p.object])
                .collect();
            (mix_logits(h_comp.view(), h_rc.view(), lambda)?, h_rc)
        }
        None => (h_comp.clone(), Array1::zeros(c)),
    };

    let (loss_y, d_mixed, d_my) = loss_upper_bound_grad(mixed.view(), m_y.view(), y, tau)?;

    let mut loss_s = 0.0;
    let mut loss_o = 0.0;
    let mut prim_grads = None;
    if let Some((_, fs, fo, hs, ho)) = &decomposition {
        let m_s = margin_terms(&problem.state_margins, &fs.output, pair.state);
        let m_o = margin_terms(&problem.object_margins, &fo.output, pair.object);
        let (ls, d_hs, d_ms) = loss_upper_bound_grad(hs.view(), m_s.view(), pair.state, tau)?;
        let (lo, d_ho, d_mo) = loss_upper_bound_grad(ho.view(), m_o.view(), pair.object, tau)?;
        loss_s = ls;
        loss_o = lo;
        prim_grads = Some((d_hs, d_ms, d_ho, d_mo));
    }

    let logits = keep_logits.then(|| {
        let (hs, ho) = match &decomposition {
            Some((_, _, _, hs, ho)) => (hs.clone(), ho.clone()),
            None => (
                Array1::zeros(problem.num_states),
                Array1::zeros(problem.num_objects),
            ),
        };
        (h_comp.clone(), h_rc.clone(), mixed.clone(), hs, ho)
    });

    if !want_grad {
        return Ok(SampleOut {
            loss_y,
            loss_s,
            loss_o,
            grad: None,
            logits,
        });
    }

    let d = params.embed_dim();
    let mut g = SampleGrad {
        d_means: Array2::zeros((c, d)),
        d_states: Array2::zeros((problem.num_states, d)),
        d_objects: Array2::zeros((problem.num_objects, d)),
        vfe: params.vfe.zeros_like(),
        heads: params.heads.zeros_like(),
    };

    // d/dv of the compositional margins: m_k = sum_j v_j^2 A[j,k,y] / (2 tau)
    let margin_back = |a: &MarginTensor, f: &Array1<f64>, dm: &Array1<f64>, target: usize| {
        let mut dm = dm.clone();
        dm[target] = 0.0;
        let col = a.contract_column(dm.view(), target);
        Array1::from_shape_fn(f.len(), |j| f[j] * col[j] / tau)
    };

    let (d_comp, d_rc) = if decomposition.is_some() {
        (&d_mixed * (1.0 - lambda), &d_mixed * lambda)
    } else {
        (d_mixed.clone(), Array1::zeros(c))
    };
    for (k, &g_k) in d_comp.iter().enumerate() {
        g.d_means.row_mut(k).scaled_add(g_k, v);
    }
    let mut dv = means.t().dot(&d_comp);
    if settings.use_margins {
        dv += &margin_back(&problem.margins, v, &d_my, y);
    }

    if let (Some((t, fs, fo, _, _)), Some((d_hs, d_ms, d_ho, d_mo))) = (&decomposition, prim_grads) {
        let mut dh_s = d_hs * settings.state_weight;
        let mut dh_o = d_ho * settings.object_weight;
        for (k, p) in problem.classes.iter().enumerate() {
            dh_s[p.state] += d_rc[k];
            dh_o[p.object] += d_rc[k];
        }
        for (i, &gi) in dh_s.iter().enumerate() {
            g.d_states.row_mut(i).scaled_add(gi, &fs.output);
        }
        for (i, &gi) in dh_o.iter().enumerate() {
            g.d_objects.row_mut(i).scaled_add(gi, &fo.output);
        }
        let mut dfs = t.states.t().dot(&dh_s);
        let mut dfo = t.objects.t().dot(&dh_o);
        if settings.use_margins {
            dfs += &(margin_back(&problem.state_margins, &fs.output, &d_ms, pair.state)
                * settings.state_weight);
            dfo += &(margin_back(&problem.object_margins, &fo.output, &d_mo, pair.object)
                * settings.object_weight);
        }
        dv += &params.heads.state.backward(fs, dfs.view(), &mut g.heads.state);
        dv += &params.heads.object.backward(fo, dfo.view(), &mut g.heads.object);
    }

    // the anchor is frozen; only the attention weights receive gradient
    let _ = params.vfe.backward(&vcache, dv.view(), &mut g.vfe);

    Ok(SampleOut {
        loss_y,
        loss_s,
        loss_o,
        grad: Some(g),
        logits,
    })
}

struct Pass {
    report: LossReport,
    grad: Option<ModelParams>,
    bundle: Option<LogitBundle>,
}

#[allow(clippy::too_many_arguments)]
fn run_pass(
    params: &ModelParams,
    problem: &TrainingProblem<'_>,
    batch: &[Example<'_>],
    noise: &StepNoise,
    settings: &LossSettings,
    exec: Execution,
    want_grad: bool,
    keep_logits: bool,
) -> Result<Pass> {
    if batch.is_empty() {
        return Err(PlidError::InvalidArgument("empty batch".into()));
    }
    if let Some(m) = &noise.class_masks {
        if m.len() != problem.num_classes() {
            return Err(PlidError::Shape("class mask count".into()));
        }
    }
    if let Some(m) = &noise.sample_masks {
        if m.len() != batch.len() {
            return Err(PlidError::Shape("sample mask count".into()));
        }
    }
    if let Some(e) = batch.iter().find(|e| e.target >= problem.num_classes()) {
        return Err(PlidError::OutOfRange(format!("target class {}", e.target)));
    }
    let lambda = if settings.use_decomposition { noise.lambda } else { 0.0 };
    let classes = class_forward(params, problem, noise.class_masks.as_ref(), exec)?;
    let targets = if settings.use_decomposition {
        Some(PrimitiveTargets::new(
            &classes.means,
            &problem.classes,
            problem.num_states,
            problem.num_objects,
        )?)
    } else {
        None
    };

    let outs = exec::try_map_indexed(exec, batch.len(), |i| {
        sample_pass(
            params,
            problem,
            &classes.means,
            targets.as_ref(),
            &batch[i],
            noise.sample_masks.as_ref().map(|m| &m[i]),
            lambda,
            settings,
            want_grad,
            keep_logits,
        )
    })?;

    let n = batch.len() as f64;
    let (mut ly, mut ls, mut lo) = (0.0, 0.0, 0.0);
    for o in &outs {
        ly += o.loss_y;
        ls += o.loss_s;
        lo += o.loss_o;
    }
    let (ly, ls, lo) = (ly / n, ls / n, lo / n);
    let (ws, wo) = if settings.use_decomposition {
        (settings.state_weight, settings.object_weight)
    } else {
        (0.0, 0.0)
    };
    let report = LossReport {
        loss_y: ly,
        loss_s: ls,
        loss_o: lo,
        total: ly + ws * ls + wo * lo,
        weights: (ws, wo),
    };

    let bundle = if keep_logits {
        let c = problem.num_classes();
        let b = batch.len();
        let mut bundle = LogitBundle {
            h_comp: Array2::zeros((b, c)),
            h_rc_flat: Array2::zeros((b, c)),
            h_mixed: Array2::zeros((b, c)),
            h_state: Array2::zeros((b, problem.num_states)),
            h_object: Array2::zeros((b, problem.num_objects)),
            lambda_used: lambda,
        };
        for (i, o) in outs.iter().enumerate() {
            let (hc, hr, hm, hs, ho) = o.logits.as_ref().expect("logits kept");
            bundle.h_comp.row_mut(i).assign(hc);
            bundle.h_rc_flat.row_mut(i).assign(hr);
            bundle.h_mixed.row_mut(i).assign(hm);
            bundle.h_state.row_mut(i).assign(hs);
            bundle.h_object.row_mut(i).assign(ho);
        }
        Some(bundle)
    } else {
        None
    };

    if !want_grad {
        return Ok(Pass {
            report,
            grad: None,
            bundle,
        });
    }

    let d = params.embed_dim();
    let mut grad = params.zeros_like();
    let mut d_means = Array2::<f64>::zeros((problem.num_classes(), d));
    let mut d_states = Array2::<f64>::zeros((problem.num_states, d));
    let mut d_objects = Array2::<f64>::zeros((problem.num_objects, d));
    for o in outs {
        let g = o.grad.expect("gradient requested");
        d_means += &g.d_means;
        d_states += &g.d_states;
        d_objects += &g.d_objects;
        grad.vfe.wq += &g.vfe.wq;
        grad.vfe.wk += &g.vfe.wk;
        grad.vfe.wv += &g.vfe.wv;
        let (hs, ho) = (&g.heads.state, &g.heads.object);
        grad.heads.state.w1 += &hs.w1;
        grad.heads.state.b1 += &hs.b1;
        grad.heads.state.w2 += &hs.w2;
        grad.heads.state.b2 += &hs.b2;
        grad.heads.object.w1 += &ho.w1;
        grad.heads.object.b1 += &ho.b1;
        grad.heads.object.w2 += &ho.w2;
        grad.heads.object.b2 += &ho.b2;
    }
    if let Some(t) = &targets {
        t.backward(&d_states, &d_objects, &mut d_means);
    }

    let per_class = exec::map_indexed(exec, problem.num_classes(), |i| {
        let mut g_tfe = params.tfe.zeros_like();
        let dq = params
            .tfe
            .backward(&classes.caches[i], d_means.row(i), &mut g_tfe);
        let (q, qn) = &classes.queries[i];
        let d_pooled = problem.text.encode_backward(q.view(), *qn, dq.view());
        (g_tfe, d_pooled)
    });
    for (i, (g_tfe, d_pooled)) in per_class.into_iter().enumerate() {
        grad.tfe.wq += &g_tfe.wq;
        grad.tfe.wk += &g_tfe.wk;
        grad.tfe.wv += &g_tfe.wv;
        params
            .prompt
            .pooled_backward(problem.classes[i], d_pooled.view(), &mut grad.prompt);
    }

    // per-sample terms were summed; the class-side terms inherit that sum
    grad.scale(1.0 / n);
    Ok(Pass {
        report,
        grad: Some(grad),
        bundle,
    })
}

/// Batch-mean loss report.
pub fn total_loss(
    params: &ModelParams,
    problem: &TrainingProblem<'_>,
    batch: &[Example<'_>],
    noise: &StepNoise,
    settings: &LossSettings,
    exec: Execution,
) -> Result<LossReport> {
    Ok(run_pass(params, problem, batch, noise, settings, exec, false, false)?.report)
}

/// Batch-mean loss report with the gradient of `total` for every parameter.
pub fn total_loss_and_grad(
    params: &ModelParams,
    problem: &TrainingProblem<'_>,
    batch: &[Example<'_>],
    noise: &StepNoise,
    settings: &LossSettings,
    exec: Execution,
) -> Result<(LossReport, ModelParams)> {
    let pass = run_pass(params, problem, batch, noise, settings, exec, true, false)?;
    Ok((pass.report, pass.grad.expect("gradient requested")))
}

/// All logits of a batch, computed without dropout.
pub fn logit_bundle(
    params: &ModelParams,
    problem: &TrainingProblem<'_>,
    batch: &[Example<'_>],
    lambda: f64,
    settings: &LossSettings,
    exec: Execution,
) -> Result<LogitBundle> {
    let pass = run_pass(
        params,
        problem,
        batch,
        &StepNoise::eval(lambda),
        settings,
        exec,
        false,
        true,
    )?;
    Ok(pass.bundle.expect("logits requested"))
}

/// Sum of `v_j^2` weighted margins for one sample, exposed for inspection.
pub fn margin_vector(
    v: ArrayView1<f64>,
    margins: &MarginTensor,
    target: usize,
    tau: f64,
) -> Array1<f64> {
    let sq = v.mapv(|x| x * x);
    let mut m = margins.weighted_column(sq.view(), target) / (2.0 * tau);
    m[target] = 0.0;
    m
}

/// Largest discrepancy between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, max relative error, entries checked)`.
    pub per_tensor: Vec<(String, f64, usize)>,
}

/// Scale below which a gradient entry counts as zero in the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares the analytic gradient of `total` with central differences at
/// steps `h` and `h/2`, combined by Richardson extrapolation so the
/// truncation error is fourth order in `h`. `max_entries` caps the entries
/// per tensor, taken at an even stride.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &ModelParams,
    problem: &TrainingProblem<'_>,
    batch: &[Example<'_>],
    noise: &StepNoise,
    settings: &LossSettings,
    h: f64,
    max_entries: Option<usize>,
    exec: Execution,
) -> Result<GradCheckReport> {
    let (_, grad) = total_loss_and_grad(params, problem, batch, noise, settings, exec)?;
    compare_with_finite_differences(params, &grad, problem, batch, noise, settings, h, max_entries, exec)
}

/// The comparison behind [`gradient_check`] for a caller-supplied gradient.
#[allow(clippy::too_many_arguments)]
pub fn compare_with_finite_differences(
    params: &ModelParams,
    grad: &ModelParams,
    problem: &TrainingProblem<'_>,
    batch: &[Example<'_>],
    noise: &StepNoise,
    settings: &LossSettings,
    h: f64,
    max_entries: Option<usize>,
    exec: Execution,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(PlidError::InvalidArgument(format!("step {h} must be positive")));
    }
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, _, d)| d.to_vec()).collect();
    let mut probe = params.clone();
    let mut per_tensor = Vec::new();
    let mut max_rel: f64 = 0.0;
    for (t, name) in crate::model::TENSOR_NAMES.iter().enumerate() {
        let len = analytic[t].len();
        let stride = match max_entries {
            Some(k) if k > 0 && len > k => len.div_ceil(k),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..len).step_by(stride) {
            let original = probe.tensors()[t].2[i];
            let mut central = |step: f64| -> Result<f64> {
                probe.tensors_mut()[t].1[i] = original + step;
                let plus = total_loss(&probe, problem, batch, noise, settings, exec)?.total;
                probe.tensors_mut()[t].1[i] = original - step;
                let minus = total_loss(&probe, problem, batch, noise, settings, exec)?.total;
                Ok((plus - minus) / (2.0 * step))
            };
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            probe.tensors_mut()[t].1[i] = original;
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max(relative_error(analytic[t][i], numeric));
            checked += 1;
        }
        max_rel = max_rel.max(worst);
        per_tensor.push((name.to_string(), worst, checked));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_tensor,
    })
}
