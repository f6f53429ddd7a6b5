//! Language-informed class distributions.
//!
//! A class `y = (s, o)` is represented by the soft-prompt sequence
//! `[p_1..p_L][s][o]`, encoded by the frozen text encoder into `q_y`, and
//! enhanced by cross attention over its description embeddings `D_y` into
//! the class mean `t_y`. The support points `t_y + D_y` define a Gaussian per
//! class whose per-dimension cross-class covariance feeds the loss margins.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::corpus::{Pair, Vocabulary};
use crate::encoder::{TextEncoder, TokenSequence};
use crate::error::{PlidError, Result};
use crate::exec::{self, Execution};
use crate::linalg::{normalize, normalize_backward, softmax_inplace};

pub const DEFAULT_CONTEXT_LEN: usize = 8;
pub const PROMPT_INIT_PHRASE: &str = "a photo of";

/// Learnable prompt: shared context vectors plus per-primitive vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    /// `L x d_tok`
    pub context: Array2<f64>,
    /// `|S| x d_tok`
    pub states: Array2<f64>,
    /// `|O| x d_tok`
    pub objects: Array2<f64>,
}

fn phrase_vector(text: &TextEncoder, phrase: &str) -> Array1<f64> {
    text.embed_tokens(phrase)
        .map(|s| s.mean())
        .unwrap_or_else(|_| Array1::zeros(text.token_dim()))
}

impl SoftPrompt {
    /// Context initialized from the token vectors of "a photo of", repeated
    /// cyclically to fill `context_len` slots; primitive vectors from the
    /// (mean) token vectors of their names.
    pub fn init(text: &TextEncoder, vocab: &Vocabulary, context_len: usize) -> Result<Self> {
        if context_len == 0 {
            return Err(PlidError::InvalidArgument("context length must be >= 1".into()));
        }
        let phrase = text.embed_tokens(PROMPT_INIT_PHRASE)?;
        let dt = text.token_dim();
        let mut context = Array2::zeros((context_len, dt));
        for i in 0..context_len {
            context.row_mut(i).assign(&phrase.vectors.row(i % phrase.len()));
        }
        let table = |names: &[String]| {
            let mut m = Array2::zeros((names.len(), dt));
            for (i, n) in names.iter().enumerate() {
                m.row_mut(i).assign(&phrase_vector(text, n));
            }
            m
        };
        Ok(SoftPrompt {
            context,
            states: table(&vocab.states),
            objects: table(&vocab.objects),
        })
    }

    pub fn zeros_like(&self) -> Self {
        SoftPrompt {
            context: Array2::zeros(self.context.raw_dim()),
            states: Array2::zeros(self.states.raw_dim()),
            objects: Array2::zeros(self.objects.raw_dim()),
        }
    }

    pub fn context_len(&self) -> usize {
        self.context.nrows()
    }

    fn check(&self, p: Pair) -> Result<()> {
        if p.state >= self.states.nrows() || p.object >= self.objects.nrows() {
            return Err(PlidError::OutOfRange(format!(
                "pair {p} outside prompt tables {}x{}",
                self.states.nrows(),
                self.objects.nrows()
            )));
        }
        Ok(())
    }

    /// The sequence `[p_1..p_L][s][o]`.
    pub fn compose_class_tokens(&self, p: Pair) -> Result<TokenSequence> {
        self.check(p)?;
        let l = self.context_len();
        let mut vectors = Array2::zeros((l + 2, self.context.ncols()));
        vectors.slice_mut(ndarray::s![..l, ..]).assign(&self.context);
        vectors.row_mut(l).assign(&self.states.row(p.state));
        vectors.row_mut(l + 1).assign(&self.objects.row(p.object));
        Ok(TokenSequence { vectors })
    }

    /// Mean of the composed sequence, without materializing it.
    pub fn pooled(&self, p: Pair) -> Result<Array1<f64>> {
        self.check(p)?;
        let n = (self.context_len() + 2) as f64;
        let mut acc = self.context.sum_axis(Axis(0));
        acc += &self.states.row(p.state);
        acc += &self.objects.row(p.object);
        Ok(acc / n)
    }

    /// Scatters the gradient of a pooled class sequence into `grad`.
    pub fn pooled_backward(&self, p: Pair, d_pooled: ArrayView1<f64>, grad: &mut SoftPrompt) {
        let scale = 1.0 / (self.context_len() + 2) as f64;
        for mut row in grad.context.rows_mut() {
            row.scaled_add(scale, &d_pooled);
        }
        grad.states.row_mut(p.state).scaled_add(scale, &d_pooled);
        grad.objects.row_mut(p.object).scaled_add(scale, &d_pooled);
    }
}

/// Inverted-dropout mask: entries are `0` or `1/(1-rate)`; rate 1 drops all.
pub fn dropout_mask(rate: f64, d: usize, rng: &mut impl Rng) -> Array1<f64> {
    if rate <= 0.0 {
        return Array1::ones(d);
    }
    if rate >= 1.0 {
        return Array1::zeros(d);
    }
    let keep = 1.0 / (1.0 - rate);
    (0..d)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Single-head cross attention with residual connection:
/// `normalize(q + dropout(W_v S^T softmax(S W_k^T W_q q / sqrt(d))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<'a> {
    query: Array1<f64>,
    support: ArrayView2<'a, f64>,
    projected_query: Array1<f64>,
    weights: Array1<f64>,
    context: Array1<f64>,
    mask: Option<Array1<f64>>,
    pub output: Array1<f64>,
    norm: f64,
}

impl CrossAttention {
    pub fn identity(d: usize) -> Self {
        CrossAttention {
            wq: Array2::eye(d),
            wk: Array2::eye(d),
            wv: Array2::eye(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CrossAttention {
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn forward<'a>(
        &self,
        query: ArrayView1<f64>,
        support: ArrayView2<'a, f64>,
        mask: Option<&Array1<f64>>,
    ) -> Result<AttentionCache<'a>> {
        let d = self.dim();
        if query.len() != d || support.ncols() != d {
            return Err(PlidError::Shape(format!(
                "attention width {d}, query {}, support {}",
                query.len(),
                support.ncols()
            )));
        }
        if support.nrows() == 0 {
            return Err(PlidError::Shape("attention support is empty".into()));
        }
        let projected_query = self.wq.dot(&query);
        let key_query = self.wk.t().dot(&projected_query);
        let mut weights = support.dot(&key_query) / (d as f64).sqrt();
        softmax_inplace(weights.view_mut());
        let context = support.t().dot(&weights);
        let mut attended = self.wv.dot(&context);
        if let Some(m) = mask {
            attended *= m;
        }
        let pre = &query + &attended;
        let (output, norm) = normalize(pre.view());
        Ok(AttentionCache {
            query: query.to_owned(),
            support,
            projected_query,
            weights,
            context,
            mask: mask.cloned(),
            output,
            norm,
        })
    }

    /// Accumulates weight gradients into `grad` and returns `dL/dquery`.
    pub fn backward(
        &self,
        cache: &AttentionCache<'_>,
        d_output: ArrayView1<f64>,
        grad: &mut CrossAttention,
    ) -> Array1<f64> {
        let d = self.dim();
        let d_pre = normalize_backward(cache.output.view(), cache.norm, d_output);
        let mut d_query = d_pre.clone();
        let d_attended = match &cache.mask {
            Some(m) => &d_pre * m,
            None => d_pre,
        };
        // attended = W_v c
        outer_add(&mut grad.wv, d_attended.view(), cache.context.view());
        let d_context = self.wv.t().dot(&d_attended);
        // c = S^T a
        let d_weights = cache.support.dot(&d_context);
        let dot = cache.weights.dot(&d_weights);
        let d_scores = &cache.weights * &(d_weights - dot);
        // scores = S r / sqrt(d), r = W_k^T a_q
        let d_key_query = cache.support.t().dot(&d_scores) / (d as f64).sqrt();
        outer_add(&mut grad.wk, cache.projected_query.view(), d_key_query.view());
        let d_projected = self.wk.dot(&d_key_query);
        // a_q = W_q q
        outer_add(&mut grad.wq, d_projected.view(), cache.query.view());
        d_query += &self.wq.t().dot(&d_projected);
        d_query
    }

    /// Text feature enhancement of a class query over its descriptions.
    pub fn tfe(
        &self,
        query: ArrayView1<f64>,
        descriptions: ArrayView2<f64>,
        mask: Option<&Array1<f64>>,
    ) -> Result<Array1<f64>> {
        Ok(self.forward(query, descriptions, mask)?.output)
    }

    /// Visual feature enhancement of an anchor over `{anchor} ∪ views`.
    pub fn vfe(
        &self,
        views: &crate::encoder::ImageViews,
        mask: Option<&Array1<f64>>,
    ) -> Result<Array1<f64>> {
        let support = views.support();
        Ok(self.forward(views.anchor.view(), support.view(), mask)?.output)
    }
}

/// `m += a b^T`
pub(crate) fn outer_add(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            m.row_mut(i).scaled_add(ai, &b);
        }
    }
}

/// Per-dimension cross-class covariance of support offsets:
/// `cov[j, k, y] = (1/M) sum_m off[k, m, j] * off[y, m, j]` with offsets
/// `C x M x d`. The result is `d x C x C`, exactly symmetric.
pub fn covariance_from_offsets(offsets: &Array3<f64>, exec: Execution) -> Array3<f64> {
    let (c, m, d) = offsets.dim();
    let inv_m = 1.0 / m as f64;
    let slabs = exec::map_indexed(exec, d, |j| {
        let x = offsets.index_axis(Axis(2), j); // C x M
        let mut s = Array2::<f64>::zeros((c, c));
        for k in 0..c {
            for y in k..c {
                let v = x.row(k).dot(&x.row(y)) * inv_m;
                s[[k, y]] = v;
                s[[y, k]] = v;
            }
        }
        s
    });
    let mut cov = Array3::zeros((d, c, c));
    for (j, s) in slabs.into_iter().enumerate() {
        cov.index_axis_mut(Axis(0), j).assign(&s);
    }
    cov
}

/// `A[j,k,y] = S[j,k,k] + S[j,y,y] - S[j,k,y] - S[j,y,k]`.
pub fn margins_from_covariance(cov: &Array3<f64>) -> Array3<f64> {
    let (d, c, _) = cov.dim();
    Array3::from_shape_fn((d, c, c), |(j, k, y)| {
        (cov[[j, k, k]] + cov[[j, y, y]]) - (cov[[j, k, y]] + cov[[j, y, k]])
    })
}

/// Class means, support offsets and covariance over an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistributionSet {
    pub pairs: Vec<Pair>,
    /// `C x d`, unit rows
    pub means: Array2<f64>,
    /// `C x M x d`; support points are `means[c] + offsets[c, m]`
    pub offsets: Array3<f64>,
    /// `d x C x C`
    pub covariance: Array3<f64>,
}

impl ClassDistributionSet {
    /// Assembles a set from already-computed means and description offsets.
    pub fn from_parts(
        pairs: Vec<Pair>,
        means: Array2<f64>,
        descriptions: &[&Array2<f64>],
        exec: Execution,
    ) -> Result<Self> {
        let offsets = stack_offsets(descriptions)?;
        if means.nrows() != pairs.len() || offsets.dim().0 != pairs.len() {
            return Err(PlidError::Shape(format!(
                "{} pairs, {} means, {} description sets",
                pairs.len(),
                means.nrows(),
                offsets.dim().0
            )));
        }
        if offsets.dim().2 != means.ncols() {
            return Err(PlidError::Shape(format!(
                "description width {} vs mean width {}",
                offsets.dim().2,
                means.ncols()
            )));
        }
        let covariance = covariance_from_offsets(&offsets, exec);
        Ok(ClassDistributionSet {
            pairs,
            means,
            offsets,
            covariance,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.pairs.len()
    }

    /// Support points of class `c`, `M x d`.
    pub fn dsp(&self, c: usize) -> Array2<f64> {
        &self.offsets.index_axis(Axis(0), c) + &self.means.row(c)
    }
}

fn stack_offsets(descriptions: &[&Array2<f64>]) -> Result<Array3<f64>> {
    let Some(first) = descriptions.first() else {
        return Err(PlidError::Shape("no classes".into()));
    };
    let (m, d) = first.dim();
    let mut out = Array3::zeros((descriptions.len(), m, d));
    for (c, dsc) in descriptions.iter().enumerate() {
        if dsc.dim() != (m, d) {
            return Err(PlidError::Shape(format!(
                "class {c} has {:?} descriptions, expected {:?}",
                dsc.dim(),
                (m, d)
            )));
        }
        out.index_axis_mut(Axis(0), c).assign(dsc);
    }
    Ok(out)
}

/// Means via compose -> encode -> text enhancement, without dropout.
pub fn build_distributions(
    prompt: &SoftPrompt,
    attention: &CrossAttention,
    text: &TextEncoder,
    descriptions: &[&Array2<f64>],
    classes: &[Pair],
    exec: Execution,
) -> Result<ClassDistributionSet> {
    if descriptions.len() != classes.len() {
        return Err(PlidError::Shape(format!(
            "{} description sets for {} classes",
            descriptions.len(),
            classes.len()
        )));
    }
    let rows = exec::try_map_indexed(exec, classes.len(), |c| {
        let pooled = prompt.pooled(classes[c])?;
        let (q, _) = text.encode_pooled(pooled.view());
        attention.tfe(q.view(), descriptions[c].view(), None)
    })?;
    let d = text.embed_dim();
    let mut means = Array2::zeros((classes.len(), d));
    for (c, r) in rows.iter().enumerate() {
        means.row_mut(c).assign(r);
    }
    ClassDistributionSet::from_parts(classes.to_vec(), means, descriptions, exec)
}

/// Pairwise margin terms, either dense over classes or shared by object.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginTensor {
    /// `d x C x C`
    Dense(Array3<f64>),
    /// `d x G x G` over groups, with each class mapped to its group.
    Shared {
        groups: Array3<f64>,
        class_group: Vec<usize>,
    },
}

impl MarginTensor {
    pub fn dim(&self) -> usize {
        match self {
            MarginTensor::Dense(a) | MarginTensor::Shared { groups: a, .. } => a.dim().0,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            MarginTensor::Dense(a) => a.dim().1,
            MarginTensor::Shared { class_group, .. } => class_group.len(),
        }
    }

    pub fn get(&self, j: usize, k: usize, y: usize) -> f64 {
        match self {
            MarginTensor::Dense(a) => a[[j, k, y]],
            MarginTensor::Shared {
                groups,
                class_group,
            } => groups[[j, class_group[k], class_group[y]]],
        }
    }

    /// Number of stored floats.
    pub fn footprint_floats(&self) -> usize {
        match self {
            MarginTensor::Dense(a) => a.len(),
            MarginTensor::Shared { groups, .. } => groups.len(),
        }
    }

    pub fn zeros(d: usize, c: usize) -> Self {
        MarginTensor::Dense(Array3::zeros((d, c, c)))
    }

    /// `m[k] = sum_j w[j] A[j,k,y]` for weights `w` (typically `v_j^2`).
    pub fn weighted_column(&self, weights: ArrayView1<f64>, y: usize) -> Array1<f64> {
        let c = self.num_classes();
        let mut out = Array1::zeros(c);
        match self {
            MarginTensor::Dense(a) => {
                for (j, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let slab = a.index_axis(Axis(0), j);
                    out.scaled_add(w, &slab.column(y));
                }
            }
            MarginTensor::Shared {
                groups,
                class_group,
            } => {
                let g = groups.dim().1;
                let mut per_group = Array1::<f64>::zeros(g);
                for (j, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    per_group.scaled_add(w, &groups.index_axis(Axis(0), j).column(class_group[y]));
                }
                for (k, o) in out.iter_mut().enumerate() {
                    *o = per_group[class_group[k]];
                }
            }
        }
        out
    }

    /// `g[j] = sum_k coeffs[k] A[j,k,y]`.
    pub fn contract_column(&self, coeffs: ArrayView1<f64>, y: usize) -> Array1<f64> {
        let d = self.dim();
        match self {
            MarginTensor::Dense(a) => Array1::from_shape_fn(d, |j| {
                a.index_axis(Axis(0), j).column(y).dot(&coeffs)
            }),
            MarginTensor::Shared {
                groups,
                class_group,
            } => {
                let mut per_group = Array1::<f64>::zeros(groups.dim().1);
                for (k, &c) in coeffs.iter().enumerate() {
                    per_group[class_group[k]] += c;
                }
                let gy = class_group[y];
                Array1::from_shape_fn(d, |j| {
                    groups.index_axis(Axis(0), j).column(gy).dot(&per_group)
                })
            }
        }
    }
}

pub fn margin_tensor(dist: &ClassDistributionSet) -> MarginTensor {
    MarginTensor::Dense(margins_from_covariance(&dist.covariance))
}

/// `sum_j v_j^2 A[j,k,y] / (2 tau)`.
pub fn margin_quadratic(
    v: ArrayView1<f64>,
    a: &MarginTensor,
    k: usize,
    y: usize,
    tau: f64,
) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(PlidError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if v.len() != a.dim() {
        return Err(PlidError::Shape(format!(
            "vector width {} vs margin width {}",
            v.len(),
            a.dim()
        )));
    }
    let q: f64 = v.iter().enumerate().map(|(j, &x)| x * x * a.get(j, k, y)).sum();
    Ok(q / (2.0 * tau))
}

/// A distribution over groups of classes (primitives or objects).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDistribution {
    /// Averaged (not renormalized) class means, `G x d`.
    pub means: Array2<f64>,
    /// Averaged offsets, `G x M x d`.
    pub offsets: Array3<f64>,
    /// `d x G x G`
    pub covariance: Array3<f64>,
    /// Group of every source class.
    pub class_group: Vec<usize>,
    /// Source classes of every group.
    pub members: Vec<Vec<usize>>,
}

impl GroupedDistribution {
    pub fn margins(&self) -> Array3<f64> {
        margins_from_covariance(&self.covariance)
    }
}

/// Groups classes by `key` and averages means and offsets within each group.
pub fn group_distribution(
    dist: &ClassDistributionSet,
    num_groups: usize,
    key: impl Fn(Pair) -> usize,
    what: &str,
    exec: Execution,
) -> Result<GroupedDistribution> {
    let (_, m, d) = dist.offsets.dim();
    let class_group: Vec<usize> = dist.pairs.iter().map(|&p| key(p)).collect();
    let mut members = vec![Vec::new(); num_groups];
    for (c, &g) in class_group.iter().enumerate() {
        if g >= num_groups {
            return Err(PlidError::OutOfRange(format!("{what} {g} >= {num_groups}")));
        }
        members[g].push(c);
    }
    if let Some(g) = members.iter().position(Vec::is_empty) {
        return Err(PlidError::Validation(format!(
            "{what} {g} has no composition in the class set"
        )));
    }
    let mut means = Array2::zeros((num_groups, d));
    let mut offsets = Array3::zeros((num_groups, m, d));
    for (g, cs) in members.iter().enumerate() {
        let n = cs.len() as f64;
        let mut mean = Array1::<f64>::zeros(d);
        let mut off = Array2::<f64>::zeros((m, d));
        for &c in cs {
            mean += &dist.means.row(c);
            off += &dist.offsets.index_axis(Axis(0), c);
        }
        means.row_mut(g).assign(&(mean / n));
        offsets.index_axis_mut(Axis(0), g).assign(&(off / n));
    }
    let covariance = covariance_from_offsets(&offsets, exec);
    Ok(GroupedDistribution {
        means,
        offsets,
        covariance,
        class_group,
        members,
    })
}

/// Object-level shared covariance: memory `d |O|^2` instead of `d C^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedCovariance {
    pub objects: GroupedDistribution,
    pub margins: MarginTensor,
}

pub fn share_covariance(
    dist: &ClassDistributionSet,
    num_objects: usize,
    exec: Execution,
) -> Result<SharedCovariance> {
    let objects = group_distribution(dist, num_objects, |p| p.object, "object", exec)?;
    let margins = MarginTensor::Shared {
        groups: objects.margins(),
        class_group: objects.class_group.clone(),
    };
    Ok(SharedCovariance { objects, margins })
}

/// State- and object-level distributions grouped from composition classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveDistributions {
    pub states: GroupedDistribution,
    pub objects: GroupedDistribution,
}

pub fn primitive_distributions(
    dist: &ClassDistributionSet,
    num_states: usize,
    num_objects: usize,
    exec: Execution,
) -> Result<PrimitiveDistributions> {
    Ok(PrimitiveDistributions {
        states: group_distribution(dist, num_states, |p| p.state, "state", exec)?,
        objects: group_distribution(dist, num_objects, |p| p.object, "object", exec)?,
    })
}
