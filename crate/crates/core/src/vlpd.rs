//! Visual-language primitive decomposition.
//!
//! Two heads project the visual feature into a state space and an object
//! space. Each is scored by cosine against the renormalized mean of the class
//! means sharing that primitive, and the two primitive logit vectors are
//! recomposed into a `|S| x |O|` matrix by Cartesian sum.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::Pair;
use crate::error::{PlidError, Result};
use crate::lid::outer_add;
use crate::linalg::{gelu, gelu_grad, normalize, normalize_backward};

pub const HEAD_RESIDUAL_INIT_SCALE: f64 = 0.01;

/// `f(v) = normalize(v + W2 gelu(W1 v + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
    pub output: Array1<f64>,
    norm: f64,
}

impl ProjectionHead {
    /// Exact identity map on unit vectors (all weights zero).
    pub fn identity(d: usize) -> Self {
        ProjectionHead {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }

    /// Near-identity initialization: the residual branch output is scaled
    /// by [`HEAD_RESIDUAL_INIT_SCALE`].
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = HEAD_RESIDUAL_INIT_SCALE / (d as f64).sqrt();
        let mut draw = |s: f64| {
            Array2::from_shape_fn((d, d), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * s
            })
        };
        let w1 = draw(s1);
        let w2 = draw(s2);
        ProjectionHead {
            w1,
            b1: Array1::zeros(d),
            w2,
            b2: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ProjectionHead::identity(self.b1.len())
    }

    pub fn forward(&self, v: ArrayView1<f64>) -> HeadCache {
        let hidden_pre = self.w1.dot(&v) + &self.b1;
        let hidden = hidden_pre.mapv(gelu);
        let pre = &v + &self.w2.dot(&hidden) + &self.b2;
        let (output, norm) = normalize(pre.view());
        HeadCache {
            input: v.to_owned(),
            hidden_pre,
            hidden,
            output,
            norm,
        }
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.forward(v).output
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dv`.
    pub fn backward(
        &self,
        cache: &HeadCache,
        d_output: ArrayView1<f64>,
        grad: &mut ProjectionHead,
    ) -> Array1<f64> {
        let d_pre = normalize_backward(cache.output.view(), cache.norm, d_output);
        grad.b2 += &d_pre;
        outer_add(&mut grad.w2, d_pre.view(), cache.hidden.view());
        let d_hidden = self.w2.t().dot(&d_pre);
        let d_hidden_pre = &d_hidden * &cache.hidden_pre.mapv(gelu_grad);
        grad.b1 += &d_hidden_pre;
        outer_add(&mut grad.w1, d_hidden_pre.view(), cache.input.view());
        d_pre + self.w1.t().dot(&d_hidden_pre)
    }
}

/// The state head `f_s` and object head `f_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionHeads {
    pub state: ProjectionHead,
    pub object: ProjectionHead,
}

impl DecompositionHeads {
    pub fn identity(d: usize) -> Self {
        DecompositionHeads {
            state: ProjectionHead::identity(d),
            object: ProjectionHead::identity(d),
        }
    }

    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        DecompositionHeads {
            state: ProjectionHead::init(d, rng),
            object: ProjectionHead::init(d, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DecompositionHeads {
            state: self.state.zeros_like(),
            object: self.object.zeros_like(),
        }
    }
}

/// Unit-norm grouped text targets per state and per object, with the class
/// membership needed to backpropagate into the class means.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveTargets {
    /// `|S| x d`
    pub states: Array2<f64>,
    /// `|O| x d`
    pub objects: Array2<f64>,
    state_norms: Vec<f64>,
    object_norms: Vec<f64>,
    state_members: Vec<Vec<usize>>,
    object_members: Vec<Vec<usize>>,
}

fn grouped(
    means: &Array2<f64>,
    members: &[Vec<usize>],
) -> (Array2<f64>, Vec<f64>) {
    let d = means.ncols();
    let mut out = Array2::zeros((members.len(), d));
    let mut norms = Vec::with_capacity(members.len());
    for (g, cs) in members.iter().enumerate() {
        let mut acc = Array1::<f64>::zeros(d);
        for &c in cs {
            acc += &means.row(c);
        }
        acc /= cs.len() as f64;
        let (u, n) = normalize(acc.view());
        out.row_mut(g).assign(&u);
        norms.push(n);
    }
    (out, norms)
}

impl PrimitiveTargets {
    /// Groups the class means of `classes` by state and by object.
    pub fn new(
        means: &Array2<f64>,
        classes: &[Pair],
        num_states: usize,
        num_objects: usize,
    ) -> Result<Self> {
        if means.nrows() != classes.len() {
            return Err(PlidError::Shape(format!(
                "{} means for {} classes",
                means.nrows(),
                classes.len()
            )));
        }
        let mut state_members = vec![Vec::new(); num_states];
        let mut object_members = vec![Vec::new(); num_objects];
        for (c, p) in classes.iter().enumerate() {
            if p.state >= num_states || p.object >= num_objects {
                return Err(PlidError::OutOfRange(format!("class {p}")));
            }
            state_members[p.state].push(c);
            object_members[p.object].push(c);
        }
        if let Some(s) = state_members.iter().position(Vec::is_empty) {
            return Err(PlidError::Validation(format!("state {s} is not covered")));
        }
        if let Some(o) = object_members.iter().position(Vec::is_empty) {
            return Err(PlidError::Validation(format!("object {o} is not covered")));
        }
        let (states, state_norms) = grouped(means, &state_members);
        let (objects, object_norms) = grouped(means, &object_members);
        Ok(PrimitiveTargets {
            states,
            objects,
            state_norms,
            object_norms,
            state_members,
            object_members,
        })
    }

    /// Backpropagates target gradients into class-mean gradients `d_means`.
    pub fn backward(
        &self,
        d_states: &Array2<f64>,
        d_objects: &Array2<f64>,
        d_means: &mut Array2<f64>,
    ) {
        let parts = [
            (&self.states, &self.state_norms, &self.state_members, d_states),
            (&self.objects, &self.object_norms, &self.object_members, d_objects),
        ];
        for (targets, norms, members, d_targets) in parts {
            for (g, cs) in members.iter().enumerate() {
                let d_mean =
                    normalize_backward(targets.row(g), norms[g], d_targets.row(g));
                let scale = 1.0 / cs.len() as f64;
                for &c in cs {
                    d_means.row_mut(c).scaled_add(scale, &d_mean);
                }
            }
        }
    }
}

/// State and object cosine logits of one visual feature.
pub fn primitive_logits(
    v: ArrayView1<f64>,
    heads: &DecompositionHeads,
    targets: &PrimitiveTargets,
) -> (Array1<f64>, Array1<f64>) {
    let fs = heads.state.apply(v);
    let fo = heads.object.apply(v);
    (targets.states.dot(&fs), targets.objects.dot(&fo))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecomposedLogits {
    pub h_state: Array1<f64>,
    pub h_object: Array1<f64>,
    /// `h_rc[i, j] = h_state[i] + h_object[j]`
    pub h_rc: Array2<f64>,
}

impl RecomposedLogits {
    /// Recomposed logits at the given compositions, in order.
    pub fn gather(&self, pairs: &[Pair]) -> Result<Array1<f64>> {
        let (ns, no) = self.h_rc.dim();
        pairs
            .iter()
            .map(|p| {
                if p.state < ns && p.object < no {
                    Ok(self.h_rc[[p.state, p.object]])
                } else {
                    Err(PlidError::OutOfRange(format!("pair {p} outside {ns}x{no}")))
                }
            })
            .collect()
    }
}

pub fn recompose(h_state: ArrayView1<f64>, h_object: ArrayView1<f64>) -> RecomposedLogits {
    let h_rc = Array2::from_shape_fn((h_state.len(), h_object.len()), |(i, j)| {
        h_state[i] + h_object[j]
    });
    RecomposedLogits {
        h_state: h_state.to_owned(),
        h_object: h_object.to_owned(),
        h_rc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recompose_direct_sum() {
        let r = recompose(array![1.0, 2.0].view(), array![10.0, 20.0, 30.0].view());
        assert_eq!(r.h_rc, array![[11.0, 21.0, 31.0], [12.0, 22.0, 32.0]]);
        let z = recompose(array![0.0, 0.0].view(), array![1.5, -2.0].view());
        for row in z.h_rc.rows() {
            assert_eq!(row, array![1.5, -2.0]);
        }
        assert_eq!(
            r.gather(&[Pair::new(1, 2), Pair::new(0, 0)]).unwrap(),
            array![32.0, 11.0]
        );
        assert!(r.gather(&[Pair::new(2, 0)]).is_err());
    }

    #[test]
    fn identity_head_single_member_groups() {
        let means = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let classes = [Pair::new(0, 0), Pair::new(1, 1)];
        let t = PrimitiveTargets::new(&means, &classes, 2, 2).unwrap();
        let v = normalize(array![0.6, 0.8, 0.0].view()).0;
        let (hs, ho) = primitive_logits(v.view(), &DecompositionHeads::identity(3), &t);
        assert_abs_diff_eq!(hs[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(hs[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(ho[1], 0.8, epsilon = 1e-15);
        let orth = array![0.0, 0.0, 1.0];
        let (hs, ho) = primitive_logits(orth.view(), &DecompositionHeads::identity(3), &t);
        assert!(hs.iter().chain(ho.iter()).all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn grouped_cosines_2x2_hand_values() {
        // classes (0,0),(0,1),(1,0); t rows hand-set unit vectors
        let means = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let classes = [Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)];
        let t = PrimitiveTargets::new(&means, &classes, 2, 2).unwrap();
        let v = array![1.0, 0.0];
        let (hs, ho) = primitive_logits(v.view(), &DecompositionHeads::identity(2), &t);
        // state 0: mean (0.5, 0.5) -> cos = 1/sqrt(2); state 1: (0.6, 0.8) -> 0.6
        assert_abs_diff_eq!(hs[0], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(hs[1], 0.6, epsilon = 1e-15);
        // object 0: mean (0.8, 0.4) -> 0.8/sqrt(0.8) ; object 1: (0, 1) -> 0
        assert_abs_diff_eq!(ho[0], 0.8 / 0.8f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(ho[1], 0.0, epsilon = 1e-15);
        assert!(PrimitiveTargets::new(&means, &classes, 3, 2).is_err());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let mut head = ProjectionHead::init(d, &mut rng);
        head.w2.mapv_inplace(|x| x * 50.0);
        head.b1 = array![0.1, -0.2, 0.3, 0.0];
        head.b2 = array![0.05, 0.0, -0.1, 0.2];
        let v = normalize(array![0.3, -0.4, 0.5, 0.7].view()).0;
        let probe = array![0.2, -1.0, 0.4, 0.3];
        let f = |h: &ProjectionHead, v: &Array1<f64>| h.apply(v.view()).dot(&probe);
        let cache = head.forward(v.view());
        let mut g = head.zeros_like();
        let dv = head.backward(&cache, probe.view(), &mut g);
        let eps = 1e-6;
        for i in 0..d {
            let (mut a, mut b) = (v.clone(), v.clone());
            a[i] += eps;
            b[i] -= eps;
            assert_abs_diff_eq!(dv[i], (f(&head, &a) - f(&head, &b)) / (2.0 * eps), epsilon = 1e-8);
            let (mut a, mut b) = (head.clone(), head.clone());
            a.b1[i] += eps;
            b.b1[i] -= eps;
            assert_abs_diff_eq!(g.b1[i], (f(&a, &v) - f(&b, &v)) / (2.0 * eps), epsilon = 1e-8);
            for j in 0..d {
                let (mut a, mut b) = (head.clone(), head.clone());
                a.w1[[i, j]] += eps;
                b.w1[[i, j]] -= eps;
                assert_abs_diff_eq!(g.w1[[i, j]], (f(&a, &v) - f(&b, &v)) / (2.0 * eps), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn identity_head_is_exact_on_unit_vectors_up_to_rounding() {
        let v = normalize(array![0.3, -0.4, 0.5].view()).0;
        let out = ProjectionHead::identity(3).apply(v.view());
        for i in 0..3 {
            assert_abs_diff_eq!(out[i], v[i], epsilon = 1e-15);
        }
    }
}
