//! Learnable parameter set and its flat tensor view.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::encoder::TextEncoder;
use crate::error::{PlidError, Result};
use crate::lid::{CrossAttention, SoftPrompt};
use crate::vlpd::DecompositionHeads;

/// Everything the optimizer updates. The frozen encoder lives elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub prompt: SoftPrompt,
    pub tfe: CrossAttention,
    pub vfe: CrossAttention,
    pub heads: DecompositionHeads,
}

pub const TENSOR_NAMES: [&str; 17] = [
    "prompt.context",
    "prompt.states",
    "prompt.objects",
    "tfe.wq",
    "tfe.wk",
    "tfe.wv",
    "vfe.wq",
    "vfe.wk",
    "vfe.wv",
    "head_state.w1",
    "head_state.b1",
    "head_state.w2",
    "head_state.b2",
    "head_object.w1",
    "head_object.b1",
    "head_object.w2",
    "head_object.b2",
];

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn m2(a: &Array2<f64>) -> ((usize, usize), &[f64]) {
    (a.dim(), slice2(a))
}

fn m1(a: &Array1<f64>) -> ((usize, usize), &[f64]) {
    ((1, a.len()), slice1(a))
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

impl ModelParams {
    pub fn init(
        text: &TextEncoder,
        vocab: &Vocabulary,
        context_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = text.embed_dim();
        if text.token_dim() != d {
            return Err(PlidError::Shape(format!(
                "token width {} must equal embedding width {d}",
                text.token_dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        Ok(ModelParams {
            prompt: SoftPrompt::init(text, vocab, context_len)?,
            tfe: CrossAttention::identity(d),
            vfe: CrossAttention::identity(d),
            heads: DecompositionHeads::init(d, &mut rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            prompt: self.prompt.zeros_like(),
            tfe: self.tfe.zeros_like(),
            vfe: self.vfe.zeros_like(),
            heads: self.heads.zeros_like(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.tfe.dim()
    }

    /// Tensors in [`TENSOR_NAMES`] order with their `(rows, cols)` shapes.
    /// Biases report shape `(1, d)`.
    pub fn tensors(&self) -> Vec<(&'static str, (usize, usize), &[f64])> {
        let h = &self.heads;
        let parts = [
            m2(&self.prompt.context),
            m2(&self.prompt.states),
            m2(&self.prompt.objects),
            m2(&self.tfe.wq),
            m2(&self.tfe.wk),
            m2(&self.tfe.wv),
            m2(&self.vfe.wq),
            m2(&self.vfe.wk),
            m2(&self.vfe.wv),
            m2(&h.state.w1),
            m1(&h.state.b1),
            m2(&h.state.w2),
            m1(&h.state.b2),
            m2(&h.object.w1),
            m1(&h.object.b1),
            m2(&h.object.w2),
            m1(&h.object.b2),
        ];
        TENSOR_NAMES
            .iter()
            .zip(parts)
            .map(|(n, (shape, data))| (*n, shape, data))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let h = &mut self.heads;
        let parts: [&mut [f64]; 17] = [
            slice2_mut(&mut self.prompt.context),
            slice2_mut(&mut self.prompt.states),
            slice2_mut(&mut self.prompt.objects),
            slice2_mut(&mut self.tfe.wq),
            slice2_mut(&mut self.tfe.wk),
            slice2_mut(&mut self.tfe.wv),
            slice2_mut(&mut self.vfe.wq),
            slice2_mut(&mut self.vfe.wk),
            slice2_mut(&mut self.vfe.wv),
            slice2_mut(&mut h.state.w1),
            slice1_mut(&mut h.state.b1),
            slice2_mut(&mut h.state.w2),
            slice1_mut(&mut h.state.b2),
            slice2_mut(&mut h.object.w1),
            slice1_mut(&mut h.object.b1),
            slice2_mut(&mut h.object.w2),
            slice1_mut(&mut h.object.b2),
        ];
        TENSOR_NAMES.iter().copied().zip(parts).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn scaled_add(&mut self, scale: f64, other: &ModelParams) {
        let src = other.tensors();
        for ((_, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    /// Replaces tensor contents from `(name, shape, data)` triples, checking shapes.
    pub fn load_tensors(&mut self, tensors: &[(String, (usize, usize), Vec<f64>)]) -> Result<()> {
        let shapes: Vec<(usize, usize)> = self.tensors().iter().map(|(_, s, _)| *s).collect();
        if tensors.len() != shapes.len() {
            return Err(PlidError::Shape(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (((name, dst), want), (got_name, got_shape, data)) in
            self.tensors_mut().into_iter().zip(shapes).zip(tensors)
        {
            if name != got_name || want != *got_shape || dst.len() != data.len() {
                return Err(PlidError::Shape(format!(
                    "tensor {got_name} {got_shape:?} does not match {name} {want:?}"
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        let text = TextEncoder::new(7, 6, 6);
        let vocab = Vocabulary::new(
            vec!["red".into(), "wet".into()],
            vec!["cat".into(), "dog".into(), "car".into()],
        )
        .unwrap();
        ModelParams::init(&text, &vocab, 8, 1).unwrap()
    }

    #[test]
    fn tensor_views_cover_every_parameter() {
        let p = params();
        let t = p.tensors();
        assert_eq!(t.len(), TENSOR_NAMES.len());
        let d = 6;
        let expected = 8 * d + 2 * d + 3 * d + 6 * d * d + 2 * (2 * d * d + 2 * d);
        assert_eq!(p.num_parameters(), expected);
        assert_eq!(t[10].1, (1, d));
    }

    #[test]
    fn scaled_add_and_reload() {
        let p = params();
        let mut q = p.clone();
        q.scaled_add(1.0, &p);
        q.scale(0.5);
        assert_eq!(q, p);
        let dump: Vec<(String, (usize, usize), Vec<f64>)> = p
            .tensors()
            .into_iter()
            .map(|(n, s, d)| (n.to_string(), s, d.to_vec()))
            .collect();
        let mut z = p.zeros_like();
        z.load_tensors(&dump).unwrap();
        assert_eq!(z, p);
        let mut bad = dump.clone();
        bad[3].1 = (1, 36);
        assert!(z.load_tensors(&bad).is_err());
        assert!(z.load_tensors(&dump[..5]).is_err());
    }
}
