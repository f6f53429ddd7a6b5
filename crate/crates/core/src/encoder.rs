//! Frozen surrogate encoders.
//!
//! Text: every whitespace token maps to a fixed Gaussian vector seeded by a
//! SHA-256 hash of its lowercase form; a sequence is mean-pooled, projected
//! by a fixed orthonormal matrix and L2-normalized. Images: a latent vector is
//! projected by the same matrix, so the synthetic image and text spaces are
//! aligned the way a contrastive model's are. Precomputed embeddings can be
//! ingested instead through [`PrecomputedBackend`].

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Dataset, Pair, SplitKind, Vocabulary};
use crate::error::{PlidError, Result};
use crate::exec::{self, Execution};
use crate::linalg::{normalize, normalize_backward};
use crate::matrix;

pub const CONTEXT_LENGTH: usize = 77;
pub const DEFAULT_ENCODER_SEED: u64 = 7;
pub const DEFAULT_VIEW_NOISE: f64 = 0.05;
const PROJECTION_SALT: u64 = 0x5052_4f4a_4543_5400;

/// Token embeddings of one text, `len x d_tok`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub vectors: Array2<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn mean(&self) -> Array1<f64> {
        self.vectors
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(self.vectors.ncols()))
    }
}

/// An anchor image embedding and its augmented views.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageViews {
    pub anchor: Array1<f64>,
    /// `N x d`; may have zero rows.
    pub views: Array2<f64>,
}

impl ImageViews {
    /// Anchor stacked on top of the views: the attention support of the
    /// visual enhancement.
    pub fn support(&self) -> Array2<f64> {
        let d = self.anchor.len();
        let mut s = Array2::zeros((self.views.nrows() + 1, d));
        s.row_mut(0).assign(&self.anchor);
        for (i, v) in self.views.rows().into_iter().enumerate() {
            s.row_mut(i + 1).assign(&v);
        }
        s
    }
}

/// Seeded surrogate of a frozen text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    seed: u64,
    token_dim: usize,
    projection: Array2<f64>,
}

/// Seed of the per-token generator: the first 8 bytes (little endian) of
/// `SHA-256(seed_le || token)`.
pub fn token_seed(seed: u64, token: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn orthonormal_rows(mut m: Array2<f64>) -> Array2<f64> {
    for i in 0..m.nrows() {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let prev = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &prev);
        }
        let (n, _) = normalize(m.row(i));
        m.row_mut(i).assign(&n);
    }
    m
}

impl TextEncoder {
    pub fn new(seed: u64, token_dim: usize, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROJECTION_SALT);
        let mut draw = |_| -> f64 { StandardNormal.sample(&mut rng) };
        let projection = if embed_dim <= token_dim {
            orthonormal_rows(Array2::from_shape_fn((embed_dim, token_dim), &mut draw))
        } else {
            orthonormal_rows(Array2::from_shape_fn((token_dim, embed_dim), &mut draw))
                .reversed_axes()
        };
        TextEncoder {
            seed,
            token_dim,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// The fixed `d x d_tok` projection.
    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    /// Vector of one already-normalized token: `d_tok` standard normal draws
    /// scaled by `1/sqrt(d_tok)`.
    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(token_seed(self.seed, &token.to_lowercase()));
        let scale = 1.0 / (self.token_dim as f64).sqrt();
        (0..self.token_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    /// Lowercases, splits on whitespace, trims surrounding punctuation and
    /// truncates to [`CONTEXT_LENGTH`] tokens.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
            .filter(|t| !t.is_empty())
            .take(CONTEXT_LENGTH)
            .collect()
    }

    pub fn embed_tokens(&self, text: &str) -> Result<TokenSequence> {
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return Err(PlidError::InvalidArgument(format!(
                "text `{text}` has no tokens"
            )));
        }
        let mut vectors = Array2::zeros((tokens.len(), self.token_dim));
        for (i, t) in tokens.iter().enumerate() {
            vectors.row_mut(i).assign(&self.token_vector(t));
        }
        Ok(TokenSequence { vectors })
    }

    pub fn encode_text(&self, seq: &TokenSequence) -> Array1<f64> {
        self.encode_pooled(seq.mean().view()).0
    }

    /// `normalize(P · pooled)`; also returns the pre-normalization norm for
    /// [`TextEncoder::encode_backward`].
    pub fn encode_pooled(&self, pooled: ArrayView1<f64>) -> (Array1<f64>, f64) {
        normalize(self.projection.dot(&pooled).view())
    }

    /// Gradient with respect to the pooled token vector.
    pub fn encode_backward(
        &self,
        output: ArrayView1<f64>,
        norm: f64,
        d_output: ArrayView1<f64>,
    ) -> Array1<f64> {
        let d_pre = normalize_backward(output, norm, d_output);
        self.projection.t().dot(&d_pre)
    }

    pub fn encode_sentence(&self, text: &str) -> Result<Array1<f64>> {
        Ok(self.encode_text(&self.embed_tokens(text)?))
    }

    /// Image side of the surrogate: `normalize(P · latent)`.
    pub fn encode_latent(&self, latent: ArrayView1<f64>) -> Array1<f64> {
        self.encode_pooled(latent).0
    }
}

fn view_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(token_seed(seed ^ 0x5649_4557, key))
}

fn check_width(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(PlidError::Shape(format!(
            "{name} has width {got}, model expects {want}"
        )));
    }
    Ok(())
}

/// Source of frozen text and image features.
pub trait EncoderBackend: Send + Sync {
    fn text(&self) -> &TextEncoder;

    /// `m x d` unit-norm description embeddings of `pair`, in corpus order.
    fn description_embeddings(&self, ds: &Dataset, pair: Pair, m: usize) -> Result<Array2<f64>>;

    fn encode_image(&self, key: &str) -> Result<Array1<f64>>;

    fn augment_views(&self, key: &str, n: usize, seed: u64) -> Result<ImageViews>;

    /// Embeddings of primitive names, used for feasibility similarity.
    fn primitive_embeddings(&self, vocab: &Vocabulary) -> Result<(Array2<f64>, Array2<f64>)> {
        let embed = |names: &[String]| -> Result<Array2<f64>> {
            let d = self.text().embed_dim();
            let mut m = Array2::zeros((names.len(), d));
            for (i, n) in names.iter().enumerate() {
                m.row_mut(i).assign(&self.text().encode_sentence(n)?);
            }
            Ok(m)
        };
        Ok((embed(&vocab.states)?, embed(&vocab.objects)?))
    }
}

/// Synthetic backend: image latents from `latents.mat`, descriptions encoded
/// by the surrogate text encoder.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    text: TextEncoder,
    latents: HashMap<String, Array1<f64>>,
    view_noise: f64,
}

impl SyntheticBackend {
    pub fn new(text: TextEncoder, latents: HashMap<String, Array1<f64>>, view_noise: f64) -> Self {
        SyntheticBackend {
            text,
            latents,
            view_noise,
        }
    }

    pub fn from_dataset(ds: &Dataset, encoder_seed: u64, embed_dim: usize) -> Result<Self> {
        let m = matrix::read(&ds.root.join(corpus::LATENTS_FILE))?;
        if m.nrows() != ds.samples.len() {
            return Err(PlidError::Validation(format!(
                "{} has {} rows, samples.csv has {} entries",
                corpus::LATENTS_FILE,
                m.nrows(),
                ds.samples.len()
            )));
        }
        check_width(corpus::LATENTS_FILE, m.ncols(), embed_dim)?;
        let latents = ds
            .samples
            .iter()
            .zip(m.rows())
            .map(|(s, r)| (s.image_key.clone(), r.to_owned()))
            .collect();
        Ok(Self::new(
            TextEncoder::new(encoder_seed, embed_dim, embed_dim),
            latents,
            DEFAULT_VIEW_NOISE,
        ))
    }

    pub fn with_view_noise(mut self, view_noise: f64) -> Self {
        self.view_noise = view_noise;
        self
    }

    fn latent(&self, key: &str) -> Result<&Array1<f64>> {
        self.latents
            .get(key)
            .ok_or_else(|| PlidError::UnknownImage(key.to_string()))
    }
}

impl EncoderBackend for SyntheticBackend {
    fn text(&self) -> &TextEncoder {
        &self.text
    }

    fn description_embeddings(&self, ds: &Dataset, pair: Pair, m: usize) -> Result<Array2<f64>> {
        let generated;
        let texts = match ds.corpus.get(pair) {
            Some(t) => t,
            None => {
                generated = corpus::template_descriptions(&ds.vocab, pair, m, self.text.seed());
                &generated
            }
        };
        if texts.len() < m {
            return Err(PlidError::Validation(format!(
                "pair {pair} has {} descriptions, {m} requested",
                texts.len()
            )));
        }
        let mut out = Array2::zeros((m, self.text.embed_dim()));
        for (i, t) in texts.iter().take(m).enumerate() {
            out.row_mut(i).assign(&self.text.encode_sentence(t)?);
        }
        Ok(out)
    }

    fn encode_image(&self, key: &str) -> Result<Array1<f64>> {
        Ok(self.text.encode_latent(self.latent(key)?.view()))
    }

    fn augment_views(&self, key: &str, n: usize, seed: u64) -> Result<ImageViews> {
        let latent = self.latent(key)?;
        let anchor = self.text.encode_latent(latent.view());
        let d_tok = latent.len();
        let sigma = self.view_noise * crate::linalg::l2_norm(latent.view()) / (d_tok as f64).sqrt();
        let mut rng = view_rng(seed, key);
        let mut views = Array2::zeros((n, self.text.embed_dim()));
        for i in 0..n {
            let noisy: Array1<f64> = latent
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + sigma * z
                })
                .collect();
            views.row_mut(i).assign(&self.text.encode_latent(noisy.view()));
        }
        Ok(ImageViews { anchor, views })
    }
}

pub const EMBEDDINGS_DIR: &str = "embeddings";

/// Ingests precomputed embeddings from `<root>/embeddings/`:
/// `text_desc_<s>_<o>.mat` (`M x d`) and `img_<split>.mat`, whose rows align
/// with the samples of that split in `samples.csv` order.
#[derive(Debug, Clone)]
pub struct PrecomputedBackend {
    text: TextEncoder,
    descriptions: HashMap<Pair, Array2<f64>>,
    images: HashMap<String, Array1<f64>>,
    view_noise: f64,
}

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let (n, _) = normalize(r.view());
        r.assign(&n);
    }
    m
}

impl PrecomputedBackend {
    pub fn from_dataset(ds: &Dataset, encoder_seed: u64, embed_dim: usize) -> Result<Self> {
        let dir = ds.root.join(EMBEDDINGS_DIR);
        let mut descriptions = HashMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| PlidError::Load {
            path: dir.clone(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| PlidError::io(&dir, e))?;
            let name = entry.file_name();
            let Some(pair) = name
                .to_str()
                .and_then(|n| n.strip_prefix("text_desc_"))
                .and_then(|n| n.strip_suffix(".mat"))
                .and_then(|n| n.split_once('_'))
                .and_then(|(s, o)| Some(Pair::new(s.parse().ok()?, o.parse().ok()?)))
            else {
                continue;
            };
            let m = matrix::read(&entry.path())?;
            check_width(&name.to_string_lossy(), m.ncols(), embed_dim)?;
            descriptions.insert(pair, normalize_rows(m));
        }
        let mut images = HashMap::new();
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let keys: Vec<&str> = ds.samples_in(kind).map(|s| s.image_key.as_str()).collect();
            if keys.is_empty() {
                continue;
            }
            let path = dir.join(format!("img_{}.mat", kind.as_str()));
            let m = matrix::read(&path)?;
            if m.nrows() != keys.len() {
                return Err(PlidError::Validation(format!(
                    "{} has {} rows, samples.csv lists {} {} samples",
                    path.display(),
                    m.nrows(),
                    keys.len(),
                    kind.as_str()
                )));
            }
            check_width(&path.display().to_string(), m.ncols(), embed_dim)?;
            let m = normalize_rows(m);
            for (k, r) in keys.into_iter().zip(m.rows()) {
                images.insert(k.to_string(), r.to_owned());
            }
        }
        Ok(PrecomputedBackend {
            text: TextEncoder::new(encoder_seed, embed_dim, embed_dim),
            descriptions,
            images,
            view_noise: DEFAULT_VIEW_NOISE,
        })
    }

    pub fn with_view_noise(mut self, view_noise: f64) -> Self {
        self.view_noise = view_noise;
        self
    }

    /// Writes embeddings in the layout read by [`PrecomputedBackend::from_dataset`].
    pub fn export(
        root: &Path,
        ds: &Dataset,
        backend: &dyn EncoderBackend,
        m: usize,
    ) -> Result<()> {
        let dir = root.join(EMBEDDINGS_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| PlidError::io(&dir, e))?;
        for &p in ds.corpus.texts.keys() {
            let emb = backend.description_embeddings(ds, p, m)?;
            matrix::write(
                &dir.join(format!("text_desc_{}_{}.mat", p.state, p.object)),
                &emb,
                matrix::Precision::F32,
            )?;
        }
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            let rows: Vec<Array1<f64>> = ds
                .samples_in(kind)
                .map(|s| backend.encode_image(&s.image_key))
                .collect::<Result<_>>()?;
            if rows.is_empty() {
                continue;
            }
            let mut mat = Array2::zeros((rows.len(), rows[0].len()));
            for (i, r) in rows.iter().enumerate() {
                mat.row_mut(i).assign(r);
            }
            matrix::write(
                &dir.join(format!("img_{}.mat", kind.as_str())),
                &mat,
                matrix::Precision::F32,
            )?;
        }
        Ok(())
    }
}

impl EncoderBackend for PrecomputedBackend {
    fn text(&self) -> &TextEncoder {
        &self.text
    }

    fn description_embeddings(&self, _ds: &Dataset, pair: Pair, m: usize) -> Result<Array2<f64>> {
        let d = self
            .descriptions
            .get(&pair)
            .ok_or_else(|| PlidError::MissingDescriptions(vec![(pair.state, pair.object)]))?;
        if d.nrows() < m {
            return Err(PlidError::Validation(format!(
                "pair {pair} has {} precomputed descriptions, {m} requested",
                d.nrows()
            )));
        }
        Ok(d.slice(ndarray::s![..m, ..]).to_owned())
    }

    fn encode_image(&self, key: &str) -> Result<Array1<f64>> {
        self.images
            .get(key)
            .cloned()
            .ok_or_else(|| PlidError::UnknownImage(key.to_string()))
    }

    fn augment_views(&self, key: &str, n: usize, seed: u64) -> Result<ImageViews> {
        let anchor = self.encode_image(key)?;
        let d = anchor.len();
        let sigma = self.view_noise / (d as f64).sqrt();
        let mut rng = view_rng(seed, key);
        let mut views = Array2::zeros((n, d));
        for i in 0..n {
            let noisy: Array1<f64> = anchor
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + sigma * z
                })
                .collect();
            views.row_mut(i).assign(&normalize(noisy.view()).0);
        }
        Ok(ImageViews { anchor, views })
    }
}

/// Frozen features cached for a run: description embeddings per pair and
/// image views per sample key.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    pub descriptions: HashMap<Pair, Array2<f64>>,
    pub images: HashMap<String, ImageViews>,
}

impl FeatureStore {
    pub fn build(
        backend: &dyn EncoderBackend,
        ds: &Dataset,
        pairs: &[Pair],
        m: usize,
        n_views: usize,
        view_seed: u64,
        exec: Execution,
    ) -> Result<Self> {
        let mut store = FeatureStore::default();
        store.add_pairs(backend, ds, pairs, m, exec)?;
        let images = exec::try_map_indexed(exec, ds.samples.len(), |i| {
            let key = &ds.samples[i].image_key;
            backend.augment_views(key, n_views, view_seed)
        })?;
        store.images = ds
            .samples
            .iter()
            .map(|s| s.image_key.clone())
            .zip(images)
            .collect();
        Ok(store)
    }

    /// Adds description embeddings for pairs not yet cached.
    pub fn add_pairs(
        &mut self,
        backend: &dyn EncoderBackend,
        ds: &Dataset,
        pairs: &[Pair],
        m: usize,
        exec: Execution,
    ) -> Result<()> {
        let todo: Vec<Pair> = pairs
            .iter()
            .copied()
            .filter(|p| !self.descriptions.contains_key(p))
            .collect();
        let results = exec::map_indexed(exec, todo.len(), |i| {
            backend.description_embeddings(ds, todo[i], m)
        });
        let mut missing = Vec::new();
        for (p, r) in todo.iter().zip(results) {
            match r {
                Ok(emb) => {
                    self.descriptions.insert(*p, emb);
                }
                Err(PlidError::MissingDescriptions(v)) => missing.extend(v),
                Err(e) => return Err(e),
            }
        }
        if !missing.is_empty() {
            missing.sort();
            return Err(PlidError::MissingDescriptions(missing));
        }
        Ok(())
    }

    pub fn description(&self, p: Pair) -> Result<&Array2<f64>> {
        self.descriptions
            .get(&p)
            .ok_or_else(|| PlidError::MissingDescriptions(vec![(p.state, p.object)]))
    }

    pub fn image(&self, key: &str) -> Result<&ImageViews> {
        self.images
            .get(key)
            .ok_or_else(|| PlidError::UnknownImage(key.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::RngCore;

    #[test]
    fn token_vectors_are_deterministic_and_case_insensitive() {
        let enc = TextEncoder::new(7, 16, 16);
        let a = enc.embed_tokens("red tomato").unwrap();
        let b = enc.embed_tokens("red tomato").unwrap();
        assert_eq!(a, b);
        let c = enc.embed_tokens("Tomato RED.").unwrap();
        assert_eq!(a.vectors.row(0), c.vectors.row(1));
        assert_eq!(a.vectors.row(1), c.vectors.row(0));
    }

    #[test]
    fn token_vector_matches_external_recomputation() {
        let enc = TextEncoder::new(7, 8, 8);
        let mut bytes = 7u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"red");
        let digest = Sha256::digest(&bytes);
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let expected: Vec<f64> = (0..8)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * (1.0 / 8f64.sqrt())
            })
            .collect();
        assert_eq!(enc.token_vector("red").to_vec(), expected);
        // different seed, different draw
        let other = TextEncoder::new(8, 8, 8);
        assert_ne!(other.token_vector("red"), enc.token_vector("red"));
        let _ = rng.next_u64();
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        for (dt, d) in [(8, 8), (12, 8), (8, 12)] {
            let enc = TextEncoder::new(3, dt, d);
            let p = enc.projection();
            assert_eq!(p.dim(), (d, dt));
            let gram = if d <= dt { p.dot(&p.t()) } else { p.t().dot(p) };
            for i in 0..gram.nrows() {
                for j in 0..gram.ncols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(gram[[i, j]], want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode_text_matches_explicit_matrix_multiply() {
        let enc = TextEncoder::new(7, 6, 6);
        let seq = enc.embed_tokens("a sliced ripe tomato").unwrap();
        let p = enc.projection();
        let n = seq.len() as f64;
        let mut mean = [0.0; 6];
        for r in 0..seq.len() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += seq.vectors[[r, c]];
            }
        }
        let mut out = [0.0; 6];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, m) in mean.iter().enumerate() {
                *o += p[[i, j]] * m / n;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = enc.encode_text(&seq);
        for i in 0..6 {
            assert_abs_diff_eq!(got[i], out[i] / norm, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_text_degenerate_and_invariances() {
        let enc = TextEncoder::new(7, 4, 4);
        let zero = TokenSequence {
            vectors: Array2::zeros((3, 4)),
        };
        assert!(enc.encode_text(&zero).iter().all(|&v| v == 0.0));
        assert!(enc.embed_tokens("  ... ").is_err());

        let single = enc.embed_tokens("tomato").unwrap();
        let (expect, _) = normalize(enc.projection().dot(&single.vectors.row(0)).view());
        assert_eq!(enc.encode_text(&single), expect);

        let seq = enc.embed_tokens("red tomato on table").unwrap();
        let scaled = TokenSequence {
            vectors: seq.vectors.mapv(|x| x * 3.5),
        };
        let a = enc.encode_text(&seq);
        let b = enc.encode_text(&scaled);
        for i in 0..4 {
            assert_abs_diff_eq!(a[i], b[i], epsilon = 1e-14);
        }
        assert_abs_diff_eq!(crate::linalg::l2_norm(a.view()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn context_length_truncates() {
        let long = vec!["word"; 200].join(" ");
        assert_eq!(TextEncoder::tokenize(&long).len(), CONTEXT_LENGTH);
    }

    fn toy_backend() -> SyntheticBackend {
        let enc = TextEncoder::new(7, 32, 32);
        let latent = &enc.token_vector("red") + &enc.token_vector("tomato");
        let mut latents = HashMap::new();
        latents.insert("img_0".to_string(), latent);
        SyntheticBackend::new(enc, latents, DEFAULT_VIEW_NOISE)
    }

    #[test]
    fn views_are_deterministic_and_close_to_anchor() {
        let b = toy_backend();
        let none = b.augment_views("img_0", 0, 1).unwrap();
        assert_eq!(none.views.nrows(), 0);
        assert_eq!(none.support().nrows(), 1);
        let v1 = b.augment_views("img_0", 8, 1).unwrap();
        let v2 = b.augment_views("img_0", 8, 1).unwrap();
        assert_eq!(v1, v2);
        for r in v1.views.rows() {
            assert!(r.dot(&v1.anchor) > 0.9);
            assert_abs_diff_eq!(crate::linalg::l2_norm(r), 1.0, epsilon = 1e-12);
        }
        assert!(matches!(
            b.encode_image("nope"),
            Err(PlidError::UnknownImage(_))
        ));
    }
}
