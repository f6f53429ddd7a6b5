//! Vocabularies, composition splits, description corpora and sample manifests.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! vocabulary.json          {"states": [...], "objects": [...]}
//! splits.json              {"seen": [[s,o],...], "unseen_val": [...], "unseen_test": [...]}
//! descriptions/<s>_<o>.txt one description per line, UTF-8
//! samples.csv              image_key,state_id,object_id,split
//! latents.mat              synthetic image latents, one row per sample (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{PlidError, Result};
use crate::matrix::{self, Precision};

pub const VOCABULARY_FILE: &str = "vocabulary.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const DESCRIPTIONS_DIR: &str = "descriptions";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const LATENTS_FILE: &str = "latents.mat";

/// A (state, object) composition, addressed by vocabulary ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Pair {
    pub state: usize,
    pub object: usize,
}

impl Pair {
    pub const fn new(state: usize, object: usize) -> Self {
        Pair { state, object }
    }
}

impl From<[usize; 2]> for Pair {
    fn from(v: [usize; 2]) -> Self {
        Pair::new(v[0], v[1])
    }
}

impl From<Pair> for [usize; 2] {
    fn from(p: Pair) -> Self {
        [p.state, p.object]
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.state, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub states: Vec<String>,
    pub objects: Vec<String>,
}

impl Vocabulary {
    pub fn new(states: Vec<String>, objects: Vec<String>) -> Result<Self> {
        let v = Vocabulary { states, objects };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, names) in [("states", &self.states), ("objects", &self.objects)] {
            if names.is_empty() {
                return Err(PlidError::Validation(format!("{kind} list is empty")));
            }
            let mut seen = HashSet::new();
            for name in names {
                if name.trim().is_empty() {
                    return Err(PlidError::Validation(format!("blank name in {kind}")));
                }
                if !seen.insert(name.as_str()) {
                    return Err(PlidError::Validation(format!(
                        "duplicate name `{name}` in {kind}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn contains(&self, p: Pair) -> bool {
        p.state < self.states.len() && p.object < self.objects.len()
    }

    pub fn label(&self, p: Pair) -> String {
        format!("{} {}", self.states[p.state], self.objects[p.object])
    }

    /// Every pair of the Cartesian product, state-major.
    pub fn all_pairs(&self) -> Vec<Pair> {
        (0..self.num_states())
            .flat_map(|s| (0..self.num_objects()).map(move |o| Pair::new(s, o)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSplit {
    pub seen: Vec<Pair>,
    pub unseen_val: Vec<Pair>,
    pub unseen_test: Vec<Pair>,
}

impl CompositionSplit {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (name, list) in [
            ("seen", &self.seen),
            ("unseen_val", &self.unseen_val),
            ("unseen_test", &self.unseen_test),
        ] {
            let mut dedup = HashSet::new();
            for &p in list {
                if !vocab.contains(p) {
                    return Err(PlidError::Validation(format!(
                        "{name} pair {p} outside vocabulary bounds"
                    )));
                }
                if !dedup.insert(p) {
                    return Err(PlidError::Validation(format!("duplicate {name} pair {p}")));
                }
            }
        }
        let seen: HashSet<Pair> = self.seen.iter().copied().collect();
        if seen.is_empty() {
            return Err(PlidError::Validation("seen split is empty".into()));
        }
        for (name, list) in [("unseen_test", &self.unseen_test), ("unseen_val", &self.unseen_val)] {
            if let Some(p) = list.iter().find(|p| seen.contains(p)) {
                return Err(PlidError::Validation(format!(
                    "pair {p} is both seen and {name}"
                )));
            }
        }
        for s in 0..vocab.num_states() {
            if !self.seen.iter().any(|p| p.state == s) {
                return Err(PlidError::Validation(format!(
                    "state `{}` appears in no seen pair",
                    vocab.states[s]
                )));
            }
        }
        for o in 0..vocab.num_objects() {
            if !self.seen.iter().any(|p| p.object == o) {
                return Err(PlidError::Validation(format!(
                    "object `{}` appears in no seen pair",
                    vocab.objects[o]
                )));
            }
        }
        Ok(())
    }

    pub fn is_seen(&self, p: Pair) -> bool {
        self.seen.contains(&p)
    }

    /// seen followed by unseen_val and unseen_test, without duplicates.
    pub fn closed_world_pairs(&self) -> Vec<Pair> {
        let mut out = self.seen.clone();
        let mut have: HashSet<Pair> = out.iter().copied().collect();
        for &p in self.unseen_val.iter().chain(&self.unseen_test) {
            if have.insert(p) {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DescriptionCorpus {
    pub texts: BTreeMap<Pair, Vec<String>>,
}

impl DescriptionCorpus {
    /// Descriptions per composition; `None` for an empty corpus.
    pub fn per_pair(&self) -> Option<usize> {
        self.texts.values().next().map(Vec::len)
    }

    pub fn get(&self, p: Pair) -> Option<&[String]> {
        self.texts.get(&p).map(Vec::as_slice)
    }

    fn validate(&self, required: &[Pair]) -> Result<()> {
        let mut m = None;
        for (p, texts) in &self.texts {
            if texts.is_empty() {
                return Err(PlidError::Validation(format!("no descriptions for pair {p}")));
            }
            match m {
                None => m = Some(texts.len()),
                Some(m) if m != texts.len() => {
                    return Err(PlidError::Validation(format!(
                        "pair {p} has {} descriptions, expected {m}",
                        texts.len()
                    )))
                }
                _ => {}
            }
        }
        if let Some(p) = required.iter().find(|p| !self.texts.contains_key(p)) {
            return Err(PlidError::Validation(format!(
                "descriptions missing for pair {p} ({})",
                description_file_name(*p)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_key: String,
    #[serde(rename = "state_id")]
    pub state: usize,
    #[serde(rename = "object_id")]
    pub object: usize,
    pub split: SplitKind,
}

impl SampleRecord {
    pub fn pair(&self) -> Pair {
        Pair::new(self.state, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: Vocabulary,
    pub split: CompositionSplit,
    pub corpus: DescriptionCorpus,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn samples_in(&self, kind: SplitKind) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == kind)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.split.validate(&self.vocab)?;
        self.corpus.validate(&self.split.closed_world_pairs())?;
        if let Some(p) = self.corpus.texts.keys().find(|p| !self.vocab.contains(**p)) {
            return Err(PlidError::Validation(format!(
                "description file for pair {p} outside vocabulary bounds"
            )));
        }
        let seen: HashSet<Pair> = self.split.seen.iter().copied().collect();
        let mut keys = HashSet::new();
        for s in &self.samples {
            if !self.vocab.contains(s.pair()) {
                return Err(PlidError::Validation(format!(
                    "sample `{}` label {} outside vocabulary bounds",
                    s.image_key,
                    s.pair()
                )));
            }
            if s.split == SplitKind::Train && !seen.contains(&s.pair()) {
                return Err(PlidError::Validation(format!(
                    "train sample `{}` has unseen pair {}",
                    s.image_key,
                    s.pair()
                )));
            }
            if !keys.insert(s.image_key.as_str()) {
                return Err(PlidError::Validation(format!(
                    "duplicate image key `{}`",
                    s.image_key
                )));
            }
        }
        Ok(())
    }
}

pub fn description_file_name(p: Pair) -> String {
    format!("{}_{}.txt", p.state, p.object)
}

fn parse_description_file_name(name: &str) -> Option<Pair> {
    let stem = name.strip_suffix(".txt")?;
    let (s, o) = stem.split_once('_')?;
    Some(Pair::new(s.parse().ok()?, o.parse().ok()?))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PlidError::Load {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| PlidError::parse(path, e))
}

/// Loads and validates a dataset directory. Descriptions of each composition
/// are sorted lexicographically so that index `m` pairs supports across classes.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let vocab: Vocabulary = read_json(&root.join(VOCABULARY_FILE))?;
    vocab.validate()?;
    let split: CompositionSplit = read_json(&root.join(SPLITS_FILE))?;
    split.validate(&vocab)?;

    let desc_dir = root.join(DESCRIPTIONS_DIR);
    let entries = fs::read_dir(&desc_dir).map_err(|e| PlidError::Load {
        path: desc_dir.clone(),
        source: e,
    })?;
    let mut corpus = DescriptionCorpus::default();
    for entry in entries {
        let entry = entry.map_err(|e| PlidError::io(&desc_dir, e))?;
        let name = entry.file_name();
        let Some(pair) = name.to_str().and_then(parse_description_file_name) else {
            continue;
        };
        let text = read_text(&entry.path())?;
        let mut lines: Vec<String> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        lines.sort();
        corpus.texts.insert(pair, lines);
    }

    let samples_path = root.join(SAMPLES_FILE);
    let file = fs::File::open(&samples_path).map_err(|e| PlidError::Load {
        path: samples_path.clone(),
        source: e,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let mut samples = Vec::new();
    for row in reader.deserialize() {
        let rec: SampleRecord = row.map_err(|e| PlidError::parse(&samples_path, e))?;
        samples.push(rec);
    }

    let ds = Dataset {
        root: root.to_path_buf(),
        vocab,
        split,
        corpus,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| PlidError::io(path, e))
}

/// Writes the text artefacts of a dataset (vocabulary, splits, descriptions, samples).
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let desc_dir = root.join(DESCRIPTIONS_DIR);
    fs::create_dir_all(&desc_dir).map_err(|e| PlidError::io(&desc_dir, e))?;
    write_json(&root.join(VOCABULARY_FILE), &ds.vocab)?;
    write_json(&root.join(SPLITS_FILE), &ds.split)?;
    for (p, texts) in &ds.corpus.texts {
        let path = desc_dir.join(description_file_name(*p));
        let mut body = texts.join("\n");
        body.push('\n');
        fs::write(&path, body).map_err(|e| PlidError::io(&path, e))?;
    }
    let samples_path = root.join(SAMPLES_FILE);
    let mut writer = csv::Writer::from_path(&samples_path)
        .map_err(|e| PlidError::parse(&samples_path, e))?;
    for s in &ds.samples {
        writer
            .serialize(s)
            .map_err(|e| PlidError::parse(&samples_path, e))?;
    }
    writer.flush().map_err(|e| PlidError::io(&samples_path, e))?;
    Ok(())
}

/// Arguments of [`make_synthetic_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_states: usize,
    pub num_objects: usize,
    pub seen_fraction: f64,
    pub samples_per_pair: usize,
    pub descriptions_per_pair: usize,
    pub seed: u64,
    /// Latent/embedding width; must equal the model's `embed_dim`.
    pub embed_dim: usize,
    /// Seed of the surrogate text encoder whose token vectors anchor the latents.
    pub encoder_seed: u64,
}

impl SynthSpec {
    pub fn new(
        num_states: usize,
        num_objects: usize,
        seen_fraction: f64,
        samples_per_pair: usize,
        descriptions_per_pair: usize,
        seed: u64,
    ) -> Self {
        SynthSpec {
            num_states,
            num_objects,
            seen_fraction,
            samples_per_pair,
            descriptions_per_pair,
            seed,
            embed_dim: 64,
            encoder_seed: crate::encoder::DEFAULT_ENCODER_SEED,
        }
    }
}

const STATE_NAMES: &[&str] = &[
    "sliced", "ripe", "wet", "broken", "rusty", "melted", "frozen", "burnt", "folded", "painted",
    "old", "shiny", "cracked", "peeled", "wrinkled", "dry", "fresh", "crushed", "coiled", "muddy",
];
const OBJECT_NAMES: &[&str] = &[
    "tomato", "apple", "shoe", "bread", "window", "fence", "paper", "knife", "car", "bottle",
    "rope", "cake", "boot", "mirror", "bucket", "plate", "jacket", "pipe", "leaf", "chair",
];

fn primitive_names(pool: &[&str], n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let base = pool[i % pool.len()];
            if i < pool.len() {
                base.to_string()
            } else {
                format!("{base}{}", i / pool.len())
            }
        })
        .collect()
}

const OPENERS: &[&str] = &[
    "The picture features",
    "The image shows",
    "This photo captures",
    "In this shot we see",
];
const QUALIFIERS: &[&str] = &[
    "a", "a single", "a close view of a", "an ordinary", "a striking", "a small",
];
const SETTINGS: &[&str] = &[
    "on a wooden table",
    "in soft daylight",
    "against a plain background",
    "near a kitchen counter",
    "in the middle of the frame",
    "under bright light",
    "beside a window",
    "on the ground outside",
];
const ENDINGS: &[&str] = &[
    "with fine visible detail",
    "that draws the eye",
    "in a natural pose",
    "with subtle shadows",
    "",
];

/// Template description in the style "The picture features ...", with seeded
/// choice among synonymous openers, qualifiers and scene phrases.
pub fn template_description(state: &str, object: &str, rng: &mut impl Rng) -> String {
    let opener = OPENERS.choose(rng).unwrap();
    let qualifier = QUALIFIERS.choose(rng).unwrap();
    let setting = SETTINGS.choose(rng).unwrap();
    let ending = ENDINGS.choose(rng).unwrap();
    let mut s = format!("{opener} {qualifier} {state} {object} {setting}");
    if !ending.is_empty() {
        s.push(' ');
        s.push_str(ending);
    }
    s.push('.');
    s
}

/// Deterministic template descriptions for a pair, used when a corpus has none.
pub fn template_descriptions(vocab: &Vocabulary, p: Pair, m: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ ((p.state as u64) << 32 | p.object as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut texts: Vec<String> = (0..m)
        .map(|_| template_description(&vocab.states[p.state], &vocab.objects[p.object], &mut rng))
        .collect();
    texts.sort();
    texts
}

fn choose_seen(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let total = spec.num_states * spec.num_objects;
    let n_seen = (spec.seen_fraction * total as f64).round() as usize;
    let cover = spec.num_states.max(spec.num_objects);
    if n_seen < cover {
        return Err(PlidError::Construction(format!(
            "seen_fraction {} gives {n_seen} seen pairs, at least {cover} are needed to cover every primitive",
            spec.seen_fraction
        )));
    }
    let mut states: Vec<usize> = (0..spec.num_states).collect();
    let mut objects: Vec<usize> = (0..spec.num_objects).collect();
    states.shuffle(rng);
    objects.shuffle(rng);
    let mut seen: BTreeSet<Pair> = (0..cover)
        .map(|i| Pair::new(states[i % spec.num_states], objects[i % spec.num_objects]))
        .collect();
    let mut rest: Vec<Pair> = (0..spec.num_states)
        .flat_map(|s| (0..spec.num_objects).map(move |o| Pair::new(s, o)))
        .filter(|p| !seen.contains(p))
        .collect();
    rest.shuffle(rng);
    seen.extend(rest.into_iter().take(n_seen - cover));
    Ok(seen.into_iter().collect())
}

const TEXT_WEIGHT: f64 = 0.2;
const VISUAL_WEIGHT: f64 = 1.0;
const INTERACTION_WEIGHT: f64 = 1.0;
const NOISE_WEIGHT: f64 = 3.0;

/// Generates a synthetic dataset with compositional latent structure and
/// writes it to `out`. Image latents are `0.2(e_s + e_o) + (g_s + g_o) +
/// r_so + 3n`, where `e_*` are the surrogate token vectors of the primitive
/// names, `g_*` visual directions absent from text, `r_so` a per-composition
/// interaction and `n` per-sample noise, all with expected norm 1.
pub fn make_synthetic_dataset(spec: &SynthSpec, out: &Path) -> Result<Dataset> {
    if spec.num_states < 2 || spec.num_objects < 2 {
        return Err(PlidError::Construction(
            "need at least 2 states and 2 objects".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.seen_fraction) {
        return Err(PlidError::Construction(format!(
            "seen_fraction {} outside [0, 1]",
            spec.seen_fraction
        )));
    }
    if spec.samples_per_pair == 0 || spec.descriptions_per_pair == 0 || spec.embed_dim == 0 {
        return Err(PlidError::Construction(
            "samples_per_pair, descriptions_per_pair and embed_dim must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = Vocabulary::new(
        primitive_names(STATE_NAMES, spec.num_states),
        primitive_names(OBJECT_NAMES, spec.num_objects),
    )?;
    let seen = choose_seen(spec, &mut rng)?;
    let seen_set: HashSet<Pair> = seen.iter().copied().collect();
    let unseen: Vec<Pair> = vocab
        .all_pairs()
        .into_iter()
        .filter(|p| !seen_set.contains(p))
        .collect();
    let mut val_pick = unseen.clone();
    val_pick.shuffle(&mut rng);
    val_pick.truncate(unseen.len().div_ceil(2));
    val_pick.sort();
    let split = CompositionSplit {
        seen,
        unseen_val: val_pick,
        unseen_test: unseen,
    };
    split.validate(&vocab)?;

    let mut corpus = DescriptionCorpus::default();
    for p in split.closed_world_pairs() {
        let mut texts: Vec<String> = (0..spec.descriptions_per_pair)
            .map(|_| {
                template_description(&vocab.states[p.state], &vocab.objects[p.object], &mut rng)
            })
            .collect();
        texts.sort();
        corpus.texts.insert(p, texts);
    }

    let d = spec.embed_dim;
    let text = TextEncoder::new(spec.encoder_seed, d, d);
    let gaussian = |scale: f64, rng: &mut ChaCha8Rng| -> ndarray::Array1<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale / (d as f64).sqrt()
            })
            .collect()
    };
    let visual_states: Vec<_> = (0..vocab.num_states()).map(|_| gaussian(1.0, &mut rng)).collect();
    let visual_objects: Vec<_> = (0..vocab.num_objects()).map(|_| gaussian(1.0, &mut rng)).collect();
    let interactions: BTreeMap<Pair, _> = vocab
        .all_pairs()
        .into_iter()
        .map(|p| (p, gaussian(1.0, &mut rng)))
        .collect();

    let unseen_val: HashSet<Pair> = split.unseen_val.iter().copied().collect();
    let mut samples = Vec::new();
    let mut latents: Vec<f64> = Vec::new();
    for p in vocab.all_pairs() {
        let is_seen = seen_set.contains(&p);
        let in_val = unseen_val.contains(&p);
        let base = (&text.token_vector(&vocab.states[p.state])
            + &text.token_vector(&vocab.objects[p.object]))
            * TEXT_WEIGHT
            + (&visual_states[p.state] + &visual_objects[p.object]) * VISUAL_WEIGHT
            + &interactions[&p] * INTERACTION_WEIGHT;
        for i in 0..spec.samples_per_pair {
            let kind = if is_seen {
                match i % 5 {
                    3 => SplitKind::Val,
                    4 => SplitKind::Test,
                    _ => SplitKind::Train,
                }
            } else if in_val && i % 2 == 0 {
                SplitKind::Val
            } else {
                SplitKind::Test
            };
            let latent = &base + &gaussian(NOISE_WEIGHT, &mut rng);
            latents.extend(latent.iter());
            samples.push(SampleRecord {
                image_key: format!("img_{:05}", samples.len()),
                state: p.state,
                object: p.object,
                split: kind,
            });
        }
    }

    let ds = Dataset {
        root: out.to_path_buf(),
        vocab,
        split,
        corpus,
        samples,
    };
    ds.validate()?;
    write_dataset(&ds, out)?;
    let latent_matrix = Array2::from_shape_vec((ds.samples.len(), d), latents)
        .expect("latent buffer sized rows * d");
    matrix::write(&out.join(LATENTS_FILE), &latent_matrix, Precision::F32)?;
    Ok(ds)
}

/// Cosine similarity tables between primitives, used by feasibility scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveSimilarity {
    pub states: Array2<f64>,
    pub objects: Array2<f64>,
}

impl PrimitiveSimilarity {
    /// Builds cosine tables from per-primitive embedding rows.
    pub fn from_embeddings(states: &Array2<f64>, objects: &Array2<f64>) -> Self {
        let cos = |m: &Array2<f64>| {
            let rows: Vec<_> = m
                .rows()
                .into_iter()
                .map(|r| crate::linalg::normalized(r))
                .collect();
            Array2::from_shape_fn((rows.len(), rows.len()), |(i, j)| rows[i].dot(&rows[j]))
        };
        PrimitiveSimilarity {
            states: cos(states),
            objects: cos(objects),
        }
    }
}

/// Feasibility score of every pair: the mean of the best object similarity
/// among objects seen with the state and the best state similarity among
/// states seen with the object.
pub fn feasibility_scores(
    vocab: &Vocabulary,
    split: &CompositionSplit,
    sim: &PrimitiveSimilarity,
) -> Result<Array2<f64>> {
    let (ns, no) = (vocab.num_states(), vocab.num_objects());
    if sim.states.dim() != (ns, ns) || sim.objects.dim() != (no, no) {
        return Err(PlidError::Shape(format!(
            "similarity tables {:?}/{:?} do not match vocabulary {ns}x{no}",
            sim.states.dim(),
            sim.objects.dim()
        )));
    }
    let mut objects_with_state = vec![Vec::new(); ns];
    let mut states_with_object = vec![Vec::new(); no];
    for p in &split.seen {
        objects_with_state[p.state].push(p.object);
        states_with_object[p.object].push(p.state);
    }
    Ok(Array2::from_shape_fn((ns, no), |(s, o)| {
        let obj_term = objects_with_state[s]
            .iter()
            .map(|&o2| sim.objects[[o, o2]])
            .fold(f64::NEG_INFINITY, f64::max);
        let state_term = states_with_object[o]
            .iter()
            .map(|&s2| sim.states[[s, s2]])
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (obj_term + state_term)
    }))
}

/// Pairs whose feasibility score reaches `threshold`, plus every seen pair.
/// Returned in state-major order.
pub fn feasible_compositions(
    vocab: &Vocabulary,
    split: &CompositionSplit,
    sim: &PrimitiveSimilarity,
    threshold: f64,
) -> Result<Vec<Pair>> {
    if threshold.is_nan() {
        return Err(PlidError::InvalidArgument("threshold is NaN".into()));
    }
    let scores = feasibility_scores(vocab, split, sim)?;
    let seen: HashSet<Pair> = split.seen.iter().copied().collect();
    Ok(vocab
        .all_pairs()
        .into_iter()
        .filter(|p| seen.contains(p) || scores[[p.state, p.object]] >= threshold)
        .collect())
}
