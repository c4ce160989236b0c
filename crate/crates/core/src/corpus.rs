//! Dataset records, the synthetic corpus generator, tokenization,
//! vocabularies and subject-disjoint three-fold partitioning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_CATEGORIES: usize = 10;
pub const NUM_PA_CATEGORIES: usize = 9;
pub const FEATURE_DIM: usize = 128;
pub const MAX_DESCRIPTIONS: usize = 5;
pub const NUM_FOLDS: usize = 3;
/// Fraction of a fold's training subjects moved to validation.
pub const VALIDATION_FRACTION: f64 = 0.15;

const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "bona-fide",
    "funny glasses",
    "printed paper",
    "mannequin",
    "opaque mask",
    "plastic mask",
    "makeup",
    "silicone mask",
    "paper glasses",
    "tattoo",
];

/// PAD class: 0 is bona-fide, 1..=9 are presentation-attack types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PadCategory(u8);

impl TryFrom<u8> for PadCategory {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v as usize)
    }
}

impl From<PadCategory> for u8 {
    fn from(c: PadCategory) -> u8 {
        c.0
    }
}

impl PadCategory {
    pub const BONA_FIDE: PadCategory = PadCategory(0);

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_CATEGORIES {
            Ok(Self(index as u8))
        } else {
            Err(Error::Data(format!("category {index} outside 0..{NUM_CATEGORIES}")))
        }
    }

    pub fn all() -> impl Iterator<Item = PadCategory> {
        (0..NUM_CATEGORIES as u8).map(PadCategory)
    }

    pub fn attacks() -> impl Iterator<Item = PadCategory> {
        (1..NUM_CATEGORIES as u8).map(PadCategory)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_attack(self) -> bool {
        self.0 != 0
    }

    /// Index among the nine attack types (`0..9`); `None` for bona-fide.
    pub fn attack_index(self) -> Option<usize> {
        self.is_attack().then(|| self.index() - 1)
    }

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self.index()]
    }
}

impl fmt::Display for PadCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One record: feature vector, subject, class and reference descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub subject_id: String,
    pub category: PadCategory,
    pub features: Vec<f64>,
    pub descriptions: Vec<String>,
}

impl Sample {
    pub fn description_tokens(&self) -> Vec<Vec<String>> {
        self.descriptions.iter().map(|d| tokenize(d)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    subject_id: String,
    category: usize,
    features: Vec<f64>,
    descriptions: Vec<String>,
}

const STRIP: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// Lowercases, strips `.,!?;:"'()` and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !STRIP.contains(c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Dense token ids with the four reserved entries first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;
    pub const RESERVED: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    /// Reserved tokens, then every token with frequency `>= min_count`
    /// ordered by descending frequency and then lexicographically.
    pub fn build<'a, I>(sentences: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !Self::RESERVED.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = Self::RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_owned()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::RESERVED.len()
            || tokens.iter().zip(Self::RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Data("duplicate vocabulary token".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Token ids with unknown words mapped to `<unk>`, no `<eos>`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(Self::UNK))
            .collect()
    }

    /// [`Vocabulary::encode`] followed by `<eos>`: the teacher-forcing target.
    pub fn encode_target(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = self.encode(tokens);
        ids.push(Self::EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Synthetic corpus parameters; also the on-disk config schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Samples per category, indexed by category.
    pub counts: [usize; NUM_CATEGORIES],
    pub separation: f64,
    pub sigma: f64,
    pub num_subjects: usize,
    pub seed: u64,
    pub feature_dim: usize,
}

impl Default for SynthConfig {
    /// Dataset proportions at quarter scale.
    fn default() -> Self {
        Self {
            counts: [276, 35, 14, 18, 7, 58, 51, 8, 16, 23],
            separation: 3.0,
            sigma: 0.6,
            num_subjects: 45,
            seed: 7,
            feature_dim: FEATURE_DIM,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_subjects < NUM_FOLDS.max(9) {
            return Err(Error::Config(format!(
                "num_subjects = {} cannot form {NUM_FOLDS} subject-disjoint folds (need at least 9)",
                self.num_subjects
            )));
        }
        if let Some(c) = self.counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!(
                "category {} ({}) has zero samples",
                c, CATEGORY_NAMES[c]
            )));
        }
        if self.feature_dim < NUM_CATEGORIES {
            return Err(Error::Config(format!(
                "feature_dim {} smaller than the number of categories",
                self.feature_dim
            )));
        }
        if !(self.sigma > 0.0) || !(self.separation >= 0.0) {
            return Err(Error::Config("sigma must be > 0 and separation >= 0".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

const COLORS: [&str; 6] = ["white", "black", "red", "blue", "pink", "gray"];

/// Per-attack-type templates; `{color}` is filled from [`COLORS`].
const TEMPLATES: [[&str; 4]; NUM_PA_CATEGORIES] = [
    [
        "the subject wears funny glasses",
        "a pair of {color} funny glasses covers the eyes",
        "funny novelty glasses are worn over the eyes",
        "the person is wearing oversized funny glasses",
    ],
    [
        "a printed photo of a face is held up",
        "the face is printed on a sheet of paper",
        "a paper print of the face is presented",
        "someone holds a printed photo in front of the camera",
    ],
    [
        "a mannequin head is presented",
        "the face belongs to a {color} mannequin",
        "a dummy mannequin head replaces the subject",
        "this is a mannequin with a lifeless face",
    ],
    [
        "an opaque mask covers the face",
        "the subject wears a {color} opaque mask",
        "a solid opaque mask hides the whole face",
        "the face is fully covered by an opaque mask",
    ],
    [
        "a plastic mask covers the face",
        "the subject wears a {color} plastic mask",
        "a rigid plastic mask is presented",
        "there is a shiny plastic mask on the face",
    ],
    [
        "the subject wears heavy makeup",
        "makeup is applied to alter the face",
        "the face is painted with {color} makeup",
        "heavy cosmetics change the look of the face",
    ],
    [
        "a silicone mask covers the face",
        "the subject wears a realistic silicone mask",
        "a soft silicone mask imitates real skin",
        "the face is a {color} silicone mask",
    ],
    [
        "the subject wears paper glasses",
        "a pair of paper glasses covers the eyes",
        "cardboard paper glasses are worn",
        "paper cutout glasses sit on the face",
    ],
    [
        "a tattoo is drawn on the face",
        "the subject has a fake tattoo on the cheek",
        "a {color} tattoo covers part of the face",
        "an ink tattoo is visible on the face",
    ],
];

/// Templates for one attack type.
pub fn templates(category: PadCategory) -> Option<&'static [&'static str; 4]> {
    category.attack_index().map(|i| &TEMPLATES[i])
}

/// Gaussian features around `separation · e_c` (unit basis direction per
/// category) plus five template descriptions for every attack sample.
/// Subjects are assigned round-robin over the global sample order.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples = Vec::with_capacity(config.total());
    for category in PadCategory::all() {
        for _ in 0..config.counts[category.index()] {
            let g = samples.len();
            let mut features: Vec<f64> =
                (0..config.feature_dim).map(|_| noise.sample(&mut rng)).collect();
            features[category.index()] += config.separation;
            let descriptions = match templates(category) {
                None => Vec::new(),
                Some(ts) => (0..MAX_DESCRIPTIONS)
                    .map(|_| {
                        let t = ts[rng.gen_range(0..ts.len())];
                        t.replace("{color}", COLORS[rng.gen_range(0..COLORS.len())])
                    })
                    .collect(),
            };
            samples.push(Sample {
                sample_id: format!("s{g:05}"),
                subject_id: format!("subj{:03}", g % config.num_subjects),
                category,
                features,
                descriptions,
            });
        }
    }
    Ok(samples)
}

/// Per-category sample counts, indexed by category.
pub fn category_counts(samples: &[Sample]) -> [usize; NUM_CATEGORIES] {
    let mut counts = [0; NUM_CATEGORIES];
    for s in samples {
        counts[s.category.index()] += 1;
    }
    counts
}

fn validate_sample(s: &Sample, feature_dim: usize) -> std::result::Result<(), String> {
    if s.features.len() != feature_dim {
        return Err(format!(
            "sample {} has {} features, expected {feature_dim}",
            s.sample_id,
            s.features.len()
        ));
    }
    if s.features.iter().any(|v| !v.is_finite()) {
        return Err(format!("sample {} has non-finite features", s.sample_id));
    }
    if s.descriptions.len() > MAX_DESCRIPTIONS {
        return Err(format!(
            "sample {} has {} descriptions (max {MAX_DESCRIPTIONS})",
            s.sample_id,
            s.descriptions.len()
        ));
    }
    match (s.category.is_attack(), s.descriptions.is_empty()) {
        (true, true) => Err(format!("attack sample {} has no descriptions", s.sample_id)),
        (false, false) => Err(format!("bona-fide sample {} has descriptions", s.sample_id)),
        _ => Ok(()),
    }
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = SampleRecord {
            sample_id: s.sample_id.clone(),
            subject_id: s.subject_id.clone(),
            category: s.category.index(),
            features: s.features.clone(),
            descriptions: s.descriptions.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset, validating every record against `feature_dim`.
pub fn load_jsonl(path: &Path, feature_dim: usize) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        let category = PadCategory::new(rec.category).map_err(|e| record_err(e.to_string()))?;
        let sample = Sample {
            sample_id: rec.sample_id,
            subject_id: rec.subject_id,
            category,
            features: rec.features,
            descriptions: rec.descriptions,
        };
        validate_sample(&sample, feature_dim).map_err(record_err)?;
        if !seen.insert(sample.sample_id.clone()) {
            return Err(record_err(format!("duplicate sample_id {}", sample.sample_id)));
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// SHA-256 of the canonical JSON Lines serialization.
pub fn corpus_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        let rec = SampleRecord {
            sample_id: s.sample_id.clone(),
            subject_id: s.subject_id.clone(),
            category: s.category.index(),
            features: s.features.clone(),
            descriptions: s.descriptions.clone(),
        };
        h.update(serde_json::to_vec(&rec).expect("record serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Sample ids of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Three subject-disjoint base sets and the folds built from them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub subject_sets: Vec<Vec<String>>,
    pub folds: Vec<Fold>,
}

/// Shuffles subjects with `seed`, cuts them into three sets of roughly
/// equal sample count, and for each fold moves `⌈15%⌉` of the training
/// subjects to validation.
pub fn split_folds(samples: &[Sample], seed: u64) -> Result<FoldPlan> {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *sizes.entry(s.subject_id.as_str()).or_default() += 1;
    }
    if sizes.len() < NUM_FOLDS {
        return Err(Error::Config(format!(
            "{} distinct subjects; at least {NUM_FOLDS} required for subject-disjoint folds",
            sizes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects: Vec<&str> = sizes.keys().copied().collect();
    subjects.shuffle(&mut rng);

    let total = samples.len() as f64;
    let mut sets: Vec<Vec<&str>> = vec![Vec::new(); NUM_FOLDS];
    let mut cumulative = 0usize;
    for &subj in &subjects {
        let size = sizes[subj];
        let mid = cumulative as f64 + size as f64 / 2.0;
        let k = ((NUM_FOLDS as f64 * mid / total) as usize).min(NUM_FOLDS - 1);
        sets[k].push(subj);
        cumulative += size;
    }
    // A dominant subject can leave a set empty; borrow from the largest set.
    while let Some(empty) = sets.iter().position(Vec::is_empty) {
        let donor = (0..NUM_FOLDS)
            .filter(|&k| sets[k].len() > 1)
            .max_by_key(|&k| sets[k].len())
            .expect("at least three subjects");
        let moved = sets[donor].pop().expect("donor non-empty");
        sets[empty].push(moved);
    }

    let ids_of = |subs: &[&str]| -> Vec<String> {
        let set: BTreeSet<&str> = subs.iter().copied().collect();
        samples
            .iter()
            .filter(|s| set.contains(s.subject_id.as_str()))
            .map(|s| s.sample_id.clone())
            .collect()
    };

    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for k in 0..NUM_FOLDS {
        let mut train_subjects: Vec<&str> = (0..NUM_FOLDS)
            .filter(|&j| j != k)
            .flat_map(|j| sets[j].iter().copied())
            .collect();
        train_subjects.shuffle(&mut rng);
        let n_val = ((VALIDATION_FRACTION * train_subjects.len() as f64).ceil() as usize)
            .clamp(1, train_subjects.len().saturating_sub(1).max(1));
        let validation: Vec<&str> = train_subjects.drain(..n_val).collect();
        folds.push(Fold {
            train: ids_of(&train_subjects),
            validation: ids_of(&validation),
            test: ids_of(&sets[k]),
        });
    }
    Ok(FoldPlan {
        subject_sets: sets
            .into_iter()
            .map(|s| {
                let mut v: Vec<String> = s.into_iter().map(str::to_owned).collect();
                v.sort();
                v
            })
            .collect(),
        folds,
    })
}

/// Samples of `ids`, in dataset order.
pub fn select<'a>(samples: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
    let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    samples
        .iter()
        .filter(|s| set.contains(s.sample_id.as_str()))
        .collect()
}

/// Vocabulary over the tokenized descriptions of `samples`.
pub fn vocabulary_for(samples: &[&Sample], min_count: usize) -> Result<Vocabulary> {
    let tokenized: Vec<Vec<String>> = samples
        .iter()
        .flat_map(|s| s.description_tokens())
        .collect();
    Vocabulary::build(tokenized.iter().map(Vec::as_slice), min_count)
}
