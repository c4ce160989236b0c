//! Word-wise, sentence-semantic and sentence-discriminative losses, the
//! mean-word-embedding sentence embedder, the frozen sentence classifier
//! and the weighted total.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PadCategory, NUM_PA_CATEGORIES};
use crate::error::{Error, Result};
use crate::lg::{TeacherForced, WORD_DIM};
use crate::optim::AdamState;
use crate::pad::{argmax, INIT_BOUND};
use crate::params::{accumulate, register, Parameters};
use crate::tensor::{log_sum_exp, Tape, Tensor, Var};

/// `ω1·L_pad + ω2·(λ_ww·L_ww + λ_disc·L_disc + λ_ss·L_ss)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pad: f64,
    pub lg: f64,
    pub word_wise: f64,
    pub discriminative: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pad: 1.0,
            lg: 1.0,
            word_wise: 1.0,
            discriminative: 0.2,
            semantic: 0.5,
        }
    }
}

impl LossWeights {
    /// Word-wise loss only.
    pub fn word_wise_only() -> Self {
        Self {
            discriminative: 0.0,
            semantic: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.pad, self.lg, self.word_wise, self.discriminative, self.semantic];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        let inner = self.word_wise + self.discriminative + self.semantic;
        if self.pad == 0.0 && (self.lg == 0.0 || inner == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    pub fn uses_soft_rollout(&self) -> bool {
        self.lg > 0.0 && (self.discriminative > 0.0 || self.semantic > 0.0)
    }
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pad: f64,
    pub word_wise: f64,
    pub discriminative: f64,
    pub semantic: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.pad * c.pad
        + w.lg * (w.word_wise * c.word_wise + w.discriminative * c.discriminative + w.semantic * c.semantic))
}

/// Tape version of [`total_loss`] over the LG terms; the PAD term is a
/// reported constant during LG training and adds no gradient.
pub fn total_lg_loss(
    tape: &mut Tape,
    w: &LossWeights,
    word_wise: Option<Var>,
    discriminative: Option<Var>,
    semantic: Option<Var>,
) -> Result<Var> {
    w.validate()?;
    let mut terms = Vec::new();
    for (var, weight) in [
        (word_wise, w.word_wise),
        (discriminative, w.discriminative),
        (semantic, w.semantic),
    ] {
        if let Some(v) = var {
            if weight > 0.0 {
                terms.push(tape.scale(v, w.lg * weight));
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant_owned(Tensor::scalar(0.0)));
    }
    tape.add_all(&terms)
}

/// `Σ_t −log softmax(logits_t)[ref_t]` on per-step logit rows.
pub fn word_wise_loss(logit_rows: &[Vec<f64>], reference: &[usize]) -> Result<f64> {
    if logit_rows.len() != reference.len() {
        return Err(Error::Shape(format!(
            "word_wise_loss: {} logit rows for {} reference tokens",
            logit_rows.len(),
            reference.len()
        )));
    }
    logit_rows
        .iter()
        .zip(reference)
        .map(|(row, &t)| {
            row.get(t)
                .map(|z| log_sum_exp(row) - z)
                .ok_or(Error::TargetOutOfRange { target: t, classes: row.len() })
        })
        .sum()
}

/// Batch word-wise loss on the tape, summed over steps and samples.
pub fn word_wise_loss_tape(tape: &mut Tape, tf: &TeacherForced) -> Result<Var> {
    let terms = tf
        .logits
        .iter()
        .zip(&tf.targets)
        .map(|(&z, t)| tape.softmax_xent(z, t))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// Fixed-size sentence vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSentence {
    pub vector: Vec<f64>,
    /// Set for empty input; the cosine guard then applies.
    pub degenerate: bool,
}

/// Maps a token sequence, or mean soft probability rows, to a vector.
pub trait SentenceEmbedder {
    fn dim(&self) -> usize;

    fn embed_tokens(&self, tokens: &[usize]) -> Result<EmbeddedSentence>;

    /// `n × dim` embeddings of hard token sequences.
    fn embed_hard(&self, tape: &mut Tape, sentences: &[&[usize]]) -> Result<Var>;

    /// `n × dim` embeddings from `n × V` mean probability rows.
    fn embed_soft(&self, tape: &mut Tape, mean_rows: Var) -> Result<Var>;
}

/// Mean of word-embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanWordEmbedder {
    pub table: Tensor,
}

impl MeanWordEmbedder {
    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    /// `n × V` bag-of-words rows normalized by sentence length.
    pub fn bag_of_words(vocab: usize, sentences: &[&[usize]]) -> Result<Tensor> {
        let mut m = vec![0.0; sentences.len() * vocab];
        for (r, s) in sentences.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&t| t >= vocab) {
                return Err(Error::OutOfVocabulary { id: bad, vocab });
            }
            let w = 1.0 / s.len().max(1) as f64;
            for &t in s.iter() {
                m[r * vocab + t] += w;
            }
        }
        Tensor::from_vec(sentences.len(), vocab, m)
    }

    fn embed_with(&self, tape: &mut Tape, table: Var, sentences: &[&[usize]]) -> Result<Var> {
        let bow = Self::bag_of_words(self.vocab_size(), sentences)?;
        let bow = tape.constant_owned(bow);
        tape.matmul(bow, table)
    }
}

impl SentenceEmbedder for MeanWordEmbedder {
    fn dim(&self) -> usize {
        self.table.cols()
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<EmbeddedSentence> {
        let d = self.dim();
        let mut v = vec![0.0; d];
        for &t in tokens {
            if t >= self.vocab_size() {
                return Err(Error::OutOfVocabulary { id: t, vocab: self.vocab_size() });
            }
            v.iter_mut().zip(self.table.row_slice(t)).for_each(|(a, b)| *a += b);
        }
        if !tokens.is_empty() {
            let k = tokens.len() as f64;
            v.iter_mut().for_each(|a| *a /= k);
        }
        Ok(EmbeddedSentence { vector: v, degenerate: tokens.is_empty() })
    }

    fn embed_hard(&self, tape: &mut Tape, sentences: &[&[usize]]) -> Result<Var> {
        let table = tape.constant(&self.table);
        self.embed_with(tape, table, sentences)
    }

    fn embed_soft(&self, tape: &mut Tape, mean_rows: Var) -> Result<Var> {
        let table = tape.constant(&self.table);
        tape.matmul(mean_rows, table)
    }
}

/// `−Σ_n cos(Π(E_n), Π(Ê_n))` given the generated embeddings.
pub fn sentence_semantic_loss(
    tape: &mut Tape,
    generated: Var,
    references: &[&[usize]],
    embedder: &dyn SentenceEmbedder,
) -> Result<Var> {
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Data("sentence semantic loss needs non-empty references".into()));
    }
    let target = embedder.embed_hard(tape, references)?;
    let cos = tape.cosine_rows(target, generated)?;
    let s = tape.sum(cos);
    Ok(tape.scale(s, -1.0))
}

/// Mean-word-embedding classifier over the nine attack types;
/// `affine(128 → 9)` on the pooled embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceClassifier {
    pub embedder: MeanWordEmbedder,
    pub w: Tensor,
    pub b: Tensor,
}

impl Parameters for SentenceClassifier {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("table", &self.embedder.table), ("w", &self.w), ("b", &self.b)]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("table", &mut self.embedder.table),
            ("w", &mut self.w),
            ("b", &mut self.b),
        ]
    }
}

impl SentenceClassifier {
    pub fn init(vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embedder: MeanWordEmbedder {
                table: Tensor::uniform(vocab, WORD_DIM, INIT_BOUND, rng),
            },
            w: Tensor::uniform(WORD_DIM, NUM_PA_CATEGORIES, INIT_BOUND, rng),
            b: Tensor::zeros(1, NUM_PA_CATEGORIES),
        }
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            embedder: MeanWordEmbedder {
                table: Tensor::zeros(vocab, WORD_DIM),
            },
            w: Tensor::zeros(WORD_DIM, NUM_PA_CATEGORIES),
            b: Tensor::zeros(1, NUM_PA_CATEGORIES),
        }
    }

    /// Logits for `n × dim` sentence embeddings; weights enter as constants.
    pub fn logits_frozen(&self, tape: &mut Tape, embedded: Var) -> Result<Var> {
        let w = tape.constant(&self.w);
        let b = tape.constant(&self.b);
        tape.affine(embedded, w, b)
    }

    /// Attack-type probabilities for one hard sentence.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = self.embedder.embed_hard(&mut tape, &[tokens])?;
        let z = self.logits_frozen(&mut tape, e)?;
        let mut p = tape.value(z).values().to_vec();
        crate::tensor::softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn accuracy(&self, data: &[(Vec<usize>, usize)]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (tokens, label) in data {
            if argmax(&self.predict(tokens)?) == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    fn loss_value(&self, data: &[(Vec<usize>, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (tokens, label) in data {
            total -= self.predict(tokens)?[*label].ln();
        }
        Ok(total)
    }
}

/// `Σ_n −log P_r(Y_n | Ê_n)` through the frozen classifier.
pub fn sentence_discriminative_loss(
    tape: &mut Tape,
    generated: Var,
    categories: &[PadCategory],
    classifier: &SentenceClassifier,
) -> Result<Var> {
    let targets = categories
        .iter()
        .map(|c| {
            c.attack_index()
                .map(Some)
                .ok_or_else(|| Error::Data("sentence discriminative loss is undefined for bona-fide".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let z = classifier.logits_frozen(tape, generated)?;
    tape.softmax_xent(z, &targets)
}

/// Settings for the off-line classifier fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 32,
            max_epochs: 150,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub classifier: SentenceClassifier,
    pub validation_accuracy: f64,
    pub epochs: usize,
}

/// Cross-entropy fit over `(tokens, attack index)` pairs with early
/// stopping on validation accuracy (ties broken by lower validation loss).
pub fn train_sentence_classifier(
    vocab: usize,
    train: &[(Vec<usize>, usize)],
    validation: &[(Vec<usize>, usize)],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierOutcome> {
    let mut seen = [false; NUM_PA_CATEGORIES];
    for (_, l) in train {
        if *l >= NUM_PA_CATEGORIES {
            return Err(Error::TargetOutOfRange { target: *l, classes: NUM_PA_CATEGORIES });
        }
        seen[*l] = true;
    }
    let missing: Vec<String> = seen
        .iter()
        .enumerate()
        .filter(|(_, &s)| !s)
        .map(|(i, _)| PadCategory::new(i + 1).expect("attack index").name().to_owned())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCategories(missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = SentenceClassifier::init(vocab, &mut rng);
    let mut adam = AdamState::new(&clf);
    // Without a validation split, judge on the training data.
    let val = if validation.is_empty() { train } else { validation };
    let mut best = (clf.clone(), f64::NEG_INFINITY, f64::INFINITY);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = 0;
    for _ in 0..config.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars = register(&clf, &mut tape, true);
            let sentences: Vec<&[usize]> = chunk.iter().map(|&i| train[i].0.as_slice()).collect();
            let bow = tape.constant_owned(MeanWordEmbedder::bag_of_words(vocab, &sentences)?);
            let emb = tape.matmul(bow, vars[0])?;
            let z = tape.affine(emb, vars[1], vars[2])?;
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train[i].1)).collect();
            let loss = tape.softmax_xent(z, &targets)?;
            tape.backward(loss)?;
            accumulate(&mut clf, &tape, &vars);
            adam.step(&mut clf, config.learning_rate)?;
            clf.zero_grads();
        }
        let acc = clf.accuracy(val)?;
        let loss = clf.loss_value(val)?;
        if acc > best.1 || (acc == best.1 && loss < best.2) {
            best = (clf.clone(), acc, loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(ClassifierOutcome {
        classifier: best.0,
        validation_accuracy: best.1,
        epochs,
    })
}

/// JSON synonym table: word → synonyms. Lookups are symmetric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable(pub BTreeMap<String, Vec<String>>);

impl SynonymTable {
    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        let has = |x: &str, y: &str| self.0.get(x).is_some_and(|v| v.iter().any(|s| s == y));
        a != b && (has(a, b) || has(b, a))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    /// Synonyms covering the synthetic description vocabulary.
    pub fn fixture() -> Self {
        let pairs: [(&str, &[&str]); 10] = [
            ("presented", &["shown", "displayed"]),
            ("covers", &["hides", "conceals"]),
            ("photo", &["picture", "print"]),
            ("wears", &["wearing", "has"]),
            ("face", &["head"]),
            ("person", &["subject", "someone"]),
            ("fake", &["artificial"]),
            ("makeup", &["cosmetics"]),
            ("gray", &["grey"]),
            ("bona", &["genuine", "real"]),
        ];
        Self(
            pairs
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }
}
