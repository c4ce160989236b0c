//! Staged training: PAD head, then the sentence classifier and embedder,
//! then the generator with PAD and classifier frozen. Three-fold driver
//! and run-directory output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Module};
use crate::corpus::{
    select, split_folds, tokenize, vocabulary_for, Fold, FoldPlan, PadCategory, Sample, Vocabulary,
};
use crate::error::{Error, Result};
use crate::lg::{soft_rollout_tape, teacher_forced_tape, GraphMode, LgParams, DEFAULT_T_MAX};
use crate::losses::{
    sentence_discriminative_loss, sentence_semantic_loss, total_lg_loss, train_sentence_classifier, word_wise_loss_tape,
    ClassifierConfig, LossComponents, LossWeights, SentenceClassifier, SentenceEmbedder, SynonymTable,
};
use crate::metrics::{aggregate, audit_jsonl, bleu, score_all, MetricsReport, PadScores, SampleScores};
use crate::optim::{clip_grad_norm, lr_at_with, AdamState};
use crate::pad::{eer, roc_auc, PadOutput, PadParams};
use crate::par::*;
use crate::params::{accumulate, Parameters};
use crate::tensor::{Tape, Tensor};

pub use crate::optim::lr_at;

/// Every training knob, as a flat key-value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: GraphMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pad_learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    pub t_max: usize,
    pub min_count: usize,
    pub pad_epochs: usize,
    pub pad_patience: usize,
    pub lg_epochs: usize,
    pub lg_patience: usize,
    pub clf_learning_rate: f64,
    pub clf_epochs: usize,
    pub clf_patience: usize,
    pub pad_weight: f64,
    pub lg_weight: f64,
    pub lambda_ww: f64,
    pub lambda_disc: f64,
    pub lambda_ss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = ClassifierConfig::default();
        Self {
            seed: 1,
            mode: GraphMode::C,
            batch_size: 32,
            learning_rate: 2e-4,
            pad_learning_rate: 2e-3,
            lr_decay: 0.5,
            lr_decay_every: 20,
            dropout: 0.5,
            clip_norm: 5.0,
            t_max: DEFAULT_T_MAX,
            min_count: 1,
            pad_epochs: 120,
            pad_patience: 20,
            lg_epochs: 120,
            lg_patience: 20,
            clf_learning_rate: c.learning_rate,
            clf_epochs: c.max_epochs,
            clf_patience: c.patience,
            pad_weight: w.pad,
            lg_weight: w.lg,
            lambda_ww: w.word_wise,
            lambda_disc: w.discriminative,
            lambda_ss: w.semantic,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a laptop CPU: a faster generator learning rate
    /// and a shorter generator schedule.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: 2e-3,
            lg_epochs: 40,
            lg_patience: 10,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            pad: self.pad_weight,
            lg: self.lg_weight,
            word_wise: self.lambda_ww,
            discriminative: self.lambda_disc,
            semantic: self.lambda_ss,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            learning_rate: self.clf_learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.clf_epochs,
            patience: self.clf_patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("pad_learning_rate", self.pad_learning_rate),
            ("clf_learning_rate", self.clf_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.t_max == 0 || self.min_count == 0 {
            return Err(Error::Config("t_max and min_count must be at least 1".into()));
        }
        self.weights().validate()
    }

    /// Parses JSON, or TOML when the path ends in `.toml`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Independent stream per (fold, stage).
pub fn derive_seed(seed: u64, fold: usize, stage: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((fold as u64).to_le_bytes());
    h.update(stage.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

const STAGE_PAD: u64 = 1;
const STAGE_CLF: u64 = 2;
const STAGE_LG: u64 = 3;

fn missing_categories(samples: &[&Sample]) -> Vec<String> {
    let present: BTreeSet<PadCategory> = samples.iter().map(|s| s.category).collect();
    PadCategory::all()
        .filter(|c| !present.contains(c))
        .map(|c| c.name().to_owned())
        .collect()
}

fn pad_scores(outputs: &[PadOutput], samples: &[&Sample]) -> Option<PadScores> {
    let (mut bona, mut pa) = (Vec::new(), Vec::new());
    for (o, s) in outputs.iter().zip(samples) {
        if s.category.is_attack() {
            pa.push(o.prediction.pa_score);
        } else {
            bona.push(o.prediction.pa_score);
        }
    }
    Some(PadScores {
        auc: roc_auc(&bona, &pa).ok()?,
        eer: eer(&bona, &pa).ok()?,
    })
}

#[derive(Clone, Debug)]
pub struct PadStageOutcome {
    pub params: PadParams,
    pub validation_auc: f64,
    pub validation_loss: f64,
    pub epochs: usize,
    /// Summed training loss per epoch.
    pub loss_curve: Vec<f64>,
}

fn pad_eval(params: &PadParams, samples: &[&Sample]) -> Result<(Vec<PadOutput>, f64)> {
    let feats: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let out = params.forward_batch(&feats)?;
    let loss = out
        .iter()
        .zip(samples)
        .map(|(o, s)| -o.prediction.probs[s.category.index()].ln())
        .sum();
    Ok((out, loss))
}

/// Minimizes the summed PAD cross-entropy; keeps the epoch with the best
/// validation AUC (lower validation loss breaks ties). The result is frozen.
pub fn train_pad_stage(train: &[&Sample], validation: &[&Sample], cfg: &TrainConfig, seed: u64) -> Result<PadStageOutcome> {
    cfg.validate()?;
    let missing = missing_categories(train);
    if !missing.is_empty() {
        return Err(Error::MissingCategories(missing));
    }
    let d = train[0].features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PadParams::init(d, &mut rng);
    let mut adam = AdamState::new(&params);
    let val = if validation.is_empty() { train } else { validation };
    let mut best: Option<(PadParams, f64, f64)> = None;
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.pad_epochs {
        order.shuffle(&mut rng);
        let lr = lr_at_with(epoch, cfg.pad_learning_rate, cfg.lr_decay, cfg.lr_decay_every);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x: Vec<f64> = chunk.iter().flat_map(|&i| train[i].features.iter().copied()).collect();
            let x = tape.constant_owned(Tensor::from_vec(chunk.len(), d, x)?);
            let (_, logits) = params.forward_tape(&mut tape, &vars, x, cfg.dropout, true, &mut rng)?;
            let targets: Vec<Option<usize>> = chunk.iter().map(|&i| Some(train[i].category.index())).collect();
            let loss = tape.softmax_xent(logits, &targets)?;
            epoch_loss += tape.value(loss).item();
            tape.backward(loss)?;
            accumulate(&mut params, &tape, &[vars.w1, vars.b1, vars.w2, vars.b2]);
            clip_grad_norm(&mut params, cfg.clip_norm);
            adam.step(&mut params, lr)?;
            params.zero_grads();
        }
        curve.push(epoch_loss);
        let (out, val_loss) = pad_eval(&params, val)?;
        let auc = pad_scores(&out, val).map_or(0.0, |p| p.auc);
        let improved = best
            .as_ref()
            .is_none_or(|(_, a, l)| auc > *a || (auc == *a && val_loss < *l));
        if improved {
            best = Some((params.clone(), auc, val_loss));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.pad_patience {
                break;
            }
        }
    }
    let (mut params, auc, loss) = best.ok_or_else(|| Error::Config("pad_epochs must be at least 1".into()))?;
    params.frozen = true;
    Ok(PadStageOutcome {
        params,
        validation_auc: auc,
        validation_loss: loss,
        epochs: curve.len(),
        loss_curve: curve,
    })
}

/// `(tokens, attack index)` pairs for every description of the attack
/// samples in `samples`.
pub fn classifier_data(samples: &[&Sample], vocab: &Vocabulary) -> Vec<(Vec<usize>, usize)> {
    samples
        .iter()
        .filter_map(|s| s.category.attack_index().map(|a| (s, a)))
        .flat_map(|(s, a)| s.description_tokens().into_iter().map(move |t| (vocab.encode(&t), a)))
        .filter(|(t, _)| !t.is_empty())
        .collect()
}

/// One generator training or evaluation example.
#[derive(Clone, Debug)]
pub struct LgExample {
    pub sample_id: String,
    pub category: PadCategory,
    pub cond: Vec<f64>,
    /// Encoded references, each ending in `<eos>`.
    pub targets: Vec<Vec<usize>>,
    /// Raw reference tokens for scoring.
    pub references: Vec<Vec<String>>,
}

/// Conditioning from the frozen PAD head for every attack sample.
pub fn lg_examples(samples: &[&Sample], pad: &PadParams, vocab: &Vocabulary, mode: GraphMode) -> Result<Vec<LgExample>> {
    let attacks: Vec<&Sample> = samples.iter().copied().filter(|s| s.category.is_attack()).collect();
    let feats: Vec<&[f64]> = attacks.iter().map(|s| s.features.as_slice()).collect();
    let outputs = pad.forward_batch(&feats)?;
    attacks
        .iter()
        .zip(outputs)
        .map(|(s, o)| {
            let cond = crate::lg::build_conditioning(&o.hidden, Some(&o.prediction), mode)?.vector;
            let references = s.description_tokens();
            if references.iter().all(Vec::is_empty) {
                return Err(Error::Data(format!("attack sample {} has no descriptions", s.sample_id)));
            }
            Ok(LgExample {
                sample_id: s.sample_id.clone(),
                category: s.category,
                cond,
                targets: references
                    .iter()
                    .filter(|r| !r.is_empty())
                    .map(|r| vocab.encode_target(r))
                    .collect(),
                references,
            })
        })
        .collect()
}

const DECODE_CHUNK: usize = 64;

/// Greedy sentences for every example, decoded in parallel chunks.
pub fn decode_examples(lg: &LgParams, examples: &[LgExample], vocab: &Vocabulary, t_max: usize) -> Result<Vec<Vec<String>>> {
    let chunks: Vec<Vec<Vec<String>>> = examples
        .par_chunks(DECODE_CHUNK)
        .map(|chunk| {
            let conds: Vec<&[f64]> = chunk.iter().map(|e| e.cond.as_slice()).collect();
            Ok(lg
                .greedy_decode_batch(&conds, t_max)?
                .into_iter()
                .map(|g| vocab.decode(&g.tokens))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean sentence BLEU-1 of greedy decodes.
pub fn mean_bleu1(lg: &LgParams, examples: &[LgExample], vocab: &Vocabulary, t_max: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hyps = decode_examples(lg, examples, vocab, t_max)?;
    let mut total = 0.0;
    for (h, e) in hyps.iter().zip(examples) {
        let h: Vec<&str> = h.iter().map(String::as_str).collect();
        let refs: Vec<Vec<&str>> = e.references.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let refs: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        total += bleu(&h, &refs, 1)?;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LgEpoch {
    pub losses: LossComponents,
    pub validation_bleu1: f64,
}

#[derive(Clone, Debug)]
pub struct LgStageOutcome {
    pub params: LgParams,
    pub validation_bleu1: f64,
    pub best_epoch: usize,
    pub history: Vec<LgEpoch>,
}

/// Everything the generator stage consumes.
pub struct LgStageInput<'a> {
    pub vocab: &'a Vocabulary,
    pub pad: &'a PadParams,
    pub classifier: &'a SentenceClassifier,
    pub train: &'a [LgExample],
    pub validation: &'a [LgExample],
}

/// Trains the generator on one `(sample, reference)` pair per annotation
/// and keeps the epoch with the best validation BLEU-1. Fails if the PAD
/// head or the classifier change.
pub fn train_lg_stage(input: &LgStageInput<'_>, cfg: &TrainConfig, seed: u64) -> Result<LgStageOutcome> {
    cfg.validate()?;
    if !input.pad.frozen {
        return Err(Error::FrozenViolation("PAD head must be frozen before generator training"));
    }
    let weights = cfg.weights();
    let pad_before = input.pad.fingerprint();
    let clf_before = input.classifier.fingerprint();
    let pairs: Vec<(usize, usize)> = input
        .train
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.targets.len()).map(move |r| (i, r)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data("no attack descriptions to train the generator on".into()));
    }
    let cond_dim = input.train[0].cond.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lg = LgParams::init(input.vocab.len(), cond_dim, &mut rng);
    let mut adam = AdamState::new(&lg);
    let validation = if input.validation.is_empty() { input.train } else { input.validation };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(LgParams, f64, usize)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.lg_epochs {
        order.shuffle(&mut rng);
        let lr = lr_at_with(epoch, cfg.learning_rate, cfg.lr_decay, cfg.lr_decay_every);
        let mut sums = LossComponents::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, usize)> = chunk.iter().map(|&k| pairs[k]).collect();
            let c = lg_batch_step(&mut lg, input, &batch, &weights, cfg, &mut rng)?;
            sums.word_wise += c.word_wise;
            sums.discriminative += c.discriminative;
            sums.semantic += c.semantic;
            clip_grad_norm(&mut lg, cfg.clip_norm);
            adam.step(&mut lg, lr)?;
            lg.zero_grads();
        }
        let score = mean_bleu1(&lg, validation, input.vocab, cfg.t_max)?;
        history.push(LgEpoch {
            losses: sums,
            validation_bleu1: score,
        });
        if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((lg.clone(), score, epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.lg_patience {
                break;
            }
        }
    }
    if input.pad.fingerprint() != pad_before {
        return Err(Error::FrozenViolation("PAD parameters changed during generator training"));
    }
    if input.classifier.fingerprint() != clf_before || !input.classifier.grads_all_zero() {
        return Err(Error::FrozenViolation("sentence classifier changed during generator training"));
    }
    let (params, score, best_epoch) = best.ok_or_else(|| Error::Config("lg_epochs must be at least 1".into()))?;
    Ok(LgStageOutcome {
        params,
        validation_bleu1: score,
        best_epoch,
        history,
    })
}

/// Forward and backward for one batch of `(example, reference)` pairs;
/// gradients are accumulated into `lg`.
pub fn lg_batch_step(
    lg: &mut LgParams,
    input: &LgStageInput<'_>,
    batch: &[(usize, usize)],
    weights: &LossWeights,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let vars = lg.register(&mut tape, true);
    let d = lg.cond_dim();
    let conds: Vec<f64> = batch.iter().flat_map(|&(i, _)| input.train[i].cond.iter().copied()).collect();
    let cond = tape.constant_owned(Tensor::from_vec(batch.len(), d, conds)?);
    let refs: Vec<&[usize]> = batch.iter().map(|&(i, r)| input.train[i].targets[r].as_slice()).collect();
    let tf = teacher_forced_tape(&mut tape, &vars, cond, &refs, cfg.dropout, true, rng)?;
    let ww = word_wise_loss_tape(&mut tape, &tf)?;
    let mut out = LossComponents {
        word_wise: tape.value(ww).item(),
        ..LossComponents::default()
    };
    let (mut disc, mut ss) = (None, None);
    if weights.uses_soft_rollout() {
        // One rollout per distinct sample, shared by its references.
        let mut unique: Vec<usize> = batch.iter().map(|&(i, _)| i).collect();
        unique.sort_unstable();
        unique.dedup();
        let row_of: Vec<usize> = batch
            .iter()
            .map(|&(i, _)| unique.binary_search(&i).expect("present"))
            .collect();
        let uconds: Vec<f64> = unique.iter().flat_map(|&i| input.train[i].cond.iter().copied()).collect();
        let ucond = tape.constant_owned(Tensor::from_vec(unique.len(), d, uconds)?);
        let roll = soft_rollout_tape(&mut tape, &vars, ucond, cfg.t_max)?;
        let mean = roll.mean_rows(&mut tape)?;
        let per_pair = tape.embedding(mean, &row_of)?;
        let generated = input.classifier.embedder.embed_soft(&mut tape, per_pair)?;
        if weights.semantic > 0.0 {
            let words: Vec<&[usize]> = refs.iter().map(|r| &r[..r.len() - 1]).collect();
            let l = sentence_semantic_loss(&mut tape, generated, &words, &input.classifier.embedder)?;
            out.semantic = tape.value(l).item();
            ss = Some(l);
        }
        if weights.discriminative > 0.0 {
            let cats: Vec<PadCategory> = batch.iter().map(|&(i, _)| input.train[i].category).collect();
            let l = sentence_discriminative_loss(&mut tape, generated, &cats, input.classifier)?;
            out.discriminative = tape.value(l).item();
            disc = Some(l);
        }
    }
    let total = total_lg_loss(&mut tape, weights, Some(ww), disc, ss)?;
    tape.backward(total)?;
    accumulate(lg, &tape, &vars.all());
    Ok(out)
}

/// Fold-local artifacts that do not depend on the generator settings.
#[derive(Clone, Debug)]
pub struct PreparedFold {
    pub index: usize,
    pub fold: Fold,
    pub vocab: Vocabulary,
    pub pad: PadStageOutcome,
    pub classifier: SentenceClassifier,
    pub classifier_accuracy: f64,
    pub seconds: BTreeMap<String, f64>,
}

/// Vocabulary, PAD stage and sentence classifier of one fold.
pub fn prepare_fold(samples: &[Sample], fold: &Fold, index: usize, cfg: &TrainConfig) -> Result<PreparedFold> {
    let train = select(samples, &fold.train);
    let val = select(samples, &fold.validation);
    let vocab = vocabulary_for(&train, cfg.min_count)?;
    let mut seconds = BTreeMap::new();
    let t = Instant::now();
    let pad = train_pad_stage(&train, &val, cfg, derive_seed(cfg.seed, index, STAGE_PAD))?;
    seconds.insert("pad".to_owned(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let clf = train_sentence_classifier(
        vocab.len(),
        &classifier_data(&train, &vocab),
        &classifier_data(&val, &vocab),
        &cfg.classifier(),
        derive_seed(cfg.seed, index, STAGE_CLF),
    )?;
    seconds.insert("classifier".to_owned(), t.elapsed().as_secs_f64());
    Ok(PreparedFold {
        index,
        fold: fold.clone(),
        vocab,
        pad,
        classifier: clf.classifier,
        classifier_accuracy: clf.validation_accuracy,
        seconds,
    })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub prepared: PreparedFold,
    pub mode: GraphMode,
    pub lg: LgStageOutcome,
    pub report: MetricsReport,
    pub scores: Vec<SampleScores>,
}

/// PAD and text metrics of a trained fold on `test`.
pub fn evaluate(
    pad: &PadParams,
    lg: &LgParams,
    vocab: &Vocabulary,
    test: &[&Sample],
    mode: GraphMode,
    t_max: usize,
    synonyms: &SynonymTable,
) -> Result<(MetricsReport, Vec<SampleScores>)> {
    let feats: Vec<&[f64]> = test.iter().map(|s| s.features.as_slice()).collect();
    let outputs = pad.forward_batch(&feats)?;
    let pad_part: Vec<PadScores> = pad_scores(&outputs, test).into_iter().collect();
    let examples = lg_examples(test, pad, vocab, mode)?;
    let hyps = decode_examples(lg, &examples, vocab, t_max)?;
    let items: Vec<_> = examples
        .iter()
        .zip(hyps)
        .map(|(e, h)| (e.sample_id.clone(), e.category, h, e.references.clone()))
        .collect();
    let scores = score_all(&items, synonyms)?;
    Ok((aggregate(&scores, pad_part)?, scores))
}

/// Generator stage and test evaluation on a prepared fold.
pub fn finish_fold(samples: &[Sample], prepared: &PreparedFold, cfg: &TrainConfig) -> Result<FoldResult> {
    let train = select(samples, &prepared.fold.train);
    let val = select(samples, &prepared.fold.validation);
    let test = select(samples, &prepared.fold.test);
    let pad = &prepared.pad.params;
    let train_ex = lg_examples(&train, pad, &prepared.vocab, cfg.mode)?;
    let val_ex = lg_examples(&val, pad, &prepared.vocab, cfg.mode)?;
    let t = Instant::now();
    let lg = train_lg_stage(
        &LgStageInput {
            vocab: &prepared.vocab,
            pad,
            classifier: &prepared.classifier,
            train: &train_ex,
            validation: &val_ex,
        },
        cfg,
        derive_seed(cfg.seed, prepared.index, STAGE_LG),
    )?;
    let mut prepared = prepared.clone();
    prepared.seconds.insert("lg".to_owned(), t.elapsed().as_secs_f64());
    let (report, scores) = evaluate(pad, &lg.params, &prepared.vocab, &test, cfg.mode, cfg.t_max, &SynonymTable::fixture())?;
    Ok(FoldResult {
        prepared,
        mode: cfg.mode,
        lg,
        report,
        scores,
    })
}

pub fn run_fold(samples: &[Sample], fold: &Fold, index: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    finish_fold(samples, &prepare_fold(samples, fold, index, cfg)?, cfg)
}

#[derive(Clone, Debug)]
pub struct ThreefoldResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub summary: MetricsReport,
}

/// All three folds, in parallel, then the macro-averaged summary.
pub fn run_threefold(samples: &[Sample], cfg: &TrainConfig) -> Result<ThreefoldResult> {
    cfg.validate()?;
    let plan = split_folds(samples, cfg.seed)?;
    let folds: Vec<FoldResult> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, f)| run_fold(samples, f, k, cfg))
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    Ok(ThreefoldResult {
        plan,
        summary: MetricsReport::macro_average(&reports)?,
        folds,
    })
}

/// Top-level record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub status: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub mode: GraphMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock seconds per fold and stage.
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, corpus_hash: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            status: "incomplete".to_owned(),
            config_hash: cfg.hash(),
            corpus_hash: corpus_hash.to_owned(),
            seed: cfg.seed,
            mode: cfg.mode,
            error: None,
            stage_seconds: BTreeMap::new(),
        }
    }

    /// Write-then-rename so readers never see a partial file.
    pub fn write_atomic(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run-manifest.json");
        let tmp = dir.join(".run-manifest.json.tmp");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold-{fold}")).join("checkpoints")
}

/// Checkpoints of one fold: PAD, generator, classifier, vocabulary and split.
pub fn save_fold_checkpoints(dir: &Path, fold: &FoldResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &fold.prepared;
    let vh = p.vocab.hash();
    Checkpoint::capture(Module::Pad, None, &p.pad.params)
        .with_meta("feature_dim", p.pad.params.feature_dim())
        .save(&dir.join("pad.json"))?;
    Checkpoint::capture(Module::Lg, Some(vh.clone()), &fold.lg.params)
        .with_meta("mode", fold.mode)
        .save(&dir.join("lg.json"))?;
    Checkpoint::capture(Module::Disc, Some(vh), &p.classifier).save(&dir.join("classifier.json"))?;
    write(&dir.join("vocab.json"), &serde_json::to_string_pretty(p.vocab.tokens())?)?;
    write(&dir.join("split.json"), &serde_json::to_string_pretty(&p.fold)?)
}

/// Writes per-fold reports and checkpoints plus the summary files. The
/// manifest is written separately by the caller.
pub fn write_run(dir: &Path, result: &ThreefoldResult) -> Result<()> {
    for (k, f) in result.folds.iter().enumerate() {
        let fd = dir.join(format!("fold-{k}"));
        save_fold_checkpoints(&checkpoint_dir(dir, k), f)?;
        write(&fd.join("report.csv"), &f.report.to_csv())?;
        write(&fd.join("report.txt"), &f.report.to_text())?;
        write(&fd.join("pad.csv"), &f.report.pad_csv())?;
        write(&fd.join("samples.jsonl"), &audit_jsonl(&f.scores))?;
    }
    write(&dir.join("folds.json"), &serde_json::to_string_pretty(&result.plan)?)?;
    write(&dir.join("summary.csv"), &result.summary.to_csv())?;
    write(&dir.join("summary-pad.csv"), &result.summary.pad_csv())?;
    write(&dir.join("summary.txt"), &result.summary.to_text())
}

/// Trained models loaded from a checkpoint directory.
pub struct LoadedModels {
    pub pad: PadParams,
    pub lg: LgParams,
    pub classifier: SentenceClassifier,
    pub vocab: Vocabulary,
    pub mode: GraphMode,
    pub split: Option<Fold>,
}

pub fn load_checkpoints(dir: &Path) -> Result<LoadedModels> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let tokens: Vec<String> = serde_json::from_str(&read("vocab.json")?)?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let vh = vocab.hash();

    let c = Checkpoint::load(&dir.join("pad.json"))?;
    c.expect_module(Module::Pad)?;
    let mut pad = PadParams::zeros(c.shape_of("w1")?.0);
    c.restore(&mut pad)?;
    pad.frozen = true;

    let c = Checkpoint::load(&dir.join("lg.json"))?;
    c.expect_module(Module::Lg)?;
    c.expect_vocab(&vh)?;
    let mode: GraphMode = c
        .meta
        .get("mode")
        .ok_or_else(|| Error::Checkpoint("generator checkpoint has no mode".into()))?
        .parse()?;
    let mut lg = LgParams::zeros(c.shape_of("word_embed")?.0, c.shape_of("cond_w")?.0);
    c.restore(&mut lg)?;
    if lg.cond_dim() != mode.cond_dim(crate::pad::PAD_HIDDEN) {
        return Err(Error::Checkpoint(format!(
            "generator expects {}-dim conditioning, mode {mode} gives {}",
            lg.cond_dim(),
            mode.cond_dim(crate::pad::PAD_HIDDEN)
        )));
    }

    let c = Checkpoint::load(&dir.join("classifier.json"))?;
    c.expect_module(Module::Disc)?;
    c.expect_vocab(&vh)?;
    let mut classifier = SentenceClassifier::uniform(vocab.len());
    c.restore(&mut classifier)?;

    let split_path = dir.join("split.json");
    let split = if split_path.exists() {
        Some(serde_json::from_str(&read("split.json")?)?)
    } else {
        None
    };
    Ok(LoadedModels {
        pad,
        lg,
        classifier,
        vocab,
        mode,
        split,
    })
}

/// Generated description for one feature vector; `None` for bona-fide.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub category: PadCategory,
    pub pa_score: f64,
    pub sentence: Option<String>,
}

impl LoadedModels {
    pub fn explain(&self, features: &[f64], t_max: usize) -> Result<Explanation> {
        let out = self.pad.forward(features)?;
        let category = PadCategory::new(out.prediction.predicted())?;
        let sentence = if category.is_attack() {
            let cond = crate::lg::build_conditioning(&out.hidden, Some(&out.prediction), self.mode)?;
            let g = self.lg.greedy_decode(&cond.vector, t_max)?;
            Some(self.vocab.decode(&g.tokens).join(" "))
        } else {
            None
        };
        Ok(Explanation {
            category,
            pa_score: out.prediction.pa_score,
            sentence,
        })
    }

    /// Classifier-table embedding of every attack description.
    pub fn description_embeddings(&self, samples: &[Sample]) -> Result<Vec<(String, PadCategory, Vec<f64>)>> {
        let mut rows = Vec::new();
        for s in samples.iter().filter(|s| s.category.is_attack()) {
            for d in &s.descriptions {
                let ids = self.vocab.encode(&tokenize(d));
                let e = self.classifier.embedder.embed_tokens(&ids)?;
                rows.push((s.sample_id.clone(), s.category, e.vector));
            }
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NUM_CATEGORIES;

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.learning_rate, 2e-4);
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c.clone() }.validate().is_err());
        assert_eq!(c.hash(), TrainConfig::default().hash());
        assert_ne!(c.hash(), TrainConfig { seed: 2, ..c.clone() }.hash());
    }

    #[test]
    fn config_files_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"batch_size": 8, "mode": "A"}"#).unwrap();
        let c = TrainConfig::from_file(&j).unwrap();
        assert_eq!((c.batch_size, c.mode), (8, GraphMode::A));
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "lambda_disc = 0.0\nlg_epochs = 3\n").unwrap();
        let c = TrainConfig::from_file(&t).unwrap();
        assert_eq!((c.lambda_disc, c.lg_epochs), (0.0, 3));
        std::fs::write(&j, r#"{"bogus": 1}"#).unwrap();
        assert!(TrainConfig::from_file(&j).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: BTreeSet<u64> = (0..3).flat_map(|f| (1..=3).map(move |st| derive_seed(7, f, st))).collect();
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn pad_stage_requires_every_category() {
        let s = Sample {
            sample_id: "a".into(),
            subject_id: "x".into(),
            category: PadCategory::BONA_FIDE,
            features: vec![0.0; 4],
            descriptions: vec![],
        };
        let err = train_pad_stage(&[&s], &[], &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::MissingCategories(ref m) if m.len() == NUM_CATEGORIES - 1));
    }
}
