//! Explanation generator: a two-layer LSTM whose initial states are
//! projected from the conditioning vector, with teacher-forced,
//! greedy and soft (expected-embedding) rollouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::pad::{PadPrediction, INIT_BOUND};
use crate::params::{register, Parameters};
use crate::tensor::{LstmVars, Tape, Tensor, Var};

pub const WORD_DIM: usize = 128;
pub const LG_HIDDEN: usize = 100;
pub const DEFAULT_T_MAX: usize = 30;
const FORGET_BIAS: f64 = 1.0;

/// Which graphical model wires the PAD output into the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphMode {
    /// Explanation conditioned on the features only.
    A,
    /// Explanation conditioned on the features and the PAD probabilities.
    C,
}

impl GraphMode {
    pub fn cond_dim(self, feature_dim: usize) -> usize {
        match self {
            GraphMode::A => feature_dim,
            GraphMode::C => feature_dim + NUM_CATEGORIES,
        }
    }
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(GraphMode::A),
            "C" | "c" => Ok(GraphMode::C),
            other => Err(Error::Config(format!("unknown graphical mode {other:?} (expected A or C)"))),
        }
    }
}

impl std::fmt::Display for GraphMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraphMode::A => "A",
            GraphMode::C => "C",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInput {
    pub mode: GraphMode,
    pub vector: Vec<f64>,
}

/// Mode A passes the features through; mode C appends the full PAD
/// softmax vector.
pub fn build_conditioning(
    features: &[f64],
    prediction: Option<&PadPrediction>,
    mode: GraphMode,
) -> Result<ConditioningInput> {
    let vector = match mode {
        GraphMode::A => features.to_vec(),
        GraphMode::C => {
            let p = prediction.ok_or_else(|| {
                Error::Config("mode C conditioning requires a PAD prediction".into())
            })?;
            if p.probs.len() != NUM_CATEGORIES {
                return Err(Error::Shape(format!(
                    "PAD prediction has {} classes, expected {NUM_CATEGORIES}",
                    p.probs.len()
                )));
            }
            let mut v = features.to_vec();
            v.extend_from_slice(&p.probs);
            v
        }
    };
    Ok(ConditioningInput { mode, vector })
}

/// Generator weights. Gate order within each `4h` block is `i, f, g, o`.
#[derive(Clone, Debug, PartialEq)]
pub struct LgParams {
    pub word_embed: Tensor,
    pub cond_w: Tensor,
    pub cond_b: Tensor,
    pub l1_wx: Tensor,
    pub l1_wh: Tensor,
    pub l1_b: Tensor,
    pub l2_wx: Tensor,
    pub l2_wh: Tensor,
    pub l2_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl Parameters for LgParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("word_embed", &self.word_embed),
            ("cond_w", &self.cond_w),
            ("cond_b", &self.cond_b),
            ("l1_wx", &self.l1_wx),
            ("l1_wh", &self.l1_wh),
            ("l1_b", &self.l1_b),
            ("l2_wx", &self.l2_wx),
            ("l2_wh", &self.l2_wh),
            ("l2_b", &self.l2_b),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("word_embed", &mut self.word_embed),
            ("cond_w", &mut self.cond_w),
            ("cond_b", &mut self.cond_b),
            ("l1_wx", &mut self.l1_wx),
            ("l1_wh", &mut self.l1_wh),
            ("l1_b", &mut self.l1_b),
            ("l2_wx", &mut self.l2_wx),
            ("l2_wh", &mut self.l2_wh),
            ("l2_b", &mut self.l2_b),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LgVars {
    pub word_embed: Var,
    pub cond_w: Var,
    pub cond_b: Var,
    pub l1: LstmVars,
    pub l2: LstmVars,
    pub out_w: Var,
    pub out_b: Var,
}

impl LgVars {
    /// In [`Parameters::named`] order.
    pub fn all(&self) -> [Var; 11] {
        [
            self.word_embed,
            self.cond_w,
            self.cond_b,
            self.l1.w_input,
            self.l1.w_hidden,
            self.l1.bias,
            self.l2.w_input,
            self.l2.w_hidden,
            self.l2.bias,
            self.out_w,
            self.out_b,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
struct State {
    h1: Var,
    c1: Var,
    h2: Var,
    c2: Var,
}

fn forget_bias() -> Tensor {
    let mut b = Tensor::zeros(1, 4 * LG_HIDDEN);
    b.values_mut()[LG_HIDDEN..2 * LG_HIDDEN].fill(FORGET_BIAS);
    b
}

impl LgParams {
    pub fn zeros(vocab: usize, cond_dim: usize) -> Self {
        Self {
            word_embed: Tensor::zeros(vocab, WORD_DIM),
            cond_w: Tensor::zeros(cond_dim, 4 * LG_HIDDEN),
            cond_b: Tensor::zeros(1, 4 * LG_HIDDEN),
            l1_wx: Tensor::zeros(WORD_DIM, 4 * LG_HIDDEN),
            l1_wh: Tensor::zeros(LG_HIDDEN, 4 * LG_HIDDEN),
            l1_b: Tensor::zeros(1, 4 * LG_HIDDEN),
            l2_wx: Tensor::zeros(LG_HIDDEN, 4 * LG_HIDDEN),
            l2_wh: Tensor::zeros(LG_HIDDEN, 4 * LG_HIDDEN),
            l2_b: Tensor::zeros(1, 4 * LG_HIDDEN),
            out_w: Tensor::zeros(LG_HIDDEN, vocab),
            out_b: Tensor::zeros(1, vocab),
        }
    }

    /// Uniform(−0.08, 0.08) weights, zero biases, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(vocab: usize, cond_dim: usize, rng: &mut R) -> Self {
        let u = |r: usize, c: usize, rng: &mut R| Tensor::uniform(r, c, INIT_BOUND, rng);
        Self {
            word_embed: u(vocab, WORD_DIM, rng),
            cond_w: u(cond_dim, 4 * LG_HIDDEN, rng),
            cond_b: Tensor::zeros(1, 4 * LG_HIDDEN),
            l1_wx: u(WORD_DIM, 4 * LG_HIDDEN, rng),
            l1_wh: u(LG_HIDDEN, 4 * LG_HIDDEN, rng),
            l1_b: forget_bias(),
            l2_wx: u(LG_HIDDEN, 4 * LG_HIDDEN, rng),
            l2_wh: u(LG_HIDDEN, 4 * LG_HIDDEN, rng),
            l2_b: forget_bias(),
            out_w: u(LG_HIDDEN, vocab, rng),
            out_b: Tensor::zeros(1, vocab),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.word_embed.rows()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_w.rows()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> LgVars {
        let v = register(self, tape, trainable);
        LgVars {
            word_embed: v[0],
            cond_w: v[1],
            cond_b: v[2],
            l1: LstmVars {
                w_input: v[3],
                w_hidden: v[4],
                bias: v[5],
            },
            l2: LstmVars {
                w_input: v[6],
                w_hidden: v[7],
                bias: v[8],
            },
            out_w: v[9],
            out_b: v[10],
        }
    }

    fn conditioning_var(&self, tape: &mut Tape, conds: &[&[f64]]) -> Result<Var> {
        let d = self.cond_dim();
        if let Some(bad) = conds.iter().find(|c| c.len() != d) {
            return Err(Error::Shape(format!(
                "conditioning vector of length {}, generator expects {d}",
                bad.len()
            )));
        }
        Ok(tape.constant_owned(Tensor::from_vec(conds.len(), d, conds.concat())?))
    }
}

fn initial_state(tape: &mut Tape, v: &LgVars, cond: Var) -> Result<State> {
    let z = tape.affine(cond, v.cond_w, v.cond_b)?;
    let h = LG_HIDDEN;
    Ok(State {
        h1: tape.slice_cols(z, 0, h)?,
        c1: tape.slice_cols(z, h, 2 * h)?,
        h2: tape.slice_cols(z, 2 * h, 3 * h)?,
        c2: tape.slice_cols(z, 3 * h, 4 * h)?,
    })
}

fn step<R: Rng + ?Sized>(
    tape: &mut Tape,
    v: &LgVars,
    s: State,
    x: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(State, Var)> {
    let (h1, c1) = tape.lstm_cell(x, s.h1, s.c1, &v.l1)?;
    let (h2, c2) = tape.lstm_cell(h1, s.h2, s.c2, &v.l2)?;
    let dropped = tape.dropout(h2, dropout, training, rng)?;
    let logits = tape.affine(dropped, v.out_w, v.out_b)?;
    Ok((State { h1, c1, h2, c2 }, logits))
}

/// Per-step logits of a teacher-forced batch and the matching targets
/// (`None` past the end of a shorter reference).
#[derive(Debug)]
pub struct TeacherForced {
    pub logits: Vec<Var>,
    pub targets: Vec<Vec<Option<usize>>>,
}

/// Teacher forcing on a batch: step `t` reads `<bos>` (t = 0) or
/// `reference[t − 1]` and predicts `reference[t]`.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &LgVars,
    cond: Var,
    references: &[&[usize]],
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<TeacherForced> {
    let vocab = tape.shape(vars.word_embed).0;
    let n = references.len();
    if tape.shape(cond).0 != n {
        return Err(Error::Shape(format!(
            "{} conditioning rows for {n} references",
            tape.shape(cond).0
        )));
    }
    if let Some(r) = references.iter().find(|r| r.is_empty()) {
        debug_assert!(r.is_empty());
        return Err(Error::Data("teacher forcing needs non-empty references".into()));
    }
    if let Some(&bad) = references.iter().flat_map(|r| r.iter()).find(|&&t| t >= vocab) {
        return Err(Error::OutOfVocabulary { id: bad, vocab });
    }
    let t_len = references.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut state = initial_state(tape, vars, cond)?;
    let mut logits = Vec::with_capacity(t_len);
    let mut targets = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ids: Vec<usize> = references
            .iter()
            .map(|r| match t {
                0 => Vocabulary::BOS,
                _ => r.get(t - 1).copied().unwrap_or(Vocabulary::PAD),
            })
            .collect();
        let x = tape.embedding(vars.word_embed, &ids)?;
        let (next, z) = step(tape, vars, state, x, dropout, training, rng)?;
        state = next;
        logits.push(z);
        targets.push(references.iter().map(|r| r.get(t).copied()).collect());
    }
    Ok(TeacherForced { logits, targets })
}

/// Soft rollout: each step feeds `Σ_v p_v · embed(v)` forward. A row is
/// kept while the masked arg-max of its own probabilities is not `<eos>`;
/// at least the first row is always kept.
#[derive(Debug)]
pub struct SoftRollout {
    /// Per-step `n × V` probability rows.
    pub rows: Vec<Var>,
    /// Per-step `n × 128` expected embeddings fed to the next step.
    pub expected: Vec<Var>,
    /// Kept rows per sample.
    pub lengths: Vec<usize>,
    /// Masked arg-max tokens of the kept rows.
    pub tokens: Vec<Vec<usize>>,
}

pub fn soft_rollout_tape(
    tape: &mut Tape,
    vars: &LgVars,
    cond: Var,
    t_max: usize,
) -> Result<SoftRollout> {
    let t_max = t_max.max(1);
    let n = tape.shape(cond).0;
    let mut state = initial_state(tape, vars, cond)?;
    let mut x = tape.embedding(vars.word_embed, &vec![Vocabulary::BOS; n])?;
    let mut active = vec![true; n];
    let mut lengths = vec![0usize; n];
    let mut tokens = vec![Vec::new(); n];
    let mut rows = Vec::new();
    let mut expected = Vec::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for t in 0..t_max {
        let (next, z) = step(tape, vars, state, x, 0.0, false, &mut rng)?;
        state = next;
        let p = decode_probs(tape, z)?;
        let pv = tape.value(p);
        let v = pv.cols();
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let tok = masked_argmax(pv.row_slice(i));
            if tok == Vocabulary::EOS {
                active[i] = false;
                if t == 0 {
                    lengths[i] = 1;
                }
            } else {
                lengths[i] = t + 1;
                tokens[i].push(tok);
            }
        }
        debug_assert_eq!(v, tape.shape(vars.word_embed).0);
        rows.push(p);
        if !active.iter().any(|&a| a) || t + 1 == t_max {
            break;
        }
        x = tape.matmul(p, vars.word_embed)?;
        expected.push(x);
    }
    Ok(SoftRollout {
        rows,
        expected,
        lengths,
        tokens,
    })
}

impl SoftRollout {
    /// `n × V` mean of each sample's kept probability rows.
    pub fn mean_rows(&self, tape: &mut Tape) -> Result<Var> {
        let n = self.lengths.len();
        let mut terms = Vec::new();
        for (t, &row) in self.rows.iter().enumerate() {
            let w: Vec<f64> = self
                .lengths
                .iter()
                .map(|&len| if t < len { 1.0 / len as f64 } else { 0.0 })
                .collect();
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            terms.push(tape.scale_rows(row, w)?);
        }
        if terms.is_empty() {
            return Err(Error::Shape(format!("empty soft rollout for {n} samples")));
        }
        tape.add_all(&terms)
    }
}

const MASKED_LOGIT: f64 = -1e30;

/// Decoding distribution: softmax with the reserved non-word tokens masked.
fn decode_probs(tape: &mut Tape, logits: Var) -> Result<Var> {
    let v = tape.shape(logits).1;
    let mut mask = vec![0.0; v];
    for r in [Vocabulary::PAD, Vocabulary::BOS, Vocabulary::UNK] {
        if r < v {
            mask[r] = MASKED_LOGIT;
        }
    }
    let mask = tape.constant_owned(Tensor::row(mask));
    let z = tape.add_row(logits, mask)?;
    Ok(tape.softmax_rows(z))
}

/// Arg-max over the vocabulary with `<pad>`, `<bos>` and `<unk>` masked out;
/// ties go to the lowest id.
pub fn masked_argmax(row: &[f64]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &p) in row.iter().enumerate() {
        if matches!(i, Vocabulary::PAD | Vocabulary::BOS | Vocabulary::UNK) {
            continue;
        }
        if best.is_none_or(|b| p > row[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(Vocabulary::EOS)
}

/// Greedy output: tokens without the terminating `<eos>`, plus the
/// probability row of every step taken.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSentence {
    pub tokens: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

/// Soft rollout values for a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSentence {
    pub rows: Vec<Vec<f64>>,
    pub expected_embeddings: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
}

impl LgParams {
    /// Per-step logits for one conditioning vector and reference.
    pub fn forward_teacher_forced<R: Rng + ?Sized>(
        &self,
        cond: &ConditioningInput,
        reference: &[usize],
        training: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let c = self.conditioning_var(&mut tape, &[&cond.vector])?;
        let tf = teacher_forced_tape(&mut tape, &vars, c, &[reference], dropout, training, rng)?;
        Ok(tf
            .logits
            .iter()
            .map(|&z| tape.value(z).values().to_vec())
            .collect())
    }

    pub fn greedy_decode(&self, cond: &[f64], t_max: usize) -> Result<GeneratedSentence> {
        Ok(self.greedy_decode_batch(&[cond], t_max)?.remove(0))
    }

    /// Greedy decoding of a batch, stepping all inputs together.
    pub fn greedy_decode_batch(&self, conds: &[&[f64]], t_max: usize) -> Result<Vec<GeneratedSentence>> {
        let t_max = t_max.max(1);
        let n = conds.len();
        let mut out = vec![
            GeneratedSentence {
                tokens: Vec::new(),
                rows: Vec::new(),
            };
            n
        ];
        if n == 0 {
            return Ok(out);
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let c = self.conditioning_var(&mut tape, conds)?;
        let mut state = initial_state(&mut tape, &vars, c)?;
        let mut ids = vec![Vocabulary::BOS; n];
        let mut active = vec![true; n];
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for _ in 0..t_max {
            let x = tape.embedding(vars.word_embed, &ids)?;
            let (next, z) = step(&mut tape, &vars, state, x, 0.0, false, &mut rng)?;
            state = next;
            let p = decode_probs(&mut tape, z)?;
            let pv = tape.value(p);
            for i in 0..n {
                if !active[i] {
                    continue;
                }
                let row = pv.row_slice(i);
                let tok = masked_argmax(row);
                out[i].rows.push(row.to_vec());
                if tok == Vocabulary::EOS {
                    active[i] = false;
                } else {
                    out[i].tokens.push(tok);
                    ids[i] = tok;
                }
            }
            if !active.iter().any(|&a| a) {
                break;
            }
        }
        Ok(out)
    }

    pub fn soft_decode(&self, cond: &[f64], t_max: usize) -> Result<SoftSentence> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let c = self.conditioning_var(&mut tape, &[cond])?;
        let roll = soft_rollout_tape(&mut tape, &vars, c, t_max)?;
        let len = roll.lengths[0];
        Ok(SoftSentence {
            rows: roll.rows[..len]
                .iter()
                .map(|&r| tape.value(r).values().to_vec())
                .collect(),
            expected_embeddings: roll
                .expected
                .iter()
                .map(|&e| tape.value(e).values().to_vec())
                .collect(),
            tokens: roll.tokens[0].clone(),
        })
    }
}
