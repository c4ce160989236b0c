//! PAD head: two fully connected layers over the feature vector, the
//! batch cross-entropy loss and the biometric ROC summaries.

use rand::Rng;

use crate::corpus::NUM_CATEGORIES;
use crate::error::{Error, Result};
use crate::params::{register, Parameters};
use crate::tensor::{softmax_in_place, Tape, Tensor, Var};

pub const PAD_HIDDEN: usize = 128;
pub const INIT_BOUND: f64 = 0.08;

/// `affine(d → 128) → ReLU → affine(128 → 10)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub frozen: bool,
}

impl Parameters for PadParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Softmax over the ten classes plus the scalar attack score.
#[derive(Clone, Debug, PartialEq)]
pub struct PadPrediction {
    pub probs: Vec<f64>,
    pub pa_score: f64,
}

impl PadPrediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        let pa_score = 1.0 - probs[0];
        Self { probs, pa_score }
    }

    /// Arg-max class, lowest index on ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Prediction plus the 128-dim hidden layer consumed by the LG module.
#[derive(Clone, Debug, PartialEq)]
pub struct PadOutput {
    pub prediction: PadPrediction,
    pub hidden: Vec<f64>,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl PadParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            w1: Tensor::zeros(feature_dim, PAD_HIDDEN),
            b1: Tensor::zeros(1, PAD_HIDDEN),
            w2: Tensor::zeros(PAD_HIDDEN, NUM_CATEGORIES),
            b2: Tensor::zeros(1, NUM_CATEGORIES),
            frozen: false,
        }
    }

    pub fn init<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::uniform(feature_dim, PAD_HIDDEN, INIT_BOUND, rng),
            b1: Tensor::zeros(1, PAD_HIDDEN),
            w2: Tensor::uniform(PAD_HIDDEN, NUM_CATEGORIES, INIT_BOUND, rng),
            b2: Tensor::zeros(1, NUM_CATEGORIES),
            frozen: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    /// Registers the weights; frozen heads are always constants.
    pub fn register(&self, tape: &mut Tape) -> PadVars {
        let v = register(self, tape, !self.frozen);
        PadVars {
            w1: v[0],
            b1: v[1],
            w2: v[2],
            b2: v[3],
        }
    }

    /// Batch forward: returns `(hidden, logits)` for a `n × d` input.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &PadVars,
        x: Var,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let (_, d) = tape.shape(x);
        if d != self.feature_dim() {
            return Err(Error::Shape(format!(
                "pad_forward: feature dimension {d}, model expects {}",
                self.feature_dim()
            )));
        }
        let z1 = tape.affine(x, vars.w1, vars.b1)?;
        let hidden = tape.relu(z1);
        let dropped = tape.dropout(hidden, dropout, training, rng)?;
        let logits = tape.affine(dropped, vars.w2, vars.b2)?;
        Ok((hidden, logits))
    }

    /// Inference on one feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<PadOutput> {
        Ok(self.forward_batch(&[features])?.remove(0))
    }

    /// Inference on a batch; order preserved.
    pub fn forward_batch(&self, features: &[&[f64]]) -> Result<Vec<PadOutput>> {
        let d = self.feature_dim();
        if let Some(bad) = features.iter().find(|f| f.len() != d) {
            return Err(Error::Shape(format!(
                "pad_forward: feature dimension {}, model expects {d}",
                bad.len()
            )));
        }
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let vars = PadVars {
            w1: tape.constant(&self.w1),
            b1: tape.constant(&self.b1),
            w2: tape.constant(&self.w2),
            b2: tape.constant(&self.b2),
        };
        let x = tape.constant_owned(Tensor::from_vec(features.len(), d, features.concat())?);
        let (hidden, logits) =
            self.forward_tape(&mut tape, &vars, x, 0.0, false, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        let (h, z) = (tape.value(hidden), tape.value(logits));
        Ok((0..features.len())
            .map(|r| PadOutput {
                prediction: PadPrediction::from_logits(z.row_slice(r)),
                hidden: h.row_slice(r).to_vec(),
            })
            .collect())
    }
}

/// `Σ_n −log probs_n[label_n]`, summed over the batch.
pub fn pad_loss(predictions: &[PadPrediction], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("pad_loss on an empty batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "pad_loss: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    predictions
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.probs
                .get(y)
                .map(|pr| -pr.ln())
                .ok_or(Error::TargetOutOfRange { target: y, classes: p.probs.len() })
        })
        .sum()
}

fn check_nonempty(bona: &[f64], pa: &[f64]) -> Result<()> {
    if bona.is_empty() || pa.is_empty() {
        return Err(Error::Data(format!(
            "ROC summary needs both classes (bona-fide {}, attack {})",
            bona.len(),
            pa.len()
        )));
    }
    Ok(())
}

/// Mann-Whitney AUC: fraction of (bona, attack) pairs where the attack
/// scores higher, ties counting one half. `O((n + m) log(n + m))`.
pub fn roc_auc(bona_scores: &[f64], pa_scores: &[f64]) -> Result<f64> {
    check_nonempty(bona_scores, pa_scores)?;
    let mut all: Vec<(f64, bool)> = bona_scores
        .iter()
        .map(|&s| (s, false))
        .chain(pa_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Average ranks over tie groups, then the rank-sum statistic.
    let mut rank_sum_pa = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pa += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (n_pa, n_bona) = (pa_scores.len() as f64, bona_scores.len() as f64);
    Ok((rank_sum_pa - n_pa * (n_pa + 1.0) / 2.0) / (n_pa * n_bona))
}

/// Equal error rate over thresholds at every distinct score, flagging an
/// attack when `score >= threshold`. Returns `(FAR + FRR) / 2` at the
/// threshold minimizing `|FAR − FRR|`, lowest threshold on ties.
pub fn eer(bona_scores: &[f64], pa_scores: &[f64]) -> Result<f64> {
    check_nonempty(bona_scores, pa_scores)?;
    let mut bona = bona_scores.to_vec();
    let mut pa = pa_scores.to_vec();
    bona.sort_by(f64::total_cmp);
    pa.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&pa).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (nb, np) = (bona.len() as f64, pa.len() as f64);
    let mut best: Option<(f64, f64)> = None;
    for t in thresholds {
        // attacks accepted as bona-fide, bona-fide rejected as attacks
        let far = pa.partition_point(|&s| s < t) as f64 / np;
        let frr = (bona.len() - bona.partition_point(|&s| s < t)) as f64 / nb;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, (far + frr) / 2.0));
        }
    }
    Ok(best.expect("non-empty thresholds").1)
}
