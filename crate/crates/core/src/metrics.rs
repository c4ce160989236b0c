//! Sentence-level BLEU, METEOR-lite and ROUGE-L against multiple
//! references, plus per-attack-type aggregation and report rendering.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{PadCategory, NUM_PA_CATEGORIES};
use crate::error::{Error, Result};
use crate::losses::SynonymTable;
use crate::par::*;

pub const METRIC_NAMES: [&str; 5] = ["BLEU1", "BLEU2", "BLEU3", "METEOR", "ROUGE"];
pub const ALL_PAS: &str = "All PAs";

fn check_refs<T>(refs: &[T]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::Data("at least one reference is required".into()));
    }
    Ok(())
}

fn ngram_counts<'a>(tokens: &'a [&'a str], k: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= k {
        for g in tokens.windows(k) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped k-gram matches and the hypothesis k-gram count.
pub fn clipped_matches(hyp: &[&str], refs: &[&[&str]], k: usize) -> (usize, usize) {
    let counts = ngram_counts(hyp, k);
    let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, k)).collect();
    let clipped = counts
        .iter()
        .map(|(g, &c)| {
            let max_ref = ref_counts.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            c.min(max_ref)
        })
        .sum();
    (clipped, hyp.len().saturating_sub(k - 1))
}

/// Sentence BLEU-n without smoothing.
pub fn bleu(hyp: &[&str], refs: &[&[&str]], n: usize) -> Result<f64> {
    check_refs(refs)?;
    if n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, total) = clipped_matches(hyp, refs, k);
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("non-empty references");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Alignment summary for one hypothesis/reference pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub exact: usize,
    pub matches: usize,
    pub chunks: usize,
}

/// METEOR-lite score from an alignment.
pub fn meteor_from_alignment(a: Alignment, hyp_len: usize, ref_len: usize) -> f64 {
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    f * (1.0 - penalty)
}

/// Best alignment: exact matches first, then synonym matches on the
/// remaining words, then fewest chunks. Each word is used at most once.
pub fn align(hyp: &[&str], reference: &[&str], synonyms: &SynonymTable) -> Alignment {
    // relation[i] = (compressed ref slot, ref position, is_exact)
    let mut slots: Vec<usize> = Vec::new();
    let mut relation: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new(); hyp.len()];
    for (i, h) in hyp.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            let exact = h == r;
            if exact || synonyms.are_synonyms(h, r) {
                let slot = match slots.iter().position(|&s| s == j) {
                    Some(s) => s,
                    None => {
                        slots.push(j);
                        slots.len() - 1
                    }
                };
                relation[i].push((slot, j, exact));
            }
        }
    }
    if slots.len() > 128 {
        return greedy_alignment(&relation);
    }
    let mut memo = HashMap::new();
    let best = search(0, 0, None, &relation, &mut memo);
    Alignment {
        exact: best.0 as usize,
        matches: best.1 as usize,
        chunks: (-best.2) as usize,
    }
}

type Score = (i32, i32, i32);

fn search(
    i: usize,
    used: u128,
    prev: Option<usize>,
    relation: &[Vec<(usize, usize, bool)>],
    memo: &mut HashMap<(usize, u128, Option<usize>), Score>,
) -> Score {
    if i == relation.len() {
        return (0, 0, 0);
    }
    if let Some(&s) = memo.get(&(i, used, prev)) {
        return s;
    }
    let mut best = search(i + 1, used, None, relation, memo);
    for &(slot, j, exact) in &relation[i] {
        if used & (1u128 << slot) != 0 {
            continue;
        }
        let rest = search(i + 1, used | (1u128 << slot), Some(j), relation, memo);
        let continues = j > 0 && prev == Some(j - 1);
        let cand = (
            rest.0 + exact as i32,
            rest.1 + 1,
            rest.2 - if continues { 0 } else { 1 },
        );
        best = best.max(cand);
    }
    memo.insert((i, used, prev), best);
    best
}

fn greedy_alignment(relation: &[Vec<(usize, usize, bool)>]) -> Alignment {
    let mut used = std::collections::HashSet::new();
    let mut pairs: Vec<(usize, usize, bool)> = Vec::new();
    for stage_exact in [true, false] {
        for (i, rel) in relation.iter().enumerate() {
            if pairs.iter().any(|p| p.0 == i) {
                continue;
            }
            if let Some(&(_, j, e)) = rel.iter().find(|r| r.2 == stage_exact && !used.contains(&r.1)) {
                used.insert(j);
                pairs.push((i, j, e));
            }
        }
    }
    pairs.sort_unstable();
    let chunks = pairs
        .iter()
        .enumerate()
        .filter(|(k, p)| *k == 0 || !(pairs[k - 1].0 + 1 == p.0 && pairs[k - 1].1 + 1 == p.1))
        .count();
    Alignment {
        exact: pairs.iter().filter(|p| p.2).count(),
        matches: pairs.len(),
        chunks,
    }
}

/// METEOR-lite, maximized over references.
pub fn meteor(hyp: &[&str], refs: &[&[&str]], synonyms: &SynonymTable) -> Result<f64> {
    check_refs(refs)?;
    if hyp.is_empty() {
        return Ok(0.0);
    }
    Ok(refs
        .iter()
        .map(|r| meteor_from_alignment(align(hyp, r, synonyms), hyp.len(), r.len()))
        .fold(0.0, f64::max))
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1, maximized over references.
pub fn rouge_l(hyp: &[&str], refs: &[&[&str]]) -> Result<f64> {
    check_refs(refs)?;
    Ok(refs
        .iter()
        .map(|r| {
            let l = lcs_len(hyp, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / hyp.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .fold(0.0, f64::max))
}

/// All five text scores of one generated sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub category: PadCategory,
    pub hypothesis: String,
    pub references: Vec<String>,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub meteor: f64,
    pub rouge: f64,
}

impl SampleScores {
    pub fn values(&self) -> [f64; 5] {
        [self.bleu1, self.bleu2, self.bleu3, self.meteor, self.rouge]
    }
}

pub fn score_sentence(
    sample_id: &str,
    category: PadCategory,
    hypothesis: &[&str],
    references: &[Vec<&str>],
    synonyms: &SynonymTable,
) -> Result<SampleScores> {
    let refs: Vec<&[&str]> = references.iter().map(|r| r.as_slice()).collect();
    Ok(SampleScores {
        sample_id: sample_id.to_owned(),
        category,
        hypothesis: hypothesis.join(" "),
        references: references.iter().map(|r| r.join(" ")).collect(),
        bleu1: bleu(hypothesis, &refs, 1)?,
        bleu2: bleu(hypothesis, &refs, 2)?,
        bleu3: bleu(hypothesis, &refs, 3)?,
        meteor: meteor(hypothesis, &refs, synonyms)?,
        rouge: rouge_l(hypothesis, &refs)?,
    })
}

/// `(sample id, category, hypothesis, references)`.
pub type ScoreItem = (String, PadCategory, Vec<String>, Vec<Vec<String>>);

/// Scores many sentences in parallel; input order is kept.
pub fn score_all(
    items: &[ScoreItem],
    synonyms: &SynonymTable,
) -> Result<Vec<SampleScores>> {
    items
        .par_iter()
        .map(|(id, cat, hyp, refs)| {
            let h: Vec<&str> = hyp.iter().map(String::as_str).collect();
            let r: Vec<Vec<&str>> = refs.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
            score_sentence(id, *cat, &h, &r, synonyms)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }

    pub fn render(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub count: usize,
    /// `None` when the row has no samples.
    pub stats: Option<[MeanStd; 5]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadScores {
    pub auc: f64,
    pub eer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// One entry per fold.
    pub pad: Vec<PadScores>,
}

fn row_of(label: &str, scores: &[&SampleScores]) -> ReportRow {
    let stats = (!scores.is_empty()).then(|| {
        std::array::from_fn(|k| {
            let xs: Vec<f64> = scores.iter().map(|s| s.values()[k]).collect();
            MeanStd::of(&xs).expect("non-empty")
        })
    });
    ReportRow {
        label: label.to_owned(),
        count: scores.len(),
        stats,
    }
}

/// Per-attack-type rows plus a pooled "All PAs" row.
pub fn aggregate(scores: &[SampleScores], pad: Vec<PadScores>) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to aggregate".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.category.is_attack()) {
        return Err(Error::Data(format!("sample {} is bona-fide; only attacks are scored", s.sample_id)));
    }
    let all: Vec<&SampleScores> = scores.iter().collect();
    let mut rows = vec![row_of(ALL_PAS, &all)];
    for cat in PadCategory::attacks() {
        let of_cat: Vec<&SampleScores> = scores.iter().filter(|s| s.category == cat).collect();
        rows.push(row_of(cat.name(), &of_cat));
    }
    Ok(MetricsReport { rows, pad })
}

impl MetricsReport {
    pub fn all_pas(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn all_pas_bleu1(&self) -> f64 {
        self.all_pas().stats.map_or(0.0, |s| s[0].mean)
    }

    pub fn pad_mean(&self) -> Option<PadScores> {
        if self.pad.is_empty() {
            return None;
        }
        let n = self.pad.len() as f64;
        Some(PadScores {
            auc: self.pad.iter().map(|p| p.auc).sum::<f64>() / n,
            eer: self.pad.iter().map(|p| p.eer).sum::<f64>() / n,
        })
    }

    /// Fold-wise average of row means and stds; counts are summed and
    /// PAD scores concatenated.
    pub fn macro_average(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports.first().ok_or_else(|| Error::Data("no reports to average".into()))?;
        let mut rows = Vec::with_capacity(first.rows.len());
        for (r, row) in first.rows.iter().enumerate() {
            let present: Vec<&[MeanStd; 5]> = reports.iter().filter_map(|x| x.rows[r].stats.as_ref()).collect();
            let stats = (!present.is_empty()).then(|| {
                let n = present.len() as f64;
                std::array::from_fn(|k| MeanStd {
                    mean: present.iter().map(|s| s[k].mean).sum::<f64>() / n,
                    std: present.iter().map(|s| s[k].std).sum::<f64>() / n,
                })
            });
            rows.push(ReportRow {
                label: row.label.clone(),
                count: reports.iter().map(|x| x.rows[r].count).sum(),
                stats,
            });
        }
        Ok(MetricsReport {
            rows,
            pad: reports.iter().flat_map(|x| x.pad.iter().copied()).collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pa_type,n");
        for name in METRIC_NAMES {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{},{}", row.label, row.count);
            for k in 0..5 {
                s.push(',');
                s.push_str(&row.stats.map_or("-".to_owned(), |st| st[k].render()));
            }
            s.push('\n');
        }
        s
    }

    pub fn pad_csv(&self) -> String {
        let mut s = String::from("fold,auc,eer\n");
        for (k, p) in self.pad.iter().enumerate() {
            let _ = writeln!(s, "{k},{:.6},{:.6}", p.auc, p.eer);
        }
        if let Some(m) = self.pad_mean() {
            let _ = writeln!(s, "mean,{:.6},{:.6}", m.auc, m.eer);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>4}", "PA type", "n");
        for name in METRIC_NAMES {
            let _ = write!(s, "  {name:>9}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<width$}  {:>4}", row.label, row.count);
            for k in 0..5 {
                let cell = row.stats.map_or("-".to_owned(), |st| st[k].render());
                let _ = write!(s, "  {cell:>9}");
            }
            s.push('\n');
        }
        for (k, p) in self.pad.iter().enumerate() {
            let _ = writeln!(s, "fold {k}: AUC {:.4}  EER {:.4}", p.auc, p.eer);
        }
        if self.pad.len() > 1 {
            let m = self.pad_mean().expect("non-empty");
            let _ = writeln!(s, "mean:   AUC {:.4}  EER {:.4}", m.auc, m.eer);
        }
        s
    }
}

/// One JSON object per line.
pub fn audit_jsonl(scores: &[SampleScores]) -> String {
    scores
        .iter()
        .map(|s| serde_json::to_string(s).expect("scores serialize") + "\n")
        .collect()
}

pub fn expected_rows() -> usize {
    NUM_PA_CATEGORIES + 1
}
