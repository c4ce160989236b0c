//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//! Pass criterion numbers as arguments to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpad_core::corpus::{
    generate_synthetic, select, split_folds, vocabulary_for, FoldPlan, PadCategory, Sample, SynthConfig, Vocabulary,
};
use xpad_core::lg::{soft_rollout_tape, teacher_forced_tape, GraphMode, LgParams, LgVars};
use xpad_core::losses::{
    sentence_discriminative_loss, sentence_semantic_loss, total_lg_loss, word_wise_loss_tape, LossWeights,
    SentenceClassifier, SentenceEmbedder, SynonymTable,
};
use xpad_core::metrics::{bleu, meteor, rouge_l};
use xpad_core::pad::{eer, roc_auc, PadParams};
use xpad_core::params::Parameters;
use xpad_core::tensor::{grad_check, LstmVars, Tape, Tensor, Var};
use xpad_core::trainer::{
    decode_examples, finish_fold, lg_examples, mean_bleu1, prepare_fold, run_threefold, train_lg_stage, write_run,
    FoldResult, LgStageInput, PreparedFold, TrainConfig,
};
use xpad_core::Result;

type Verdict = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- criterion 1

/// `Σ y ⊙ P` for a fixed random projection, so every output element
/// contributes a distinct weight to the gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let p = Tensor::uniform(r, c, 1.0, &mut rng(seed ^ 0x9e37));
    let p = t.constant_owned(p);
    let z = t.mul(y, p)?;
    Ok(t.sum(z))
}

fn away_from_zero(mut x: Tensor) -> Tensor {
    for v in x.values_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.1 } else { 0.1 };
        }
    }
    x
}

fn primitive_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let h = 1e-5;
    let mut u = |rows, cols| Tensor::uniform(rows, cols, 1.0, &mut r);
    let (a, b, c) = (u(3, 4), u(3, 4), u(4, 2));
    let (row, m, side) = (u(1, 4), u(5, 3), u(3, 2));
    let (lx, lh, lc) = (u(2, 3), u(2, 2), u(2, 2));
    let (lwx, lwh, lb) = (u(3, 8), u(2, 8), u(1, 8));
    let table = u(6, 3);
    let weights: Vec<f64> = (0..3).map(|i| 0.5 + i as f64).collect();
    let mask: Vec<f64> = (0..12).map(|i| (i % 3) as f64).collect();
    let relu_in = away_from_zero(u(3, 4));
    let mut out = Vec::new();
    let mut run = |name, ins: &[Tensor], f: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        out.push((name, grad_check(ins, h, |t, v| f(t, v))?));
        Ok(())
    };
    run("matmul", &[a.clone(), c.clone()], &mut |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("add", &[a.clone(), b.clone()], &mut |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("sub", &[a.clone(), b.clone()], &mut |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("mul", &[a.clone(), b.clone()], &mut |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("add_row", &[a.clone(), row.clone()], &mut |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("affine", &[m.clone(), a.clone(), row.clone()], &mut |t, v| {
        let y = t.affine(v[0], v[1], v[2])?;
        project(t, y, seed)
    })?;
    run("scale", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, seed)
    })?;
    run("sigmoid", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, seed)
    })?;
    run("tanh", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.tanh(v[0]);
        project(t, y, seed)
    })?;
    run("relu", &[relu_in], &mut |t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })?;
    run("slice_cols", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.slice_cols(v[0], 1, 3)?;
        project(t, y, seed)
    })?;
    run("concat_cols", &[a.clone(), side], &mut |t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("embedding", &[table], &mut |t, v| {
        let y = t.embedding(v[0], &[0, 2, 2, 5, 0])?;
        project(t, y, seed)
    })?;
    run("softmax_rows", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.softmax_rows(v[0]);
        project(t, y, seed)
    })?;
    run("softmax_xent", std::slice::from_ref(&a), &mut |t, v| t.softmax_xent(v[0], &[Some(1), None, Some(3)]))?;
    run("cosine_rows", &[a.clone(), b.clone()], &mut |t, v| {
        let y = t.cosine_rows(v[0], v[1])?;
        project(t, y, seed)
    })?;
    run("dropout", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.dropout(v[0], 0.5, true, &mut rng(seed))?;
        project(t, y, seed)
    })?;
    run("mask_mul", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.mask_mul(v[0], mask.clone());
        project(t, y, seed)
    })?;
    run("scale_rows", std::slice::from_ref(&a), &mut |t, v| {
        let y = t.scale_rows(v[0], weights.clone())?;
        project(t, y, seed)
    })?;
    run("sum", std::slice::from_ref(&a), &mut |t, v| Ok(t.sum(v[0])))?;
    run("add_all", &[a.clone(), b.clone()], &mut |t, v| {
        let y = t.add_all(&[v[0], v[1], v[0]])?;
        project(t, y, seed)
    })?;
    run("lstm_cell", &[lx, lh, lc, lwx, lwh, lb], &mut |t, v| {
        let p = LstmVars {
            w_input: v[3],
            w_hidden: v[4],
            bias: v[5],
        };
        let (h2, c2) = t.lstm_cell(v[0], v[1], v[2], &p)?;
        let a = project(t, h2, seed)?;
        let b = project(t, c2, seed + 1)?;
        t.add(a, b)
    })?;
    Ok(out)
}

/// `base + α · dir` as a tape node, so a scalar `α` probes the directional
/// derivative along `dir`.
fn along(t: &mut Tape, base: &Tensor, dir: &Tensor, alpha: Var) -> Result<Var> {
    let (r, c) = base.shape();
    let ones_c = t.constant_owned(Tensor::from_vec(r, 1, vec![1.0; r])?);
    let ones_r = t.constant_owned(Tensor::from_vec(1, c, vec![1.0; c])?);
    let col = t.matmul(ones_c, alpha)?;
    let full = t.matmul(col, ones_r)?;
    let d = t.constant(dir);
    let step = t.mul(full, d)?;
    let b = t.constant(base);
    t.add(b, step)
}

fn lg_vars(v: &[Var]) -> LgVars {
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

#[derive(Clone, Copy, Debug)]
enum Composite {
    WordWise,
    Semantic,
    Discriminative,
    Total,
}

/// Directional finite-difference check of a generator loss with respect
/// to every generator tensor and the conditioning input.
fn composite_error(seed: u64, which: Composite) -> Result<f64> {
    const V: usize = 12;
    const T_MAX: usize = 6;
    let mut r = rng(1000 + seed);
    let lg = LgParams::init(V, GraphMode::C.cond_dim(128), &mut r);
    let clf = SentenceClassifier::init(V, &mut r);
    let cond = Tensor::uniform(2, lg.cond_dim(), 1.0, &mut r);
    let bases: Vec<Tensor> = lg.named().into_iter().map(|(_, t)| t.clone()).chain([cond]).collect();
    let dirs: Vec<Tensor> = bases
        .iter()
        .map(|b| Tensor::uniform(b.rows(), b.cols(), 0.1, &mut r))
        .collect();
    let words: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..r.gen_range(2..5)).map(|_| r.gen_range(4..V)).collect())
        .collect();
    let targets: Vec<Vec<usize>> = words.iter().map(|w| [w.as_slice(), &[Vocabulary::EOS]].concat()).collect();
    let cats = [PadCategory::new(1 + (seed as usize % 9))?, PadCategory::new(9 - (seed as usize % 9))?];
    let alphas = vec![Tensor::scalar(0.0); bases.len()];
    grad_check(&alphas, 1e-6, |t, a| {
        let vs: Vec<Var> = bases
            .iter()
            .zip(&dirs)
            .zip(a)
            .map(|((b, d), &al)| along(t, b, d, al))
            .collect::<Result<_>>()?;
        let vars = lg_vars(&vs);
        let cond = vs[11];
        let tgt: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let wrd: Vec<&[usize]> = words.iter().map(Vec::as_slice).collect();
        let ww = |t: &mut Tape| -> Result<Var> {
            let tf = teacher_forced_tape(t, &vars, cond, &tgt, 0.5, true, &mut rng(seed))?;
            word_wise_loss_tape(t, &tf)
        };
        let generated = |t: &mut Tape| -> Result<Var> {
            let roll = soft_rollout_tape(t, &vars, cond, T_MAX)?;
            let mean = roll.mean_rows(t)?;
            clf.embedder.embed_soft(t, mean)
        };
        match which {
            Composite::WordWise => ww(t),
            Composite::Semantic => {
                let g = generated(t)?;
                sentence_semantic_loss(t, g, &wrd, &clf.embedder)
            }
            Composite::Discriminative => {
                let g = generated(t)?;
                sentence_discriminative_loss(t, g, &cats, &clf)
            }
            Composite::Total => {
                let w = ww(t)?;
                let g = generated(t)?;
                let ss = sentence_semantic_loss(t, g, &wrd, &clf.embedder)?;
                let disc = sentence_discriminative_loss(t, g, &cats, &clf)?;
                total_lg_loss(t, &LossWeights::default(), Some(w), Some(disc), Some(ss))
            }
        }
    })
}

fn pad_loss_error(seed: u64) -> Result<f64> {
    let mut r = rng(2000 + seed);
    let pad = PadParams::init(128, &mut r);
    let x = Tensor::uniform(4, 128, 2.0, &mut r);
    let bases: Vec<Tensor> = pad.named().into_iter().map(|(_, t)| t.clone()).chain([x]).collect();
    let dirs: Vec<Tensor> = bases
        .iter()
        .map(|b| Tensor::uniform(b.rows(), b.cols(), 0.1, &mut r))
        .collect();
    let labels: Vec<Option<usize>> = (0..4).map(|_| Some(r.gen_range(0..10))).collect();
    let alphas = vec![Tensor::scalar(0.0); bases.len()];
    grad_check(&alphas, 1e-6, |t, a| {
        let vs: Vec<Var> = bases
            .iter()
            .zip(&dirs)
            .zip(a)
            .map(|((b, d), &al)| along(t, b, d, al))
            .collect::<Result<_>>()?;
        let vars = xpad_core::pad::PadVars {
            w1: vs[0],
            b1: vs[1],
            w2: vs[2],
            b2: vs[3],
        };
        let (_, logits) = pad.forward_tape(t, &vars, vs[4], 0.5, true, &mut rng(seed))?;
        t.softmax_xent(logits, &labels)
    })
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let seeds = 50u64;
    let mut worst_prim = (0.0f64, "");
    let mut worst_direct = (0.0f64, "");
    let mut errors = Vec::new();
    for seed in 0..seeds {
        match primitive_errors(seed) {
            Ok(v) => {
                for (name, e) in v {
                    if e > worst_prim.0 {
                        worst_prim = (e, name);
                    }
                }
            }
            Err(e) => errors.push(format!("primitives seed {seed}: {e}")),
        }
        let pad = pad_loss_error(seed).map(|e| ("L_pad", e));
        let rest = [
            (Composite::WordWise, "L_ww"),
            (Composite::Semantic, "L_ss"),
            (Composite::Discriminative, "L_disc"),
            (Composite::Total, "total"),
        ]
        .map(|(c, name)| composite_error(seed, c).map(|e| (name, e)));
        for res in std::iter::once(pad).chain(rest) {
            match res {
                Ok((name, e)) if e > worst_direct.0 => worst_direct = (e, name),
                Ok(_) => {}
                Err(e) => errors.push(format!("composite seed {seed}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = errors.is_empty() && worst_prim.0 < 1e-5 && worst_direct.0 < 1e-4 && secs < 60.0;
    (
        ok,
        format!(
            "{seeds} seeds; worst primitive {:.1e} ({}), worst composite {:.1e} ({}); {} errors; {secs:.1} s",
            worst_prim.0,
            worst_prim.1,
            worst_direct.0,
            worst_direct.1,
            errors.len()
        ) + &errors.first().map(|e| format!("; first: {e}")).unwrap_or_default(),
    )
}

// ---------------------------------------------------------------- criterion 2

fn oracle_ngrams<'a>(s: &[&'a str], k: usize) -> Vec<Vec<&'a str>> {
    if s.len() < k {
        return Vec::new();
    }
    (0..=s.len() - k).map(|i| s[i..i + k].to_vec()).collect()
}

fn oracle_bleu(hyp: &[&str], refs: &[&[&str]], n: usize) -> f64 {
    let mut logp = 0.0;
    for k in 1..=n {
        let hg = oracle_ngrams(hyp, k);
        let mut seen: Vec<&Vec<&str>> = Vec::new();
        let mut clipped = 0;
        for g in &hg {
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let in_hyp = hg.iter().filter(|x| *x == g).count();
            let in_ref = refs
                .iter()
                .map(|r| oracle_ngrams(r, k).iter().filter(|x| *x == g).count())
                .max()
                .unwrap();
            clipped += in_hyp.min(in_ref);
        }
        if clipped == 0 {
            return 0.0;
        }
        logp += (clipped as f64 / hg.len() as f64).ln();
    }
    let c = hyp.len() as i64;
    let mut best = refs[0].len() as i64;
    for r in refs {
        let l = r.len() as i64;
        if (l - c).abs() < (best - c).abs() || ((l - c).abs() == (best - c).abs() && l < best) {
            best = l;
        }
    }
    let bp = if c >= best { 1.0 } else { (1.0 - best as f64 / c as f64).exp() };
    bp * (logp / n as f64).exp()
}

fn is_subsequence(sub: &[&str], of: &[&str]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == w))
}

fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<&str> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        if is_subsequence(&sub, long) {
            best = n;
        }
    }
    best
}

fn oracle_rouge(hyp: &[&str], reference: &[&str]) -> f64 {
    let l = oracle_lcs(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / hyp.len() as f64, l / reference.len() as f64);
    2.0 * p * r / (p + r)
}

/// Every partial one-to-one matching; keeps the best by
/// (exact matches, total matches, fewest chunks).
fn oracle_meteor(hyp: &[&str], reference: &[&str], syn: &SynonymTable) -> f64 {
    fn rec(
        i: usize,
        hyp: &[&str],
        reference: &[&str],
        syn: &SynonymTable,
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize, bool)>,
        best: &mut (usize, usize, i64),
    ) {
        if i == hyp.len() {
            let exact = pairs.iter().filter(|p| p.2).count();
            let mut chunks = 0i64;
            for (k, p) in pairs.iter().enumerate() {
                if k == 0 || !(pairs[k - 1].0 + 1 == p.0 && pairs[k - 1].1 + 1 == p.1) {
                    chunks += 1;
                }
            }
            let cand = (exact, pairs.len(), -chunks);
            if cand > *best {
                *best = cand;
            }
            return;
        }
        rec(i + 1, hyp, reference, syn, used, pairs, best);
        for j in 0..reference.len() {
            if used[j] {
                continue;
            }
            let exact = hyp[i] == reference[j];
            if exact || syn.are_synonyms(hyp[i], reference[j]) {
                used[j] = true;
                pairs.push((i, j, exact));
                rec(i + 1, hyp, reference, syn, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0, 0);
    rec(0, hyp, reference, syn, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    let m = best.1 as f64;
    if m == 0.0 {
        return 0.0;
    }
    let (p, r) = (m / hyp.len() as f64, m / reference.len() as f64);
    let f = 10.0 * p * r / (r + 9.0 * p);
    f * (1.0 - 0.5 * (-best.2 as f64 / m).powi(3))
}

fn random_pair(r: &mut ChaCha8Rng, words: &[String], max_len: usize, k: usize) -> (Vec<String>, Vec<String>) {
    let sent = |r: &mut ChaCha8Rng, pool: &[String]| -> Vec<String> {
        (0..r.gen_range(1..=max_len)).map(|_| pool[r.gen_range(0..pool.len())].clone()).collect()
    };
    match k % 20 {
        0 => {
            let s = sent(r, words);
            (s.clone(), s)
        }
        1 => (sent(r, &words[..15]), sent(r, &words[15..])),
        _ => (sent(r, words), sent(r, words)),
    }
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let mut table = BTreeMap::new();
    for (a, b) in [(0, 1), (2, 3), (4, 16), (5, 20), (7, 8)] {
        table.insert(words[a].clone(), vec![words[b].clone()]);
    }
    let syn = SynonymTable(table);
    let mut r = rng(42);
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for k in 0..200 {
        let (h, f) = random_pair(&mut r, &words, 12, k);
        let (h, f): (Vec<&str>, Vec<&str>) = (h.iter().map(String::as_str).collect(), f.iter().map(String::as_str).collect());
        let refs = [f.as_slice()];
        let mut diffs = vec![(rouge_l(&h, &refs).unwrap() - oracle_rouge(&h, &f)).abs()];
        for n in 1..=3 {
            diffs.push((bleu(&h, &refs, n).unwrap() - oracle_bleu(&h, &refs, n)).abs());
        }
        let (mh, mf) = random_pair(&mut r, &words, 6, k);
        let (mh, mf): (Vec<&str>, Vec<&str>) =
            (mh.iter().map(String::as_str).collect(), mf.iter().map(String::as_str).collect());
        diffs.push((meteor(&mh, &[mf.as_slice()], &syn).unwrap() - oracle_meteor(&mh, &mf, &syn)).abs());
        let d = diffs.into_iter().fold(0.0, f64::max);
        worst = worst.max(d);
        if d > 1e-9 {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        mismatches == 0 && secs < 10.0,
        format!("200 pairs; worst |metric − oracle| {worst:.1e}; {mismatches} mismatches; {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Verdict {
    let mut t = Tape::new();
    let z = t.constant_owned(Tensor::zeros(1, 10));
    let ce = t.softmax_xent(z, &[Some(3)]).unwrap();
    let ce = t.value(ce).item();
    let s: Vec<&str> = "a plastic mask covers".split(' ').collect();
    let m = meteor(&s, &[&s], &SynonymTable::fixture()).unwrap();
    let a: Vec<&str> = "it is bona fide".split(' ').collect();
    let b: Vec<&str> = "bona fide it is".split(' ').collect();
    let rl = rouge_l(&a, &[&b]).unwrap();
    let bl: Vec<f64> = (1..=3).map(|n| bleu(&s, &[&s], n).unwrap()).collect();
    let checks = [
        (ce, 10f64.ln()),
        (m, 0.9921875),
        (rl, 0.5),
        (bl[0], 1.0),
        (bl[1], 1.0),
        (bl[2], 1.0),
    ];
    let ok = checks.iter().all(|(x, y)| (x - y).abs() <= 1e-9);
    (
        ok,
        format!("CE {ce:.12} (ln 10), METEOR {m:.12}, ROUGE-L {rl:.12}, BLEU-1/2/3 {:?}", bl),
    )
}

// ---------------------------------------------------------------- shared state

const SEEDS: [u64; 3] = [1, 2, 3];

fn corpus() -> &'static Vec<Sample> {
    static C: OnceLock<Vec<Sample>> = OnceLock::new();
    C.get_or_init(|| generate_synthetic(&SynthConfig::default()).expect("default corpus"))
}

fn desk(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::desk_scale()
    }
}

/// Prepared folds (vocabulary, PAD head, classifier) per seed.
fn prepared() -> &'static Vec<(u64, FoldPlan, Vec<PreparedFold>)> {
    static P: OnceLock<Vec<(u64, FoldPlan, Vec<PreparedFold>)>> = OnceLock::new();
    P.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let cfg = desk(seed);
                let plan = split_folds(corpus(), seed).expect("plan");
                let folds = plan
                    .folds
                    .iter()
                    .enumerate()
                    .map(|(k, f)| prepare_fold(corpus(), f, k, &cfg).expect("prepare"))
                    .collect();
                (seed, plan, folds)
            })
            .collect()
    })
}

fn pad_test_scores(samples: &[Sample], pad: &PadParams, test: &[String]) -> (Vec<f64>, Vec<f64>) {
    let test = select(samples, test);
    let feats: Vec<&[f64]> = test.iter().map(|s| s.features.as_slice()).collect();
    let out = pad.forward_batch(&feats).expect("forward");
    let (mut bona, mut pa) = (Vec::new(), Vec::new());
    for (o, s) in out.iter().zip(&test) {
        if s.category.is_attack() {
            pa.push(o.prediction.pa_score);
        } else {
            bona.push(o.prediction.pa_score);
        }
    }
    (bona, pa)
}

type Lambdas = (f64, f64);
const WW_ONLY: Lambdas = (0.0, 0.0);

/// Mean All-PAs BLEU-1 over every seed and fold for one generator setting.
fn all_pas_bleu1(mode: GraphMode, (disc, ss): Lambdas) -> f64 {
    static CACHE: OnceLock<std::sync::Mutex<BTreeMap<String, f64>>> = OnceLock::new();
    let key = format!("{mode}/{disc}/{ss}");
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&v) = cache.lock().unwrap().get(&key) {
        return v;
    }
    let mut total = 0.0;
    let mut n = 0;
    for (seed, _, folds) in prepared() {
        let cfg = TrainConfig {
            mode,
            lambda_disc: disc,
            lambda_ss: ss,
            ..desk(*seed)
        };
        for p in folds {
            let r: FoldResult = finish_fold(corpus(), p, &cfg).expect("fold");
            total += r.report.all_pas_bleu1();
            n += 1;
        }
    }
    let v = total / n as f64;
    cache.lock().unwrap().insert(key, v);
    v
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let (seed, _, folds) = &prepared()[0];
    let mut lines = Vec::new();
    let mut ok = true;
    for p in folds {
        let (bona, pa) = pad_test_scores(corpus(), &p.pad.params, &p.fold.test);
        let (auc, e) = (roc_auc(&bona, &pa).unwrap(), eer(&bona, &pa).unwrap());
        ok &= auc >= 0.99 && e <= 0.03;
        lines.push(format!("fold {} AUC {auc:.4} EER {e:.4}", p.index));
    }
    let control = generate_synthetic(&SynthConfig {
        separation: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = desk(*seed);
    let plan = split_folds(&control, *seed).unwrap();
    let (mut all_b, mut all_p) = (Vec::new(), Vec::new());
    let mut per_fold = Vec::new();
    for (k, f) in plan.folds.iter().enumerate() {
        let train = select(&control, &f.train);
        let val = select(&control, &f.validation);
        let pad = xpad_core::trainer::train_pad_stage(&train, &val, &cfg, 77 + k as u64).unwrap();
        let (b, p) = pad_test_scores(&control, &pad.params, &f.test);
        per_fold.push(format!("{:.3}", roc_auc(&b, &p).unwrap()));
        all_b.extend(b);
        all_p.extend(p);
    }
    let control_auc = roc_auc(&all_b, &all_p).unwrap();
    ok &= (0.4..=0.6).contains(&control_auc);
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 180.0;
    (
        ok,
        format!(
            "{}; s=0 control pooled test AUC {control_auc:.3} (folds {}); {secs:.1} s",
            lines.join(", "),
            per_fold.join("/")
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let a = all_pas_bleu1(GraphMode::A, WW_ONLY);
    let c = all_pas_bleu1(GraphMode::C, WW_ONLY);
    let secs = start.elapsed().as_secs_f64();
    (
        c - a >= 0.10 && secs < 900.0,
        format!("All-PAs BLEU-1 over 3 seeds x 3 folds: A {a:.4}, C {c:.4}, C − A {:+.4} (need ≥ 0.10); {secs:.0} s", c - a),
    )
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let d = LossWeights::default();
    let configs = [
        ("ww", WW_ONLY),
        ("+disc", (d.discriminative, 0.0)),
        ("+ss", (0.0, d.semantic)),
        ("+both", (d.discriminative, d.semantic)),
    ];
    let scores: Vec<(&str, f64)> = configs
        .iter()
        .map(|&(name, l)| (name, all_pas_bleu1(GraphMode::C, l)))
        .collect();
    let base = scores[0].1;
    let best = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let non_degrading = scores[1..].iter().all(|s| s.1 - base >= -0.02);
    let full_near_best = scores[3].1 >= best - 0.02;
    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = scores.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
    (
        non_degrading && full_near_best && secs < 1800.0,
        format!("mode C All-PAs BLEU-1: {}; {secs:.0} s", detail.join(", ")),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let mut picked: Vec<Sample> = Vec::new();
    for c in PadCategory::attacks().take(8) {
        let mut s = corpus().iter().find(|s| s.category == c).unwrap().clone();
        s.descriptions.truncate(1);
        picked.push(s);
    }
    let refs: Vec<&Sample> = picked.iter().collect();
    let vocab = vocabulary_for(&refs, 1).unwrap();
    let mut pad = PadParams::init(128, &mut rng(5));
    pad.frozen = true;
    let classifier = SentenceClassifier::uniform(vocab.len());
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        lr_decay_every: 100,
        lg_epochs: 300,
        lg_patience: 300,
        batch_size: 8,
        lambda_disc: 0.0,
        lambda_ss: 0.0,
        ..TrainConfig::default()
    };
    let examples = lg_examples(&refs, &pad, &vocab, GraphMode::C).unwrap();
    let out = train_lg_stage(
        &LgStageInput {
            vocab: &vocab,
            pad: &pad,
            classifier: &classifier,
            train: &examples,
            validation: &examples,
        },
        &cfg,
        9,
    )
    .unwrap();
    let b1 = mean_bleu1(&out.params, &examples, &vocab, cfg.t_max).unwrap();
    let hyps = decode_examples(&out.params, &examples, &vocab, cfg.t_max).unwrap();
    let exact = hyps.iter().zip(&examples).filter(|(h, e)| **h == e.references[0]).count();
    let first5: Vec<f64> = out.history.iter().take(5).map(|e| e.losses.word_wise).collect();
    let rises = first5.windows(2).filter(|w| w[1] >= w[0]).count();
    let secs = start.elapsed().as_secs_f64();
    (
        b1 >= 0.95 && exact >= 6 && rises <= 1 && secs < 120.0,
        format!(
            "training BLEU-1 {b1:.4}, exact {exact}/8, first-5-epoch loss rises {rises}, best epoch {}; {secs:.1} s",
            out.best_epoch
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn plan_problems(samples: &[Sample], plan: &FoldPlan) -> Vec<String> {
    let subject: BTreeMap<&str, &str> = samples.iter().map(|s| (s.sample_id.as_str(), s.subject_id.as_str())).collect();
    let subjects = |ids: &[String]| -> BTreeSet<&str> { ids.iter().map(|i| subject[i.as_str()]).collect() };
    let mut p = Vec::new();
    let sets: Vec<BTreeSet<&str>> = plan.subject_sets.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            if !sets[a].is_disjoint(&sets[b]) {
                p.push(format!("base sets {a} and {b} share subjects"));
            }
        }
    }
    let mut union = BTreeSet::new();
    let mut total = 0;
    for (k, f) in plan.folds.iter().enumerate() {
        let (tr, va, te) = (subjects(&f.train), subjects(&f.validation), subjects(&f.test));
        if !tr.is_disjoint(&te) || !tr.is_disjoint(&va) || !va.is_disjoint(&te) {
            p.push(format!("fold {k} shares subjects across splits"));
        }
        if f.train.len() + f.validation.len() + f.test.len() != samples.len() {
            p.push(format!("fold {k} does not cover the dataset"));
        }
        total += f.test.len();
        union.extend(f.test.iter().cloned());
    }
    if union.len() != samples.len() || total != samples.len() {
        p.push("test sets are not a partition".into());
    }
    p
}

fn leak_problems(samples: &[Sample], plan: &FoldPlan) -> Vec<String> {
    let mut p = Vec::new();
    for (k, f) in plan.folds.iter().enumerate() {
        let train = select(samples, &f.train);
        let vocab = vocabulary_for(&train, 1).unwrap();
        let train_words: BTreeSet<String> = train.iter().flat_map(|s| s.description_tokens()).flatten().collect();
        let test_words: BTreeSet<String> = select(samples, &f.test)
            .iter()
            .flat_map(|s| s.description_tokens())
            .flatten()
            .collect();
        for w in test_words.difference(&train_words) {
            if vocab.id(w).is_some() {
                p.push(format!("fold {k}: test-only token {w:?} in vocabulary"));
            }
        }
    }
    p
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let mut problems = Vec::new();
    let mut test_only_tokens = 0;
    for seed in 0..50u64 {
        let samples = generate_synthetic(&SynthConfig {
            seed: 100 + seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let plan = split_folds(&samples, seed).unwrap();
        problems.extend(plan_problems(&samples, &plan).into_iter().map(|e| format!("seed {seed}: {e}")));
        problems.extend(leak_problems(&samples, &plan));
        for f in &plan.folds {
            let train = select(&samples, &f.train);
            let tw: BTreeSet<String> = train.iter().flat_map(|s| s.description_tokens()).flatten().collect();
            test_only_tokens += select(&samples, &f.test)
                .iter()
                .flat_map(|s| s.description_tokens())
                .flatten()
                .filter(|w| !tw.contains(w))
                .count();
        }
    }

    // Freeze contracts through a generator run with every loss active.
    let p = &prepared()[0].2[0];
    let pad_before = p.pad.params.clone();
    let clf_before = p.classifier.clone();
    let cfg = TrainConfig {
        lg_epochs: 2,
        ..desk(1)
    };
    match finish_fold(corpus(), p, &cfg) {
        Ok(r) => {
            if r.prepared.pad.params != pad_before || p.pad.params != pad_before {
                problems.push("PAD parameters changed".into());
            }
            if r.prepared.classifier != clf_before || p.classifier != clf_before {
                problems.push("classifier parameters changed".into());
            }
        }
        Err(e) => problems.push(format!("generator run failed: {e}")),
    }
    let mut unfrozen = p.pad.params.clone();
    unfrozen.frozen = false;
    let train = select(corpus(), &p.fold.train);
    let ex = lg_examples(&train, &unfrozen, &p.vocab, GraphMode::C).unwrap();
    let refused = train_lg_stage(
        &LgStageInput {
            vocab: &p.vocab,
            pad: &unfrozen,
            classifier: &p.classifier,
            train: &ex,
            validation: &[],
        },
        &cfg,
        0,
    )
    .is_err();
    if !refused {
        problems.push("generator training accepted an unfrozen PAD head".into());
    }

    // Two identical runs write identical reports.
    let quick = TrainConfig {
        pad_epochs: 10,
        lg_epochs: 3,
        clf_epochs: 5,
        ..TrainConfig::desk_scale()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let r = run_threefold(corpus(), &quick).unwrap();
        write_run(d.path(), &r).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("summary.csv")).unwrap();
    let identical = read(&dirs[0]) == read(&dirs[1]);
    if !identical {
        problems.push("summary.csv differs between identical runs".into());
    }
    let secs = start.elapsed().as_secs_f64();
    (
        problems.is_empty(),
        format!(
            "50 seeds subject-disjoint; {test_only_tokens} test-only token occurrences, none in vocabularies; \
             freeze contracts hold; summary.csv byte-identical: {identical}; {} problems; {secs:.1} s",
            problems.len()
        ) + &problems.first().map(|e| format!("; first: {e}")).unwrap_or_default(),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient integrity", criterion_1),
        ("metric oracle equivalence", criterion_2),
        ("closed-form pins", criterion_3),
        ("PAD separability", criterion_4),
        ("mode C beats mode A", criterion_5),
        ("sentence-loss ablation", criterion_6),
        ("overfit capacity", criterion_7),
        ("protocol invariants", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
