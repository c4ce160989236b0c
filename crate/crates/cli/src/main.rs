use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use xpad_core::corpus::{
    category_counts, corpus_hash, generate_synthetic, load_jsonl, save_jsonl, select, vocabulary_for, PadCategory,
    Sample, SynthConfig, Vocabulary,
};
use xpad_core::lg::{GraphMode, DEFAULT_T_MAX};
use xpad_core::losses::SynonymTable;
use xpad_core::metrics::audit_jsonl;
use xpad_core::trainer::{evaluate, load_checkpoints, run_threefold, write_run, RunManifest, TrainConfig};

#[derive(Parser)]
#[command(name = "xpad", version, about = "Explainable face presentation-attack detection lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and a per-category stats sidecar.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-fold training; writes checkpoints, reports and a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<GraphMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained fold on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON synonym table for METEOR; the built-in table otherwise.
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Predict and explain one feature vector (a JSON array) per input line.
    Generate {
        #[arg(long)]
        features_file: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Sentence embeddings of every attack description, as CSV.
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<GraphMode, String> {
    s.parse().map_err(|e: xpad_core::Error| e.to_string())
}

fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var("XPAD_SEED") {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| xpad_core::Error::Config(format!("XPAD_SEED={v} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn read_synth_config(path: &Path) -> anyhow::Result<SynthConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| xpad_core::Error::Config(format!("{}: {e}", path.display())).into())
}

fn gen_corpus(config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => read_synth_config(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let samples = generate_synthetic(&cfg)?;
    save_jsonl(&samples, out)?;
    let counts = category_counts(&samples);
    let per_category: BTreeMap<String, usize> = PadCategory::all()
        .map(|c| (format!("{} {}", c.index(), c.name()), counts[c.index()]))
        .collect();
    let stats = serde_json::json!({
        "samples": samples.len(),
        "subjects": cfg.num_subjects,
        "seed": cfg.seed,
        "corpus_hash": corpus_hash(&samples),
        "counts": per_category,
    });
    let sidecar = sidecar(out, "stats.json");
    fs::write(&sidecar, serde_json::to_string_pretty(&stats)? + "\n")
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn train(data: &Path, config: Option<&Path>, mode: Option<GraphMode>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let samples = load_jsonl(data, xpad_core::corpus::FEATURE_DIM)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::new(&cfg, &corpus_hash(&samples));
    manifest.write_atomic(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let result = run_threefold(&samples, &cfg).and_then(|r| write_run(out, &r).map(|()| r));
    match result {
        Ok(r) => {
            for (k, f) in r.folds.iter().enumerate() {
                for (stage, secs) in &f.prepared.seconds {
                    manifest.stage_seconds.insert(format!("fold-{k}/{stage}"), *secs);
                }
            }
            manifest.status = "complete".into();
            manifest.write_atomic(out)?;
            print!("{}", r.summary.to_text());
            Ok(())
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.write_atomic(out)?;
            Err(e.into())
        }
    }
}

/// Samples to score and the vocabulary rebuilt from the checkpoint's
/// training ids (all of `data` when no split is stored).
fn evaluation_view<'a>(
    samples: &'a [Sample],
    split: Option<&xpad_core::corpus::Fold>,
    vocab: &Vocabulary,
) -> anyhow::Result<Vec<&'a Sample>> {
    let (train, test) = match split {
        Some(f) => (select(samples, &f.train), select(samples, &f.test)),
        None => (samples.iter().collect(), samples.iter().collect()),
    };
    let rebuilt = if train.is_empty() { samples.iter().collect() } else { train };
    let data_vocab = vocabulary_for(&rebuilt, 1)?;
    if data_vocab.hash() != vocab.hash() {
        return Err(xpad_core::Error::VocabMismatch {
            checkpoint: vocab.hash(),
            data: data_vocab.hash(),
        }
        .into());
    }
    Ok(if test.is_empty() { samples.iter().collect() } else { test })
}

fn evaluate_cmd(data: &Path, dir: &Path, out: &Path, synonyms: Option<&Path>) -> anyhow::Result<()> {
    let models = load_checkpoints(dir)?;
    let samples = load_jsonl(data, models.pad.feature_dim())?;
    let test = evaluation_view(&samples, models.split.as_ref(), &models.vocab)?;
    let table = match synonyms {
        Some(p) => SynonymTable::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynonymTable::fixture(),
    };
    let (report, scores) = evaluate(&models.pad, &models.lg, &models.vocab, &test, models.mode, DEFAULT_T_MAX, &table)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    fs::write(sidecar(out, "pad.csv"), report.pad_csv())?;
    fs::write(sidecar(out, "txt"), report.to_text())?;
    fs::write(sidecar(out, "samples.jsonl"), audit_jsonl(&scores))?;
    print!("{}", report.to_text());
    Ok(())
}

fn parse_feature_line(line: &str) -> Result<Vec<f64>, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let arr = match &v {
        serde_json::Value::Array(a) => a,
        serde_json::Value::Object(o) => o
            .get("features")
            .and_then(|f| f.as_array())
            .ok_or("object without a \"features\" array")?,
        _ => return Err("expected a JSON array of numbers".into()),
    };
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("non-numeric feature {x}")))
        .collect()
}

fn generate(features: &Path, dir: &Path) -> anyhow::Result<()> {
    let models = load_checkpoints(dir)?;
    let d = models.pad.feature_dim();
    let file = fs::File::open(features).with_context(|| format!("opening {}", features.display()))?;
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let x = parse_feature_line(&line).map_err(|m| anyhow!("{}:{}: {m}", features.display(), i + 1))?;
        if x.len() != d {
            return Err(anyhow!(
                "{}:{}: feature dimension {}, model expects {d}",
                features.display(),
                i + 1,
                x.len()
            ));
        }
        let e = models.explain(&x, DEFAULT_T_MAX)?;
        match e.sentence {
            Some(s) => writeln!(w, "{}\t{:.6}\t{s}", e.category, e.pa_score)?,
            None => writeln!(w, "{}\t{:.6}", e.category, e.pa_score)?,
        }
    }
    Ok(())
}

fn export_embeddings(data: &Path, dir: &Path, out: &Path) -> anyhow::Result<()> {
    let models = load_checkpoints(dir)?;
    let samples = load_jsonl(data, models.pad.feature_dim())?;
    let rows = models.description_embeddings(&samples)?;
    let dim = models.classifier.embedder.table.cols();
    let mut text = String::from("sample_id,category");
    for j in 0..dim {
        text.push_str(&format!(",e{j}"));
    }
    text.push('\n');
    for (id, cat, v) in &rows {
        text.push_str(&format!("{id},{}", cat.index()));
        for x in v {
            text.push_str(&format!(",{x}"));
        }
        text.push('\n');
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} embeddings to {}", rows.len(), out.display());
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<xpad_core::Error>() {
        Some(xpad_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenCorpus { config, out } => gen_corpus(config.as_deref(), out),
        Command::Train { data, config, mode, out } => train(data, config.as_deref(), *mode, out),
        Command::Evaluate {
            data,
            checkpoints,
            out,
            synonyms,
        } => evaluate_cmd(data, checkpoints, out, synonyms.as_deref()),
        Command::Generate {
            features_file,
            checkpoints,
        } => generate(features_file, checkpoints),
        Command::ExportEmbeddings { data, checkpoints, out } => export_embeddings(data, checkpoints, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
