use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use i2ce::baselines::{bleu, cider_d, corpus_bleu, rouge_l, CiderConfig, DfTable, Smoothing, MAX_N};
use i2ce::scoring::{load_candidates, score_candidates, stable_mean, write_jsonl, write_tsv, Candidate};
use i2ce::stats::{correlate, correlation_matrix, Statistic};
use i2ce::text::{build_vocab, tokenize, Corpus, TextError, Vocab, MAX_REFERENCES};
use i2ce::trainer::{write_loss_log, Checkpoint, TrainError, Trainer};
use i2ce::Real;
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    Against, BaselineFormat, BaselinesArgs, BuildVocabArgs, CorrelateArgs, ScoreArgs, ScoreFormat,
    SmoothingArg, TrainArgs,
};
use crate::config::{self, ConfigFile, TrainSettings, DEFAULT_CIDER_SCALE};
use crate::error::{io_error, CliError, Exit};
use crate::manifest::{manifest_path, with_suffix, RunManifest};
use crate::table::ScoreTable;

fn text_error(e: TextError) -> CliError {
    CliError::input(e.to_string())
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    let corpus = Corpus::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if corpus.is_empty() {
        return Err(CliError::input(format!("{}: {}", path.display(), TextError::EmptyCorpus)));
    }
    Ok(corpus)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

/// Writes to `path`, or stdout when `None`.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(p, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::input(format!("stdout: {e}")))
        }
    }
}

fn arg(argv: &mut Vec<String>, flag: &str, value: impl ToString) {
    argv.push(format!("--{flag}"));
    argv.push(value.to_string());
}

fn path_arg(argv: &mut Vec<String>, flag: &str, path: &Path) {
    arg(argv, flag, path.display());
}

pub fn build_vocab_cmd(a: &BuildVocabArgs, cfg: &ConfigFile) -> Result<Exit, CliError> {
    let min_freq = config::min_freq(a.min_freq, cfg);
    let corpus = load_corpus(&a.corpus)?;
    let vocab = build_vocab(corpus.sentences(), min_freq).map_err(text_error)?;
    if vocab.len() == i2ce::text::UNK + 1 {
        eprintln!("warning: no token occurs at least {min_freq} times; vocabulary holds only special tokens");
    }
    let mut json = serde_json::to_string_pretty(&vocab).expect("vocab serializes");
    json.push('\n');
    std::fs::write(&a.out, json).map_err(|e| io_error(&a.out, e))?;

    #[derive(Serialize)]
    struct Settings {
        min_freq: usize,
    }
    let mut m = RunManifest::new("build-vocab", Settings { min_freq });
    let mut argv = vec!["build-vocab".to_string()];
    path_arg(&mut argv, "corpus", &a.corpus);
    arg(&mut argv, "min-freq", min_freq);
    path_arg(&mut argv, "out", &a.out);
    m.args = argv;
    m.input("corpus", &a.corpus)?;
    m.output(&a.out)?;
    m.write(&manifest_path(&a.out))?;
    eprintln!("{} tokens written to {}", vocab.len(), a.out.display());
    Ok(Exit::Success)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => CliError::numerical(e.to_string()),
        other => CliError::input(other.to_string()),
    }
}

fn run_training<T: Real>(
    groups: Vec<i2ce::text::CaptionGroup>,
    vocab: Vocab,
    s: &TrainSettings,
    out: &Path,
    loss_log: &Path,
) -> Result<(), CliError> {
    let model_cfg = s.model_config(vocab.len());
    let mut trainer: Trainer<T> =
        Trainer::new(groups, vocab, model_cfg, s.train.clone(), s.loss).map_err(train_error)?;
    let write_log = |log: &[i2ce::trainer::LossRecord]| -> Result<(), CliError> {
        let mut w = create(loss_log)?;
        write_loss_log(&mut w, log)
            .and_then(|_| w.flush())
            .map_err(|e| io_error(loss_log, e))
    };
    while trainer.epoch() < s.train.epochs {
        match trainer.run_epoch() {
            Ok(e) => eprintln!(
                "epoch {}/{}  steps {}  rec {:.6}  total {:.6}",
                e.epoch, s.train.epochs, e.steps, e.mean_rec, e.mean_total
            ),
            Err(TrainError::Diverged {
                epoch,
                step,
                reason,
                last_good,
            }) => {
                write_log(trainer.log())?;
                last_good.save(out).map_err(|e| CliError::input(e.to_string()))?;
                return Err(CliError::numerical(format!(
                    "training diverged at epoch {epoch}, step {step}: {reason}; checkpoint of epoch {} written to {}",
                    last_good.epoch,
                    out.display()
                )));
            }
            Err(e) => {
                write_log(trainer.log())?;
                return Err(train_error(e));
            }
        }
    }
    trainer
        .checkpoint()
        .save(out)
        .map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    write_log(trainer.log())
}

pub fn train_cmd(a: &TrainArgs, cfg: &ConfigFile) -> Result<Exit, CliError> {
    let s = TrainSettings::resolve(a, cfg)?;
    let corpus = load_corpus(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str::<Vocab>(&text).map_err(|e| CliError::input(format!("{}: {}", p.display(), TextError::from(e))))?
        }
        None => build_vocab(corpus.sentences(), s.min_freq).map_err(text_error)?,
    };
    let groups = corpus.encode(&vocab, s.t_max).map_err(text_error)?;
    if groups.is_empty() {
        return Err(CliError::input("no caption survives tokenization"));
    }
    let loss_log = a.loss_log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    match s.precision {
        "f32" => run_training::<f32>(groups, vocab, &s, &a.out, &loss_log)?,
        _ => run_training::<f64>(groups, vocab, &s, &a.out, &loss_log)?,
    }

    let mut m = RunManifest::new("train", &s);
    m.seed = Some(s.train.seed);
    let mut argv = vec!["train".to_string()];
    path_arg(&mut argv, "corpus", &a.corpus);
    if let Some(v) = &a.vocab {
        path_arg(&mut argv, "vocab", v);
        m.input("vocab", v)?;
    }
    path_arg(&mut argv, "out", &a.out);
    path_arg(&mut argv, "loss-log", &loss_log);
    for (flag, v) in [
        ("embed-dim", s.embed_dim.to_string()),
        ("hidden-dim", s.hidden_dim.to_string()),
        ("t-max", s.t_max.to_string()),
        ("min-freq", s.min_freq.to_string()),
        ("branch", s.train.branch.to_string()),
        ("lr", s.train.lr.to_string()),
        ("batch-size", s.train.batch_size.to_string()),
        ("epochs", s.train.epochs.to_string()),
        ("seed", s.train.seed.to_string()),
        ("beta1", s.train.beta1.to_string()),
        ("beta2", s.train.beta2.to_string()),
        ("eps", s.train.eps.to_string()),
        ("grad-clip", s.train.grad_clip.to_string()),
        ("margin", s.loss.margin.to_string()),
        ("triplet-margin", s.loss.triplet_margin.to_string()),
        ("beta", s.loss.beta.to_string()),
        ("lambda-semantic", s.loss.lambda_semantic.to_string()),
        ("lambda-rec", s.loss.lambda_rec.to_string()),
        ("aggregation", aggregation_name(s.loss.aggregation).to_string()),
        ("precision", s.precision.to_string()),
    ] {
        arg(&mut argv, flag, v);
    }
    m.args = argv;
    m.input("corpus", &a.corpus)?;
    m.checkpoint_hash = Some(crate::manifest::file_hash(&a.out)?);
    m.output(&a.out)?;
    m.output(&loss_log)?;
    m.write(&manifest_path(&a.out))?;
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(Exit::Success)
}

fn aggregation_name(a: i2ce::objectives::Aggregation) -> &'static str {
    match a {
        i2ce::objectives::Aggregation::Mean => "mean",
        i2ce::objectives::Aggregation::Max => "max",
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f64>, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_cands(path: &Path) -> Result<Vec<Candidate>, CliError> {
    load_candidates(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn format_name<E: clap::ValueEnum>(v: E) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

pub fn score_cmd(a: &ScoreArgs, cfg: &ConfigFile) -> Result<Exit, CliError> {
    let pooling = config::pooling(a.pool.as_deref(), cfg)?;
    let format = config::enum_setting("format", a.format, cfg.score.format.as_deref(), ScoreFormat::Json)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let candidates = load_cands(&a.candidates)?;
    let refs = load_corpus(&a.references)?
        .encode(&ckpt.vocab, ckpt.model.config().t_max)
        .map_err(text_error)?;
    let run = score_candidates(&ckpt.model, &ckpt.vocab, &candidates, &refs, pooling);
    emit(a.out.as_deref(), |w| match format {
        ScoreFormat::Json => write_jsonl(w, &run),
        ScoreFormat::Tsv => write_tsv(w, &run),
    })?;
    for e in &run.errors {
        eprintln!("skipped candidate {} (image {}): {}", e.index, e.image_id, e.message);
    }
    match run.summary.corpus_score {
        Some(s) => eprintln!("scored {} of {}; corpus score {s:.4}", run.summary.scored, candidates.len()),
        None => eprintln!("no candidate could be scored"),
    }

    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Settings {
            pool: String,
            format: String,
        }
        let settings = Settings {
            pool: pooling.to_string(),
            format: format_name(format),
        };
        let mut argv = vec!["score".to_string()];
        path_arg(&mut argv, "candidates", &a.candidates);
        path_arg(&mut argv, "references", &a.references);
        path_arg(&mut argv, "checkpoint", &a.checkpoint);
        arg(&mut argv, "pool", &settings.pool);
        arg(&mut argv, "format", &settings.format);
        path_arg(&mut argv, "out", out);
        let mut m = RunManifest::new("score", settings);
        m.seed = Some(ckpt.train_config.seed);
        m.args = argv;
        m.input("candidates", &a.candidates)?;
        m.input("references", &a.references)?;
        m.checkpoint_hash = Some(crate::manifest::file_hash(&a.checkpoint)?);
        m.output(out)?;
        m.write(&manifest_path(out))?;
    }
    Ok(if run.errors.is_empty() { Exit::Success } else { Exit::Partial })
}

#[derive(Debug, Serialize)]
struct BaselineReport {
    image_id: String,
    bleu1: f64,
    bleu2: f64,
    bleu3: f64,
    bleu4: f64,
    rouge_l: f64,
    cider: f64,
}

#[derive(Debug, Serialize)]
struct BaselineSummary {
    scored: usize,
    skipped: usize,
    /// Corpus-level (pooled-count) BLEU-1..4.
    corpus_bleu: [f64; MAX_N],
    mean_rouge_l: Option<f64>,
    mean_cider: Option<f64>,
}

pub fn baselines_cmd(a: &BaselinesArgs, cfg: &ConfigFile) -> Result<Exit, CliError> {
    let b = &cfg.baselines;
    let format = config::enum_setting("format", a.format, b.format.as_deref(), BaselineFormat::Json)?;
    let smoothing = config::enum_setting("smoothing", a.smoothing, b.smoothing.as_deref(), SmoothingArg::AddOne)?;
    let scale = a.cider_scale.or(b.cider_scale).unwrap_or(DEFAULT_CIDER_SCALE);
    if !scale.is_finite() || scale <= 0.0 {
        return Err(CliError::input(format!("cider scale must be positive, got {scale}")));
    }
    let candidates = load_cands(&a.candidates)?;
    let corpus = load_corpus(&a.references)?;

    let mut ids = Vec::new();
    let mut ref_tokens: Vec<Vec<Vec<String>>> = Vec::new();
    for g in &corpus.groups {
        let refs: Vec<Vec<String>> = g
            .captions
            .iter()
            .map(|c| tokenize(c))
            .filter(|t| !t.is_empty())
            .take(MAX_REFERENCES)
            .collect();
        if !refs.is_empty() {
            ids.push(g.image_id.as_str());
            ref_tokens.push(refs);
        }
    }
    let index: std::collections::HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let table = match &a.df_cache {
        Some(p) => {
            let (t, hit) = DfTable::load_or_build(p, &ref_tokens).map_err(|e| CliError::input(e.to_string()))?;
            eprintln!("df cache {}: {}", p.display(), if hit { "hit" } else { "rebuilt" });
            t
        }
        None => DfTable::build(&ref_tokens),
    };
    let cider_cfg = CiderConfig::default();
    let smoothing = match smoothing {
        SmoothingArg::None => Smoothing::None,
        SmoothingArg::AddOne => Smoothing::AddOne,
    };

    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(&c.caption)).collect();
    let results: Vec<Result<BaselineReport, String>> = candidates
        .par_iter()
        .zip(cand_tokens.par_iter())
        .map(|(c, toks)| {
            let g = *index
                .get(c.image_id.as_str())
                .ok_or_else(|| format!("no references for image {:?}", c.image_id))?;
            let refs = &ref_tokens[g];
            let bl = bleu(toks, refs, smoothing).map_err(|e| e.to_string())?;
            let rl = rouge_l(toks, refs).map_err(|e| e.to_string())?;
            let cd = cider_d(toks, refs, &table, &cider_cfg).map_err(|e| e.to_string())?;
            Ok(BaselineReport {
                image_id: c.image_id.clone(),
                bleu1: bl.bleu[0] * 100.0,
                bleu2: bl.bleu[1] * 100.0,
                bleu3: bl.bleu[2] * 100.0,
                bleu4: bl.bleu[3] * 100.0,
                rouge_l: rl * 100.0,
                cider: cd * scale,
            })
        })
        .collect();

    let mut reports = Vec::new();
    let mut pairs: Vec<(&[String], &[Vec<String>])> = Vec::new();
    let mut skipped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => {
                pairs.push((&cand_tokens[i], &ref_tokens[index[candidates[i].image_id.as_str()]]));
                reports.push(rep);
            }
            Err(msg) => {
                skipped += 1;
                eprintln!("skipped candidate {i} (image {}): {msg}", candidates[i].image_id);
            }
        }
    }
    let corpus_bleu = if pairs.is_empty() {
        [0.0; MAX_N]
    } else {
        corpus_bleu(&pairs).map_err(|e| CliError::input(e.to_string()))?.bleu.map(|b| b * 100.0)
    };
    let summary = BaselineSummary {
        scored: reports.len(),
        skipped,
        corpus_bleu,
        mean_rouge_l: stable_mean(&reports.iter().map(|r| r.rouge_l).collect::<Vec<_>>()),
        mean_cider: stable_mean(&reports.iter().map(|r| r.cider).collect::<Vec<_>>()),
    };

    emit(a.out.as_deref(), |w| match format {
        BaselineFormat::Json => {
            #[derive(Serialize)]
            #[serde(tag = "type", rename_all = "lowercase")]
            enum Line<'a> {
                Report(&'a BaselineReport),
                Summary(&'a BaselineSummary),
            }
            for line in reports.iter().map(Line::Report).chain(std::iter::once(Line::Summary(&summary))) {
                serde_json::to_writer(&mut *w, &line)?;
                writeln!(w)?;
            }
            Ok(())
        }
        BaselineFormat::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["item_id", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"])?;
            for r in &reports {
                let values = [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.cider].map(|v| v.to_string());
                csv.write_record(std::iter::once(r.image_id.clone()).chain(values))?;
            }
            csv.flush()
        }
    })?;

    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Settings {
            format: String,
            smoothing: String,
            cider_scale: f64,
            cider_sigma: f64,
        }
        let settings = Settings {
            format: format_name(format),
            smoothing: format_name(match smoothing {
                Smoothing::None => SmoothingArg::None,
                Smoothing::AddOne => SmoothingArg::AddOne,
            }),
            cider_scale: scale,
            cider_sigma: cider_cfg.sigma,
        };
        let mut argv = vec!["baselines".to_string()];
        path_arg(&mut argv, "candidates", &a.candidates);
        path_arg(&mut argv, "references", &a.references);
        arg(&mut argv, "format", &settings.format);
        arg(&mut argv, "smoothing", &settings.smoothing);
        arg(&mut argv, "cider-scale", scale);
        path_arg(&mut argv, "out", out);
        if let Some(p) = &a.df_cache {
            path_arg(&mut argv, "df-cache", p);
        }
        let mut m = RunManifest::new("baselines", settings);
        m.args = argv;
        m.input("candidates", &a.candidates)?;
        m.input("references", &a.references)?;
        m.output(out)?;
        m.write(&manifest_path(out))?;
    }
    Ok(if skipped == 0 { Exit::Success } else { Exit::Partial })
}

/// Formats a correlation ×100; undefined cells become `NA`.
fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| (v * 100.0).to_string())
}

pub fn correlate_cmd(a: &CorrelateArgs) -> Result<Exit, CliError> {
    let against = a.against.unwrap_or(Against::All);
    let table = ScoreTable::load(&a.scores)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut exit = Exit::Success;
    match against {
        Against::Human => {
            let human = table
                .column("human")
                .ok_or_else(|| CliError::input(format!("{}: no `human` column", a.scores.display())))?;
            let path = a.out_dir.join("against_human.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::input(e.to_string()))?;
            let write_err = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
            w.write_record(["metric", "kendall", "spearman", "pearson", "n"]).map_err(write_err)?;
            for (name, col) in table.metrics() {
                if name == "human" {
                    continue;
                }
                let row = match correlate(col, human) {
                    Ok(r) => [
                        cell(Some(r.kendall_tau)),
                        cell(Some(r.spearman_rho)),
                        cell(Some(r.pearson_r)),
                    ],
                    Err(_) => {
                        let cells = Statistic::ALL.map(|s| cell(s.compute(col, human).ok()));
                        eprintln!("warning: some statistics are undefined for {name} against human");
                        exit = Exit::Partial;
                        cells
                    }
                };
                w.write_record([name, &row[0], &row[1], &row[2], &table.len().to_string()])
                    .map_err(write_err)?;
            }
            w.flush().map_err(|e| io_error(&path, e))?;
            outputs.push(path);
        }
        Against::All => {
            let names: Vec<&str> = table.metrics().map(|(n, _)| n).collect();
            let columns: Vec<Vec<f64>> = table.metrics().map(|(_, c)| c.to_vec()).collect();
            for stat in Statistic::ALL {
                let m = correlation_matrix(&columns, stat).map_err(|e| CliError::input(e.to_string()))?;
                if m.cells.iter().flatten().any(Option::is_none) {
                    eprintln!("warning: undefined {stat} cells written as NA");
                    exit = Exit::Partial;
                }
                let path = a.out_dir.join(format!("{stat}.csv"));
                let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::input(e.to_string()))?;
                let write_err = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
                w.write_record(std::iter::once("metric").chain(names.iter().copied()))
                    .map_err(write_err)?;
                for (i, name) in names.iter().enumerate() {
                    let row: Vec<String> = (0..names.len()).map(|j| cell(m.get(i, j))).collect();
                    w.write_record(std::iter::once(name.to_string()).chain(row)).map_err(write_err)?;
                }
                w.flush().map_err(|e| io_error(&path, e))?;
                outputs.push(path);
            }
        }
    }

    #[derive(Serialize)]
    struct Settings {
        against: String,
    }
    let settings = Settings {
        against: format_name(against),
    };
    let mut argv = vec!["correlate".to_string()];
    path_arg(&mut argv, "scores", &a.scores);
    arg(&mut argv, "against", &settings.against);
    path_arg(&mut argv, "out-dir", &a.out_dir);
    let mut m = RunManifest::new("correlate", settings);
    m.args = argv;
    m.input("scores", &a.scores)?;
    for p in &outputs {
        m.output(p)?;
    }
    m.write(&a.out_dir.join("manifest.json"))?;
    Ok(exit)
}
