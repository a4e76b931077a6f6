//! Command-line front end: corpus generation, training, decoding and
//! latency/delay reports.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use streamasr::encoder::Encoder;
use streamasr::decoding::{decode_features, DecodeResult, LanguageModel, NgramLm, StreamingSession, UniformLm};
use streamasr::harness::{
    generate_corpus, load_checkpoint, load_corpus, measure_emission_delay, save_checkpoint, save_corpus, write_delay_report,
    write_metrics, Corpus, EpochMetrics, ExperimentConfig, GroundTruthAlignment, PlanName, Recognition, Trainer,
};
use streamasr::streaming::{compute_latency, decoder_delay_ms, mask_dump_json, mask_dump_text};

#[derive(Parser)]
#[command(name = "streamasr", version, about = "Streaming attention-based speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration (JSON or key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, e.g. --set model.lookahead=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Attention plan: full, rsa, csa or dcn.
    #[arg(long, value_parser = parse_plan)]
    plan: Option<PlanName>,
    /// Look-ahead frames (per layer for RSA, total for DCN).
    #[arg(long)]
    lookahead: Option<usize>,
    /// CSA chunk size in frames.
    #[arg(long)]
    chunk: Option<usize>,
}

impl PlanArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(p) = self.plan {
            cfg.model.plan = p;
        }
        if let Some(l) = self.lookahead {
            cfg.model.lookahead = l;
        }
        if let Some(c) = self.chunk {
            cfg.model.chunk = c;
        }
    }
}

fn parse_plan(s: &str) -> Result<PlanName, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|_| format!("unknown plan {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic train/test corpora (manifests plus feature files).
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-trains a model with the full-sequence decoder objective.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics (defaults to OUT/metrics.jsonl).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tunes a checkpoint with triggered attention at a constant rate.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Decoder look-ahead frames past each trigger.
        #[arg(long)]
        eps_dec: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decodes a manifest to line-delimited JSON.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output file (defaults to standard output).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feed features incrementally and emit partial results.
        #[arg(long)]
        streaming: bool,
        /// Input frames per streaming push.
        #[arg(long, default_value_t = 4)]
        push_frames: usize,
        /// Train an n-gram LM on this manifest's transcripts for shallow fusion.
        #[arg(long)]
        lm_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        lm_order: usize,
    },
    /// Prints the look-ahead latency of an attention plan.
    Latency {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        plan: PlanArgs,
        /// Encoder blocks.
        #[arg(long)]
        layers: Option<usize>,
        /// Encoder frame duration in milliseconds.
        #[arg(long)]
        frame_ms: Option<f64>,
        /// Adds the triggered-attention decoder look-ahead.
        #[arg(long)]
        eps_dec: Option<usize>,
        /// Also composes the masks over this many frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Emission-delay statistics of decoded output against the manifest.
    DelayReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output of `decode`.
        #[arg(long)]
        decoded: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for delays.csv, delays.json and delays.dat.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the attention masks of a plan.
    MaskDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        json: bool,
    },
}

/// One line of `decode` output.
#[derive(Debug, Serialize, Deserialize)]
struct DecodeRecord {
    utterance: String,
    /// Encoder frames consumed.
    frame: usize,
    partial: Vec<usize>,
    triggers: Vec<usize>,
    #[serde(rename = "final")]
    is_final: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

fn final_record(id: &str, r: &DecodeResult, corpus: &Corpus, frames: usize) -> DecodeRecord {
    DecodeRecord {
        utterance: id.to_string(),
        frame: frames,
        partial: r.labels().to_vec(),
        triggers: r.triggers().to_vec(),
        is_final: true,
        text: Some(corpus.text(r.labels())),
        score: r.nbest.first().map(|h| h.score),
    }
}

fn emit(out: &mut dyn Write, rec: &DecodeRecord) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

fn metrics_logger(path: &Path) -> Result<impl FnMut(&EpochMetrics)> {
    fs::write(path, "")?;
    let path = path.to_path_buf();
    let mut all = Vec::new();
    Ok(move |m: &EpochMetrics| {
        all.push(m.clone());
        if let Err(e) = write_metrics(&path, &all) {
            eprintln!("warning: cannot write {}: {e}", path.display());
        }
        eprintln!("{}", serde_json::to_string(m).unwrap_or_default());
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { cfg, out } => {
            let cfg = cfg.load()?;
            fs::create_dir_all(&out)?;
            for (name, count, split) in [("train", cfg.corpus.train, 0), ("test", cfg.corpus.test, 1)] {
                let c = generate_corpus(&cfg.task, count, split)?;
                let p = save_corpus(&out, name, &c)?;
                println!("{} utterances -> {}", c.len(), p.display());
            }
        }
        Command::Train {
            cfg,
            corpus,
            out,
            metrics,
        } => {
            let cfg = cfg.load()?;
            let data = load_corpus(&corpus)?;
            let first = data.utterances.first().context("training corpus is empty")?;
            let model = cfg.model.model_config(first.features.cols(), data.vocabulary.len())?;
            let mut trainer = Trainer::new(model, data.vocabulary.clone(), cfg.train.clone())?;
            fs::create_dir_all(&out)?;
            let mut log = metrics_logger(&metrics.unwrap_or_else(|| out.join("metrics.jsonl")))?;
            trainer.pretrain(&data, cfg.train.epochs, &mut log)?;
            save_checkpoint(&out, &trainer.model, &trainer.store, &trainer.vocabulary, trainer.step)?;
            println!("checkpoint -> {}", out.display());
        }
        Command::Finetune {
            cfg,
            checkpoint,
            corpus,
            out,
            epochs,
            lr,
            eps_dec,
            metrics,
        } => {
            let cfg = cfg.load()?;
            let data = load_corpus(&corpus)?;
            let mut ck = load_checkpoint(&checkpoint)?;
            if let Some(e) = eps_dec {
                ck.model.set_decoder_lookahead(e);
            }
            let mut trainer = Trainer::from_checkpoint(ck, cfg.train.clone())?;
            fs::create_dir_all(&out)?;
            let mut log = metrics_logger(&metrics.unwrap_or_else(|| out.join("metrics.jsonl")))?;
            let lr = lr.unwrap_or(cfg.train.finetune_lr);
            trainer.finetune(&data, epochs.unwrap_or(cfg.train.finetune_epochs), lr, &mut log)?;
            save_checkpoint(&out, &trainer.model, &trainer.store, &trainer.vocabulary, trainer.step)?;
            println!("checkpoint -> {}", out.display());
        }
        Command::Decode {
            cfg,
            checkpoint,
            manifest,
            out,
            streaming,
            push_frames,
            lm_manifest,
            lm_order,
        } => {
            let cfg = cfg.load()?;
            let ck = load_checkpoint(&checkpoint)?;
            let data = load_corpus(&manifest)?;
            let vocab = ck.model.config.vocab();
            let lm: Box<dyn LanguageModel> = match lm_manifest {
                Some(p) => {
                    let text = load_corpus(&p)?;
                    Box::new(NgramLm::train(lm_order, vocab, 0.5, text.utterances.iter().map(|u| u.labels.as_slice()))?)
                }
                None => Box::new(UniformLm { vocab }),
            };
            let mut sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            if push_frames == 0 {
                bail!("--push-frames must be positive");
            }
            for u in &data.utterances {
                if streaming {
                    let mut s = StreamingSession::new(&ck.model, &ck.store, lm.as_ref(), cfg.decoding)?;
                    let mut last: Option<Vec<usize>> = None;
                    for start in (0..u.features.rows()).step_by(push_frames) {
                        let end = (start + push_frames).min(u.features.rows());
                        let p = s.push(&u.features.slice_rows(start, end))?;
                        if last.as_ref() != Some(&p.partial) {
                            emit(
                                &mut sink,
                                &DecodeRecord {
                                    utterance: u.id.clone(),
                                    frame: p.frame,
                                    partial: p.partial.clone(),
                                    triggers: p.triggers,
                                    is_final: false,
                                    text: None,
                                    score: None,
                                },
                            )?;
                            last = Some(p.partial);
                        }
                    }
                    let r = s.finalize()?;
                    emit(&mut sink, &final_record(&u.id, &r, &data, Encoder::output_frames(u.features.rows())))?;
                } else {
                    let r = decode_features(&ck.model, &ck.store, &u.features, lm.as_ref(), cfg.decoding)?;
                    emit(&mut sink, &final_record(&u.id, &r, &data, Encoder::output_frames(u.features.rows())))?;
                }
            }
            sink.flush()?;
        }
        Command::Latency {
            cfg,
            plan,
            layers,
            frame_ms,
            eps_dec,
            frames,
            json,
        } => {
            let mut cfg = cfg.load()?;
            plan.apply(&mut cfg);
            let kind = cfg.model.plan_kind()?;
            let frame_ms = frame_ms.unwrap_or(cfg.encoder_frame_ms());
            let report = compute_latency(&kind, layers.unwrap_or(cfg.model.encoder_blocks), frame_ms, frames)?;
            let decoder = eps_dec.map(|e| decoder_delay_ms(e, frame_ms));
            if json {
                let mut v = serde_json::to_value(&report)?;
                v["decoder_ms"] = serde_json::json!(decoder);
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("{}", report.summary());
                if let Some(d) = decoder {
                    println!("decoder look-ahead {d} ms");
                    if let Some(e) = report.total_ms {
                        println!("total {} ms", e + d);
                    }
                }
            }
        }
        Command::DelayReport {
            cfg,
            decoded,
            manifest,
            out,
        } => {
            let cfg = cfg.load()?;
            let data = load_corpus(&manifest)?;
            let text = fs::read_to_string(&decoded)?;
            let mut finals = std::collections::HashMap::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: DecodeRecord =
                    serde_json::from_str(line).with_context(|| format!("{}:{}", decoded.display(), i + 1))?;
                if r.is_final {
                    finals.insert(r.utterance.clone(), r);
                }
            }
            let mut items = Vec::new();
            for u in &data.utterances {
                let Some(r) = finals.remove(&u.id) else { continue };
                let truth = GroundTruthAlignment::from_symbols(&u.id, &u.labels, &u.word_ends)?;
                items.push((
                    Recognition {
                        labels: r.partial,
                        triggers: r.triggers,
                    },
                    truth,
                ));
            }
            let report = measure_emission_delay(&items, cfg.encoder_frame_ms(), cfg.frame_ms)?;
            fs::create_dir_all(&out)?;
            write_delay_report(&out, &report)?;
            match &report.stats {
                Some(b) => println!(
                    "{} words from {} correct utterances ({} skipped): median {} ms, Q1 {} ms, Q3 {} ms, whiskers [{}, {}] ms",
                    report.count, report.utterances_used, report.utterances_skipped, b.median, b.q1, b.q3, b.whisker_low, b.whisker_high
                ),
                None => println!("no correctly recognised utterances ({} skipped)", report.utterances_skipped),
            }
        }
        Command::MaskDump { cfg, plan, frames, json } => {
            let mut cfg = cfg.load()?;
            plan.apply(&mut cfg);
            let p = cfg.model.plan_kind()?.build(frames)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&mask_dump_json(&p))?);
            } else {
                print!("{}", mask_dump_text(&p));
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
