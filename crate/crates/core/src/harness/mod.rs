//! Experiment plumbing: synthetic corpora, configuration, training,
//! checkpoints and emission-delay reports.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod delay;
pub mod optim;
pub mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ExperimentConfig, ModelSpec, PlanName, TrainConfig};
pub use corpus::{generate_corpus, load_corpus, save_corpus, Corpus, TaskSpec, Utterance};
pub use delay::{measure_emission_delay, DelayReport, GroundTruthAlignment, Recognition};
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use train::{edit_distance, evaluate, EpochMetrics, EvalReport, Phase, Trainer};

use crate::decoding::{DecodeResult, UniformLm};
use crate::Result;

/// Delay report over decoded utterances of a synthetic corpus.
pub fn corpus_delays(corpus: &Corpus, results: &[DecodeResult], frame_ms: f64) -> Result<DelayReport> {
    let items = corpus
        .utterances
        .iter()
        .zip(results)
        .map(|(u, r)| {
            let truth = GroundTruthAlignment::from_symbols(&u.id, &u.labels, &u.word_ends)?;
            let rec = Recognition {
                labels: r.labels().to_vec(),
                triggers: r.triggers().to_vec(),
            };
            Ok((rec, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    measure_emission_delay(&items, 4.0 * frame_ms, frame_ms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub metrics: Vec<EpochMetrics>,
    pub eval: EvalReport,
    pub delays: DelayReport,
}

/// Generates the corpora, pre-trains, fine-tunes with triggered attention,
/// decodes the test set and writes everything under `out`:
/// `metrics.jsonl`, `checkpoint/`, `eval.json`, `delays.{csv,json,dat}`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let train_set = generate_corpus(&cfg.task, cfg.corpus.train, 0)?;
    let test_set = generate_corpus(&cfg.task, cfg.corpus.test, 1)?;
    let mut trainer = Trainer::new(cfg.model_config()?, train_set.vocabulary.clone(), cfg.train.clone())?;
    let mut metrics = Vec::new();
    let mut log = |m: &EpochMetrics| metrics.push(m.clone());
    trainer.pretrain(&train_set, cfg.train.epochs, &mut log)?;
    trainer.finetune(&train_set, cfg.train.finetune_epochs, cfg.train.finetune_lr, &mut log)?;
    save_checkpoint(&out.join("checkpoint"), &trainer.model, &trainer.store, &trainer.vocabulary, trainer.step)?;
    let lm = UniformLm { vocab: cfg.task.vocab };
    let (eval, results) = evaluate(&trainer.model, &trainer.store, &test_set, &lm, cfg.decoding)?;
    let delays = corpus_delays(&test_set, &results, cfg.frame_ms)?;
    write_metrics(&out.join("metrics.jsonl"), &metrics)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&eval)? + "\n")?;
    write_delay_report(out, &delays)?;
    Ok(ExperimentSummary { metrics, eval, delays })
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_delay_report(dir: &Path, r: &DelayReport) -> Result<()> {
    fs::write(dir.join("delays.csv"), r.to_csv())?;
    fs::write(dir.join("delays.json"), serde_json::to_string_pretty(r)? + "\n")?;
    fs::write(dir.join("delays.dat"), r.whisker_table("delay"))?;
    Ok(())
}
