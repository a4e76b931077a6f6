//! Emission-delay analysis: how long after a word's true end its last label
//! is triggered, over correctly recognised utterances only.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordTiming {
    /// Word ID.
    pub word: usize,
    pub labels: Vec<usize>,
    /// True end time in input frames.
    pub end_frame: usize,
}

/// Word-level ground truth of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAlignment {
    pub utterance: String,
    pub words: Vec<WordTiming>,
}

impl GroundTruthAlignment {
    /// One single-label word per symbol, as produced by the synthetic corpus.
    pub fn from_symbols(utterance: &str, labels: &[usize], word_ends: &[usize]) -> Result<Self> {
        if labels.len() != word_ends.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels with {} word end times",
                labels.len(),
                word_ends.len()
            )));
        }
        let a = Self {
            utterance: utterance.to_string(),
            words: labels
                .iter()
                .zip(word_ends)
                .map(|(&l, &e)| WordTiming {
                    word: l,
                    labels: vec![l],
                    end_frame: e,
                })
                .collect(),
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.words.windows(2).any(|w| w[1].end_frame < w[0].end_frame) {
            return Err(Error::InvalidArgument(format!("{}: word end times decrease", self.utterance)));
        }
        if self.words.iter().any(|w| w.labels.is_empty()) {
            return Err(Error::InvalidArgument(format!("{}: word without labels", self.utterance)));
        }
        Ok(())
    }

    pub fn transcript(&self) -> Vec<usize> {
        self.words.iter().flat_map(|w| w.labels.iter().copied()).collect()
    }
}

/// Recognised labels and the encoder frame that triggered each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub labels: Vec<usize>,
    pub triggers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDelay {
    pub utterance: String,
    pub word: usize,
    pub delay_ms: f64,
}

/// Box-plot statistics; whiskers reach the most extreme delays within
/// 1.5 IQR of the quartiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub count: usize,
    pub utterances_used: usize,
    pub utterances_skipped: usize,
    pub delays: Vec<WordDelay>,
    /// `None` when no word qualified.
    pub stats: Option<BoxStats>,
}

/// Quantile of sorted data with linear interpolation between order
/// statistics at position `(n - 1) * p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s.iter().copied().filter(|v| (lo..=hi).contains(v)).collect();
    Some(BoxStats {
        min: s[0],
        q1,
        median,
        q3,
        max: s[s.len() - 1],
        mean: s.iter().sum::<f64>() / s.len() as f64,
        iqr,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: s.into_iter().filter(|v| !(lo..=hi).contains(v)).collect(),
    })
}

/// Delay of every word in utterances whose transcript is recognised
/// exactly: trigger time of the word's last label minus its true end time.
pub fn measure_emission_delay(
    items: &[(Recognition, GroundTruthAlignment)],
    encoder_frame_ms: f64,
    input_frame_ms: f64,
) -> Result<DelayReport> {
    let mut delays = Vec::new();
    let mut used = 0;
    for (rec, truth) in items {
        truth.validate()?;
        if rec.triggers.len() != rec.labels.len() {
            return Err(Error::InvalidArgument(format!("{}: labels and triggers differ in length", truth.utterance)));
        }
        if rec.labels != truth.transcript() {
            continue;
        }
        used += 1;
        let mut last = 0;
        for w in &truth.words {
            last += w.labels.len();
            let predicted = rec.triggers[last - 1] as f64 * encoder_frame_ms;
            delays.push(WordDelay {
                utterance: truth.utterance.clone(),
                word: w.word,
                delay_ms: predicted - w.end_frame as f64 * input_frame_ms,
            });
        }
    }
    let values: Vec<f64> = delays.iter().map(|d| d.delay_ms).collect();
    Ok(DelayReport {
        count: delays.len(),
        utterances_used: used,
        utterances_skipped: items.len() - used,
        stats: box_stats(&values),
        delays,
    })
}

impl DelayReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("utterance,word,delay_ms\n");
        for d in &self.delays {
            s.push_str(&format!("{},{},{}\n", d.utterance, d.word, d.delay_ms));
        }
        s
    }

    /// One gnuplot `candlesticks` row: `x q1 whisker_low whisker_high q3 median`.
    pub fn whisker_table(&self, label: &str) -> String {
        let mut s = String::from("# label x q1 whisker_low whisker_high q3 median\n");
        if let Some(b) = &self.stats {
            s.push_str(&format!(
                "{label} 1 {} {} {} {} {}\n",
                b.q1, b.whisker_low, b.whisker_high, b.q3, b.median
            ));
        }
        s
    }
}
