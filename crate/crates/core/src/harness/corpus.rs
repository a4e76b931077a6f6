//! Synthetic speech-like corpora: every symbol owns a short feature template,
//! utterances concatenate templates with Gaussian noise and silence padding.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::{normal_vec, RngStream};
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    /// Symbol count `V`.
    pub vocab: usize,
    /// Feature channels per frame.
    pub input_dim: usize,
    pub min_template: usize,
    pub max_template: usize,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Symbols per utterance, inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    /// Silence frames before and after the symbols.
    pub pad: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: 12,
            input_dim: 16,
            min_template: 8,
            max_template: 12,
            sigma: 0.1,
            min_len: 2,
            max_len: 6,
            pad: 4,
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.input_dim == 0 {
            return Err(Error::Config("corpus needs at least one symbol and one channel".into()));
        }
        if self.min_template == 0 || self.min_template > self.max_template {
            return Err(Error::Config(format!(
                "template length range {}..={} is empty",
                self.min_template, self.max_template
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("utterance length range {}..={} must be non-empty and positive", self.min_len, self.max_len)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise level {}", self.sigma)));
        }
        Ok(())
    }

    /// Display names of labels `1..=V`.
    pub fn vocabulary(&self) -> Vec<String> {
        (0..self.vocab)
            .map(|i| if self.vocab <= 26 { ((b'a' + i as u8) as char).to_string() } else { format!("w{}", i + 1) })
            .collect()
    }

    /// One template per symbol (`templates[s - 1]` for label `s`): a random
    /// offset plus a random linear sweep across the template's frames.
    pub fn templates(&self) -> Result<Vec<Tensor>> {
        self.validate()?;
        let base = RngStream::new(self.seed).derive(1);
        let out: Vec<Tensor> = (0..self.vocab)
            .map(|s| {
                let mut g = RngStream::with_counter(base.seed, s as u64).generator();
                let len = g.gen_range(self.min_template..=self.max_template);
                let a = normal_vec(&mut g, self.input_dim, 1.0);
                let b = normal_vec(&mut g, self.input_dim, 1.0);
                let mut data = Vec::with_capacity(len * self.input_dim);
                for k in 0..len {
                    let r = if len > 1 { k as f64 / (len - 1) as f64 - 0.5 } else { 0.0 };
                    data.extend(a.iter().zip(&b).map(|(a, b)| a + 2.0 * r * b));
                }
                Tensor::matrix(len, self.input_dim, data)
            })
            .collect::<Result<_>>()?;
        for i in 0..out.len() {
            for j in 0..i {
                let d = template_distance(&out[i], &out[j]);
                if d <= 4.0 * self.sigma {
                    return Err(Error::Config(format!(
                        "templates {} and {} are {d:.3} apart, need more than {:.3}",
                        j + 1,
                        i + 1,
                        4.0 * self.sigma
                    )));
                }
            }
        }
        Ok(out)
    }
}

/// Root-mean-square frame distance over the frames both templates share.
pub fn template_distance(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows().min(b.rows());
    let ss: f64 = (0..n)
        .flat_map(|t| a.row(t).iter().zip(b.row(t)).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    (ss / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `frames x input_dim`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Input frame on which each symbol's template ends.
    pub word_ends: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocabulary: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn text(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&l| self.vocabulary.get(l.wrapping_sub(1)).map(String::as_str).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `count` utterances drawn from stream `split` of the task (use different
/// splits for training and test data). Deterministic in the task seed.
pub fn generate_corpus(spec: &TaskSpec, count: usize, split: u64) -> Result<Corpus> {
    let templates = spec.templates()?;
    let base = RngStream::new(spec.seed).derive(2 + split);
    let d = spec.input_dim;
    let utterances = (0..count)
        .map(|i| {
            let mut g = RngStream::with_counter(base.seed, i as u64).generator();
            let n = g.gen_range(spec.min_len..=spec.max_len);
            let labels: Vec<usize> = (0..n).map(|_| g.gen_range(1..=spec.vocab)).collect();
            let mut data = vec![0.0; spec.pad * d];
            let mut word_ends = Vec::with_capacity(n);
            for &l in &labels {
                data.extend_from_slice(templates[l - 1].data());
                word_ends.push(data.len() / d - 1);
            }
            data.extend(std::iter::repeat_n(0.0, spec.pad * d));
            if spec.sigma > 0.0 {
                let noise = normal_vec(&mut g, data.len(), spec.sigma);
                for (x, e) in data.iter_mut().zip(noise) {
                    *x += e;
                }
            }
            Ok(Utterance {
                id: format!("utt{split}-{i:05}"),
                features: Tensor::matrix(data.len() / d, d, data)?,
                labels,
                word_ends,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus {
        vocabulary: spec.vocabulary(),
        utterances,
    })
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";

/// Writes `FEAT`, a `u32` rank, `u64` dimensions and the values, all
/// little-endian.
pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.shape().len() + 8 * t.len());
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if buf.len() < 8 || &buf[..4] != FEAT_MAGIC {
        return Err(bad("missing FEAT header"));
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let body = 8 + 8 * rank;
    if buf.len() < body {
        return Err(bad("truncated shape"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(buf[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if buf.len() != body + 8 * n {
        return Err(bad(&format!("{} value bytes for shape {shape:?}", buf.len() - body)));
    }
    let data = buf[body..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature file, relative to the manifest's directory.
    pub features: String,
    pub transcript: Vec<usize>,
    #[serde(default)]
    pub text: String,
    /// Ground-truth end frame of every word.
    #[serde(default)]
    pub word_ends: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocabulary: Vec<String>,
    pub utterances: Vec<ManifestEntry>,
}

/// Writes `<dir>/<name>.json` and one feature file per utterance under
/// `<dir>/<name>/`.
pub fn save_corpus(dir: &Path, name: &str, corpus: &Corpus) -> Result<PathBuf> {
    let feat_dir = dir.join(name);
    fs::create_dir_all(&feat_dir)?;
    let mut entries = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let rel = format!("{name}/{}.feat", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            features: rel,
            transcript: u.labels.clone(),
            text: corpus.text(&u.labels),
            word_ends: u.word_ends.clone(),
        });
    }
    let manifest = Manifest {
        vocabulary: corpus.vocabulary.clone(),
        utterances: entries,
    };
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let utterances = m
        .utterances
        .into_iter()
        .map(|e| {
            let features = read_features(&dir.join(&e.features))?;
            if features.shape().len() != 2 {
                return Err(Error::Format(format!("{}: features must be a matrix", e.id)));
            }
            if e.transcript.iter().any(|&l| l == 0 || l > m.vocabulary.len()) {
                return Err(Error::Format(format!("{}: label outside the vocabulary", e.id)));
            }
            Ok(Utterance {
                id: e.id,
                features,
                labels: e.transcript,
                word_ends: e.word_ends,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus {
        vocabulary: m.vocabulary,
        utterances,
    })
}
