use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ctc::{ctc_log_likelihood, ctc_prefix_beam_search, min_frames, CtcOnly};
use crate::decoder::{step_bounds, teacher_forcing, DecoderConfig};
use crate::encoder::{Architecture, ConvWindow, EncoderConfig};
use crate::model::ModelConfig;
use crate::numerics::functional::log_sum_exp;
use crate::numerics::graph::Graph;
use crate::numerics::layers::Ctx;
use crate::numerics::params::ParamId;
use crate::numerics::rng::{normal_vec, RngStream};
use crate::streaming::{ChunkSpec, LookaheadSpec, PlanKind};

fn random_dist(rng: &mut ChaCha8Rng, t: usize, v: usize) -> CtcDistribution {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let logits: Vec<f64> = (0..=v).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let z = log_sum_exp(&logits);
            logits.iter().map(|l| l - z).collect()
        })
        .collect();
    CtcDistribution::new(Tensor::from_rows(&rows).unwrap()).unwrap()
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::matrix(rows, cols, normal_vec(&mut RngStream::new(seed).generator(), rows * cols, 1.0)).unwrap()
}

fn randomise(store: &mut ParamStore, seed: u64, std: f64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        let shape = p.value.shape().to_vec();
        let mut v = normal_vec(&mut RngStream::with_counter(seed, id.0 as u64).generator(), p.value.len(), std);
        if p.name.ends_with("running_var") {
            v.iter_mut().for_each(|x| *x = 0.5 + x.abs());
        }
        store.set_value(id, Tensor::new(shape, v).unwrap()).unwrap();
    }
}

fn decoder(vocab: usize, eps_dec: usize, seed: u64) -> (ParamStore, Decoder) {
    let cfg = DecoderConfig {
        vocab,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        blocks: 2,
        eps_dec,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, "dec", cfg, RngStream::new(seed)).unwrap();
    randomise(&mut store, seed + 1, 0.6);
    (store, dec)
}

fn all_sequences(max_len: usize, v: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|p: &Vec<usize>| {
                (1..=v).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Joint score of `y` when every label is appended at the earliest frame
/// CTC allows, which is what an unpruned search does.
fn oracle_score(
    dist: &CtcDistribution,
    x_e: &Tensor,
    dec: &Decoder,
    store: &ParamStore,
    lm: &dyn LanguageModel,
    cfg: &DecodingConfig,
    y: &[usize],
) -> (f64, Vec<usize>) {
    let t = dist.frames();
    let triggers: Vec<usize> = (1..=y.len()).map(|l| min_frames(&y[..l]) - 1).collect();
    let ctc = ctc_log_likelihood(dist, y).unwrap();
    let (inputs, targets) = teacher_forcing(y);
    let mut g = Graph::new();
    let x = g.input(x_e.clone());
    let nu = step_bounds(&triggers, dec.config.eps_dec, t);
    let lp = dec.forward(&mut g, store, &inputs, x, Some(&nu), &mut Ctx::eval()).unwrap();
    let d: f64 = targets.iter().enumerate().map(|(i, &k)| g.value(lp).at(i, k)).sum();
    let l = lm.prefix_score(y) + lm.log_prob(y, 0);
    let score = cfg.ctc_weight * ctc + (1.0 - cfg.ctc_weight) * d + cfg.lm_weight * l + cfg.bonus * y.len() as f64;
    (score, triggers)
}

fn joint_cfg() -> DecodingConfig {
    DecodingConfig {
        ctc_lm_weight: 0.3,
        ctc_weight: 0.4,
        lm_weight: 0.5,
        theta1: 8.0,
        theta2: 4.0,
        bonus: 0.7,
        prune: 20,
        beam: 5,
    }
}

#[test]
fn exhaustive_decode_finds_the_joint_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..40 {
        let t = rng.gen_range(1..=5);
        let v = rng.gen_range(1..=3);
        let dist = random_dist(&mut rng, t, v);
        let x_e = rand_tensor(t, 8, case);
        let (store, dec) = decoder(v, rng.gen_range(0..3), case + 50);
        let corpus = [vec![1], vec![v, 1, v], vec![1, 1]];
        let lm = NgramLm::train(2, v, 0.5, corpus.iter().map(|s| s.as_slice())).unwrap();
        let cfg = joint_cfg().exhaustive(1000);
        let out = ta_decode(&dist, &x_e, &dec, &store, &lm, cfg).unwrap();
        let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
        for y in all_sequences(t, v) {
            if min_frames(&y) > t {
                continue;
            }
            let (s, tr) = oracle_score(&dist, &x_e, &dec, &store, &lm, &cfg, &y);
            if best.as_ref().is_none_or(|b| s > b.0) {
                best = Some((s, y, tr));
            }
        }
        let (score, labels, triggers) = best.unwrap();
        assert_eq!(out.labels(), labels.as_slice(), "case {case}");
        assert_eq!(out.triggers(), triggers.as_slice());
        assert!((out.nbest[0].score - score).abs() < 1e-9);
    }
}

#[test]
fn ctc_only_weights_reduce_to_prefix_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..20 {
        let t = rng.gen_range(1..12);
        let v = rng.gen_range(1..5);
        let dist = random_dist(&mut rng, t, v);
        let x_e = rand_tensor(t, 8, case);
        let (store, dec) = decoder(v, 1, case);
        let cfg = DecodingConfig {
            ctc_lm_weight: 0.0,
            ctc_weight: 1.0,
            lm_weight: 0.0,
            bonus: 0.0,
            ..DecodingConfig::default()
        };
        let out = ta_decode(&dist, &x_e, &dec, &store, &UniformLm { vocab: v }, cfg).unwrap();
        let ctc = ctc_prefix_beam_search(&dist, cfg.search(), CtcOnly).unwrap();
        assert_eq!(out.labels(), ctc[0].prefix.as_slice());
        assert_eq!(out.triggers(), ctc[0].triggers.as_slice());
        assert_eq!(out.nbest[0].score, ctc[0].score);
    }
}

#[test]
fn uniform_lm_is_a_per_label_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10 {
        let t = rng.gen_range(2..6);
        let v = 3;
        let dist = random_dist(&mut rng, t, v);
        let x_e = rand_tensor(t, 8, case);
        let (store, dec) = decoder(v, 1, case);
        let lm = UniformLm { vocab: v };
        let base = DecodingConfig {
            ctc_lm_weight: 0.0,
            lm_weight: 0.0,
            bonus: 0.2,
            ..DecodingConfig::default()
        }
        .exhaustive(400);
        let alpha = 0.8;
        let shifted = DecodingConfig {
            lm_weight: alpha,
            bonus: 0.2 + alpha * 4f64.ln(),
            ..base
        };
        let a = ta_decode(&dist, &x_e, &dec, &store, &lm, base).unwrap();
        let b = ta_decode(&dist, &x_e, &dec, &store, &lm, shifted).unwrap();
        assert_eq!(a.nbest.len(), b.nbest.len());
        for (x, y) in a.nbest.iter().zip(&b.nbest) {
            assert_eq!(x.labels, y.labels);
            // only the end-of-sentence LM term remains
            assert!((y.score - x.score + alpha * 4f64.ln()).abs() < 1e-9, "{} {}", x.score, y.score);
        }
    }
}

#[test]
fn reported_scores_decompose_and_triggers_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = joint_cfg();
    for case in 0..10 {
        let t = rng.gen_range(3..14);
        let dist = random_dist(&mut rng, t, 4);
        let x_e = rand_tensor(t, 8, case);
        let (store, dec) = decoder(4, 2, case);
        let corpus = [vec![1, 2, 3], vec![4, 4]];
        let lm = NgramLm::train(3, 4, 0.1, corpus.iter().map(|s| s.as_slice())).unwrap();
        let out = ta_decode(&dist, &x_e, &dec, &store, &lm, cfg).unwrap();
        let again = ta_decode(&dist, &x_e, &dec, &store, &lm, cfg).unwrap();
        assert_eq!(out, again);
        for h in &out.nbest {
            let total = cfg.ctc_weight * h.ctc + (1.0 - cfg.ctc_weight) * h.dec + cfg.lm_weight * h.lm + cfg.bonus * h.labels.len() as f64;
            assert!((total - h.score).abs() < 1e-9);
            assert!(h.triggers.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(h.triggers.len(), h.labels.len());
        }
        assert!(out.nbest.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[test]
fn language_models_normalise() {
    let corpus = [vec![1, 2, 3], vec![2, 2], vec![3]];
    let lm = NgramLm::train(2, 3, 0.5, corpus.iter().map(|s| s.as_slice())).unwrap();
    for ctx in [vec![], vec![1], vec![2, 2], vec![3, 1]] {
        let s: f64 = lm.log_probs(&ctx).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    // counts after <s>: 1, 2, 3 once each
    let p = lm.log_prob(&[], 2).exp();
    assert!((p - 1.5 / (3.0 + 0.5 * 4.0)).abs() < 1e-12);
    let u = UniformLm { vocab: 3 };
    assert!((u.log_probs(&[1]).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(NgramLm::train(2, 3, 0.5, [[4usize].as_slice()]).is_err());
}

#[test]
fn config_validation() {
    assert!(DecodingConfig::default().validate().is_ok());
    assert!(DecodingConfig { ctc_weight: 1.5, ..Default::default() }.validate().is_err());
    assert!(DecodingConfig { prune: 2, beam: 3, ..Default::default() }.validate().is_err());
    assert!(DecodingConfig { theta1: 1.0, theta2: 2.0, ..Default::default() }.validate().is_err());
}

// ---- streaming ----

fn model(arch: Architecture, plan: PlanKind, seed: u64) -> (ParamStore, AsrModel) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            architecture: arch,
            input_dim: 5,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            blocks: 2,
            plan,
            conv_window: ConvWindow::default_for(&plan),
            dropout: 0.0,
        },
        decoder: DecoderConfig {
            vocab: 3,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            blocks: 2,
            eps_dec: 2,
            dropout: 0.0,
        },
    };
    let mut store = ParamStore::new();
    let m = AsrModel::new(&mut store, cfg, RngStream::new(seed)).unwrap();
    randomise(&mut store, seed + 3, 0.5);
    (store, m)
}

fn plans() -> Vec<(Architecture, PlanKind)> {
    vec![
        (Architecture::Transformer, PlanKind::Dcn(LookaheadSpec::new(2))),
        (Architecture::Conformer, PlanKind::Dcn(LookaheadSpec::new(1))),
        (Architecture::Transformer, PlanKind::Rsa(LookaheadSpec::new(1))),
        (Architecture::Transformer, PlanKind::Csa(ChunkSpec::new(4).unwrap())),
        (Architecture::Conformer, PlanKind::Csa(ChunkSpec::new(2).unwrap())),
    ]
}

#[test]
fn stable_encoder_frames_match_the_full_sequence() {
    for (i, (arch, plan)) in plans().into_iter().enumerate() {
        let (store, m) = model(arch, plan, i as u64);
        let feats = rand_tensor(70, 5, 10 + i as u64);
        let full = m.infer(&store, &feats).unwrap().unwrap();
        for n in [7, 12, 23, 40, 57] {
            let part = m.infer(&store, &feats.slice_rows(0, n)).unwrap().unwrap();
            let stable = plan.stable_frames(2, part.x_e.rows());
            for t in 0..stable {
                assert_eq!(part.x_e.row(t), full.x_e.row(t), "{plan:?} prefix {n} frame {t}");
                assert_eq!(part.ctc.row(t), full.ctc.row(t));
            }
        }
    }
}

#[test]
fn streaming_matches_offline_for_any_split() {
    let lm = UniformLm { vocab: 3 };
    let cfg = joint_cfg();
    for (i, (arch, plan)) in plans().into_iter().enumerate() {
        let (store, m) = model(arch, plan, 20 + i as u64);
        let feats = rand_tensor(45, 5, 30 + i as u64);
        let offline = decode_features(&m, &store, &feats, &lm, cfg).unwrap();
        for split in [0, 6, 7, 19, 30, 45] {
            let mut s = StreamingSession::new(&m, &store, &lm, cfg).unwrap();
            s.push(&feats.slice_rows(0, split)).unwrap();
            s.push(&feats.slice_rows(split, 45)).unwrap();
            assert_eq!(s.finalize().unwrap(), offline, "{plan:?} split {split}");
        }
        let mut s = StreamingSession::new(&m, &store, &lm, cfg).unwrap();
        let mut last = Vec::new();
        for f in 0..45 {
            let p = s.push(&feats.slice_rows(f, f + 1)).unwrap();
            assert!(p.partial.starts_with(&last) || p.partial.len() < last.len());
            last = p.partial;
        }
        assert_eq!(s.finalize().unwrap(), offline);
        assert!(matches!(s.push(&feats.slice_rows(0, 1)), Err(Error::SessionFinalized)));
        assert!(matches!(s.finalize(), Err(Error::SessionFinalized)));
    }
}

#[test]
fn empty_and_short_utterances_decode_to_nothing() {
    let lm = UniformLm { vocab: 3 };
    let (store, m) = model(Architecture::Transformer, PlanKind::Dcn(LookaheadSpec::new(1)), 5);
    let mut s = StreamingSession::new(&m, &store, &lm, DecodingConfig::default()).unwrap();
    assert_eq!(s.finalize().unwrap(), DecodeResult::default());
    let mut s = StreamingSession::new(&m, &store, &lm, DecodingConfig::default()).unwrap();
    s.push(&rand_tensor(6, 5, 1)).unwrap();
    assert!(s.finalize().unwrap().labels().is_empty());
    let out = decode_features(&m, &store, &rand_tensor(3, 5, 1), &lm, DecodingConfig::default()).unwrap();
    assert!(out.nbest.is_empty());
    let (store, full) = model(Architecture::Transformer, PlanKind::Full, 5);
    assert!(StreamingSession::new(&full, &store, &lm, DecodingConfig::default()).is_err());
}
