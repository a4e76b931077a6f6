use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::graph::gradcheck::max_rel_error;

fn random_dist(rng: &mut ChaCha8Rng, t: usize, v: usize, sharp: f64) -> CtcDistribution {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let logits: Vec<f64> = (0..=v).map(|_| rng.gen_range(-sharp..sharp)).collect();
            let z = log_sum_exp(&logits);
            logits.iter().map(|l| l - z).collect()
        })
        .collect();
    CtcDistribution::new(Tensor::from_rows(&rows).unwrap()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize, v: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(1..=v)).collect()
}

/// Every symbol sequence of length `t` over `0..=v`.
fn all_paths(t: usize, v: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..=v).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    out
}

fn path_score(dist: &CtcDistribution, path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(t, &s)| dist.row(t)[s]).sum()
}

/// Independent collapse: drop frames equal to their predecessor, then blanks.
fn squash(path: &[usize]) -> Vec<usize> {
    let dedup: Vec<usize> = path
        .iter()
        .enumerate()
        .filter(|&(t, &s)| t == 0 || path[t - 1] != s)
        .map(|(_, &s)| s)
        .collect();
    dedup.into_iter().filter(|&s| s != 0).collect()
}

fn enumerated_likelihood(dist: &CtcDistribution, y: &[usize]) -> f64 {
    all_paths(dist.frames(), dist.labels())
        .iter()
        .filter(|p| squash(p) == y)
        .map(|p| path_score(dist, p).exp())
        .sum()
}

/// Progress through the blank-interleaved target after each frame; a larger
/// value at an earlier frame means earlier emission.
fn progress(path: &[usize]) -> Vec<usize> {
    (0..path.len())
        .map(|t| {
            let k = squash(&path[..=t]).len();
            if path[t] == 0 {
                2 * k
            } else {
                2 * k - 1
            }
        })
        .collect()
}

/// Exhaustive Viterbi oracle with leftmost-emission tie-break.
fn enumerated_alignment(dist: &CtcDistribution, y: &[usize]) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in all_paths(dist.frames(), dist.labels()) {
        if squash(&p) != y {
            continue;
        }
        let s = path_score(dist, &p);
        best = match best {
            None => Some((p, s)),
            Some((bp, bs)) => {
                if s > bs + 1e-12 || ((s - bs).abs() <= 1e-12 && progress(&p) > progress(&bp)) {
                    Some((p, s))
                } else {
                    Some((bp, bs))
                }
            }
        };
    }
    best.unwrap()
}

/// Probability mass of every prefix after all frames, split by whether the
/// path ends in blank.
fn enumerated_prefixes(dist: &CtcDistribution) -> BTreeMap<Vec<usize>, (f64, f64)> {
    let mut out: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    for p in all_paths(dist.frames(), dist.labels()) {
        let e = out.entry(squash(&p)).or_insert((0.0, 0.0));
        let pr = path_score(dist, &p).exp();
        if p.last() == Some(&0) {
            e.0 += pr;
        } else {
            e.1 += pr;
        }
    }
    out
}

#[test]
fn single_frame_likelihood_is_the_label_probability() {
    let d = CtcDistribution::from_probs(&[vec![0.2, 0.5, 0.3]]).unwrap();
    assert_eq!(ctc_log_likelihood(&d, &[1]).unwrap(), 0.5f64.ln());
    assert_eq!(ctc_log_likelihood(&d, &[2]).unwrap(), 0.3f64.ln());
}

#[test]
fn two_frame_likelihood_sums_three_paths() {
    let d = CtcDistribution::from_probs(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
    // a.a, a.blank, blank.a
    let expect = 0.5 * 0.1 + 0.5 * 0.6 + 0.2 * 0.1;
    let got = ctc_log_likelihood(&d, &[1]).unwrap().exp();
    assert!((got - expect).abs() < 1e-15);
    assert!((got - enumerated_likelihood(&d, &[1])).abs() < 1e-15);
}

#[test]
fn repeated_label_needs_a_separating_blank() {
    let d = CtcDistribution::from_probs(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.3, 0.3, 0.4]]).unwrap();
    let ll = ctc_log_likelihood(&d, &[1, 1]).unwrap();
    let expect = 0.5f64.ln() + 0.6f64.ln() + 0.3f64.ln();
    assert!((ll - expect).abs() < 1e-14);
    let a = ctc_forced_align(&d, &[1, 1]).unwrap();
    assert_eq!(a.path, vec![1, 0, 1]);
    assert_eq!(a.triggers, vec![0, 2]);
}

#[test]
fn infeasible_targets_are_reported() {
    let d = CtcDistribution::from_probs(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    assert!(matches!(
        ctc_log_likelihood(&d, &[1, 1]),
        Err(Error::CtcInfeasible { frames: 2, labels: 2, needed: 3 })
    ));
    assert!(matches!(ctc_forced_align(&d, &[1, 1, 1]), Err(Error::CtcInfeasible { .. })));
    assert!(matches!(ctc_log_likelihood(&d, &[2]), Err(Error::InvalidArgument(_))));
    assert!(matches!(ctc_log_likelihood(&d, &[0]), Err(Error::InvalidArgument(_))));
    assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
}

#[test]
fn distribution_rows_must_normalise() {
    assert!(CtcDistribution::from_probs(&[vec![0.5, 0.6]]).is_err());
    assert!(CtcDistribution::new(Tensor::zeros(&[2, 1])).is_err());
}

#[test]
fn peaked_alignment_recovers_the_planted_path() {
    // sharply peaked on (blank, a, a, b)
    let hi = 0.97;
    let lo = 0.015;
    let d = CtcDistribution::from_probs(&[
        vec![hi, lo, lo],
        vec![lo, hi, lo],
        vec![lo, hi, lo],
        vec![lo, lo, hi],
    ])
    .unwrap();
    let a = ctc_forced_align(&d, &[1, 2]).unwrap();
    assert_eq!(a.path, vec![0, 1, 1, 2]);
    assert_eq!(a.triggers, vec![1, 3]);
    let (oracle, score) = enumerated_alignment(&d, &[1, 2]);
    assert_eq!(a.path, oracle);
    assert!((a.log_prob - score).abs() < 1e-12);
}

#[test]
fn uniform_alignment_emits_as_early_as_possible() {
    let row = vec![1.0 / 3.0; 3];
    let d = CtcDistribution::from_probs(&[row.clone(), row.clone(), row]).unwrap();
    let a = ctc_forced_align(&d, &[1]).unwrap();
    assert_eq!(a.path, vec![1, 0, 0]);
    assert_eq!(a.triggers, vec![0]);
    let b = ctc_forced_align(&d, &[1, 2]).unwrap();
    assert_eq!(b.path, vec![1, 2, 0]);
}

#[test]
fn likelihood_and_alignment_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 1..=6 {
        for v in 1..=3 {
            for len in 1..=3 {
                for _ in 0..6 {
                    let y = random_labels(&mut rng, len, v);
                    let d = random_dist(&mut rng, t, v, 3.0);
                    if min_frames(&y) > t {
                        assert!(ctc_log_likelihood(&d, &y).is_err());
                        continue;
                    }
                    let ll = ctc_log_likelihood(&d, &y).unwrap();
                    assert!((ll.exp() - enumerated_likelihood(&d, &y)).abs() < 1e-9);
                    let a = ctc_forced_align(&d, &y).unwrap();
                    let (path, score) = enumerated_alignment(&d, &y);
                    assert_eq!(a.path, path, "T={t} V={v} Y={y:?}");
                    assert!((a.log_prob - score).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (t, v, y) in [(4, 2, vec![1, 2]), (5, 3, vec![2, 2, 3]), (6, 3, vec![1]), (3, 1, vec![1, 1])] {
        let d = random_dist(&mut rng, t, v, 2.0);
        let (ll, grad) = ctc_log_likelihood_grad(&d, &y).unwrap();
        assert_eq!(ll, ctc_log_likelihood(&d, &y).unwrap());
        let err = max_rel_error(d.logp(), &grad, 1e-5, |x| {
            let dd = CtcDistribution { logp: x.clone() };
            final_mass(&forward(&dd, &extended(&y)))
        });
        assert!(err < 1e-4, "relative error {err}");
        // occupancy sums to one per frame
        for r in 0..t {
            let s: f64 = grad.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn graph_loss_backpropagates_through_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x = Tensor::matrix(5, 4, logits).unwrap();
    let y = vec![1, 3, 3];
    let loss_of = |x: &Tensor| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let lp = g.log_softmax(xi);
        let l = ctc_loss(&mut g, lp, &y).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let xi = g.tracked_input(x.clone());
    let lp = g.log_softmax(xi);
    let l = ctc_loss(&mut g, lp, &y).unwrap();
    let grads = g.backward(l);
    let err = max_rel_error(&x, grads.wrt(xi).unwrap(), 1e-5, loss_of);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn collapse_and_greedy() {
    assert_eq!(collapse(&[0, 1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
    assert_eq!(collapse(&[]), Vec::<usize>::new());
    let d = CtcDistribution::from_probs(&[vec![0.1, 0.8, 0.1], vec![0.1, 0.8, 0.1], vec![0.8, 0.1, 0.1], vec![0.1, 0.1, 0.8]])
        .unwrap();
    assert_eq!(greedy_decode(&d), vec![1, 2]);
}

fn exhaustive(p: usize) -> SearchConfig {
    SearchConfig::beam(p)
}

#[test]
fn single_frame_search_picks_the_argmax_symbol() {
    let d = CtcDistribution::from_probs(&[vec![0.2, 0.5, 0.3]]).unwrap();
    let best = ctc_prefix_beam_search(&d, exhaustive(4), CtcOnly).unwrap();
    assert_eq!(best[0].prefix, vec![1]);
    assert_eq!(best[0].triggers, vec![0]);
    let d = CtcDistribution::from_probs(&[vec![0.6, 0.1, 0.3]]).unwrap();
    let best = ctc_prefix_beam_search(&d, exhaustive(4), CtcOnly).unwrap();
    assert!(best[0].prefix.is_empty());
}

#[test]
fn one_hot_search_equals_greedy_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let t = rng.gen_range(1..10);
        let v = rng.gen_range(1..5);
        let path: Vec<usize> = (0..t).map(|_| rng.gen_range(0..=v)).collect();
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&s| (0..=v).map(|k| if k == s { 0.0 } else { f64::NEG_INFINITY }).collect())
            .collect();
        let d = CtcDistribution::new(Tensor::raw(vec![t, v + 1], rows.concat())).unwrap();
        let best = ctc_prefix_beam_search(&d, exhaustive(2), CtcOnly).unwrap();
        assert_eq!(best[0].prefix, collapse(&path));
        assert_eq!(best[0].score, 0.0);
        assert_eq!(best.len(), 1);
    }
}

#[test]
fn exhaustive_search_finds_the_most_probable_labelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let t = rng.gen_range(1..=5);
        let v = rng.gen_range(1..=3);
        let d = random_dist(&mut rng, t, v, 2.5);
        let nbest = ctc_prefix_beam_search(&d, exhaustive(400), CtcOnly).unwrap();
        let oracle = enumerated_prefixes(&d);
        let (arg, mass) = oracle
            .iter()
            .map(|(y, (b, nb))| (y, b + nb))
            .fold(None::<(&Vec<usize>, f64)>, |acc, (y, m)| match acc {
                Some((_, bm)) if bm >= m => acc,
                _ => Some((y, m)),
            })
            .unwrap();
        assert_eq!(&nbest[0].prefix, arg);
        assert!((nbest[0].score - mass.ln()).abs() < 1e-9);
        // every prefix and its blank / non-blank split
        assert_eq!(nbest.len(), oracle.len());
        for h in &nbest {
            let (b, nb) = oracle[&h.prefix];
            assert!((h.log_pb.exp() - b).abs() < 1e-9);
            assert!((h.log_pnb.exp() - nb).abs() < 1e-9);
            assert!(h.triggers.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(h.triggers.len(), h.prefix.len());
        }
    }
}

#[test]
fn search_triggers_follow_label_onsets() {
    let hi = 0.9;
    let lo = 0.05;
    let d = CtcDistribution::from_probs(&[
        vec![hi, lo, lo],
        vec![lo, hi, lo],
        vec![lo, hi, lo],
        vec![hi, lo, lo],
        vec![lo, lo, hi],
    ])
    .unwrap();
    let best = ctc_prefix_beam_search(&d, exhaustive(1), CtcOnly).unwrap();
    assert_eq!(best[0].prefix, vec![1, 2]);
    assert_eq!(best[0].triggers, vec![1, 4]);
    // a wide beam keeps the unlikely early prefixes alive, so their
    // creation frames are the ones recorded
    let wide = ctc_prefix_beam_search(&d, exhaustive(8), CtcOnly).unwrap();
    assert_eq!(wide[0].prefix, vec![1, 2]);
    assert_eq!(wide[0].triggers, vec![0, 1]);
}

#[test]
fn pruning_widths_limit_expansion() {
    let d = CtcDistribution::from_probs(&[vec![0.1, 0.6, 0.3], vec![0.7, 0.2, 0.1]]).unwrap();
    let cfg = SearchConfig {
        beam: 10,
        prune: 10,
        theta1: 0.1,
        theta2: 0.1,
    };
    let nbest = ctc_prefix_beam_search(&d, cfg, CtcOnly).unwrap();
    assert_eq!(nbest[0].prefix, vec![1]);
    let wide = ctc_prefix_beam_search(&d, exhaustive(10), CtcOnly).unwrap();
    assert!(nbest.len() < wide.len());
    assert!(SearchConfig { beam: 3, prune: 2, theta1: 1.0, theta2: 0.5 }.validate().is_err());
    assert!(SearchConfig { beam: 2, prune: 2, theta1: 0.5, theta2: 1.0 }.validate().is_err());
    assert!(SearchConfig::beam(0).validate().is_err());
}

struct RejectAll;

impl SearchHooks for RejectAll {
    type State = ();
    fn root(&mut self) -> Result<()> {
        Ok(())
    }
    fn extend(&mut self, _: &(), _: &[usize], labels: &[usize], _: usize) -> Result<Vec<()>> {
        Ok(vec![(); labels.len()])
    }
    fn joint(&self, ctc: f64, prefix: &[usize], _: &()) -> f64 {
        if prefix.len() > 1 {
            f64::NEG_INFINITY
        } else {
            ctc
        }
    }
    fn finalize(&mut self, _: f64, _: &[usize], _: &()) -> Result<f64> {
        Ok(f64::NEG_INFINITY)
    }
}

#[test]
fn exhausted_beam_reports_the_best_partial() {
    let d = CtcDistribution::from_probs(&[vec![0.1, 0.9], vec![0.1, 0.9]]).unwrap();
    match ctc_prefix_beam_search(&d, exhaustive(4), RejectAll) {
        Err(Error::BeamExhausted { frame, prefix, triggers }) => {
            assert_eq!(frame, 2);
            assert_eq!(prefix, vec![1]);
            assert_eq!(triggers, vec![0]);
        }
        other => panic!("expected exhausted beam, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forced_alignment_is_always_valid(seed in any::<u64>(), t in 1usize..9, v in 1usize..5, len in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_labels(&mut rng, len, v);
        prop_assume!(min_frames(&y) <= t);
        let d = random_dist(&mut rng, t, v, 4.0);
        let a = ctc_forced_align(&d, &y).unwrap();
        prop_assert_eq!(collapse(&a.path), y.clone());
        prop_assert!(a.triggers.windows(2).all(|w| w[0] < w[1]));
        for (l, &n) in a.triggers.iter().enumerate() {
            prop_assert_eq!(a.path[n], y[l]);
        }
        prop_assert!(a.log_prob <= ctc_log_likelihood(&d, &y).unwrap() + 1e-12);
        prop_assert!((a.log_prob - path_score(&d, &a.path)).abs() < 1e-12);
    }

    #[test]
    fn likelihood_is_a_probability(seed in any::<u64>(), t in 1usize..12, v in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dist(&mut rng, t, v, 3.0);
        let len = rng.gen_range(1..=t.min(4));
        let y = random_labels(&mut rng, len, v);
        prop_assume!(min_frames(&y) <= t);
        let ll = ctc_log_likelihood(&d, &y).unwrap();
        prop_assert!(ll.is_finite() && ll <= 1e-12);
    }
}
