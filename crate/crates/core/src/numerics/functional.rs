//! Pure vector kernels. The differentiable graph ops in [`super::graph`]
//! call into these for their forward passes.

use rand::Rng;

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(x))
}

pub(crate) fn softmax_unchecked(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log(sum(exp(x)))`; `-inf` entries are allowed and an all `-inf` input
/// yields `-inf`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))` with `-inf` as the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| v - lse).collect()
}

/// `gain * (x - mean) / sqrt(var + eps) + bias` (biased variance).
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("layer_norm of empty vector".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm dims x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((h, g), b)| g * h + b)
        .collect())
}

/// Standardised vector and `1/sqrt(var + eps)`.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `k - 1` zeros on the left; output at `t` sees `t-k+1..=t`.
    Causal,
    /// `(k - 1) / 2` zeros on each side; `k` must be odd.
    Symmetric,
}

/// Per-channel 1-D convolution over a `T x d` sequence with a `k x d` kernel.
pub fn depthwise_conv1d(x: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    let k = kernel.rows();
    let d = x.cols();
    if k == 0 {
        return Err(Error::InvalidArgument("empty kernel".into()));
    }
    if kernel.cols() != d {
        return Err(Error::Shape(format!("kernel channels {} != {}", kernel.cols(), d)));
    }
    let table = ConvTable::sequential(x.rows(), k, padding)?;
    Ok(Tensor::raw(vec![x.rows(), d], table.apply(x.data(), kernel.data(), d)))
}

/// Neighbour table for a depthwise convolution: tap `j` of output row `i`
/// reads input row `taps[i * k + j]` (or zero when `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTable {
    pub rows: usize,
    pub k: usize,
    pub taps: Vec<Option<usize>>,
}

impl ConvTable {
    pub fn sequential(n: usize, k: usize, padding: Padding) -> Result<Self> {
        let left = match padding {
            Padding::Causal => k - 1,
            Padding::Symmetric => {
                if k.is_multiple_of(2) {
                    return Err(Error::InvalidArgument(format!(
                        "symmetric padding needs an odd kernel, got {k}"
                    )));
                }
                (k - 1) / 2
            }
        };
        let mut taps = Vec::with_capacity(n * k);
        for i in 0..n {
            for j in 0..k {
                let src = i as isize + j as isize - left as isize;
                taps.push((src >= 0 && (src as usize) < n).then_some(src as usize));
            }
        }
        Ok(Self { rows: n, k, taps })
    }

    pub(crate) fn apply(&self, x: &[f64], kernel: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * d];
        for i in 0..self.rows {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..self.k {
                if let Some(src) = self.taps[i * self.k + j] {
                    let xr = &x[src * d..(src + 1) * d];
                    let kr = &kernel[j * d..(j + 1) * d];
                    for c in 0..d {
                        orow[c] += kr[c] * xr[c];
                    }
                }
            }
        }
        out
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Gated linear unit over the columns of `x`: `a * sigmoid(b)` where `a` is
/// the first half of the channels and `b` the second.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if !c.is_multiple_of(2) {
        return Err(Error::Shape(format!("glu needs an even channel count, got {c}")));
    }
    let h = c / 2;
    let mut out = Vec::with_capacity(x.rows() * h);
    for i in 0..x.rows() {
        let r = x.row(i);
        for j in 0..h {
            out.push(r[j] * sigmoid(r[h + j]));
        }
    }
    Ok(Tensor::raw(vec![x.rows(), h], out))
}

/// Inverted dropout mask: entries are `0` with probability `p`, otherwise
/// `1/(1-p)`.
pub fn dropout_mask(n: usize, p: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    let mut g = rng.next_generator();
    let keep = 1.0 / (1.0 - p);
    Ok((0..n)
        .map(|_| if g.gen::<f64>() < p { 0.0 } else { keep })
        .collect())
}

/// Applies dropout to a tensor. Evaluation mode and `p == 0` are identities.
pub fn dropout(x: &Tensor, p: f64, rng: &mut RngStream, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Ok(Tensor::raw(x.shape().to_vec(), data))
}

/// Sinusoidal encoding of a (possibly negative) position.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = (10000f64).powf(-((i / 2 * 2) as f64) / d as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_and_formula() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // direct formula e^{x_i} / sum e^{x_j}
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let s = softmax(&x).unwrap();
        for (a, v) in s.iter().zip(x) {
            assert!((a - v.exp() / z).abs() < 1e-12);
        }
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant_and_normalised(
            x in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let b = softmax(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|v| *v >= 0.0));
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let z = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-9));

        let x = [1.0, 4.0, -2.0, 0.5];
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-12).unwrap();
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);

        // hand evaluation: mean 0.875, var = (0.015625+9.765625+8.265625+0.140625)/4 = 4.546875
        let gain = [2.0, 1.0, 0.5, -1.0];
        let bias = [0.0, 1.0, 0.0, 0.25];
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        let sd = (4.546875f64 + 1e-5).sqrt();
        let expect = [
            2.0 * (0.125 / sd),
            3.125 / sd + 1.0,
            0.5 * (-2.875 / sd),
            -(-0.375 / sd) + 0.25,
        ];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(layer_norm(&[], &[], &[], 1e-5).is_err());
    }

    #[test]
    fn depthwise_conv_cases() {
        let x = Tensor::matrix(5, 2, (0..10).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        // unit impulse at the current position is the identity in both modes
        let mut causal = Tensor::zeros(&[3, 2]);
        causal.row_mut(2).copy_from_slice(&[1.0, 1.0]);
        assert_eq!(depthwise_conv1d(&x, &causal, Padding::Causal).unwrap(), x);
        let mut sym = Tensor::zeros(&[3, 2]);
        sym.row_mut(1).copy_from_slice(&[1.0, 1.0]);
        assert_eq!(depthwise_conv1d(&x, &sym, Padding::Symmetric).unwrap(), x);

        // direct convolution sum, k = 3 symmetric
        let kern = Tensor::matrix(3, 2, vec![0.2, -1.0, 0.5, 2.0, 1.5, 0.3]).unwrap();
        let y = depthwise_conv1d(&x, &kern, Padding::Symmetric).unwrap();
        for t in 0..5 {
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..3 {
                    let src = t as isize + j as isize - 1;
                    if (0..5).contains(&src) {
                        s += kern.at(j, c) * x.at(src as usize, c);
                    }
                }
                assert!((y.at(t, c) - s).abs() < 1e-15);
            }
        }
        assert!(depthwise_conv1d(&x, &Tensor::zeros(&[4, 2]), Padding::Symmetric).is_err());
    }

    #[test]
    fn causal_conv_ignores_future() {
        let x = Tensor::matrix(6, 1, vec![1.0, -2.0, 0.5, 3.0, 1.0, 2.0]).unwrap();
        let k = Tensor::matrix(3, 1, vec![0.3, -0.7, 1.1]).unwrap();
        let y = depthwise_conv1d(&x, &k, Padding::Causal).unwrap();
        let mut x2 = x.clone();
        x2.row_mut(4)[0] = 100.0;
        x2.row_mut(5)[0] = -7.0;
        let y2 = depthwise_conv1d(&x2, &k, Padding::Causal).unwrap();
        for t in 0..4 {
            assert_eq!(y.at(t, 0), y2.at(t, 0));
        }
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert_eq!(swish(0.0), 0.0);
        let g = glu(&Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap()).unwrap();
        assert_eq!(g.item(), 1.5);
        assert!(glu(&Tensor::matrix(1, 3, vec![1.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn dropout_behaviour() {
        let x = Tensor::full(&[100, 1000], 1.0);
        let mut rng = RngStream::new(42);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap(), x);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
        let y = dropout(&x, 0.1, &mut RngStream::new(7), true).unwrap();
        let zeros = y.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.1).abs() < 0.01, "zero fraction {zeros}");
        let kept = y.data().iter().find(|v| **v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.9).abs() < 1e-15);
        assert_eq!(y, dropout(&x, 0.1, &mut RngStream::new(7), true).unwrap());
    }

    #[test]
    fn log_add_identities() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }
}
