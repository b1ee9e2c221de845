//! Efficient channel attention for multichannel sequences.
//!
//! Each channel is summarized by its time average, a small convolution
//! across the channel axis turns the summaries into weights, and a sigmoid
//! keeps the weights in (0, 1) before they rescale their channels.
//!
//! The convolution runs over channels in their fixed order with zero padding
//! at both ends, so neighbouring channels interact and channel order matters.

use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::uniform;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcaConfig {
    pub gamma: f64,
    pub b: f64,
    /// Fixed odd kernel size; derived from the channel count when `None`.
    pub kernel: Option<usize>,
}

impl Default for EcaConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            b: 1.0,
            kernel: None,
        }
    }
}

/// Smallest odd integer `>= |log2(C)/γ + b/γ|`, at least 3.
pub fn adaptive_kernel_size(channels: usize, gamma: f64, b: f64) -> usize {
    let v = (math::log2(channels.max(1) as f64) / gamma + b / gamma).abs();
    let mut k = math::ceil(v) as usize;
    if k.is_multiple_of(2) {
        k += 1;
    }
    k.max(3)
}

/// Per-channel time averages `S_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDescriptor(pub Vec<f64>);

/// Per-channel weights `W_c`, each in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights(pub Vec<f64>);

pub fn channel_descriptor(x: &Tensor) -> Result<ChannelDescriptor> {
    let (c, l) = match *x.shape() {
        [c, l] => (c, l),
        _ => return Err(crate::dim_err!("expected [C, L] input, got {:?}", x.shape())),
    };
    if l == 0 {
        return Err(Error::Domain("channel descriptor of an empty sequence".into()));
    }
    Ok(ChannelDescriptor(
        (0..c)
            .map(|ch| x.row(ch).iter().sum::<f64>() / l as f64)
            .collect(),
    ))
}

/// `W = σ(conv1d(S))` with an odd, bias-free kernel and "same" zero padding.
pub fn channel_weights(s: &ChannelDescriptor, w: &[f64]) -> Result<ChannelWeights> {
    let k = w.len();
    if k.is_multiple_of(2) {
        return Err(Error::Contract(alloc::format!(
            "channel attention kernel must have odd length, got {k}"
        )));
    }
    let half = k / 2;
    let c = s.0.len();
    Ok(ChannelWeights(
        (0..c)
            .map(|i| {
                let z: f64 = (0..k)
                    .filter_map(|j| {
                        let src = (i + j).checked_sub(half)?;
                        (src < c).then(|| w[j] * s.0[src])
                    })
                    .sum();
                math::sigmoid(z)
            })
            .collect(),
    ))
}

/// `X̃_ci = W_c · X_ci`.
pub fn apply_attention(x: &Tensor, w: &ChannelWeights) -> Result<Tensor> {
    let (c, l) = match *x.shape() {
        [c, l] => (c, l),
        _ => return Err(crate::dim_err!("expected [C, L] input, got {:?}", x.shape())),
    };
    if w.0.len() != c {
        return Err(crate::dim_err!(
            "{} channel weights for input axis 0 of size {}",
            w.0.len(),
            c
        ));
    }
    let mut out = x.clone();
    for (row, &wc) in out.data_mut().chunks_mut(l.max(1)).zip(&w.0) {
        row.iter_mut().for_each(|v| *v *= wc);
    }
    Ok(out)
}

/// Trainable attention layer: a single `[1×1×k]` kernel named
/// `<prefix>.conv_w`.
#[derive(Clone, Debug)]
pub struct Eca {
    pub conv_w: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl Eca {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, cfg: &EcaConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let kernel = match cfg.kernel {
            Some(k) if k % 2 == 0 => {
                return Err(Error::Config(alloc::format!(
                    "attention kernel must be odd, got {k}"
                )))
            }
            Some(k) => k,
            None => adaptive_kernel_size(channels, cfg.gamma, cfg.b),
        };
        let bound = 1.0 / math::sqrt(kernel as f64);
        let data = (0..kernel).map(|_| uniform(rng, -bound, bound)).collect();
        let conv_w = store.add(
            &alloc::format!("{prefix}.conv_w"),
            Tensor::new(&[1, 1, kernel], data)?,
        );
        Ok(Self {
            conv_w,
            kernel,
            channels,
        })
    }

    /// Channel weights `[C]` for `x[C×L]`.
    pub fn weights(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let c = tape.shape(x)[0];
        let s = tape.mean_axis(x, 1)?;
        let s = tape.reshape(s, &[1, c])?;
        let z = tape.conv1d(s, vars[self.conv_w.index()], None, 1, self.kernel / 2)?;
        let w = tape.sigmoid(z);
        tape.reshape(w, &[c])
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let w = self.weights(tape, vars, x)?;
        tape.scale_rows(x, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, weighted_sum};
    use crate::rng::{normal, seeded};
    use alloc::vec;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn kernel_size_formula() {
        assert_eq!(adaptive_kernel_size(10, 2.0, 1.0), 3);
        assert_eq!(adaptive_kernel_size(64, 2.0, 1.0), 5);
        assert_eq!(adaptive_kernel_size(1, 2.0, 1.0), 3);
        assert_eq!(adaptive_kernel_size(4096, 2.0, 1.0), 7);
    }

    #[test]
    fn descriptor_is_mean() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(channel_descriptor(&x).unwrap().0, vec![2.0, 5.0]);
        let c = Tensor::full(&[3, 7], 1.25);
        assert_eq!(channel_descriptor(&c).unwrap().0, vec![1.25; 3]);
        assert!(matches!(
            channel_descriptor(&Tensor::zeros(&[2, 0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn weights_cases() {
        let s = ChannelDescriptor(vec![0.3, -2.0, 5.0, 1.0]);
        let w = channel_weights(&s, &[0.0; 3]).unwrap();
        assert!(w.0.iter().all(|&v| v == 0.5));
        let s = ChannelDescriptor(vec![1.0, 0.0, 0.0]);
        let w = channel_weights(&s, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(w.0, vec![math::sigmoid(1.0), 0.5, 0.5]);
        assert!(matches!(channel_weights(&s, &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn apply_scales_rows() {
        let x = Tensor::from_rows(&[vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let y = apply_attention(&x, &ChannelWeights(vec![0.5, 1.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 3.0, 3.0]);
        let id = apply_attention(&x, &ChannelWeights(vec![1.0, 1.0])).unwrap();
        assert_eq!(id, x);
        assert!(apply_attention(&x, &ChannelWeights(vec![1.0])).is_err());
    }

    #[test]
    fn tape_layer_matches_reference() {
        let mut store = ParamStore::new();
        let mut rng = seeded(5);
        let eca = Eca::new(&mut store, "eca", 6, &EcaConfig::default(), &mut rng).unwrap();
        let x = randn(&[6, 9], 8);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = eca.forward(&mut tape, &vars, xv).unwrap();

        let s = channel_descriptor(&x).unwrap();
        let w = channel_weights(&s, store.get(eca.conv_w).data()).unwrap();
        let want = apply_attention(&x, &w).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn composite_grad_check() {
        let x = randn(&[5, 7], 1);
        let k = randn(&[1, 1, 3], 2);
        let r = randn(&[5, 7], 3);
        let rep = grad_check_many(
            |t, v| {
                let s = t.mean_axis(v[0], 1)?;
                let s = t.reshape(s, &[1, 5])?;
                let z = t.conv1d(s, v[1], None, 1, 1)?;
                let w = t.sigmoid(z);
                let w = t.reshape(w, &[5])?;
                let y = t.scale_rows(v[0], w)?;
                weighted_sum(t, y, &r)
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
