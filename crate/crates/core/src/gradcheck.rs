//! Central-difference gradient checking.

use alloc::vec::Vec;

use crate::bimamba::{BiMambaBlock, BiMambaConfig};
use crate::eca::{Eca, EcaConfig};
use crate::error::{Error, Result};
use crate::model::{build_stage_model, Classifier, ConvLayerSpec, StageModelConfig};
use crate::params::ParamStore;
use crate::rng::{derive, normal, seeded, uniform, SeededRng};
use crate::tape::{Conv1dOptions, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(alloc::format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks the tape gradient of the scalar `f` with respect to every element
/// of every tensor in `inputs`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(alloc::format!(
            "grad_check step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    if let Some(i) = tape.value(out).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check function value".into(),
            index: i,
        });
    }
    tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (ti, &var) in vars.iter().enumerate() {
        let n = inputs[ti].len();
        for j in 0..n {
            let analytic = tape.grad(var).map_or(0.0, |g| g[j]);
            let x0 = inputs[ti].data()[j];
            work[ti].data_mut()[j] = x0 + eps;
            let fp = eval_scalar(&f, &work)?;
            work[ti].data_mut()[j] = x0 - eps;
            let fm = eval_scalar(&f, &work)?;
            work[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            if !analytic.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite {
                    context: alloc::format!("grad_check input {ti} gradient"),
                    index: j,
                });
            }
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the maximum relative
/// error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), eps)
        .map(|r| r.max_rel_error)
}

/// Reduces a tensor-valued output to a scalar by a fixed weighted sum so
/// that every output element contributes a distinct direction.
pub fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.shape(y))?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error of one operation over several random points.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape, data).expect("shape product matches data length")
}

fn rand_in(shape: &[usize], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::new(shape, data).expect("shape product matches data length")
}

const STEP: f64 = 1e-6;

fn sweep<G, F>(name: &'static str, points: usize, seed: u64, gen: G, f: F) -> Result<PrimitiveCheck>
where
    G: Fn(&mut SeededRng) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut rng = seeded(derive(seed, &[p as u64]));
        let inputs = gen(&mut rng);
        let wseed = derive(seed, &[p as u64, 1]);
        let rep = grad_check_many(
            |t, v| {
                let y = f(t, v)?;
                let mut wr = seeded(wseed);
                let w = randn(t.shape(y), &mut wr);
                weighted_sum(t, y, &w)
            },
            &inputs,
            STEP,
        )?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(PrimitiveCheck {
        name,
        points,
        max_rel_error: worst,
    })
}

/// Gradient checks of every differentiable tape operation, each at
/// `points` random inputs.
pub fn primitive_suite(points: usize, seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let s = |i: u64| derive(seed, &[0x6c, i]);
    let two = |r: &mut SeededRng| alloc::vec![randn(&[3, 4], r), randn(&[3, 4], r)];
    let one = |r: &mut SeededRng| alloc::vec![randn(&[3, 5], r)];
    let mut out = Vec::new();
    out.push(sweep("add", points, s(0), two, |t, v| t.add(v[0], v[1]))?);
    out.push(sweep("sub", points, s(1), two, |t, v| t.sub(v[0], v[1]))?);
    out.push(sweep("mul", points, s(2), two, |t, v| t.mul(v[0], v[1]))?);
    out.push(sweep("scale", points, s(3), one, |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(sweep("add_scalar", points, s(4), one, |t, v| Ok(t.add_scalar(v[0], 0.3)))?);
    out.push(sweep("exp", points, s(5), one, |t, v| Ok(t.exp(v[0])))?);
    out.push(sweep("sigmoid", points, s(6), one, |t, v| Ok(t.sigmoid(v[0])))?);
    out.push(sweep("relu", points, s(7), one, |t, v| Ok(t.relu(v[0])))?);
    out.push(sweep("silu", points, s(8), one, |t, v| Ok(t.silu(v[0])))?);
    out.push(sweep("softplus", points, s(9), one, |t, v| Ok(t.softplus(v[0])))?);
    out.push(sweep(
        "matmul",
        points,
        s(10),
        |r| alloc::vec![randn(&[3, 4], r), randn(&[4, 2], r)],
        |t, v| t.matmul(v[0], v[1]),
    )?);
    let row_vec = |r: &mut SeededRng| alloc::vec![randn(&[3, 5], r), randn(&[3], r)];
    out.push(sweep("add_bias", points, s(11), row_vec, |t, v| t.add_bias(v[0], v[1]))?);
    out.push(sweep("scale_rows", points, s(12), row_vec, |t, v| t.scale_rows(v[0], v[1]))?);
    out.push(sweep(
        "scale_cols",
        points,
        s(13),
        |r| alloc::vec![randn(&[3, 5], r), randn(&[5], r)],
        |t, v| t.scale_cols(v[0], v[1]),
    )?);
    out.push(sweep("reshape", points, s(14), one, |t, v| t.reshape(v[0], &[5, 3]))?);
    out.push(sweep("transpose", points, s(15), one, |t, v| t.transpose(v[0]))?);
    out.push(sweep("slice_rows", points, s(16), one, |t, v| t.slice_rows(v[0], 1, 2))?);
    out.push(sweep("slice_cols", points, s(17), one, |t, v| t.slice_cols(v[0], 1, 3))?);
    out.push(sweep("reverse_time", points, s(18), one, |t, v| t.reverse_time(v[0]))?);
    out.push(sweep("sum", points, s(19), one, |t, v| Ok(t.sum(v[0])))?);
    out.push(sweep("sum_axis", points, s(20), one, |t, v| t.sum_axis(v[0], 0))?);
    out.push(sweep("mean_axis", points, s(21), one, |t, v| t.mean_axis(v[0], 1))?);
    out.push(sweep(
        "conv1d",
        points,
        s(22),
        |r| alloc::vec![randn(&[3, 11], r), randn(&[4, 3, 3], r), randn(&[4], r)],
        |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 1),
    )?);
    out.push(sweep(
        "conv1d_depthwise_causal",
        points,
        s(23),
        |r| alloc::vec![randn(&[3, 9], r), randn(&[3, 1, 4], r)],
        |t, v| t.conv1d_with(v[0], v[1], None, Conv1dOptions::causal_depthwise(4, 3)),
    )?);
    out.push(sweep(
        "max_pool1d",
        points,
        s(24),
        |r| alloc::vec![randn(&[2, 12], r)],
        |t, v| t.max_pool1d(v[0], 3, 2),
    )?);
    let mask_seed = s(25);
    out.push(sweep("dropout", points, s(25), one, move |t, v| {
        t.set_training(true);
        let y = t.dropout(v[0], 0.3, &mut seeded(mask_seed));
        t.set_training(false);
        y
    })?);
    out.push(sweep(
        "softmax_cross_entropy",
        points,
        s(26),
        |r| alloc::vec![randn(&[3, 5], r)],
        |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2]),
    )?);
    out.push(sweep(
        "selective_scan",
        points,
        s(27),
        |r| {
            let mut a = rand_in(&[3, 4], r, -2.0, -0.01);
            // One state close to zero exercises the small-argument branch.
            a.data_mut()[1] = -1e-3;
            alloc::vec![
                randn(&[3, 6], r),
                rand_in(&[3, 6], r, 0.05, 1.0),
                a,
                randn(&[4, 6], r),
                randn(&[4, 6], r),
                randn(&[3], r),
            ]
        },
        |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]),
    )?);
    out.push(sweep(
        "eca",
        points,
        s(28),
        |r| alloc::vec![randn(&[1, 1, 3], r), randn(&[6, 7], r)],
        |t, v| {
            let mut store = ParamStore::new();
            let eca = Eca::new(&mut store, "eca", 6, &EcaConfig::default(), &mut seeded(0))?;
            eca.forward(t, &v[..1], v[1])
        },
    )?);
    out.push(bimamba_check(points, s(29))?);
    Ok(out)
}

fn bimamba_check(points: usize, seed: u64) -> Result<PrimitiveCheck> {
    let cfg = BiMambaConfig::new(4, 3);
    let mut store = ParamStore::new();
    let block = BiMambaBlock::new(&mut store, "b", &cfg, &mut seeded(seed))?;
    let n = store.len();
    sweep(
        "bimamba_block",
        points,
        seed,
        |r| {
            let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
            inputs.push(randn(&[4, 8], r));
            inputs
        },
        |t, v| block.forward(t, &v[..n], v[n]),
    )
}

/// Gradient check of the full stage classifier (cross-entropy loss) with
/// respect to every parameter and the input.
pub fn stage_model_check(cfg: &StageModelConfig, seed: u64) -> Result<GradCheckReport> {
    let model = build_stage_model(cfg, seed)?;
    let store = model.store();
    let n = store.len();
    let mut rng = seeded(derive(seed, &[0x51]));
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(randn(&[cfg.channels, cfg.epoch_samples], &mut rng));
    let label = (seed % cfg.classes as u64) as usize;
    grad_check_many(
        |t, v| {
            let logits = model.forward(t, &v[..n], v[n], &mut seeded(0))?;
            t.softmax_cross_entropy(logits, &[label])
        },
        &inputs,
        STEP,
    )
}

/// The small stage configuration used for whole-model gradient checks:
/// two channels, 128 samples per epoch and two SSM states.
pub fn tiny_stage_config() -> StageModelConfig {
    StageModelConfig {
        channels: 2,
        epoch_samples: 128,
        state_dim: 2,
        cnn: alloc::vec![
            ConvLayerSpec::new(4, 5, 2),
            ConvLayerSpec::new(4, 3, 2),
            ConvLayerSpec::new(4, 3, 2),
        ],
        ..StageModelConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::vector(alloc::vec![1.0]);
        let f = |t: &mut Tape, v: Var| Ok(t.sum(v));
        assert!(matches!(grad_check(f, &x, 1e-1), Err(Error::Contract(_))));
        assert!(matches!(grad_check(f, &x, 1e-9), Err(Error::Contract(_))));
    }

    #[test]
    fn reports_non_finite() {
        let x = Tensor::vector(alloc::vec![800.0]);
        let f = |t: &mut Tape, v: Var| {
            let e = t.exp(v);
            Ok(t.sum(e))
        };
        assert!(matches!(grad_check(f, &x, 1e-5), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sigmoid_passes() {
        let x = randn(&[12], 1);
        let w = randn(&[12], 2);
        let err = grad_check(
            |t, v| {
                let y = t.sigmoid(v);
                weighted_sum(t, y, &w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn suite_covers_ops_below_tolerance() {
        let checks = primitive_suite(2, 3).unwrap();
        assert!(checks.len() >= 28);
        for c in &checks {
            assert!(c.max_rel_error < 1e-5, "{c:?}");
        }
    }
}
