//! Bidirectional selective state-space block.
//!
//! Each direction is a gated Mamba-style branch:
//!
//! ```text
//! [x_in | z] = W_in · x
//! u          = silu(causal_depthwise_conv(x_in))
//! [r | B | C] = W_x · u            (r has dt_rank rows)
//! Δ          = softplus(W_dt · r + dt_bias)
//! y          = selective_scan(u, Δ, −exp(A_log), B, C, D) ⊙ silu(z)
//! out        = W_out · y
//! ```
//!
//! The block output is `(fwd(x) + rev(bwd(rev(x)))) / 2 + x`; the two
//! branches are averaged after their output projections.

use alloc::format;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::uniform;
use crate::tape::{Conv1dOptions, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiMambaConfig {
    pub d_model: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_width: usize,
    /// Rank of the Δ projection; `0` selects `ceil(d_model / 16)`.
    pub dt_rank: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl BiMambaConfig {
    pub fn new(d_model: usize, state_dim: usize) -> Self {
        Self {
            d_model,
            state_dim,
            expand: 2,
            conv_width: 4,
            dt_rank: 0,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_model * self.expand
    }

    pub fn resolved_dt_rank(&self) -> usize {
        if self.dt_rank == 0 {
            self.d_model.div_ceil(16)
        } else {
            self.dt_rank
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.state_dim == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(Error::Config(format!(
                "block dimensions must be positive: {self:?}"
            )));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Config(format!(
                "need 0 < dt_min <= dt_max, got {} and {}",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }
}

/// Parameters producing the per-timestep `(Δ, B, C)`.
#[derive(Clone, Debug)]
pub struct SelectiveProjection {
    /// `[(dt_rank + 2N) × E]`
    pub x_proj: ParamId,
    /// `[E × dt_rank]`
    pub dt_proj: ParamId,
    /// `[E]`
    pub dt_bias: ParamId,
    pub dt_rank: usize,
    pub state_dim: usize,
}

/// Per-timestep scan parameters: `delta[E×L]`, `b[N×L]`, `c[N×L]`.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveParams {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
}

/// `Δ_t = softplus(W_dt · (W_x u_t)[..r] + dt_bias)`, `B_t`, `C_t` linear
/// in `u_t`.
pub fn selective_project(tape: &mut Tape, vars: &[Var], proj: &SelectiveProjection, u: Var) -> Result<SelectiveParams> {
    let r = proj.dt_rank;
    let n = proj.state_dim;
    let xp = tape.matmul(vars[proj.x_proj.index()], u)?;
    let low = tape.slice_rows(xp, 0, r)?;
    let b = tape.slice_rows(xp, r, n)?;
    let c = tape.slice_rows(xp, r + n, n)?;
    let dt = tape.matmul(vars[proj.dt_proj.index()], low)?;
    let dt = tape.add_bias(dt, vars[proj.dt_bias.index()])?;
    let delta = tape.softplus(dt);
    Ok(SelectiveParams { delta, b, c })
}

/// One scan direction.
#[derive(Clone, Debug)]
pub struct MambaBranch {
    pub in_proj: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: SelectiveProjection,
    pub a_log: ParamId,
    pub d: ParamId,
    pub out_proj: ParamId,
    pub d_inner: usize,
    pub conv_width: usize,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| uniform(rng, -bound, bound)).collect())
}

impl MambaBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BiMambaConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let e = cfg.d_inner();
        let n = cfg.state_dim;
        let r = cfg.resolved_dt_rank();
        let k = cfg.conv_width;
        let name = |s: &str| format!("{prefix}.{s}");

        let in_proj = store.add(&name("in_proj"), uniform_tensor(&[2 * e, d], 1.0 / math::sqrt(d as f64), rng)?);
        let conv_bound = 1.0 / math::sqrt(k as f64);
        let conv_w = store.add(&name("conv_w"), uniform_tensor(&[e, 1, k], conv_bound, rng)?);
        let conv_b = store.add(&name("conv_b"), uniform_tensor(&[e], conv_bound, rng)?);
        let x_proj = store.add(&name("x_proj"), uniform_tensor(&[r + 2 * n, e], 1.0 / math::sqrt(e as f64), rng)?);
        let dt_proj = store.add(&name("dt_proj"), uniform_tensor(&[e, r], 1.0 / math::sqrt(r as f64), rng)?);
        let (lo, hi) = (math::ln(cfg.dt_min), math::ln(cfg.dt_max));
        let dt_bias: Vec<f64> = (0..e)
            .map(|_| math::inv_softplus(math::exp(uniform(rng, lo, hi))))
            .collect();
        let dt_bias = store.add(&name("dt_bias"), Tensor::new(&[e], dt_bias)?);
        // A_n = -(n + 1) for every channel.
        let a_log: Vec<f64> = (0..e)
            .flat_map(|_| (0..n).map(|s| math::ln((s + 1) as f64)))
            .collect();
        let a_log = store.add(&name("A_log"), Tensor::new(&[e, n], a_log)?);
        let dd = store.add(&name("D"), Tensor::full(&[e], 1.0));
        let out_proj = store.add(&name("out_proj"), uniform_tensor(&[d, e], 1.0 / math::sqrt(e as f64), rng)?);
        Ok(Self {
            in_proj,
            conv_w,
            conv_b,
            proj: SelectiveProjection {
                x_proj,
                dt_proj,
                dt_bias,
                dt_rank: r,
                state_dim: n,
            },
            a_log,
            d: dd,
            out_proj,
            d_inner: e,
            conv_width: k,
        })
    }

    /// `x[D×L] -> [D×L]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let e = self.d_inner;
        let xz = tape.matmul(vars[self.in_proj.index()], x)?;
        let xin = tape.slice_rows(xz, 0, e)?;
        let z = tape.slice_rows(xz, e, e)?;
        let u = tape.conv1d_with(
            xin,
            vars[self.conv_w.index()],
            Some(vars[self.conv_b.index()]),
            Conv1dOptions::causal_depthwise(self.conv_width, e),
        )?;
        let u = tape.silu(u);
        let sp = selective_project(tape, vars, &self.proj, u)?;
        let a = tape.exp(vars[self.a_log.index()]);
        let a = tape.scale(a, -1.0);
        let y = tape.selective_scan(u, sp.delta, a, sp.b, sp.c, vars[self.d.index()])?;
        let gate = tape.silu(z);
        let y = tape.mul(y, gate)?;
        tape.matmul(vars[self.out_proj.index()], y)
    }
}

#[derive(Clone, Debug)]
pub struct BiMambaBlock {
    pub cfg: BiMambaConfig,
    pub fwd: MambaBranch,
    pub bwd: MambaBranch,
}

impl BiMambaBlock {
    /// Registers `<prefix>.fwd.*` and `<prefix>.bwd.*`.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BiMambaConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let sep = if prefix.is_empty() { "" } else { "." };
        let fwd = MambaBranch::new(store, &format!("{prefix}{sep}fwd"), cfg, rng)?;
        let bwd = MambaBranch::new(store, &format!("{prefix}{sep}bwd"), cfg, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            fwd,
            bwd,
        })
    }

    /// Both directions share one set of parameters.
    pub fn new_tied(store: &mut ParamStore, prefix: &str, cfg: &BiMambaConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let sep = if prefix.is_empty() { "" } else { "." };
        let fwd = MambaBranch::new(store, &format!("{prefix}{sep}shared"), cfg, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            bwd: fwd.clone(),
            fwd,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let f = self.fwd.forward(tape, vars, x)?;
        let xr = tape.reverse_time(x)?;
        let b = self.bwd.forward(tape, vars, xr)?;
        let b = tape.reverse_time(b)?;
        let s = tape.add(f, b)?;
        let avg = tape.scale(s, 0.5);
        tape.add(avg, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::weighted_sum;
    use crate::rng::{normal, seeded};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal(&mut r)).collect()).unwrap()
    }

    fn run(block: &BiMambaBlock, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &vars, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn shape_is_preserved() {
        let cfg = BiMambaConfig::new(4, 3);
        let mut store = ParamStore::new();
        let block = BiMambaBlock::new(&mut store, "blk", &cfg, &mut seeded(1)).unwrap();
        for l in [1, 2, 977] {
            let x = randn(&[4, l], l as u64);
            let y = run(&block, &store, &x);
            assert_eq!(y.shape(), &[4, l]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn tied_block_commutes_with_reversal() {
        let cfg = BiMambaConfig::new(3, 4);
        let mut store = ParamStore::new();
        let block = BiMambaBlock::new_tied(&mut store, "", &cfg, &mut seeded(2)).unwrap();
        let x = randn(&[3, 11], 9);
        let mut xr = x.clone();
        for row in xr.data_mut().chunks_mut(11) {
            row.reverse();
        }
        let y = run(&block, &store, &x);
        let yr = run(&block, &store, &xr);
        for c in 0..3 {
            for t in 0..11 {
                assert!((y.at2(c, t) - yr.at2(c, 10 - t)).abs() < 1e-12);
            }
        }
        // palindromic input gives palindromic output
        let mut p = Tensor::zeros(&[3, 9]);
        for c in 0..3 {
            for t in 0..9 {
                p.data_mut()[c * 9 + t] = ((t.min(8 - t) + c) as f64).sin();
            }
        }
        let y = run(&block, &store, &p);
        for c in 0..3 {
            for t in 0..9 {
                assert!((y.at2(c, t) - y.at2(c, 8 - t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_backward_branch_leaves_forward_half() {
        let cfg = BiMambaConfig::new(4, 2);
        let mut store = ParamStore::new();
        let block = BiMambaBlock::new(&mut store, "b", &cfg, &mut seeded(3)).unwrap();
        let zero = Tensor::zeros(store.get(block.bwd.out_proj).shape());
        store.set("b.bwd.out_proj", zero).unwrap();
        let x = randn(&[4, 13], 4);
        let y = run(&block, &store, &x);

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = block.fwd.forward(&mut tape, &vars, xv).unwrap();
        let f = tape.value(f);
        for i in 0..x.len() {
            let want = 0.5 * f.data()[i] + x.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn delta_is_softplus_of_bias_for_zero_input() {
        let cfg = BiMambaConfig::new(2, 2);
        let mut store = ParamStore::new();
        let branch = MambaBranch::new(&mut store, "m", &cfg, &mut seeded(5)).unwrap();
        let e = cfg.d_inner();
        store.set("m.dt_bias", Tensor::zeros(&[e])).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let u = tape.constant(Tensor::zeros(&[e, 6]));
        let sp = selective_project(&mut tape, &vars, &branch.proj, u).unwrap();
        assert!(tape
            .value(sp.delta)
            .data()
            .iter()
            .all(|&d| (d - math::LN_2).abs() < 1e-15));
    }

    #[test]
    fn delta_positive_for_random_inputs() {
        let cfg = BiMambaConfig::new(2, 2);
        let mut store = ParamStore::new();
        let branch = MambaBranch::new(&mut store, "m", &cfg, &mut seeded(6)).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let u = tape.constant(randn(&[cfg.d_inner(), 2500], 7));
        let sp = selective_project(&mut tape, &vars, &branch.proj, u).unwrap();
        assert!(tape.value(sp.delta).data().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = BiMambaConfig::new(4, 3);
        let mut store = ParamStore::new();
        let block = BiMambaBlock::new(&mut store, "b", &cfg, &mut seeded(8)).unwrap();
        let x = randn(&[4, 10], 9);
        let r = randn(&[4, 10], 10);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.constant(x);
        let y = block.forward(&mut tape, &vars, xv).unwrap();
        let loss = weighted_sum(&mut tape, y, &r).unwrap();
        tape.backward(loss).unwrap();
        for (id, &v) in store.ids().zip(&vars) {
            let g = tape.grad(v).unwrap();
            assert!(g.iter().any(|&x| x != 0.0), "{} has zero gradient", store.name(id));
        }
    }
}
