//! Linear state-space layers: zero-order-hold discretization, the recurrent
//! scan and the equivalent convolution kernel for time-invariant parameters.
//!
//! The state matrix is diagonal, so every quantity here is elementwise over
//! the state index. The trainable, input-dependent variant of the scan is
//! [`Tape::selective_scan`](crate::Tape::selective_scan); the functions in
//! this module are the plain-`f64` reference paths.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Continuous-time parameters `h' = A h + B x`, `y = C h + D x` for one
/// input channel, plus the time scale `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`; entries must be finite and `<= 0`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: f64,
    /// Set when `b`, `c` and `delta` come from a per-timestep projection.
    /// Such parameters only describe a single step and have no
    /// convolutional form.
    pub selective: bool,
}

impl SsmParams {
    /// Time-invariant parameters with the real S4D initialization
    /// `A_n = -(n + 1)`.
    pub fn s4d_real(state_dim: usize, delta: f64) -> Self {
        Self {
            a: (0..state_dim).map(|n| -((n + 1) as f64)).collect(),
            b: vec![1.0; state_dim],
            c: vec![1.0; state_dim],
            d: 0.0,
            delta,
            selective: false,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }
}

/// Discretized parameters `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C h_t + D x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub selective: bool,
}

impl DiscreteSsm {
    pub fn state_dim(&self) -> usize {
        self.a_bar.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.a_bar.len();
        if self.b_bar.len() != n || self.c.len() != n {
            return Err(crate::dim_err!(
                "state dimension mismatch: a_bar {}, b_bar {}, c {}",
                n,
                self.b_bar.len(),
                self.c.len()
            ));
        }
        Ok(())
    }
}

/// Impulse response `K̄[j] = Σ_n C_n Ā_n^j B̄_n`, `j = 0..M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub taps: Vec<f64>,
}

impl SsmKernel {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

pub(crate) const PHI_SERIES_RADIUS: f64 = 1e-4;

/// `φ(z) = (e^z − 1)/z` with `φ(0) = 1`.
pub fn phi(z: f64) -> f64 {
    if z.abs() < PHI_SERIES_RADIUS {
        1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    } else {
        math::expm1(z) / z
    }
}

/// `φ'(z) = (z e^z − e^z + 1)/z²`, by series near zero where the closed
/// form cancels.
pub fn phi_prime(z: f64) -> f64 {
    if z.abs() < 0.5 {
        phi_prime_series(z)
    } else {
        (z * math::exp(z) - math::expm1(z)) / (z * z)
    }
}

/// Coefficients `(k + 1)/(k + 2)!` of `φ'(z) = Σ_k c_k z^k`.
const PHI_PRIME_COEFFS: [f64; 17] = {
    let mut c = [0.0; 17];
    let mut fact = 2.0; // (k + 2)!
    let mut k = 0;
    while k < 17 {
        c[k] = (k + 1) as f64 / fact;
        fact *= (k + 3) as f64;
        k += 1;
    }
    c
};

/// Taylor polynomial of `φ'`, accurate to rounding for `|z| < 0.5`.
pub(crate) fn phi_prime_series(z: f64) -> f64 {
    PHI_PRIME_COEFFS.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

/// Zero-order hold: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·B`, evaluated
/// as `B̄ = B·Δ·φ(ΔA)` so that `A → 0` gives `B̄ → Δ·B`.
pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    if !(p.delta > 0.0) || !p.delta.is_finite() {
        return Err(Error::Domain(alloc::format!(
            "time scale delta must be finite and > 0, got {}",
            p.delta
        )));
    }
    let n = p.a.len();
    if p.b.len() != n || p.c.len() != n {
        return Err(crate::dim_err!(
            "state dimension mismatch: a {}, b {}, c {}",
            n,
            p.b.len(),
            p.c.len()
        ));
    }
    if let Some((i, a)) = p.a.iter().enumerate().find(|(_, a)| !a.is_finite()) {
        return Err(Error::Domain(alloc::format!(
            "state matrix entry {i} is not finite ({a})"
        )));
    }
    if let Some((i, a)) = p.a.iter().enumerate().find(|(_, &a)| a > 0.0) {
        return Err(Error::Domain(alloc::format!(
            "state matrix entry {i} is positive ({a}); the system would be unstable"
        )));
    }
    let a_bar = p.a.iter().map(|&a| math::exp(p.delta * a)).collect();
    let b_bar = p
        .a
        .iter()
        .zip(&p.b)
        .map(|(&a, &b)| b * p.delta * phi(p.delta * a))
        .collect();
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
        d: p.d,
        selective: p.selective,
    })
}

/// Runs the recurrence from `h_0 = 0` and returns `y`.
pub fn ssm_scan(d: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    d.check()?;
    let mut h = vec![0.0; d.state_dim()];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut acc = 0.0;
        for (((hs, &a), &b), &c) in h.iter_mut().zip(&d.a_bar).zip(&d.b_bar).zip(&d.c) {
            *hs = a * *hs + b * xt;
            acc += c * *hs;
        }
        y.push(acc + d.d * xt);
    }
    Ok(y)
}

/// Convolution kernel of length `m`, built in `O(N·M)` by carrying
/// `Ā^j B̄` forward.
pub fn ssm_conv_kernel(d: &DiscreteSsm, m: usize) -> Result<SsmKernel> {
    if d.selective {
        return Err(Error::Mode(
            "convolutional form requires time-invariant parameters".into(),
        ));
    }
    if m == 0 {
        return Err(Error::Contract("kernel length must be >= 1".into()));
    }
    d.check()?;
    let mut power = d.b_bar.clone();
    let mut taps = Vec::with_capacity(m);
    for _ in 0..m {
        taps.push(power.iter().zip(&d.c).map(|(p, c)| p * c).sum());
        power.iter_mut().zip(&d.a_bar).for_each(|(p, a)| *p *= a);
    }
    Ok(SsmKernel { taps })
}

/// Causal convolution `y_t = Σ_{j<=t} K̄[j] x_{t-j} + D x_t`.
pub fn ssm_conv_apply(k: &SsmKernel, d: &DiscreteSsm, x: &[f64]) -> Result<Vec<f64>> {
    if k.len() != x.len() {
        return Err(crate::dim_err!(
            "kernel length {} does not match input length {}",
            k.len(),
            x.len()
        ));
    }
    let y = (0..x.len())
        .map(|t| {
            let conv: f64 = (0..=t).map(|j| k.taps[j] * x[t - j]).sum();
            conv + d.d * x[t]
        })
        .collect();
    Ok(y)
}
