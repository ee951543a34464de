//! Differentiable rate model: bits under the continuous Gaussian likelihood.
//!
//! Per element, the probability of the unit-width bin around the residual is
//! Φ((d+0.5)/σ) − Φ((d−0.5)/σ); its −log₂ summed over the tensor is the
//! training-time rate estimate. The likelihood is floored at 2⁻²⁴ before the
//! log so far-off predictions cannot blow the loss up.

use crate::error::{Result, SicError};
use crate::tensor::tape::{std_normal_cdf, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Lower bound on per-element bin probability, 2⁻²⁴.
pub const LIKELIHOOD_FLOOR: f64 = 5.960_464_477_539_063e-8;

const LN_2: f64 = std::f64::consts::LN_2;

/// Tape form: total bits for `y` under per-element N(μ, σ²). Differentiable
/// w.r.t. all three inputs.
pub fn rate_bits_var<T: Scalar>(tape: &mut Tape<T>, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = tape.sub(y, mu)?;
    let up = tape.add_scalar(d, 0.5);
    let lo = tape.add_scalar(d, -0.5);
    let zu = tape.div(up, sigma)?;
    let zl = tape.div(lo, sigma)?;
    let pu = tape.normal_cdf(zu);
    let pl = tape.normal_cdf(zl);
    let p = tape.sub(pu, pl)?;
    let pc = tape.clamp_min(p, LIKELIHOOD_FLOOR);
    let lp = tape.ln(pc);
    let s = tape.sum_all(lp);
    Ok(tape.scale(s, -1.0 / LN_2))
}

/// Plain evaluation of the same quantity (no graph), accumulated at 64-bit.
pub fn rate_estimate<T: Scalar>(
    y: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
) -> Result<f64> {
    if y.shape() != mu.shape() || y.shape() != sigma.shape() {
        return Err(SicError::config(format!(
            "rate_estimate: shapes {:?}/{:?}/{:?} differ",
            y.shape(),
            mu.shape(),
            sigma.shape()
        )));
    }
    let floor = T::from_f64(LIKELIHOOD_FLOOR);
    let half = T::from_f64(0.5);
    let mut nats = 0.0f64;
    for ((&yv, &mv), &sv) in y.data().iter().zip(mu.data()).zip(sigma.data()) {
        let d = yv - mv;
        let p = std_normal_cdf((d + half) / sv) - std_normal_cdf((d - half) / sv);
        if !p.is_finite_v() {
            return Err(SicError::numeric("rate_estimate: non-finite likelihood"));
        }
        nats += p.maxv(floor).ln().to_f64();
    }
    Ok(-nats / LN_2)
}
