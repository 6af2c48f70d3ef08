//! Pointwise confidence intervals and time-uniform confidence sequences for
//! the scalar target.
//!
//! The pointwise interval is the usual Wald construction from the plug-in
//! variance. The confidence sequence is a mixture boundary: for a tuning
//! parameter ρ² > 0 the radius
//!
//! ```text
//! C̄_t = √( (t·V̂·ρ² + 1) / (t²ρ²) · log( (t·V̂·ρ² + 1) / α² ) )
//! ```
//!
//! is valid *simultaneously over all t*, at the price of being wider than
//! the pointwise interval at any fixed t. The ρ² knob trades where along
//! the time axis the boundary is tightest; [`choose_rho`] optimizes it for
//! a nominal sample size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A two-sided interval for the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

/// Standard normal quantile Φ⁻¹(p) by Wichura's rational approximation,
/// accurate to well below 1e-9 across (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 || p == 1.0 || p.is_nan() {
        return Err(Error::Config(format!("quantile level {p} outside (0, 1)")));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = polynomial(
            r,
            &[
                3.387_132_872_796_366_608e0,
                1.331_416_678_917_843_774_5e2,
                1.971_590_950_306_551_442_7e3,
                1.373_169_376_550_946_112_5e4,
                4.592_195_393_154_987_145_7e4,
                6.726_577_092_700_870_085_3e4,
                3.343_057_558_358_812_810_5e4,
                2.509_080_928_730_122_672_7e3,
            ],
        );
        let den = polynomial(
            r,
            &[
                1.0,
                4.231_333_070_160_091_125_2e1,
                6.871_870_074_920_579_083e2,
                5.394_196_021_424_751_107_7e3,
                2.121_379_430_158_659_586_7e4,
                3.930_789_580_009_271_061e4,
                2.872_908_573_572_194_267_4e4,
                5.226_495_278_852_854_561e3,
            ],
        );
        return Ok(q * num / den);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = polynomial(
            r,
            &[
                1.423_437_110_749_683_577_3e0,
                4.630_337_846_156_545_295_9e0,
                5.769_497_221_460_691_405_5e0,
                3.647_848_324_763_204_605e0,
                1.270_458_252_452_368_382_6e0,
                2.417_807_251_774_506_117_7e-1,
                2.272_384_498_926_918_458_3e-2,
                7.745_450_142_783_414_076_4e-4,
            ],
        );
        let den = polynomial(
            r,
            &[
                1.0,
                2.053_191_626_637_758_821_9e0,
                1.676_384_830_183_803_849_4e0,
                6.897_673_349_851_000_045_5e-1,
                1.481_039_764_274_800_745_9e-1,
                1.519_866_656_361_645_719_7e-2,
                5.475_938_084_995_344_946e-4,
                1.050_750_071_644_416_843_2e-9,
            ],
        );
        num / den
    } else {
        r -= 5.0;
        let num = polynomial(
            r,
            &[
                6.657_904_643_501_103_777_2e0,
                5.463_784_911_164_114_369_9e0,
                1.784_826_539_917_291_335_8e0,
                2.965_605_718_285_048_912_3e-1,
                2.653_218_952_657_612_309_3e-2,
                1.242_660_947_388_078_438_6e-3,
                2.711_555_568_743_487_578_2e-5,
                2.010_334_399_292_288_132_6e-7,
            ],
        );
        let den = polynomial(
            r,
            &[
                1.0,
                5.998_322_065_558_879_376_9e-1,
                1.369_298_809_227_358_053_1e-1,
                1.487_536_129_085_061_485_2e-2,
                7.868_691_311_456_132_591e-4,
                1.846_318_317_510_054_681_8e-5,
                1.421_511_758_316_445_888_7e-7,
                2.044_263_103_389_939_785_6e-15,
            ],
        );
        num / den
    };
    Ok(if q < 0.0 { -val } else { val })
}

fn polynomial(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Pointwise Wald interval β̂ ± z_{1−α/2}·√(V̂/t).
pub fn confidence_interval(beta_hat: f64, v_hat: f64, t: usize, alpha: f64) -> Result<Interval> {
    if t == 0 {
        return Err(Error::Config("confidence interval needs t ≥ 1".into()));
    }
    if !v_hat.is_finite() || v_hat < 0.0 {
        return Err(Error::Config(format!(
            "variance estimate {v_hat} is not a finite nonnegative number"
        )));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let halfwidth = z * (v_hat / t as f64).sqrt();
    Ok(Interval {
        lo: beta_hat - halfwidth,
        hi: beta_hat + halfwidth,
    })
}

/// Time-uniform mixture-boundary radius C̄_t.
pub fn confseq_radius(t: usize, v_hat: f64, rho2: f64, alpha: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::Config("confidence sequence needs t ≥ 1".into()));
    }
    if !(rho2 > 0.0 && rho2.is_finite()) {
        return Err(Error::Config(format!("mixture parameter ρ² = {rho2} must be positive")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("level α = {alpha} outside (0, 1)")));
    }
    if !v_hat.is_finite() || v_hat < 0.0 {
        return Err(Error::Config(format!(
            "variance estimate {v_hat} is not a finite nonnegative number"
        )));
    }
    let tf = t as f64;
    let mixed = tf * v_hat * rho2 + 1.0;
    Ok(((mixed / (tf * tf * rho2)) * (mixed / (alpha * alpha)).ln()).sqrt())
}

/// The confidence-sequence interval at time t.
pub fn confidence_sequence(
    beta_hat: f64,
    v_hat: f64,
    t: usize,
    rho2: f64,
    alpha: f64,
) -> Result<Interval> {
    let radius = confseq_radius(t, v_hat, rho2, alpha)?;
    Ok(Interval {
        lo: beta_hat - radius,
        hi: beta_hat + radius,
    })
}

/// Picks ρ² to make the boundary tightest around a nominal time `t_opt`
/// and variance guess, by golden-section search over log ρ ∈ [−10, 10].
pub fn choose_rho(t_opt: usize, v_guess: f64, alpha: f64) -> Result<f64> {
    if t_opt == 0 {
        return Err(Error::Config("ρ² tuning needs t_opt ≥ 1".into()));
    }
    let radius_at = |log_rho: f64| -> Result<f64> {
        confseq_radius(t_opt, v_guess, (2.0 * log_rho).exp(), alpha)
    };
    let (mut lo, mut hi) = (-10.0_f64, 10.0_f64);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = radius_at(x1)?;
    let mut f2 = radius_at(x2)?;
    while hi - lo > 1e-6 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = radius_at(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = radius_at(x2)?;
        }
    }
    Ok((lo + hi).exp())
}
