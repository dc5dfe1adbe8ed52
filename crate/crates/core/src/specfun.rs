//! Special functions behind the Matérn kernel: the modified Bessel function of
//! the second kind and its argument derivatives, order derivatives of
//! `x^ν K_ν(x)`, and the gamma family (log-gamma, digamma, trigamma).
//!
//! `K_ν` is evaluated with Temme's series for `x ≤ 2` and Steed's continued
//! fraction for `x > 2`, both at a reduced order `μ ∈ [-1/2, 1/2)`, followed
//! by forward recurrence up to `ν`. Negative orders route through `|ν|`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Value returned in place of `K_ν(x)` when it overflows `f64`.
pub const SATURATED: f64 = f64::MAX;

/// Default relative step for the central differences in the order `ν`.
pub const DEFAULT_NU_STEP: f64 = 1e-4;

const MAX_ITER: usize = 10_000;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Taylor coefficients of `1/Γ(1+v)` around `v = 0`.
const RGAMMA1P: [f64; 27] = [
    1.0,
    0.577_215_664_901_532_860_6,
    -0.655_878_071_520_253_881_1,
    -0.042_002_635_034_095_235_53,
    0.166_538_611_382_291_489_5,
    -0.042_197_734_555_544_336_75,
    -0.009_621_971_527_876_973_562,
    0.007_218_943_246_663_099_542,
    -0.001_165_167_591_859_065_112,
    -0.000_215_241_674_114_950_972_8,
    0.000_128_050_282_388_116_186_2,
    -0.000_020_134_854_780_788_238_66,
    -0.000_001_250_493_482_142_670_657,
    0.000_001_133_027_231_981_695_882,
    -2.056_338_416_977_607_103e-7,
    6.116_095_104_481_415_818e-9,
    5.002_007_644_469_222_930e-9,
    -1.181_274_570_487_020_145e-9,
    1.043_426_711_691_100_510e-10,
    7.782_263_439_905_071_254e-12,
    -3.696_805_618_642_205_708e-12,
    5.100_370_287_454_475_979e-13,
    -2.058_326_053_566_506_783e-14,
    -5.348_122_539_423_017_982e-15,
    1.226_778_628_238_260_790e-15,
    -1.181_259_301_697_458_770e-16,
    1.186_692_254_751_600_333e-18,
];

/// A Bessel evaluation together with its overflow flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesselK {
    pub value: f64,
    /// Set when the true value exceeds `f64::MAX`; `value` is then [`SATURATED`].
    pub saturated: bool,
}

/// Which order derivative to take in [`dnu_xnu_k`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuOrder {
    First,
    Second,
}

fn check_arg(nu: f64, x: f64) -> Result<()> {
    if !nu.is_finite() {
        return Err(Error::domain(format!("Bessel order must be finite, got {nu}")));
    }
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!(
            "Bessel argument must be positive and finite, got {x}"
        )));
    }
    Ok(())
}

/// `K_ν(x)` with an explicit overflow flag.
pub fn bessel_k_flagged(nu: f64, x: f64) -> Result<BesselK> {
    check_arg(nu, x)?;
    let (k, _) = k_pair(nu.abs(), x);
    Ok(if k.is_finite() {
        BesselK {
            value: k,
            saturated: false,
        }
    } else {
        BesselK {
            value: SATURATED,
            saturated: true,
        }
    })
}

/// Modified Bessel function of the second kind, `K_ν(x)`, for `x > 0`.
///
/// Overflow saturates to [`SATURATED`]; use [`bessel_k_flagged`] to detect it.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    bessel_k_flagged(nu, x).map(|k| k.value)
}

/// `dK_ν/dx = -(K_{ν-1}(x) + K_{ν+1}(x)) / 2`.
pub fn bessel_k_dx(nu: f64, x: f64) -> Result<f64> {
    check_arg(nu, x)?;
    let lower = bessel_k(nu - 1.0, x)?;
    let upper = bessel_k(nu + 1.0, x)?;
    Ok(-0.5 * (lower + upper))
}

/// `d²K_ν/dx²` from the modified Bessel equation, `((x²+ν²)K - xK')/x²`.
pub fn bessel_k_dxx(nu: f64, x: f64) -> Result<f64> {
    let k = bessel_k(nu, x)?;
    let kp = bessel_k_dx(nu, x)?;
    Ok(k_second_from(nu, x, k, kp))
}

pub(crate) fn k_second_from(nu: f64, x: f64, k: f64, kp: f64) -> f64 {
    ((x * x + nu * nu) * k - x * kp) / (x * x)
}

/// Step used by the central differences in `ν`: `rel · max(1, ν)`, halved
/// down to `ν/2` when the lower stencil point would leave `ν > 0`.
pub fn nu_step(nu: f64, rel: f64) -> f64 {
    let step = rel * nu.max(1.0);
    if nu - step <= 0.0 {
        nu / 2.0
    } else {
        step
    }
}

fn check_nu_positive(nu: f64, x: f64) -> Result<()> {
    check_arg(nu, x)?;
    if nu <= 0.0 {
        return Err(Error::domain(format!("order derivative needs nu > 0, got {nu}")));
    }
    Ok(())
}

/// `x^ν K_ν(x)`.
pub fn xnu_k(nu: f64, x: f64) -> Result<f64> {
    Ok((nu * x.ln()).exp() * bessel_k(nu, x)?)
}

/// `x^ν K'_ν(x)`.
pub fn xnu_kprime(nu: f64, x: f64) -> Result<f64> {
    Ok((nu * x.ln()).exp() * bessel_k_dx(nu, x)?)
}

/// First or second derivative of `g(ν) = x^ν K_ν(x)` in `ν`, by central
/// differences with the default step.
pub fn dnu_xnu_k(nu: f64, x: f64, order: NuOrder) -> Result<f64> {
    dnu_xnu_k_with_step(nu, x, order, DEFAULT_NU_STEP)
}

/// As [`dnu_xnu_k`] with an explicit relative step.
pub fn dnu_xnu_k_with_step(nu: f64, x: f64, order: NuOrder, rel_step: f64) -> Result<f64> {
    check_nu_positive(nu, x)?;
    let s = nu_step(nu, rel_step);
    let plus = xnu_k(nu + s, x)?;
    let minus = xnu_k(nu - s, x)?;
    Ok(match order {
        NuOrder::First => (plus - minus) / (2.0 * s),
        NuOrder::Second => {
            let mid = xnu_k(nu, x)?;
            (plus - 2.0 * mid + minus) / (s * s)
        }
    })
}

/// `∂/∂ν [x^ν K'_ν(x)]` by central differences with the default step.
pub fn dnu_xnu_kprime(nu: f64, x: f64) -> Result<f64> {
    dnu_xnu_kprime_with_step(nu, x, DEFAULT_NU_STEP)
}

pub fn dnu_xnu_kprime_with_step(nu: f64, x: f64, rel_step: f64) -> Result<f64> {
    check_nu_positive(nu, x)?;
    let s = nu_step(nu, rel_step);
    let plus = xnu_kprime(nu + s, x)?;
    let minus = xnu_kprime(nu - s, x)?;
    Ok((plus - minus) / (2.0 * s))
}

/// `(K_ν(x), K_{ν+1}(x))` for `ν ≥ 0`, `x > 0`. May return infinities.
fn k_pair(nu: f64, x: f64) -> (f64, f64) {
    debug_assert!(nu >= 0.0 && x > 0.0);
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut k0, mut k1) = if x <= 2.0 {
        temme_series(mu, x)
    } else {
        steed_cf2(mu, x)
    };
    let two_over_x = 2.0 / x;
    for i in 1..=(nl as usize) {
        let next = (mu + i as f64) * two_over_x * k1 + k0;
        k0 = k1;
        k1 = next;
        if !k0.is_finite() {
            return (f64::INFINITY, f64::INFINITY);
        }
    }
    (k0, k1)
}

/// `1/Γ(1+v)` for `|v| ≤ 1/2` from its Taylor series.
fn rgamma1p_parts(v: f64) -> (f64, f64) {
    // Returns (gamma1, gamma2) as used by Temme's method:
    // gamma1 = (1/Γ(1-v) - 1/Γ(1+v)) / (2v), gamma2 = (1/Γ(1-v) + 1/Γ(1+v)) / 2.
    let v2 = v * v;
    let mut odd = 0.0;
    let mut even = 0.0;
    for (i, c) in RGAMMA1P.iter().enumerate().rev() {
        if i % 2 == 1 {
            odd = odd * v2 + c;
        } else {
            even = even * v2 + c;
        }
    }
    (-odd, even)
}

#[allow(clippy::many_single_char_names)]
fn temme_series(mu: f64, x: f64) -> (f64, f64) {
    let half_x = 0.5 * x;
    let pimu = PI * mu;
    let fact = if pimu.abs() < f64::EPSILON {
        1.0
    } else {
        pimu / pimu.sin()
    };
    let d = -half_x.ln();
    let e = mu * d;
    let fact2 = if e.abs() < f64::EPSILON {
        1.0
    } else {
        e.sinh() / e
    };
    let (gam1, gam2) = if mu == 0.0 {
        (-EULER_GAMMA, 1.0)
    } else {
        rgamma1p_parts(mu)
    };
    // 1/Γ(1+μ) and 1/Γ(1-μ)
    let gampl = gam2 - mu * gam1;
    let gammi = gam2 + mu * gam1;

    let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
    let mut sum = ff;
    let ee = e.exp();
    let mut p = 0.5 * ee / gampl;
    let mut q = 0.5 / (ee * gammi);
    let mut c = 1.0;
    let dd = half_x * half_x;
    let mut sum1 = p;
    let mu2 = mu * mu;
    for i in 1..MAX_ITER {
        let fi = i as f64;
        ff = (fi * ff + p + q) / (fi * fi - mu2);
        c *= dd / fi;
        p /= fi - mu;
        q /= fi + mu;
        let del = c * ff;
        sum += del;
        let del1 = c * (p - fi * ff);
        sum1 += del1;
        if del.abs() < sum.abs() * f64::EPSILON {
            break;
        }
    }
    (sum, sum1 * 2.0 / x)
}

#[allow(clippy::many_single_char_names)]
fn steed_cf2(mu: f64, x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25 - mu * mu;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    h *= a1;
    let kmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    let kmu1 = kmu * (mu + x + 0.5 - h) / x;
    (kmu, kmu1)
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("{name} requires x > 0, got {x}")));
    }
    Ok(())
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    check_positive("log_gamma", x)?;
    let mut shift = 0.0;
    let mut prod = 1.0;
    let mut z = x;
    while z < 10.0 {
        prod *= z;
        z += 1.0;
        if prod > 1e280 {
            shift += prod.ln();
            prod = 1.0;
        }
    }
    shift += prod.ln();
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2 * (-691.0 / 360_360.0 + inv2 / 156.0))))));
    let stirling = (z - 0.5) * z.ln() - z + 0.5 * (2.0 * PI).ln() + series;
    Ok(stirling - shift)
}

/// `Γ(x)` for `x > 0`.
pub fn gamma(x: f64) -> Result<f64> {
    Ok(log_gamma(x)?.exp())
}

/// Digamma `Ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    let mut acc = 0.0;
    let mut z = x;
    while z < 10.0 {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    Ok(acc + z.ln() - 0.5 / z - tail)
}

/// Trigamma `Ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    let mut acc = 0.0;
    let mut z = x;
    while z < 10.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let tail = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2
                                    * (1.0 / 30.0
                                        - inv2
                                            * (5.0 / 66.0
                                                - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    Ok(acc + tail)
}
