//! The four activation functions under test.
//!
//! ReLU, GELU and Swish are parameter-free. ZC-Swish carries a learnable
//! triple per channel and is defined as
//!
//! ```text
//! f(x) = g * [ (x - c) * σ(β (x - c)) + c * σ(-β c) ],    β = softplus(β_raw)
//! ```
//!
//! The second term cancels the first at `x = 0`, so `f(0) = 0` exactly for any
//! parameters. GELU uses the tanh approximation
//! `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`, which stays within 1e-3 of the
//! erf form.
//!
//! Channel layout: tensors are `[N, C, ...]`; axis 1 selects the parameter
//! triple and everything after it is spatial.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Initial centering anchor.
pub const INIT_C: f64 = 0.01;
/// Initial pre-softplus steepness; softplus(0.5413) ≈ 1.0.
pub const INIT_BETA_RAW: f64 = 0.5413;
pub const INIT_G: f64 = 1.0;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)`, evaluated without overflow for large `|z|`.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `beta > 0`.
pub fn softplus_inv(beta: f64) -> f64 {
    // ln(e^β - 1) = β + ln(1 - e^-β)
    beta + (-(-beta).exp()).ln_1p()
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::cast(GELU_K);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::cast(GELU_K);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::cast(3.0) * a * x * x)
}

#[inline]
pub fn swish<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn swish_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Scalar ZC-Swish with the effective (post-softplus) steepness `beta`.
#[inline]
pub fn zc_swish<T: Scalar>(x: T, c: T, beta: T, g: T) -> T {
    let u = x - c;
    g * (u * sigmoid(beta * u) + c * sigmoid(-(beta * c)))
}

/// Partial derivatives of scalar ZC-Swish with respect to `x`, `c`, `β` and `g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZcPartials<T> {
    pub x: T,
    pub c: T,
    pub beta: T,
    pub g: T,
}

#[inline]
pub fn zc_swish_partials<T: Scalar>(x: T, c: T, beta: T, g: T) -> ZcPartials<T> {
    let one = T::one();
    let u = x - c;
    let s = sigmoid(beta * u);
    let b = sigmoid(-(beta * c));
    let core = s * (one + beta * u * (one - s));
    ZcPartials {
        x: g * core,
        c: g * (b * (one - beta * c * (one - b)) - core),
        beta: g * (u * u * s * (one - s) - c * c * b * (one - b)),
        g: u * s + c * b,
    }
}

/// Which nonlinearity a layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Gelu,
    /// `x·σ(x)`, i.e. fixed β = 1.
    Swish,
    ZcSwish,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Gelu,
        ActivationKind::Swish,
        ActivationKind::ZcSwish,
    ];

    /// Learnable parameters per channel.
    pub fn params_per_channel(self) -> usize {
        match self {
            ActivationKind::ZcSwish => 3,
            _ => 0,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Swish => "swish",
            ActivationKind::ZcSwish => "zcswish",
        }
    }

    /// Evaluate a parameter-free activation. ZC-Swish falls back to its
    /// initial parameters.
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            ActivationKind::Relu => relu(x),
            ActivationKind::Gelu => gelu(x),
            ActivationKind::Swish => swish(x),
            ActivationKind::ZcSwish => zc_swish(
                x,
                T::cast(INIT_C),
                softplus(T::cast(INIT_BETA_RAW)),
                T::cast(INIT_G),
            ),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Relu => "ReLU",
            ActivationKind::Gelu => "GELU",
            ActivationKind::Swish => "Swish",
            ActivationKind::ZcSwish => "ZC-Swish",
        })
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "gelu" => Ok(ActivationKind::Gelu),
            "swish" | "silu" => Ok(ActivationKind::Swish),
            "zcswish" => Ok(ActivationKind::ZcSwish),
            other => Err(Error::config(
                "activation",
                format!("unknown activation `{other}` (expected relu, gelu, swish, zcswish)"),
            )),
        }
    }
}

/// Parameter-free activations as tape ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Gelu,
    Swish,
}

impl Pointwise {
    #[inline]
    pub fn forward<T: Scalar>(self, x: T) -> T {
        match self {
            Pointwise::Relu => relu(x),
            Pointwise::Gelu => gelu(x),
            Pointwise::Swish => swish(x),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Pointwise::Relu => relu_grad(x),
            Pointwise::Gelu => gelu_grad(x),
            Pointwise::Swish => swish_grad(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pointwise::Relu => "relu",
            Pointwise::Gelu => "gelu",
            Pointwise::Swish => "swish",
        }
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu)
}

pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu)
}

pub fn swish_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(swish)
}

/// Per-channel learnable ZC-Swish parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcSwishParams<T = f32> {
    pub c: Vec<T>,
    pub beta_raw: Vec<T>,
    pub g: Vec<T>,
}

impl<T: Scalar> ZcSwishParams<T> {
    /// Initial values: c = 0.01, β_raw = 0.5413, g = 1.
    pub fn init(channels: usize) -> Self {
        Self::uniform(channels, INIT_C, INIT_BETA_RAW, INIT_G)
    }

    pub fn uniform(channels: usize, c: f64, beta_raw: f64, g: f64) -> Self {
        Self {
            c: vec![T::cast(c); channels],
            beta_raw: vec![T::cast(beta_raw); channels],
            g: vec![T::cast(g); channels],
        }
    }

    pub fn new(c: Vec<T>, beta_raw: Vec<T>, g: Vec<T>) -> Result<Self> {
        if c.len() != beta_raw.len() || c.len() != g.len() {
            return Err(Error::shape(
                "zc_swish_params",
                "channel count",
                c.len(),
                format!("beta_raw {} / g {}", beta_raw.len(), g.len()),
            ));
        }
        Ok(Self { c, beta_raw, g })
    }

    pub fn channels(&self) -> usize {
        self.c.len()
    }

    pub fn param_count(&self) -> usize {
        3 * self.channels()
    }

    /// Effective steepness of channel `ch`; always strictly positive.
    pub fn beta(&self, ch: usize) -> T {
        softplus(self.beta_raw[ch])
    }
}

fn channel_layout<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(
            "zc_swish",
            "rank",
            ">= 2 ([N, C, ...])",
            x.rank(),
        ));
    }
    if x.shape()[1] != channels {
        return Err(Error::shape("zc_swish", "channel axis", channels, x.shape()[1]));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((x.shape()[0], inner))
}

/// Apply ZC-Swish channel-wise to `[N, C]` or `[N, C, H, W]` input.
pub fn zc_swish_forward<T: Scalar>(x: &Tensor<T>, params: &ZcSwishParams<T>) -> Result<Tensor<T>> {
    let channels = params.channels();
    let (n, inner) = channel_layout(x, channels)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for ch in 0..channels {
        let c = params.c[ch];
        let g = params.g[ch];
        let beta = params.beta(ch);
        let bias = c * sigmoid(-(beta * c));
        for s in 0..n {
            let start = (s * channels + ch) * inner;
            for v in &mut data[start..start + inner] {
                let u = *v - c;
                *v = g * (u * sigmoid(beta * u) + bias);
            }
        }
    }
    Ok(out)
}

/// Gradients of a ZC-Swish application; parameter gradients are summed over
/// batch and spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcSwishGrads<T> {
    pub x: Tensor<T>,
    pub c: Vec<T>,
    pub beta_raw: Vec<T>,
    pub g: Vec<T>,
}

pub fn zc_swish_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &ZcSwishParams<T>,
    upstream: &Tensor<T>,
) -> Result<ZcSwishGrads<T>> {
    let channels = params.channels();
    let (n, inner) = channel_layout(x, channels)?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape(
            "zc_swish_backward",
            "upstream gradient",
            format!("{:?}", x.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gc = vec![T::zero(); channels];
    let mut gbr = vec![T::zero(); channels];
    let mut gg = vec![T::zero(); channels];
    let xs = x.data();
    let us = upstream.data();
    let gxs = gx.data_mut();
    for ch in 0..channels {
        let c = params.c[ch];
        let g = params.g[ch];
        let beta = params.beta(ch);
        let dbeta_draw = sigmoid(params.beta_raw[ch]);
        let mut acc_beta = T::zero();
        for s in 0..n {
            let start = (s * channels + ch) * inner;
            for i in start..start + inner {
                let d = zc_swish_partials(xs[i], c, beta, g);
                let up = us[i];
                gxs[i] = up * d.x;
                gc[ch] = gc[ch] + up * d.c;
                acc_beta = acc_beta + up * d.beta;
                gg[ch] = gg[ch] + up * d.g;
            }
        }
        gbr[ch] = acc_beta * dbeta_draw;
    }
    Ok(ZcSwishGrads {
        x: gx,
        c: gc,
        beta_raw: gbr,
        g: gg,
    })
}

/// Mean of ZC-Swish (g = 1) over `sample` for anchor `c`.
pub fn mean_zc_swish(sample: &[f64], c: f64, beta: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    sample.iter().map(|&x| zc_swish(x, c, beta, 1.0)).sum::<f64>() / sample.len() as f64
}

/// Bisection for the anchor `c*` that makes the sample mean of ZC-Swish
/// (g = 1, steepness `beta`) vanish.
///
/// The search bracket is `[-10 s, +10 s]` where `s` is the largest of the
/// sample standard deviation, the absolute sample mean and `1 / beta` (for a
/// narrow sample the root sits near `1 / beta`). The sign change closest to
/// `c = 0` is refined. A bracket
/// without any sign change is reported as [`Error::NoRoot`].
pub fn find_centering_anchor(sample: &[f64], beta: f64, tol: f64) -> Result<f64> {
    const OP: &str = "find_centering_anchor";
    if !(tol > 0.0) {
        return Err(Error::invalid(OP, format!("tolerance must be > 0, got {tol}")));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(OP, format!("beta must be > 0, got {beta}")));
    }
    if sample.is_empty() || sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(OP, "sample must be non-empty and finite"));
    }
    let mean_at = |c: f64| mean_zc_swish(sample, c, beta);
    if mean_at(0.0).abs() < tol {
        return Ok(0.0);
    }
    let n = sample.len() as f64;
    let mu = sample.iter().sum::<f64>() / n;
    let std = (sample.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    let radius = 10.0 * std.max(mu.abs()).max(1.0 / beta);
    // The mean can change sign twice inside the bracket, so scan a grid
    // outward from c = 0 and bisect the sign change nearest the origin.
    const STEPS: i32 = 64;
    let mut found = None;
    for k in 0..STEPS {
        for dir in [1.0, -1.0] {
            let a = dir * radius * f64::from(k) / f64::from(STEPS);
            let b = dir * radius * f64::from(k + 1) / f64::from(STEPS);
            let (fa, fb) = (mean_at(a), mean_at(b));
            if fb.abs() < tol {
                return Ok(b);
            }
            if fa.signum() != fb.signum() {
                found = Some((a, b, fa));
                break;
            }
        }
        if found.is_some() {
            break;
        }
    }
    let Some((mut lo, mut hi, mut f_lo)) = found else {
        return Err(Error::NoRoot {
            lo: -radius,
            hi: radius,
            mean_lo: mean_at(-radius),
            mean_hi: mean_at(radius),
        });
    };
    let mut best = (lo, f_lo.abs());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = mean_at(mid);
        if f_mid.abs() < best.1 {
            best = (mid, f_mid.abs());
        }
        if f_mid.abs() < tol {
            return Ok(mid);
        }
        if mid == lo || mid == hi {
            break;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NotConverged {
        c: best.0,
        residual: best.1,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_at_init_is_one() {
        let b: f64 = softplus(INIT_BETA_RAW);
        assert!((b - 1.0).abs() < 1e-4, "{b}");
        assert!((softplus_inv(1.0) - 0.541_324_854_612_918).abs() < 1e-12);
        assert!((softplus(softplus_inv(2.5)) - 2.5f64).abs() < 1e-12);
    }

    #[test]
    fn softplus_positive_for_extreme_inputs() {
        for z in [-700.0f64, -40.0, -3.0, 0.0, 3.0, 40.0, 700.0] {
            let b = softplus(z);
            assert!(b > 0.0 && b.is_finite(), "softplus({z}) = {b}");
        }
        assert!(softplus(-20.0f32) > 0.0);
    }

    #[test]
    fn zc_origin_is_exact() {
        assert_eq!(zc_swish(0.0f32, 1.3, 0.7, -1.9), 0.0);
        assert_eq!(zc_swish(0.0f64, -0.4, 5.0, 2.0), 0.0);
    }

    #[test]
    fn zc_reduces_to_swish_at_zero_anchor() {
        let v: f64 = zc_swish(1.0, 0.0, 1.0, 1.0);
        assert!((v - 0.731_058_6).abs() < 1e-7);
    }

    #[test]
    fn zc_default_params_at_one() {
        // 50-digit evaluation of the closed form at c=0.01, β_raw=0.5413, g=1, x=1.
        let beta = softplus(INIT_BETA_RAW);
        let v = zc_swish(1.0, INIT_C, beta, INIT_G);
        assert!((v - 0.726_769_002_245_675_4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zc_grad_x_at_anchor_is_half_gain() {
        let d = zc_swish_partials(0.7f64, 0.7, 2.3, 1.6);
        assert_eq!(d.x, 0.8);
    }

    #[test]
    fn zc_grad_g_is_output_over_g() {
        for &(x, c, beta, g) in &[(1.2f64, 0.3, 0.8, 1.7), (-2.0, -0.5, 3.0, -0.4)] {
            let d = zc_swish_partials(x, c, beta, g);
            assert!((d.g - zc_swish(x, c, beta, g) / g).abs() < 1e-14);
        }
    }

    #[test]
    fn baseline_values() {
        assert_eq!(relu(-1.0f32), 0.0);
        assert_eq!(relu(2.0f32), 2.0);
        assert_eq!(swish(0.0f64), 0.0);
        assert!((swish(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(gelu(0.0f64), 0.0);
        // 0.5 (1 + tanh(sqrt(2/pi) * 1.044715)) at 30 digits
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_7).abs() < 1e-6);
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([2, 3, 4, 4]);
        let err = zc_swish_forward(&x, &ZcSwishParams::init(4)).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
    }

    #[test]
    fn forward_uses_per_channel_params() {
        let params = ZcSwishParams::<f64>::new(vec![0.0, 0.5], vec![softplus_inv(1.0); 2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::<f64>::from_f64([1, 2, 1, 2], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = zc_swish_forward(&x, &params).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let ch = i / 2;
            let expect = zc_swish(x.data()[i], params.c[ch], 1.0, params.g[ch]);
            assert!((v - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn activation_kind_parses() {
        assert_eq!("ZC-Swish".parse::<ActivationKind>().unwrap(), ActivationKind::ZcSwish);
        assert_eq!("silu".parse::<ActivationKind>().unwrap(), ActivationKind::Swish);
        assert!("mish".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn centering_anchor_all_zero_sample() {
        assert_eq!(find_centering_anchor(&[0.0; 16], 1.0, 1e-9).unwrap(), 0.0);
    }

    #[test]
    fn centering_anchor_symmetric_pair() {
        let sample = [-1.5, 1.5];
        let tol = 1e-9;
        let c = find_centering_anchor(&sample, 1.0, tol).unwrap();
        assert!(mean_zc_swish(&sample, c, 1.0).abs() < tol);
        assert!(mean_zc_swish(&sample, 0.0, 1.0) > 0.0);
    }

    #[test]
    fn centering_anchor_for_zero_spread_sample() {
        // No spread, so the bracket comes from 1 / beta and the mean.
        for (v, beta) in [(2.0, 1.0), (0.05, 1.0), (-0.3, 4.0)] {
            let sample = [v; 8];
            let c = find_centering_anchor(&sample, beta, 1e-9).unwrap();
            assert!(mean_zc_swish(&sample, c, beta).abs() < 1e-9, "v {v} beta {beta} c {c}");
        }
    }
}
