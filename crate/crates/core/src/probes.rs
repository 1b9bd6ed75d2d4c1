//! Layer-wise diagnostics for activation mean-shift.
//!
//! * [`layer_stats`]: mean, std, dead fraction and weight-gradient norm at
//!   every activation site of a PlainNet.
//! * [`grad_flow`]: weight-gradient norms per layer and the first/last conv
//!   ratio.
//! * [`drift_experiment`]: push samples through a freshly initialized dense
//!   stack and record how the post-activation mean evolves with depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::activations::{self, find_centering_anchor, softplus, ActivationKind, INIT_BETA_RAW, INIT_C, INIT_G};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::plainnet::{Mode, ParamRole, PlainNet, SiteKind};

/// `|a|` below this counts as a dead activation.
pub const DEAD_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub site: SiteKind,
    pub mean: f64,
    pub std: f64,
    pub dead_frac: f64,
    /// L2 norm of the gradient at the weights feeding this site.
    pub grad_norm: f64,
}

/// Mean, population std and dead fraction of a tensor, accumulated in `f64`.
pub fn tensor_moments<T: Scalar>(t: &Tensor<T>, dead_threshold: f64) -> (f64, f64, f64) {
    let n = t.numel();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let vals = t.data().iter().map(|v| v.as_f64());
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let dead = vals.filter(|v| v.abs() < dead_threshold).count();
    (mean, var.sqrt(), dead as f64 / n as f64)
}

/// One record per activation site (each conv block, then the head ReLU),
/// measured on `images` in evaluation mode. Gradient norms come from the
/// mean cross-entropy against `labels`.
pub fn layer_stats<T: Scalar>(
    model: &PlainNet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    dead_threshold: f64,
) -> Result<Vec<LayerStats>> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, images, Mode::Eval)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(pass
        .sites
        .iter()
        .map(|site| {
            let (mean, std, dead_frac) = tensor_moments(tape.value(site.output), dead_threshold);
            LayerStats {
                layer: site.index,
                site: site.kind,
                mean,
                std,
                dead_frac,
                grad_norm: grads.wrt(pass.params[site.weight_param]).sq_norm().sqrt(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradFlowReport {
    /// `(parameter name, L2 norm)` for every conv and linear weight.
    pub layers: Vec<(String, f64)>,
    /// First conv norm divided by last conv norm.
    pub first_last_ratio: f64,
}

pub fn grad_flow<T: Scalar>(model: &PlainNet<T>, images: &Tensor<T>, labels: &[usize]) -> Result<GradFlowReport> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, images, Mode::Eval)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(flow_report(model, |i| grads.wrt(pass.params[i]).sq_norm().sqrt()))
}

/// Gradient flow for an arbitrary upstream gradient on the logits.
pub fn grad_flow_from_logits<T: Scalar>(
    model: &PlainNet<T>,
    images: &Tensor<T>,
    logit_grad: Tensor<T>,
) -> Result<GradFlowReport> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, images, Mode::Eval)?;
    let grads = tape.backward_with(pass.logits, logit_grad)?;
    Ok(flow_report(model, |i| grads.wrt(pass.params[i]).sq_norm().sqrt()))
}

fn flow_report<T: Scalar>(model: &PlainNet<T>, norm: impl Fn(usize) -> f64) -> GradFlowReport {
    let mut layers = Vec::new();
    let mut convs = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        if p.spec.role.is_weight() {
            let n = norm(i);
            if p.spec.role == ParamRole::ConvWeight {
                convs.push(n);
            }
            layers.push((p.spec.name.clone(), n));
        }
    }
    let first_last_ratio = match (convs.first(), convs.last()) {
        (Some(&f), Some(&l)) if l > 0.0 => f / l,
        (Some(&0.0), Some(_)) => 0.0,
        _ => f64::INFINITY,
    };
    GradFlowReport {
        layers,
        first_last_ratio,
    }
}

/// `n` draws from N(0, 1), deterministic in `seed`.
pub fn gaussian_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDist {
    StandardNormal,
    Zeros,
}

/// How ZC-Swish anchors are chosen in the drift stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Initial parameters (c = 0.01, β ≈ 1, g = 1).
    Init,
    /// Per layer, solve for the anchor that zeroes the mean output
    /// (β = 1, g = 1) with the given tolerance.
    Oracle { tol: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub activation: ActivationKind,
    pub depth: usize,
    pub width: usize,
    pub samples: usize,
    pub seed: u64,
    pub input: InputDist,
    /// Include the uniform-initialized bias in each dense layer.
    pub bias: bool,
    pub centering: Centering,
    /// Record per-unit means for every layer.
    pub per_channel: bool,
}

impl DriftConfig {
    pub fn new(activation: ActivationKind, depth: usize, seed: u64) -> Self {
        Self {
            activation,
            depth,
            width: 64,
            samples: 2048,
            seed,
            input: InputDist::StandardNormal,
            bias: true,
            centering: Centering::Init,
            per_channel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftLayer {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    /// Anchor used at this layer when the stack is oracle-centered.
    pub anchor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_means: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub activation: ActivationKind,
    pub seed: u64,
    pub layers: Vec<DriftLayer>,
    /// Whether `|mean|` never decreases from one layer to the next.
    pub abs_mean_nondecreasing: bool,
    /// Spearman rank correlation of `|mean|` against layer index; `None`
    /// with fewer than two layers or constant series.
    pub spearman: Option<f64>,
}

impl DriftReport {
    pub fn final_abs_mean(&self) -> f64 {
        self.layers.last().map_or(0.0, |l| l.mean.abs())
    }
}

/// Mean-shift through a dense `width`-wide stack at initialization.
///
/// Layer `l` computes `a_l = act(a_{l-1} Wᵀ + b)` with `W` and `b` drawn from
/// `U(-1/sqrt(width), 1/sqrt(width))`; statistics pool every element of `a_l`.
pub fn drift_experiment(cfg: &DriftConfig) -> Result<DriftReport> {
    const OP: &str = "drift_experiment";
    if cfg.depth == 0 || cfg.width == 0 || cfg.samples == 0 {
        return Err(Error::invalid(OP, "depth, width and samples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, w) = (cfg.samples, cfg.width);
    let mut a: Vec<f64> = match cfg.input {
        InputDist::StandardNormal => (0..n * w).map(|_| rng.sample(StandardNormal)).collect(),
        InputDist::Zeros => vec![0.0; n * w],
    };
    let bound = 1.0 / (w as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.depth);
    for layer in 0..cfg.depth {
        let weight: Vec<f64> = (0..w * w).map(|_| rng.random_range(-bound..bound)).collect();
        let bias: Vec<f64> = (0..w)
            .map(|_| rng.random_range(-bound..bound))
            .map(|b| if cfg.bias { b } else { 0.0 })
            .collect();
        let mut z = vec![0.0; n * w];
        for s in 0..n {
            let row = &a[s * w..(s + 1) * w];
            for o in 0..w {
                let dot = row
                    .iter()
                    .zip(&weight[o * w..(o + 1) * w])
                    .fold(0.0, |acc, (x, k)| acc + x * k);
                z[s * w + o] = dot + bias[o];
            }
        }
        let mut anchor = None;
        a = match cfg.activation {
            ActivationKind::ZcSwish => {
                let (c, beta) = match cfg.centering {
                    Centering::Init => (INIT_C, softplus(INIT_BETA_RAW)),
                    Centering::Oracle { tol } => {
                        let c = find_centering_anchor(&z, 1.0, tol)?;
                        anchor = Some(c);
                        (c, 1.0)
                    }
                };
                z.iter().map(|&x| activations::zc_swish(x, c, beta, INIT_G)).collect()
            }
            kind => z.iter().map(|&x| kind.apply(x)).collect(),
        };
        let t = Tensor::new([n, w], a.clone())?;
        let (mean, std, _) = tensor_moments(&t, DEAD_THRESHOLD);
        let channel_means = cfg.per_channel.then(|| {
            (0..w)
                .map(|o| (0..n).map(|s| a[s * w + o]).sum::<f64>() / n as f64)
                .collect()
        });
        layers.push(DriftLayer {
            layer,
            mean,
            std,
            anchor,
            channel_means,
        });
    }
    let abs: Vec<f64> = layers.iter().map(|l| l.mean.abs()).collect();
    let depth_idx: Vec<f64> = (0..abs.len()).map(|i| i as f64).collect();
    Ok(DriftReport {
        activation: cfg.activation,
        seed: cfg.seed,
        abs_mean_nondecreasing: abs.windows(2).all(|p| p[1] >= p[0]),
        spearman: spearman(&depth_idx, &abs),
        layers,
    })
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` if undefined.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// One-sided one-sample t-test of `mean > 0`; returns the p-value.
pub fn one_sided_positive_p(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("one_sided_positive_p", "need at least two samples"));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::invalid("one_sided_positive_p", e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plainnet::{Depth, PlainNetConfig};

    #[test]
    fn dead_fraction_of_negative_relu_input() {
        let x = Tensor::<f64>::from_f64([1, 4], &[-1.0, -0.5, -3.0, -0.01]).unwrap();
        let y = crate::activations::relu_forward(&x);
        let (_, _, dead) = tensor_moments(&y, DEAD_THRESHOLD);
        assert_eq!(dead, 1.0);
    }

    #[test]
    fn dead_fraction_shrinks_with_threshold() {
        let x = Tensor::<f64>::from_f64([6], &[0.0, 1e-9, 1e-7, 1e-5, 1e-3, 1.0]).unwrap();
        let mut last = 1.0;
        for th in [1.0, 1e-2, 1e-4, 1e-6, 1e-8, 1e-10] {
            let (_, _, d) = tensor_moments(&x, th);
            assert!((0.0..=1.0).contains(&d));
            assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn zero_weights_give_zero_means() {
        for kind in ActivationKind::ALL {
            let cfg = PlainNetConfig::new(Depth::D8, kind).with_width_divisor(32);
            let model = PlainNet::<f64>::build_zeroed(cfg).unwrap();
            let images = Tensor::full([2, 3, 32, 32], 0.7);
            let stats = layer_stats(&model, &images, &[1, 2], DEAD_THRESHOLD).unwrap();
            assert_eq!(stats.len(), model.site_count());
            for s in stats {
                assert_eq!(s.mean, 0.0, "{kind} layer {}", s.layer);
            }
        }
    }

    #[test]
    fn zero_logit_gradient_gives_zero_flow() {
        let cfg = PlainNetConfig::new(Depth::D8, ActivationKind::Swish).with_width_divisor(32);
        let model = PlainNet::<f32>::build(cfg, 4).unwrap();
        let images = Tensor::full([2, 3, 32, 32], 0.3);
        let r = grad_flow_from_logits(&model, &images, Tensor::zeros([2, 100])).unwrap();
        assert!(r.layers.iter().all(|(_, n)| *n == 0.0));
        assert_eq!(r.layers.len(), 8);
    }

    #[test]
    fn drift_zero_input_without_bias() {
        for kind in ActivationKind::ALL {
            let mut cfg = DriftConfig::new(kind, 1, 0);
            cfg.input = InputDist::Zeros;
            cfg.bias = false;
            let r = drift_experiment(&cfg).unwrap();
            assert_eq!(r.layers[0].mean, 0.0);
        }
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]), Some(1.0));
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]), Some(-1.0));
        assert_eq!(spearman(&[1., 2., 3.], &[5., 5., 5.]), None);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn t_test_direction() {
        assert!(one_sided_positive_p(&[1.0, 1.1, 0.9, 1.05]).unwrap() < 0.001);
        assert!(one_sided_positive_p(&[-1.0, -1.1, -0.9, -1.05]).unwrap() > 0.999);
    }
}
