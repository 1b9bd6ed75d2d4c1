//! Central-difference gradient checking.
//!
//! The function under test builds a graph on a fresh tape from its inputs.
//! Its output is reduced with a fixed random projection so every output
//! coordinate contributes, and each input coordinate is compared against
//!
//! ```text
//! |analytic - numeric| / max(1, |analytic|, |numeric|)
//! ```

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::activations::{Pointwise, softplus_inv};
use crate::error::{Error, Result};

/// A differentiable function of several tensors.
pub type GraphFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Send + Sync>;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step; defaults to the precision's [`Scalar::FD_STEP`].
    pub step: Option<f64>,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: None,
            max_coords_per_input: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Worst error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn run<T: Scalar, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

fn projected<T: Scalar, F>(f: &F, inputs: &[Tensor<T>], proj: &Tensor<T>) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = run(f, inputs)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(&y, &r)| y.as_f64() * r.as_f64())
        .sum())
}

/// Maximum relative error between backpropagated and central-difference
/// gradients of `f` over all (or a sample of) input coordinates.
pub fn gradcheck<T: Scalar, F>(f: F, inputs: &[Tensor<T>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = run(&f, inputs)?;
    let (tape2, _, out2) = run(&f, inputs)?;
    let same = tape
        .value(out)
        .data()
        .iter()
        .zip(tape2.value(out2).data())
        .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
    if !same || tape.value(out).shape() != tape2.value(out2).shape() {
        return Err(Error::NonDeterministic);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out_shape = tape.value(out).shape().to_vec();
    let proj: Tensor<T> = if tape.value(out).numel() == 1 {
        Tensor::full(out_shape, T::one())
    } else {
        let vals: Vec<T> = (0..tape.value(out).numel())
            .map(|_| {
                let mag = 0.5 + rng.random::<f64>();
                T::cast(if rng.random::<bool>() { mag } else { -mag })
            })
            .collect();
        Tensor::new(out_shape, vals)?
    };
    let grads = tape.backward_with(out, proj.clone())?;
    let h = opts.step.unwrap_or(T::FD_STEP);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = inputs[i].data()[j];
            let xp = x0 + T::cast(h);
            let xm = x0 - T::cast(h);
            work[i].data_mut()[j] = xp;
            let lp = projected(&f, &work, &proj)?;
            work[i].data_mut()[j] = xm;
            let lm = projected(&f, &work, &proj)?;
            work[i].data_mut()[j] = x0;
            let numeric = (lp - lm) / (xp.as_f64() - xm.as_f64());
            let a = analytic.data()[j].as_f64();
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            let err = if err.is_nan() { f64::INFINITY } else { err };
            report.coords_checked += 1;
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// One named entry of a gradient-check suite.
pub struct OpCheck<T> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub f: GraphFn<T>,
}

impl<T: Scalar> OpCheck<T> {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            f: Box::new(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn run_suite<T: Scalar>(checks: &[OpCheck<T>], tol: f64, opts: &GradcheckOptions) -> Result<Vec<OpResult>> {
    checks
        .iter()
        .map(|c| {
            let r = gradcheck(&c.f, &c.inputs, opts)?;
            Ok(OpResult {
                name: c.name,
                max_rel_error: r.max_rel_error,
                passed: r.max_rel_error <= tol,
            })
        })
        .collect()
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("shape matches")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = 0.1 + rng.random::<f64>();
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("shape matches")
}

/// Distinct values at least 0.05 apart, so no pooling window is near a tie.
fn well_separated<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.4).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::from_f64(shape.to_vec(), &v).expect("shape matches")
}

/// Every differentiable tape op on small random inputs.
pub fn standard_suite<T: Scalar>(seed: u64) -> Vec<OpCheck<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta_raw: Vec<f64> = (0..3).map(|_| softplus_inv(0.5 + rng.random::<f64>())).collect();
    vec![
        OpCheck::new("add", vec![normal(&mut rng, &[2, 3], 1.0), normal(&mut rng, &[2, 3], 1.0)], |t, v| {
            t.add(v[0], v[1])
        }),
        OpCheck::new("mul", vec![normal(&mut rng, &[2, 3], 1.0), normal(&mut rng, &[2, 3], 1.0)], |t, v| {
            t.mul(v[0], v[1])
        }),
        OpCheck::new("scale", vec![normal(&mut rng, &[4], 1.0)], |t, v| Ok(t.scale(v[0], T::cast(-1.75)))),
        OpCheck::new("sum", vec![normal(&mut rng, &[2, 2], 1.0)], |t, v| Ok(t.sum(v[0]))),
        OpCheck::new("flatten", vec![normal(&mut rng, &[2, 2, 2, 2], 1.0)], |t, v| t.flatten(v[0])),
        OpCheck::new(
            "conv2d",
            vec![
                normal(&mut rng, &[2, 2, 4, 4], 1.0),
                normal(&mut rng, &[3, 2, 3, 3], 0.5),
                normal(&mut rng, &[3], 0.5),
            ],
            |t, v| t.conv2d(v[0], v[1], v[2]),
        ),
        OpCheck::new("maxpool2", vec![well_separated(&mut rng, &[1, 2, 4, 4])], |t, v| t.maxpool2(v[0])),
        OpCheck::new(
            "linear",
            vec![
                normal(&mut rng, &[2, 3], 1.0),
                normal(&mut rng, &[4, 3], 1.0),
                normal(&mut rng, &[4], 1.0),
            ],
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
        OpCheck::new("dropout", vec![normal(&mut rng, &[2, 5], 1.0)], |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            t.dropout(v[0], 0.5, true, &mut r)
        }),
        OpCheck::new("softmax_cross_entropy", vec![normal(&mut rng, &[3, 5], 1.0)], |t, v| {
            t.softmax_cross_entropy(v[0], &[4, 0, 2])
        }),
        OpCheck::new("relu", vec![away_from_zero(&mut rng, &[3, 4])], |t, v| {
            Ok(t.pointwise(v[0], Pointwise::Relu))
        }),
        OpCheck::new("gelu", vec![normal(&mut rng, &[3, 4], 2.0)], |t, v| {
            Ok(t.pointwise(v[0], Pointwise::Gelu))
        }),
        OpCheck::new("swish", vec![normal(&mut rng, &[3, 4], 2.0)], |t, v| {
            Ok(t.pointwise(v[0], Pointwise::Swish))
        }),
        OpCheck::new(
            "zcswish",
            vec![
                normal(&mut rng, &[2, 3, 2, 2], 2.0),
                normal(&mut rng, &[3], 0.5),
                Tensor::from_f64([3], &beta_raw).expect("three channels"),
                normal(&mut rng, &[3], 1.0),
            ],
            |t, v| t.zc_swish(v[0], v[1], v[2], v[3]),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::<f64>::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let r = gradcheck(|t, v| Ok(t.scale(v[0], 1.0)), &[x], &GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn swish_within_tolerance() {
        let x = Tensor::<f64>::from_f64([7], &[-6.0, -2.5, -0.3, 0.0, 0.4, 1.9, 5.5]).unwrap();
        let r = gradcheck(
            |t, v| Ok(t.pointwise(v[0], Pointwise::Swish)),
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let calls = AtomicU64::new(0);
        let x = Tensor::<f64>::full([2], 1.0);
        let err = gradcheck(
            |t, v| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                Ok(t.scale(v[0], 1.0 + k))
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic));
    }

    #[test]
    fn corrupted_backward_fails_with_name() {
        let x = Tensor::<f64>::from_f64([3], &[0.1, 0.2, 0.3]).unwrap();
        let checks = vec![
            OpCheck::new("scale", vec![x.clone()], |t, v| Ok(t.scale(v[0], 2.0))),
            OpCheck::new("broken_square", vec![x], |t, v| {
                let value = t.value(v[0]).map(|a| a * a);
                // d(x²)/dx is 2x; report x instead.
                Ok(t.custom("broken_square", v[0], value, Box::new(|x, g| {
                    let mut out = g.clone();
                    for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
                        *o *= xi;
                    }
                    out
                })))
            }),
        ];
        let results = run_suite(&checks, 1e-5, &GradcheckOptions::default()).unwrap();
        assert!(results[0].passed);
        assert!(!results[1].passed);
        assert_eq!(results[1].name, "broken_square");
    }

    #[test]
    fn standard_suite_passes_in_f64() {
        let results = run_suite(&standard_suite::<f64>(1), 1e-5, &GradcheckOptions::default()).unwrap();
        for r in &results {
            assert!(r.passed, "{} error {}", r.name, r.max_rel_error);
        }
    }
}
