//! Activation-curve tables.
//!
//! `baseline.csv`: `x,relu,gelu,swish,zcswish` with ZC-Swish at its initial
//! parameters. `sweep_c.csv`, `sweep_g.csv`, `sweep_beta.csv`:
//! `x,c,beta,g,zcswish`, varying one parameter while the others stay at the
//! `--fixed-*` values. β is the effective slope.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};

use zcswish_core::activations::{gelu, relu, softplus, swish, zc_swish, INIT_BETA_RAW, INIT_C, INIT_G};

#[derive(clap::Args)]
pub struct CurvesArgs {
    #[arg(long, default_value = "curves")]
    out: PathBuf,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    x_min: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    x_max: f64,
    #[arg(long, default_value_t = 201)]
    points: usize,
    /// Explicit x values; replaces the min/max/points grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,-0.5,0,0.5,1")]
    c_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0.5,1,1.5,2")]
    g_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,5")]
    beta_values: Vec<f64>,
    #[arg(long, default_value_t = INIT_C, allow_negative_numbers = true)]
    fixed_c: f64,
    #[arg(long, default_value_t = 1.0)]
    fixed_beta: f64,
    #[arg(long, default_value_t = INIT_G, allow_negative_numbers = true)]
    fixed_g: f64,
}

/// `n` evenly spaced points from `min` to `max` inclusive.
pub fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..n)
            .map(|i| min + (max - min) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Clone, Copy)]
enum Swept {
    C,
    G,
    Beta,
}

fn write_sweep(path: &Path, xs: &[f64], values: &[f64], swept: Swept, fixed: (f64, f64, f64)) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "c", "beta", "g", "zcswish"])?;
    for &v in values {
        let (c, beta, g) = match swept {
            Swept::C => (v, fixed.1, fixed.2),
            Swept::Beta => (fixed.0, v, fixed.2),
            Swept::G => (fixed.0, fixed.1, v),
        };
        for &x in xs {
            w.serialize((x, c, beta, g, zc_swish(x, c, beta, g)))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: CurvesArgs) -> Result<ExitCode> {
    let xs = match &args.x {
        Some(xs) => xs.clone(),
        None => linspace(args.x_min, args.x_max, args.points),
    };
    if xs.is_empty() {
        bail!("empty x grid");
    }
    for (name, v) in [
        ("--c-values", &args.c_values),
        ("--g-values", &args.g_values),
        ("--beta-values", &args.beta_values),
    ] {
        if v.is_empty() {
            bail!("empty sweep grid for {name}");
        }
    }
    if let Some(b) = args.beta_values.iter().chain([&args.fixed_beta]).find(|b| !(**b > 0.0)) {
        bail!("beta must be positive, got {b}");
    }
    std::fs::create_dir_all(&args.out)?;

    let beta0 = softplus(INIT_BETA_RAW);
    let mut w = csv::Writer::from_path(args.out.join("baseline.csv"))?;
    w.write_record(["x", "relu", "gelu", "swish", "zcswish"])?;
    for &x in &xs {
        w.serialize((x, relu(x), gelu(x), swish(x), zc_swish(x, INIT_C, beta0, INIT_G)))?;
    }
    w.flush()?;

    let fixed = (args.fixed_c, args.fixed_beta, args.fixed_g);
    write_sweep(&args.out.join("sweep_c.csv"), &xs, &args.c_values, Swept::C, fixed)?;
    write_sweep(&args.out.join("sweep_g.csv"), &xs, &args.g_values, Swept::G, fixed)?;
    write_sweep(&args.out.join("sweep_beta.csv"), &xs, &args.beta_values, Swept::Beta, fixed)?;
    eprintln!("wrote 4 tables over {} points to {}", xs.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_grid_hits_zero() {
        let xs = linspace(-5.0, 5.0, 201);
        assert_eq!(xs.len(), 201);
        assert_eq!(xs[100], 0.0);
        assert_eq!((xs[0], xs[200]), (-5.0, 5.0));
    }
}
