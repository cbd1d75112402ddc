//! Empirical moment scaling of one- and two-parameter processes.
//!
//! For dyadic gaps `g = 2^j` steps, the empirical `L^{q/level}` norm of
//! `A_{t_{ig}, t_{(i+1)g}}` is taken over all aligned pairs of all samples,
//! and the log-log slope against the gap length estimates `level·β` in a
//! moment hypothesis `‖A_{s,t}‖_{L^{q/level}} ≲ |t − s|^{level·β}`. This is a
//! scaling diagnostic only: it does not construct continuous modifications.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit_log_log;
use crate::error::{shape_err, Error, Result};
use crate::grid_paths::{GridPath, StoredSample, TimeGrid, TwoParamGrid};
use crate::rng::pairwise_sum;
use crate::tensor::Tensor;

pub const MIN_SAMPLES: usize = 100;

/// Empirical norm at one dyadic scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleNorm {
    pub gap_steps: usize,
    pub scale: f64,
    pub pairs: usize,
    pub norm: f64,
}

/// Result of [`kolmogorov_scaling_fit`]; `exponent` is the fitted slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub level: usize,
    pub q: f64,
    /// Moment order `q / level`.
    pub moment: f64,
    pub samples: usize,
    pub scales: Vec<ScaleNorm>,
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

fn sample_grid(s: &StoredSample) -> &TimeGrid {
    match s {
        StoredSample::Path(p) => p.grid(),
        StoredSample::TwoParam(a) => a.grid(),
    }
}

fn pair_value(s: &StoredSample, i: usize, j: usize) -> Result<Tensor> {
    match s {
        StoredSample::Path(p) => Ok(p.value(j) - p.value(i)),
        StoredSample::TwoParam(a) => a.value(i, j),
    }
}

/// Fits the moment-scaling exponent of `samples` at `level ∈ {1, 2, 3}` with
/// moment parameter `q ≥ level`. Path samples contribute increments, two
/// parameter samples their values. All samples must share one grid.
pub fn kolmogorov_scaling_fit(samples: &[StoredSample], level: usize, q: f64) -> Result<ScalingFit> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientData(format!("{} samples, need at least {MIN_SAMPLES}", samples.len())));
    }
    if !(1..=3).contains(&level) {
        return Err(Error::Invalid(format!("level must be 1, 2 or 3, got {level}")));
    }
    if !q.is_finite() || q < level as f64 {
        return Err(Error::Invalid(format!("q = {q} must be at least the level {level}")));
    }
    let grid = *sample_grid(&samples[0]);
    if samples.iter().any(|s| *sample_grid(s) != grid) {
        return shape_err("samples live on different grids");
    }
    let n = grid.n_steps();
    let gaps: Vec<usize> = (0..usize::BITS).map(|j| 1usize << j).take_while(|&g| g <= n && n.is_multiple_of(g)).collect();
    if gaps.len() < 2 {
        return Err(Error::InsufficientData(format!("{n} steps admit fewer than two dyadic scales")));
    }
    let p = q / level as f64;
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            gaps.iter()
                .map(|&g| {
                    let terms = (0..n / g).map(|i| pair_value(s, i * g, (i + 1) * g).map(|v| v.norm().powf(p)));
                    Ok(pairwise_sum(&terms.collect::<Result<Vec<_>>>()?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let scales: Vec<ScaleNorm> = gaps
        .iter()
        .enumerate()
        .map(|(j, &g)| {
            let sums: Vec<f64> = per_sample.iter().map(|v| v[j]).collect();
            let pairs = samples.len() * (n / g);
            ScaleNorm { gap_steps: g, scale: g as f64 * grid.dt(), pairs, norm: (pairwise_sum(&sums) / pairs as f64).powf(1.0 / p) }
        })
        .collect();
    let table: Vec<(f64, f64)> = scales.iter().map(|s| (s.scale, s.norm)).collect();
    let fit = fit_log_log(&table, 2)?;
    Ok(ScalingFit {
        level,
        q,
        moment: p,
        samples: samples.len(),
        scales,
        exponent: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
    })
}

/// `Π(R; M)_{s,t} = ∫_s^t R_{s,r} ⊗ dM_r` with `R_{s,r} = δY_{s,r} − Y′_s δX_{s,r}`,
/// as left-point Itô sums on the grid.
///
/// The result stores every dyadic-aligned block `(i·2^j, (i+1)·2^j)`
/// explicitly; other pairs are not reconstructed and read as zero sums of the
/// (vanishing) consecutive blocks.
pub fn iterated_remainder_integral(y: &GridPath, yp: &GridPath, x: &GridPath, m: &GridPath) -> Result<TwoParamGrid> {
    let g = *y.grid();
    if yp.grid() != &g || x.grid() != &g || m.grid() != &g {
        return shape_err("remainder inputs on different grids");
    }
    if y.shape().len() != 1 || x.shape().len() != 1 || m.shape().len() != 1 || yp.shape() != [y.shape()[0], x.shape()[0]] {
        return shape_err("remainder needs vector Y, X, M and Y′ of shape (dim Y, dim X)");
    }
    let n = g.n_steps();
    let shape = [y.shape()[0], m.shape()[0]];
    let mut out = TwoParamGrid::zeros(g, &shape, crate::grid_paths::ChenRule::Additive)?;
    let mut gap = 2;
    while gap <= n {
        for s in (0..=n - gap).step_by(gap) {
            let mut acc = Tensor::zeros(&shape);
            for k in s + 1..s + gap {
                let r = &(y.value(k) - y.value(s)) - &yp.value(s).contract(&(x.value(k) - x.value(s)), 1)?;
                acc += &r.outer(&m.step(k));
            }
            out.set_block(s, s + gap, acc)?;
        }
        gap *= 2;
    }
    Ok(out)
}
