//! Monte-Carlo transition kernels on grids and the probes built on them.
//!
//! Total variation between continuous laws is only ever computed through a
//! declared grid, so every reported distance carries its grid. Binning can
//! only merge mass, hence the grid TV is a lower bound on the true TV up to
//! sampling noise.

use serde::{Deserialize, Serialize};

use crate::dynamics::{model_norm, norm, ModelSpec, State};
use crate::error::{invalid, Error, Result};
use crate::rng::{par_ensemble, Stream};
use crate::stats::{mean_se, ols, wilson_interval, LineFit, MeanEstimate};

/// Default bins per retained axis.
pub const DEFAULT_BINS: usize = 64;
/// Default half-width of the grid box, in stationary scales.
pub const DEFAULT_BOX_SCALES: f64 = 8.0;
/// Normal quantile used for Wilson intervals (two-sided 99%).
pub const WILSON_Z: f64 = 2.576;

/// Product grid over the first `m ≤ 3` coordinates plus one overflow cell
/// for mass outside the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRaw")]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    bins: usize,
}

#[derive(Deserialize)]
struct GridRaw {
    lower: Vec<f64>,
    upper: Vec<f64>,
    bins: usize,
}

impl TryFrom<GridRaw> for Grid {
    type Error = Error;
    fn try_from(r: GridRaw) -> Result<Self> {
        Grid::new(r.lower, r.upper, r.bins)
    }
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins: usize) -> Result<Self> {
        let m = lower.len();
        if m == 0 || m > 3 {
            return Err(invalid("grid", format!("retains 1 to 3 coordinates, got {m}")));
        }
        if upper.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: upper.len(),
            });
        }
        if bins == 0 {
            return Err(invalid("bins", "must be positive"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && u > l))
        {
            return Err(invalid("grid", "every axis needs finite bounds with upper > lower"));
        }
        Ok(Self { lower, upper, bins })
    }

    /// Box `[-h_i, h_i]` on each retained axis.
    pub fn symmetric(half_widths: &[f64], bins: usize) -> Result<Self> {
        Self::new(half_widths.iter().map(|h| -h).collect(), half_widths.to_vec(), bins)
    }

    /// `[-L, L]^m` with `L` = 8 stationary scales per axis, 64 bins per
    /// axis and `m = min(K, 2)`.
    pub fn default_for(model: &ModelSpec) -> Self {
        Self::for_model(model, model.dim().min(2), DEFAULT_BINS, DEFAULT_BOX_SCALES)
    }

    pub fn for_model(model: &ModelSpec, m: usize, bins: usize, box_scales: f64) -> Self {
        let h: Vec<f64> = (0..m.min(model.dim()))
            .map(|k| box_scales * model.stationary_scale(k))
            .collect();
        Self::symmetric(&h, bins).expect("stationary scales are positive")
    }

    pub fn retained(&self) -> usize {
        self.lower.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// `bins^m + 1`.
    pub fn cells(&self) -> usize {
        self.bins.pow(self.retained() as u32) + 1
    }

    pub fn overflow_cell(&self) -> usize {
        self.cells() - 1
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.bins as f64
    }

    /// Bin edges along `axis`.
    pub fn edges(&self, axis: usize) -> Vec<f64> {
        (0..=self.bins)
            .map(|i| self.lower[axis] + i as f64 * self.width(axis))
            .collect()
    }

    pub fn cell_of(&self, x: &[f64]) -> usize {
        let mut index = 0usize;
        for (axis, &v) in x.iter().enumerate().take(self.retained()) {
            if !(v >= self.lower[axis] && v < self.upper[axis]) {
                return self.overflow_cell();
            }
            let b = (((v - self.lower[axis]) / self.width(axis)) as usize).min(self.bins - 1);
            index = index * self.bins + b;
        }
        index
    }

    /// Merges groups of `factor` adjacent bins on every axis. The overflow
    /// cell maps to the overflow cell.
    pub fn coarsen(&self, weights: &[f64], factor: usize) -> Result<(Grid, Vec<f64>)> {
        if factor == 0 || !self.bins.is_multiple_of(factor) {
            return Err(invalid("factor", format!("must divide {} bins", self.bins)));
        }
        if weights.len() != self.cells() {
            return Err(Error::DimensionMismatch {
                expected: self.cells(),
                got: weights.len(),
            });
        }
        let coarse = Grid::new(self.lower.clone(), self.upper.clone(), self.bins / factor)?;
        let mut out = vec![0.0; coarse.cells()];
        let m = self.retained();
        for (cell, w) in weights.iter().enumerate().take(self.cells() - 1) {
            let mut rest = cell;
            let mut digits = vec![0usize; m];
            for d in digits.iter_mut().rev() {
                *d = rest % self.bins;
                rest /= self.bins;
            }
            let target = digits.iter().fold(0, |acc, d| acc * coarse.bins + d / factor);
            out[target] += w;
        }
        out[coarse.overflow_cell()] += weights[self.overflow_cell()];
        Ok((coarse, out))
    }

    /// Normalized histogram of `states` on this grid.
    pub fn histogram(&self, states: &[State]) -> Vec<f64> {
        let mut counts = vec![0u64; self.cells()];
        for s in states {
            counts[self.cell_of(s)] += 1;
        }
        let n = states.len() as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// Binned Monte-Carlo estimate of `P_T(x, ·)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalKernel {
    pub grid: Grid,
    pub origin: State,
    pub horizon: f64,
    pub weights: Vec<f64>,
    pub sample_count: usize,
}

/// `n` independent endpoints `X_T^x`; endpoint `i` uses `stream.split(i)`.
pub fn sample_endpoints(
    model: &ModelSpec,
    x: &[f64],
    horizon: f64,
    n: usize,
    stream: Stream,
) -> Result<Vec<State>> {
    model.steps_for(horizon)?;
    par_ensemble(stream, n, |_, rng| model.evolve(x, horizon, rng))
        .into_iter()
        .collect()
}

pub fn estimate_kernel(
    model: &ModelSpec,
    x: &[f64],
    horizon: f64,
    n: usize,
    grid: &Grid,
    stream: Stream,
) -> Result<EmpiricalKernel> {
    Ok(estimate_kernel_with_samples(model, x, horizon, n, grid, stream)?.0)
}

/// Kernel estimate together with the endpoint samples it was built from.
pub fn estimate_kernel_with_samples(
    model: &ModelSpec,
    x: &[f64],
    horizon: f64,
    n: usize,
    grid: &Grid,
    stream: Stream,
) -> Result<(EmpiricalKernel, Vec<State>)> {
    if n == 0 {
        return Err(invalid("n", "at least one sample is required"));
    }
    if grid.retained() > model.dim() {
        return Err(invalid("grid", "retains more coordinates than the state has"));
    }
    let samples = sample_endpoints(model, x, horizon, n, stream)?;
    let kernel = EmpiricalKernel {
        grid: grid.clone(),
        origin: x.to_vec(),
        horizon,
        weights: grid.histogram(&samples),
        sample_count: n,
    };
    Ok((kernel, samples))
}

fn check_prob(p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0) {
        return Err(Error::NotNormalized(s));
    }
    Ok(())
}

/// `½ Σ |p_i − q_i|`.
pub fn tv_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_prob(p)?;
    check_prob(q)?;
    Ok((0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()).min(1.0))
}

/// Sum over cells of the per-cell binomial standard errors, halved.
///
/// Bounds both the fluctuation and the upward bias of the plug-in TV
/// between two independent histograms with `n_p` and `n_q` samples.
pub fn tv_standard_error(p: &[f64], q: &[f64], n_p: usize, n_q: usize) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a * (1.0 - a) / n_p as f64 + b * (1.0 - b) / n_q as f64).sqrt())
        .sum::<f64>()
}

/// Bounded test functions for the gradient probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Constant { value: f64 },
    /// `sign(x_axis)`, a unit-norm step.
    Sign { axis: usize },
    /// `cos(λ·x_axis)`.
    Cos { lambda: f64, axis: usize },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Sign { axis } => {
                if x[*axis] > 0.0 {
                    1.0
                } else if x[*axis] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            TestFunction::Cos { lambda, axis } => (lambda * x[*axis]).cos(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            TestFunction::Constant { value } => value.abs(),
            _ => 1.0,
        }
    }
}

/// `|P̂_T f(x) − P̂_T f(y)| / |x − y|` at one horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub horizon: f64,
    pub difference: f64,
    pub ratio: f64,
    pub se: f64,
    /// Set when the Monte-Carlo standard error exceeds the estimated
    /// difference.
    pub statistical_failure: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientScan {
    pub points: Vec<GradientEstimate>,
    /// Fit of `ln ratio` against `ln T`.
    pub fit: Option<LineFit>,
}

/// Gradient ratios at several horizons from one ensemble of paths.
///
/// With `common_random_numbers` the paths from `x` and `y` share their
/// noise, otherwise they use independent streams.
#[allow(clippy::too_many_arguments)]
pub fn gradient_scan(
    model: &ModelSpec,
    f: &TestFunction,
    x: &[f64],
    y: &[f64],
    horizons: &[f64],
    n: usize,
    common_random_numbers: bool,
    stream: Stream,
) -> Result<GradientScan> {
    let dist = norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
    if !(dist > 0.0) {
        return Err(invalid("y", "must differ from x"));
    }
    if n < 2 {
        return Err(invalid("n", "at least two samples are required"));
    }
    let (sx, sy) = (stream.split(0), stream.split(1));
    let diffs: Vec<Vec<f64>> = par_ensemble(sx, n, |i, rng| -> Result<Vec<f64>> {
        let px = model.checkpoints(x, horizons, rng)?;
        let py = if common_random_numbers {
            model.checkpoints(y, horizons, &mut sx.split(i as u64).rng())?
        } else {
            model.checkpoints(y, horizons, &mut sy.split(i as u64).rng())?
        };
        Ok(px.iter().zip(&py).map(|(a, b)| f.eval(a) - f.eval(b)).collect())
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let points: Vec<GradientEstimate> = horizons
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let col: Vec<f64> = diffs.iter().map(|d| d[j]).collect();
            let m = mean_se(&col);
            GradientEstimate {
                horizon: t,
                difference: m.mean,
                ratio: m.mean.abs() / dist,
                se: m.se / dist,
                statistical_failure: m.se > m.mean.abs(),
            }
        })
        .collect();

    let usable: Vec<&GradientEstimate> = points
        .iter()
        .filter(|p| p.horizon > 0.0 && p.ratio > 0.0)
        .collect();
    let fit = ols(
        &usable.iter().map(|p| p.horizon.ln()).collect::<Vec<_>>(),
        &usable.iter().map(|p| p.ratio.ln()).collect::<Vec<_>>(),
    );
    Ok(GradientScan { points, fit })
}

/// Single-horizon gradient probe.
#[allow(clippy::too_many_arguments)]
pub fn gradient_probe(
    model: &ModelSpec,
    f: &TestFunction,
    x: &[f64],
    y: &[f64],
    horizon: f64,
    n: usize,
    common_random_numbers: bool,
    stream: Stream,
) -> Result<GradientEstimate> {
    Ok(gradient_scan(model, f, x, y, &[horizon], n, common_random_numbers, stream)?.points[0])
}

/// Empirical frequency of `X_T^x ∈ B(center, radius)` with a Wilson
/// interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitEstimate {
    pub hits: usize,
    pub n: usize,
    pub frequency: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn irreducibility_probe(
    model: &ModelSpec,
    x: &[f64],
    center: &[f64],
    radius: f64,
    horizon: f64,
    n: usize,
    stream: Stream,
) -> Result<HitEstimate> {
    if !(radius > 0.0) {
        return Err(Error::NonPositiveRadius);
    }
    if center.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: center.len(),
        });
    }
    let ends = sample_endpoints(model, x, horizon, n, stream)?;
    let hits = ends
        .iter()
        .filter(|s| norm(&s.iter().zip(center).map(|(a, b)| a - b).collect::<Vec<_>>()) <= radius)
        .count();
    let (lower, upper) = wilson_interval(hits, n, WILSON_Z);
    Ok(HitEstimate {
        hits,
        n,
        frequency: hits as f64 / n as f64,
        lower,
        upper,
    })
}

/// `Ê|X_T^x|_e^p` over `n` paths.
pub fn moment_probe(
    model: &ModelSpec,
    x: &[f64],
    horizon: f64,
    p: f64,
    e: f64,
    n: usize,
    stream: Stream,
) -> Result<MeanEstimate> {
    let alpha = model.alpha().get();
    if !(p >= 0.0 && p < alpha) {
        return Err(Error::MomentMayBeInfinite { p, alpha });
    }
    if p == 0.0 {
        return Ok(MeanEstimate { mean: 1.0, se: 0.0, n });
    }
    let ends = sample_endpoints(model, x, horizon, n, stream)?;
    let vals: Vec<f64> = ends.iter().map(|s| model_norm(model, s, e).powf(p)).collect();
    Ok(mean_se(&vals))
}
