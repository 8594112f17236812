//! Numerical checks of the Harris drift and minorization conditions, the
//! invariant measure's moments, and the fitted exponential mixing rate.
//!
//! The Lyapunov function is `V(x) = |x|^p`. All reported constants are
//! fitted surrogates; they are not claimed to match any existential constant.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fmt17, norm, ModelSpec, State};
use crate::error::{invalid, Error, Result};
use crate::kernel_lab::{moment_probe, sample_endpoints, tv_discrete, tv_standard_error, Grid};
use crate::rng::{par_ensemble, Stream};
use crate::stats::{mean_se, wls, MeanEstimate};

/// Default number of probe pairs for the minorization check.
pub const DEFAULT_PAIRS: usize = 32;
/// Default number of drift probe points.
pub const DEFAULT_PROBE_POINTS: usize = 8;
/// Relative tolerance of the invariant-moment stabilization check.
pub const STABILIZATION_TOLERANCE: f64 = 0.1;

/// `p = α/2`.
pub fn default_moment_order(model: &ModelSpec) -> f64 {
    model.alpha().get() / 2.0
}

/// Smallest multiple of dt strictly above `ln 4 / (p γ₁)`.
pub fn default_horizon(model: &ModelSpec, p: f64) -> f64 {
    let t = 4f64.ln() / (p * model.gamma1());
    let dt = model.dt();
    (t / dt).floor() * dt + dt
}

/// `a_j e₁` with `a_j` geometric from one stationary scale up to the
/// magnitude where `|x|^p` has grown a hundredfold.
pub fn default_probe_points(model: &ModelSpec, p: f64, count: usize) -> Vec<State> {
    let s = model.stationary_scale(0);
    let top = 100f64.powf(1.0 / p);
    (0..count)
        .map(|j| {
            let frac = if count > 1 { j as f64 / (count - 1) as f64 } else { 0.0 };
            let mut x = vec![0.0; model.dim()];
            x[0] = s * top.powf(frac);
            x
        })
        .collect()
}

fn check_order(model: &ModelSpec, p: f64) -> Result<()> {
    let alpha = model.alpha().get();
    if !(p >= 0.0 && p < alpha) {
        return Err(Error::MomentMayBeInfinite { p, alpha });
    }
    Ok(())
}

/// Weighted fit of `Ê_x V(X_{T₀})` against `V(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovFit {
    pub horizon: f64,
    pub p: f64,
    pub gamma_hat: f64,
    pub gamma_se: f64,
    pub k_hat: f64,
    pub k_se: f64,
    pub r_squared: f64,
    /// `V(x)` at each probe point.
    pub v_start: Vec<f64>,
    pub v_end: Vec<MeanEstimate>,
}

pub fn lyapunov_check(
    model: &ModelSpec,
    p: f64,
    t0: f64,
    probe_points: &[State],
    n: usize,
    stream: Stream,
) -> Result<LyapunovFit> {
    check_order(model, p)?;
    if p == 0.0 {
        return Err(invalid("p", "must be positive for a drift fit"));
    }
    if probe_points.len() < 2 {
        return Err(invalid("probe_points", "at least two are required"));
    }
    let v_start: Vec<f64> = probe_points.iter().map(|x| norm(x).powf(p)).collect();
    let lo = v_start.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v_start.iter().copied().fold(0.0, f64::max);
    let ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(ratio >= 10.0) || !ratio.is_finite() {
        return Err(Error::InsufficientProbeSpread { ratio });
    }
    let v_end = probe_points
        .iter()
        .enumerate()
        .map(|(i, x)| moment_probe(model, x, t0, p, 0.0, n, stream.split(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = v_end.iter().map(|m| m.mean).collect();
    let fit = if v_end.iter().all(|m| m.se > 0.0) {
        let w: Vec<f64> = v_end.iter().map(|m| 1.0 / (m.se * m.se)).collect();
        wls(&v_start, &y, &w, true)
    } else {
        wls(&v_start, &y, &vec![1.0; y.len()], false)
    }
    .ok_or_else(|| Error::FitFailed("drift regression is singular".into()))?;
    Ok(LyapunovFit {
        horizon: t0,
        p,
        gamma_hat: fit.slope,
        gamma_se: fit.slope_se,
        k_hat: fit.intercept,
        k_se: fit.intercept_se,
        r_squared: fit.r_squared,
        v_start,
        v_end,
    })
}

/// Worst-pair overlap on one level set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minorization {
    pub level: f64,
    pub horizon: f64,
    pub pairs: usize,
    pub samples: usize,
    /// `1 − max TV`, with overlap inside the overflow cell not counted.
    pub delta_hat: f64,
    /// Standard error of the worst pair's TV.
    pub se: f64,
    pub worst_pair: (State, State),
    pub grid: Grid,
    /// `δ̂ ≤ 0` at this grid resolution. Grid TV lower-bounds the true TV,
    /// so this is a resolution statement rather than a failure.
    pub inconclusive: bool,
}

/// Probe pairs with `V(x) + V(y) ≤ level`: the antipodal pair on the first
/// axis that exhausts the budget, then random directions and splits.
fn level_pairs(dim: usize, level: f64, p: f64, count: usize, stream: Stream) -> Vec<(State, State)> {
    let mut rng = stream.rng();
    let a = (level / 2.0).powf(1.0 / p);
    let mut x = vec![0.0; dim];
    x[0] = a;
    let mut pairs = vec![(x.clone(), x.iter().map(|v| -v).collect::<State>())];
    let direction = |rng: &mut crate::rng::StreamRng| -> State {
        loop {
            let d: State = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&d);
            if n > 1e-3 {
                return d.into_iter().map(|v| v / n).collect();
            }
        }
    };
    while pairs.len() < count {
        let share: f64 = rng.random();
        let used: f64 = rng.random::<f64>().sqrt();
        let rx = (level * used * share).powf(1.0 / p);
        let ry = (level * used * (1.0 - share)).powf(1.0 / p);
        let u = direction(&mut rng);
        let v = direction(&mut rng);
        pairs.push((
            u.iter().map(|c| rx * c).collect(),
            v.iter().map(|c| ry * c).collect(),
        ));
    }
    pairs
}

#[allow(clippy::too_many_arguments)]
pub fn minorization_check(
    model: &ModelSpec,
    t0: f64,
    level: f64,
    p: f64,
    n_pairs: usize,
    n: usize,
    grid: &Grid,
    stream: Stream,
) -> Result<Minorization> {
    check_order(model, p)?;
    if !(level > 0.0) {
        return Err(invalid("level", "must be positive"));
    }
    if n_pairs == 0 || n == 0 {
        return Err(invalid("n_pairs", "pairs and samples must be positive"));
    }
    let pairs = level_pairs(model.dim(), level, p.max(f64::MIN_POSITIVE), n_pairs, stream.split(0));
    pairs_overlap(model, t0, level, &pairs, n, grid, stream.split(1))
}

/// Worst-pair overlap over an explicit pair list.
pub fn pairs_overlap(
    model: &ModelSpec,
    t0: f64,
    level: f64,
    pairs: &[(State, State)],
    n: usize,
    grid: &Grid,
    stream: Stream,
) -> Result<Minorization> {
    let mut worst: Option<(f64, f64, usize)> = None;
    for (i, (x, y)) in pairs.iter().enumerate() {
        let s = stream.split(i as u64);
        let a = grid.histogram(&sample_endpoints(model, x, t0, n, s.split(0))?);
        let b = if x == y {
            a.clone()
        } else {
            grid.histogram(&sample_endpoints(model, y, t0, n, s.split(1))?)
        };
        // Mass shared only through the overflow cell is not evidence of
        // overlap: far-apart kernels both land there.
        let ov = grid.overflow_cell();
        let tv = if x == y {
            0.0
        } else {
            (tv_discrete(&a, &b)? + a[ov].min(b[ov])).min(1.0)
        };
        let se = if x == y { 0.0 } else { tv_standard_error(&a, &b, n, n) };
        if worst.is_none_or(|(w, _, _)| tv > w) {
            worst = Some((tv, se, i));
        }
    }
    let (max_tv, se, i) = worst.ok_or_else(|| invalid("pairs", "at least one pair is required"))?;
    let delta_hat = 1.0 - max_tv;
    Ok(Minorization {
        level,
        horizon: t0,
        pairs: pairs.len(),
        samples: n,
        delta_hat,
        se,
        worst_pair: pairs[i].clone(),
        grid: grid.clone(),
        inconclusive: delta_hat <= 0.0,
    })
}

/// Time-average estimate of `∫|x|^p dμ` from one long path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantMoment {
    pub p: f64,
    pub burn_in: f64,
    pub n_samples: usize,
    pub estimate: f64,
    /// Batch-means standard error.
    pub se: f64,
    /// Running estimates after `N/4`, `N/2` and `N` samples.
    pub partial: [f64; 3],
    pub stabilized: bool,
}

/// One sample per time step after `burn_in`, starting from the origin.
pub fn invariant_moment(
    model: &ModelSpec,
    p: f64,
    burn_in: f64,
    n_samples: usize,
    stream: Stream,
) -> Result<InvariantMoment> {
    check_order(model, p)?;
    if p == 0.0 {
        return Ok(InvariantMoment {
            p,
            burn_in,
            n_samples,
            estimate: 1.0,
            se: 0.0,
            partial: [1.0; 3],
            stabilized: true,
        });
    }
    let min_burn = 10.0 / model.gamma1();
    if !(burn_in >= min_burn * (1.0 - 1e-12)) {
        return Err(invalid(
            "burn_in",
            format!("must cover at least 10 contraction times ({min_burn})"),
        ));
    }
    if n_samples < 4 {
        return Err(invalid("n_samples", "at least 4 samples are required"));
    }
    let mut rng = stream.rng();
    let mut x = vec![0.0; model.dim()];
    let burn_steps = model.steps_for(burn_in)?;
    model.advance(&mut x, burn_steps, 0, &mut rng)?;
    let mut values = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        model.advance(&mut x, 1, burn_steps + i, &mut rng)?;
        values.push(norm(&x).powf(p));
    }
    let avg = |m: usize| values[..m].iter().sum::<f64>() / m as f64;
    let partial = [avg(n_samples / 4), avg(n_samples / 2), avg(n_samples)];
    let estimate = partial[2];
    let stabilized = partial[..2]
        .iter()
        .all(|v| (v - estimate).abs() <= STABILIZATION_TOLERANCE * estimate.abs());
    let batches = 20.min(n_samples);
    let size = n_samples / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    Ok(InvariantMoment {
        p,
        burn_in,
        n_samples,
        estimate,
        se: mean_se(&means).se,
        partial,
        stabilized,
    })
}

/// Initial law of a mixing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Point { x: State },
    /// Uniform draw from a fixed sample.
    Empirical { samples: Vec<State> },
}

impl InitialLaw {
    fn dim(&self) -> Option<usize> {
        match self {
            InitialLaw::Point { x } => Some(x.len()),
            InitialLaw::Empirical { samples } => samples.first().map(Vec::len),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        match self {
            InitialLaw::Point { x } => x.clone(),
            InitialLaw::Empirical { samples } => samples[rng.random_range(0..samples.len())].clone(),
        }
    }

    /// `∫|x|^p ν(dx)`.
    pub fn moment(&self, p: f64) -> f64 {
        match self {
            InitialLaw::Point { x } => norm(x).powf(p),
            InitialLaw::Empirical { samples } => {
                samples.iter().map(|x| norm(x).powf(p)).sum::<f64>() / samples.len() as f64
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let InitialLaw::Empirical { samples } = self {
            if samples.is_empty() {
                return Err(invalid("samples", "empirical initial law needs samples"));
            }
            if let Some(s) = samples.iter().find(|s| s.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                });
            }
        }
        match self.dim() {
            Some(d) if d != dim => Err(Error::DimensionMismatch { expected: dim, got: d }),
            _ => Ok(()),
        }
    }
}

/// Fit range controls for [`mixing_fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingOptions {
    /// Largest TV value used in the fit.
    #[serde(default = "default_ceiling")]
    pub ceiling: f64,
    /// Noise floor in units of the expected null TV.
    #[serde(default = "default_floor_multiplier")]
    pub floor_multiplier: f64,
    /// Moment order for the prefactor normalization; `α/2` when absent.
    #[serde(default)]
    pub p: Option<f64>,
}

fn default_ceiling() -> f64 {
    0.9
}

fn default_floor_multiplier() -> f64 {
    10.0
}

impl Default for MixingOptions {
    fn default() -> Self {
        Self {
            ceiling: default_ceiling(),
            floor_multiplier: default_floor_multiplier(),
            p: None,
        }
    }
}

/// TV between two evolved laws at a sequence of times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingCurve {
    pub times: Vec<f64>,
    pub tv_values: Vec<f64>,
    pub se: Vec<f64>,
    /// Per-time noise floor `floor_multiplier · Σ√m_i / √(πN)`.
    pub floor: Vec<f64>,
    pub samples: usize,
    pub grid: Grid,
}

impl MixingCurve {
    /// CSV with header `t,tv,se`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,tv,se")?;
        for ((t, v), s) in self.times.iter().zip(&self.tv_values).zip(&self.se) {
            writeln!(w, "{},{},{}", fmt17(*t), fmt17(*v), fmt17(*s))?;
        }
        Ok(())
    }
}

/// Histograms of `n` paths from `law` at each time.
fn evolved_histograms(
    model: &ModelSpec,
    law: &InitialLaw,
    times: &[f64],
    n: usize,
    grid: &Grid,
    stream: Stream,
) -> Result<Vec<Vec<f64>>> {
    let paths = par_ensemble(stream, n, |_, rng| {
        let x0 = law.draw(rng);
        model.checkpoints(&x0, times, rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((0..times.len())
        .map(|j| {
            let mut counts = vec![0u64; grid.cells()];
            for p in &paths {
                counts[grid.cell_of(&p[j])] += 1;
            }
            counts.into_iter().map(|c| c as f64 / n as f64).collect()
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn mixing_curve(
    model: &ModelSpec,
    nu1: &InitialLaw,
    nu2: &InitialLaw,
    times: &[f64],
    n: usize,
    grid: &Grid,
    opts: &MixingOptions,
    stream: Stream,
) -> Result<MixingCurve> {
    nu1.validate(model.dim())?;
    nu2.validate(model.dim())?;
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("times", "must be a nonempty increasing list"));
    }
    if n == 0 {
        return Err(invalid("n", "at least one sample is required"));
    }
    if grid.retained() > model.dim() {
        return Err(invalid("grid", "retains more coordinates than the state has"));
    }
    let h1 = evolved_histograms(model, nu1, times, n, grid, stream.split(0))?;
    let h2 = evolved_histograms(model, nu2, times, n, grid, stream.split(1))?;
    let mut curve = MixingCurve {
        times: times.to_vec(),
        tv_values: Vec::with_capacity(times.len()),
        se: Vec::with_capacity(times.len()),
        floor: Vec::with_capacity(times.len()),
        samples: n,
        grid: grid.clone(),
    };
    for (a, b) in h1.iter().zip(&h2) {
        curve.tv_values.push(tv_discrete(a, b)?);
        curve.se.push(tv_standard_error(a, b, n, n));
        let g: f64 = a.iter().zip(b).map(|(x, y)| (0.5 * (x + y)).sqrt()).sum::<f64>()
            / std::f64::consts::PI.sqrt();
        curve.floor.push(opts.floor_multiplier * g / (n as f64).sqrt());
    }
    Ok(curve)
}

/// Fitted `TV(t) ≈ Ĉ(1 + m_p(ν₁) + m_p(ν₂)) e^{−ĉt}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingFit {
    pub times: Vec<f64>,
    pub tv_values: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(rename = "C_hat")]
    pub c_prefactor: f64,
    pub c_hat: f64,
    pub r_squared: f64,
    /// `1 + m_p(ν₁) + m_p(ν₂)`.
    pub moment_factor: f64,
    /// Indices of the times inside the fit range.
    pub fitted: Vec<usize>,
    pub floor: Vec<f64>,
    pub grid: Grid,
}

#[allow(clippy::too_many_arguments)]
pub fn mixing_fit(
    model: &ModelSpec,
    nu1: &InitialLaw,
    nu2: &InitialLaw,
    times: &[f64],
    n: usize,
    grid: &Grid,
    opts: &MixingOptions,
    stream: Stream,
) -> Result<MixingFit> {
    let curve = mixing_curve(model, nu1, nu2, times, n, grid, opts, stream)?;
    fit_curve(model, nu1, nu2, &curve, opts)
}

/// Weighted log-linear fit over `floor ≤ TV ≤ ceiling`.
pub fn fit_curve(
    model: &ModelSpec,
    nu1: &InitialLaw,
    nu2: &InitialLaw,
    curve: &MixingCurve,
    opts: &MixingOptions,
) -> Result<MixingFit> {
    let above: Vec<usize> = (0..curve.times.len())
        .filter(|&j| curve.tv_values[j] >= curve.floor[j])
        .collect();
    if above.is_empty() {
        let max_tv = curve.tv_values.iter().copied().fold(0.0, f64::max);
        let floor = curve.floor.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::AlreadyMixed { max_tv, floor });
    }
    let fitted: Vec<usize> = above
        .into_iter()
        .filter(|&j| curve.tv_values[j] <= opts.ceiling)
        .collect();
    let x: Vec<f64> = fitted.iter().map(|&j| curve.times[j]).collect();
    let y: Vec<f64> = fitted.iter().map(|&j| curve.tv_values[j].ln()).collect();
    let w: Vec<f64> = fitted
        .iter()
        .map(|&j| (curve.tv_values[j] / curve.se[j].max(f64::MIN_POSITIVE)).powi(2))
        .collect();
    let fit = wls(&x, &y, &w, false).ok_or_else(|| {
        Error::FitFailed(format!(
            "{} time(s) inside the fit range; need at least two",
            fitted.len()
        ))
    })?;
    let p = opts.p.unwrap_or_else(|| default_moment_order(model));
    let moment_factor = 1.0 + nu1.moment(p) + nu2.moment(p);
    Ok(MixingFit {
        times: curve.times.clone(),
        tv_values: curve.tv_values.clone(),
        se: curve.se.clone(),
        c_prefactor: fit.intercept.exp() / moment_factor,
        c_hat: -fit.slope,
        r_squared: fit.r_squared,
        moment_factor,
        fitted,
        floor: curve.floor.clone(),
        grid: curve.grid.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    Failed,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub verdict: Verdict,
    pub detail: String,
}

/// Settings for [`certify`]; absent values are derived from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarrisConfig {
    pub p: f64,
    pub horizon: f64,
    pub probe_points: Vec<State>,
    pub probe_samples: usize,
    /// Level-set radii `R`; when empty, `4K̂/(1 − γ̂)` is used.
    pub levels: Vec<f64>,
    pub pairs: usize,
    pub kernel_samples: usize,
    pub grid: Grid,
}

impl HarrisConfig {
    pub fn for_model(model: &ModelSpec) -> Self {
        let p = default_moment_order(model);
        Self {
            p,
            horizon: default_horizon(model, p),
            probe_points: default_probe_points(model, p, DEFAULT_PROBE_POINTS),
            probe_samples: 10_000,
            levels: Vec::new(),
            pairs: DEFAULT_PAIRS,
            kernel_samples: 10_000,
            grid: Grid::default_for(model),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarrisReport {
    #[serde(rename = "T0")]
    pub horizon: f64,
    pub p: f64,
    pub gamma_hat: f64,
    pub gamma_se: f64,
    #[serde(rename = "K_hat")]
    pub k_hat: f64,
    pub k_se: f64,
    pub drift: LyapunovFit,
    #[serde(rename = "R_levels")]
    pub levels: Vec<f64>,
    /// One entry per level: the direct check, or the `3T₀` fallback when the
    /// direct check was inconclusive.
    pub minorization: Vec<Minorization>,
    pub drift_condition: ConditionOutcome,
    pub minorization_condition: ConditionOutcome,
    pub verdict: Verdict,
}

pub fn certify(model: &ModelSpec, cfg: &HarrisConfig, stream: Stream) -> Result<HarrisReport> {
    let drift = lyapunov_check(model, cfg.p, cfg.horizon, &cfg.probe_points, cfg.probe_samples, stream.split(0))?;
    let upper = drift.gamma_hat + 3.0 * drift.gamma_se;
    let lower = drift.gamma_hat - 3.0 * drift.gamma_se;
    let drift_condition = ConditionOutcome {
        verdict: if upper < 1.0 {
            Verdict::Certified
        } else if lower >= 1.0 {
            Verdict::Failed
        } else {
            Verdict::Inconclusive
        },
        detail: format!("gamma_hat + 3 SE = {upper}"),
    };
    let levels = if cfg.levels.is_empty() {
        if drift.gamma_hat < 1.0 {
            vec![4.0 * drift.k_hat.max(0.0) / (1.0 - drift.gamma_hat)]
        } else {
            Vec::new()
        }
    } else {
        cfg.levels.clone()
    };
    let mut minorization = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        if !(level > 0.0) {
            continue;
        }
        let s = stream.split(1 + i as u64);
        let direct = minorization_check(
            model, cfg.horizon, level, cfg.p, cfg.pairs, cfg.kernel_samples, &cfg.grid, s.split(0),
        )?;
        let chosen = if direct.inconclusive {
            minorization_check(
                model,
                3.0 * cfg.horizon,
                level,
                cfg.p,
                cfg.pairs,
                cfg.kernel_samples,
                &cfg.grid,
                s.split(1),
            )?
        } else {
            direct
        };
        minorization.push(chosen);
    }
    let minorization_ok =
        !minorization.is_empty() && minorization.iter().all(|m| m.delta_hat - 3.0 * m.se > 0.0);
    let minorization_condition = ConditionOutcome {
        verdict: if minorization_ok {
            Verdict::Certified
        } else {
            Verdict::Inconclusive
        },
        detail: match minorization
            .iter()
            .map(|m| m.delta_hat - 3.0 * m.se)
            .reduce(f64::min)
        {
            Some(v) => format!("min delta_hat - 3 SE = {v} over {} level(s)", minorization.len()),
            None => "no admissible level set".into(),
        },
    };
    let verdict = match (drift_condition.verdict, minorization_condition.verdict) {
        (Verdict::Certified, Verdict::Certified) => Verdict::Certified,
        (Verdict::Failed, _) => Verdict::Failed,
        _ => Verdict::Inconclusive,
    };
    Ok(HarrisReport {
        horizon: cfg.horizon,
        p: cfg.p,
        gamma_hat: drift.gamma_hat,
        gamma_se: drift.gamma_se,
        k_hat: drift.k_hat,
        k_se: drift.k_se,
        drift,
        levels,
        minorization,
        drift_condition,
        minorization_condition,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{heat_example_config, DiagonalGenerator, DriftFamily, DriftSpec};
    use crate::stable_noise::{draw_standard, ou_scale, StableIndex};

    fn ou(gamma: f64) -> ModelSpec {
        let a = StableIndex::new(1.5).unwrap();
        let gen = DiagonalGenerator::new(vec![gamma], vec![1.0], a, 0.1, 0.5).unwrap();
        ModelSpec::galerkin(gen, DriftSpec::zero(1), 0.01).unwrap()
    }

    fn acceptance_1d() -> ModelSpec {
        let a = StableIndex::new(1.5).unwrap();
        let gen = heat_example_config(1, a, 0.5, 0.1, 1).unwrap();
        let drift = DriftSpec::new(
            DriftFamily::Tanh {
                sup_norm: 1.0,
                directions: None,
            },
            1,
        )
        .unwrap();
        ModelSpec::galerkin(gen, drift, 0.01).unwrap()
    }

    #[test]
    fn horizon_clears_threshold() {
        let m = acceptance_1d();
        let t = default_horizon(&m, 0.75);
        assert!(t > 4f64.ln() / (0.75 * m.gamma1()));
        assert!(m.steps_for(t).is_ok());
    }

    #[test]
    fn zero_horizon_is_identity() {
        let m = ou(1.0);
        let pts = default_probe_points(&m, 1.0, 5);
        let fit = lyapunov_check(&m, 1.0, 0.0, &pts, 10, Stream::new(1)).unwrap();
        assert_eq!(fit.gamma_hat, 1.0);
        assert_eq!(fit.k_hat, 0.0);
    }

    #[test]
    fn probe_spread_is_required() {
        let m = ou(1.0);
        let pts = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            lyapunov_check(&m, 1.0, 0.1, &pts, 10, Stream::new(1)),
            Err(Error::InsufficientProbeSpread { .. })
        ));
    }

    #[test]
    fn ou_drift_slope_matches_contraction() {
        let m = ou(1.0);
        let t0 = 0.5;
        let pts: Vec<State> = [2.0, 5.0, 10.0, 20.0, 50.0].iter().map(|v| vec![*v]).collect();
        let fit = lyapunov_check(&m, 1.0, t0, &pts, 20_000, Stream::new(3)).unwrap();
        let exact = (-t0).exp();
        assert!(
            (fit.gamma_hat - exact).abs() < 3.0 * fit.gamma_se.max(1e-3),
            "{} vs {exact} (se {})",
            fit.gamma_hat,
            fit.gamma_se
        );
    }

    #[test]
    fn identical_pairs_overlap_fully() {
        let m = ou(1.0);
        let grid = Grid::symmetric(&[5.0], 16).unwrap();
        let pairs = vec![(vec![0.3], vec![0.3]), (vec![-1.0], vec![-1.0])];
        let r = pairs_overlap(&m, 0.1, 1.0, &pairs, 500, &grid, Stream::new(2)).unwrap();
        assert_eq!(r.delta_hat, 1.0);
        assert!(!r.inconclusive);
    }

    #[test]
    fn distant_pair_is_inconclusive() {
        let m = ou(1.0);
        let grid = Grid::symmetric(&[2000.0], 64).unwrap();
        let pairs = vec![(vec![1000.0], vec![-1000.0])];
        let r = pairs_overlap(&m, 0.01, 1.0, &pairs, 2000, &grid, Stream::new(2)).unwrap();
        assert!(r.delta_hat <= 1e-12);
        assert!(r.inconclusive);
    }

    #[test]
    fn level_pairs_respect_budget() {
        let pairs = level_pairs(3, 4.0, 0.75, 32, Stream::new(5));
        assert_eq!(pairs.len(), 32);
        for (x, y) in &pairs {
            assert!(norm(x).powf(0.75) + norm(y).powf(0.75) <= 4.0 * (1.0 + 1e-12));
        }
        let (x, y) = &pairs[0];
        assert!((norm(x).powf(0.75) + norm(y).powf(0.75) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn invariant_moment_edge_cases() {
        let m = ou(1.0);
        let r = invariant_moment(&m, 0.0, 10.0, 100, Stream::new(1)).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert!(matches!(
            invariant_moment(&m, 1.5, 10.0, 100, Stream::new(1)),
            Err(Error::MomentMayBeInfinite { .. })
        ));
        assert!(invariant_moment(&m, 0.5, 1.0, 100, Stream::new(1)).is_err());
    }

    #[test]
    fn invariant_moment_matches_stationary_scale() {
        let gamma = 5.0;
        let m = ou(gamma);
        let a = StableIndex::new(1.5).unwrap();
        let p = 0.5;
        let est = invariant_moment(&m, p, 2.0, 200_000, Stream::new(11)).unwrap();
        assert!(est.stabilized);
        let xi = draw_standard(a, 200_000, Stream::new(12));
        let c = xi.iter().map(|v| v.abs().powf(p)).sum::<f64>() / xi.len() as f64;
        // The Euler-exponential scheme is exact for the linear part.
        let exact = c * ou_scale(gamma, 1.0, a, f64::INFINITY).unwrap().powf(p);
        assert!((est.estimate - exact).abs() < 0.05 * exact, "{} vs {exact}", est.estimate);
    }

    #[test]
    fn equal_laws_are_already_mixed() {
        let m = ou(1.0);
        let nu = InitialLaw::Point { x: vec![0.5] };
        let grid = Grid::for_model(&m, 1, 32, 8.0);
        let err = mixing_fit(&m, &nu, &nu, &[0.1, 0.2, 0.4], 4000, &grid, &MixingOptions::default(), Stream::new(4));
        assert!(matches!(err, Err(Error::AlreadyMixed { .. })));
    }

    #[test]
    fn separated_points_mix_exponentially() {
        let m = ou(1.0);
        let nu1 = InitialLaw::Point { x: vec![8.0] };
        let nu2 = InitialLaw::Point { x: vec![-8.0] };
        let grid = Grid::symmetric(&[12.0], 48).unwrap();
        let times: Vec<f64> = (1..=8).map(|k| k as f64 * 0.5).collect();
        let fit = mixing_fit(&m, &nu1, &nu2, &times, 20_000, &grid, &MixingOptions::default(), Stream::new(8))
            .unwrap();
        assert!(fit.c_hat > 0.0);
        assert!(fit.r_squared > 0.9);
        assert!(fit.tv_values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut buf = Vec::new();
        mixing_curve(&m, &nu1, &nu2, &times[..2], 100, &grid, &MixingOptions::default(), Stream::new(8))
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,tv,se\n"));
    }

    #[test]
    fn acceptance_model_is_certified() {
        let m = acceptance_1d();
        let mut cfg = HarrisConfig::for_model(&m);
        cfg.p = 0.75;
        cfg.horizon = default_horizon(&m, cfg.p);
        cfg.probe_points = default_probe_points(&m, cfg.p, 8);
        cfg.probe_samples = 4000;
        cfg.kernel_samples = 4000;
        cfg.pairs = 8;
        let report = certify(&m, &cfg, Stream::new(21)).unwrap();
        assert_eq!(report.verdict, Verdict::Certified, "{report:?}");
        assert!(report.gamma_hat < 1.0);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"K_hat\"") && json.contains("\"R_levels\""));
    }
}
