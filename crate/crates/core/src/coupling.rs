//! Coupled chains and their stopping times.
//!
//! Two copies of the dynamics are observed at times `kT`. From a common
//! point they move together; when both lie in the small ball `B(r)` their
//! grid-discretized kernels are maximally coupled; otherwise they move
//! independently. The hitting times `τ^ε` (both in the `H^ε` ball of radius
//! `M`), `τ` (`|x₁| + |x₂| ≤ r`) and the coalescence time `ρ` are recorded.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{model_norm, norm, ModelSpec, State};
use crate::error::{invalid, Error, Result};
use crate::kernel_lab::{sample_endpoints, tv_discrete, Grid};
use crate::rng::{Stream, StreamRng};
use crate::stats::ols;

/// One draw from a maximal coupling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoupledDraw {
    pub i: usize,
    pub j: usize,
    pub coalesced: bool,
}

fn pick<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return k;
            }
            u -= w;
            last = k;
        }
    }
    last
}

/// Maximal coupling of two probability vectors on a common cell set.
///
/// With probability `1 − TV` both coordinates equal a cell drawn from
/// `min(p, q)/(1 − TV)`; otherwise `i ~ (p − q)⁺/TV` and `j ~ (q − p)⁺/TV`
/// independently.
pub fn maximal_coupling_discrete<R: Rng + ?Sized>(
    p: &[f64],
    q: &[f64],
    rng: &mut R,
) -> Result<CoupledDraw> {
    tv_discrete(p, q)?;
    let overlap: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.min(*b)).collect();
    let stay: f64 = overlap.iter().sum();
    let rp: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let rq: Vec<f64> = q.iter().zip(p).map(|(a, b)| (a - b).max(0.0)).collect();
    let (tp, tq): (f64, f64) = (rp.iter().sum(), rq.iter().sum());
    if tp <= 0.0 || tq <= 0.0 || rng.random::<f64>() * (stay + tp) < stay {
        let c = pick(&overlap, stay, rng);
        return Ok(CoupledDraw {
            i: c,
            j: c,
            coalesced: true,
        });
    }
    Ok(CoupledDraw {
        i: pick(&rp, tp, rng),
        j: pick(&rq, tq, rng),
        coalesced: false,
    })
}

/// Maximal coupling of two histograms with a common sample count, in exact
/// integer arithmetic.
///
/// With counts `a`, `b` summing to `D` and `T = Σ (a − b)⁺`, the joint law is
/// `π(i, j) = [δ_ij min(a_i, b_i)·T + (a_i − b_i)⁺ (b_j − a_j)⁺] / (D·T)`
/// (or `δ_ij a_i / D` when `T = 0`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountCoupling {
    overlap: Vec<u64>,
    excess_p: Vec<u64>,
    excess_q: Vec<u64>,
    total: u64,
    tv_count: u64,
}

impl CountCoupling {
    pub fn new(a: &[u64], b: &[u64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        let total: u64 = a.iter().sum();
        let total_b: u64 = b.iter().sum();
        if total == 0 || total != total_b {
            return Err(invalid("counts", format!("need equal positive totals, got {total} and {total_b}")));
        }
        let overlap = a.iter().zip(b).map(|(x, y)| *x.min(y)).collect();
        let excess_p: Vec<u64> = a.iter().zip(b).map(|(x, y)| x.saturating_sub(*y)).collect();
        let excess_q = b.iter().zip(a).map(|(x, y)| x.saturating_sub(*y)).collect();
        let tv_count = excess_p.iter().sum();
        Ok(Self {
            overlap,
            excess_p,
            excess_q,
            total,
            tv_count,
        })
    }

    pub fn cells(&self) -> usize {
        self.overlap.len()
    }

    /// Total variation as the exact fraction `(numerator, denominator)`.
    pub fn tv(&self) -> (u64, u64) {
        (self.tv_count, self.total)
    }

    /// Common denominator of [`Self::joint_numerator`].
    pub fn joint_denominator(&self) -> u128 {
        self.total as u128 * self.tv_count.max(1) as u128
    }

    /// Numerator of `π(i, j)` over [`Self::joint_denominator`].
    pub fn joint_numerator(&self, i: usize, j: usize) -> u128 {
        let t = self.tv_count.max(1) as u128;
        let diag = if i == j { self.overlap[i] as u128 * t } else { 0 };
        let off = if self.tv_count == 0 {
            0
        } else {
            self.excess_p[i] as u128 * self.excess_q[j] as u128
        };
        diag + off
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CoupledDraw {
        let pick_count = |w: &[u64], total: u64, rng: &mut R| -> usize {
            let mut u = rng.random_range(0..total);
            for (k, c) in w.iter().enumerate() {
                if u < *c {
                    return k;
                }
                u -= c;
            }
            unreachable!("u < total")
        };
        let stay = self.total - self.tv_count;
        if rng.random_range(0..self.total) < stay {
            let c = pick_count(&self.overlap, stay, rng);
            CoupledDraw {
                i: c,
                j: c,
                coalesced: true,
            }
        } else {
            CoupledDraw {
                i: pick_count(&self.excess_p, self.tv_count, rng),
                j: pick_count(&self.excess_q, self.tv_count, rng),
                coalesced: false,
            }
        }
    }
}

/// Which transition the coupled chain used at a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Synchronous,
    Maximal,
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledChainState {
    pub x1: State,
    pub x2: State,
    pub coalesced: bool,
    pub k: usize,
}

impl CoupledChainState {
    pub fn new(x1: State, x2: State) -> Self {
        let coalesced = x1 == x2;
        Self {
            x1,
            x2,
            coalesced,
            k: 0,
        }
    }
}

/// One halving step of the small-ball calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStep {
    pub radius: f64,
    pub max_tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    /// Coupling period `T`, a multiple of the model's dt.
    pub period: f64,
    /// Small-ball radius `r`.
    pub small_radius: f64,
    /// `H^ε`-ball radius `M`.
    pub eps_radius: f64,
    pub eps: f64,
    pub grid: Grid,
    pub kernel_samples: usize,
    /// Moment order `p` used by the drift bounds.
    pub moment_order: f64,
    /// Halving trace of the small-ball calibration, empty when `r` was set
    /// by hand.
    #[serde(default)]
    pub calibration: Vec<CalibrationStep>,
}

impl CouplingConfig {
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        model.steps_for(self.period)?;
        if !(self.period > 0.0) {
            return Err(invalid("period", "must be positive"));
        }
        if !(self.small_radius > 0.0) {
            return Err(Error::NonPositiveRadius);
        }
        if !(self.eps_radius > 0.0) {
            return Err(invalid("eps_radius", "must be positive"));
        }
        if !(self.eps >= 0.0) {
            return Err(invalid("eps", "must be nonnegative"));
        }
        if self.kernel_samples == 0 {
            return Err(invalid("kernel_samples", "must be positive"));
        }
        if self.grid.retained() > model.dim() {
            return Err(invalid("grid", "retains more coordinates than the state has"));
        }
        Ok(())
    }

    /// Calibrated small-ball radius, if the calibration met the ½ target.
    pub fn calibrated(&self) -> bool {
        self.calibration.last().is_some_and(|s| s.max_tv <= 0.5)
    }
}

/// Probe pairs inside `B(r)`: antipodal pairs on the first axes plus a few
/// deterministic random directions.
fn probe_pairs(dim: usize, radius: f64, count: usize, stream: Stream) -> Vec<(State, State)> {
    let mut rng = stream.rng();
    let mut pairs = Vec::with_capacity(count);
    for k in 0..dim.min(count) {
        let mut u = vec![0.0; dim];
        u[k] = radius;
        pairs.push((u.clone(), u.iter().map(|v| -v).collect()));
    }
    while pairs.len() < count {
        let dir: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let n = norm(&dir);
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        let x: State = dir.iter().map(|v| a * radius * v / n).collect();
        let y: State = dir.iter().map(|v| -b * radius * v / n).collect();
        pairs.push((x, y));
    }
    pairs
}

/// Shrinks `r` by halving from `initial` until the worst grid TV between
/// kernels from pairs in `B(r)` is at most ½.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_small_radius(
    model: &ModelSpec,
    period: f64,
    initial: f64,
    grid: &Grid,
    kernel_samples: usize,
    probes: usize,
    max_halvings: usize,
    stream: Stream,
) -> Result<Vec<CalibrationStep>> {
    if !(initial > 0.0) {
        return Err(Error::NonPositiveRadius);
    }
    let mut radius = initial;
    let mut trace = Vec::new();
    for h in 0..=max_halvings {
        let s = stream.split(h as u64);
        let max_tv = probe_pairs(model.dim(), radius, probes.max(1), s.split(0))
            .iter()
            .enumerate()
            .map(|(i, (x, y))| -> Result<f64> {
                let si = s.split(1 + i as u64);
                let a = sample_endpoints(model, x, period, kernel_samples, si.split(0))?;
                let b = sample_endpoints(model, y, period, kernel_samples, si.split(1))?;
                tv_discrete(&grid.histogram(&a), &grid.histogram(&b))
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        trace.push(CalibrationStep { radius, max_tv });
        if max_tv <= 0.5 {
            break;
        }
        radius /= 2.0;
    }
    Ok(trace)
}

/// Endpoint samples keyed by exact origin; the epoch is the run's seed.
#[derive(Debug, Default)]
pub struct KernelCache {
    epoch: u64,
    entries: HashMap<Vec<u64>, Arc<Vec<State>>>,
    pub hits: usize,
    pub misses: usize,
}

impl KernelCache {
    pub fn new(epoch: u64) -> Self {
        Self {
            epoch,
            ..Self::default()
        }
    }

    fn samples(
        &mut self,
        model: &ModelSpec,
        cfg: &CouplingConfig,
        x: &[f64],
        stream: Stream,
    ) -> Result<Arc<Vec<State>>> {
        let mut key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        key.push(cfg.period.to_bits());
        key.push(self.epoch);
        if let Some(s) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(Arc::clone(s));
        }
        self.misses += 1;
        let s = Arc::new(sample_endpoints(model, x, cfg.period, cfg.kernel_samples, stream)?);
        self.entries.insert(key, Arc::clone(&s));
        Ok(s)
    }
}

fn counts(grid: &Grid, states: &[State]) -> Vec<u64> {
    let mut c = vec![0u64; grid.cells()];
    for s in states {
        c[grid.cell_of(s)] += 1;
    }
    c
}

fn pick_in_cell<R: Rng + ?Sized>(grid: &Grid, samples: &[State], cell: usize, rng: &mut R) -> State {
    let members: Vec<&State> = samples.iter().filter(|s| grid.cell_of(s) == cell).collect();
    members[rng.random_range(0..members.len())].clone()
}

/// One transition of the coupled chain over one period.
pub fn coupled_step(
    s: &CoupledChainState,
    model: &ModelSpec,
    cfg: &CouplingConfig,
    cache: &mut KernelCache,
    rng: &mut StreamRng,
) -> Result<(CoupledChainState, Branch)> {
    let k = s.k + 1;
    if s.coalesced || s.x1 == s.x2 {
        let x = model.evolve(&s.x1, cfg.period, rng)?;
        return Ok((
            CoupledChainState {
                x1: x.clone(),
                x2: x,
                coalesced: true,
                k,
            },
            Branch::Synchronous,
        ));
    }
    if norm(&s.x1) <= cfg.small_radius && norm(&s.x2) <= cfg.small_radius {
        let s1 = cache.samples(model, cfg, &s.x1, Stream::from_rng(rng))?;
        let s2 = cache.samples(model, cfg, &s.x2, Stream::from_rng(rng))?;
        let coupling = CountCoupling::new(&counts(&cfg.grid, &s1), &counts(&cfg.grid, &s2))?;
        let draw = coupling.sample(rng);
        let x1 = pick_in_cell(&cfg.grid, &s1, draw.i, rng);
        let x2 = if draw.coalesced {
            x1.clone()
        } else {
            pick_in_cell(&cfg.grid, &s2, draw.j, rng)
        };
        return Ok((
            CoupledChainState {
                x1,
                x2,
                coalesced: draw.coalesced,
                k,
            },
            Branch::Maximal,
        ));
    }
    let x1 = model.evolve(&s.x1, cfg.period, rng)?;
    let x2 = model.evolve(&s.x2, cfg.period, rng)?;
    let coalesced = x1 == x2;
    Ok((
        CoupledChainState {
            x1,
            x2,
            coalesced,
            k,
        },
        Branch::Independent,
    ))
}

/// Record of one coupled trajectory. Times are step counts `k` (time `kT`);
/// `None` marks a time not reached within `max_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledRun {
    pub states: Vec<CoupledChainState>,
    pub branches: Vec<Branch>,
    pub tau_eps: Option<usize>,
    pub tau: Option<usize>,
    pub rho: Option<usize>,
    pub max_steps: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

/// Runs the coupled chain until all three stopping times are known or
/// `max_steps` periods have elapsed.
pub fn run_coupled(
    x1: &[f64],
    x2: &[f64],
    model: &ModelSpec,
    cfg: &CouplingConfig,
    max_steps: usize,
    stream: Stream,
) -> Result<CoupledRun> {
    if max_steps == 0 {
        return Err(invalid("max_steps", "must be at least 1"));
    }
    cfg.validate(model)?;
    let mut rng = stream.rng();
    let mut cache = KernelCache::new(stream.seed());
    let mut state = CoupledChainState::new(x1.to_vec(), x2.to_vec());
    let (mut tau_eps, mut tau, mut rho) = (None, None, None);
    let mut states = Vec::new();
    let mut branches = Vec::new();
    loop {
        let k = state.k;
        if tau_eps.is_none()
            && model_norm(model, &state.x1, cfg.eps) + model_norm(model, &state.x2, cfg.eps) <= cfg.eps_radius
        {
            tau_eps = Some(k);
        }
        if tau.is_none() && norm(&state.x1) + norm(&state.x2) <= cfg.small_radius {
            tau = Some(k);
        }
        if rho.is_none() && (state.coalesced || state.x1 == state.x2) {
            rho = Some(k);
        }
        let resolved = tau_eps.is_some() && tau.is_some() && rho.is_some();
        if resolved || k >= max_steps {
            states.push(state);
            break;
        }
        let (next, branch) = coupled_step(&state, model, cfg, &mut cache, &mut rng)?;
        states.push(state);
        branches.push(branch);
        state = next;
    }
    Ok(CoupledRun {
        states,
        branches,
        tau_eps,
        tau,
        rho,
        max_steps,
        cache_hits: cache.hits,
        cache_misses: cache.misses,
    })
}

/// `n` independent runs from the same pair; run `i` uses `stream.split(i)`.
pub fn run_coupled_ensemble(
    x1: &[f64],
    x2: &[f64],
    model: &ModelSpec,
    cfg: &CouplingConfig,
    max_steps: usize,
    n: usize,
    stream: Stream,
) -> Result<Vec<CoupledRun>> {
    (0..n)
        .into_par_iter()
        .map(|i| run_coupled(x1, x2, model, cfg, max_steps, stream.split(i as u64)))
        .collect()
}

/// Per-run summary written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub tau_eps: Option<usize>,
    pub tau: Option<usize>,
    pub rho: Option<usize>,
    pub max_steps: usize,
    pub branches: BranchHistogram,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub small_radius: f64,
    pub calibration: Vec<CalibrationStep>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchHistogram {
    pub synchronous: usize,
    pub maximal: usize,
    pub independent: usize,
}

impl CoupledRun {
    pub fn branch_histogram(&self) -> BranchHistogram {
        let mut h = BranchHistogram::default();
        for b in &self.branches {
            match b {
                Branch::Synchronous => h.synchronous += 1,
                Branch::Maximal => h.maximal += 1,
                Branch::Independent => h.independent += 1,
            }
        }
        h
    }

    pub fn summary(&self, run: usize, cfg: &CouplingConfig) -> RunSummary {
        RunSummary {
            run,
            tau_eps: self.tau_eps,
            tau: self.tau,
            rho: self.rho,
            max_steps: self.max_steps,
            branches: self.branch_histogram(),
            cache_hits: self.cache_hits,
            cache_misses: self.cache_misses,
            small_radius: cfg.small_radius,
            calibration: cfg.calibration.clone(),
        }
    }
}

pub fn write_runs_jsonl<W: Write>(mut w: W, runs: &[CoupledRun], cfg: &CouplingConfig) -> std::io::Result<()> {
    for (i, r) in runs.iter().enumerate() {
        serde_json::to_writer(&mut w, &r.summary(i, cfg))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Empirical survival `P̂(τ > k)` for `k = 0..=max_steps`; censored entries
/// count as surviving every step up to `max_steps`.
pub fn survival(times: &[Option<usize>], max_steps: usize) -> Vec<f64> {
    let n = times.len() as f64;
    (0..=max_steps)
        .map(|k| times.iter().filter(|t| t.is_none_or(|v| v > k)).count() as f64 / n)
        .collect()
}

/// Minimum number of uncensored observations for a tail fit.
pub const MIN_FINITE_TIMES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentFit {
    /// Fitted decay rate per unit time.
    pub eta_rate: f64,
    /// Prefactor `exp(intercept)`.
    pub c_hat: f64,
    pub r_squared: f64,
    pub points: usize,
    /// Set when the survival curve carries no usable decay, e.g. a single
    /// deterministic time.
    pub degenerate: bool,
    /// Plug-in estimate of `E exp(η̂ τ / 2)`, censored times at `max_steps`.
    pub half_rate_moment: f64,
}

/// Least-squares fit of `ln P̂(τ > kT)` against `kT` over the steps where
/// `P̂ ≥ 10/n`, restricted to the uncensored range.
pub fn exp_moment_fit(times: &[Option<usize>], period: f64, max_steps: usize) -> Result<ExpMomentFit> {
    let finite = times.iter().filter(|t| t.is_some()).count();
    if finite < MIN_FINITE_TIMES {
        return Err(Error::InsufficientTailData {
            finite,
            required: MIN_FINITE_TIMES,
        });
    }
    if !(period > 0.0) {
        return Err(invalid("period", "must be positive"));
    }
    let n = times.len() as f64;
    let surv = survival(times, max_steps);
    let floor = 10.0 / n;
    let (xs, ys): (Vec<f64>, Vec<f64>) = surv
        .iter()
        .enumerate()
        .take(max_steps)
        .filter(|(_, s)| **s >= floor)
        .map(|(k, s)| (k as f64 * period, s.ln()))
        .unzip();
    let distinct = {
        let mut v: Vec<u64> = ys.iter().map(|y| y.to_bits()).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let fit = ols(&xs, &ys);
    let (eta_rate, c_hat, r_squared, degenerate) = match fit {
        Some(f) if distinct >= 2 && f.slope < 0.0 => (-f.slope, f.intercept.exp(), f.r_squared, false),
        Some(f) => (-f.slope, f.intercept.exp(), f.r_squared, true),
        None => (0.0, 1.0, 0.0, true),
    };
    let half_rate_moment = times
        .iter()
        .map(|t| (0.5 * eta_rate * t.unwrap_or(max_steps) as f64 * period).exp())
        .sum::<f64>()
        / n;
    Ok(ExpMomentFit {
        eta_rate,
        c_hat,
        r_squared,
        points: xs.len(),
        degenerate,
        half_rate_moment,
    })
}

/// `q^k (1 + m₁ + m₂)`, the envelope for `P(τ^ε > kT)` with `mᵢ = |xᵢ|_ε^p`.
pub fn hitting_tail_envelope(q: f64, k: usize, m1: f64, m2: f64) -> f64 {
    q.powi(k as i32) * (1.0 + m1 + m2)
}

/// One entry of the drift recursion: upper bounds on
/// `e_k = E(|X(kT)|_ε^p 1_{B_k})` and `p_k = P(B_k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftBound {
    pub e: f64,
    pub p: f64,
    /// `q² e_k + 2 C₂ p_k`.
    pub combined: f64,
}

/// Smallest `M` with `q² + 2C₂/M^p ≤ q`.
pub fn minimal_eps_radius(q: f64, c2: f64, p: f64) -> f64 {
    (2.0 * c2 / (q - q * q)).powf(1.0 / p)
}

/// Iterates `e_{k+1} = q² e_k + 2C₂ p_k`, `p_{k+1} = (q²/M^p) e_k + (2C₂/M^p) p_k`
/// for `k < k_max`.
#[allow(clippy::too_many_arguments)]
pub fn drift_recursion_bound(
    q: f64,
    c2: f64,
    m: f64,
    p: f64,
    e0: f64,
    p0: f64,
    k_max: usize,
) -> Result<Vec<DriftBound>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid("q", format!("must lie in (0, 1), got {q}")));
    }
    if !(c2 > 1.0) {
        return Err(invalid("c2", format!("must exceed 1, got {c2}")));
    }
    if !(m > 0.0) {
        return Err(invalid("m", "must be positive"));
    }
    if !(p > 0.0) {
        return Err(invalid("p", "must be positive"));
    }
    if !(e0 >= 0.0 && p0 >= 0.0) {
        return Err(invalid("e0", "initial values must be nonnegative"));
    }
    let q2 = q * q;
    let mp = m.powf(p);
    let lhs = q2 + 2.0 * c2 / mp;
    if lhs > q {
        return Err(Error::DriftRecursionInadmissible {
            lhs,
            q,
            min_m: minimal_eps_radius(q, c2, p),
        });
    }
    let mut out = Vec::with_capacity(k_max + 1);
    let (mut e, mut pk) = (e0, p0);
    for k in 0..=k_max {
        out.push(DriftBound {
            e,
            p: pk,
            combined: q2 * e + 2.0 * c2 * pk,
        });
        if k == k_max {
            break;
        }
        let (e_next, p_next) = drift_step(q2, c2, mp, e, pk);
        e = e_next;
        pk = p_next;
    }
    Ok(out)
}

/// One application of the recursion matrix; `mp = M^p`.
pub fn drift_step(q2: f64, c2: f64, mp: f64, e: f64, p: f64) -> (f64, f64) {
    (q2 * e + 2.0 * c2 * p, q2 / mp * e + 2.0 * c2 / mp * p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{heat_example_config, DiagonalGenerator, DriftFamily, DriftSpec};
    use crate::stable_noise::StableIndex;

    #[test]
    fn maximal_coupling_identical_laws() {
        let p = [0.2, 0.3, 0.5];
        let mut rng = Stream::new(1).rng();
        let mut hist = [0usize; 3];
        for _ in 0..30_000 {
            let d = maximal_coupling_discrete(&p, &p, &mut rng).unwrap();
            assert!(d.coalesced && d.i == d.j);
            hist[d.i] += 1;
        }
        for (h, w) in hist.iter().zip(p) {
            assert!((*h as f64 / 30_000.0 - w).abs() < 0.015);
        }
    }

    #[test]
    fn maximal_coupling_disjoint_laws() {
        let p = [0.5, 0.5, 0.0, 0.0];
        let q = [0.0, 0.0, 0.25, 0.75];
        let mut rng = Stream::new(2).rng();
        let mut joint = [[0usize; 4]; 4];
        let n = 40_000;
        for _ in 0..n {
            let d = maximal_coupling_discrete(&p, &q, &mut rng).unwrap();
            assert!(!d.coalesced);
            joint[d.i][d.j] += 1;
        }
        // independent product law
        for i in 0..2 {
            for j in 2..4 {
                let f = joint[i][j] as f64 / n as f64;
                assert!((f - p[i] * q[j]).abs() < 0.01, "{i} {j} {f}");
            }
        }
    }

    #[test]
    fn four_outcome_example_enumerated() {
        // p = (1/2, 1/2), q = (1/4, 3/4) as counts over 4.
        let c = CountCoupling::new(&[2, 2], &[1, 3]).unwrap();
        assert_eq!(c.tv(), (1, 4));
        let den = c.joint_denominator();
        let j = |a, b| c.joint_numerator(a, b);
        assert_eq!((j(0, 0), j(0, 1), j(1, 0), j(1, 1)), (1, 1, 0, 2));
        assert_eq!(den, 4);
        // marginals
        assert_eq!(j(0, 0) + j(0, 1), 2);
        assert_eq!(j(0, 1) + j(1, 1), 3);
        // non-coalescence forces i = cell 1, j = cell 2 (one-based)
        let mut rng = Stream::new(3).rng();
        let mut stay = 0;
        for _ in 0..20_000 {
            let d = c.sample(&mut rng);
            if d.coalesced {
                stay += 1;
            } else {
                assert_eq!((d.i, d.j), (0, 1));
            }
        }
        assert!((stay as f64 / 20_000.0 - 0.75).abs() < 0.01);
        let mut rng = Stream::new(4).rng();
        let hits = (0..20_000)
            .filter(|_| maximal_coupling_discrete(&[0.5, 0.5], &[0.25, 0.75], &mut rng).unwrap().coalesced)
            .count();
        assert!((hits as f64 / 20_000.0 - 0.75).abs() < 0.01);
    }

    #[test]
    fn count_coupling_identical_counts() {
        let c = CountCoupling::new(&[3, 0, 5], &[3, 0, 5]).unwrap();
        assert_eq!(c.tv(), (0, 8));
        assert_eq!(c.joint_numerator(2, 2) * 8, 5 * c.joint_denominator());
        assert_eq!(c.joint_numerator(0, 2), 0);
        assert!(CountCoupling::new(&[1, 2], &[1, 1]).is_err());
    }

    #[test]
    fn drift_recursion_examples() {
        let out = drift_recursion_bound(0.5, 2.0, 16.0, 1.0, 3.0, 0.4, 0).unwrap();
        assert_eq!((out[0].e, out[0].p), (3.0, 0.4));
        let out = drift_recursion_bound(0.5, 2.0, 16.0, 1.0, 3.0, 0.4, 1).unwrap();
        assert!(out[1].e <= 0.25 * 3.0 + 4.0 * 0.4);
        assert_eq!(minimal_eps_radius(0.5, 2.0, 1.0), 16.0);
        match drift_recursion_bound(0.5, 2.0, 15.9, 1.0, 1.0, 1.0, 3) {
            Err(Error::DriftRecursionInadmissible { min_m, .. }) => assert_eq!(min_m, 16.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn drift_recursion_combined_decays_by_q() {
        let q = 0.7;
        let m = minimal_eps_radius(q, 3.0, 0.75) * 1.01;
        let out = drift_recursion_bound(q, 3.0, m, 0.75, 10.0, 1.0, 40).unwrap();
        for w in out.windows(2) {
            assert!(w[1].combined <= q * w[0].combined * (1.0 + 1e-12));
        }
    }

    #[test]
    fn exp_fit_degenerate_and_insufficient() {
        let det = vec![Some(4usize); 500];
        let f = exp_moment_fit(&det, 0.1, 20).unwrap();
        assert!(f.degenerate);
        let few = vec![Some(2usize); 50];
        assert!(matches!(
            exp_moment_fit(&few, 0.1, 20),
            Err(Error::InsufficientTailData { finite: 50, .. })
        ));
    }

    #[test]
    fn exp_fit_geometric_times() {
        let mut rng = Stream::new(5).rng();
        let times: Vec<Option<usize>> = (0..10_000)
            .map(|_| {
                let mut k = 1;
                while rng.random::<f64>() < 0.5 {
                    k += 1;
                }
                Some(k)
            })
            .collect();
        let t = 0.2;
        let f = exp_moment_fit(&times, t, 60).unwrap();
        assert!(!f.degenerate);
        assert!((f.eta_rate * t - 2f64.ln()).abs() < 0.05, "{}", f.eta_rate * t);
    }

    #[test]
    fn survival_is_monotone_with_censoring() {
        let times = vec![Some(0), Some(3), None, Some(1), None];
        let s = survival(&times, 4);
        assert_eq!(s[0], 0.8);
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s[4], 0.4);
    }

    fn one_mode_model() -> ModelSpec {
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

    fn config(model: &ModelSpec) -> CouplingConfig {
        CouplingConfig {
            period: 0.05,
            small_radius: 0.3,
            eps_radius: 5.0,
            eps: 0.1,
            grid: Grid::for_model(model, 1, 32, 8.0),
            kernel_samples: 2000,
            moment_order: 0.75,
            calibration: vec![],
        }
    }

    #[test]
    fn coalesced_input_stays_coalesced() {
        let model = one_mode_model();
        let cfg = config(&model);
        let mut cache = KernelCache::new(0);
        let mut rng = Stream::new(6).rng();
        // equal points without the flag are treated as coalesced
        let s = CoupledChainState {
            x1: vec![0.7],
            x2: vec![0.7],
            coalesced: false,
            k: 3,
        };
        let (next, branch) = coupled_step(&s, &model, &cfg, &mut cache, &mut rng).unwrap();
        assert_eq!(branch, Branch::Synchronous);
        assert!(next.coalesced);
        assert_eq!(next.x1, next.x2);
        assert_eq!(next.k, 4);
    }

    #[test]
    fn identical_kernels_always_coalesce() {
        // Same origin with the flag cleared and a cache holding one sample
        // set: both kernels coincide, so the coupling must coalesce.
        let model = one_mode_model();
        let cfg = config(&model);
        let mut cache = KernelCache::new(0);
        let x = vec![0.1];
        let samples = Arc::new(sample_endpoints(&model, &x, cfg.period, cfg.kernel_samples, Stream::new(7)).unwrap());
        let a = counts(&cfg.grid, &samples);
        let c = CountCoupling::new(&a, &a).unwrap();
        let mut rng = Stream::new(8).rng();
        for _ in 0..1000 {
            assert!(c.sample(&mut rng).coalesced);
        }
        let mut key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        key.push(cfg.period.to_bits());
        key.push(0);
        cache.entries.insert(key, samples);
        let s1 = cache.samples(&model, &cfg, &x, Stream::new(9)).unwrap();
        assert_eq!(cache.hits, 1);
        assert_eq!(counts(&cfg.grid, &s1), a);
    }

    #[test]
    fn run_from_common_point() {
        let model = one_mode_model();
        let cfg = config(&model);
        let run = run_coupled(&[0.0], &[0.0], &model, &cfg, 10, Stream::new(10)).unwrap();
        assert_eq!((run.rho, run.tau, run.tau_eps), (Some(0), Some(0), Some(0)));
    }

    #[test]
    fn far_points_one_step_censored() {
        let model = one_mode_model();
        let mut cfg = config(&model);
        cfg.eps_radius = 1e-6;
        let run = run_coupled(&[50.0], &[-50.0], &model, &cfg, 1, Stream::new(11)).unwrap();
        assert_eq!((run.rho, run.tau, run.tau_eps), (None, None, None));
        assert_eq!(run.branches, vec![Branch::Independent]);
    }

    #[test]
    fn runs_absorb_after_coalescence() {
        let model = one_mode_model();
        let cfg = config(&model);
        let runs = run_coupled_ensemble(&[0.5], &[-0.5], &model, &cfg, 40, 40, Stream::new(12)).unwrap();
        let mut coalesced = 0;
        for r in &runs {
            if let Some(rho) = r.rho {
                coalesced += 1;
                for s in &r.states[rho..] {
                    assert_eq!(s.x1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                               s.x2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                }
                assert!(r.branches[rho..].iter().all(|b| *b == Branch::Synchronous));
            }
        }
        assert!(coalesced > 20);
    }

    #[test]
    fn calibration_halves_until_half() {
        let model = one_mode_model();
        let grid = Grid::for_model(&model, 1, 32, 8.0);
        let trace = calibrate_small_radius(&model, 0.05, 4.0, &grid, 4000, 4, 12, Stream::new(13)).unwrap();
        let last = trace.last().unwrap();
        assert!(last.max_tv <= 0.5);
        assert!(trace.len() > 1);
        for w in trace.windows(2) {
            assert_eq!(w[1].radius, w[0].radius / 2.0);
            assert!(w[0].max_tv > 0.5);
        }
    }

    #[test]
    fn marginal_preserved_in_maximal_branch() {
        // Component 1 from a fixed pair inside B(r) follows its own kernel.
        let a = StableIndex::new(1.5).unwrap();
        let gen = DiagonalGenerator::new(vec![2.0], vec![1.0], a, 0.1, 0.5).unwrap();
        let model = ModelSpec::galerkin(gen, DriftSpec::zero(1), 0.05).unwrap();
        let mut cfg = config(&model);
        cfg.small_radius = 1.0;
        cfg.kernel_samples = 500;
        let grid = Grid::for_model(&model, 1, 16, 6.0);
        cfg.grid = grid.clone();
        let start = CoupledChainState::new(vec![0.4], vec![-0.4]);
        let n = 4000;
        let ends: Vec<(State, State)> = crate::rng::par_ensemble(Stream::new(14), n, |i, rng| {
            let mut cache = KernelCache::new(i as u64);
            let (s, b) = coupled_step(&start, &model, &cfg, &mut cache, rng).unwrap();
            assert_eq!(b, Branch::Maximal);
            (s.x1, s.x2)
        });
        let h1 = grid.histogram(&ends.iter().map(|e| e.0.clone()).collect::<Vec<_>>());
        let h2 = grid.histogram(&ends.iter().map(|e| e.1.clone()).collect::<Vec<_>>());
        let k1 = grid.histogram(&sample_endpoints(&model, &[0.4], cfg.period, 200_000, Stream::new(15)).unwrap());
        let k2 = grid.histogram(&sample_endpoints(&model, &[-0.4], cfg.period, 200_000, Stream::new(16)).unwrap());
        let tol = 3.0 / (n as f64).sqrt();
        for c in 0..grid.cells() {
            assert!((h1[c] - k1[c]).abs() < tol, "cell {c}: {} vs {}", h1[c], k1[c]);
            // component 2 is exact on cells only up to the kernel-sample noise
            assert!((h2[c] - k2[c]).abs() < tol + 3.0 * (k2[c] / 500.0).sqrt(), "cell {c}");
        }
    }
}
