//! Exact samplers for symmetric α-stable laws.
//!
//! All characteristic exponents use the normalization where the standard
//! variable has `E exp(iλξ) = exp(-|λ|^α)`; spectral weights absorb any
//! other constant.

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{par_ensemble, Stream};
use crate::stats::empirical_cf;

/// Draws whose magnitude exceeds this are discarded and redrawn.
pub const OVERFLOW_THRESHOLD: f64 = 1e12;

static OVERFLOW_RESAMPLES: AtomicU64 = AtomicU64::new(0);

/// Process-wide number of draws rejected by the overflow guard.
pub fn overflow_resample_count() -> u64 {
    OVERFLOW_RESAMPLES.load(Ordering::Relaxed)
}

/// Stability index α of a symmetric stable law, `0 < α < 2`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StableIndex(f64);

impl StableIndex {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 2.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::StableIndexOutOfRange(alpha))
        }
    }

    /// Index usable for the finite-dimensional SDE, which needs `α > 1`.
    pub fn finite_dimensional(alpha: f64) -> Result<Self> {
        let a = Self::new(alpha)?;
        if alpha > 1.0 {
            Ok(a)
        } else {
            Err(Error::FiniteDimIndex(alpha))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for StableIndex {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StableIndex> for f64 {
    fn from(a: StableIndex) -> f64 {
        a.0
    }
}

/// Standard symmetric α-stable law (scale 1) via the Chambers–Mallows–Stuck
/// transform.
#[derive(Clone, Copy, Debug)]
pub struct StandardStable {
    alpha: f64,
}

impl StandardStable {
    pub fn new(alpha: StableIndex) -> Self {
        Self { alpha: alpha.get() }
    }

    fn raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = FRAC_PI_2 * (2.0 * rng.random::<f64>() - 1.0);
        if self.alpha == 1.0 {
            return v.tan();
        }
        let w = -(1.0 - rng.random::<f64>()).ln();
        let a = self.alpha;
        (a * v).sin() / v.cos().powf(1.0 / a) * (((1.0 - a) * v).cos() / w).powf((1.0 - a) / a)
    }
}

impl Distribution<f64> for StandardStable {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = self.raw(rng);
            if x.is_finite() && x.abs() <= OVERFLOW_THRESHOLD {
                return x;
            }
            OVERFLOW_RESAMPLES.fetch_add(1, Ordering::Relaxed);
        }
    }
}

pub fn sample_standard_stable<R: Rng + ?Sized>(alpha: StableIndex, rng: &mut R) -> f64 {
    StandardStable::new(alpha).sample(rng)
}

/// One atom `(direction, weight)` of a spectral measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub direction: Vec<f64>,
    pub weight: f64,
}

/// Symmetric atomic measure on the unit sphere of ℝⁿ whose atoms span ℝⁿ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralMeasure {
    dim: usize,
    atoms: Vec<Atom>,
}

impl SpectralMeasure {
    /// Builds the measure, adding the mirror atom `(-a, w)` for every atom
    /// whose mirror is not already listed with the same weight.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let dim = atoms
            .first()
            .map(|a| a.direction.len())
            .ok_or_else(|| Error::InvalidSpectralMeasure("no atoms".into()))?;
        if dim == 0 {
            return Err(Error::InvalidSpectralMeasure("zero-dimensional direction".into()));
        }
        for a in &atoms {
            if a.direction.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: a.direction.len(),
                });
            }
            let norm = a.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpectralMeasure(format!(
                    "direction {:?} has norm {norm}, expected 1",
                    a.direction
                )));
            }
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return Err(Error::InvalidSpectralMeasure(format!(
                    "weight {} must be positive and finite",
                    a.weight
                )));
            }
        }

        let mut sym = atoms.clone();
        for a in &atoms {
            let mirror: Vec<f64> = a.direction.iter().map(|v| -v).collect();
            let present = sym.iter().any(|b| {
                b.weight == a.weight
                    && b.direction
                        .iter()
                        .zip(&mirror)
                        .all(|(x, y)| (x - y).abs() <= 1e-12)
            });
            if !present {
                sym.push(Atom {
                    direction: mirror,
                    weight: a.weight,
                });
            }
        }

        let rank = DMatrix::from_fn(dim, sym.len(), |i, j| sym[j].direction[i]).rank(1e-9);
        if rank < dim {
            return Err(Error::DegenerateSpectralMeasure { rank, dim });
        }
        Ok(Self { dim, atoms: sym })
    }

    /// The one-dimensional measure `{(+1, ½), (−1, ½)}`.
    pub fn standard_1d() -> Self {
        Self::new(vec![
            Atom {
                direction: vec![1.0],
                weight: 0.5,
            },
            Atom {
                direction: vec![-1.0],
                weight: 0.5,
            },
        ])
        .expect("valid measure")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// ψ(u) = Σ_j w_j |⟨u, a_j⟩|^α.
    pub fn characteristic_exponent(&self, u: &[f64], alpha: StableIndex) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * dot(u, &a.direction).abs().powf(alpha.get()))
            .sum()
    }

    /// Best constant `C` with ψ(u) ≥ C |u|^α, i.e. the minimum of ψ over the
    /// unit sphere.
    ///
    /// Exact in one dimension; in two dimensions a fine angular sweep with a
    /// local refinement; above that a deterministic random search.
    pub fn nondegeneracy_constant(&self, alpha: StableIndex) -> f64 {
        match self.dim {
            1 => self.characteristic_exponent(&[1.0], alpha),
            2 => {
                let psi = |t: f64| self.characteristic_exponent(&[t.cos(), t.sin()], alpha);
                let n = 7200;
                let step = std::f64::consts::PI / n as f64;
                let (best_i, _) = (0..n)
                    .map(|i| (i, psi(i as f64 * step)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                let (mut lo, mut hi) = ((best_i as f64 - 1.0) * step, (best_i as f64 + 1.0) * step);
                for _ in 0..80 {
                    let m1 = lo + (hi - lo) / 3.0;
                    let m2 = hi - (hi - lo) / 3.0;
                    if psi(m1) < psi(m2) {
                        hi = m2;
                    } else {
                        lo = m1;
                    }
                }
                psi(0.5 * (lo + hi)).min(psi(best_i as f64 * step))
            }
            n => {
                let mut rng = Stream::new(0x5eed).rng();
                (0..200_000)
                    .map(|_| {
                        let mut u: Vec<f64> =
                            (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                        let norm = dot(&u, &u).sqrt();
                        u.iter_mut().for_each(|v| *v /= norm);
                        self.characteristic_exponent(&u, alpha)
                    })
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

impl<'de> Deserialize<'de> for SpectralMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            atoms: Vec<Atom>,
        }
        let raw = Raw::deserialize(d)?;
        SpectralMeasure::new(raw.atoms).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Increment `Z(dt) = Σ_j (dt·w_j)^{1/α} ξ_j a_j` over the atoms.
pub fn sample_spectral_increment<R: Rng + ?Sized>(
    mu: &SpectralMeasure,
    alpha: StableIndex,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    let scales: Vec<f64> = mu
        .atoms
        .iter()
        .map(|a| (dt * a.weight).powf(1.0 / alpha.get()))
        .collect();
    let mut out = vec![0.0; mu.dim];
    add_spectral_increment(mu, &scales, StandardStable::new(alpha), &mut out, rng);
    Ok(out)
}

/// Adds one increment to `out` with precomputed per-atom scales.
pub(crate) fn add_spectral_increment<R: Rng + ?Sized>(
    mu: &SpectralMeasure,
    scales: &[f64],
    law: StandardStable,
    out: &mut [f64],
    rng: &mut R,
) {
    for (atom, &s) in mu.atoms.iter().zip(scales) {
        let c = s * law.sample(rng);
        for (o, d) in out.iter_mut().zip(&atom.direction) {
            *o += c * d;
        }
    }
}

/// Scale `c(t) = β ((1 − e^{−αγt}) / (αγ))^{1/α}` of the Ornstein–Uhlenbeck
/// stochastic convolution of one mode.
pub fn ou_scale(gamma: f64, beta: f64, alpha: StableIndex, t: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(invalid("gamma", format!("must be positive, got {gamma}")));
    }
    if !(beta > 0.0) {
        return Err(invalid("beta", format!("must be positive, got {beta}")));
    }
    if !(t >= 0.0) {
        return Err(invalid("t", format!("must be nonnegative, got {t}")));
    }
    let a = alpha.get();
    let frac = if t.is_infinite() {
        1.0 / (a * gamma)
    } else {
        -(-a * gamma * t).exp_m1() / (a * gamma)
    };
    Ok(beta * frac.powf(1.0 / a))
}

/// Exact draw of one mode of the stochastic convolution at time `t`.
pub fn sample_ou_marginal<R: Rng + ?Sized>(
    gamma: f64,
    beta: f64,
    alpha: StableIndex,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    let c = ou_scale(gamma, beta, alpha, t)?;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(c * sample_standard_stable(alpha, rng))
}

/// One row of the sampler self-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfCheck {
    pub lambda: f64,
    pub empirical: f64,
    pub analytic: f64,
    pub tolerance: f64,
}

impl CfCheck {
    pub fn passes(&self) -> bool {
        (self.empirical - self.analytic).abs() <= self.tolerance
    }
}

/// Compares the empirical CF of `n` standard draws against `exp(-|λ|^α)`
/// with tolerance `3/√n`.
pub fn cf_selftest(alpha: StableIndex, lambdas: &[f64], n: usize, stream: Stream) -> Vec<CfCheck> {
    let draws = draw_standard(alpha, n, stream);
    lambdas
        .iter()
        .map(|&lambda| CfCheck {
            lambda,
            empirical: empirical_cf(&draws, lambda).0,
            analytic: (-lambda.abs().powf(alpha.get())).exp(),
            tolerance: 3.0 / (n as f64).sqrt(),
        })
        .collect()
}

/// `n` independent standard draws, draw `i` taken from `stream.split(i)`
/// in blocks so the result does not depend on thread count.
pub fn draw_standard(alpha: StableIndex, n: usize, stream: Stream) -> Vec<f64> {
    const BLOCK: usize = 4096;
    let law = StandardStable::new(alpha);
    let blocks = n.div_ceil(BLOCK);
    par_ensemble(stream, blocks, |b, rng| {
        let len = BLOCK.min(n - b * BLOCK);
        (0..len).map(|_| law.sample(rng)).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_two_sample;

    fn idx(a: f64) -> StableIndex {
        StableIndex::new(a).unwrap()
    }

    #[test]
    fn index_range() {
        assert!(matches!(StableIndex::new(2.5), Err(Error::StableIndexOutOfRange(_))));
        assert!(StableIndex::new(0.0).is_err());
        assert!(StableIndex::new(2.0).is_err());
        assert!(StableIndex::finite_dimensional(0.9).is_err());
        assert!(StableIndex::finite_dimensional(1.5).is_ok());
        assert!(StableIndex::new(2.5).unwrap_err().to_string().contains("index out of range"));
    }

    #[test]
    fn cauchy_median() {
        let draws = draw_standard(idx(1.0), 100_000, Stream::new(1));
        let inside = draws.iter().filter(|x| x.abs() <= 1.0).count() as f64 / draws.len() as f64;
        assert!((inside - 0.5).abs() < 0.01, "{inside}");
    }

    #[test]
    fn cf_at_one_for_alpha_one_point_five() {
        let draws = draw_standard(idx(1.5), 100_000, Stream::new(2));
        let (c, s) = empirical_cf(&draws, 1.0);
        assert!((c - (-1.0f64).exp()).abs() < 0.01, "{c}");
        assert!(s.abs() < 3.0 / (draws.len() as f64).sqrt());
    }

    #[test]
    fn symmetric_odd_statistics_vanish() {
        for a in [0.7, 1.0, 1.6] {
            let draws = draw_standard(idx(a), 50_000, Stream::new(3));
            for lambda in [0.3, 1.0, 4.0] {
                let (_, s) = empirical_cf(&draws, lambda);
                assert!(s.abs() < 3.0 / (draws.len() as f64).sqrt(), "alpha {a} lambda {lambda}: {s}");
            }
        }
    }

    #[test]
    fn ou_scale_values() {
        let c = ou_scale(1.0, 1.0, idx(1.0), 2f64.ln()).unwrap();
        assert!((c - 0.5).abs() < 1e-14);
        assert_eq!(ou_scale(1.0, 1.0, idx(1.5), 0.0).unwrap(), 0.0);
        let lim = ou_scale(1.0, 1.0, idx(1.5), f64::INFINITY).unwrap();
        assert!((lim - (1.0f64 / 1.5).powf(2.0 / 3.0)).abs() < 1e-12);
        assert!((lim - 0.76314).abs() < 1e-5);
        let big = ou_scale(1.0, 1.0, idx(1.5), 50.0).unwrap();
        assert!((big - lim).abs() < 1e-12);
        assert!(ou_scale(0.0, 1.0, idx(1.5), 1.0).is_err());
        assert!(ou_scale(1.0, -1.0, idx(1.5), 1.0).is_err());
        assert!(ou_scale(1.0, 1.0, idx(1.5), -1.0).is_err());
    }

    #[test]
    fn ou_scale_monotone_in_time() {
        let mut prev = 0.0;
        for i in 0..200 {
            let c = ou_scale(2.0, 0.7, idx(1.3), i as f64 * 0.05).unwrap();
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn ou_marginal_at_zero_time() {
        let mut rng = Stream::new(0).rng();
        assert_eq!(sample_ou_marginal(1.0, 1.0, idx(1.5), 0.0, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn ou_marginal_cf() {
        let n = 100_000;
        let a = idx(1.5);
        let c = ou_scale(1.0, 1.0, a, 1.0).unwrap();
        let draws: Vec<f64> = crate::rng::par_ensemble(Stream::new(4), n, |_, rng| {
            sample_ou_marginal(1.0, 1.0, a, 1.0, rng).unwrap()
        });
        for lambda in [0.5, 1.0, 2.0] {
            let (emp, _) = empirical_cf(&draws, lambda);
            let exact = (-(lambda * c).abs().powf(1.5)).exp();
            assert!((emp - exact).abs() < 3.0 / (n as f64).sqrt(), "{lambda}: {emp} vs {exact}");
        }
    }

    #[test]
    fn ou_marginal_scale_homothety() {
        let n = 100_000;
        let a = idx(1.2);
        let one: Vec<f64> = crate::rng::par_ensemble(Stream::new(5), n, |_, rng| {
            sample_ou_marginal(1.0, 1.0, a, 0.7, rng).unwrap()
        });
        let two: Vec<f64> = crate::rng::par_ensemble(Stream::new(6), n, |_, rng| {
            sample_ou_marginal(1.0, 2.0, a, 0.7, rng).unwrap() / 2.0
        });
        let d = ks_two_sample(&one, &two);
        let crit = crate::stats::ks_critical(1e-3) * (2.0 / n as f64).sqrt();
        assert!(d < crit, "{d} >= {crit}");
    }

    #[test]
    fn spectral_measure_validation() {
        let e1 = Atom {
            direction: vec![1.0, 0.0],
            weight: 1.0,
        };
        let err = SpectralMeasure::new(vec![e1.clone()]).unwrap_err();
        assert!(matches!(err, Error::DegenerateSpectralMeasure { rank: 1, dim: 2 }));
        assert!(err.to_string().contains("degenerate spectral measure"));

        let bad_norm = Atom {
            direction: vec![1.0, 1.0],
            weight: 1.0,
        };
        assert!(SpectralMeasure::new(vec![bad_norm]).is_err());

        let e2 = Atom {
            direction: vec![0.0, 1.0],
            weight: 2.0,
        };
        let mu = SpectralMeasure::new(vec![e1, e2]).unwrap();
        assert_eq!(mu.atoms().len(), 4);
        assert!((mu.total_weight() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_input_not_duplicated() {
        let mu = SpectralMeasure::standard_1d();
        assert_eq!(mu.atoms().len(), 2);
        assert_eq!(mu.total_weight(), 1.0);
        assert_eq!(mu.nondegeneracy_constant(idx(1.5)), 1.0);
    }

    #[test]
    fn nondegeneracy_constant_2d_axes() {
        let mu = SpectralMeasure::new(vec![
            Atom {
                direction: vec![1.0, 0.0],
                weight: 1.0,
            },
            Atom {
                direction: vec![0.0, 1.0],
                weight: 1.0,
            },
        ])
        .unwrap();
        // ψ(θ) = 2(|cos θ|^α + |sin θ|^α); for α > 1 its minimum sits on an axis.
        let c = mu.nondegeneracy_constant(idx(1.5));
        assert!((c - 2.0).abs() < 1e-9, "{c}");
        // for α < 1 the minimum is on an axis as well, at value 2.
        let c = mu.nondegeneracy_constant(idx(0.5));
        assert!((c - 2.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn spectral_1d_matches_standard() {
        let n = 100_000;
        let a = idx(1.3);
        let mu = SpectralMeasure::standard_1d();
        let inc: Vec<f64> = crate::rng::par_ensemble(Stream::new(7), n, |_, rng| {
            sample_spectral_increment(&mu, a, 1.0, rng).unwrap()[0]
        });
        for lambda in [0.5, 1.0, 2.0] {
            let (emp, _) = empirical_cf(&inc, lambda);
            let exact = (-lambda.powf(1.3)).exp();
            assert!((emp - exact).abs() < 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn spectral_dt_rejects_nonpositive() {
        let mut rng = Stream::new(0).rng();
        let mu = SpectralMeasure::standard_1d();
        assert!(sample_spectral_increment(&mu, idx(1.5), 0.0, &mut rng).is_err());
    }
}
