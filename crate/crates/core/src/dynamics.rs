//! State spaces, drifts and time stepping.
//!
//! Two settings are supported. The finite-dimensional SDE uses a matrix
//! generator with eigenvalues in the open left half-plane and noise given by
//! a spectral measure. The Galerkin-truncated SPDE uses a diagonal
//! generator `-diag(γ_k)` on the first `K` modes with cylindrical noise
//! `Σ β_k z_k(t) e_k`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stable_noise::{
    add_spectral_increment, dot, ou_scale, SpectralMeasure, StableIndex, StandardStable,
};
use rand::distr::Distribution;

pub type State = Vec<f64>;

/// Default number of retained modes for Galerkin models.
pub const DEFAULT_MODES: usize = 64;
/// Default time step.
pub const DEFAULT_DT: f64 = 1e-2;

/// Known closed-form families of diagonal generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorFamily {
    /// Dirichlet Laplacian on the unit interval, `γ_k = π²k²`,
    /// `β_k = γ_k^{-θ+1/α}`.
    Heat { d: usize },
}

/// Diagonal generator `-diag(γ_k)` with cylindrical noise weights `β_k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagonalGenerator {
    gammas: Vec<f64>,
    betas: Vec<f64>,
    alpha: StableIndex,
    eps: f64,
    theta: f64,
    /// Largest `C` with `β_k ≥ C γ_k^{-θ+1/α}` on the retained modes.
    lower_bound_constant: f64,
    family: Option<GeneratorFamily>,
}

impl DiagonalGenerator {
    pub fn new(
        gammas: Vec<f64>,
        betas: Vec<f64>,
        alpha: StableIndex,
        eps: f64,
        theta: f64,
    ) -> Result<Self> {
        if gammas.is_empty() {
            return Err(invalid("gammas", "at least one mode is required"));
        }
        if betas.len() != gammas.len() {
            return Err(Error::DimensionMismatch {
                expected: gammas.len(),
                got: betas.len(),
            });
        }
        if !(gammas[0] > 0.0) || gammas.iter().any(|g| !g.is_finite()) {
            return Err(invalid("gammas", "must be finite and strictly positive"));
        }
        if gammas.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("gammas", "must be nondecreasing"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(invalid("betas", "must be finite and strictly positive"));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(invalid("eps", format!("must lie in (0, 1), got {eps}")));
        }
        if !(theta > 0.0 && theta < 1.0) {
            return Err(invalid("theta", format!("must lie in (0, 1), got {theta}")));
        }
        let a = alpha.get();
        let lower_bound_constant = gammas
            .iter()
            .zip(&betas)
            .map(|(g, b)| b * g.powf(theta - 1.0 / a))
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            gammas,
            betas,
            alpha,
            eps,
            theta,
            lower_bound_constant,
            family: None,
        })
    }

    pub fn modes(&self) -> usize {
        self.gammas.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha(&self) -> StableIndex {
        self.alpha
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn lower_bound_constant(&self) -> f64 {
        self.lower_bound_constant
    }

    pub fn family(&self) -> Option<GeneratorFamily> {
        self.family
    }

    pub fn gamma1(&self) -> f64 {
        self.gammas[0]
    }

    /// Σ_{k≤K} β_k^α / γ_k^{1−αε} over the retained modes.
    pub fn admissibility_sum(&self) -> f64 {
        let a = self.alpha.get();
        self.gammas
            .iter()
            .zip(&self.betas)
            .map(|(g, b)| b.powf(a) / g.powf(1.0 - a * self.eps))
            .sum()
    }

    /// Upper bound on Σ_{k>K} β_k^α / (αγ_k), the stationary weight of the
    /// discarded modes. Only available for closed-form families.
    pub fn truncation_tail_bound(&self) -> Option<f64> {
        match self.family? {
            GeneratorFamily::Heat { .. } => {
                // β^α/(αγ) = (π²k²)^{-αθ}/α, and Σ_{k>K} k^{-s} ≤ K^{1-s}/(s-1).
                let a = self.alpha.get();
                let s = 2.0 * a * self.theta;
                if s <= 1.0 {
                    return None;
                }
                let k = self.modes() as f64;
                Some((PI * PI).powf(-a * self.theta) / a * k.powf(1.0 - s) / (s - 1.0))
            }
        }
    }

    /// Stationary scale `β_k (αγ_k)^{-1/α}` of mode `k` (zero-based) under
    /// the linear dynamics.
    pub fn stationary_scale(&self, k: usize) -> f64 {
        ou_scale(self.gammas[k], self.betas[k], self.alpha, f64::INFINITY)
            .expect("validated parameters")
    }
}

/// Galerkin truncation of the stochastic heat equation on the unit interval
/// with Dirichlet conditions.
pub fn heat_example_config(
    d: usize,
    alpha: StableIndex,
    theta: f64,
    eps: f64,
    modes: usize,
) -> Result<DiagonalGenerator> {
    if d != 1 {
        return Err(invalid("d", format!("only d = 1 is supported, got {d}")));
    }
    if modes == 0 {
        return Err(invalid("modes", "at least one mode is required"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid("eps", format!("must lie in (0, 1), got {eps}")));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(invalid("theta", format!("must lie in (0, 1), got {theta}")));
    }
    let a = alpha.get();
    let lhs = 2.0 * a * (theta - eps);
    if !(lhs > d as f64) {
        return Err(Error::Inadmissible(format!(
            "2α(θ−ε)>d violated: 2·{a}·({theta}−{eps}) = {lhs} ≤ {d}"
        )));
    }
    let gammas: Vec<f64> = (1..=modes).map(|k| PI * PI * (k * k) as f64).collect();
    let betas: Vec<f64> = gammas.iter().map(|g| g.powf(-theta + 1.0 / a)).collect();
    let mut gen = DiagonalGenerator::new(gammas, betas, alpha, eps, theta)?;
    gen.family = Some(GeneratorFamily::Heat { d });
    Ok(gen)
}

/// Finite-dimensional generator `A` whose spectrum lies in `Re z < 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGenerator {
    a: DMatrix<f64>,
    /// min_k |Re λ_k|.
    spectral_gap: f64,
}

impl MatrixGenerator {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(invalid("a", "must be a nonempty square matrix"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("a", "entries must be finite"));
        }
        let eig = a.complex_eigenvalues();
        let max_re = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
        if !(max_re < -1e-9) {
            return Err(Error::Inadmissible(format!(
                "generator eigenvalues must have negative real part; max Re = {max_re}"
            )));
        }
        Ok(Self {
            a,
            spectral_gap: -max_re,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid("a", "rows must form a square matrix"));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn spectral_gap(&self) -> f64 {
        self.spectral_gap
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.a.row(i).iter().copied().collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Matrix(MatrixGenerator),
    Diagonal(DiagonalGenerator),
}

impl Generator {
    pub fn dim(&self) -> usize {
        match self {
            Generator::Matrix(m) => m.dim(),
            Generator::Diagonal(d) => d.modes(),
        }
    }

    /// Slowest contraction rate: γ₁ for diagonal generators, the spectral
    /// gap `min |Re λ|` for matrices.
    pub fn gamma1(&self) -> f64 {
        match self {
            Generator::Matrix(m) => m.spectral_gap(),
            Generator::Diagonal(d) => d.gamma1(),
        }
    }
}

/// Built-in bounded drifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DriftFamily {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// `F_k(x) = s·tanh(⟨v_k, x⟩)` with `s = sup_norm/√K`.
    Tanh {
        sup_norm: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        directions: Option<Vec<Vec<f64>>>,
    },
    /// `F_k(x) = s·|sin⟨v_k, x⟩|^η·sign(sin⟨v_k, x⟩)` with `s = sup_norm/√K`.
    Holder {
        sup_norm: f64,
        exponent: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        directions: Option<Vec<Vec<f64>>>,
    },
}

/// A bounded drift with its declared sup-norm and Hölder data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftSpec {
    family: DriftFamily,
    dim: usize,
    sup_norm: f64,
    holder_exponent: f64,
    holder_constant: f64,
    /// Per-coordinate amplitude.
    #[serde(skip)]
    amplitude: f64,
    #[serde(skip)]
    directions: Option<Vec<Vec<f64>>>,
}

impl DriftSpec {
    pub fn new(family: DriftFamily, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        let check_dirs = |dirs: &Option<Vec<Vec<f64>>>| -> Result<()> {
            if let Some(v) = dirs {
                if v.len() != dim || v.iter().any(|r| r.len() != dim) {
                    return Err(invalid("directions", format!("must be a {dim}x{dim} matrix")));
                }
            }
            Ok(())
        };
        let root_k = (dim as f64).sqrt();
        let row_norms = |dirs: &Option<Vec<Vec<f64>>>| -> Vec<f64> {
            match dirs {
                Some(v) => v.iter().map(|r| dot(r, r).sqrt()).collect(),
                None => vec![1.0; dim],
            }
        };
        let spec = match &family {
            DriftFamily::Zero => Self {
                family: family.clone(),
                dim,
                sup_norm: 0.0,
                holder_exponent: 1.0,
                holder_constant: 0.0,
                amplitude: 0.0,
                directions: None,
            },
            DriftFamily::Constant { value } => {
                if value.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: value.len(),
                    });
                }
                Self {
                    family: family.clone(),
                    dim,
                    sup_norm: dot(value, value).sqrt(),
                    holder_exponent: 1.0,
                    holder_constant: 0.0,
                    amplitude: 0.0,
                    directions: None,
                }
            }
            DriftFamily::Tanh {
                sup_norm,
                directions,
            } => {
                if !(*sup_norm > 0.0 && sup_norm.is_finite()) {
                    return Err(invalid("sup_norm", "must be positive and finite"));
                }
                check_dirs(directions)?;
                let s = sup_norm / root_k;
                let lip = s * row_norms(directions).iter().map(|r| r * r).sum::<f64>().sqrt();
                Self {
                    family: family.clone(),
                    dim,
                    sup_norm: *sup_norm,
                    holder_exponent: 1.0,
                    holder_constant: lip,
                    amplitude: s,
                    directions: directions.clone(),
                }
            }
            DriftFamily::Holder {
                sup_norm,
                exponent,
                directions,
            } => {
                if !(*sup_norm > 0.0 && sup_norm.is_finite()) {
                    return Err(invalid("sup_norm", "must be positive and finite"));
                }
                if !(*exponent > 0.0 && *exponent <= 1.0) {
                    return Err(invalid("exponent", format!("must lie in (0, 1], got {exponent}")));
                }
                check_dirs(directions)?;
                let s = sup_norm / root_k;
                // u ↦ |u|^η sign(u) is η-Hölder with constant 2^{1-η}; sin is 1-Lipschitz.
                let c = s
                    * 2f64.powf(1.0 - exponent)
                    * row_norms(directions)
                        .iter()
                        .map(|r| r.powf(2.0 * exponent))
                        .sum::<f64>()
                        .sqrt();
                Self {
                    family: family.clone(),
                    dim,
                    sup_norm: *sup_norm,
                    holder_exponent: *exponent,
                    holder_constant: c,
                    amplitude: s,
                    directions: directions.clone(),
                }
            }
        };
        Ok(spec)
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(DriftFamily::Zero, dim).expect("zero drift is valid")
    }

    pub fn family(&self) -> &DriftFamily {
        &self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn holder_exponent(&self) -> f64 {
        self.holder_exponent
    }

    pub fn holder_constant(&self) -> f64 {
        self.holder_constant
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, DriftFamily::Zero)
    }

    fn projection(&self, k: usize, x: &[f64]) -> f64 {
        match &self.directions {
            Some(v) => dot(&v[k], x),
            None => x[k],
        }
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.family {
            DriftFamily::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            DriftFamily::Constant { value } => out.copy_from_slice(value),
            DriftFamily::Tanh { .. } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = self.amplitude * self.projection(k, x).tanh();
                }
            }
            DriftFamily::Holder { exponent, .. } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let s = self.projection(k, x).sin();
                    *o = self.amplitude * s.abs().powf(*exponent) * s.signum();
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Noise {
    Spectral(SpectralMeasure),
    /// Independent stable processes on each mode, weighted by the diagonal
    /// generator's `β_k`.
    Cylindrical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    ExponentialEuler,
}

/// Per-mode coefficients of one step.
#[derive(Clone, Debug, PartialEq)]
enum Coefficients {
    /// x'_k = decay_k x_k + gain_k F_k(x) + noise_k ξ_k
    Exponential {
        decay: Vec<f64>,
        gain: Vec<f64>,
        noise: Vec<f64>,
    },
    /// x'_k = x_k + (−γ_k x_k + F_k(x)) dt + noise_k ξ_k
    EulerDiagonal { gammas: Vec<f64>, noise: Vec<f64> },
    /// x' = x + (Ax + F(x)) dt + Σ_j atom_scale_j ξ_j a_j
    EulerMatrix { atom_scales: Vec<f64> },
}

/// A complete dynamical system together with its integration scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    generator: Generator,
    drift: DriftSpec,
    noise: Noise,
    scheme: Scheme,
    dt: f64,
    alpha: StableIndex,
    coefficients: Coefficients,
}

impl ModelSpec {
    pub fn new(
        generator: Generator,
        drift: DriftSpec,
        noise: Noise,
        scheme: Scheme,
        dt: f64,
        alpha: StableIndex,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        let dim = generator.dim();
        if drift.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: drift.dim(),
            });
        }
        let a = alpha.get();
        match &generator {
            Generator::Matrix(_) => {
                StableIndex::finite_dimensional(a)?;
                if !(drift.holder_exponent() > 1.0 - a / 2.0) {
                    return Err(Error::Inadmissible(format!(
                        "Hölder exponent {} must exceed 1 − α/2 = {}",
                        drift.holder_exponent(),
                        1.0 - a / 2.0
                    )));
                }
            }
            Generator::Diagonal(d) => {
                if d.alpha() != alpha {
                    return Err(invalid(
                        "alpha",
                        format!("model index {a} differs from generator index {}", d.alpha().get()),
                    ));
                }
                if drift.holder_exponent() != 1.0 {
                    return Err(Error::Inadmissible(
                        "Galerkin models require a Lipschitz drift (Hölder exponent 1)".into(),
                    ));
                }
            }
        }
        if let Noise::Spectral(mu) = &noise {
            if mu.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: mu.dim(),
                });
            }
        }

        let coefficients = match (&generator, &noise, scheme) {
            (Generator::Diagonal(d), Noise::Cylindrical, Scheme::ExponentialEuler) => {
                let decay = d.gammas().iter().map(|g| (-g * dt).exp()).collect();
                let gain = d.gammas().iter().map(|g| -(-g * dt).exp_m1() / g).collect();
                let noise = d
                    .gammas()
                    .iter()
                    .zip(d.betas())
                    .map(|(g, b)| ou_scale(*g, *b, alpha, dt))
                    .collect::<Result<Vec<_>>>()?;
                Coefficients::Exponential { decay, gain, noise }
            }
            (_, _, Scheme::ExponentialEuler) => {
                return Err(Error::Inadmissible(
                    "exponential Euler requires a diagonal generator with cylindrical noise".into(),
                ))
            }
            (Generator::Diagonal(d), Noise::Cylindrical, Scheme::Euler) => {
                let step_scale = dt.powf(1.0 / a);
                Coefficients::EulerDiagonal {
                    gammas: d.gammas().to_vec(),
                    noise: d.betas().iter().map(|b| b * step_scale).collect(),
                }
            }
            (Generator::Matrix(_), Noise::Cylindrical, _) => {
                return Err(Error::Inadmissible(
                    "cylindrical noise requires a diagonal generator".into(),
                ))
            }
            (_, Noise::Spectral(mu), Scheme::Euler) => Coefficients::EulerMatrix {
                atom_scales: mu.atoms().iter().map(|at| (dt * at.weight).powf(1.0 / a)).collect(),
            },
        };

        Ok(Self {
            generator,
            drift,
            noise,
            scheme,
            dt,
            alpha,
            coefficients,
        })
    }

    /// Galerkin model with cylindrical noise and exponential Euler.
    pub fn galerkin(gen: DiagonalGenerator, drift: DriftSpec, dt: f64) -> Result<Self> {
        let alpha = gen.alpha();
        Self::new(
            Generator::Diagonal(gen),
            drift,
            Noise::Cylindrical,
            Scheme::ExponentialEuler,
            dt,
            alpha,
        )
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn drift(&self) -> &DriftSpec {
        &self.drift
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn alpha(&self) -> StableIndex {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn gamma1(&self) -> f64 {
        self.generator.gamma1()
    }

    pub fn diagonal(&self) -> Option<&DiagonalGenerator> {
        match &self.generator {
            Generator::Diagonal(d) => Some(d),
            Generator::Matrix(_) => None,
        }
    }

    /// Same model with a different drift.
    pub fn with_drift(&self, drift: DriftSpec) -> Result<Self> {
        Self::new(
            self.generator.clone(),
            drift,
            self.noise.clone(),
            self.scheme,
            self.dt,
            self.alpha,
        )
    }

    /// Typical size of coordinate `k` under the linear stationary dynamics.
    ///
    /// For diagonal generators this is `β_k(αγ_k)^{-1/α}`. For matrix
    /// generators a single isotropic surrogate `(Σw/(α·gap))^{1/α}` is used.
    pub fn stationary_scale(&self, k: usize) -> f64 {
        match (&self.generator, &self.noise) {
            (Generator::Diagonal(d), Noise::Cylindrical) => d.stationary_scale(k),
            (g, Noise::Spectral(mu)) => {
                (mu.total_weight() / (self.alpha.get() * g.gamma1())).powf(1.0 / self.alpha.get())
            }
            (Generator::Matrix(_), Noise::Cylindrical) => unreachable!("rejected at construction"),
        }
    }

    /// Number of steps covering `t`, which must be an integer multiple of dt.
    pub fn steps_for(&self, t: f64) -> Result<usize> {
        steps_for(t, self.dt)
    }

    /// Advances `x` by one step in place. `scratch` must have length `dim`.
    fn step_in_place<R: Rng + ?Sized>(&self, x: &mut [f64], scratch: &mut [f64], rng: &mut R) {
        let law = StandardStable::new(self.alpha);
        self.drift.eval_into(x, scratch);
        match &self.coefficients {
            Coefficients::Exponential { decay, gain, noise } => {
                for k in 0..x.len() {
                    x[k] = decay[k] * x[k] + gain[k] * scratch[k] + noise[k] * law.sample(rng);
                }
            }
            Coefficients::EulerDiagonal { gammas, noise } => {
                for k in 0..x.len() {
                    x[k] += (-gammas[k] * x[k] + scratch[k]) * self.dt + noise[k] * law.sample(rng);
                }
            }
            Coefficients::EulerMatrix { atom_scales } => {
                let Generator::Matrix(m) = &self.generator else {
                    unreachable!("matrix coefficients only built for matrix generators")
                };
                let a = m.matrix();
                for (i, f) in scratch.iter_mut().enumerate() {
                    let ax: f64 = (0..x.len()).map(|j| a[(i, j)] * x[j]).sum();
                    *f = (ax + *f) * self.dt;
                }
                if let Noise::Spectral(mu) = &self.noise {
                    add_spectral_increment(mu, atom_scales, law, scratch, rng);
                }
                x.iter_mut().zip(scratch.iter()).for_each(|(xi, d)| *xi += d);
            }
        }
    }

    /// One step of the scheme from `x`.
    pub fn step<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<State> {
        self.check_dim(x)?;
        let mut y = x.to_vec();
        let mut scratch = vec![0.0; x.len()];
        self.step_in_place(&mut y, &mut scratch, rng);
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(Error::NonFiniteState {
                step: 1,
                time: self.dt,
            })
        }
    }

    /// Advances `x` in place by `n` steps; `first_step` numbers the steps in
    /// error reports.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        x: &mut [f64],
        n: usize,
        first_step: usize,
        rng: &mut R,
    ) -> Result<()> {
        let mut scratch = vec![0.0; x.len()];
        for i in 0..n {
            self.step_in_place(x, &mut scratch, rng);
            if !x.iter().all(|v| v.is_finite()) {
                let step = first_step + i + 1;
                return Err(Error::NonFiniteState {
                    step,
                    time: step as f64 * self.dt,
                });
            }
        }
        Ok(())
    }

    /// State at time `t` from `x0`.
    pub fn evolve<R: Rng + ?Sized>(&self, x0: &[f64], t: f64, rng: &mut R) -> Result<State> {
        self.check_dim(x0)?;
        let n = self.steps_for(t)?;
        let mut x = x0.to_vec();
        self.advance(&mut x, n, 0, rng)?;
        Ok(x)
    }

    /// States at each of the increasing `times`, all multiples of dt,
    /// along one path from `x0`.
    pub fn checkpoints<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        times: &[f64],
        rng: &mut R,
    ) -> Result<Vec<State>> {
        self.check_dim(x0)?;
        let mut x = x0.to_vec();
        let mut done = 0usize;
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            let n = self.steps_for(t)?;
            if n < done {
                return Err(invalid("times", "must be nondecreasing"));
            }
            self.advance(&mut x, n - done, done, rng)?;
            done = n;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Exponential-Euler coefficients `(decay, gain)` when applicable.
    pub fn exponential_coefficients(&self) -> Option<(&[f64], &[f64])> {
        match &self.coefficients {
            Coefficients::Exponential { decay, gain, .. } => Some((decay, gain)),
            _ => None,
        }
    }
}

pub(crate) fn steps_for(t: f64, dt: f64) -> Result<usize> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid("t", format!("must be finite and nonnegative, got {t}")));
    }
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-12 * t.max(1.0) {
        return Err(Error::NotMultipleOfDt { time: t, dt });
    }
    Ok(n as usize)
}

/// (Σ_k γ_k^{2e} x_k²)^{1/2}.
pub fn norm_eps(x: &[f64], gen: &DiagonalGenerator, e: f64) -> Result<f64> {
    if !(e >= 0.0) {
        return Err(invalid("e", format!("must be nonnegative, got {e}")));
    }
    if x.len() != gen.modes() {
        return Err(Error::DimensionMismatch {
            expected: gen.modes(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(gen.gammas())
        .map(|(v, g)| g.powf(2.0 * e) * v * v)
        .sum::<f64>()
        .sqrt())
}

/// Euclidean norm.
pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Model-aware ε-norm: the weighted norm for diagonal generators, the
/// Euclidean norm otherwise.
pub fn model_norm(model: &ModelSpec, x: &[f64], e: f64) -> f64 {
    match model.diagonal() {
        Some(d) if e > 0.0 => norm_eps(x, d, e).expect("dimension checked by caller"),
        _ => norm(x),
    }
}

/// A simulated path sampled every dt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.states.len()).map(move |i| i as f64 * self.dt)
    }

    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory holds at least x0")
    }

    /// CSV with header `t,x_1,…,x_K`; floats carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let k = self.states.first().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=k).map(|i| format!("x_{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, s) in self.times().zip(&self.states) {
            let row: Vec<String> = std::iter::once(fmt17(t)).chain(s.iter().map(|v| fmt17(*v))).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Float rendered with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Path of `⌈T/dt⌉ + 1` states starting at `x0`.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &ModelSpec,
    x0: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    model.check_dim(x0)?;
    let n = model.steps_for(horizon)?;
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    let mut scratch = vec![0.0; x.len()];
    for i in 0..n {
        model.step_in_place(&mut x, &mut scratch, rng);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState {
                step: i + 1,
                time: (i + 1) as f64 * model.dt,
            });
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        dt: model.dt,
        states,
    })
}
