//! Independent reference values for the pure Ornstein–Uhlenbeck case.
//!
//! Nothing here calls the crate's samplers: the standard symmetric stable
//! law is handled through its characteristic function `exp(-|u|^α)` by
//! quadrature, and its absolute moments through a Gamma-function formula.

#![allow(dead_code)]

use std::f64::consts::PI;

use levy_ergodic::dynamics::{heat_example_config, DriftFamily, DriftSpec, ModelSpec};
use levy_ergodic::stable_noise::StableIndex;

/// Composite Simpson rule on `[0, upper]` with an even number of panels.
fn simpson(f: impl Fn(f64) -> f64, upper: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = upper / n as f64;
    let mut s = f(0.0) + f(upper);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0
}

/// Cut-off where `exp(-u^α)` drops below 1e-16.
fn cutoff(alpha: f64) -> f64 {
    37f64.powf(1.0 / alpha)
}

/// CDF of the standard symmetric stable law,
/// `F(x) = ½ + (1/π) ∫₀^∞ sin(ux) e^{-u^α} / u du`.
pub fn stable_cdf(x: f64, alpha: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let upper = cutoff(alpha);
    // Resolve the oscillation of sin(ux) with at least 40 points per period.
    let panels = ((upper / 1e-3) as usize).max((40.0 * upper * x.abs() / (2.0 * PI)) as usize);
    let integral = simpson(
        |u| {
            if u == 0.0 {
                x
            } else {
                (u * x).sin() * (-u.powf(alpha)).exp() / u
            }
        },
        upper,
        panels,
    );
    (0.5 + integral / PI).clamp(0.0, 1.0)
}

/// Density `(1/π) ∫₀^∞ cos(ux) e^{-u^α} du`.
pub fn stable_density(x: f64, alpha: f64) -> f64 {
    let upper = cutoff(alpha);
    let panels = ((upper / 1e-3) as usize).max((40.0 * upper * x.abs() / (2.0 * PI)) as usize);
    simpson(|u| (u * x).cos() * (-u.powf(alpha)).exp(), upper, panels) / PI
}

/// Lanczos approximation of Γ(z) for z > 0 (about 15 significant digits).
pub fn gamma(z: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        return PI / ((PI * z).sin() * gamma(1.0 - z));
    }
    let z = z - 1.0;
    let mut a = C[0];
    let t = z + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    (2.0 * PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * a
}

/// `E|ξ|^p = 2^p Γ((1+p)/2) Γ(1 − p/α) / (√π Γ(1 − p/2))` for the
/// standard symmetric stable law with characteristic function `exp(-|u|^α)`.
pub fn stable_abs_moment(alpha: f64, p: f64) -> f64 {
    assert!(p > -1.0 && p < alpha);
    2f64.powf(p) * gamma((1.0 + p) / 2.0) * gamma(1.0 - p / alpha) / (PI.sqrt() * gamma(1.0 - p / 2.0))
}

/// `c(t) = β((1 − e^{−αγt})/(αγ))^{1/α}`, written out independently.
pub fn ou_scale_ref(gamma: f64, beta: f64, alpha: f64, t: f64) -> f64 {
    beta * ((1.0 - (-alpha * gamma * t).exp()) / (alpha * gamma)).powf(1.0 / alpha)
}

/// Law of the one-mode OU process at time `t` from `x`: location and scale.
pub fn ou_law(gamma: f64, beta: f64, alpha: f64, x: f64, t: f64) -> (f64, f64) {
    ((-gamma * t).exp() * x, ou_scale_ref(gamma, beta, alpha, t))
}

/// Cell probabilities of `loc + scale·ξ` on the bins given by `edges`,
/// followed by the overflow mass.
pub fn binned_law(edges: &[f64], loc: f64, scale: f64, alpha: f64) -> Vec<f64> {
    let cdf: Vec<f64> = edges.iter().map(|e| stable_cdf((e - loc) / scale, alpha)).collect();
    let mut p: Vec<f64> = cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    let inside: f64 = p.iter().sum();
    p.push((1.0 - inside).max(0.0));
    p
}

/// Linear interpolation of the standard stable CDF on `[-half, half]`.
pub struct CdfTable {
    alpha: f64,
    half: f64,
    step: f64,
    values: Vec<f64>,
}

impl CdfTable {
    pub fn new(alpha: f64, half: f64, step: f64) -> Self {
        let n = (2.0 * half / step).round() as usize;
        let values = (0..=n).map(|i| stable_cdf(-half + i as f64 * step, alpha)).collect();
        Self { alpha, half, step, values }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        if z.abs() >= self.half {
            return stable_cdf(z, self.alpha);
        }
        let pos = (z + self.half) / self.step;
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let w = pos - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One-mode heat model: `γ = π²`, `β = γ^{1/6}`, α = 1.5, dt = 0.01.
pub fn heat_1d(drift: DriftFamily) -> ModelSpec {
    let a = StableIndex::new(1.5).unwrap();
    let gen = heat_example_config(1, a, 0.5, 0.1, 1).unwrap();
    ModelSpec::galerkin(gen, DriftSpec::new(drift, 1).unwrap(), 0.01).unwrap()
}

/// The one-mode acceptance model with `tanh` drift of sup-norm 1.
pub fn acceptance_1d() -> ModelSpec {
    heat_1d(DriftFamily::Tanh {
        sup_norm: 1.0,
        directions: None,
    })
}

/// Galerkin heat model with `modes` modes and `tanh` drift of sup-norm 1.
pub fn galerkin(modes: usize) -> ModelSpec {
    let a = StableIndex::new(1.5).unwrap();
    let gen = heat_example_config(1, a, 0.5, 0.1, modes).unwrap();
    let drift = DriftSpec::new(
        DriftFamily::Tanh {
            sup_norm: 1.0,
            directions: None,
        },
        modes,
    )
    .unwrap();
    ModelSpec::galerkin(gen, drift, 0.01).unwrap()
}

/// Sanity checks of the oracle against textbook values, run from the
/// integration tests.
pub fn check_oracle() {
    // Cauchy: F(1) = 3/4, density(0) = 1/π.
    assert!((stable_cdf(1.0, 1.0) - 0.75).abs() < 1e-6);
    assert!((stable_density(0.0, 1.0) - 1.0 / PI).abs() < 1e-6);
    // α = 2 with CF e^{-u²} is N(0, 2): F(1) = Φ(1/√2) ≈ 0.760249.
    assert!((stable_cdf(1.0, 1.999_999) - 0.760_249).abs() < 1e-4);
    // E|C|^{1/2} = √2 for the Cauchy law.
    assert!((stable_abs_moment(1.0, 0.5) - 2f64.sqrt()).abs() < 1e-10);
    assert!((gamma(5.0) - 24.0).abs() < 1e-10);
}
