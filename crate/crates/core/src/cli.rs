//! Command-line front end: configuration loading, experiment dispatch and
//! output persistence with a checksummed manifest.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 Harris verdict other than certified.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupling::{
    calibrate_small_radius, exp_moment_fit, minimal_eps_radius, run_coupled_ensemble, survival,
    write_runs_jsonl, CalibrationStep, CouplingConfig, ExpMomentFit,
};
use crate::dynamics::{
    fmt17, heat_example_config, DiagonalGenerator, DriftFamily, DriftSpec, Generator,
    MatrixGenerator, ModelSpec, Noise, Scheme, State, DEFAULT_DT, DEFAULT_MODES,
};
use crate::error::Error;
use crate::harris::{
    certify, default_horizon, default_moment_order, default_probe_points, mixing_curve, fit_curve,
    HarrisConfig, InitialLaw, MixingOptions, Verdict, DEFAULT_PAIRS, DEFAULT_PROBE_POINTS,
};
use crate::kernel_lab::{
    estimate_kernel, gradient_scan, irreducibility_probe, moment_probe, Grid, HitEstimate,
    TestFunction, DEFAULT_BINS, DEFAULT_BOX_SCALES,
};
use crate::rng::Stream;
use crate::stable_noise::{cf_selftest, overflow_resample_count, Atom, SpectralMeasure, StableIndex};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_NOT_CERTIFIED: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("config error: {0}")]
    Semantic(Error),
    #[error("config error: {0}")]
    Conflict(String),
    #[error("numeric failure: {0}")]
    Numeric(Error),
    #[error("output error: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Schema { .. } | CliError::Semantic(_) | CliError::Conflict(_) => {
                EXIT_CONFIG
            }
            CliError::Numeric(_) | CliError::Output(_) => EXIT_NUMERIC,
        }
    }
}

fn semantic(e: Error) -> CliError {
    CliError::Semantic(e)
}

fn numeric(e: Error) -> CliError {
    CliError::Numeric(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Galerkin heat equation on the unit interval.
    Heat,
    /// Explicit diagonal generator `(γ_k, β_k)`.
    Diagonal,
    /// Finite-dimensional SDE with a matrix generator and spectral noise.
    Matrix,
}

/// Model block. Fields that do not apply to `kind` must be absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<StableIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Atom>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

/// Experiment block; every parameter left out is resolved from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentSpec {
    NoiseSelftest {
        #[serde(default)]
        lambdas: Option<Vec<f64>>,
    },
    Kernel {
        #[serde(default)]
        origin: Option<State>,
    },
    GradientProbe {
        #[serde(default)]
        test_function: Option<TestFunction>,
        #[serde(default)]
        x: Option<State>,
        #[serde(default)]
        y: Option<State>,
        #[serde(default)]
        common_random_numbers: Option<bool>,
    },
    Irreducibility {
        #[serde(default)]
        x: Option<State>,
        #[serde(default)]
        center: Option<State>,
        #[serde(default)]
        radius: Option<f64>,
    },
    Coupling {
        #[serde(default)]
        x1: Option<State>,
        #[serde(default)]
        x2: Option<State>,
        #[serde(default)]
        period: Option<f64>,
        /// Calibrated by halving from `initial_radius` when absent.
        #[serde(default)]
        small_radius: Option<f64>,
        #[serde(default)]
        initial_radius: Option<f64>,
        /// Minimal admissible radius from the measured drift constant when
        /// absent.
        #[serde(default)]
        eps_radius: Option<f64>,
        #[serde(default)]
        eps: Option<f64>,
        #[serde(default)]
        p: Option<f64>,
        #[serde(default)]
        kernel_samples: Option<usize>,
        #[serde(default)]
        max_steps: Option<usize>,
        #[serde(default)]
        calibration_probes: Option<usize>,
    },
    Harris {
        #[serde(default)]
        p: Option<f64>,
        #[serde(default)]
        probe_points: Option<Vec<State>>,
        #[serde(default)]
        levels: Option<Vec<f64>>,
        #[serde(default)]
        pairs: Option<usize>,
        #[serde(default)]
        kernel_samples: Option<usize>,
    },
    Mixing {
        #[serde(default)]
        nu1: Option<InitialLaw>,
        #[serde(default)]
        nu2: Option<InitialLaw>,
        #[serde(default)]
        ceiling: Option<f64>,
        #[serde(default)]
        floor_multiplier: Option<f64>,
        #[serde(default)]
        p: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ExperimentName {
    NoiseSelftest,
    Kernel,
    GradientProbe,
    Irreducibility,
    Coupling,
    Harris,
    Mixing,
}

impl ExperimentSpec {
    pub fn name(&self) -> ExperimentName {
        match self {
            ExperimentSpec::NoiseSelftest { .. } => ExperimentName::NoiseSelftest,
            ExperimentSpec::Kernel { .. } => ExperimentName::Kernel,
            ExperimentSpec::GradientProbe { .. } => ExperimentName::GradientProbe,
            ExperimentSpec::Irreducibility { .. } => ExperimentName::Irreducibility,
            ExperimentSpec::Coupling { .. } => ExperimentName::Coupling,
            ExperimentSpec::Harris { .. } => ExperimentName::Harris,
            ExperimentSpec::Mixing { .. } => ExperimentName::Mixing,
        }
    }

    /// All parameters unset.
    pub fn empty(name: ExperimentName) -> Self {
        match name {
            ExperimentName::NoiseSelftest => ExperimentSpec::NoiseSelftest { lambdas: None },
            ExperimentName::Kernel => ExperimentSpec::Kernel { origin: None },
            ExperimentName::GradientProbe => ExperimentSpec::GradientProbe {
                test_function: None,
                x: None,
                y: None,
                common_random_numbers: None,
            },
            ExperimentName::Irreducibility => ExperimentSpec::Irreducibility {
                x: None,
                center: None,
                radius: None,
            },
            ExperimentName::Coupling => ExperimentSpec::Coupling {
                x1: None,
                x2: None,
                period: None,
                small_radius: None,
                initial_radius: None,
                eps_radius: None,
                eps: None,
                p: None,
                kernel_samples: None,
                max_steps: None,
                calibration_probes: None,
            },
            ExperimentName::Harris => ExperimentSpec::Harris {
                p: None,
                probe_points: None,
                levels: None,
                pairs: None,
                kernel_samples: None,
            },
            ExperimentName::Mixing => ExperimentSpec::Mixing {
                nu1: None,
                nu2: None,
                ceiling: None,
                floor_multiplier: None,
                p: None,
            },
        }
    }
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec::empty(ExperimentName::NoiseSelftest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every available core. Never affects results.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub horizons: Option<Vec<f64>>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: default_out(),
            samples: None,
            horizons: None,
        }
    }
}

/// Grid block: either explicit bounds or a box measured in stationary
/// scales.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub retained: Option<usize>,
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default)]
    pub box_scales: Option<f64>,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

/// Command-line overrides applied before defaults are resolved.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub experiment: Option<ExperimentName>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    load_config_with(path, &Overrides::default())
}

pub fn load_config_with(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides)
}

/// Parses, applies overrides, resolves every default and validates.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if let Some(name) = overrides.experiment {
        match &cfg.experiment {
            Some(e) if e.name() != name => {
                return Err(CliError::Conflict(format!(
                    "subcommand {name:?} does not match the config's experiment {:?}",
                    e.name()
                )))
            }
            Some(_) => {}
            None => cfg.experiment = Some(ExperimentSpec::empty(name)),
        }
    }
    if let Some(s) = overrides.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.run.out = o.clone();
    }
    if let Some(w) = overrides.workers {
        cfg.run.workers = w;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn reject_fields(kind: ModelKind, fields: &[(&str, bool)]) -> Result<(), CliError> {
    match fields.iter().find(|(_, present)| *present) {
        Some((name, _)) => Err(CliError::Schema {
            path: format!("model.{name}"),
            message: format!("field does not apply to model kind {kind:?}"),
        }),
        None => Ok(()),
    }
}

fn need<T: Clone>(v: &Option<T>, path: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Schema {
        path: path.into(),
        message: "missing field".into(),
    })
}

impl ModelConfig {
    fn resolve(&mut self) -> Result<(), CliError> {
        self.dt.get_or_insert(DEFAULT_DT);
        self.drift.get_or_insert(DriftFamily::Zero);
        match self.kind {
            ModelKind::Heat => {
                reject_fields(
                    self.kind,
                    &[
                        ("gammas", self.gammas.is_some()),
                        ("betas", self.betas.is_some()),
                        ("rows", self.rows.is_some()),
                        ("atoms", self.atoms.is_some()),
                    ],
                )?;
                self.alpha.get_or_insert(StableIndex::new(1.5).expect("valid"));
                self.d.get_or_insert(1);
                self.theta.get_or_insert(0.5);
                self.eps.get_or_insert(0.1);
                self.modes.get_or_insert(DEFAULT_MODES);
                self.scheme.get_or_insert(Scheme::ExponentialEuler);
            }
            ModelKind::Diagonal => {
                reject_fields(
                    self.kind,
                    &[
                        ("d", self.d.is_some()),
                        ("modes", self.modes.is_some()),
                        ("rows", self.rows.is_some()),
                        ("atoms", self.atoms.is_some()),
                    ],
                )?;
                need(&self.gammas, "model.gammas")?;
                need(&self.betas, "model.betas")?;
                self.alpha.get_or_insert(StableIndex::new(1.5).expect("valid"));
                self.theta.get_or_insert(0.5);
                self.eps.get_or_insert(0.1);
                self.scheme.get_or_insert(Scheme::ExponentialEuler);
            }
            ModelKind::Matrix => {
                reject_fields(
                    self.kind,
                    &[
                        ("d", self.d.is_some()),
                        ("theta", self.theta.is_some()),
                        ("eps", self.eps.is_some()),
                        ("modes", self.modes.is_some()),
                        ("gammas", self.gammas.is_some()),
                        ("betas", self.betas.is_some()),
                    ],
                )?;
                need(&self.rows, "model.rows")?;
                need(&self.atoms, "model.atoms")?;
                self.alpha.get_or_insert(StableIndex::new(1.5).expect("valid"));
                self.scheme.get_or_insert(Scheme::Euler);
            }
        }
        Ok(())
    }

    /// Builds the model; the block must already be resolved.
    pub fn build(&self) -> crate::Result<ModelSpec> {
        let alpha = self.alpha.expect("resolved");
        let dt = self.dt.expect("resolved");
        let scheme = self.scheme.expect("resolved");
        let drift_family = self.drift.clone().expect("resolved");
        let (generator, noise) = match self.kind {
            ModelKind::Heat => {
                let gen = heat_example_config(
                    self.d.expect("resolved"),
                    alpha,
                    self.theta.expect("resolved"),
                    self.eps.expect("resolved"),
                    self.modes.expect("resolved"),
                )?;
                (Generator::Diagonal(gen), Noise::Cylindrical)
            }
            ModelKind::Diagonal => {
                let gen = DiagonalGenerator::new(
                    self.gammas.clone().expect("resolved"),
                    self.betas.clone().expect("resolved"),
                    alpha,
                    self.eps.expect("resolved"),
                    self.theta.expect("resolved"),
                )?;
                (Generator::Diagonal(gen), Noise::Cylindrical)
            }
            ModelKind::Matrix => {
                let gen = MatrixGenerator::from_rows(self.rows.as_deref().expect("resolved"))?;
                let mu = SpectralMeasure::new(self.atoms.clone().expect("resolved"))?;
                (Generator::Matrix(gen), Noise::Spectral(mu))
            }
        };
        let drift = DriftSpec::new(drift_family, generator.dim())?;
        ModelSpec::new(generator, drift, noise, scheme, dt, alpha)
    }
}

fn axis(dim: usize, value: f64) -> State {
    let mut x = vec![0.0; dim];
    x[0] = value;
    x
}

fn check_state(x: &[f64], dim: usize) -> Result<(), CliError> {
    if x.len() != dim {
        return Err(semantic(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        }));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(semantic(Error::InvalidParameter {
            name: "state",
            reason: "entries must be finite".into(),
        }));
    }
    Ok(())
}

fn check_order(model: &ModelSpec, p: f64) -> Result<(), CliError> {
    let alpha = model.alpha().get();
    if !(p > 0.0 && p < alpha) {
        return Err(semantic(Error::MomentMayBeInfinite { p, alpha }));
    }
    Ok(())
}

fn positive(v: usize, name: &'static str) -> Result<(), CliError> {
    if v == 0 {
        return Err(semantic(Error::InvalidParameter {
            name,
            reason: "must be positive".into(),
        }));
    }
    Ok(())
}

/// Smallest multiple of dt that is at least `t`.
fn round_up(t: f64, dt: f64) -> f64 {
    (t / dt - 1e-9).ceil().max(1.0) * dt
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> crate::Result<ModelSpec> {
        self.model.build()
    }

    pub fn experiment(&self) -> &ExperimentSpec {
        self.experiment.as_ref().expect("resolved")
    }

    pub fn grid(&self) -> Grid {
        let g = self.grid.as_ref().expect("resolved");
        Grid::new(
            g.lower.clone().expect("resolved"),
            g.upper.clone().expect("resolved"),
            g.bins.expect("resolved"),
        )
        .expect("validated at load")
    }

    pub fn samples(&self) -> usize {
        self.run.samples.expect("resolved")
    }

    pub fn horizons(&self) -> &[f64] {
        self.run.horizons.as_deref().expect("resolved")
    }

    fn resolve(&mut self) -> Result<(), CliError> {
        self.model.resolve()?;
        let model = self.model.build().map_err(semantic)?;
        let dim = model.dim();
        let dt = model.dt();
        let s0 = model.stationary_scale(0);
        let alpha = model.alpha();
        let experiment = self.experiment.get_or_insert_with(ExperimentSpec::default);
        let name = experiment.name();

        let (samples, horizons): (usize, Vec<f64>) = match name {
            ExperimentName::NoiseSelftest => (100_000, vec![]),
            ExperimentName::Kernel => (10_000, vec![round_up(1.0 / model.gamma1(), dt)]),
            ExperimentName::GradientProbe => (10_000, vec![0.02, 0.05, 0.1, 0.2, 0.5]),
            ExperimentName::Irreducibility => (10_000, vec![round_up(1.0, dt)]),
            ExperimentName::Coupling => (1000, vec![]),
            ExperimentName::Harris => (10_000, vec![default_horizon(&model, default_moment_order(&model))]),
            ExperimentName::Mixing => {
                let step = round_up(0.5 / model.gamma1(), dt);
                (10_000, (1..=10).map(|k| k as f64 * step).collect())
            }
        };
        let samples = *self.run.samples.get_or_insert(samples);
        positive(samples, "samples")?;
        let horizons = self.run.horizons.get_or_insert(horizons).clone();
        for &t in &horizons {
            model.steps_for(t).map_err(semantic)?;
        }
        if matches!(
            name,
            ExperimentName::Kernel | ExperimentName::GradientProbe | ExperimentName::Irreducibility | ExperimentName::Harris
        ) && horizons.is_empty()
        {
            return Err(semantic(Error::InvalidParameter {
                name: "horizons",
                reason: "at least one horizon is required".into(),
            }));
        }

        let grid = self.grid.get_or_insert_with(GridConfig::default);
        let default_retained = if name == ExperimentName::Coupling { 1 } else { dim.min(2) };
        let default_bins = if name == ExperimentName::Coupling { 32 } else { DEFAULT_BINS };
        let bins = *grid.bins.get_or_insert(default_bins);
        match (&grid.lower, &grid.upper) {
            (Some(l), Some(_)) => {
                grid.retained = Some(l.len());
            }
            (None, None) => {
                let m = *grid.retained.get_or_insert(default_retained);
                let scales = *grid.box_scales.get_or_insert(DEFAULT_BOX_SCALES);
                if m == 0 || m > dim.min(3) {
                    return Err(semantic(Error::InvalidParameter {
                        name: "grid.retained",
                        reason: format!("must lie in 1..={}", dim.min(3)),
                    }));
                }
                let g = Grid::for_model(&model, m, bins.max(1), scales);
                grid.lower = Some(g.lower().to_vec());
                grid.upper = Some(g.upper().to_vec());
            }
            _ => {
                return Err(CliError::Schema {
                    path: "grid".into(),
                    message: "lower and upper must be given together".into(),
                })
            }
        }
        let g = Grid::new(grid.lower.clone().unwrap(), grid.upper.clone().unwrap(), bins).map_err(semantic)?;
        if g.retained() > dim {
            return Err(semantic(Error::InvalidParameter {
                name: "grid",
                reason: "retains more coordinates than the state has".into(),
            }));
        }

        match experiment {
            ExperimentSpec::NoiseSelftest { lambdas } => {
                let l = lambdas.get_or_insert_with(|| vec![0.5, 1.0, 2.0]);
                if l.is_empty() || l.iter().any(|v| !v.is_finite()) {
                    return Err(semantic(Error::InvalidParameter {
                        name: "lambdas",
                        reason: "need at least one finite value".into(),
                    }));
                }
            }
            ExperimentSpec::Kernel { origin } => {
                check_state(origin.get_or_insert_with(|| vec![0.0; dim]), dim)?;
            }
            ExperimentSpec::GradientProbe {
                test_function,
                x,
                y,
                common_random_numbers,
            } => {
                let f = test_function.get_or_insert(TestFunction::Sign { axis: 0 });
                match f {
                    TestFunction::Sign { axis } | TestFunction::Cos { axis, .. } if *axis >= dim => {
                        return Err(semantic(Error::InvalidParameter {
                            name: "test_function.axis",
                            reason: format!("must be below {dim}"),
                        }))
                    }
                    _ => {}
                }
                let h = 0.01 * s0;
                check_state(x.get_or_insert_with(|| axis(dim, -h)), dim)?;
                check_state(y.get_or_insert_with(|| axis(dim, h)), dim)?;
                if x == y {
                    return Err(semantic(Error::InvalidParameter {
                        name: "y",
                        reason: "must differ from x".into(),
                    }));
                }
                common_random_numbers.get_or_insert(true);
                positive(samples.saturating_sub(1), "samples")?;
            }
            ExperimentSpec::Irreducibility { x, center, radius } => {
                check_state(x.get_or_insert_with(|| vec![0.0; dim]), dim)?;
                check_state(center.get_or_insert_with(|| axis(dim, 5.0 * s0)), dim)?;
                if !(*radius.get_or_insert(s0) > 0.0) {
                    return Err(semantic(Error::NonPositiveRadius));
                }
            }
            ExperimentSpec::Coupling {
                x1,
                x2,
                period,
                small_radius,
                initial_radius,
                eps_radius,
                eps,
                p,
                kernel_samples,
                max_steps,
                calibration_probes,
            } => {
                check_state(x1.get_or_insert_with(|| axis(dim, 2.0 * s0)), dim)?;
                check_state(x2.get_or_insert_with(|| axis(dim, -2.0 * s0)), dim)?;
                let t = *period.get_or_insert(round_up(0.5 / model.gamma1(), dt));
                let e = *eps.get_or_insert(model.diagonal().map_or(0.0, |d| d.eps()));
                let pp = *p.get_or_insert(alpha.get() / 2.0);
                check_order(&model, pp)?;
                initial_radius.get_or_insert(2.0 * s0);
                let ks = *kernel_samples.get_or_insert(2000);
                positive(*max_steps.get_or_insert(200), "max_steps")?;
                positive(*calibration_probes.get_or_insert(8), "calibration_probes")?;
                let probe = CouplingConfig {
                    period: t,
                    small_radius: small_radius.unwrap_or(1.0),
                    eps_radius: eps_radius.unwrap_or(1.0),
                    eps: e,
                    grid: g.clone(),
                    kernel_samples: ks,
                    moment_order: pp,
                    calibration: vec![],
                };
                probe.validate(&model).map_err(semantic)?;
                if initial_radius.is_some_and(|r| !(r > 0.0)) {
                    return Err(semantic(Error::NonPositiveRadius));
                }
            }
            ExperimentSpec::Harris {
                p,
                probe_points,
                levels,
                pairs,
                kernel_samples,
            } => {
                let pp = *p.get_or_insert(alpha.get() / 2.0);
                check_order(&model, pp)?;
                let pts = probe_points.get_or_insert_with(|| default_probe_points(&model, pp, DEFAULT_PROBE_POINTS));
                for x in pts.iter() {
                    check_state(x, dim)?;
                }
                levels.get_or_insert_with(Vec::new);
                positive(*pairs.get_or_insert(DEFAULT_PAIRS), "pairs")?;
                positive(*kernel_samples.get_or_insert(samples), "kernel_samples")?;
            }
            ExperimentSpec::Mixing {
                nu1,
                nu2,
                ceiling,
                floor_multiplier,
                p,
            } => {
                nu1.get_or_insert_with(|| InitialLaw::Point { x: axis(dim, 4.0 * s0) });
                nu2.get_or_insert_with(|| InitialLaw::Point { x: axis(dim, -4.0 * s0) });
                for law in [nu1.as_ref().unwrap(), nu2.as_ref().unwrap()] {
                    match law {
                        InitialLaw::Point { x } => check_state(x, dim)?,
                        InitialLaw::Empirical { samples } => {
                            if samples.is_empty() {
                                return Err(semantic(Error::InvalidParameter {
                                    name: "samples",
                                    reason: "empirical initial law needs samples".into(),
                                }));
                            }
                            for x in samples {
                                check_state(x, dim)?;
                            }
                        }
                    }
                }
                ceiling.get_or_insert(0.9);
                floor_multiplier.get_or_insert(10.0);
                check_order(&model, *p.get_or_insert(alpha.get() / 2.0))?;
                if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(semantic(Error::InvalidParameter {
                        name: "horizons",
                        reason: "must be a nonempty increasing list".into(),
                    }));
                }
            }
        }
        Ok(())
    }
}

/// One emitted file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub effective_config: ExperimentConfig,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub files: Vec<ManifestFile>,
    /// Stable draws resampled by the overflow guard during this run.
    pub overflow_resamples: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Some(v) if v != Verdict::Certified => EXIT_NOT_CERTIFIED,
            _ => 0,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Files written so far; removed again if the run fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<ManifestFile>,
}

impl Outputs {
    fn new(dir: &Path) -> std::io::Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        // Record before writing so a failed write is still cleaned up.
        self.files.push(ManifestFile {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        fs::write(self.dir.join(name), bytes)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        Ok(self.write(name, &bytes)?)
    }

    fn cleanup(&self) {
        for f in &self.files {
            let _ = fs::remove_file(self.dir.join(&f.path));
        }
        let _ = fs::remove_file(self.dir.join(MANIFEST_FILE));
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Summary written next to the coupling runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub config: CouplingConfig,
    pub calibration: Vec<CalibrationStep>,
    /// Measured drift constant used for the default `M`, when measured.
    pub c2_hat: Option<f64>,
    /// `q = exp(−p γ₁ T / 2)`.
    pub q: f64,
    pub runs: usize,
    pub max_steps: usize,
    pub survival_tau_eps: Vec<f64>,
    pub survival_tau: Vec<f64>,
    pub survival_rho: Vec<f64>,
    pub fit_tau_eps: FitOutcome,
    pub fit_tau: FitOutcome,
    pub fit_rho: FitOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOutcome {
    Fit(ExpMomentFit),
    Error(String),
}

impl From<crate::Result<ExpMomentFit>> for FitOutcome {
    fn from(r: crate::Result<ExpMomentFit>) -> Self {
        match r {
            Ok(f) => FitOutcome::Fit(f),
            Err(e) => FitOutcome::Error(e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct IrreducibilityRow {
    horizon: f64,
    #[serde(flatten)]
    estimate: HitEstimate,
}

/// Runs the configured experiment, writes its outputs and the manifest
/// into `cfg.run.out`, and returns the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| CliError::Output(std::io::Error::other(e)))?;
    let started = chrono::Utc::now().to_rfc3339();
    let overflow_before = overflow_resample_count();
    let mut out = Outputs::new(&cfg.run.out)?;
    let result = pool.install(|| execute(cfg, &mut out));
    let verdict = match result {
        Ok(v) => v,
        Err(e) => {
            out.cleanup();
            return Err(e);
        }
    };
    let manifest = RunManifest {
        effective_config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.run.seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        files: out.files.clone(),
        overflow_resamples: overflow_resample_count().saturating_sub(overflow_before),
        verdict,
    };
    let written = serde_json::to_vec_pretty(&manifest)
        .map_err(std::io::Error::other)
        .and_then(|b| fs::write(out.dir.join(MANIFEST_FILE), b));
    if let Err(e) = written {
        out.cleanup();
        return Err(e.into());
    }
    Ok(manifest)
}

fn execute(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Option<Verdict>, CliError> {
    let model = cfg.model_spec().map_err(semantic)?;
    let stream = Stream::new(cfg.run.seed);
    let n = cfg.samples();
    let horizons = cfg.horizons();
    let grid = cfg.grid();
    match cfg.experiment() {
        ExperimentSpec::NoiseSelftest { lambdas } => {
            let checks = cf_selftest(model.alpha(), lambdas.as_deref().unwrap(), n, stream);
            let mut csv = String::from("lambda,empirical,analytic\n");
            for c in &checks {
                csv.push_str(&format!("{},{},{}\n", fmt17(c.lambda), fmt17(c.empirical), fmt17(c.analytic)));
            }
            out.write("noise_selftest.csv", csv.as_bytes())?;
            out.json("noise_selftest.json", &checks)?;
        }
        ExperimentSpec::Kernel { origin } => {
            let x = origin.as_ref().unwrap();
            for (i, &t) in horizons.iter().enumerate() {
                let k = estimate_kernel(&model, x, t, n, &grid, stream.split(i as u64)).map_err(numeric)?;
                out.json(&format!("kernel_{i}.json"), &k)?;
            }
        }
        ExperimentSpec::GradientProbe {
            test_function,
            x,
            y,
            common_random_numbers,
        } => {
            let scan = gradient_scan(
                &model,
                test_function.as_ref().unwrap(),
                x.as_ref().unwrap(),
                y.as_ref().unwrap(),
                horizons,
                n,
                common_random_numbers.unwrap(),
                stream,
            )
            .map_err(numeric)?;
            let mut csv = String::from("t,ratio,se\n");
            for p in &scan.points {
                csv.push_str(&format!("{},{},{}\n", fmt17(p.horizon), fmt17(p.ratio), fmt17(p.se)));
            }
            out.write("gradient.csv", csv.as_bytes())?;
            out.json("gradient.json", &scan)?;
        }
        ExperimentSpec::Irreducibility { x, center, radius } => {
            let rows = horizons
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    irreducibility_probe(
                        &model,
                        x.as_ref().unwrap(),
                        center.as_ref().unwrap(),
                        radius.unwrap(),
                        t,
                        n,
                        stream.split(i as u64),
                    )
                    .map(|estimate| IrreducibilityRow { horizon: t, estimate })
                })
                .collect::<crate::Result<Vec<_>>>()
                .map_err(numeric)?;
            out.json("irreducibility.json", &rows)?;
        }
        ExperimentSpec::Coupling {
            x1,
            x2,
            period,
            small_radius,
            initial_radius,
            eps_radius,
            eps,
            p,
            kernel_samples,
            max_steps,
            calibration_probes,
        } => {
            let (t, pp, e, ks, steps) = (
                period.unwrap(),
                p.unwrap(),
                eps.unwrap(),
                kernel_samples.unwrap(),
                max_steps.unwrap(),
            );
            let q = (-pp * model.gamma1() * t / 2.0).exp();
            let calibration = match small_radius {
                Some(_) => Vec::new(),
                None => calibrate_small_radius(
                    &model,
                    t,
                    initial_radius.unwrap(),
                    &grid,
                    ks,
                    calibration_probes.unwrap(),
                    8,
                    stream.split(1),
                )
                .map_err(numeric)?,
            };
            let r = small_radius.unwrap_or_else(|| calibration.last().expect("at least one step").radius);
            let (m, c2_hat) = match eps_radius {
                Some(m) => (*m, None),
                None => {
                    let origin = vec![0.0; model.dim()];
                    let est = moment_probe(&model, &origin, t, pp, e, ks, stream.split(2)).map_err(numeric)?;
                    let c2 = 1.0 + est.mean + 3.0 * est.se;
                    (minimal_eps_radius(q, c2, pp), Some(c2))
                }
            };
            let ccfg = CouplingConfig {
                period: t,
                small_radius: r,
                eps_radius: m,
                eps: e,
                grid: grid.clone(),
                kernel_samples: ks,
                moment_order: pp,
                calibration: calibration.clone(),
            };
            let runs = run_coupled_ensemble(
                x1.as_ref().unwrap(),
                x2.as_ref().unwrap(),
                &model,
                &ccfg,
                steps,
                n,
                stream.split(3),
            )
            .map_err(numeric)?;
            let mut lines = Vec::new();
            write_runs_jsonl(&mut lines, &runs, &ccfg)?;
            out.write("coupling_runs.jsonl", &lines)?;
            let times = |f: fn(&crate::coupling::CoupledRun) -> Option<usize>| -> Vec<Option<usize>> {
                runs.iter().map(f).collect()
            };
            let (te, tr, rh) = (times(|r| r.tau_eps), times(|r| r.tau), times(|r| r.rho));
            let summary = CouplingSummary {
                config: ccfg.clone(),
                calibration,
                c2_hat,
                q,
                runs: n,
                max_steps: steps,
                survival_tau_eps: survival(&te, steps),
                survival_tau: survival(&tr, steps),
                survival_rho: survival(&rh, steps),
                fit_tau_eps: exp_moment_fit(&te, t, steps).into(),
                fit_tau: exp_moment_fit(&tr, t, steps).into(),
                fit_rho: exp_moment_fit(&rh, t, steps).into(),
            };
            out.json("coupling_summary.json", &summary)?;
        }
        ExperimentSpec::Harris {
            p,
            probe_points,
            levels,
            pairs,
            kernel_samples,
        } => {
            let hcfg = HarrisConfig {
                p: p.unwrap(),
                horizon: horizons[0],
                probe_points: probe_points.clone().unwrap(),
                probe_samples: n,
                levels: levels.clone().unwrap(),
                pairs: pairs.unwrap(),
                kernel_samples: kernel_samples.unwrap(),
                grid: grid.clone(),
            };
            let report = certify(&model, &hcfg, stream).map_err(numeric)?;
            out.json("harris_report.json", &report)?;
            return Ok(Some(report.verdict));
        }
        ExperimentSpec::Mixing {
            nu1,
            nu2,
            ceiling,
            floor_multiplier,
            p,
        } => {
            let opts = MixingOptions {
                ceiling: ceiling.unwrap(),
                floor_multiplier: floor_multiplier.unwrap(),
                p: *p,
            };
            let (nu1, nu2) = (nu1.as_ref().unwrap(), nu2.as_ref().unwrap());
            let curve = mixing_curve(&model, nu1, nu2, horizons, n, &grid, &opts, stream).map_err(numeric)?;
            let mut csv = Vec::new();
            curve.write_csv(&mut csv)?;
            out.write("mixing_curve.csv", &csv)?;
            let fit = fit_curve(&model, nu1, nu2, &curve, &opts).map_err(numeric)?;
            out.json("mixing_fit.json", &fit)?;
        }
    }
    Ok(None)
}

#[derive(Debug, Parser)]
#[command(name = "levy-ergodic", version, about = "Ergodicity diagnostics for stable-driven SDEs and Galerkin SPDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment named in the config file.
    Run(CommonArgs),
    /// Check the sampler's characteristic function.
    NoiseSelftest(CommonArgs),
    /// Estimate binned transition kernels.
    Kernel(CommonArgs),
    /// Gradient ratios of the semigroup over several horizons.
    GradientProbe(CommonArgs),
    /// Hitting frequency of a distant ball.
    Irreducibility(CommonArgs),
    /// Coupled-chain ensemble with hitting and coalescence times.
    Coupling(CommonArgs),
    /// Drift and minorization certification.
    Harris(CommonArgs),
    /// Total-variation mixing curve and exponential fit.
    Mixing(CommonArgs),
    /// Validate a config and print the effective config.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let (args, experiment, validate_only) = match cli.command {
        Command::Run(a) => (a, None, false),
        Command::Validate(a) => (a, None, true),
        Command::NoiseSelftest(a) => (a, Some(ExperimentName::NoiseSelftest), false),
        Command::Kernel(a) => (a, Some(ExperimentName::Kernel), false),
        Command::GradientProbe(a) => (a, Some(ExperimentName::GradientProbe), false),
        Command::Irreducibility(a) => (a, Some(ExperimentName::Irreducibility), false),
        Command::Coupling(a) => (a, Some(ExperimentName::Coupling), false),
        Command::Harris(a) => (a, Some(ExperimentName::Harris), false),
        Command::Mixing(a) => (a, Some(ExperimentName::Mixing), false),
    };
    let overrides = Overrides {
        experiment,
        seed: args.seed,
        out: args.out,
        workers: args.workers,
    };
    let cfg = match load_config_with(&args.config, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if validate_only {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        let mut stdout = std::io::stdout();
        let _ = writeln!(stdout, "{text}");
        return 0;
    }
    match run_experiment(&cfg) {
        Ok(m) => {
            let code = m.exit_code();
            if let Some(v) = m.verdict {
                eprintln!("harris verdict: {v:?}");
            }
            eprintln!("wrote {} file(s) to {}", m.files.len() + 1, cfg.run.out.display());
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        parse_config(text, &Overrides::default())
    }

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = parse(r#"{"model": {"kind": "heat"}}"#).unwrap();
        assert_eq!(cfg.model.alpha.unwrap().get(), 1.5);
        assert_eq!(cfg.model.modes, Some(DEFAULT_MODES));
        assert_eq!(cfg.model.dt, Some(DEFAULT_DT));
        assert_eq!(cfg.experiment().name(), ExperimentName::NoiseSelftest);
        assert_eq!(cfg.samples(), 100_000);
        let echoed = serde_json::to_value(&cfg).unwrap();
        assert_eq!(echoed["model"]["theta"], 0.5);
        assert_eq!(echoed["experiment"]["lambdas"], serde_json::json!([0.5, 1.0, 2.0]));
        assert_eq!(echoed["grid"]["bins"], 64);
        // The echo is itself a valid config that resolves to the same value.
        let again = parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn out_of_range_index_names_the_field() {
        let err = parse(r#"{"model": {"kind": "heat", "alpha": 2.5}}"#).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        let msg = err.to_string();
        assert!(msg.contains("model.alpha"), "{msg}");
        assert!(msg.contains("index out of range"), "{msg}");
    }

    #[test]
    fn heat_example_is_accepted() {
        let cfg = parse(
            r#"{"model": {"kind": "heat", "d": 1, "alpha": 1.5, "theta": 0.5, "eps": 0.1, "modes": 64}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model_spec().unwrap().dim(), 64);
    }

    #[test]
    fn inadmissible_heat_config_is_rejected() {
        let err = parse(r#"{"model": {"kind": "heat", "alpha": 1.0, "theta": 0.5, "eps": 0.1}}"#).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        assert!(err.to_string().contains("2α(θ−ε)>d violated"), "{err}");
    }

    #[test]
    fn schema_errors_carry_paths() {
        let err = parse(r#"{"model": {"kind": "heat"}, "run": {"seed": "x"}}"#).unwrap_err();
        assert!(err.to_string().contains("run.seed"), "{err}");
        let err = parse(r#"{"model": {"kind": "heat", "rows": [[1.0]]}}"#).unwrap_err();
        assert!(err.to_string().contains("model.rows"), "{err}");
        let err = parse(r#"{"model": {"kind": "heat", "colour": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn horizons_must_be_multiples_of_dt() {
        let err = parse(
            r#"{"model": {"kind": "heat", "modes": 2}, "experiment": {"kind": "kernel"}, "run": {"horizons": [0.015]}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not an integer multiple"), "{err}");
    }

    #[test]
    fn subcommand_must_match_config() {
        let o = Overrides {
            experiment: Some(ExperimentName::Harris),
            ..Default::default()
        };
        let err = parse_config(r#"{"model": {"kind": "heat"}, "experiment": {"kind": "kernel"}}"#, &o).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        let cfg = parse_config(r#"{"model": {"kind": "heat"}}"#, &o).unwrap();
        assert_eq!(cfg.experiment().name(), ExperimentName::Harris);
    }

    #[test]
    fn matrix_model_needs_atoms() {
        let err = parse(r#"{"model": {"kind": "matrix", "rows": [[-1.0]]}}"#).unwrap_err();
        assert!(err.to_string().contains("model.atoms"), "{err}");
        let cfg = parse(
            r#"{"model": {"kind": "matrix", "rows": [[-1.0, 0.0], [0.0, -2.0]],
                "atoms": [{"direction": [1.0, 0.0], "weight": 0.5}, {"direction": [0.0, 1.0], "weight": 0.5}]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.scheme, Some(Scheme::Euler));
    }

    #[test]
    fn failed_run_leaves_no_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = parse(
            r#"{"model": {"kind": "heat", "modes": 1}, "experiment": {"kind": "mixing",
                "nu1": {"kind": "point", "x": [0.1]}, "nu2": {"kind": "point", "x": [0.1]}},
                "run": {"samples": 500}}"#,
        )
        .unwrap();
        cfg.run.out = out.clone();
        let err = run_experiment(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_NUMERIC);
        assert!(err.to_string().contains("already mixed"));
        assert!(!out.exists());
    }
}
