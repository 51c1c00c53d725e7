//! Run configuration: a single JSON document shared by every stage of the
//! pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{DomainSpec, MaterialPair, RefractiveIndex};
use crate::error::{Error, Result};
use crate::neuralfield::Architecture;
use crate::pinn::CollocationStrategy;
use crate::xray::DetectorSpec;

/// Physical reference scales that connect SI inputs with the
/// non-dimensional equations (`Re`, `We` are formed with these).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceScales {
    /// Reference length in meters (droplet diameter by default).
    pub length_m: f64,
    /// Reference velocity in meters per second.
    pub velocity_m_s: f64,
}

impl Default for ReferenceScales {
    fn default() -> Self {
        ReferenceScales {
            length_m: 80e-6,
            velocity_m_s: 20.0,
        }
    }
}

impl ReferenceScales {
    pub fn time_s(&self) -> f64 {
        self.length_m / self.velocity_m_s
    }
}

/// Ground-truth solver settings, all non-dimensional (lengths in units of
/// `scales.length_m`, measured from the domain center).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub droplet_radius: f64,
    /// Droplet centers; `None` places them symmetrically on the x axis with
    /// a gap of `droplet_gap` between the surfaces.
    pub droplet_centers: Option<[[f64; 3]; 2]>,
    pub droplet_gap: f64,
    /// Speed of each droplet towards the other.
    pub impact_speed: f64,
    /// Interface width; `None` means two grid spacings.
    pub interface_width: Option<f64>,
    /// Cahn-Hilliard mobility; `None` gives an interface Peclet number
    /// `impact_speed * width / mobility` of one.
    pub mobility: Option<f64>,
    pub dt: Option<f64>,
    pub steps_per_frame: Option<usize>,
    /// CFL number used when the time step is derived automatically.
    pub cfl_target: f64,
    pub poisson_tolerance: f64,
    pub poisson_max_iterations: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            droplet_radius: 0.5,
            droplet_centers: None,
            droplet_gap: 0.2,
            impact_speed: 1.0,
            interface_width: None,
            mobility: None,
            dt: None,
            steps_per_frame: None,
            cfl_target: 0.25,
            poisson_tolerance: 1e-6,
            poisson_max_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// One epoch is one optimizer iteration.
    pub epochs: usize,
    pub rays_per_step: usize,
    pub collocation_points: usize,
    pub patches_per_step: usize,
    pub patch_size: usize,
    /// Quadrature samples per ray for renders of the model.
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub lambda_mse: f64,
    pub lambda_gan: f64,
    pub lambda_pde: f64,
    /// Fraction of the epochs over which `lambda_pde` ramps up linearly.
    pub pde_ramp_fraction: f64,
    /// `None` starts stage 2 after 30% of the epochs.
    pub stage2_start_epoch: Option<usize>,
    pub random_angle_probability: f64,
    pub critic_steps: usize,
    pub checkpoint_every: usize,
    /// Epoch interval of validation renders (0 disables them).
    pub validation_every: usize,
    /// Finite-difference step of the spacetime derivatives, in normalized units.
    pub fd_step: f64,
    pub collocation_strategy: CollocationStrategy,
    pub model: Architecture,
    /// Output channels of the critic's stride-2 convolutions.
    pub critic_channels: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 2000,
            rays_per_step: 4096,
            collocation_points: 2048,
            patches_per_step: 16,
            patch_size: 16,
            samples_per_ray: 64,
            learning_rate: 1e-4,
            critic_learning_rate: 1e-4,
            lambda_mse: 1.0,
            lambda_gan: 0.1,
            lambda_pde: 1.0,
            pde_ramp_fraction: 0.1,
            stage2_start_epoch: None,
            random_angle_probability: 0.5,
            critic_steps: 1,
            checkpoint_every: 500,
            validation_every: 0,
            fd_step: 1.0 / 64.0,
            collocation_strategy: CollocationStrategy::Uniform,
            model: Architecture::default(),
            critic_channels: vec![16, 32, 64],
        }
    }
}

impl TrainingConfig {
    pub fn stage2_start(&self) -> usize {
        self.stage2_start_epoch
            .unwrap_or_else(|| (self.epochs as f64 * 0.3).round() as usize)
    }

    /// Number of epochs of the `lambda_pde` ramp (at least one).
    pub fn pde_ramp_epochs(&self) -> usize {
        ((self.epochs as f64 * self.pde_ramp_fraction).ceil() as usize).max(1)
    }
}

/// Independent RNG seeds per subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub init: u64,
    pub critic_init: u64,
    pub rays: u64,
    pub patches: u64,
    pub angles: u64,
    pub collocation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_base(0)
    }
}

impl Seeds {
    /// Derives every subsystem seed from one integer.
    pub fn from_base(base: u64) -> Seeds {
        let mut state = base;
        let mut next = move || {
            // splitmix64
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Seeds {
            init: next(),
            critic_init: next(),
            rays: next(),
            patches: next(),
            angles: next(),
            collocation: next(),
        }
    }
}

fn default_view_angles() -> Vec<f64> {
    vec![0.0, 23.8]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub materials: MaterialPair,
    #[serde(default)]
    pub scales: ReferenceScales,
    #[serde(default)]
    pub simulation: SimulationConfig,
    /// Projection angles in degrees about the vertical axis.
    #[serde(default = "default_view_angles")]
    pub view_angles: Vec<f64>,
    pub detector: DetectorSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub seeds: Seeds,
}

impl RunConfig {
    /// Droplet-collision setup with the published flow parameters, a 64^3
    /// grid at 4 um spacing and water/air optical constants at 10 keV.
    pub fn baseline() -> RunConfig {
        RunConfig {
            domain: DomainSpec {
                extent: [256e-6; 3],
                time_span: [0.0, 74.0 * 0.075e-6],
                grid_shape: [64; 3],
                frame_count: 75,
            },
            materials: MaterialPair {
                rho1: 1000.0,
                rho2: 1.0,
                mu1: 1e-3,
                mu2: 1e-5,
                n1: RefractiveIndex {
                    delta: 2.30e-6,
                    beta: 5.26e-9,
                },
                n2: RefractiveIndex {
                    delta: 2.8e-9,
                    beta: 6.0e-12,
                },
                re: 200.0,
                we: 6.94,
            },
            scales: ReferenceScales::default(),
            simulation: SimulationConfig::default(),
            view_angles: default_view_angles(),
            detector: DetectorSpec::default(),
            training: TrainingConfig::default(),
            seeds: Seeds::default(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", format!("invalid JSON: {e}")))?;
        validate_config(&raw)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.materials.validate()?;
        self.detector.validate()?;
        let sc = &self.scales;
        for (key, v) in [
            ("scales.length_m", sc.length_m),
            ("scales.velocity_m_s", sc.velocity_m_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        if self.view_angles.is_empty() {
            return Err(Error::config("view_angles", "at least one angle is required"));
        }
        if let Some(a) = self.view_angles.iter().find(|a| !a.is_finite()) {
            return Err(Error::config("view_angles", format!("angle {a} is not finite")));
        }
        validate_simulation(&self.simulation)?;
        validate_training(&self.training)
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be non-negative, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be at least {min}, got {v}")))
    }
}

fn validate_simulation(s: &SimulationConfig) -> Result<()> {
    positive("simulation.droplet_radius", s.droplet_radius)?;
    non_negative("simulation.droplet_gap", s.droplet_gap)?;
    non_negative("simulation.impact_speed", s.impact_speed)?;
    if let Some(w) = s.interface_width {
        positive("simulation.interface_width", w)?;
    }
    if let Some(m) = s.mobility {
        positive("simulation.mobility", m)?;
    }
    if let Some(dt) = s.dt {
        positive("simulation.dt", dt)?;
    }
    if let Some(n) = s.steps_per_frame {
        at_least("simulation.steps_per_frame", n, 1)?;
    }
    if let Some(c) = s.droplet_centers {
        if c.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("simulation.droplet_centers", "must be finite"));
        }
    }
    positive("simulation.cfl_target", s.cfl_target)?;
    if s.cfl_target > 0.5 {
        return Err(Error::config(
            "simulation.cfl_target",
            format!("must not exceed 0.5, got {}", s.cfl_target),
        ));
    }
    positive("simulation.poisson_tolerance", s.poisson_tolerance)?;
    at_least("simulation.poisson_max_iterations", s.poisson_max_iterations, 1)
}

fn validate_training(t: &TrainingConfig) -> Result<()> {
    at_least("training.epochs", t.epochs, 1)?;
    at_least("training.rays_per_step", t.rays_per_step, 1)?;
    at_least("training.collocation_points", t.collocation_points, 1)?;
    at_least("training.patches_per_step", t.patches_per_step, 1)?;
    at_least("training.patch_size", t.patch_size, 8)?;
    at_least("training.samples_per_ray", t.samples_per_ray, 32)?;
    positive("training.learning_rate", t.learning_rate)?;
    positive("training.critic_learning_rate", t.critic_learning_rate)?;
    non_negative("training.lambda_mse", t.lambda_mse)?;
    non_negative("training.lambda_gan", t.lambda_gan)?;
    non_negative("training.lambda_pde", t.lambda_pde)?;
    non_negative("training.pde_ramp_fraction", t.pde_ramp_fraction)?;
    let p = t.random_angle_probability;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(
            "training.random_angle_probability",
            format!("must lie in [0, 1], got {p}"),
        ));
    }
    at_least("training.critic_steps", t.critic_steps, 1)?;
    at_least("training.checkpoint_every", t.checkpoint_every, 1)?;
    positive("training.fd_step", t.fd_step)?;
    if t.critic_channels.is_empty() || t.critic_channels.contains(&0) {
        return Err(Error::config("training.critic_channels", "need at least one non-empty stage"));
    }
    t.model.validate()
}

/// Parses and validates a raw JSON document into a [`RunConfig`].
///
/// Missing required keys, unknown keys and out-of-range values are reported
/// with the offending key.
pub fn validate_config(raw: &Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| {
        let msg = e.to_string();
        Error::config(backticked(&msg).unwrap_or("<document>").to_string(), msg.clone())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}
