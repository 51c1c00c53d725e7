//! Two-stage optimization of the field model: measured-view fitting with
//! the PDE residual, then adversarial renders at random angles.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, TrainingConfig};
use crate::discriminator::{
    critic_loss_grad, cut_patch, generator_adv_grad, patch_offsets, Critic, CriticArchitecture, PatchBatch, PatchMeta,
    PatchSource,
};
use crate::domain::DomainSpec;
use crate::error::{Error, Result};
use crate::fluidsim::config_epsilon;
use crate::neuralfield::{init_parameters, Checkpoint, FieldModel, ForwardCache, GradientTape, OUTPUTS};
use crate::pinn::{pde_residual_backward, sample_collocation_with, PdeContext, PdeReport};
use crate::xray::{ray_samples, wavenumber, Dataset, DetectorSpec, Support};

pub const LOG_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
/// Consecutive rejected steps before training gives up.
pub const MAX_REJECTIONS: usize = 3;

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_{epoch:06}.bin")
}

/// Mean squared difference.
pub fn mse_loss(rendered: &[f64], measured: &[f64]) -> Result<f64> {
    if rendered.len() != measured.len() || rendered.is_empty() {
        return Err(Error::Usage(format!(
            "mse needs equal non-empty inputs, got {} and {}",
            rendered.len(),
            measured.len()
        )));
    }
    let s: f64 = rendered.iter().zip(measured).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / rendered.len() as f64)
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One update. Nothing changes when a gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer lengths differ: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Input(format!("gradient {i} is not finite")));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn optimizer_step(params: &mut [f64], grads: &[f64], adam: &mut Adam) -> Result<()> {
    adam.step(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Measured,
    RandomAngle,
}

/// One line of `train.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: u8,
    pub kind: IterationKind,
    /// The objective the generator step minimized.
    pub total: f64,
    pub mse: Option<f64>,
    pub pde: f64,
    pub pde_momentum: f64,
    pub pde_divergence: f64,
    pub gan_generator: Option<f64>,
    pub gan_critic: Option<f64>,
    pub lambda_mse: f64,
    pub lambda_pde: f64,
    pub lambda_gan: f64,
    /// Dataset frame of measured iterations.
    pub frame: Option<usize>,
    pub angle_deg: Option<f64>,
    /// Normalized time of the iteration's renders.
    pub t: f64,
    pub rejected: bool,
    pub wall_time: f64,
}

impl LossRecord {
    /// Weighted sum of the logged terms.
    pub fn recomposed_total(&self) -> f64 {
        self.lambda_mse * self.mse.unwrap_or(0.0)
            + self.lambda_pde * self.pde
            + self.lambda_gan * self.gan_generator.unwrap_or(0.0)
    }
}

/// Independent seeded streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRngs {
    pub rays: ChaCha8Rng,
    pub patches: ChaCha8Rng,
    pub angles: ChaCha8Rng,
    pub collocation: ChaCha8Rng,
}

impl TrainRngs {
    fn positions(&self) -> Value {
        let one = |r: &ChaCha8Rng| {
            json!({
                "seed": r.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
                "word_pos": r.get_word_pos().to_string(),
            })
        };
        json!({
            "rays": one(&self.rays),
            "patches": one(&self.patches),
            "angles": one(&self.angles),
            "collocation": one(&self.collocation),
        })
    }

    fn restore(v: &Value) -> Result<TrainRngs> {
        let bad = |m: &str| Error::State(format!("checkpoint RNG state: {m}"));
        let one = |key: &str| -> Result<ChaCha8Rng> {
            let e = &v[key];
            let hex = e["seed"].as_str().ok_or_else(|| bad("missing seed"))?;
            if hex.len() != 64 {
                return Err(bad("seed must be 32 bytes"));
            }
            let mut seed = [0u8; 32];
            for (i, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
            }
            let pos: u128 = e["word_pos"]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("missing word position"))?;
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_word_pos(pos);
            Ok(r)
        };
        Ok(TrainRngs {
            rays: one("rays")?,
            patches: one("patches")?,
            angles: one("angles")?,
            collocation: one("collocation")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed optimizer iterations.
    pub epoch: usize,
    pub generator: FieldModel,
    pub critic: Critic,
    pub adam_generator: Adam,
    pub adam_critic: Adam,
    pub rngs: TrainRngs,
    pub consecutive_rejections: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn stage(&self, cfg: &TrainingConfig) -> u8 {
        if self.epoch < cfg.stage2_start() {
            1
        } else {
            2
        }
    }
}

/// Which pixels to render and, for measured views, what they should read.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub angle_deg: f64,
    /// Normalized time.
    pub t: f64,
    /// Row-major detector pixel indices.
    pub pixels: Vec<usize>,
    /// Present exactly for measured views.
    pub measured: Option<Vec<f64>>,
}

/// Maps line integrals to a normalized absorbance: one reference length of
/// pure liquid along a ray reads as one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsorbanceScale {
    inv: f64,
    gas: f64,
    length_m: f64,
}

impl AbsorbanceScale {
    pub fn new(cfg: &RunConfig, energy_ev: f64) -> Result<AbsorbanceScale> {
        let dbeta = cfg.materials.n1.beta - cfg.materials.n2.beta;
        if !(dbeta > 0.0) {
            return Err(Error::config("materials.n1.beta", "liquid must absorb more than gas"));
        }
        let l = cfg.scales.length_m;
        Ok(AbsorbanceScale {
            inv: 1.0 / (2.0 * wavenumber(energy_ev) * dbeta * l),
            gas: cfg.materials.n2.beta / dbeta,
            length_m: l,
        })
    }

    pub fn from_transmission(&self, t: f64) -> f64 {
        -t.ln() * self.inv
    }
}

/// Quadrature points of a set of rays, flattened for one batched forward.
struct RenderPlan {
    points: Vec<[f64; 4]>,
    /// `starts[r]..starts[r + 1]` are the points of ray `r`.
    starts: Vec<usize>,
    /// `ds / L_ref` per ray.
    weight: Vec<f64>,
}

impl RenderPlan {
    fn new() -> Self {
        RenderPlan {
            points: Vec::new(),
            starts: vec![0],
            weight: Vec::new(),
        }
    }

    fn rays(&self) -> usize {
        self.weight.len()
    }

    fn absorbance(&self, scale: &AbsorbanceScale, out: &[[f64; OUTPUTS]]) -> Vec<f64> {
        (0..self.rays())
            .map(|r| {
                let s: f64 = out[self.starts[r]..self.starts[r + 1]]
                    .iter()
                    .map(|o| scale.gas + 0.5 * (1.0 + o[0]))
                    .sum();
                s * self.weight[r]
            })
            .collect()
    }

    /// Spreads `dL/dq` per ray onto the psi outputs.
    fn upstream(&self, dq: &[f64], up: &mut Vec<[f64; OUTPUTS]>) {
        up.clear();
        up.resize(self.points.len(), [0.0; OUTPUTS]);
        for r in 0..self.rays() {
            let g = 0.5 * self.weight[r] * dq[r];
            for u in &mut up[self.starts[r]..self.starts[r + 1]] {
                u[0] = g;
            }
        }
    }
}

/// Normalized-absorbance copy of one measured image.
#[derive(Debug, Clone)]
struct BankImage {
    width: usize,
    values: Vec<f64>,
    height: usize,
    angle_deg: f64,
    t: f64,
}

pub struct Trainer<'d> {
    cfg: RunConfig,
    dataset: &'d Dataset,
    spec: DomainSpec,
    detector: DetectorSpec,
    support: Support,
    scale: AbsorbanceScale,
    pde: PdeContext,
    critic_arch: CriticArchitecture,
    bank: Vec<BankImage>,
}

impl<'d> Trainer<'d> {
    /// Validates the pairing and builds the measured-patch bank. This is
    /// the only place whole measured images are read.
    pub fn new(cfg: &RunConfig, dataset: &'d Dataset) -> Result<Trainer<'d>> {
        cfg.validate()?;
        if dataset.frame_count() == 0 {
            return Err(Error::Usage("dataset has no frames".into()));
        }
        let spec = dataset.domain().clone();
        let mut detector = dataset.detector().clone();
        detector.samples_per_ray = cfg.training.samples_per_ray;
        detector.phase_channel = false;
        let t = &cfg.training;
        if t.patch_size > detector.width || t.patch_size > detector.height {
            return Err(Error::config(
                "training.patch_size",
                format!("patch {} exceeds the detector {}x{}", t.patch_size, detector.width, detector.height),
            ));
        }
        let scale = AbsorbanceScale::new(cfg, detector.photon_energy)?;
        let mut sim_cfg = cfg.clone();
        sim_cfg.domain = spec.clone();
        let pde = PdeContext::new(&spec, &cfg.materials, &cfg.scales, config_epsilon(&sim_cfg), t.fd_step);
        let critic_arch = CriticArchitecture {
            patch_size: t.patch_size,
            channels: t.critic_channels.clone(),
        };
        let mut bank = Vec::new();
        for f in 0..dataset.frame_count() {
            let tn = (dataset.time(f) - spec.time_span[0]) / spec.duration();
            for v in 0..dataset.view_count() {
                let img = dataset.image(f, v);
                bank.push(BankImage {
                    width: img.width,
                    height: img.height,
                    values: img.transmission.iter().map(|&x| scale.from_transmission(x)).collect(),
                    angle_deg: img.angle_deg,
                    t: tn,
                });
            }
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            dataset,
            support: Support::Aabb {
                min: spec.box_min(),
                max: spec.box_max(),
            },
            spec,
            detector,
            scale,
            pde,
            critic_arch,
            bank,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn pde_context(&self) -> &PdeContext {
        &self.pde
    }

    pub fn absorbance_scale(&self) -> &AbsorbanceScale {
        &self.scale
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let t = &self.cfg.training;
        let s = &self.cfg.seeds;
        let generator = init_parameters(&t.model, s.init)?.with_optics(self.cfg.materials.n1, self.cfg.materials.n2);
        let critic = Critic::new(&self.critic_arch, s.critic_init)?;
        Ok(TrainState {
            epoch: 0,
            adam_generator: Adam::new(generator.param_count(), t.learning_rate),
            adam_critic: Adam::new(critic.param_count(), t.critic_learning_rate),
            generator,
            critic,
            rngs: TrainRngs {
                rays: ChaCha8Rng::seed_from_u64(s.rays),
                patches: ChaCha8Rng::seed_from_u64(s.patches),
                angles: ChaCha8Rng::seed_from_u64(s.angles),
                collocation: ChaCha8Rng::seed_from_u64(s.collocation),
            },
            consecutive_rejections: 0,
            history: Vec::new(),
        })
    }

    /// `lambda_pde` after the linear ramp.
    pub fn lambda_pde_at(&self, epoch: usize) -> f64 {
        let t = &self.cfg.training;
        t.lambda_pde * ((epoch + 1) as f64 / t.pde_ramp_epochs() as f64).min(1.0)
    }

    fn plan_rays<R: Rng>(&self, angle: f64, tn: f64, pixels: &[usize], rng: &mut R, plan: &mut RenderPlan) {
        let w = self.detector.width;
        for &px in pixels {
            let ray = self.detector.pixel_ray(angle, px % w, px / w);
            let nodes = ray_samples(&ray, &self.support, self.detector.samples_per_ray, Some(rng));
            for x in &nodes.points {
                let (xn, _) = self.spec.normalize_unchecked(*x, 0.0);
                plan.points.push([xn[0], xn[1], xn[2], tn]);
            }
            plan.starts.push(plan.points.len());
            plan.weight.push(nodes.ds / self.scale.length_m);
        }
    }

    /// Measured rays of one frame, split evenly over the views.
    pub fn sample_ray_batches<R: Rng>(&self, frame: usize, rng: &mut R) -> Vec<RayBatch> {
        let views = self.dataset.view_count();
        let per_view = (self.cfg.training.rays_per_step / views).max(1);
        let npx = self.detector.pixel_count();
        let tn = (self.dataset.time(frame) - self.spec.time_span[0]) / self.spec.duration();
        (0..views)
            .map(|v| {
                let pixels: Vec<usize> = (0..per_view).map(|_| rng.gen_range(0..npx)).collect();
                let measured = pixels
                    .iter()
                    .map(|&p| self.scale.from_transmission(self.dataset.measured(frame, v, p)))
                    .collect();
                RayBatch {
                    angle_deg: self.dataset.angle(v),
                    t: tn,
                    pixels,
                    measured: Some(measured),
                }
            })
            .collect()
    }

    fn pde_term(&self, state: &mut TrainState, lambda: f64, tape: &mut GradientTape) -> Result<PdeReport> {
        let t = &self.cfg.training;
        let batch = sample_collocation_with(
            t.collocation_points,
            &mut state.rngs.collocation,
            t.collocation_strategy,
            Some(&state.generator),
        )?;
        pde_residual_backward(&state.generator, &batch, &self.pde, lambda, tape)
    }

    /// One optimizer iteration; the returned record is also appended to
    /// the state's history.
    pub fn step(&self, state: &mut TrainState) -> Result<LossRecord> {
        let t = &self.cfg.training;
        let stage = state.stage(t);
        let random_angle = stage == 2 && state.rngs.angles.gen::<f64>() < t.random_angle_probability;
        let lambda_pde = self.lambda_pde_at(state.epoch);
        let snapshot_critic = random_angle.then(|| (state.critic.clone(), state.adam_critic.clone()));
        let result = if random_angle {
            self.adversarial_step(state, lambda_pde)
        } else {
            self.measured_step(state, lambda_pde)
        };
        let (mut rec, grad) = match result {
            Ok(v) => v,
            Err(Error::NonFiniteResidual { .. }) => (
                LossRecord {
                    epoch: state.epoch,
                    stage,
                    kind: if random_angle { IterationKind::RandomAngle } else { IterationKind::Measured },
                    total: f64::NAN,
                    mse: None,
                    pde: f64::NAN,
                    pde_momentum: f64::NAN,
                    pde_divergence: f64::NAN,
                    gan_generator: None,
                    gan_critic: None,
                    lambda_mse: t.lambda_mse,
                    lambda_pde,
                    lambda_gan: if random_angle { t.lambda_gan } else { 0.0 },
                    frame: None,
                    angle_deg: None,
                    t: f64::NAN,
                    rejected: true,
                    wall_time: 0.0,
                },
                GradientTape::new(0),
            ),
            Err(e) => return Err(e),
        };
        rec.stage = stage;
        let ok = !rec.rejected && rec.total.is_finite() && grad.grad.iter().all(|g| g.is_finite());
        if ok {
            let adam = &mut state.adam_generator;
            state.generator.update_params(|p| adam.step(p, &grad.grad).expect("checked finite gradient"));
            state.consecutive_rejections = 0;
        } else {
            rec.rejected = true;
            if let Some((c, a)) = snapshot_critic {
                state.critic = c;
                state.adam_critic = a;
            }
            state.consecutive_rejections += 1;
        }
        state.epoch += 1;
        state.history.push(rec.clone());
        if state.consecutive_rejections >= MAX_REJECTIONS {
            return Err(Error::Aborted(format!(
                "{MAX_REJECTIONS} consecutive non-finite steps ending at epoch {}",
                rec.epoch
            )));
        }
        Ok(rec)
    }

    fn measured_step(&self, state: &mut TrainState, lambda_pde: f64) -> Result<(LossRecord, GradientTape)> {
        let t = &self.cfg.training;
        let frame = state.rngs.rays.gen_range(0..self.dataset.frame_count());
        let batches = self.sample_ray_batches(frame, &mut state.rngs.rays);
        let mut plan = RenderPlan::new();
        for b in &batches {
            self.plan_rays(b.angle_deg, b.t, &b.pixels, &mut state.rngs.rays, &mut plan);
        }
        let mut cache = ForwardCache::default();
        let q = {
            let out = state.generator.forward_cached(&plan.points, &mut cache)?;
            plan.absorbance(&self.scale, out)
        };
        let mut mse = 0.0;
        let mut dq = Vec::with_capacity(q.len());
        let mut at = 0;
        for b in &batches {
            let m = b.measured.as_ref().expect("measured view");
            let r = &q[at..at + m.len()];
            mse += mse_loss(r, m)?;
            let c = t.lambda_mse * 2.0 / m.len() as f64;
            dq.extend(r.iter().zip(m).map(|(a, b)| c * (a - b)));
            at += m.len();
        }
        let mut tape = GradientTape::for_model(&state.generator);
        let mut up = Vec::new();
        plan.upstream(&dq, &mut up);
        state.generator.backward(&cache, &up, &mut tape)?;
        let pde = self.pde_term(state, lambda_pde, &mut tape)?;
        let rec = LossRecord {
            epoch: state.epoch,
            stage: 0,
            kind: IterationKind::Measured,
            total: t.lambda_mse * mse + lambda_pde * pde.loss,
            mse: Some(mse),
            pde: pde.loss,
            pde_momentum: pde.momentum_loss,
            pde_divergence: pde.divergence_loss,
            gan_generator: None,
            gan_critic: None,
            lambda_mse: t.lambda_mse,
            lambda_pde,
            lambda_gan: 0.0,
            frame: Some(frame),
            angle_deg: None,
            t: batches[0].t,
            rejected: false,
            wall_time: 0.0,
        };
        Ok((rec, tape))
    }

    fn real_patches(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<PatchBatch> {
        let s = self.cfg.training.patch_size;
        let mut batch = PatchBatch::new(s, PatchSource::Real);
        for _ in 0..n {
            let img = &self.bank[rng.gen_range(0..self.bank.len())];
            let (col, row) = patch_offsets(img.width, img.height, 1, s, rng)?[0];
            batch.push(
                cut_patch(&img.values, img.width, col, row, s),
                PatchMeta {
                    angle_deg: img.angle_deg,
                    t: img.t,
                    col,
                    row,
                },
            )?;
        }
        Ok(batch)
    }

    fn adversarial_step(&self, state: &mut TrainState, lambda_pde: f64) -> Result<(LossRecord, GradientTape)> {
        let t = &self.cfg.training;
        let angle = state.rngs.angles.gen_range(0.0..360.0);
        let tn = state.rngs.angles.gen_range(0.0..=1.0);
        let s = t.patch_size;
        let w = self.detector.width;

        // generated patches, rendered pixel by pixel
        let offsets = patch_offsets(w, self.detector.height, t.patches_per_step, s, &mut state.rngs.patches)?;
        let mut plan = RenderPlan::new();
        let mut pixels = Vec::with_capacity(s * s);
        for &(col, row) in &offsets {
            pixels.clear();
            for r in row..row + s {
                pixels.extend((col..col + s).map(|c| r * w + c));
            }
            self.plan_rays(angle, tn, &pixels, &mut state.rngs.rays, &mut plan);
        }
        let mut cache = ForwardCache::default();
        let q = {
            let out = state.generator.forward_cached(&plan.points, &mut cache)?;
            plan.absorbance(&self.scale, out)
        };
        let mut fake = PatchBatch::new(s, PatchSource::Generated);
        for (k, &(col, row)) in offsets.iter().enumerate() {
            let patch = q[k * s * s..(k + 1) * s * s].to_vec();
            if patch.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteResidual { points: vec![k] });
            }
            fake.push(
                patch,
                PatchMeta {
                    angle_deg: angle,
                    t: tn,
                    col,
                    row,
                },
            )?;
        }

        // critic update(s) against the measured-patch bank
        let mut ld = 0.0;
        for _ in 0..t.critic_steps {
            let real = self.real_patches(t.patches_per_step, &mut state.rngs.patches)?;
            let mut g = vec![0.0; state.critic.param_count()];
            ld = critic_loss_grad(&state.critic, &real, &fake, &mut g)?;
            if !ld.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteResidual { points: Vec::new() });
            }
            let adam = &mut state.adam_critic;
            state.critic.update_params(|p| adam.step(p, &g).expect("checked finite gradient"));
        }

        // generator: adversarial term through the renders, plus the PDE
        let (lg, dpix) = generator_adv_grad(&state.critic, &fake)?;
        let dq: Vec<f64> = dpix.iter().flatten().map(|g| t.lambda_gan * g).collect();
        let mut tape = GradientTape::for_model(&state.generator);
        let mut up = Vec::new();
        plan.upstream(&dq, &mut up);
        state.generator.backward(&cache, &up, &mut tape)?;
        let pde = self.pde_term(state, lambda_pde, &mut tape)?;
        let rec = LossRecord {
            epoch: state.epoch,
            stage: 0,
            kind: IterationKind::RandomAngle,
            total: t.lambda_gan * lg + lambda_pde * pde.loss,
            mse: None,
            pde: pde.loss,
            pde_momentum: pde.momentum_loss,
            pde_divergence: pde.divergence_loss,
            gan_generator: Some(lg),
            gan_critic: Some(ld),
            lambda_mse: 0.0,
            lambda_pde,
            lambda_gan: t.lambda_gan,
            frame: None,
            angle_deg: Some(angle),
            t: tn,
            rejected: false,
            wall_time: 0.0,
        };
        Ok((rec, tape))
    }

    /// Renders the model's normalized absorbance over a whole detector
    /// image with deterministic midpoint quadrature.
    pub fn render_absorbance(&self, model: &FieldModel, angle: f64, tn: f64) -> Result<Vec<f64>> {
        let mut plan = RenderPlan::new();
        let pixels: Vec<usize> = (0..self.detector.pixel_count()).collect();
        let w = self.detector.width;
        for &px in &pixels {
            let ray = self.detector.pixel_ray(angle, px % w, px / w);
            let nodes = ray_samples::<ChaCha8Rng>(&ray, &self.support, self.detector.samples_per_ray, None);
            for x in &nodes.points {
                let (xn, _) = self.spec.normalize_unchecked(*x, 0.0);
                plan.points.push([xn[0], xn[1], xn[2], tn]);
            }
            plan.starts.push(plan.points.len());
            plan.weight.push(nodes.ds / self.scale.length_m);
        }
        let out = model.forward_batch(&plan.points)?;
        Ok(plan.absorbance(&self.scale, &out))
    }

    /// Full-image absorbance MSE of the first frame's first view.
    pub fn validation_mse(&self, model: &FieldModel) -> Result<f64> {
        let tn = (self.dataset.time(0) - self.spec.time_span[0]) / self.spec.duration();
        let q = self.render_absorbance(model, self.dataset.angle(0), tn)?;
        let m = &self.bank[0].values;
        mse_loss(&q, m)
    }

    pub fn to_checkpoint(&self, state: &TrainState) -> Checkpoint {
        let g = &state.generator;
        let mut c = Checkpoint::new(
            "training",
            serde_json::to_value(g.architecture()).expect("serializable architecture"),
            g.layout(),
            g.seed(),
            state.epoch,
        );
        c.header.optics = Some(g.optics());
        c.push_blob("generator", g.params());
        c.push_blob("critic", state.critic.params());
        c.push_blob("adam_generator.m", &state.adam_generator.m);
        c.push_blob("adam_generator.v", &state.adam_generator.v);
        c.push_blob("adam_critic.m", &state.adam_critic.m);
        c.push_blob("adam_critic.v", &state.adam_critic.v);
        c.header.meta = json!({
            "critic_architecture": state.critic.architecture(),
            "critic_seed": state.critic.seed(),
            "adam_generator_t": state.adam_generator.t,
            "adam_critic_t": state.adam_critic.t,
            "rng": state.rngs.positions(),
            "consecutive_rejections": state.consecutive_rejections,
            "train_frame_indices": self.dataset.manifest.frame_indices,
            "train_frame_times": self.dataset.manifest.frame_times,
            "angles_deg": self.dataset.manifest.angles_deg,
            "domain": self.spec,
            "scales": self.cfg.scales,
            "materials": self.cfg.materials,
            "epsilon": self.pde.epsilon,
            "fd_step": self.cfg.training.fd_step,
            "detector": self.dataset.detector(),
        });
        c
    }

    /// Rebuilds a training state; the loss history is not stored in the
    /// checkpoint.
    pub fn state_from_checkpoint(&self, c: &Checkpoint) -> Result<TrainState> {
        if c.header.kind != "training" {
            return Err(Error::State(format!("expected a training checkpoint, found {:?}", c.header.kind)));
        }
        let generator = FieldModel::from_checkpoint(c)?;
        if generator.architecture() != &self.cfg.training.model {
            return Err(Error::State("checkpoint model differs from the configured architecture".into()));
        }
        let meta = &c.header.meta;
        let critic_arch: CriticArchitecture = serde_json::from_value(meta["critic_architecture"].clone())
            .map_err(|e| Error::State(format!("critic architecture: {e}")))?;
        if critic_arch != self.critic_arch {
            return Err(Error::State("checkpoint critic differs from the configured critic".into()));
        }
        let critic = Critic::from_params(&critic_arch, c.blob("critic")?.to_vec(), meta["critic_seed"].as_u64().unwrap_or(0))?;
        let t = &self.cfg.training;
        let adam = |name: &str, lr: f64, step: &str| -> Result<Adam> {
            let m = c.blob(&format!("{name}.m"))?.to_vec();
            let mut a = Adam::new(m.len(), lr);
            a.m = m;
            a.v = c.blob(&format!("{name}.v"))?.to_vec();
            a.t = meta[step].as_u64().ok_or_else(|| Error::State(format!("checkpoint lacks {step}")))?;
            Ok(a)
        };
        Ok(TrainState {
            epoch: c.header.epoch,
            adam_generator: adam("adam_generator", t.learning_rate, "adam_generator_t")?,
            adam_critic: adam("adam_critic", t.critic_learning_rate, "adam_critic_t")?,
            generator,
            critic,
            rngs: TrainRngs::restore(&meta["rng"])?,
            consecutive_rejections: meta["consecutive_rejections"].as_u64().unwrap_or(0) as usize,
            history: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_checkpoint: String,
    pub rejected_steps: usize,
    pub random_angle_steps: usize,
    pub last_total: f64,
    pub critic_calls: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub summary: TrainSummary,
    pub final_checkpoint: PathBuf,
}

/// Keeps log lines of epochs before `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
        if v["epoch"].as_u64().is_some_and(|e| (e as usize) < epoch) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs the epoch loop, writing `train.jsonl`, periodic checkpoints and a
/// summary into `out`.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cfg, dataset)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut state = match resume {
        Some(p) => trainer.state_from_checkpoint(&Checkpoint::load(p)?)?,
        None => trainer.init_state()?,
    };
    let log_path = out.join(LOG_FILE);
    let val_path = out.join(VALIDATION_FILE);
    if resume.is_some() {
        truncate_log(&log_path, state.epoch)?;
        truncate_log(&val_path, state.epoch)?;
    } else {
        for p in [&log_path, &val_path] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    let open = |p: &Path| {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let mut log = open(&log_path)?;
    let mut val = open(&val_path)?;
    let t = &cfg.training;
    let start = Instant::now();
    while state.epoch < t.epochs {
        let step = trainer.step(&mut state);
        if let Some(rec) = state.history.last_mut() {
            rec.wall_time = start.elapsed().as_secs_f64();
            let line = serde_json::to_string(rec).expect("serializable record");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        step?;
        let e = state.epoch;
        if t.validation_every > 0 && e % t.validation_every == 0 {
            let v = trainer.validation_mse(&state.generator)?;
            writeln!(val, "{}", json!({"epoch": e - 1, "absorbance_mse": v})).map_err(|e| Error::io(&val_path, e))?;
        }
        if e % t.checkpoint_every == 0 && e < t.epochs {
            trainer.to_checkpoint(&state).save(&out.join(checkpoint_name(e)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    val.flush().map_err(|e| Error::io(&val_path, e))?;
    let final_checkpoint = out.join(checkpoint_name(state.epoch));
    trainer.to_checkpoint(&state).save(&final_checkpoint)?;
    let summary = TrainSummary {
        epochs: state.epoch,
        final_checkpoint: checkpoint_name(state.epoch),
        rejected_steps: state.history.iter().filter(|r| r.rejected).count(),
        random_angle_steps: state.history.iter().filter(|r| r.kind == IterationKind::RandomAngle).count(),
        last_total: state.history.last().map_or(f64::NAN, |r| r.total),
        critic_calls: state.critic.calls(),
    };
    let p = out.join(SUMMARY_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("serializable summary") + "\n")
        .map_err(|e| Error::io(&p, e))?;
    Ok(TrainOutcome {
        state,
        summary,
        final_checkpoint,
    })
}
