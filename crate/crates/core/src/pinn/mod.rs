//! Navier-Stokes residual of a field over normalized spacetime, its loss and
//! the loss gradient with respect to network parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ReferenceScales;
use crate::domain::{DomainSpec, MaterialPair};
use crate::error::{Error, Result};
use crate::fluidsim::SURFACE_FORCE_SIGN;
use crate::neuralfield::{
    derivatives_from_stencil, stencil_points, Derivatives, FieldModel, ForwardCache, GradientTape, SpacetimeField,
    OUTPUTS, STENCIL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollocationStrategy {
    #[default]
    Uniform,
    /// Favors points near the diffuse interface of the current model.
    InterfaceBiased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    /// Normalized `[x, y, z, t]`.
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
    pub seed: u64,
}

fn uniform_point<R: Rng>(rng: &mut R) -> [f64; 4] {
    [
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(-1.0..=1.0),
        rng.gen_range(0.0..=1.0),
    ]
}

/// Draws `n` collocation points with unit weights.
pub fn sample_collocation(
    n: usize,
    seed: u64,
    strategy: CollocationStrategy,
    model: Option<&FieldModel>,
) -> Result<CollocationBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_collocation_with(n, &mut rng, strategy, model).map(|mut b| {
        b.seed = seed;
        b
    })
}

/// As [`sample_collocation`], drawing from an existing stream.
pub fn sample_collocation_with<R: Rng>(
    n: usize,
    rng: &mut R,
    strategy: CollocationStrategy,
    model: Option<&FieldModel>,
) -> Result<CollocationBatch> {
    if n == 0 {
        return Err(Error::Usage("collocation batch needs at least one point".into()));
    }
    let points = match strategy {
        CollocationStrategy::Uniform => (0..n).map(|_| uniform_point(rng)).collect(),
        CollocationStrategy::InterfaceBiased => {
            let model = model.ok_or_else(|| Error::Usage("interface-biased sampling needs a model".into()))?;
            model.check()?;
            let mut pts = Vec::with_capacity(n);
            // interface points are kept 4x as often as bulk points
            while pts.len() < n {
                let p = uniform_point(rng);
                let near = model.eval(p)[0].abs() < 0.9;
                let keep = rng.gen::<f64>() < if near { 1.0 } else { 0.25 };
                if keep {
                    pts.push(p);
                }
            }
            pts
        }
    };
    Ok(CollocationBatch {
        points,
        weights: vec![1.0; n],
        seed: 0,
    })
}

/// Everything the residual needs besides the field itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeContext {
    /// Materials with `rho1 = mu1 = 1`.
    pub materials: MaterialPair,
    /// Cahn-Hilliard interface width, non-dimensional.
    pub epsilon: f64,
    /// `d x_norm / d x` per axis, `x` non-dimensional.
    pub scale_x: [f64; 3],
    /// `d t_norm / d t`, `t` non-dimensional.
    pub scale_t: f64,
    /// Finite-difference step in normalized units.
    pub fd_step: f64,
}

impl PdeContext {
    pub fn new(spec: &DomainSpec, materials: &MaterialPair, scales: &ReferenceScales, epsilon: f64, fd_step: f64) -> Self {
        PdeContext {
            materials: materials.reduced(),
            epsilon,
            scale_x: spec.extent.map(|e| 2.0 * scales.length_m / e),
            scale_t: scales.time_s() / spec.duration(),
            fd_step,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::Usage(format!("finite-difference step must be positive, got {}", self.fd_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointResidual {
    pub momentum: [f64; 3],
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeReport {
    pub loss: f64,
    /// Weighted mean of `|R_mom|^2`.
    pub momentum_loss: f64,
    /// Weighted mean of `R_div^2`.
    pub divergence_loss: f64,
    pub residuals: Vec<PointResidual>,
}

/// Derivatives converted from normalized to non-dimensional coordinates.
fn to_physical(d: &Derivatives, ctx: &PdeContext) -> Derivatives {
    let mut out = *d;
    for o in 0..OUTPUTS {
        for a in 0..3 {
            out.grad[o][a] = d.grad[o][a] * ctx.scale_x[a];
        }
        out.dt[o] = d.dt[o] * ctx.scale_t;
    }
    out
}

/// Intermediate terms of one point's residual, shared by the value and the
/// reverse pass.
struct Terms {
    rho: f64,
    mu: f64,
    eta: f64,
    accel: [f64; 3],
    r: PointResidual,
}

fn residual_terms(d: &Derivatives, lap: &[f64; OUTPUTS], ctx: &PdeContext) -> Terms {
    let m = &ctx.materials;
    let psi = d.value[0];
    let u = [d.value[1], d.value[2], d.value[3]];
    let rho = m.density(psi);
    let mu = m.viscosity(psi);
    let eta = psi * psi * psi - psi - ctx.epsilon * ctx.epsilon * lap[0];
    let mut accel = [0.0; 3];
    let mut momentum = [0.0; 3];
    for i in 0..3 {
        accel[i] = d.dt[1 + i] + (0..3).map(|j| u[j] * d.grad[1 + i][j]).sum::<f64>();
        momentum[i] = rho * accel[i] - mu / m.re * lap[1 + i] + d.grad[4][i]
            - SURFACE_FORCE_SIGN * eta * d.grad[0][i] / m.we;
    }
    let divergence = (0..3).map(|j| d.grad[1 + j][j]).sum();
    Terms {
        rho,
        mu,
        eta,
        accel,
        r: PointResidual { momentum, divergence },
    }
}

/// Spatial Laplacians with per-axis scaling from the stencil values.
fn scaled_laplacian(v: &[[f64; OUTPUTS]; STENCIL], ctx: &PdeContext) -> [f64; OUTPUTS] {
    let h2 = ctx.fd_step * ctx.fd_step;
    std::array::from_fn(|o| {
        (0..3)
            .map(|a| ctx.scale_x[a] * ctx.scale_x[a] * (v[1 + 2 * a][o] - 2.0 * v[0][o] + v[2 + 2 * a][o]) / h2)
            .sum()
    })
}

fn point_residual(v: &[[f64; OUTPUTS]; STENCIL], ctx: &PdeContext) -> (Derivatives, [f64; OUTPUTS], Terms) {
    let d = to_physical(&derivatives_from_stencil(v, ctx.fd_step), ctx);
    let lap = scaled_laplacian(v, ctx);
    let t = residual_terms(&d, &lap, ctx);
    (d, lap, t)
}

fn check_batch(batch: &CollocationBatch) -> Result<()> {
    if batch.points.is_empty() || batch.points.len() != batch.weights.len() {
        return Err(Error::Usage("collocation batch needs one weight per point and at least one point".into()));
    }
    Ok(())
}

fn finish(batch: &CollocationBatch, residuals: Vec<PointResidual>) -> Result<PdeReport> {
    let bad: Vec<usize> = residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| !(r.momentum.iter().all(|v| v.is_finite()) && r.divergence.is_finite()))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteResidual { points: bad });
    }
    let n = residuals.len() as f64;
    let mut mom = 0.0;
    let mut div = 0.0;
    for (r, w) in residuals.iter().zip(&batch.weights) {
        mom += w * r.momentum.iter().map(|v| v * v).sum::<f64>();
        div += w * r.divergence * r.divergence;
    }
    Ok(PdeReport {
        loss: (mom + div) / n,
        momentum_loss: mom / n,
        divergence_loss: div / n,
        residuals,
    })
}

/// `L_pde = mean_k w_k (|R_mom|^2 + R_div^2)` over the batch.
pub fn pde_residual<F: SpacetimeField + ?Sized>(field: &F, batch: &CollocationBatch, ctx: &PdeContext) -> Result<PdeReport> {
    check_batch(batch)?;
    ctx.validate()?;
    let residuals = batch
        .points
        .iter()
        .map(|p| {
            let v = stencil_points([p[0], p[1], p[2]], p[3], ctx.fd_step).map(|q| field.eval_point(q));
            point_residual(&v, ctx).2.r
        })
        .collect();
    finish(batch, residuals)
}

/// Points per reverse-pass chunk; bounds the activation cache.
const CHUNK: usize = 64;

/// Adds `scale * d L_pde / d params` to `tape` and returns the loss report.
pub fn pde_residual_backward(
    model: &FieldModel,
    batch: &CollocationBatch,
    ctx: &PdeContext,
    scale: f64,
    tape: &mut GradientTape,
) -> Result<PdeReport> {
    check_batch(batch)?;
    ctx.validate()?;
    model.check()?;
    let n = batch.points.len() as f64;
    let h = ctx.fd_step;
    let m = &ctx.materials;
    let (drho, dmu) = (0.5 * (m.rho1 - m.rho2), 0.5 * (m.mu1 - m.mu2));
    let mut residuals = Vec::with_capacity(batch.points.len());
    let mut cache = ForwardCache::default();
    let mut stencil = Vec::with_capacity(CHUNK * STENCIL);
    let mut upstream = Vec::with_capacity(CHUNK * STENCIL);
    for (chunk, weights) in batch.points.chunks(CHUNK).zip(batch.weights.chunks(CHUNK)) {
        stencil.clear();
        for p in chunk {
            stencil.extend_from_slice(&stencil_points([p[0], p[1], p[2]], p[3], h));
        }
        let outs = model.forward_cached(&stencil, &mut cache)?;
        upstream.clear();
        for (k, w) in weights.iter().enumerate() {
            let v: [[f64; OUTPUTS]; STENCIL] = std::array::from_fn(|s| outs[k * STENCIL + s]);
            let (d, lap, t) = point_residual(&v, ctx);
            residuals.push(t.r);
            let c = scale * 2.0 * w / n;
            let r = t.r.momentum.map(|x| c * x);
            let dd = c * t.r.divergence;
            let psi = d.value[0];
            let u = [d.value[1], d.value[2], d.value[3]];

            // gradients with respect to the derivative quantities
            let mut g_val = [0.0; OUTPUTS];
            let mut g_grad = [[0.0; 3]; OUTPUTS];
            let mut g_dt = [0.0; OUTPUTS];
            let mut g_lap = [0.0; OUTPUTS];
            let sw = SURFACE_FORCE_SIGN / m.we;
            for i in 0..3 {
                let lap_u = lap[1 + i];
                g_val[0] += r[i]
                    * (drho * t.accel[i] - dmu / m.re * lap_u - sw * (3.0 * psi * psi - 1.0) * d.grad[0][i]);
                g_lap[0] += r[i] * sw * ctx.epsilon * ctx.epsilon * d.grad[0][i];
                g_grad[0][i] += -r[i] * sw * t.eta;
                for j in 0..3 {
                    g_val[1 + j] += r[i] * t.rho * d.grad[1 + i][j];
                    g_grad[1 + i][j] += r[i] * t.rho * u[j];
                }
                g_dt[1 + i] += r[i] * t.rho;
                g_lap[1 + i] += -r[i] * t.mu / m.re;
                g_grad[4][i] += r[i];
                g_grad[1 + i][i] += dd;
            }

            // chain through the stencil
            let mut up = [[0.0; OUTPUTS]; STENCIL];
            let inv2h = 0.5 / h;
            let invh2 = 1.0 / (h * h);
            for o in 0..OUTPUTS {
                up[0][o] += g_val[o];
                for a in 0..3 {
                    let s = ctx.scale_x[a];
                    let gl = g_lap[o] * s * s * invh2;
                    let gg = g_grad[o][a] * s * inv2h;
                    up[1 + 2 * a][o] += gg + gl;
                    up[2 + 2 * a][o] += -gg + gl;
                    up[0][o] -= 2.0 * gl;
                }
                let gt = g_dt[o] * ctx.scale_t * inv2h;
                up[7][o] += gt;
                up[8][o] -= gt;
            }
            upstream.extend_from_slice(&up);
        }
        model.backward(&cache, &upstream, tape)?;
    }
    finish(batch, residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::neuralfield::{init_parameters, Architecture};
    use std::f64::consts::PI;

    fn unit_ctx(h: f64) -> PdeContext {
        PdeContext {
            materials: RunConfig::baseline().materials.reduced(),
            epsilon: 0.05,
            scale_x: [1.0; 3],
            scale_t: 1.0,
            fd_step: h,
        }
    }

    struct Probe<F: Fn([f64; 4]) -> [f64; OUTPUTS]>(F);

    impl<F: Fn([f64; 4]) -> [f64; OUTPUTS]> SpacetimeField for Probe<F> {
        fn eval_point(&self, p: [f64; 4]) -> [f64; OUTPUTS] {
            (self.0)(p)
        }
    }

    fn batch(n: usize, seed: u64) -> CollocationBatch {
        sample_collocation(n, seed, CollocationStrategy::Uniform, None).unwrap()
    }

    #[test]
    fn uniform_collocation_respects_bounds_and_is_seeded() {
        let a = batch(1000, 3);
        assert_eq!(a, batch(1000, 3));
        assert_ne!(a.points, batch(1000, 4).points);
        for p in &a.points {
            assert!(p[..3].iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!((0.0..=1.0).contains(&p[3]));
        }
        // coordinate means within 3 sigma of the box center
        let n = a.points.len() as f64;
        for k in 0..4 {
            let (c, var) = if k < 3 { (0.0, 1.0 / 3.0) } else { (0.5, 1.0 / 12.0) };
            let mean = a.points.iter().map(|p| p[k]).sum::<f64>() / n;
            assert!((mean - c).abs() < 3.0 * (var / n).sqrt(), "axis {k}: {mean}");
        }
    }

    #[test]
    fn interface_bias_needs_a_model() {
        let err = sample_collocation(4, 1, CollocationStrategy::InterfaceBiased, None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        let m = init_parameters(&Architecture { width: 8, blocks: 1, fourier_x: 1, fourier_t: 1 }, 1).unwrap();
        let b = sample_collocation(16, 1, CollocationStrategy::InterfaceBiased, Some(&m)).unwrap();
        assert_eq!(b.points.len(), 16);
    }

    #[test]
    fn quiescent_and_translating_probes_have_zero_residual() {
        let ctx = unit_ctx(1.0 / 64.0);
        let still = Probe(|_| [1.0, 0.0, 0.0, 0.0, 3.5]);
        assert!(pde_residual(&still, &batch(32, 1), &ctx).unwrap().loss < 1e-20);
        let moving = Probe(|_| [1.0, 0.4, -1.2, 0.7, -2.0]);
        assert!(pde_residual(&moving, &batch(32, 2), &ctx).unwrap().loss < 1e-20);
    }

    fn taylor_green_loss(h: f64) -> f64 {
        let m = RunConfig::baseline().materials.reduced();
        let nu = m.mu1 / (m.rho1 * m.re);
        let tg = Probe(move |p: [f64; 4]| {
            let (x, y, t) = (PI * p[0], PI * p[1], p[3]);
            let f = (-2.0 * nu * t).exp();
            [
                1.0,
                x.sin() * y.cos() * f,
                -x.cos() * y.sin() * f,
                0.0,
                0.25 * ((2.0 * x).cos() + (2.0 * y).cos()) * f * f,
            ]
        });
        // the probe lives on [-pi, pi]; rescale the derivative chain
        let ctx = PdeContext {
            scale_x: [1.0 / PI, 1.0 / PI, 1.0 / PI],
            ..unit_ctx(h)
        };
        pde_residual(&tg, &batch(64, 9), &ctx).unwrap().loss
    }

    #[test]
    fn taylor_green_residual_converges_at_second_order() {
        let l1 = taylor_green_loss(1.0 / 32.0);
        let l2 = taylor_green_loss(1.0 / 64.0);
        let ratio = (l1 / l2).sqrt();
        assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn constant_pressure_shift_leaves_loss_unchanged() {
        let ctx = unit_ctx(1.0 / 64.0);
        let f = |p: [f64; 4]| [p[0].tanh(), p[1] * p[3], p[2].sin(), p[0] * p[1], p[2] * p[2]];
        let a = pde_residual(&Probe(f), &batch(16, 3), &ctx).unwrap().loss;
        let b = pde_residual(&Probe(move |p| {
            let mut v = f(p);
            v[4] += 17.0;
            v
        }), &batch(16, 3), &ctx)
        .unwrap()
        .loss;
        assert!((a - b).abs() <= 1e-9 * a.abs());
    }

    fn tiny() -> FieldModel {
        let a = Architecture {
            width: 16,
            blocks: 2,
            fourier_x: 1,
            fourier_t: 1,
        };
        init_parameters(&a, 7).unwrap()
    }

    #[test]
    fn backward_reports_the_same_loss_as_the_forward() {
        let m = tiny();
        let ctx = unit_ctx(1.0 / 16.0);
        let b = batch(8, 5);
        let fwd = pde_residual(&m, &b, &ctx).unwrap().loss;
        let mut tape = GradientTape::for_model(&m);
        let bwd = pde_residual_backward(&m, &b, &ctx, 1.0, &mut tape).unwrap().loss;
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn zero_weights_give_zero_gradient_and_doubling_doubles() {
        let m = tiny();
        let ctx = unit_ctx(1.0 / 16.0);
        let mut b = batch(8, 5);
        let mut t1 = GradientTape::for_model(&m);
        let l1 = pde_residual_backward(&m, &b, &ctx, 1.0, &mut t1).unwrap().loss;
        b.weights.iter_mut().for_each(|w| *w = 2.0);
        let mut t2 = GradientTape::for_model(&m);
        let l2 = pde_residual_backward(&m, &b, &ctx, 1.0, &mut t2).unwrap().loss;
        assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l2);
        for (a, c) in t1.grad.iter().zip(&t2.grad) {
            assert!((2.0 * a - c).abs() <= 1e-10 * (1.0 + c.abs()));
        }
        b.weights.iter_mut().for_each(|w| *w = 0.0);
        let mut t0 = GradientTape::for_model(&m);
        pde_residual_backward(&m, &b, &ctx, 1.0, &mut t0).unwrap();
        assert!(t0.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn pde_gradient_matches_finite_differences() {
        let m = tiny();
        let ctx = unit_ctx(1.0 / 16.0);
        let b = batch(8, 5);
        let mut tape = GradientTape::for_model(&m);
        pde_residual_backward(&m, &b, &ctx, 1.0, &mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..30 {
            let k = rng.gen_range(0..m.param_count());
            let mut mp = m.clone();
            mp.update_params(|v| v[k] += h);
            let mut mm = m.clone();
            mm.update_params(|v| v[k] -= h);
            let fd = (pde_residual(&mp, &b, &ctx).unwrap().loss - pde_residual(&mm, &b, &ctx).unwrap().loss) / (2.0 * h);
            let g = tape.grad[k];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-3, "param {k}: {g} vs {fd}");
        }
    }
}
