//! Convolutional patch critic and the adversarial loss pair.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralfield::{Checkpoint, LayoutEntry};
use crate::xray::ProjectionImage;

/// Probabilities are clamped to `[P_FLOOR, 1 - P_FLOOR]` before logs.
pub const P_FLOOR: f64 = 1e-7;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticArchitecture {
    pub patch_size: usize,
    /// Output channels of each stride-2 convolution.
    pub channels: Vec<usize>,
}

impl Default for CriticArchitecture {
    fn default() -> Self {
        CriticArchitecture {
            patch_size: 16,
            channels: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvShape {
    cin: usize,
    cout: usize,
    /// Input side length.
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

impl CriticArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::config("critic.patch_size", "must be at least 2"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("critic.channels", "need at least one non-empty stage"));
        }
        Ok(())
    }

    fn stages(&self) -> (Vec<ConvShape>, usize) {
        let mut out = Vec::with_capacity(self.channels.len());
        let (mut cin, mut n, mut off) = (1, self.patch_size, 0);
        for &cout in &self.channels {
            let w_off = off;
            off += cout * cin * KERNEL * KERNEL;
            let b_off = off;
            off += cout;
            let n_out = n.div_ceil(2);
            out.push(ConvShape {
                cin,
                cout,
                n_in: n,
                n_out,
                w_off,
                b_off,
            });
            cin = cout;
            n = n_out;
        }
        (out, off)
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let (stages, head) = self.stages();
        let mut v = Vec::new();
        for (l, s) in stages.iter().enumerate() {
            v.push(LayoutEntry {
                name: format!("conv{l}.weight"),
                rows: s.cout,
                cols: s.cin * KERNEL * KERNEL,
                offset: s.w_off,
            });
            v.push(LayoutEntry {
                name: format!("conv{l}.bias"),
                rows: s.cout,
                cols: 1,
                offset: s.b_off,
            });
        }
        let c = *self.channels.last().unwrap();
        v.push(LayoutEntry {
            name: "head.weight".into(),
            rows: 1,
            cols: c,
            offset: head,
        });
        v.push(LayoutEntry {
            name: "head.bias".into(),
            rows: 1,
            cols: 1,
            offset: head + c,
        });
        v
    }

    pub fn param_count(&self) -> usize {
        self.stages().1 + self.channels.last().unwrap() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    Real,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub angle_deg: f64,
    pub t: f64,
    /// Top-left pixel of the patch.
    pub col: usize,
    pub row: usize,
}

/// Square patches, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub size: usize,
    pub source: PatchSource,
    pub patches: Vec<Vec<f64>>,
    pub meta: Vec<PatchMeta>,
}

impl PatchBatch {
    pub fn new(size: usize, source: PatchSource) -> Self {
        PatchBatch {
            size,
            source,
            patches: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn push(&mut self, patch: Vec<f64>, meta: PatchMeta) -> Result<()> {
        if patch.len() != self.size * self.size {
            return Err(Error::Size(format!(
                "patch has {} values, expected {}",
                patch.len(),
                self.size * self.size
            )));
        }
        if patch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("patch contains a non-finite value".into()));
        }
        self.patches.push(patch);
        self.meta.push(meta);
        Ok(())
    }

    pub fn extend(&mut self, other: PatchBatch) {
        self.patches.extend(other.patches);
        self.meta.extend(other.meta);
    }
}

/// Seeded uniform top-left offsets `(col, row)` for `n` patches of side `s`.
pub fn patch_offsets<R: Rng + ?Sized>(width: usize, height: usize, n: usize, s: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if s == 0 || width < s || height < s {
        return Err(Error::Size(format!("image {width}x{height} is smaller than the patch size {s}")));
    }
    Ok((0..n)
        .map(|_| (rng.gen_range(0..=width - s), rng.gen_range(0..=height - s)))
        .collect())
}

/// Cuts an `s`x`s` window out of a row-major plane.
pub fn cut_patch(values: &[f64], width: usize, col: usize, row: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(s * s);
    for r in row..row + s {
        out.extend_from_slice(&values[r * width + col..r * width + col + s]);
    }
    out
}

/// `n` transmission patches at seeded random offsets.
pub fn extract_patches(image: &ProjectionImage, n: usize, s: usize, seed: u64) -> Result<PatchBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = patch_offsets(image.width, image.height, n, s, &mut rng)?;
    let mut batch = PatchBatch::new(s, PatchSource::Real);
    for (col, row) in offsets {
        batch.push(
            cut_patch(&image.transmission, image.width, col, row, s),
            PatchMeta {
                angle_deg: image.angle_deg,
                t: image.t,
                col,
                row,
            },
        )?;
    }
    Ok(batch)
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct CriticCache {
    /// `acts[0]` is the input; `acts[l + 1]` the tanh output of stage `l`.
    acts: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    logit: f64,
}

impl CriticCache {
    pub fn logit(&self) -> f64 {
        self.logit
    }
}

pub struct Critic {
    arch: CriticArchitecture,
    params: Vec<f64>,
    seed: u64,
    calls: AtomicU64,
}

impl Clone for Critic {
    fn clone(&self) -> Self {
        Critic {
            arch: self.arch.clone(),
            params: self.params.clone(),
            seed: self.seed,
            calls: AtomicU64::new(self.calls()),
        }
    }
}

impl std::fmt::Debug for Critic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Critic")
            .field("arch", &self.arch)
            .field("params", &self.params.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl PartialEq for Critic {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params && self.seed == other.seed
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Critic {
    /// Glorot-uniform weights, zero biases.
    pub fn new(arch: &CriticArchitecture, seed: u64) -> Result<Critic> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.param_count()];
        for e in arch.layout() {
            if !e.name.ends_with(".weight") {
                continue;
            }
            let (fan_in, fan_out) = if e.name.starts_with("conv") {
                (e.cols, e.rows * KERNEL * KERNEL)
            } else {
                (e.cols, e.rows)
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut params[e.offset..e.offset + e.rows * e.cols] {
                *w = rng.gen_range(-a..a);
            }
        }
        Ok(Critic {
            arch: arch.clone(),
            params,
            seed,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_params(arch: &CriticArchitecture, params: Vec<f64>, seed: u64) -> Result<Critic> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::State(format!(
                "critic expects {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::PoisonedModel { index });
        }
        Ok(Critic {
            arch: arch.clone(),
            params,
            seed,
            calls: AtomicU64::new(0),
        })
    }

    pub fn architecture(&self) -> &CriticArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
    }

    /// Number of patches passed through the network so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn check_patch(&self, patch: &[f64]) -> Result<()> {
        let n = self.arch.patch_size;
        if patch.len() != n * n {
            return Err(Error::Size(format!("patch has {} values, critic expects {n}x{n}", patch.len())));
        }
        if patch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("patch contains a non-finite value".into()));
        }
        Ok(())
    }

    pub fn forward_cached(&self, patch: &[f64], cache: &mut CriticCache) -> Result<f64> {
        self.check_patch(patch)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (stages, head) = self.arch.stages();
        let p = &self.params;
        cache.acts.resize(stages.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(patch);
        for (l, s) in stages.iter().enumerate() {
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.clear();
            y.resize(s.cout * s.n_out * s.n_out, 0.0);
            conv_forward(s, p, x, y);
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        let last = stages.last().unwrap();
        let area = (last.n_out * last.n_out) as f64;
        let y = cache.acts.last().unwrap();
        cache.pooled.clear();
        cache
            .pooled
            .extend((0..last.cout).map(|c| y[c * last.n_out * last.n_out..(c + 1) * last.n_out * last.n_out].iter().sum::<f64>() / area));
        let mut z = p[head + last.cout];
        for (c, v) in cache.pooled.iter().enumerate() {
            z += p[head + c] * v;
        }
        cache.logit = z;
        Ok(z)
    }

    pub fn logit(&self, patch: &[f64]) -> Result<f64> {
        self.forward_cached(patch, &mut CriticCache::default())
    }

    /// Probability that `patch` is a measured patch.
    pub fn discriminate(&self, patch: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(patch)?))
    }

    /// Accumulates `dlogit * d logit / d params` into `grad` and, when
    /// requested, `dlogit * d logit / d input` into `grad_input`.
    pub fn backward(&self, cache: &CriticCache, dlogit: f64, grad: &mut [f64], grad_input: Option<&mut [f64]>) -> Result<()> {
        if cache.acts.is_empty() {
            return Err(Error::State("critic backward called without a forward cache".into()));
        }
        if grad.len() != self.params.len() {
            return Err(Error::State("critic gradient buffer has the wrong length".into()));
        }
        let (stages, head) = self.arch.stages();
        let p = &self.params;
        let last = stages.last().unwrap();
        let area = last.n_out * last.n_out;
        for (c, v) in cache.pooled.iter().enumerate() {
            grad[head + c] += dlogit * v;
        }
        grad[head + last.cout] += dlogit;
        // gradient w.r.t. the last activation, then through tanh
        let mut dy = vec![0.0; last.cout * area];
        for c in 0..last.cout {
            let g = dlogit * p[head + c] / area as f64;
            dy[c * area..(c + 1) * area].iter_mut().for_each(|v| *v = g);
        }
        let want_input = grad_input.is_some();
        for l in (0..stages.len()).rev() {
            let s = &stages[l];
            let y = &cache.acts[l + 1];
            for (d, yv) in dy.iter_mut().zip(y) {
                *d *= 1.0 - yv * yv;
            }
            let x = &cache.acts[l];
            let need_dx = l > 0 || want_input;
            let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
            conv_backward(s, p, x, &dy, grad, need_dx.then_some(&mut dx[..]));
            dy = dx;
        }
        if let Some(gi) = grad_input {
            for (g, d) in gi.iter_mut().zip(&dy) {
                *g += d;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut c = Checkpoint::new(
            "critic",
            serde_json::to_value(&self.arch).expect("serializable critic architecture"),
            self.arch.layout(),
            self.seed,
            epoch,
        );
        c.push_blob("critic", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Critic> {
        let arch: CriticArchitecture = serde_json::from_value(c.header.architecture.clone())
            .map_err(|e| Error::State(format!("critic architecture: {e}")))?;
        Critic::from_params(&arch, c.blob("critic")?.to_vec(), c.header.seed)
    }
}

/// 3x3 convolution, stride 2, zero padding 1. Layout `[c][row][col]`.
fn conv_forward(s: &ConvShape, p: &[f64], x: &[f64], y: &mut [f64]) {
    let (ni, no) = (s.n_in as isize, s.n_out);
    for co in 0..s.cout {
        let b = p[s.b_off + co];
        for oy in 0..no {
            for ox in 0..no {
                let mut acc = b;
                for ci in 0..s.cin {
                    let w = &p[s.w_off + (co * s.cin + ci) * 9..][..9];
                    let xc = &x[ci * s.n_in * s.n_in..];
                    for ky in 0..3 {
                        let iy = 2 * oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= ni {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = 2 * ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= ni {
                                continue;
                            }
                            acc += w[ky * 3 + kx] * xc[(iy * ni + ix) as usize];
                        }
                    }
                }
                y[(co * no + oy) * no + ox] = acc;
            }
        }
    }
}

fn conv_backward(s: &ConvShape, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], mut dx: Option<&mut [f64]>) {
    let (ni, no) = (s.n_in as isize, s.n_out);
    for co in 0..s.cout {
        for oy in 0..no {
            for ox in 0..no {
                let g = dy[(co * no + oy) * no + ox];
                if g == 0.0 {
                    continue;
                }
                grad[s.b_off + co] += g;
                for ci in 0..s.cin {
                    let wo = s.w_off + (co * s.cin + ci) * 9;
                    let xo = ci * s.n_in * s.n_in;
                    for ky in 0..3 {
                        let iy = 2 * oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= ni {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = 2 * ox as isize + kx as isize - 1;
                            if ix < 0 || ix >= ni {
                                continue;
                            }
                            let xi = xo + (iy * ni + ix) as usize;
                            grad[wo + ky * 3 + kx] += g * x[xi];
                            if let Some(d) = dx.as_deref_mut() {
                                d[xi] += g * p[wo + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_FLOOR, 1.0 - P_FLOOR)
}

/// `L_D = -[E log D(real) + E log(1 - D(fake))]` and the non-saturating
/// generator loss `L_G = -E log D(fake)`.
pub fn gan_losses(critic: &Critic, real: &PatchBatch, fake: &PatchBatch) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Usage("GAN losses need non-empty real and fake batches".into()));
    }
    let mut lr = 0.0;
    for p in &real.patches {
        lr -= clamp_p(critic.discriminate(p)?).ln();
    }
    let (mut lf, mut lg) = (0.0, 0.0);
    for p in &fake.patches {
        let d = clamp_p(critic.discriminate(p)?);
        lf -= (1.0 - d).ln();
        lg -= d.ln();
    }
    let nf = fake.len() as f64;
    Ok((lr / real.len() as f64 + lf / nf, lg / nf))
}

/// `L_D` and its gradient with respect to the critic parameters.
pub fn critic_loss_grad(critic: &Critic, real: &PatchBatch, fake: &PatchBatch, grad: &mut [f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Usage("GAN losses need non-empty real and fake batches".into()));
    }
    let mut cache = CriticCache::default();
    let mut loss = 0.0;
    for (batch, is_real) in [(real, true), (fake, false)] {
        let w = 1.0 / batch.len() as f64;
        for patch in &batch.patches {
            let z = critic.forward_cached(patch, &mut cache)?;
            let d = sigmoid(z);
            let dc = clamp_p(d);
            let dz = if is_real {
                loss -= w * dc.ln();
                if dc == d { -(1.0 - d) } else { 0.0 }
            } else {
                loss -= w * (1.0 - dc).ln();
                if dc == d { d } else { 0.0 }
            };
            if dz != 0.0 {
                critic.backward(&cache, w * dz, grad, None)?;
            }
        }
    }
    Ok(loss)
}

/// `L_G = -E log D(fake)` and its gradient with respect to each fake
/// patch's pixels.
pub fn generator_adv_grad(critic: &Critic, fake: &PatchBatch) -> Result<(f64, Vec<Vec<f64>>)> {
    if fake.is_empty() {
        return Err(Error::Usage("generator loss needs a non-empty fake batch".into()));
    }
    let mut cache = CriticCache::default();
    let mut scratch = vec![0.0; critic.param_count()];
    let w = 1.0 / fake.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(fake.len());
    for patch in &fake.patches {
        let z = critic.forward_cached(patch, &mut cache)?;
        let d = sigmoid(z);
        let dc = clamp_p(d);
        loss -= w * dc.ln();
        let mut gi = vec![0.0; patch.len()];
        if dc == d {
            critic.backward(&cache, -w * (1.0 - d), &mut scratch, Some(&mut gi))?;
        }
        grads.push(gi);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn random_batch(n: usize, s: usize, seed: u64, source: PatchSource) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = PatchBatch::new(s, source);
        for _ in 0..n {
            let p = (0..s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            b.push(
                p,
                PatchMeta {
                    angle_deg: 0.0,
                    t: 0.0,
                    col: 0,
                    row: 0,
                },
            )
            .unwrap();
        }
        b
    }

    fn small() -> CriticArchitecture {
        CriticArchitecture {
            patch_size: 8,
            channels: vec![3, 4],
        }
    }

    fn image(w: usize, h: usize) -> ProjectionImage {
        ProjectionImage {
            width: w,
            height: h,
            transmission: (0..w * h).map(|i| i as f64).collect(),
            phase: None,
            angle_deg: 23.8,
            t: 1e-7,
            pixel_pitch: 4e-6,
        }
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let img = image(16, 16);
        let b = extract_patches(&img, 1, 16, 3).unwrap();
        assert_eq!(b.patches[0], img.transmission);
        assert_eq!(b.meta[0].angle_deg, 23.8);
    }

    #[test]
    fn patch_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let offs = patch_offsets(40, 24, 10_000, 16, &mut rng).unwrap();
        assert!(offs.iter().all(|&(c, r)| c + 16 <= 40 && r + 16 <= 24));
        let img = image(40, 24);
        assert_eq!(extract_patches(&img, 5, 16, 1).unwrap(), extract_patches(&img, 5, 16, 1).unwrap());
        assert!(extract_patches(&image(8, 40), 1, 16, 0).is_err());
    }

    #[test]
    fn cut_patch_reads_the_right_window() {
        let img = image(10, 10);
        let p = cut_patch(&img.transmission, 10, 3, 2, 2);
        assert_eq!(p, vec![23.0, 24.0, 33.0, 34.0]);
    }

    #[test]
    fn outputs_are_probabilities_and_pure() {
        let c = Critic::new(&CriticArchitecture::default(), 5).unwrap();
        let b = random_batch(1000, 16, 2, PatchSource::Real);
        for p in &b.patches {
            let d = c.discriminate(p).unwrap();
            assert!(d > 0.0 && d < 1.0);
        }
        let a = c.discriminate(&b.patches[0]).unwrap();
        assert_eq!(a.to_bits(), c.discriminate(&b.patches[0]).unwrap().to_bits());
        assert_eq!(c.calls(), 1002);
    }

    #[test]
    fn non_finite_patch_is_rejected() {
        let c = Critic::new(&small(), 5).unwrap();
        let mut p = vec![0.0; 64];
        p[3] = f64::NAN;
        assert!(matches!(c.discriminate(&p), Err(Error::Input(_))));
    }

    #[test]
    fn constant_half_critic_gives_analytic_losses() {
        let mut c = Critic::new(&small(), 1).unwrap();
        c.update_params(|p| p.iter_mut().for_each(|v| *v = 0.0));
        let real = random_batch(7, 8, 1, PatchSource::Real);
        let fake = random_batch(5, 8, 2, PatchSource::Generated);
        let (ld, lg) = gan_losses(&c, &real, &fake).unwrap();
        assert!((ld - 2.0 * LN_2).abs() < 1e-12);
        assert!((lg - LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_critic_hits_the_clamped_floor() {
        let mut c = Critic::new(&small(), 1).unwrap();
        // logit = bias: huge for every patch, then the fake side is clamped
        let n = c.param_count();
        c.update_params(|p| {
            p.iter_mut().for_each(|v| *v = 0.0);
            p[n - 1] = 100.0;
        });
        let real = random_batch(3, 8, 1, PatchSource::Real);
        let (ld_real_only, _) = gan_losses(&c, &real, &real).unwrap();
        // real term ~ 0, fake term at the clamp ceiling -ln(1e-7)
        assert!((ld_real_only - (-(P_FLOOR).ln())).abs() < 1e-6);
        c.update_params(|p| p[n - 1] = -100.0);
        let (_, lg) = gan_losses(&c, &real, &real).unwrap();
        assert!((lg + P_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let c = Critic::new(&small(), 1).unwrap();
        let b = random_batch(2, 8, 1, PatchSource::Real);
        let empty = PatchBatch::new(8, PatchSource::Generated);
        assert!(matches!(gan_losses(&c, &b, &empty), Err(Error::Usage(_))));
        assert!(matches!(gan_losses(&c, &empty, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn negated_head_swaps_the_labels() {
        let c = Critic::new(&small(), 4).unwrap();
        let mut neg = c.clone();
        let head = c.architecture().layout().into_iter().find(|e| e.name == "head.weight").unwrap().offset;
        neg.update_params(|p| p[head..].iter_mut().for_each(|v| *v = -*v));
        let a = random_batch(6, 8, 1, PatchSource::Real);
        let b = random_batch(4, 8, 2, PatchSource::Generated);
        let (ld_neg, _) = gan_losses(&neg, &a, &b).unwrap();
        let (ld_swapped, _) = gan_losses(&c, &b, &a).unwrap();
        assert!((ld_neg - ld_swapped).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_finite_under_parameter_fuzz() {
        let arch = small();
        let real = random_batch(2, 8, 1, PatchSource::Real);
        let fake = random_batch(2, 8, 2, PatchSource::Generated);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for draw in 0..1000u64 {
            let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
            let params = (0..arch.param_count()).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let c = Critic::from_params(&arch, params, draw).unwrap();
            let (ld, lg) = gan_losses(&c, &real, &fake).unwrap();
            assert!(ld.is_finite() && lg.is_finite() && ld >= 0.0);
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let arch = CriticArchitecture {
            patch_size: 7,
            channels: vec![2, 3, 2],
        };
        let c = Critic::new(&arch, 11).unwrap();
        let x = random_batch(1, 7, 3, PatchSource::Real).patches.remove(0);
        let mut cache = CriticCache::default();
        c.forward_cached(&x, &mut cache).unwrap();
        let mut g = vec![0.0; c.param_count()];
        let mut gx = vec![0.0; x.len()];
        c.backward(&cache, 1.0, &mut g, Some(&mut gx)).unwrap();
        let h = 1e-6;
        for i in 0..c.param_count() {
            let mut a = c.clone();
            a.update_params(|p| p[i] += h);
            let mut b = c.clone();
            b.update_params(|p| p[i] -= h);
            let fd = (a.logit(&x).unwrap() - b.logit(&x).unwrap()) / (2.0 * h);
            assert!(rel(g[i], fd) < 1e-4, "param {i}: {} vs {fd}", g[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (c.logit(&xp).unwrap() - c.logit(&xm).unwrap()) / (2.0 * h);
            assert!(rel(gx[i], fd) < 1e-4, "pixel {i}: {} vs {fd}", gx[i]);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let c = Critic::new(&small(), 2).unwrap();
        let real = random_batch(3, 8, 1, PatchSource::Real);
        let fake = random_batch(2, 8, 2, PatchSource::Generated);
        let mut g = vec![0.0; c.param_count()];
        let ld = critic_loss_grad(&c, &real, &fake, &mut g).unwrap();
        assert!((ld - gan_losses(&c, &real, &fake).unwrap().0).abs() < 1e-12);
        let h = 1e-6;
        for i in (0..c.param_count()).step_by(7) {
            let mut a = c.clone();
            a.update_params(|p| p[i] += h);
            let mut b = c.clone();
            b.update_params(|p| p[i] -= h);
            let fd = (gan_losses(&a, &real, &fake).unwrap().0 - gan_losses(&b, &real, &fake).unwrap().0) / (2.0 * h);
            assert!(rel(g[i], fd) < 1e-4, "param {i}: {} vs {fd}", g[i]);
        }
        let (lg, gp) = generator_adv_grad(&c, &fake).unwrap();
        assert!((lg - gan_losses(&c, &real, &fake).unwrap().1).abs() < 1e-12);
        for i in [0, 9, 40, 63] {
            let mut f2 = fake.clone();
            f2.patches[1][i] += h;
            let mut f3 = fake.clone();
            f3.patches[1][i] -= h;
            let fd = (gan_losses(&c, &real, &f2).unwrap().1 - gan_losses(&c, &real, &f3).unwrap().1) / (2.0 * h);
            assert!(rel(gp[1][i], fd) < 1e-4, "pixel {i}: {} vs {fd}", gp[1][i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Critic::new(&small(), 8).unwrap();
        let back = Critic::from_checkpoint(&c.to_checkpoint(3)).unwrap();
        assert_eq!(back, c);
    }
}
