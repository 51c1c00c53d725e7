use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::RefractiveIndex;
use crate::error::{Error, Result};

/// Network outputs per point: `psi, u_x, u_y, u_z, p`.
pub const OUTPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Hidden width of every residual block.
    pub width: usize,
    pub blocks: usize,
    /// Fourier octaves for each spatial coordinate.
    pub fourier_x: usize,
    /// Fourier octaves for time.
    pub fourier_t: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            width: 128,
            blocks: 5,
            fourier_x: 6,
            fourier_t: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("training.model.width", "must be positive"));
        }
        if self.blocks == 0 {
            return Err(Error::config("training.model.blocks", "must be positive"));
        }
        if self.fourier_x > 16 {
            return Err(Error::config("training.model.fourier_x", "at most 16 octaves"));
        }
        if self.fourier_t > 16 {
            return Err(Error::config("training.model.fourier_t", "at most 16 octaves"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        4 + 6 * self.fourier_x + 2 * self.fourier_t
    }

    /// Flat parameter layout: input layer, two affine maps per block, heads.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let w = self.width;
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            out.push(LayoutEntry { name, rows, cols, offset });
            offset += rows * cols;
        };
        push("input.weight".into(), w, self.input_dim());
        push("input.bias".into(), w, 1);
        for b in 0..self.blocks {
            push(format!("block{b}.inner.weight"), w, w);
            push(format!("block{b}.inner.bias"), w, 1);
            push(format!("block{b}.outer.weight"), w, w);
            push(format!("block{b}.outer.bias"), w, 1);
        }
        push("head.weight".into(), OUTPUTS, w);
        push("head.bias".into(), OUTPUTS, 1);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map(|e| e.offset + e.rows * e.cols).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Offsets {
    w_in: usize,
    b_in: usize,
    /// inner weight, inner bias, outer weight, outer bias.
    blocks: Vec<[usize; 4]>,
    w_out: usize,
    b_out: usize,
}

impl Offsets {
    fn new(arch: &Architecture) -> Offsets {
        let l = arch.layout();
        let nb = arch.blocks;
        Offsets {
            w_in: l[0].offset,
            b_in: l[1].offset,
            blocks: (0..nb)
                .map(|b| std::array::from_fn(|k| l[2 + 4 * b + k].offset))
                .collect(),
            w_out: l[2 + 4 * nb].offset,
            b_out: l[3 + 4 * nb].offset,
        }
    }
}

/// One evaluated point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub psi: f64,
    pub u: [f64; 3],
    pub p: f64,
    pub delta: f64,
    pub beta: f64,
    /// Input lay outside `[-1, 1]^3 x [0, 1]`.
    pub out_of_range: bool,
}

/// Per-parameter gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub grad: Vec<f64>,
}

impl GradientTape {
    pub fn new(len: usize) -> Self {
        GradientTape { grad: vec![0.0; len] }
    }

    pub fn for_model(model: &FieldModel) -> Self {
        Self::new(model.param_count())
    }

    pub fn zero(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.grad.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &GradientTape) {
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
    }
}

/// Activations of a batch, kept for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    n: usize,
    width: usize,
    in_dim: usize,
    blocks: usize,
    enc: Vec<f64>,
    hs: Vec<f64>,
    acts: Vec<f64>,
    out: Vec<[f64; OUTPUTS]>,
    valid: bool,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[[f64; OUTPUTS]] {
        &self.out
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forgets the cached pass.
    pub fn clear(&mut self) {
        self.valid = false;
        self.n = 0;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `y = W x + b` for a row-major `W`.
fn affine(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, yv) in y.iter_mut().enumerate() {
        *yv = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Fourier-feature encoding of a normalized spacetime point.
pub(crate) fn encode(arch: &Architecture, p: [f64; 4], out: &mut [f64]) {
    out[..4].copy_from_slice(&p);
    let mut k = 4;
    let pi = std::f64::consts::PI;
    for l in 0..arch.fourier_x {
        let f = pi * (1u64 << l) as f64;
        for &x in &p[..3] {
            let (s, c) = (f * x).sin_cos();
            out[k] = s;
            out[k + 1] = c;
            k += 2;
        }
    }
    for l in 0..arch.fourier_t {
        let (s, c) = (pi * (1u64 << l) as f64 * p[3]).sin_cos();
        out[k] = s;
        out[k + 1] = c;
        k += 2;
    }
}

/// Trainable implicit field over normalized spacetime.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    arch: Architecture,
    params: Vec<f64>,
    seed: u64,
    /// Refractive indices of the liquid (`psi = 1`) and gas (`psi = -1`).
    optics: [RefractiveIndex; 2],
    offs: Offsets,
    poisoned: Option<usize>,
}

/// Glorot-uniform weights, zero biases, the `psi` head row scaled by 0.1.
pub fn init_parameters(arch: &Architecture, seed: u64) -> Result<FieldModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = arch.layout();
    let mut params = vec![0.0; arch.param_count()];
    for e in &layout {
        if e.cols == 1 {
            continue;
        }
        let limit = (6.0 / (e.rows + e.cols) as f64).sqrt();
        for v in &mut params[e.offset..e.offset + e.rows * e.cols] {
            *v = rng.gen_range(-limit..limit);
        }
    }
    let head = layout.iter().find(|e| e.name == "head.weight").unwrap();
    for v in &mut params[head.offset..head.offset + head.cols] {
        *v *= 0.1;
    }
    Ok(FieldModel {
        offs: Offsets::new(arch),
        arch: arch.clone(),
        params,
        seed,
        optics: [RefractiveIndex::VACUUM; 2],
        poisoned: None,
    })
}

impl FieldModel {
    /// Rebuilds a model from a stored parameter vector.
    pub fn from_params(arch: &Architecture, params: Vec<f64>, seed: u64) -> Result<FieldModel> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        let poisoned = params.iter().position(|v| !v.is_finite());
        Ok(FieldModel {
            offs: Offsets::new(arch),
            arch: arch.clone(),
            params,
            seed,
            optics: [RefractiveIndex::VACUUM; 2],
            poisoned,
        })
    }

    pub fn with_optics(mut self, liquid: RefractiveIndex, gas: RefractiveIndex) -> Self {
        self.optics = [liquid, gas];
        self
    }

    pub fn optics(&self) -> [RefractiveIndex; 2] {
        self.optics
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        self.arch.layout()
    }

    /// Mutates the parameters and re-checks them for non-finite values.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.poisoned = self.params.iter().position(|v| !v.is_finite());
    }

    pub fn check(&self) -> Result<()> {
        match self.poisoned {
            Some(index) => Err(Error::PoisonedModel { index }),
            None => Ok(()),
        }
    }

    /// `(delta, beta)` of the mixture at phase `psi`.
    pub fn refractive_index(&self, psi: f64) -> RefractiveIndex {
        let [l, g] = self.optics;
        let w = 0.5 * (1.0 + psi);
        RefractiveIndex {
            delta: g.delta + w * (l.delta - g.delta),
            beta: g.beta + w * (l.beta - g.beta),
        }
    }

    /// `d beta / d psi`.
    pub fn beta_slope(&self) -> f64 {
        0.5 * (self.optics[0].beta - self.optics[1].beta)
    }

    pub fn delta_slope(&self) -> f64 {
        0.5 * (self.optics[0].delta - self.optics[1].delta)
    }

    /// Evaluates one normalized point `(x, t)`.
    pub fn forward(&self, x: [f64; 3], t: f64) -> Result<FieldOutput> {
        self.check()?;
        let o = self.eval([x[0], x[1], x[2], t]);
        let n = self.refractive_index(o[0]);
        let out_of_range = x.iter().any(|v| !(-1.0..=1.0).contains(v)) || !(0.0..=1.0).contains(&t);
        Ok(FieldOutput {
            psi: o[0],
            u: [o[1], o[2], o[3]],
            p: o[4],
            delta: n.delta,
            beta: n.beta,
            out_of_range,
        })
    }

    /// Raw outputs for a batch of `[x, y, z, t]` points.
    pub fn forward_batch(&self, points: &[[f64; 4]]) -> Result<Vec<[f64; OUTPUTS]>> {
        self.check()?;
        let mut s = Scratch::new(&self.arch);
        Ok(points.iter().map(|&p| self.eval_with(p, &mut s)).collect())
    }

    /// Raw outputs at one point; the caller is responsible for
    /// [`FieldModel::check`].
    pub fn eval(&self, p: [f64; 4]) -> [f64; OUTPUTS] {
        self.eval_with(p, &mut Scratch::new(&self.arch))
    }

    fn eval_with(&self, p: [f64; 4], s: &mut Scratch) -> [f64; OUTPUTS] {
        let w = self.arch.width;
        let pr = &self.params;
        let o = &self.offs;
        encode(&self.arch, p, &mut s.enc);
        affine(
            &pr[o.w_in..o.w_in + w * s.enc.len()],
            &pr[o.b_in..o.b_in + w],
            &s.enc,
            &mut s.h,
        );
        s.h.iter_mut().for_each(|v| *v = v.tanh());
        for b in &o.blocks {
            affine(&pr[b[0]..b[0] + w * w], &pr[b[1]..b[1] + w], &s.h, &mut s.a);
            s.a.iter_mut().for_each(|v| *v = v.tanh());
            affine(&pr[b[2]..b[2] + w * w], &pr[b[3]..b[3] + w], &s.a, &mut s.z);
            for (h, z) in s.h.iter_mut().zip(&s.z) {
                *h = (*h + z).tanh();
            }
        }
        let mut out = [0.0; OUTPUTS];
        affine(&pr[o.w_out..o.w_out + OUTPUTS * w], &pr[o.b_out..o.b_out + OUTPUTS], &s.h, &mut out);
        out[0] = out[0].tanh();
        out
    }

    /// Forward pass over a batch that keeps every activation for
    /// [`FieldModel::backward`].
    pub fn forward_cached<'c>(&self, points: &[[f64; 4]], cache: &'c mut ForwardCache) -> Result<&'c [[f64; OUTPUTS]]> {
        self.check()?;
        let w = self.arch.width;
        let nb = self.arch.blocks;
        let din = self.arch.input_dim();
        let n = points.len();
        cache.n = n;
        cache.width = w;
        cache.in_dim = din;
        cache.blocks = nb;
        cache.enc.resize(n * din, 0.0);
        cache.hs.resize(n * (nb + 1) * w, 0.0);
        cache.acts.resize(n * nb * w, 0.0);
        cache.out.resize(n, [0.0; OUTPUTS]);
        let pr = &self.params;
        let o = &self.offs;
        let mut z = vec![0.0; w];
        for (i, &p) in points.iter().enumerate() {
            let enc = &mut cache.enc[i * din..(i + 1) * din];
            encode(&self.arch, p, enc);
            let hs = &mut cache.hs[i * (nb + 1) * w..(i + 1) * (nb + 1) * w];
            let acts = &mut cache.acts[i * nb * w..(i + 1) * nb * w];
            affine(&pr[o.w_in..o.w_in + w * din], &pr[o.b_in..o.b_in + w], enc, &mut hs[..w]);
            hs[..w].iter_mut().for_each(|v| *v = v.tanh());
            for (l, b) in o.blocks.iter().enumerate() {
                let (prev, next) = hs.split_at_mut((l + 1) * w);
                let h = &prev[l * w..];
                let a = &mut acts[l * w..(l + 1) * w];
                affine(&pr[b[0]..b[0] + w * w], &pr[b[1]..b[1] + w], h, a);
                a.iter_mut().for_each(|v| *v = v.tanh());
                affine(&pr[b[2]..b[2] + w * w], &pr[b[3]..b[3] + w], a, &mut z);
                for k in 0..w {
                    next[k] = (h[k] + z[k]).tanh();
                }
            }
            let mut out = [0.0; OUTPUTS];
            affine(
                &pr[o.w_out..o.w_out + OUTPUTS * w],
                &pr[o.b_out..o.b_out + OUTPUTS],
                &hs[nb * w..],
                &mut out,
            );
            out[0] = out[0].tanh();
            cache.out[i] = out;
        }
        cache.valid = true;
        Ok(&cache.out)
    }

    /// Adds `sum_i upstream[i] . d outputs_i / d params` to `tape`.
    /// `upstream` is taken with respect to `(psi, u_x, u_y, u_z, p)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[[f64; OUTPUTS]], tape: &mut GradientTape) -> Result<()> {
        if !cache.valid {
            return Err(Error::State("backward called without a cached forward pass".into()));
        }
        if cache.width != self.arch.width
            || cache.blocks != self.arch.blocks
            || cache.in_dim != self.arch.input_dim()
        {
            return Err(Error::State("cached forward pass belongs to a different architecture".into()));
        }
        if upstream.len() != cache.n {
            return Err(Error::Shape(format!(
                "{} upstream gradients for {} cached points",
                upstream.len(),
                cache.n
            )));
        }
        if tape.grad.len() != self.params.len() {
            return Err(Error::Shape("tape length differs from parameter count".into()));
        }
        let w = self.arch.width;
        let nb = self.arch.blocks;
        let din = cache.in_dim;
        let pr = &self.params;
        let o = &self.offs;
        let g = &mut tape.grad;
        let mut dh = vec![0.0; w];
        let mut dz = vec![0.0; w];
        let mut da = vec![0.0; w];
        for (i, up) in upstream.iter().enumerate() {
            if up.iter().all(|v| *v == 0.0) {
                continue;
            }
            let enc = &cache.enc[i * din..(i + 1) * din];
            let hs = &cache.hs[i * (nb + 1) * w..(i + 1) * (nb + 1) * w];
            let acts = &cache.acts[i * nb * w..(i + 1) * nb * w];
            let psi = cache.out[i][0];
            let mut dout = *up;
            dout[0] *= 1.0 - psi * psi;
            let h_last = &hs[nb * w..];
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (r, &d) in dout.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                axpy(d, h_last, &mut g[o.w_out + r * w..o.w_out + (r + 1) * w]);
                g[o.b_out + r] += d;
                axpy(d, &pr[o.w_out + r * w..o.w_out + (r + 1) * w], &mut dh);
            }
            for l in (0..nb).rev() {
                let b = o.blocks[l];
                let h_prev = &hs[l * w..(l + 1) * w];
                let h_next = &hs[(l + 1) * w..(l + 2) * w];
                let a = &acts[l * w..(l + 1) * w];
                for k in 0..w {
                    dz[k] = dh[k] * (1.0 - h_next[k] * h_next[k]);
                }
                da.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..w {
                    let d = dz[r];
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, a, &mut g[b[2] + r * w..b[2] + (r + 1) * w]);
                    g[b[3] + r] += d;
                    axpy(d, &pr[b[2] + r * w..b[2] + (r + 1) * w], &mut da);
                }
                // the skip path carries dz straight through
                dh.copy_from_slice(&dz);
                for r in 0..w {
                    let d = da[r] * (1.0 - a[r] * a[r]);
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, h_prev, &mut g[b[0] + r * w..b[0] + (r + 1) * w]);
                    g[b[1] + r] += d;
                    axpy(d, &pr[b[0] + r * w..b[0] + (r + 1) * w], &mut dh);
                }
            }
            let h0 = &hs[..w];
            for r in 0..w {
                let d = dh[r] * (1.0 - h0[r] * h0[r]);
                if d == 0.0 {
                    continue;
                }
                axpy(d, enc, &mut g[o.w_in + r * din..o.w_in + (r + 1) * din]);
                g[o.b_in + r] += d;
            }
        }
        Ok(())
    }
}

struct Scratch {
    enc: Vec<f64>,
    h: Vec<f64>,
    a: Vec<f64>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(arch: &Architecture) -> Scratch {
        Scratch {
            enc: vec![0.0; arch.input_dim()],
            h: vec![0.0; arch.width],
            a: vec![0.0; arch.width],
            z: vec![0.0; arch.width],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            width: 12,
            blocks: 3,
            fourier_x: 2,
            fourier_t: 1,
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn layout_matches_parameter_count() {
        let a = Architecture::default();
        let m = init_parameters(&a, 1).unwrap();
        assert_eq!(m.params().len(), a.param_count());
        let l = a.layout();
        for w in l.windows(2) {
            assert_eq!(w[0].offset + w[0].rows * w[0].cols, w[1].offset);
        }
        assert_eq!(a.input_dim(), 4 + 36 + 8);
    }

    #[test]
    fn psi_stays_in_range_for_large_parameters() {
        let mut m = init_parameters(&small(), 3).unwrap();
        m.update_params(|p| p.iter_mut().for_each(|v| *v *= 40.0));
        for p in random_points(10_000, 4) {
            let o = m.eval(p);
            assert!((-1.0..=1.0).contains(&o[0]));
        }
    }

    #[test]
    fn equal_indices_make_optics_independent_of_psi() {
        let n = RefractiveIndex { delta: 2e-6, beta: 4e-9 };
        let m = init_parameters(&small(), 3).unwrap().with_optics(n, n);
        for p in random_points(50, 9) {
            let o = m.forward([p[0], p[1], p[2]], p[3]).unwrap();
            assert_eq!((o.delta, o.beta), (n.delta, n.beta));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_parameters(&small(), 11).unwrap();
        let b = init_parameters(&small(), 11).unwrap();
        let c = init_parameters(&small(), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn poisoned_parameters_are_reported() {
        let mut m = init_parameters(&small(), 3).unwrap();
        m.update_params(|p| p[7] = f64::NAN);
        assert!(matches!(m.forward([0.0; 3], 0.5), Err(Error::PoisonedModel { index: 7 })));
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let m = init_parameters(&small(), 5).unwrap();
        let pts = random_points(17, 2);
        let mut c = ForwardCache::default();
        let cached = m.forward_cached(&pts, &mut c).unwrap().to_vec();
        assert_eq!(cached, m.forward_batch(&pts).unwrap());
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let m = init_parameters(&small(), 5).unwrap();
        let mut tape = GradientTape::for_model(&m);
        let err = m.backward(&ForwardCache::default(), &[], &mut tape).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = init_parameters(&small(), 5).unwrap();
        let pts = random_points(4, 2);
        let mut c = ForwardCache::default();
        m.forward_cached(&pts, &mut c).unwrap();
        let mut tape = GradientTape::for_model(&m);
        m.backward(&c, &[[0.0; OUTPUTS]; 4], &mut tape).unwrap();
        assert!(tape.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_point_gradients() {
        let m = init_parameters(&small(), 5).unwrap();
        let pts = random_points(3, 8);
        let up = [[1.0, 0.3, -0.2, 0.5, 0.7]; 3];
        let mut c = ForwardCache::default();
        m.forward_cached(&pts, &mut c).unwrap();
        let mut total = GradientTape::for_model(&m);
        m.backward(&c, &up, &mut total).unwrap();
        let mut sum = GradientTape::for_model(&m);
        for p in &pts {
            m.forward_cached(std::slice::from_ref(p), &mut c).unwrap();
            m.backward(&c, &up[..1], &mut sum).unwrap();
        }
        for (a, b) in total.grad.iter().zip(&sum.grad) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn psi_gradient_matches_finite_differences() {
        let m = init_parameters(&small(), 21).unwrap();
        let p = [0.3, -0.4, 0.1, 0.6];
        let mut c = ForwardCache::default();
        m.forward_cached(&[p], &mut c).unwrap();
        let mut tape = GradientTape::for_model(&m);
        m.backward(&c, &[[1.0, 0.0, 0.0, 0.0, 0.0]], &mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..50 {
            let k = rng.gen_range(0..m.param_count());
            let mut mp = m.clone();
            mp.update_params(|v| v[k] += h);
            let mut mm = m.clone();
            mm.update_params(|v| v[k] -= h);
            let fd = (mp.eval(p)[0] - mm.eval(p)[0]) / (2.0 * h);
            let g = tape.grad[k];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: {g} vs {fd}");
        }
    }
}
