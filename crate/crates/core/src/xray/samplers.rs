use super::{FieldSampler, Support};
use crate::domain::{MaterialPair, RefractiveIndex};
use crate::fluidsim::Movie4D;

/// Ground-truth movie seen through `n(psi)`: trilinear in space between
/// cell centers, linear in time between frames.
pub struct MovieSampler<'a> {
    movie: &'a Movie4D,
    materials: MaterialPair,
    min: [f64; 3],
    max: [f64; 3],
    inv_h: [f64; 3],
}

impl<'a> MovieSampler<'a> {
    pub fn new(movie: &'a Movie4D, materials: &MaterialPair) -> Self {
        MovieSampler {
            movie,
            materials: *materials,
            min: movie.spec.box_min(),
            max: movie.spec.box_max(),
            inv_h: movie.spec.spacing().map(|h| 1.0 / h),
        }
    }

    /// Phase variable at a physical point inside the box.
    pub fn psi(&self, x: [f64; 3], t: f64) -> f64 {
        let frames = &self.movie.frames;
        let tau = ((t - frames[0].t) / self.movie.dt_frame).clamp(0.0, (frames.len() - 1) as f64);
        let f0 = (tau.floor() as usize).min(frames.len() - 1);
        let w = tau - f0 as f64;
        let a = self.spatial(f0, x);
        if w > 0.0 && f0 + 1 < frames.len() {
            (1.0 - w) * a + w * self.spatial(f0 + 1, x)
        } else {
            a
        }
    }

    fn spatial(&self, frame: usize, x: [f64; 3]) -> f64 {
        let f = &self.movie.frames[frame].psi;
        let n = f.shape();
        let mut i0 = [0usize; 3];
        let mut w = [0.0; 3];
        for a in 0..3 {
            let q = ((x[a] - self.min[a]) * self.inv_h[a] - 0.5).clamp(0.0, (n[a] - 1) as f64);
            let i = (q.floor() as usize).min(n[a].saturating_sub(2));
            i0[a] = i;
            w[a] = q - i as f64;
        }
        let d = f.data();
        let at = |i: usize, j: usize, k: usize| d[i + n[0] * (j + n[1] * k)];
        let mut acc = 0.0;
        for (dk, wk) in [(0, 1.0 - w[2]), (1, w[2])] {
            for (dj, wj) in [(0, 1.0 - w[1]), (1, w[1])] {
                for (di, wi) in [(0, 1.0 - w[0]), (1, w[0])] {
                    let ww = wi * wj * wk;
                    if ww != 0.0 {
                        acc += ww * at(i0[0] + di, i0[1] + dj, i0[2] + dk);
                    }
                }
            }
        }
        acc
    }
}

impl FieldSampler for MovieSampler<'_> {
    fn sample(&self, x: [f64; 3], t: f64) -> RefractiveIndex {
        if (0..3).any(|a| x[a] < self.min[a] || x[a] > self.max[a]) {
            return RefractiveIndex::VACUUM;
        }
        self.materials.refractive_index(self.psi(x, t))
    }

    fn support(&self) -> Support {
        Support::Aabb {
            min: self.min,
            max: self.max,
        }
    }
}

/// Homogeneous ball, static in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereSampler {
    pub center: [f64; 3],
    pub radius: f64,
    pub index: RefractiveIndex,
    support: Support,
}

impl SphereSampler {
    pub fn new(center: [f64; 3], radius: f64, index: RefractiveIndex) -> Self {
        SphereSampler {
            center,
            radius,
            index,
            support: Support::Ball { center, radius },
        }
    }

    /// Same ball, integrated over a wider region.
    pub fn with_support(mut self, support: Support) -> Self {
        self.support = support;
        self
    }
}

impl FieldSampler for SphereSampler {
    fn sample(&self, x: [f64; 3], _t: f64) -> RefractiveIndex {
        let d2: f64 = (0..3).map(|a| (x[a] - self.center[a]).powi(2)).sum();
        if d2 <= self.radius * self.radius {
            self.index
        } else {
            RefractiveIndex::VACUUM
        }
    }

    fn support(&self) -> Support {
        self.support
    }
}

/// Pointwise sum of two samplers over the union of their supports.
pub struct SumSampler<A, B>(pub A, pub B);

impl<A: FieldSampler, B: FieldSampler> FieldSampler for SumSampler<A, B> {
    fn sample(&self, x: [f64; 3], t: f64) -> RefractiveIndex {
        let a = self.0.sample(x, t);
        let b = self.1.sample(x, t);
        RefractiveIndex {
            delta: a.delta + b.delta,
            beta: a.beta + b.beta,
        }
    }

    fn support(&self) -> Support {
        self.0.support().union_box(&self.1.support())
    }
}
