//! Parallel-beam X-ray forward model under the projection approximation.

mod dataset;
mod samplers;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::RefractiveIndex;
use crate::error::{Error, Result};

pub use dataset::{Dataset, DatasetManifest, DATASET_FORMAT_TAG};
pub use samplers::{MovieSampler, SphereSampler, SumSampler};

/// `h * c` in eV meters.
pub const HC_EV_M: f64 = 1.239_841_98e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub width: usize,
    pub height: usize,
    /// Pixel pitch in meters.
    pub pixel_pitch: f64,
    pub samples_per_ray: usize,
    /// Photon energy in eV.
    pub photon_energy: f64,
    /// Also record the `int delta ds` phase map.
    pub phase_channel: bool,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            width: 64,
            height: 64,
            pixel_pitch: 4e-6,
            samples_per_ray: 256,
            photon_energy: 10_000.0,
            phase_channel: false,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::config(
                "detector.width",
                format!("detector must be at least 8x8 pixels, got {}x{}", self.width, self.height),
            ));
        }
        if self.samples_per_ray < 32 {
            return Err(Error::config("detector.samples_per_ray", "must be at least 32"));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(Error::config("detector.pixel_pitch", "must be positive"));
        }
        if !(self.photon_energy > 0.0 && self.photon_energy.is_finite()) {
            return Err(Error::config("detector.photon_energy", "must be positive"));
        }
        Ok(())
    }

    /// Wavenumber `2 pi / lambda` in 1/m.
    pub fn wavenumber(&self) -> f64 {
        wavenumber(self.photon_energy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through pixel `(col, row)`; row 0 is the top of the image.
    pub fn pixel_ray(&self, angle_deg: f64, col: usize, row: usize) -> Ray {
        self.ray_at(angle_deg, col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Ray through fractional detector coordinates (pixel units from the
    /// top-left corner).
    pub fn ray_at(&self, angle_deg: f64, col: f64, row: f64) -> Ray {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let u = (col - 0.5 * self.width as f64) * self.pixel_pitch;
        let v = (0.5 * self.height as f64 - row) * self.pixel_pitch;
        Ray {
            origin: [u * c, u * s, v],
            dir: [-s, c, 0.0],
        }
    }
}

pub fn wavenumber(energy_ev: f64) -> f64 {
    2.0 * std::f64::consts::PI * energy_ev / HC_EV_M
}

/// Straight line `origin + s * dir`, `dir` of unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    pub fn at(&self, s: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + s * self.dir[a])
    }
}

/// Region outside which a sampler is known to be vacuum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Aabb { min: [f64; 3], max: [f64; 3] },
    Ball { center: [f64; 3], radius: f64 },
}

impl Support {
    /// Parameter interval of `ray` inside the region.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        match *self {
            Support::Aabb { min, max } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for a in 0..3 {
                    let d = ray.dir[a];
                    if d.abs() < 1e-300 {
                        if ray.origin[a] < min[a] || ray.origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let s0 = (min[a] - ray.origin[a]) / d;
                    let s1 = (max[a] - ray.origin[a]) / d;
                    lo = lo.max(s0.min(s1));
                    hi = hi.min(s0.max(s1));
                }
                (hi > lo).then_some((lo, hi))
            }
            Support::Ball { center, radius } => {
                let oc: [f64; 3] = std::array::from_fn(|a| ray.origin[a] - center[a]);
                let b: f64 = (0..3).map(|a| oc[a] * ray.dir[a]).sum();
                let c: f64 = (0..3).map(|a| oc[a] * oc[a]).sum::<f64>() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let r = disc.sqrt();
                Some((-b - r, -b + r))
            }
        }
    }

    pub fn union_box(&self, other: &Support) -> Support {
        let (a0, a1) = self.bounds();
        let (b0, b1) = other.bounds();
        Support::Aabb {
            min: std::array::from_fn(|i| a0[i].min(b0[i])),
            max: std::array::from_fn(|i| a1[i].max(b1[i])),
        }
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Support::Aabb { min, max } => (min, max),
            Support::Ball { center, radius } => (center.map(|c| c - radius), center.map(|c| c + radius)),
        }
    }
}

/// Anything that yields a refractive-index decrement and absorption index
/// at a physical point and time.
pub trait FieldSampler: Sync {
    /// Non-negative `(delta, beta)` inside the support, vacuum outside.
    fn sample(&self, x: [f64; 3], t: f64) -> RefractiveIndex;
    fn support(&self) -> Support;
}

/// Quadrature nodes along a ray: positions and the common segment length.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub points: Vec<[f64; 3]>,
    pub ds: f64,
}

/// Midpoint (or stratified-jitter when `jitter` is given) nodes on the part
/// of `ray` inside `support`.
pub fn ray_samples<R: Rng + ?Sized>(ray: &Ray, support: &Support, n: usize, jitter: Option<&mut R>) -> RaySamples {
    let Some((s0, s1)) = support.clip(ray) else {
        return RaySamples {
            points: Vec::new(),
            ds: 0.0,
        };
    };
    let ds = (s1 - s0) / n as f64;
    let points = match jitter {
        None => (0..n).map(|k| ray.at(s0 + (k as f64 + 0.5) * ds)).collect(),
        Some(rng) => (0..n)
            .map(|k| ray.at(s0 + (k as f64 + rng.gen::<f64>()) * ds))
            .collect(),
    };
    RaySamples { points, ds }
}

/// `(int delta ds, int beta ds)` along `ray` at time `t`.
pub fn ray_integrate<S: FieldSampler + ?Sized>(sampler: &S, ray: &Ray, t: f64, spec: &DetectorSpec) -> (f64, f64) {
    let nodes = ray_samples::<rand_chacha::ChaCha8Rng>(ray, &sampler.support(), spec.samples_per_ray, None);
    integrate_nodes(sampler, &nodes, t)
}

pub fn integrate_nodes<S: FieldSampler + ?Sized>(sampler: &S, nodes: &RaySamples, t: f64) -> (f64, f64) {
    let (mut d, mut b) = (0.0, 0.0);
    for &x in &nodes.points {
        let n = sampler.sample(x, t);
        d += n.delta;
        b += n.beta;
    }
    (d * nodes.ds, b * nodes.ds)
}

/// Attenuation `exp(-2 k int_beta)` at photon energy `energy_ev`.
pub fn transmission(int_beta: f64, energy_ev: f64) -> Result<f64> {
    if !(int_beta >= 0.0) {
        return Err(Error::Contract(format!("absorption integral must be non-negative, got {int_beta}")));
    }
    Ok((-2.0 * wavenumber(energy_ev) * int_beta).exp())
}

/// Recovers `int beta ds` from a transmission value.
pub fn absorption_from_transmission(t: f64, energy_ev: f64) -> f64 {
    -t.ln() / (2.0 * wavenumber(energy_ev))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, row 0 at the top.
    pub transmission: Vec<f64>,
    /// Optional `int delta ds` map in meters.
    pub phase: Option<Vec<f64>>,
    pub angle_deg: f64,
    pub t: f64,
    pub pixel_pitch: f64,
}

impl ProjectionImage {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.transmission[row * self.width + col]
    }

    /// Total absorbance `sum(-ln T) * pixel area`.
    pub fn total_absorbance(&self) -> f64 {
        self.transmission.iter().map(|t| -t.ln()).sum::<f64>() * self.pixel_pitch * self.pixel_pitch
    }
}

/// One ray per pixel at `angle_deg`, deterministic midpoint quadrature.
pub fn render_projection<S: FieldSampler + ?Sized>(
    sampler: &S,
    angle_deg: f64,
    t: f64,
    spec: &DetectorSpec,
) -> Result<ProjectionImage> {
    spec.validate()?;
    let k2 = 2.0 * spec.wavenumber();
    let integrals: Vec<(f64, f64)> = (0..spec.pixel_count())
        .into_par_iter()
        .map(|p| {
            let ray = spec.pixel_ray(angle_deg, p % spec.width, p / spec.width);
            ray_integrate(sampler, &ray, t, spec)
        })
        .collect();
    let transmission = integrals.iter().map(|(_, b)| (-k2 * b).exp()).collect();
    let phase = spec
        .phase_channel
        .then(|| integrals.iter().map(|(d, _)| *d).collect());
    Ok(ProjectionImage {
        width: spec.width,
        height: spec.height,
        transmission,
        phase,
        angle_deg,
        t,
        pixel_pitch: spec.pixel_pitch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vacuum;

    impl FieldSampler for Vacuum {
        fn sample(&self, _: [f64; 3], _: f64) -> RefractiveIndex {
            RefractiveIndex::VACUUM
        }
        fn support(&self) -> Support {
            Support::Aabb {
                min: [-1.0; 3],
                max: [1.0; 3],
            }
        }
    }

    fn spec() -> DetectorSpec {
        DetectorSpec {
            width: 16,
            height: 12,
            pixel_pitch: 0.1,
            ..DetectorSpec::default()
        }
    }

    #[test]
    fn empty_scene_integrates_to_zero_and_renders_ones() {
        let r = spec().pixel_ray(10.0, 3, 4);
        assert_eq!(ray_integrate(&Vacuum, &r, 0.0, &spec()), (0.0, 0.0));
        let img = render_projection(&Vacuum, 33.0, 0.0, &spec()).unwrap();
        assert!(img.transmission.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn missing_ray_gives_zero() {
        let ball = SphereSampler::new([0.0; 3], 0.5, RefractiveIndex { delta: 1.0, beta: 1.0 });
        let r = Ray {
            origin: [0.0, 0.0, 5.0],
            dir: [0.0, 1.0, 0.0],
        };
        assert_eq!(ray_integrate(&ball, &r, 0.0, &spec()), (0.0, 0.0));
    }

    #[test]
    fn beam_runs_along_y_at_zero_degrees() {
        let r = spec().pixel_ray(0.0, 0, 0);
        assert_eq!(r.dir, [0.0, 1.0, 0.0]);
        assert!(r.origin[0] < 0.0 && r.origin[2] > 0.0);
        let r = spec().pixel_ray(90.0, 0, 0);
        assert!((r.dir[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn transmission_of_vacuum_is_one_and_monotone() {
        assert_eq!(transmission(0.0, 1e4).unwrap(), 1.0);
        let mut last = 1.0;
        for i in 1..20 {
            let t = transmission(i as f64 * 1e-11, 1e4).unwrap();
            assert!(t < last);
            last = t;
        }
        assert!(transmission(-1e-12, 1e4).is_err());
    }

    #[test]
    fn transmission_inverse_round_trips() {
        for &b in &[1e-14, 3e-12, 7.5e-11, 2e-10] {
            let t = transmission(b, 1e4).unwrap();
            let back = absorption_from_transmission(t, 1e4);
            assert!(((back - b) / b).abs() < 1e-12, "{b} {back}");
        }
    }

    #[test]
    fn wavenumber_at_ten_kev() {
        let lambda = HC_EV_M / 1e4;
        assert!((lambda - 1.2398e-10).abs() < 1e-14);
        assert!((wavenumber(1e4) * lambda - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn box_clipping_yields_chord_of_the_box() {
        let s = Support::Aabb {
            min: [-1.0; 3],
            max: [1.0; 3],
        };
        let r = Ray {
            origin: [0.2, -5.0, 0.3],
            dir: [0.0, 1.0, 0.0],
        };
        let (a, b) = s.clip(&r).unwrap();
        assert!((b - a - 2.0).abs() < 1e-15);
    }
}
