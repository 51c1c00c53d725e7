//! Shared domain types: the spacetime box, material properties and
//! regular-grid fields.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical spacetime box sampled on a cell-centered grid.
///
/// The box is centered on the origin: axis `a` spans
/// `[-extent[a] / 2, extent[a] / 2]`. Axis 2 (z) is vertical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Edge lengths in meters.
    pub extent: [f64; 3],
    /// Start and end time in seconds.
    pub time_span: [f64; 2],
    pub grid_shape: [usize; 3],
    pub frame_count: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        for (a, &e) in self.extent.iter().enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::config(
                    format!("domain.extent[{a}]"),
                    format!("must be a positive length, got {e}"),
                ));
            }
        }
        let [t0, t1] = self.time_span;
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(Error::config(
                "domain.time_span",
                format!("end must exceed start, got [{t0}, {t1}]"),
            ));
        }
        for (a, &n) in self.grid_shape.iter().enumerate() {
            if n < 4 {
                return Err(Error::config(
                    format!("domain.grid_shape[{a}]"),
                    format!("must be at least 4, got {n}"),
                ));
            }
        }
        if self.frame_count < 2 {
            return Err(Error::config(
                "domain.frame_count",
                format!("must be at least 2, got {}", self.frame_count),
            ));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Physical cell size along each axis.
    pub fn spacing(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.extent[a] / self.grid_shape[a] as f64)
    }

    pub fn box_min(&self) -> [f64; 3] {
        self.extent.map(|e| -0.5 * e)
    }

    pub fn box_max(&self) -> [f64; 3] {
        self.extent.map(|e| 0.5 * e)
    }

    pub fn duration(&self) -> f64 {
        self.time_span[1] - self.time_span[0]
    }

    pub fn frame_interval(&self) -> f64 {
        self.duration() / (self.frame_count - 1) as f64
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let dt = self.frame_interval();
        (0..self.frame_count)
            .map(|f| self.time_span[0] + f as f64 * dt)
            .collect()
    }

    /// Physical position of the center of cell `(i, j, k)`.
    pub fn cell_center(&self, idx: [usize; 3]) -> [f64; 3] {
        let h = self.spacing();
        std::array::from_fn(|a| -0.5 * self.extent[a] + (idx[a] as f64 + 0.5) * h[a])
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|a| x[a].abs() <= 0.5 * self.extent[a])
    }

    /// Maps a physical point into `[-1, 1]^3 x [0, 1]`.
    pub fn normalize_point(&self, x: [f64; 3], t: f64) -> Result<([f64; 3], f64)> {
        let [t0, t1] = self.time_span;
        if !self.contains(x) || !(t0..=t1).contains(&t) {
            return Err(Error::OutOfDomain { x, t });
        }
        Ok(self.normalize_unchecked(x, t))
    }

    /// Affine normalization without the domain check.
    pub fn normalize_unchecked(&self, x: [f64; 3], t: f64) -> ([f64; 3], f64) {
        let xn = std::array::from_fn(|a| 2.0 * x[a] / self.extent[a]);
        (xn, (t - self.time_span[0]) / self.duration())
    }

    pub fn denormalize_point(&self, xn: [f64; 3], tn: f64) -> ([f64; 3], f64) {
        let x = std::array::from_fn(|a| 0.5 * xn[a] * self.extent[a]);
        (x, self.time_span[0] + tn * self.duration())
    }

    /// Same domain with a different grid resolution.
    pub fn with_grid(&self, grid_shape: [usize; 3]) -> DomainSpec {
        DomainSpec {
            grid_shape,
            ..self.clone()
        }
    }
}

/// Complex refractive index `n = 1 - delta + i beta`, stored by its two
/// non-negative components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefractiveIndex {
    pub delta: f64,
    pub beta: f64,
}

impl RefractiveIndex {
    pub const VACUUM: RefractiveIndex = RefractiveIndex {
        delta: 0.0,
        beta: 0.0,
    };
}

/// Two-phase material description. Phase 1 (`psi = +1`) is the liquid,
/// phase 2 (`psi = -1`) the gas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialPair {
    pub rho1: f64,
    pub rho2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub n1: RefractiveIndex,
    pub n2: RefractiveIndex,
    #[serde(rename = "Re")]
    pub re: f64,
    #[serde(rename = "We")]
    pub we: f64,
}

fn mix(psi: f64, a: f64, b: f64) -> f64 {
    0.5 * ((1.0 + psi) * a + (1.0 - psi) * b)
}

impl MaterialPair {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("materials.rho1", self.rho1),
            ("materials.rho2", self.rho2),
            ("materials.mu1", self.mu1),
            ("materials.mu2", self.mu2),
            ("materials.Re", self.re),
            ("materials.We", self.we),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        let optical = [
            ("materials.n1.delta", self.n1.delta),
            ("materials.n1.beta", self.n1.beta),
            ("materials.n2.delta", self.n2.delta),
            ("materials.n2.beta", self.n2.beta),
        ];
        for (key, v) in optical {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn density(&self, psi: f64) -> f64 {
        mix(psi, self.rho1, self.rho2)
    }

    pub fn viscosity(&self, psi: f64) -> f64 {
        mix(psi, self.mu1, self.mu2)
    }

    pub fn refractive_index(&self, psi: f64) -> RefractiveIndex {
        RefractiveIndex {
            delta: mix(psi, self.n1.delta, self.n2.delta),
            beta: mix(psi, self.n1.beta, self.n2.beta),
        }
    }

    /// Properties rescaled by the liquid phase (`rho1 = mu1 = 1`), the form
    /// that enters the non-dimensional momentum equation.
    pub fn reduced(&self) -> MaterialPair {
        MaterialPair {
            rho1: 1.0,
            rho2: self.rho2 / self.rho1,
            mu1: 1.0,
            mu2: self.mu2 / self.mu1,
            ..*self
        }
    }
}

/// Scalar samples on a cell-centered grid, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl ScalarField3 {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "field of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("field value at index {i} is not finite")));
        }
        Ok(ScalarField3 { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        ScalarField3 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Samples `f` at every index triple.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for k in 0..shape[2] {
            for j in 0..shape[1] {
                for i in 0..shape[0] {
                    data.push(f([i, j, k]));
                }
            }
        }
        ScalarField3 { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.shape[1] + idx[1]) * self.shape[0] + idx[0]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 3]) -> f64 {
        self.data[self.index(idx)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// One time point of the two-phase flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub spec: Arc<DomainSpec>,
    /// Phase variable in `[-1, 1]`: +1 liquid, -1 gas.
    pub psi: ScalarField3,
    pub u: [ScalarField3; 3],
    pub p: ScalarField3,
    /// Physical time in seconds.
    pub t: f64,
}

impl FlowState {
    pub fn new(
        spec: Arc<DomainSpec>,
        psi: ScalarField3,
        u: [ScalarField3; 3],
        p: ScalarField3,
        t: f64,
    ) -> Result<Self> {
        let shape = spec.grid_shape;
        for (name, f) in [
            ("psi", &psi),
            ("u_x", &u[0]),
            ("u_y", &u[1]),
            ("u_z", &u[2]),
            ("p", &p),
        ] {
            if f.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, domain grid is {shape:?}",
                    f.shape()
                )));
            }
        }
        let mut psi = psi;
        for v in psi.data.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(FlowState { spec, psi, u, p, t })
    }

    /// Quiescent state filled with one phase.
    pub fn uniform(spec: Arc<DomainSpec>, psi: f64, t: f64) -> Self {
        let shape = spec.grid_shape;
        FlowState {
            spec,
            psi: ScalarField3::filled(shape, psi.clamp(-1.0, 1.0)),
            u: std::array::from_fn(|_| ScalarField3::zeros(shape)),
            p: ScalarField3::zeros(shape),
            t,
        }
    }

    pub(crate) fn from_parts_unchecked(
        spec: Arc<DomainSpec>,
        psi: Vec<f64>,
        u: [Vec<f64>; 3],
        p: Vec<f64>,
        t: f64,
    ) -> Self {
        let shape = spec.grid_shape;
        let [ux, uy, uz] = u;
        FlowState {
            spec,
            psi: ScalarField3 { shape, data: psi },
            u: [
                ScalarField3 { shape, data: ux },
                ScalarField3 { shape, data: uy },
                ScalarField3 { shape, data: uz },
            ],
            p: ScalarField3 { shape, data: p },
            t,
        }
    }

    /// Liquid volume `sum (1 + psi) / 2 dV` in cubic meters.
    pub fn liquid_volume(&self) -> f64 {
        let h = self.spec.spacing();
        let dv = h[0] * h[1] * h[2];
        self.psi.data.iter().map(|&p| 0.5 * (1.0 + p)).sum::<f64>() * dv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn spec() -> DomainSpec {
        DomainSpec {
            extent: [2e-4, 1e-4, 3e-4],
            time_span: [1e-6, 5e-6],
            grid_shape: [8, 4, 12],
            frame_count: 5,
        }
    }

    #[test]
    fn box_center_at_mid_time_maps_to_origin() {
        let s = spec();
        let (x, t) = s.normalize_point([0.0; 3], 3e-6).unwrap();
        assert_eq!(x, [0.0; 3]);
        assert!((t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn min_corner_at_start_maps_to_minus_one() {
        let s = spec();
        let (x, t) = s.normalize_point(s.box_min(), 1e-6).unwrap();
        assert_eq!(x, [-1.0; 3]);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn outside_point_is_rejected() {
        let s = spec();
        assert!(matches!(
            s.normalize_point([2e-4, 0.0, 0.0], 2e-6),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(s.normalize_point([0.0; 3], 6e-6).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let s = spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: [f64; 3] = std::array::from_fn(|a| (rng.gen::<f64>() - 0.5) * s.extent[a]);
            let t = s.time_span[0] + rng.gen::<f64>() * s.duration();
            let (xn, tn) = s.normalize_point(x, t).unwrap();
            let (xb, tb) = s.denormalize_point(xn, tn);
            for a in 0..3 {
                worst = worst.max((xb[a] - x[a]).abs());
            }
            worst = worst.max((tb - t).abs());
        }
        assert!(worst < 1e-12, "round trip error {worst}");
    }

    #[test]
    fn mixture_laws_hit_endpoints_and_are_affine() {
        let m = MaterialPair {
            rho1: 1000.0,
            rho2: 1.0,
            mu1: 1e-3,
            mu2: 1e-5,
            n1: RefractiveIndex { delta: 2.3e-6, beta: 5e-9 },
            n2: RefractiveIndex { delta: 3e-9, beta: 6e-12 },
            re: 200.0,
            we: 6.94,
        };
        assert_eq!(m.density(1.0), 1000.0);
        assert_eq!(m.density(-1.0), 1.0);
        assert_eq!(m.viscosity(1.0), 1e-3);
        assert_eq!(m.viscosity(-1.0), 1e-5);
        assert!((m.density(0.0) - 500.5).abs() < 1e-12);
        assert!((m.viscosity(0.0) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-18);
        assert_eq!(m.refractive_index(1.0), m.n1);
        assert_eq!(m.refractive_index(-1.0), m.n2);
        for i in 0..=20 {
            let psi = -1.0 + 0.1 * i as f64;
            let n = m.refractive_index(psi);
            assert!(n.delta >= 0.0 && n.beta >= 0.0);
        }
        let r = m.reduced();
        assert_eq!((r.rho1, r.mu1), (1.0, 1.0));
        assert!((r.rho2 - 1e-3).abs() < 1e-18);
        assert!((r.mu2 - 1e-2).abs() < 1e-16);
    }

    #[test]
    fn field_rejects_wrong_length_and_nan() {
        assert!(ScalarField3::new([4, 4, 4], vec![0.0; 63]).is_err());
        let mut v = vec![0.0; 64];
        v[5] = f64::NAN;
        assert!(ScalarField3::new([4, 4, 4], v).is_err());
    }

    #[test]
    fn flow_state_clamps_psi() {
        let s = Arc::new(DomainSpec {
            grid_shape: [4, 4, 4],
            ..spec()
        });
        let psi = ScalarField3::filled([4, 4, 4], 1.5);
        let st = FlowState::new(
            s,
            psi,
            std::array::from_fn(|_| ScalarField3::zeros([4, 4, 4])),
            ScalarField3::zeros([4, 4, 4]),
            0.0,
        )
        .unwrap();
        assert_eq!(st.psi.min_max(), (1.0, 1.0));
    }

    #[test]
    fn domain_validation_names_the_key() {
        let mut s = spec();
        s.grid_shape[1] = 3;
        match s.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "domain.grid_shape[1]"),
            other => panic!("unexpected {other:?}"),
        }
        let mut s = spec();
        s.frame_count = 1;
        assert!(s.validate().is_err());
    }
}
