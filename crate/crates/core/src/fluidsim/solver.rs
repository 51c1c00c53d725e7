use std::sync::Arc;

use super::grid::{Boundary, Grid};
use super::poisson::{project, ProjectionWorkspace};
use crate::config::{ReferenceScales, RunConfig};
use crate::domain::{DomainSpec, FlowState, MaterialPair, ScalarField3};
use crate::error::{Error, Result};

/// Sign of the capillary body force `SURFACE_FORCE_SIGN * eta * grad(psi) / We`
/// in the momentum balance. Shared with the PDE residual.
pub const SURFACE_FORCE_SIGN: f64 = 1.0;

/// Largest CFL number a step accepts.
pub const CFL_LIMIT: f64 = 0.5;

/// Non-dimensional solver parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub materials: MaterialPair,
    pub scales: ReferenceScales,
    pub droplet_radius: f64,
    pub droplet_centers: [[f64; 3]; 2],
    pub impact_speed: f64,
    /// Cahn-Hilliard interface width.
    pub epsilon: f64,
    /// Cahn-Hilliard mobility.
    pub mobility: f64,
    pub dt: f64,
    pub steps_per_frame: usize,
    pub boundary: [Boundary; 3],
    pub poisson_tolerance: f64,
    pub poisson_max_iterations: usize,
}

/// Non-dimensional cell size of `spec` under `scales`.
pub fn grid_spacing(spec: &DomainSpec, scales: &ReferenceScales) -> [f64; 3] {
    spec.spacing().map(|h| h / scales.length_m)
}

/// Default interface width: two grid spacings.
pub fn default_epsilon(spec: &DomainSpec, scales: &ReferenceScales) -> f64 {
    2.0 * grid_spacing(spec, scales)
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Interface width the config resolves to.
pub fn config_epsilon(cfg: &RunConfig) -> f64 {
    cfg.simulation
        .interface_width
        .unwrap_or_else(|| default_epsilon(&cfg.domain, &cfg.scales))
}

impl SimParams {
    /// Resolves defaults (interface width, mobility, time step) from a run
    /// configuration.
    pub fn from_config(cfg: &RunConfig) -> Result<SimParams> {
        let s = &cfg.simulation;
        let spec = &cfg.domain;
        let h = grid_spacing(spec, &cfg.scales);
        let epsilon = config_epsilon(cfg);
        let mobility = s
            .mobility
            .unwrap_or_else(|| (s.impact_speed.max(1e-3)) * epsilon);
        let centers = s.droplet_centers.unwrap_or_else(|| {
            let off = s.droplet_radius + 0.5 * s.droplet_gap;
            [[-off, 0.0, 0.0], [off, 0.0, 0.0]]
        });
        let frame_dt = spec.frame_interval() / cfg.scales.time_s();
        let (dt, steps_per_frame) = match (s.dt, s.steps_per_frame) {
            (_, Some(n)) => {
                let dt = frame_dt / n as f64;
                if let Some(given) = s.dt {
                    if ((given - dt) / dt).abs() > 1e-9 {
                        return Err(Error::config(
                            "simulation.dt",
                            format!("dt * steps_per_frame must equal the frame interval {frame_dt}"),
                        ));
                    }
                }
                (dt, n)
            }
            (Some(dt), None) => {
                let n = (frame_dt / dt).round().max(1.0);
                if ((n * dt - frame_dt) / frame_dt).abs() > 1e-9 {
                    return Err(Error::config(
                        "simulation.dt",
                        format!("must divide the frame interval {frame_dt}"),
                    ));
                }
                (dt, n as usize)
            }
            (None, None) => {
                let limit = stable_dt(&cfg.materials, &h, s.impact_speed, s.cfl_target);
                let n = (frame_dt / limit).ceil().max(1.0) as usize;
                (frame_dt / n as f64, n)
            }
        };
        let p = SimParams {
            materials: cfg.materials,
            scales: cfg.scales,
            droplet_radius: s.droplet_radius,
            droplet_centers: centers,
            impact_speed: s.impact_speed,
            epsilon,
            mobility,
            dt,
            steps_per_frame,
            boundary: [Boundary::Wall; 3],
            poisson_tolerance: s.poisson_tolerance,
            poisson_max_iterations: s.poisson_max_iterations,
        };
        p.validate(spec)?;
        Ok(p)
    }

    pub fn validate(&self, spec: &DomainSpec) -> Result<()> {
        self.materials.validate()?;
        let h = grid_spacing(spec, &self.scales);
        let h_max = h.iter().copied().fold(0.0, f64::max);
        if !(self.epsilon > 0.0 && self.epsilon >= 1.5 * h_max * (1.0 - 1e-12)) {
            return Err(Error::config(
                "simulation.interface_width",
                format!(
                    "must be at least 1.5 grid spacings ({}), got {}",
                    1.5 * h_max,
                    self.epsilon
                ),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("simulation.dt", "must be positive"));
        }
        if !(self.mobility > 0.0 && self.mobility.is_finite()) {
            return Err(Error::config("simulation.mobility", "must be positive"));
        }
        if self.steps_per_frame == 0 {
            return Err(Error::config("simulation.steps_per_frame", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self, spec: &DomainSpec) -> Grid {
        Grid::new(spec.grid_shape, grid_spacing(spec, &self.scales), self.boundary)
    }

    /// Physical seconds per non-dimensional time unit.
    pub fn time_scale(&self) -> f64 {
        self.scales.time_s()
    }
}

/// Explicit stability limit from advection, viscous diffusion and
/// capillary waves.
pub fn stable_dt(materials: &MaterialPair, h: &[f64; 3], speed: f64, cfl: f64) -> f64 {
    let m = materials.reduced();
    let h_min = h.iter().copied().fold(f64::INFINITY, f64::min);
    let nu_max = [1.0f64, -1.0]
        .iter()
        .map(|&psi| m.viscosity(psi) / (m.density(psi) * m.re))
        .fold(0.0, f64::max);
    let inv_h2: f64 = h.iter().map(|h| 1.0 / (h * h)).sum();
    let mut dt = 0.45 / (nu_max * inv_h2);
    if speed > 0.0 {
        dt = dt.min(cfl * h_min / speed);
    }
    let capillary = (0.5 * (m.rho1 + m.rho2) * m.we * h_min.powi(3) / (4.0 * std::f64::consts::PI)).sqrt();
    dt.min(capillary)
}

/// Cahn-Hilliard chemical potential `psi^3 - psi - eps^2 lap(psi)` with
/// Neumann walls (or periodic axes per `grid`).
pub fn chemical_potential(psi: &ScalarField3, epsilon: f64, grid: &Grid) -> Result<ScalarField3> {
    if psi.shape() != grid.n {
        return Err(Error::Shape(format!(
            "field {:?} vs grid {:?}",
            psi.shape(),
            grid.n
        )));
    }
    let mut out = vec![0.0; grid.len()];
    chemical_potential_into(psi.data(), epsilon, grid, &mut out);
    ScalarField3::new(grid.n, out)
}

fn chemical_potential_into(psi: &[f64], epsilon: f64, grid: &Grid, out: &mut [f64]) {
    grid.laplacian_scalar(psi, out);
    let e2 = epsilon * epsilon;
    for (o, &p) in out.iter_mut().zip(psi) {
        let p = p.clamp(-1.0, 1.0);
        *o = p * p * p - p - e2 * *o;
    }
}

/// Two head-on droplets: `tanh` profiles max-combined, each moving towards
/// the other along the line of centers.
pub fn init_binary_droplets(params: &SimParams, spec: Arc<DomainSpec>) -> Result<FlowState> {
    params.validate(&spec)?;
    let [c1, c2] = params.droplet_centers;
    let r = params.droplet_radius;
    let sep = ((0..3).map(|a| (c2[a] - c1[a]).powi(2)).sum::<f64>()).sqrt();
    if sep < 2.0 * r {
        return Err(Error::Geometry(format!(
            "droplets overlap: center distance {sep} < {}",
            2.0 * r
        )));
    }
    let half = spec.extent.map(|e| 0.5 * e / params.scales.length_m);
    for c in [c1, c2] {
        for a in 0..3 {
            if c[a].abs() + r >= half[a] {
                return Err(Error::Geometry(format!(
                    "droplet at {c:?} with radius {r} does not fit inside the domain half-extent {half:?}"
                )));
            }
        }
    }
    let dir: [f64; 3] = std::array::from_fn(|a| (c2[a] - c1[a]) / sep);
    let w = std::f64::consts::SQRT_2 * params.epsilon;
    let shape = spec.grid_shape;
    let n = spec.cell_count();
    let mut psi = Vec::with_capacity(n);
    let mut u: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    let grid = params.grid(&spec);
    grid.for_each_cell(|_, idx| {
        let x = spec.cell_center(idx).map(|v| v / params.scales.length_m);
        let profile = |c: [f64; 3]| {
            let d = ((0..3).map(|a| (x[a] - c[a]).powi(2)).sum::<f64>()).sqrt();
            ((r - d) / w).tanh()
        };
        let p1 = profile(c1);
        let p2 = profile(c2);
        psi.push(p1.max(p2));
        let speed = params.impact_speed * 0.5 * ((1.0 + p1) - (1.0 + p2));
        for a in 0..3 {
            u[a].push(speed * dir[a]);
        }
    });
    let [ux, uy, uz] = u;
    let t0 = spec.time_span[0];
    FlowState::new(
        spec,
        ScalarField3::new(shape, psi)?,
        [
            ScalarField3::new(shape, ux)?,
            ScalarField3::new(shape, uy)?,
            ScalarField3::new(shape, uz)?,
        ],
        ScalarField3::zeros(shape),
        t0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub cfl: f64,
    pub poisson_iterations: usize,
    pub max_divergence: f64,
    pub ch_substeps: usize,
}

/// Fractional-step two-phase solver that owns its scratch buffers.
pub struct Solver {
    params: SimParams,
    grid: Grid,
    ch_substeps: usize,
    ws: ProjectionWorkspace,
    phi: Vec<f64>,
    tmp: Vec<f64>,
    eta: Vec<f64>,
    lap: Vec<f64>,
    inv_rho: Vec<f64>,
}

impl Solver {
    pub fn new(params: SimParams, spec: &DomainSpec) -> Result<Solver> {
        params.validate(spec)?;
        let grid = params.grid(spec);
        let lam = grid.laplacian_bound();
        let e2 = params.epsilon * params.epsilon;
        let dt_ch = 0.5 * 2.0 / (params.mobility * lam * (2.0 + e2 * lam));
        let ch_substeps = (params.dt / dt_ch).ceil().max(1.0) as usize;
        let n = grid.len();
        Ok(Solver {
            params,
            grid,
            ch_substeps,
            ws: ProjectionWorkspace::default(),
            phi: vec![0.0; n],
            tmp: vec![0.0; n],
            eta: vec![0.0; n],
            lap: vec![0.0; n],
            inv_rho: vec![0.0; n],
        })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Advances `state` by one time step.
    pub fn step(&mut self, state: &FlowState) -> Result<(FlowState, StepStats)> {
        if state.spec.grid_shape != self.grid.n {
            return Err(Error::Shape("state grid differs from solver grid".into()));
        }
        let dt = self.params.dt;
        let grid = &self.grid;
        let n = grid.len();
        let u_old: [&[f64]; 3] = [state.u[0].data(), state.u[1].data(), state.u[2].data()];

        let mut speed: f64 = 0.0;
        for i in 0..n {
            let s = (u_old[0][i].powi(2) + u_old[1][i].powi(2) + u_old[2][i].powi(2)).sqrt();
            speed = speed.max(s);
        }
        let cfl = speed * dt / grid.h_min();
        if cfl > CFL_LIMIT || !cfl.is_finite() {
            return Err(Error::StepSize { cfl, limit: CFL_LIMIT });
        }

        // (i) phase transport and Cahn-Hilliard relaxation
        let mut psi = vec![0.0; n];
        grid.advect_conservative(state.psi.data(), u_old, dt, &mut psi);
        let dts = dt / self.ch_substeps as f64;
        let m = self.params.mobility;
        for _ in 0..self.ch_substeps {
            chemical_potential_into(&psi, self.params.epsilon, grid, &mut self.eta);
            grid.laplacian_scalar(&self.eta, &mut self.lap);
            for (p, l) in psi.iter_mut().zip(&self.lap) {
                *p += dts * m * l;
            }
        }
        for p in psi.iter_mut() {
            *p = p.clamp(-1.0, 1.0);
        }
        chemical_potential_into(&psi, self.params.epsilon, grid, &mut self.eta);

        // (ii) momentum: semi-Lagrangian convection, viscosity, capillary force
        let mat = self.params.materials.reduced();
        let mut u_new: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        let inv_h = grid.h.map(|h| 1.0 / h);
        grid.for_each_cell(|cell, [i, j, k]| {
            let x0 = [i as f64, j as f64, k as f64];
            let v0 = [u_old[0][cell], u_old[1][cell], u_old[2][cell]];
            let mid: [f64; 3] = std::array::from_fn(|a| x0[a] - 0.5 * dt * v0[a] * inv_h[a]);
            let vm: [f64; 3] = std::array::from_fn(|a| grid.interpolate(u_old[a], mid));
            let dep: [f64; 3] = std::array::from_fn(|a| x0[a] - dt * vm[a] * inv_h[a]);
            for a in 0..3 {
                u_new[a][cell] = grid.interpolate_cubic(u_old[a], dep);
            }
        });
        for (cell, r) in self.inv_rho.iter_mut().enumerate() {
            *r = 1.0 / mat.density(psi[cell]);
        }
        let force_scale = SURFACE_FORCE_SIGN / mat.we;
        for a in 0..3 {
            grid.laplacian_velocity(&u_new[a], &mut self.lap);
            grid.gradient_scalar(a, &psi, &mut self.tmp);
            for cell in 0..n {
                let visc = mat.viscosity(psi[cell]) / mat.re * self.lap[cell];
                let cap = force_scale * self.eta[cell] * self.tmp[cell];
                u_new[a][cell] += dt * (visc + cap) * self.inv_rho[cell];
            }
        }

        // (iii) projection
        for (phi, p) in self.phi.iter_mut().zip(state.p.data()) {
            *phi = p * dt;
        }
        let stats = project(
            grid,
            &self.inv_rho,
            &mut u_new,
            &mut self.phi,
            self.params.poisson_tolerance,
            self.params.poisson_max_iterations,
            &mut self.ws,
        )?;
        let p: Vec<f64> = self.phi.iter().map(|v| v / dt).collect();
        let t = state.t + dt * self.params.time_scale();
        let next = FlowState::from_parts_unchecked(state.spec.clone(), psi, u_new, p, t);
        Ok((
            next,
            StepStats {
                cfl,
                poisson_iterations: stats.iterations,
                max_divergence: stats.max_divergence,
                ch_substeps: self.ch_substeps,
            },
        ))
    }
}

/// One time step of the two-phase system.
pub fn step(state: &FlowState, params: &SimParams) -> Result<FlowState> {
    let mut solver = Solver::new(params.clone(), &state.spec)?;
    solver.step(state).map(|(s, _)| s)
}
