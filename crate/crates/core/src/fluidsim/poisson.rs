//! Variable-coefficient pressure projection solved by Jacobi-preconditioned
//! conjugate gradients.

use super::grid::Grid;
use crate::error::{Error, Result};

/// Scratch buffers reused across solves.
#[derive(Debug, Default)]
pub struct ProjectionWorkspace {
    r: Vec<f64>,
    z: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    diag: Vec<f64>,
    grads: [Vec<f64>; 3],
    rhs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionStats {
    pub iterations: usize,
    /// Max-norm of the discrete divergence after the correction.
    pub max_divergence: f64,
}

impl ProjectionWorkspace {
    fn ensure(&mut self, n: usize) {
        for v in [
            &mut self.r,
            &mut self.z,
            &mut self.d,
            &mut self.q,
            &mut self.diag,
            &mut self.rhs,
        ] {
            v.resize(n, 0.0);
        }
        for g in self.grads.iter_mut() {
            g.resize(n, 0.0);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `out = G^T diag(r) G x`, the positive semi-definite projection operator.
fn apply(grid: &Grid, inv_rho: &[f64], x: &[f64], grads: &mut [Vec<f64>; 3], out: &mut [f64]) {
    for (a, g) in grads.iter_mut().enumerate() {
        grid.gradient_scalar(a, x, g);
        for (gv, r) in g.iter_mut().zip(inv_rho) {
            *gv *= r;
        }
    }
    grid.divergence([&grads[0], &grads[1], &grads[2]], out);
    for v in out.iter_mut() {
        *v = -*v;
    }
}

/// Makes `u` discretely divergence-free: solves `G^T R G phi = -D u` with
/// `R = 1 / rho` and applies `u -= R G phi`. `phi` is the pressure times the
/// time step and doubles as the warm start.
pub fn project(
    grid: &Grid,
    inv_rho: &[f64],
    u: &mut [Vec<f64>; 3],
    phi: &mut [f64],
    tolerance: f64,
    max_iterations: usize,
    ws: &mut ProjectionWorkspace,
) -> Result<ProjectionStats> {
    let n = grid.len();
    ws.ensure(n);
    grid.divergence([&u[0], &u[1], &u[2]], &mut ws.rhs);
    for v in ws.rhs.iter_mut() {
        *v = -*v;
    }
    grid.projection_diagonal(inv_rho, &mut ws.diag);

    let mut iterations = 0;
    // Outer loop re-derives the true residual to guard against recurrence drift.
    loop {
        apply(grid, inv_rho, phi, &mut ws.grads, &mut ws.q);
        for i in 0..n {
            ws.r[i] = ws.rhs[i] - ws.q[i];
        }
        let res = max_abs(&ws.r);
        if res <= tolerance {
            break;
        }
        if iterations >= max_iterations {
            return Err(Error::SolverDiverged {
                iterations,
                residual: res,
            });
        }
        for i in 0..n {
            ws.z[i] = ws.r[i] / ws.diag[i];
        }
        ws.d.copy_from_slice(&ws.z);
        let mut rz = dot(&ws.r, &ws.z);
        let mut converged = false;
        while iterations < max_iterations {
            iterations += 1;
            apply(grid, inv_rho, &ws.d, &mut ws.grads, &mut ws.q);
            let dq = dot(&ws.d, &ws.q);
            if dq <= 0.0 {
                break;
            }
            let alpha = rz / dq;
            for i in 0..n {
                phi[i] += alpha * ws.d[i];
                ws.r[i] -= alpha * ws.q[i];
            }
            if max_abs(&ws.r) <= 0.5 * tolerance {
                converged = true;
                break;
            }
            for i in 0..n {
                ws.z[i] = ws.r[i] / ws.diag[i];
            }
            let rz_new = dot(&ws.r, &ws.z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                ws.d[i] = ws.z[i] + beta * ws.d[i];
            }
        }
        if !converged && iterations >= max_iterations {
            apply(grid, inv_rho, phi, &mut ws.grads, &mut ws.q);
            let res = (0..n).fold(0.0f64, |m, i| m.max((ws.rhs[i] - ws.q[i]).abs()));
            if res > tolerance {
                return Err(Error::SolverDiverged {
                    iterations,
                    residual: res,
                });
            }
            break;
        }
    }

    for a in 0..3 {
        grid.gradient_scalar(a, phi, &mut ws.grads[a]);
        for ((uv, gv), r) in u[a].iter_mut().zip(&ws.grads[a]).zip(inv_rho) {
            *uv -= r * gv;
        }
    }
    grid.divergence([&u[0], &u[1], &u[2]], &mut ws.q);
    Ok(ProjectionStats {
        iterations,
        max_divergence: max_abs(&ws.q),
    })
}
