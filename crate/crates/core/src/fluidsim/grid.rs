//! Cell-centered stencil operators with wall or periodic boundaries.
//!
//! Walls act as homogeneous Neumann boundaries for scalars (ghost copies
//! the boundary cell) and as no-slip boundaries for velocity (ghost negates
//! it). With these ghosts the central divergence is exactly the negative
//! transpose of the central gradient.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Wall,
    Periodic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n: [usize; 3],
    /// Non-dimensional cell size.
    pub h: [f64; 3],
    pub bc: [Boundary; 3],
    stride: [usize; 3],
}

/// Neighbor lookup result: flat index and whether it is a wall ghost.
#[derive(Debug, Clone, Copy)]
struct Nb {
    idx: usize,
    ghost: bool,
}

impl Grid {
    pub fn new(n: [usize; 3], h: [f64; 3], bc: [Boundary; 3]) -> Grid {
        Grid {
            n,
            h,
            bc,
            stride: [1, n[0], n[0] * n[1]],
        }
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h_min(&self) -> f64 {
        self.h.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn h_max(&self) -> f64 {
        self.h.iter().copied().fold(0.0, f64::max)
    }

    /// Largest eigenvalue of the negative discrete Laplacian.
    pub fn laplacian_bound(&self) -> f64 {
        self.h.iter().map(|h| 4.0 / (h * h)).sum()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    #[inline]
    fn up(&self, a: usize, c: usize, cell: usize) -> Nb {
        let (n, s) = (self.n[a], self.stride[a]);
        if c + 1 < n {
            Nb { idx: cell + s, ghost: false }
        } else {
            match self.bc[a] {
                Boundary::Periodic => Nb { idx: cell - (n - 1) * s, ghost: false },
                Boundary::Wall => Nb { idx: cell, ghost: true },
            }
        }
    }

    #[inline]
    fn down(&self, a: usize, c: usize, cell: usize) -> Nb {
        let (n, s) = (self.n[a], self.stride[a]);
        if c > 0 {
            Nb { idx: cell - s, ghost: false }
        } else {
            match self.bc[a] {
                Boundary::Periodic => Nb { idx: cell + (n - 1) * s, ghost: false },
                Boundary::Wall => Nb { idx: cell, ghost: true },
            }
        }
    }

    /// Calls `f(cell, [i, j, k])` for every cell in storage order.
    #[inline]
    pub fn for_each_cell(&self, mut f: impl FnMut(usize, [usize; 3])) {
        let mut cell = 0;
        for k in 0..self.n[2] {
            for j in 0..self.n[1] {
                for i in 0..self.n[0] {
                    f(cell, [i, j, k]);
                    cell += 1;
                }
            }
        }
    }

    /// Compact Laplacian of a scalar with Neumann walls.
    pub fn laplacian_scalar(&self, s: &[f64], out: &mut [f64]) {
        self.laplacian(s, out, 1.0)
    }

    /// Compact Laplacian of a velocity component with no-slip walls.
    pub fn laplacian_velocity(&self, s: &[f64], out: &mut [f64]) {
        self.laplacian(s, out, -1.0)
    }

    fn laplacian(&self, s: &[f64], out: &mut [f64], ghost_sign: f64) {
        let inv_h2 = self.h.map(|h| 1.0 / (h * h));
        self.for_each_cell(|cell, c| {
            let center = s[cell];
            let mut acc = 0.0;
            for a in 0..3 {
                let up = self.up(a, c[a], cell);
                let dn = self.down(a, c[a], cell);
                let su = if up.ghost { ghost_sign * center } else { s[up.idx] };
                let sd = if dn.ghost { ghost_sign * center } else { s[dn.idx] };
                acc += (su - 2.0 * center + sd) * inv_h2[a];
            }
            out[cell] = acc;
        });
    }

    /// Central gradient component along `a` of a scalar with Neumann walls.
    pub fn gradient_scalar(&self, a: usize, s: &[f64], out: &mut [f64]) {
        let f = 0.5 / self.h[a];
        self.for_each_cell(|cell, c| {
            let up = self.up(a, c[a], cell);
            let dn = self.down(a, c[a], cell);
            out[cell] = (s[up.idx] - s[dn.idx]) * f;
        });
    }

    /// Central derivative along `a` of a velocity-like field (ghosts negated),
    /// accumulated into `out`.
    pub fn add_derivative_velocity(&self, a: usize, v: &[f64], out: &mut [f64]) {
        let f = 0.5 / self.h[a];
        self.for_each_cell(|cell, c| {
            let up = self.up(a, c[a], cell);
            let dn = self.down(a, c[a], cell);
            let vu = if up.ghost { -v[cell] } else { v[up.idx] };
            let vd = if dn.ghost { -v[cell] } else { v[dn.idx] };
            out[cell] += (vu - vd) * f;
        });
    }

    /// Central divergence of a cell-centered velocity with no-slip walls.
    pub fn divergence(&self, u: [&[f64]; 3], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (a, comp) in u.iter().enumerate() {
            self.add_derivative_velocity(a, comp, out);
        }
    }

    /// Conservative first-order upwind transport `s -= dt * div(u s)` with
    /// face velocities averaged from the adjacent cells. Wall faces carry no
    /// flux.
    pub fn advect_conservative(&self, s: &[f64], u: [&[f64]; 3], dt: f64, out: &mut [f64]) {
        out.copy_from_slice(s);
        for (a, ua) in u.iter().enumerate() {
            let f = dt / self.h[a];
            self.for_each_cell(|cell, c| {
                let up = self.up(a, c[a], cell);
                if up.ghost {
                    return;
                }
                let face_u = 0.5 * (ua[cell] + ua[up.idx]);
                let flux = if face_u > 0.0 {
                    face_u * s[cell]
                } else {
                    face_u * s[up.idx]
                } * f;
                out[cell] -= flux;
                out[up.idx] += flux;
            });
        }
    }

    /// Diagonal of `G^T diag(r) G` where `G` is the central gradient with
    /// Neumann walls.
    pub fn projection_diagonal(&self, r: &[f64], out: &mut [f64]) {
        let f = self.h.map(|h| 0.25 / (h * h));
        self.for_each_cell(|cell, c| {
            let mut acc = 0.0;
            for a in 0..3 {
                let up = self.up(a, c[a], cell);
                let dn = self.down(a, c[a], cell);
                acc += (r[up.idx] + r[dn.idx]) * f[a];
            }
            out[cell] = acc;
        });
    }

    /// Trilinear interpolation at a point given in index coordinates
    /// (cell `i` center at `i`). Wall axes clamp, periodic axes wrap.
    pub fn interpolate(&self, s: &[f64], x: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut w = [0.0f64; 3];
        for a in 0..3 {
            let n = self.n[a];
            match self.bc[a] {
                Boundary::Wall => {
                    let xa = x[a].clamp(0.0, (n - 1) as f64);
                    let i0 = (xa.floor() as usize).min(n - 1);
                    lo[a] = i0;
                    hi[a] = (i0 + 1).min(n - 1);
                    w[a] = xa - i0 as f64;
                }
                Boundary::Periodic => {
                    let xa = x[a].rem_euclid(n as f64);
                    let i0 = (xa.floor() as usize).min(n - 1);
                    lo[a] = i0;
                    hi[a] = (i0 + 1) % n;
                    w[a] = xa - i0 as f64;
                }
            }
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let mut weight = 1.0;
            let mut id = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    weight *= w[a];
                    id[a] = hi[a];
                } else {
                    weight *= 1.0 - w[a];
                    id[a] = lo[a];
                }
            }
            if weight != 0.0 {
                acc += weight * s[self.idx(id[0], id[1], id[2])];
            }
        }
        acc
    }

    /// Catmull-Rom interpolation clamped to the range of the eight
    /// surrounding samples, so it never creates new extrema.
    pub fn interpolate_cubic(&self, s: &[f64], x: [f64; 3]) -> f64 {
        let mut ids = [[0usize; 4]; 3];
        let mut wts = [[0.0f64; 4]; 3];
        for a in 0..3 {
            let n = self.n[a] as isize;
            let (xa, wrap) = match self.bc[a] {
                Boundary::Wall => (x[a].clamp(0.0, (n - 1) as f64), false),
                Boundary::Periodic => (x[a].rem_euclid(n as f64), true),
            };
            let i0 = (xa.floor() as isize).min(n - 1);
            let f = xa - i0 as f64;
            for k in 0..4 {
                let i = i0 + k as isize - 1;
                ids[a][k] = if wrap { i.rem_euclid(n) } else { i.clamp(0, n - 1) } as usize;
            }
            let (f2, f3) = (f * f, f * f * f);
            wts[a] = [
                -0.5 * f3 + f2 - 0.5 * f,
                1.5 * f3 - 2.5 * f2 + 1.0,
                -1.5 * f3 + 2.0 * f2 + 0.5 * f,
                0.5 * f3 - 0.5 * f2,
            ];
        }
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..4 {
            for j in 0..4 {
                let wjk = wts[1][j] * wts[2][k];
                for i in 0..4 {
                    let v = s[self.idx(ids[0][i], ids[1][j], ids[2][k])];
                    acc += wts[0][i] * wjk * v;
                    if (1..3).contains(&i) && (1..3).contains(&j) && (1..3).contains(&k) {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
        }
        acc.clamp(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic(n: usize) -> Grid {
        let h = 2.0 * std::f64::consts::PI / n as f64;
        Grid::new([n, n, 4], [h, h, h], [Boundary::Periodic; 3])
    }

    #[test]
    fn divergence_is_negative_transpose_of_gradient() {
        let g = Grid::new([5, 4, 6], [0.3, 0.5, 0.7], [Boundary::Wall, Boundary::Periodic, Boundary::Wall]);
        let n = g.len();
        // <D u, p> = -<u, G p> for arbitrary u, p.
        let p: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let u: Vec<Vec<f64>> = (0..3)
            .map(|a| (0..n).map(|i| ((i * (a + 3) % 7) as f64).cos()).collect())
            .collect();
        let mut div = vec![0.0; n];
        g.divergence([&u[0], &u[1], &u[2]], &mut div);
        let lhs: f64 = div.iter().zip(&p).map(|(a, b)| a * b).sum();
        let mut rhs = 0.0;
        let mut grad = vec![0.0; n];
        for a in 0..3 {
            g.gradient_scalar(a, &p, &mut grad);
            rhs -= grad.iter().zip(&u[a]).map(|(a, b)| a * b).sum::<f64>();
        }
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn projection_diagonal_matches_operator() {
        let g = Grid::new([5, 4, 6], [0.3, 0.5, 0.7], [Boundary::Wall, Boundary::Periodic, Boundary::Wall]);
        let n = g.len();
        let r: Vec<f64> = (0..n).map(|i| 1.0 + (i % 5) as f64).collect();
        let mut diag = vec![0.0; n];
        g.projection_diagonal(&r, &mut diag);
        let mut e = vec![0.0; n];
        let mut grads = vec![vec![0.0; n]; 3];
        let mut out = vec![0.0; n];
        for cell in [0, 7, 33, n - 1] {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[cell] = 1.0;
            for a in 0..3 {
                g.gradient_scalar(a, &e, &mut grads[a]);
                for (gv, rv) in grads[a].iter_mut().zip(&r) {
                    *gv *= rv;
                }
            }
            g.divergence([&grads[0], &grads[1], &grads[2]], &mut out);
            assert!((-out[cell] - diag[cell]).abs() < 1e-12);
        }
    }

    #[test]
    fn upwind_transport_conserves_the_sum() {
        let g = Grid::new([6, 5, 4], [0.2; 3], [Boundary::Wall; 3]);
        let n = g.len();
        let s: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let u: Vec<Vec<f64>> = (0..3)
            .map(|a| (0..n).map(|i| ((i + a) as f64 * 0.91).cos()).collect())
            .collect();
        let mut out = vec![0.0; n];
        g.advect_conservative(&s, [&u[0], &u[1], &u[2]], 0.01, &mut out);
        let before: f64 = s.iter().sum();
        let after: f64 = out.iter().sum();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_wraps() {
        let g = periodic(8);
        let n = g.len();
        let s: Vec<f64> = (0..n).map(|i| i as f64).collect();
        assert_eq!(g.interpolate(&s, [3.0, 2.0, 1.0]), s[g.idx(3, 2, 1)]);
        let wrapped = g.interpolate(&s, [8.0, 2.0, 1.0]);
        assert!((wrapped - s[g.idx(0, 2, 1)]).abs() < 1e-12);
        assert_eq!(g.interpolate_cubic(&s, [3.0, 2.0, 1.0]), s[g.idx(3, 2, 1)]);
    }

    #[test]
    fn cubic_interpolation_is_exact_for_quadratics_and_bounded() {
        let g = Grid::new([8, 8, 8], [1.0; 3], [Boundary::Wall; 3]);
        let n = g.len();
        let mut s = vec![0.0; n];
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    s[g.idx(i, j, k)] = 0.1 * (i * i) as f64 + j as f64;
                }
            }
        }
        let v = g.interpolate_cubic(&s, [3.5, 2.25, 4.0]);
        assert!((v - (0.1 * 3.5 * 3.5 + 2.25)).abs() < 1e-12);
        let mut step = vec![0.0; n];
        for k in 0..8 {
            for j in 0..8 {
                for i in 4..8 {
                    step[g.idx(i, j, k)] = 1.0;
                }
            }
        }
        for f in [3.1, 3.5, 3.9, 4.2] {
            let v = g.interpolate_cubic(&step, [f, 3.0, 3.0]);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
