use super::model::{FieldModel, OUTPUTS};
use crate::error::{Error, Result};

/// Points per finite-difference stencil: the center plus `+-h` along
/// x, y, z and t.
pub const STENCIL: usize = 9;

/// A field over normalized spacetime with the network's output layout.
pub trait SpacetimeField {
    fn eval_point(&self, p: [f64; 4]) -> [f64; OUTPUTS];
}

impl SpacetimeField for FieldModel {
    fn eval_point(&self, p: [f64; 4]) -> [f64; OUTPUTS] {
        self.eval(p)
    }
}

/// First derivatives and spatial Laplacians of every output, in normalized
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivatives {
    pub value: [f64; OUTPUTS],
    /// `grad[o][a]` is `d output_o / d x_a`.
    pub grad: [[f64; 3]; OUTPUTS],
    pub dt: [f64; OUTPUTS],
    pub lap: [f64; OUTPUTS],
}

/// Stencil layout: index 0 is the center, `1 + 2a` is `+h` along axis `a`
/// and `2 + 2a` is `-h` (axis 3 is time).
pub fn stencil_points(x: [f64; 3], t: f64, h: f64) -> [[f64; 4]; STENCIL] {
    let c = [x[0], x[1], x[2], t];
    let mut out = [c; STENCIL];
    for a in 0..4 {
        out[1 + 2 * a][a] += h;
        out[2 + 2 * a][a] -= h;
    }
    out
}

pub fn derivatives_from_stencil(v: &[[f64; OUTPUTS]; STENCIL], h: f64) -> Derivatives {
    let mut d = Derivatives {
        value: v[0],
        grad: [[0.0; 3]; OUTPUTS],
        dt: [0.0; OUTPUTS],
        lap: [0.0; OUTPUTS],
    };
    let inv2h = 0.5 / h;
    let invh2 = 1.0 / (h * h);
    for o in 0..OUTPUTS {
        for a in 0..3 {
            d.grad[o][a] = (v[1 + 2 * a][o] - v[2 + 2 * a][o]) * inv2h;
            d.lap[o] += (v[1 + 2 * a][o] - 2.0 * v[0][o] + v[2 + 2 * a][o]) * invh2;
        }
        d.dt[o] = (v[7][o] - v[8][o]) * inv2h;
    }
    d
}

/// Central-difference derivatives of `field` at `(x, t)` with step `h`.
pub fn spacetime_derivatives<F: SpacetimeField + ?Sized>(field: &F, x: [f64; 3], t: f64, h: f64) -> Result<Derivatives> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {h}")));
    }
    let pts = stencil_points(x, t, h);
    let vals = pts.map(|p| field.eval_point(p));
    Ok(derivatives_from_stencil(&vals, h))
}
