//! Volume metrics against ground truth: MSE, DSSIM and FSC resolution, and
//! the per-movie evaluation report.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainSpec, ScalarField3};
use crate::error::{Error, Result};
use crate::fluidsim::Movie4D;
use crate::neuralfield::FieldModel;

fn same_shape(a: &ScalarField3, b: &ScalarField3) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn squared_error_sum(a: &ScalarField3, b: &ScalarField3) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn volume_mse(a: &ScalarField3, b: &ScalarField3) -> Result<f64> {
    same_shape(a, b)?;
    Ok(squared_error_sum(a, b) / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicRange {
    Fixed(f64),
    /// `max - min` of the ground-truth volume.
    FromTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: DynamicRange,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: DynamicRange::Fixed(2.0),
        }
    }
}

/// Sums over every `w`-long window along `axis`, valid positions only.
fn box_sum(v: &[f64], shape: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = shape[axis] + 1 - w;
    let [nx, ny, _] = shape;
    let [ox, oy, oz] = out_shape;
    let stride = [1, nx, nx * ny][axis];
    let mut out = vec![0.0; ox * oy * oz];
    for k in 0..oz {
        for j in 0..oy {
            for i in 0..ox {
                let base = (k * ny + j) * nx + i;
                let mut acc = 0.0;
                for s in 0..w {
                    acc += v[base + s * stride];
                }
                out[(k * oy + j) * ox + i] = acc;
            }
        }
    }
    (out, out_shape)
}

fn window_means(v: &[f64], shape: [usize; 3], w: usize) -> Vec<f64> {
    let (a, s) = box_sum(v, shape, 0, w);
    let (b, s) = box_sum(&a, s, 1, w);
    let (c, _) = box_sum(&b, s, 2, w);
    let inv = 1.0 / (w * w * w) as f64;
    c.into_iter().map(|x| x * inv).collect()
}

/// SSIM of every window position.
fn ssim_map(a: &ScalarField3, b: &ScalarField3, params: &SsimParams) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let w = params.window;
    let shape = a.shape();
    if w == 0 || shape.iter().any(|&n| n < w) {
        return Err(Error::Shape(format!("volume {shape:?} is smaller than the {w}^3 window")));
    }
    let range = match params.dynamic_range {
        DynamicRange::Fixed(r) => r,
        DynamicRange::FromTruth => {
            let (lo, hi) = b.min_max();
            hi - lo
        }
    };
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Degenerate(format!("dynamic range must be positive, got {range}")));
    }
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect::<Vec<f64>>();
    let ma = window_means(x, shape, w);
    let mb = window_means(y, shape, w);
    let maa = window_means(&prod(&|p, _| p * p), shape, w);
    let mbb = window_means(&prod(&|_, q| q * q), shape, w);
    let mab = window_means(&prod(&|p, q| p * q), shape, w);
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    Ok((0..ma.len())
        .map(|i| {
            let (ua, ub) = (ma[i], mb[i]);
            let va = maa[i] - ua * ua;
            let vb = mbb[i] - ub * ub;
            let cov = mab[i] - ua * ub;
            ((2.0 * ua * ub + c1) * (2.0 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2))
        })
        .collect())
}

/// `(1 - mean SSIM) / 2`, with `b` as the ground truth.
pub fn volume_dssim_with(a: &ScalarField3, b: &ScalarField3, params: &SsimParams) -> Result<f64> {
    let m = ssim_map(a, b, params)?;
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    Ok(((1.0 - mean) / 2.0).max(0.0))
}

pub fn volume_dssim(a: &ScalarField3, b: &ScalarField3) -> Result<f64> {
    volume_dssim_with(a, b, &SsimParams::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    /// Shell radius in cycles per box edge, `0..=side/2`.
    pub radius: Vec<usize>,
    pub fsc: Vec<f64>,
    pub threshold: Vec<f64>,
    pub shell_voxels: Vec<usize>,
}

/// Half-bit information threshold for a shell of `n` voxels.
pub fn half_bit_threshold(n: usize) -> f64 {
    let s = (n as f64).sqrt();
    (0.2071 + 1.9102 / s) / (1.2071 + 0.9102 / s)
}

fn fft3(v: &ScalarField3) -> Vec<Complex<f64>> {
    let n = v.shape()[0];
    let mut data: Vec<Complex<f64>> = v.data().iter().map(|&x| Complex::new(x, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for stride in [1, n, n * n] {
        for a in 0..n {
            for b in 0..n {
                // `a`, `b` run over the two other axes
                let base = match stride {
                    1 => (a * n + b) * n,
                    s if s == n => a * n * n + b,
                    _ => a * n + b,
                };
                for (m, c) in line.iter_mut().enumerate() {
                    *c = data[base + m * stride];
                }
                fft.process(&mut line);
                for (m, c) in line.iter().enumerate() {
                    data[base + m * stride] = *c;
                }
            }
        }
    }
    data
}

fn cubic_side(a: &ScalarField3) -> Result<usize> {
    let [x, y, z] = a.shape();
    if x != y || y != z {
        return Err(Error::Shape(format!("FSC needs a cubic volume, got {:?}", a.shape())));
    }
    if x < 16 {
        return Err(Error::Shape(format!("FSC needs a side of at least 16, got {x}")));
    }
    Ok(x)
}

pub fn fsc_curve(a: &ScalarField3, b: &ScalarField3) -> Result<FscCurve> {
    same_shape(a, b)?;
    let n = cubic_side(a)?;
    let (fa, fb) = (fft3(a), fft3(b));
    let shells = n / 2 + 1;
    let mut num = vec![Complex::new(0.0, 0.0); shells];
    let mut pa = vec![0.0; shells];
    let mut pb = vec![0.0; shells];
    let mut count = vec![0usize; shells];
    let freq = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let r = (freq(i).powi(2) + freq(j).powi(2) + freq(k).powi(2)).sqrt().round() as usize;
                if r >= shells {
                    continue;
                }
                let idx = (k * n + j) * n + i;
                num[r] += fa[idx] * fb[idx].conj();
                pa[r] += fa[idx].norm_sqr();
                pb[r] += fb[idx].norm_sqr();
                count[r] += 1;
            }
        }
    }
    let fsc = (0..shells)
        .map(|r| {
            let den = (pa[r] * pb[r]).sqrt();
            if den > 0.0 {
                (num[r].norm() / den).min(1.0)
            } else if pa[r] == 0.0 && pb[r] == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(FscCurve {
        radius: (0..shells).collect(),
        fsc,
        threshold: count.iter().map(|&c| half_bit_threshold(c)).collect(),
        shell_voxels: count,
    })
}

/// First fractional shell radius where the curve drops below the
/// half-bit threshold, ignoring the DC shell.
pub fn fsc_crossing(curve: &FscCurve) -> Option<f64> {
    for r in 1..curve.fsc.len() {
        let d = curve.fsc[r] - curve.threshold[r];
        if d < 0.0 {
            let d0 = curve.fsc[r - 1] - curve.threshold[r - 1];
            if r == 1 || d0 <= 0.0 {
                return Some(r as f64);
            }
            return Some((r - 1) as f64 + d0 / (d0 - d));
        }
    }
    None
}

/// FSC curve and the half-bit resolution in voxels (at least 2).
pub fn fsc_resolution(a: &ScalarField3, b: &ScalarField3) -> Result<(FscCurve, f64)> {
    let curve = fsc_curve(a, b)?;
    let side = a.shape()[0] as f64;
    let res = match fsc_crossing(&curve) {
        Some(r) => (side / r).max(2.0),
        None => 2.0,
    };
    Ok((curve, res))
}

/// `psi` of a field model on the cell centers of `spec` at time `t`.
pub fn voxelize_psi(model: &FieldModel, spec: &DomainSpec, t: f64) -> Result<ScalarField3> {
    let shape = spec.grid_shape;
    let mut pts = Vec::with_capacity(spec.cell_count());
    for k in 0..shape[2] {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                let (xn, tn) = spec.normalize_unchecked(spec.cell_center([i, j, k]), t);
                pts.push([xn[0], xn[1], xn[2], tn]);
            }
        }
    }
    let psi = pts.par_iter().map(|p| model.eval(*p)[0]).collect();
    ScalarField3::new(shape, psi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    /// Frame index in the ground-truth movie.
    pub frame: usize,
    pub t: f64,
    /// Whether the frame was part of the training data, when known.
    pub seen: Option<bool>,
    pub mse: f64,
    pub dssim: f64,
    pub resolution: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> MeanStd {
        if v.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mse: MeanStd,
    pub dssim: MeanStd,
    pub resolution: MeanStd,
    pub mse_4d: f64,
    pub dssim_4d: f64,
    pub provenance: Provenance,
    #[serde(skip)]
    pub fsc_curves: Vec<FscCurve>,
}

impl EvalReport {
    /// Mean MSE over the frames with the given `seen` flag.
    pub fn mean_mse_where(&self, seen: bool) -> f64 {
        let v: Vec<f64> = self.frames.iter().filter(|f| f.seen == Some(seen)).map(|f| f.mse).collect();
        MeanStd::of(&v).mean
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("serializable report");
        let p = dir.join("report.json");
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;

        let p = dir.join("per_frame.csv");
        let mut out = String::from("frame,t,seen,mse,dssim,resolution\n");
        for f in &self.frames {
            let seen = f.seen.map_or(String::new(), |s| s.to_string());
            out.push_str(&format!("{},{:e},{},{:e},{:e},{}\n", f.frame, f.t, seen, f.mse, f.dssim, f.resolution));
        }
        std::fs::write(&p, out).map_err(|e| Error::io(&p, e))?;

        let p = dir.join("fsc_curves.csv");
        let mut file = std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
        let mut write = || -> std::io::Result<()> {
            writeln!(file, "frame,shell,fsc,threshold,voxels")?;
            for (f, c) in self.frames.iter().zip(&self.fsc_curves) {
                for r in 0..c.radius.len() {
                    writeln!(file, "{},{},{:e},{:e},{}", f.frame, c.radius[r], c.fsc[r], c.threshold[r], c.shell_voxels[r])?;
                }
            }
            file.flush()
        };
        write().map_err(|e| Error::io(&p, e))
    }
}

/// Which ground-truth frames to score.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameFilter {
    All,
    /// Ground-truth frame indices.
    Only(Vec<usize>),
}

/// Scores reconstructed `psi` volumes against the ground truth.
///
/// `recon[i]` pairs with `truth.frames[i]`; `seen` lists the ground-truth
/// frame indices used in training, if known.
pub fn evaluate_volumes(
    recon: &[ScalarField3],
    truth: &Movie4D,
    filter: &FrameFilter,
    seen: Option<&[usize]>,
    provenance: Provenance,
) -> Result<EvalReport> {
    if recon.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} reconstructed frames for {} ground-truth frames",
            recon.len(),
            truth.len()
        )));
    }
    let picked: Vec<usize> = (0..truth.len())
        .filter(|&i| match filter {
            FrameFilter::All => true,
            FrameFilter::Only(v) => v.contains(&truth.frame_indices[i]),
        })
        .collect();
    if picked.is_empty() {
        return Err(Error::Usage("no ground-truth frame matches the requested subset".into()));
    }
    let scored: Vec<(FrameMetrics, FscCurve, f64, f64)> = picked
        .par_iter()
        .map(|&i| {
            let (a, b) = (&recon[i], &truth.frames[i].psi);
            let mse = volume_mse(a, b)?;
            let params = SsimParams::default();
            let ssim_sum: f64 = ssim_map(a, b, &params)?.iter().sum();
            let dssim = volume_dssim_with(a, b, &params)?;
            let (curve, resolution) = fsc_resolution(a, b)?;
            let frame = truth.frame_indices[i];
            Ok((
                FrameMetrics {
                    frame,
                    t: truth.frames[i].t,
                    seen: seen.map(|s| s.contains(&frame)),
                    mse,
                    dssim,
                    resolution,
                },
                curve,
                squared_error_sum(a, b),
                ssim_sum,
            ))
        })
        .collect::<Result<_>>()?;
    let n = truth.frames[0].psi.len() as f64;
    let windows: f64 = {
        let w = SsimParams::default().window;
        truth.frames[0].psi.shape().iter().map(|&s| (s + 1 - w) as f64).product()
    };
    let f = scored.len() as f64;
    let sq: f64 = scored.iter().map(|s| s.2).sum();
    let ssim: f64 = scored.iter().map(|s| s.3).sum();
    let col = |g: fn(&FrameMetrics) -> f64| scored.iter().map(|s| g(&s.0)).collect::<Vec<f64>>();
    Ok(EvalReport {
        mse: MeanStd::of(&col(|m| m.mse)),
        dssim: MeanStd::of(&col(|m| m.dssim)),
        resolution: MeanStd::of(&col(|m| m.resolution)),
        mse_4d: sq / (f * n),
        dssim_4d: ((1.0 - ssim / (f * windows)) / 2.0).max(0.0),
        provenance,
        fsc_curves: scored.iter().map(|s| s.1.clone()).collect(),
        frames: scored.into_iter().map(|s| s.0).collect(),
    })
}

/// Voxelizes `model` at every ground-truth frame time and scores it.
pub fn evaluate_movie(
    model: &FieldModel,
    truth: &Movie4D,
    filter: &FrameFilter,
    seen: Option<&[usize]>,
    provenance: Provenance,
) -> Result<EvalReport> {
    let recon = truth
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let wanted = match filter {
                FrameFilter::All => true,
                FrameFilter::Only(v) => v.contains(&truth.frame_indices[i]),
            };
            if wanted {
                voxelize_psi(model, &truth.spec, f.t)
            } else {
                Ok(f.psi.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_volumes(&recon, truth, filter, seen, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::FlowState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn noise(n: usize, seed: u64) -> ScalarField3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField3::from_fn([n; 3], |_| rng.gen_range(-1.0..1.0))
    }

    /// Smooth blob with a little texture.
    fn blob(n: usize) -> ScalarField3 {
        let c = n as f64 / 2.0;
        ScalarField3::from_fn([n; 3], |[i, j, k]| {
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
            ((n as f64 / 4.0 - r) / 1.5).tanh() + 0.1 * (0.9 * i as f64).sin()
        })
    }

    #[test]
    fn mse_identity_and_unit_offset() {
        let a = noise(4, 1);
        assert_eq!(volume_mse(&a, &a).unwrap(), 0.0);
        let z = ScalarField3::zeros([3, 4, 5]);
        let o = ScalarField3::filled([3, 4, 5], 1.0);
        assert_eq!(volume_mse(&z, &o).unwrap(), 1.0);
        assert!(matches!(volume_mse(&z, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn window_means_match_brute_force() {
        let a = noise(9, 3);
        let m = window_means(a.data(), a.shape(), 7);
        assert_eq!(m.len(), 27);
        let mut brute = 0.0;
        for k in 1..8 {
            for j in 2..9 {
                for i in 0..7 {
                    brute += a.get([i, j, k]);
                }
            }
        }
        // window origin (0, 2, 1)
        assert!((m[(3 + 2) * 3] - brute / 343.0).abs() < 1e-14);
    }

    #[test]
    fn dssim_identity_symmetry_and_errors() {
        let a = blob(12);
        let b = noise(12, 2);
        assert!(volume_dssim(&a, &a).unwrap().abs() < 1e-12);
        let ab = volume_dssim(&a, &b).unwrap();
        let ba = volume_dssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-14 && ab > 0.0 && ab <= 1.0);
        let small = ScalarField3::zeros([6, 12, 12]);
        assert!(matches!(volume_dssim(&small, &small), Err(Error::Shape(_))));
        let flat = ScalarField3::filled([8; 3], 0.5);
        let p = SsimParams {
            dynamic_range: DynamicRange::FromTruth,
            ..SsimParams::default()
        };
        assert!(matches!(volume_dssim_with(&flat, &flat, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dssim_increases_with_noise() {
        let a = blob(16);
        let e = noise(16, 9);
        let mut last = 0.0;
        for eps in [0.01, 0.05, 0.1] {
            let b = ScalarField3::new([16; 3], a.data().iter().zip(e.data()).map(|(x, y)| x + eps * 2.0 * y).collect()).unwrap();
            let d = volume_dssim(&b, &a).unwrap();
            assert!(d > last, "{d} after {last}");
            last = d;
        }
    }

    #[test]
    fn threshold_tends_to_the_asymptote() {
        assert!((half_bit_threshold(1_000_000_000) - 0.2071 / 1.2071).abs() < 1e-4);
        assert!(half_bit_threshold(10) > half_bit_threshold(1000));
    }

    #[test]
    fn fsc_of_a_volume_with_itself() {
        let a = blob(16);
        let (c, res) = fsc_resolution(&a, &a).unwrap();
        assert!(c.fsc.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(res, 2.0);
        assert_eq!(c.shell_voxels[0], 1);
        assert_eq!(c.shell_voxels[1], 6 + 12);
    }

    #[test]
    fn fsc_rejects_bad_shapes() {
        let a = ScalarField3::zeros([16, 16, 18]);
        assert!(matches!(fsc_curve(&a, &a), Err(Error::Shape(_))));
        let b = ScalarField3::zeros([8; 3]);
        assert!(matches!(fsc_curve(&b, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn independent_noise_falls_below_threshold() {
        let (c, res) = fsc_resolution(&noise(32, 1), &noise(32, 2)).unwrap();
        assert!(res > 2.0);
        let tail = c.fsc.len() - 3..c.fsc.len();
        assert!(tail.into_iter().all(|r| c.fsc[r] < c.threshold[r]));
    }

    /// Ideal spherical low-pass of `a` keeping `|k| <= cutoff`.
    pub(crate) fn low_pass(a: &ScalarField3, cutoff: f64) -> ScalarField3 {
        let n = a.shape()[0];
        let mut f = fft3(a);
        let freq = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if (freq(i).powi(2) + freq(j).powi(2) + freq(k).powi(2)).sqrt() > cutoff {
                        f[(k * n + j) * n + i] = Complex::new(0.0, 0.0);
                    }
                }
            }
        }
        let fft = FftPlanner::new().plan_fft_inverse(n);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for stride in [1, n, n * n] {
            for a in 0..n {
                for b in 0..n {
                    let base = match stride {
                        1 => (a * n + b) * n,
                        s if s == n => a * n * n + b,
                        _ => a * n + b,
                    };
                    for (m, c) in line.iter_mut().enumerate() {
                        *c = f[base + m * stride];
                    }
                    fft.process(&mut line);
                    for (m, c) in line.iter().enumerate() {
                        f[base + m * stride] = *c;
                    }
                }
            }
        }
        let total = (n * n * n) as f64;
        ScalarField3::new([n; 3], f.iter().map(|c| c.re / total).collect()).unwrap()
    }

    #[test]
    fn low_pass_cutoff_is_found_within_one_shell() {
        let a = noise(32, 5);
        let b = low_pass(&a, 8.0);
        let (c, res) = fsc_resolution(&a, &b).unwrap();
        let r = fsc_crossing(&c).unwrap();
        assert!((r - 8.0).abs() <= 1.0, "crossing at {r}");
        assert!((res - 4.0).abs() < 0.6, "{res}");
    }

    #[test]
    fn fft_matches_a_direct_transform_on_one_mode() {
        let n = 16;
        let a = ScalarField3::from_fn([n; 3], |[i, j, _]| (2.0 * std::f64::consts::PI * (3 * i + j) as f64 / n as f64).cos());
        let f = fft3(&a);
        let total = (n * n * n) as f64;
        // energy sits at (3, 1, 0) and its mirror
        let at = |i: usize, j: usize, k: usize| f[(k * n + j) * n + i].norm();
        assert!((at(3, 1, 0) - total / 2.0).abs() < 1e-9);
        assert!((at(n - 3, n - 1, 0) - total / 2.0).abs() < 1e-9);
        assert!(at(1, 3, 0) < 1e-9);
    }

    fn frame_movie(vols: Vec<ScalarField3>) -> Movie4D {
        let n = vols[0].shape();
        let spec = Arc::new(DomainSpec {
            extent: [1e-4; 3],
            time_span: [0.0, (vols.len() - 1) as f64],
            grid_shape: n,
            frame_count: vols.len(),
        });
        let frames = vols
            .into_iter()
            .enumerate()
            .map(|(i, psi)| {
                FlowState::new(spec.clone(), psi, std::array::from_fn(|_| ScalarField3::zeros(n)), ScalarField3::zeros(n), i as f64).unwrap()
            })
            .collect();
        let count = spec.frame_count;
        Movie4D::new(spec, frames, (0..count).collect()).unwrap()
    }

    #[test]
    fn truth_against_itself_scores_perfectly() {
        let m = frame_movie(vec![blob(16), noise(16, 3)]);
        let recon: Vec<_> = m.frames.iter().map(|f| f.psi.clone()).collect();
        let r = evaluate_volumes(&recon, &m, &FrameFilter::All, None, Provenance::default()).unwrap();
        for f in &r.frames {
            assert_eq!(f.mse, 0.0);
            assert!(f.dssim.abs() < 1e-12);
            assert_eq!(f.resolution, 2.0);
        }
        assert_eq!(r.mse_4d, 0.0);
    }

    #[test]
    fn aggregation_matches_a_hand_computation() {
        // per-frame MSE 0, 1/4, 1 (offsets of 0, 0.5, 1); mean 5/12
        let base = ScalarField3::filled([16; 3], -0.5);
        let m = frame_movie(vec![base.clone(), base.clone(), base.clone()]);
        let recon: Vec<_> = [0.0, 0.5, 1.0].iter().map(|o| ScalarField3::filled([16; 3], -0.5 + o)).collect();
        let r = evaluate_volumes(&recon, &m, &FrameFilter::All, Some(&[1]), Provenance::default()).unwrap();
        assert_eq!(r.frames.iter().map(|f| f.mse).collect::<Vec<_>>(), vec![0.0, 0.25, 1.0]);
        assert!((r.mse.mean - 5.0 / 12.0).abs() < 1e-15);
        let var = ((5.0f64 / 12.0).powi(2) + (0.25f64 - 5.0 / 12.0).powi(2) + (1.0f64 - 5.0 / 12.0).powi(2)) / 3.0;
        assert!((r.mse.std - var.sqrt()).abs() < 1e-15);
        // dyadic values sum exactly, so 4D equals the frame mean bit for bit
        assert_eq!(r.mse_4d, r.mse.mean);
        assert_eq!(r.frames[1].seen, Some(true));
        assert_eq!(r.mean_mse_where(false), 0.5);
    }

    #[test]
    fn subset_filter_and_report_files() {
        let m = frame_movie(vec![blob(16), noise(16, 1), noise(16, 2)]);
        let recon: Vec<_> = m.frames.iter().map(|f| ScalarField3::new([16; 3], f.psi.data().iter().map(|v| 0.9 * v).collect()).unwrap()).collect();
        let r = evaluate_volumes(&recon, &m, &FrameFilter::Only(vec![0, 2]), Some(&[1]), Provenance::default()).unwrap();
        assert_eq!(r.frames.iter().map(|f| f.frame).collect::<Vec<_>>(), vec![0, 2]);
        assert!(r.frames.iter().all(|f| f.seen == Some(false)));
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("per_frame.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let fsc = std::fs::read_to_string(dir.path().join("fsc_curves.csv")).unwrap();
        assert_eq!(fsc.lines().count(), 1 + 2 * 9);
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.frames, r.frames);
    }
}
