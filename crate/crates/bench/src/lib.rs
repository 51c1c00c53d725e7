//! Fixtures shared by the benchmarks.

use pionix::neuralfield::{init_parameters, Architecture, FieldModel};
use pionix::xray::DetectorSpec;
use pionix::{DomainSpec, RunConfig};

/// Deterministic scattered points in the normalized cube.
pub fn points(n: usize) -> Vec<[f64; 4]> {
    (0..n)
        .map(|i| {
            let f = |k: f64| ((i as f64 + 1.0) * k).sin();
            [f(0.37), f(1.13), f(2.71), 0.5 * (1.0 + f(0.61))]
        })
        .collect()
}

pub fn small_model() -> FieldModel {
    let arch = Architecture {
        width: 32,
        blocks: 3,
        fourier_x: 4,
        fourier_t: 2,
    };
    init_parameters(&arch, 1).expect("valid architecture")
}

/// Two droplets on an `n`^3 grid with a matching detector.
pub fn collision_config(n: usize, frames: usize) -> RunConfig {
    let mut cfg = RunConfig::baseline();
    cfg.domain = DomainSpec {
        extent: [256e-6; 3],
        time_span: [0.0, (frames - 1) as f64 * 0.075e-6],
        grid_shape: [n; 3],
        frame_count: frames,
    };
    cfg.detector = DetectorSpec {
        width: n,
        height: n,
        pixel_pitch: 256e-6 / n as f64,
        samples_per_ray: 64,
        ..DetectorSpec::default()
    };
    cfg
}
