//! Deterministic fixtures shared by the criterion benches.

use echofield_core::geometry::{FrameSpec, Vec3};
use echofield_core::rng::DrawKey;
use echofield_core::{Grid, ParamMaps};

/// The frame size the demonstration scenes use.
pub fn bench_frame_spec() -> FrameSpec {
    FrameSpec {
        scanlines: 64,
        depth_samples: 96,
        lateral_spacing_mm: 0.8,
        axial_spacing_mm: 0.6,
    }
}

fn noise_grid(spec: &FrameSpec, seed: u64, stream: u32, lo: f32, hi: f32) -> Grid {
    let key = DrawKey::new(seed, 0, stream);
    let d = spec.depth_samples;
    Grid::from_fn(spec.scanlines, d, |s, depth| {
        lo + (hi - lo) * key.uniform((s * d + depth) as u64) as f32
    })
}

/// Random tissue maps with each channel inside its physical range.
pub fn bench_maps(seed: u64) -> ParamMaps {
    let spec = bench_frame_spec();
    ParamMaps {
        attenuation: noise_grid(&spec, seed, 100, 0.0, 0.3),
        reflectance: noise_grid(&spec, seed, 101, 0.0, 1.0),
        border_prob: noise_grid(&spec, seed, 102, 0.0, 1.0),
        scatter_density: noise_grid(&spec, seed, 103, 0.0, 1.0),
        scatter_amplitude: noise_grid(&spec, seed, 104, 0.0, 1.0),
    }
}

/// Random normalized query points in the network's input cube.
pub fn bench_points(n: usize, seed: u64) -> Vec<Vec3> {
    let key = DrawKey::new(seed, 0, 200);
    (0..n)
        .map(|i| {
            let at = |j: u64| 2.0 * key.uniform(3 * i as u64 + j) - 1.0;
            Vec3::new(at(0), at(1), at(2))
        })
        .collect()
}

/// A frame-shaped pseudo-echo in [0, 1].
pub fn bench_target(spec: &FrameSpec, seed: u64) -> Grid {
    noise_grid(spec, seed, 300, 0.0, 1.0)
}
