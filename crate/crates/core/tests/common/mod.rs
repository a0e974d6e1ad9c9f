//! Plain-loop reference implementation of the frame renderer, shared by
//! integration tests, plus generators for random render cases. No tape,
//! no shared code with the production path beyond the counter-based
//! draw streams it must reproduce.

use echofield_core::diff::Tape;
use echofield_core::geometry::FrameSpec;
use echofield_core::grid::{Grid, ParamMaps};
use echofield_core::inr::FieldTensors;
use echofield_core::renderer::{render_frame, RenderConfig, SamplingMode};
use echofield_core::rng::{stream, DrawKey};

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn indicator(prob: &[f64], key: DrawKey, mode: SamplingMode) -> Vec<f64> {
    match mode {
        SamplingMode::Expected => prob.to_vec(),
        SamplingMode::Hard => prob
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if key.uniform(i as u64) > 1.0 - p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
        SamplingMode::Relaxed { tau } => prob
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let u = key.uniform(i as u64);
                let noise = u.ln() - (1.0 - u).ln();
                let logit = p.max(1e-12).ln() - (1.0 - p).max(1e-12).ln();
                stable_sigmoid((logit + noise) / tau)
            })
            .collect(),
    }
}

fn psf_weights(size: usize, sigma_lat: f64, sigma_ax: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    let mut total = 0.0;
    for i in -half..=half {
        for j in -half..=half {
            let w = (-0.5 * ((i as f64 / sigma_lat).powi(2) + (j as f64 / sigma_ax).powi(2))).exp();
            total += w;
            weights.push(w);
        }
    }
    weights.iter().map(|w| w / total).collect()
}

fn conv_same(input: &[f64], rows: usize, cols: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let mut acc = 0.0;
            for i in -half..=half {
                let rr = r + i;
                if rr < 0 || rr >= rows as isize {
                    continue;
                }
                for j in -half..=half {
                    let cc = c + j;
                    if cc < 0 || cc >= cols as isize {
                        continue;
                    }
                    let w = kernel[((i + half) * size as isize + (j + half)) as usize];
                    acc += input[(rr * cols as isize + cc) as usize] * w;
                }
            }
            out[(r * cols as isize + c) as usize] = acc;
        }
    }
    out
}

/// Reference echo image, flattened scanline-major like the grid layout.
pub fn oracle_render(
    maps: &ParamMaps,
    spec: &FrameSpec,
    config: &RenderConfig,
    seed: u64,
    frame: u64,
) -> Vec<f64> {
    let (w, d) = (spec.scanlines, spec.depth_samples);
    let to64 =
        |g: &echofield_core::grid::Grid| -> Vec<f64> { g.data.iter().map(|&v| v as f64).collect() };
    let alpha = to64(&maps.attenuation);
    let beta = to64(&maps.reflectance);
    let rho_b = to64(&maps.border_prob);
    let rho_s = to64(&maps.scatter_density);
    let phi = to64(&maps.scatter_amplitude);

    let border = indicator(
        &rho_b,
        DrawKey {
            seed,
            frame,
            stream: stream::BORDER,
        },
        config.mode,
    );
    let scatter = indicator(
        &rho_s,
        DrawKey {
            seed,
            frame,
            stream: stream::SCATTER,
        },
        config.mode,
    );
    let template: Vec<f64> = scatter.iter().zip(&phi).map(|(h, p)| h * p).collect();

    let decay = config.frequency * spec.axial_spacing_mm;
    let mut intensity = vec![0.0; w * d];
    for line in 0..w {
        let mut running = 1.0;
        for depth in 0..d {
            let i = line * d + depth;
            intensity[i] = config.incident_intensity * running;
            running *= (1.0 - beta[i] * border[i]) * (-alpha[i] * decay).exp();
        }
    }

    let kernel = psf_weights(
        config.psf_size,
        config.psf_lateral_sigma,
        config.psf_axial_sigma,
    );
    let border_blur = conv_same(&border, w, d, &kernel, config.psf_size);
    let template_blur = conv_same(&template, w, d, &kernel, config.psf_size);

    (0..w * d)
        .map(|i| {
            let reflection = (intensity[i] * beta[i]).abs() * border_blur[i];
            let backscatter = intensity[i] * template_blur[i];
            reflection + backscatter
        })
        .collect()
}

fn draw(key: &DrawKey, i: u64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * key.uniform(i)
}

/// Random maps, geometry, and render settings; occasionally plants a
/// total-reflector row (border probability and reflectance exactly one)
/// to exercise the zero paths.
pub fn random_case(case: u64) -> (ParamMaps, FrameSpec, RenderConfig, u64) {
    let key = DrawKey {
        seed: 0xbeef ^ case,
        frame: case,
        stream: 90,
    };
    let w = 4 + (key.uniform(0) * 8.0) as usize;
    let d = 6 + (key.uniform(1) * 14.0) as usize;
    let spec = FrameSpec {
        scanlines: w,
        depth_samples: d,
        lateral_spacing_mm: draw(&key, 2, 0.4, 1.5),
        axial_spacing_mm: draw(&key, 3, 0.3, 1.2),
    };
    let mode = match case % 3 {
        0 => SamplingMode::Hard,
        1 => SamplingMode::Relaxed {
            tau: draw(&key, 4, 0.3, 1.2),
        },
        _ => SamplingMode::Expected,
    };
    let config = RenderConfig {
        frequency: draw(&key, 5, 0.5, 2.0),
        incident_intensity: draw(&key, 6, 0.5, 1.5),
        psf_size: [3, 5, 7][(key.uniform(7) * 3.0) as usize],
        psf_lateral_sigma: draw(&key, 8, 0.5, 1.5),
        psf_axial_sigma: draw(&key, 9, 0.4, 1.2),
        mode,
    };
    let field = |stream: u32, lo: f64, hi: f64| {
        let k = DrawKey {
            seed: 0xbeef ^ case,
            frame: case,
            stream,
        };
        Grid::from_fn(w, d, |s, dd| draw(&k, (s * d + dd) as u64, lo, hi) as f32)
    };
    let mut maps = ParamMaps {
        attenuation: field(91, 0.0, 0.5),
        reflectance: field(92, 0.0, 1.0),
        border_prob: field(93, 0.0, 1.0),
        scatter_density: field(94, 0.0, 1.0),
        scatter_amplitude: field(95, 0.0, 1.0),
    };
    if case % 4 == 0 {
        let row = d / 3;
        for s in 0..w {
            maps.border_prob.set(s, row, 1.0);
            maps.reflectance.set(s, row, 1.0);
        }
    }
    (maps, spec, config, case * 31 + 7)
}

/// The production render graph evaluated in double precision.
pub fn render_f64(
    maps: &ParamMaps,
    spec: &FrameSpec,
    config: &RenderConfig,
    seed: u64,
    frame: u64,
) -> Vec<f64> {
    let mut tape: Tape<f64> = Tape::new();
    let shape = vec![spec.scanlines, spec.depth_samples];
    let leaf = |tape: &mut Tape<f64>, g: &Grid| {
        tape.leaf(g.data.iter().map(|&v| v as f64).collect(), shape.clone())
            .unwrap()
    };
    let fields = FieldTensors {
        attenuation: leaf(&mut tape, &maps.attenuation),
        reflectance: leaf(&mut tape, &maps.reflectance),
        border_prob: leaf(&mut tape, &maps.border_prob),
        scatter_density: leaf(&mut tape, &maps.scatter_density),
        scatter_amplitude: leaf(&mut tape, &maps.scatter_amplitude),
    };
    let (echo, _) = render_frame(&mut tape, &fields, spec, config, seed, frame).unwrap();
    tape.value(echo).to_vec()
}
