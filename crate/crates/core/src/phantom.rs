//! Synthetic tissue phantoms and probe trajectories.
//!
//! A phantom is a layered block of tissue with optional box inclusions,
//! rasterized onto a voxel grid holding the five acoustic channels. A
//! trajectory places frames along a swept, optionally tilted probe path;
//! simulating a sweep samples the voxel grid at each frame's sample
//! positions and renders the resulting maps.
//!
//! Axes: x lateral, y beam depth, z sweep direction. All lengths in mm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frame_sample_points, FrameSpec, Pose, Vec3};
use crate::grid::{Grid, ParamMaps};
use crate::renderer::{render_param_maps, RenderConfig};

/// Largest probe tilt a trajectory may request, degrees.
pub const MAX_TILT_DEG: f64 = 45.0;

/// Acoustic description of one tissue class. Attenuation is amplitude
/// decay per mm at unit frequency; the rest are unitless in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissuePreset {
    pub name: String,
    pub attenuation: f32,
    pub reflectance: f32,
    pub scatter_density: f32,
    pub scatter_amplitude: f32,
}

impl TissuePreset {
    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidPhantom {
                detail: String::from("tissue with empty name"),
            });
        }
        if !(self.attenuation >= 0.0) {
            return Err(Error::InvalidPhantom {
                detail: format!("tissue {}: negative attenuation", self.name),
            });
        }
        for (label, v) in [
            ("reflectance", self.reflectance),
            ("scatter_density", self.scatter_density),
            ("scatter_amplitude", self.scatter_amplitude),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidPhantom {
                    detail: format!("tissue {}: {} {} outside [0, 1]", self.name, label, v),
                });
            }
        }
        Ok(())
    }
}

/// Stock tissue classes used by the bundled scenes.
pub fn builtin_presets() -> Vec<TissuePreset> {
    let t = |name: &str, a: f32, r: f32, d: f32, s: f32| TissuePreset {
        name: name.to_string(),
        attenuation: a,
        reflectance: r,
        scatter_density: d,
        scatter_amplitude: s,
    };
    vec![
        t("water", 0.0005, 0.05, 0.02, 0.05),
        t("fat", 0.008, 0.25, 0.40, 0.45),
        t("soft", 0.012, 0.20, 0.50, 0.50),
        t("liver", 0.015, 0.30, 0.55, 0.60),
        t("bone", 0.35, 0.90, 0.10, 0.20),
    ]
}

/// Horizontal slab spanning a depth range along y. Later layers paint
/// over earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub tissue: String,
    pub from_mm: f64,
    pub to_mm: f64,
}

/// Axis-aligned box of one tissue. Inclusions paint over layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionSpec {
    pub tissue: String,
    pub min_mm: [f64; 3],
    pub max_mm: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub name: String,
    pub extent_mm: [f64; 3],
    pub voxel_mm: f64,
    pub background: String,
    pub layers: Vec<LayerSpec>,
    pub inclusions: Vec<InclusionSpec>,
    pub tissues: Vec<TissuePreset>,
}

impl PhantomSpec {
    /// Layered abdominal-style block with a strongly reflecting plate:
    /// fat over liver over soft tissue, a bone slab buried in the liver
    /// layer, water background. The slab is kept short along the sweep
    /// axis so tilted beams clear it where perpendicular beams do not,
    /// which makes its shadow genuinely view dependent.
    pub fn layered_with_reflector() -> PhantomSpec {
        PhantomSpec {
            name: String::from("layered-reflector"),
            extent_mm: [52.0, 60.0, 90.0],
            voxel_mm: 1.0,
            background: String::from("water"),
            layers: vec![
                LayerSpec {
                    tissue: String::from("fat"),
                    from_mm: 0.0,
                    to_mm: 12.0,
                },
                LayerSpec {
                    tissue: String::from("liver"),
                    from_mm: 12.0,
                    to_mm: 30.0,
                },
                LayerSpec {
                    tissue: String::from("soft"),
                    from_mm: 30.0,
                    to_mm: 60.0,
                },
            ],
            inclusions: vec![InclusionSpec {
                tissue: String::from("bone"),
                min_mm: [14.0, 22.0, 38.0],
                max_mm: [38.0, 28.0, 52.0],
            }],
            tissues: builtin_presets(),
        }
    }

    fn tissue_index(&self, name: &str) -> Result<usize> {
        self.tissues
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::InvalidPhantom {
                detail: format!("unknown tissue {name}"),
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tissues.is_empty() {
            return Err(Error::InvalidPhantom {
                detail: String::from("no tissues defined"),
            });
        }
        for t in &self.tissues {
            t.validate()?;
        }
        for i in 0..self.tissues.len() {
            for j in i + 1..self.tissues.len() {
                if self.tissues[i].name == self.tissues[j].name {
                    return Err(Error::InvalidPhantom {
                        detail: format!("duplicate tissue {}", self.tissues[i].name),
                    });
                }
            }
        }
        if self.extent_mm.iter().any(|&e| !(e > 0.0)) || !(self.voxel_mm > 0.0) {
            return Err(Error::InvalidPhantom {
                detail: String::from("extent and voxel size must be positive"),
            });
        }
        self.tissue_index(&self.background)?;
        for layer in &self.layers {
            self.tissue_index(&layer.tissue)?;
            if !(layer.from_mm < layer.to_mm) {
                return Err(Error::InvalidPhantom {
                    detail: format!(
                        "layer {}: empty depth range [{}, {}]",
                        layer.tissue, layer.from_mm, layer.to_mm
                    ),
                });
            }
        }
        for inc in &self.inclusions {
            self.tissue_index(&inc.tissue)?;
            for a in 0..3 {
                if !(inc.min_mm[a] < inc.max_mm[a]) {
                    return Err(Error::InvalidPhantom {
                        detail: format!("inclusion {}: empty box on axis {a}", inc.tissue),
                    });
                }
            }
        }
        Ok(())
    }

    /// Painter's-order tissue lookup at a point inside the block.
    fn tissue_at(&self, p: Vec3) -> Result<usize> {
        let mut idx = self.tissue_index(&self.background)?;
        for layer in &self.layers {
            if p.y >= layer.from_mm && p.y < layer.to_mm {
                idx = self.tissue_index(&layer.tissue)?;
            }
        }
        for inc in &self.inclusions {
            let inside = (0..3).all(|a| {
                let c = [p.x, p.y, p.z][a];
                c >= inc.min_mm[a] && c < inc.max_mm[a]
            });
            if inside {
                idx = self.tissue_index(&inc.tissue)?;
            }
        }
        Ok(idx)
    }
}

/// Rasterized phantom: five channel volumes on grid nodes spaced
/// `voxel_mm` apart, node (i, j, k) at (i, j, k) * voxel_mm. Points
/// outside the node box sample as background tissue.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_mm: f64,
    pub attenuation: Vec<f32>,
    pub reflectance: Vec<f32>,
    pub border_prob: Vec<f32>,
    pub scatter_density: Vec<f32>,
    pub scatter_amplitude: Vec<f32>,
    pub background: [f32; 5],
}

impl ParamVolume {
    #[inline]
    fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ny + iy) * self.nz + iz
    }

    fn channel(&self, c: usize) -> &[f32] {
        match c {
            0 => &self.attenuation,
            1 => &self.reflectance,
            2 => &self.border_prob,
            3 => &self.scatter_density,
            _ => &self.scatter_amplitude,
        }
    }

    /// Trilinear sample of all five channels; background outside.
    pub fn sample(&self, p: Vec3) -> [f32; 5] {
        let hx = (self.nx - 1) as f64 * self.voxel_mm;
        let hy = (self.ny - 1) as f64 * self.voxel_mm;
        let hz = (self.nz - 1) as f64 * self.voxel_mm;
        if p.x < 0.0 || p.y < 0.0 || p.z < 0.0 || p.x > hx || p.y > hy || p.z > hz {
            return self.background;
        }
        let gx = p.x / self.voxel_mm;
        let gy = p.y / self.voxel_mm;
        let gz = p.z / self.voxel_mm;
        let (x0, fx) = split(gx, self.nx);
        let (y0, fy) = split(gy, self.ny);
        let (z0, fz) = split(gz, self.nz);
        let x1 = (x0 + 1).min(self.nx - 1);
        let y1 = (y0 + 1).min(self.ny - 1);
        let z1 = (z0 + 1).min(self.nz - 1);
        let mut out = [0.0f32; 5];
        for (c, slot) in out.iter_mut().enumerate() {
            let v = self.channel(c);
            let lerp = |a: f32, b: f32, t: f64| a as f64 * (1.0 - t) + b as f64 * t;
            let c00 = lerp(v[self.idx(x0, y0, z0)], v[self.idx(x1, y0, z0)], fx);
            let c10 = lerp(v[self.idx(x0, y1, z0)], v[self.idx(x1, y1, z0)], fx);
            let c01 = lerp(v[self.idx(x0, y0, z1)], v[self.idx(x1, y0, z1)], fx);
            let c11 = lerp(v[self.idx(x0, y1, z1)], v[self.idx(x1, y1, z1)], fx);
            let c0 = c00 * (1.0 - fy) + c10 * fy;
            let c1 = c01 * (1.0 - fy) + c11 * fy;
            *slot = (c0 * (1.0 - fz) + c1 * fz) as f32;
        }
        out
    }

    /// Parameter maps for one posed frame, sampled at its grid points.
    pub fn sample_frame(&self, pose: &Pose, spec: &FrameSpec) -> Result<ParamMaps> {
        pose.validate()?;
        spec.validate()?;
        let points = frame_sample_points(pose, spec);
        let (w, d) = (spec.scanlines, spec.depth_samples);
        let mut maps = ParamMaps::zeros(w, d);
        for (i, p) in points.iter().enumerate() {
            let v = self.sample(*p);
            maps.attenuation.data[i] = v[0];
            maps.reflectance.data[i] = v[1];
            maps.border_prob.data[i] = v[2];
            maps.scatter_density.data[i] = v[3];
            maps.scatter_amplitude.data[i] = v[4];
        }
        Ok(maps)
    }
}

fn split(g: f64, n: usize) -> (usize, f64) {
    let i = (g.floor() as usize).min(n - 1);
    (i, g - i as f64)
}

/// Rasterize a phantom spec onto grid nodes. Walking each (x, z) column
/// downward in y, the first node of a new tissue becomes a border node:
/// border probability one and that tissue's reflectance. All other
/// nodes carry zero for both. The top node is the coupling surface,
/// never a border.
pub fn build_phantom(spec: &PhantomSpec) -> Result<ParamVolume> {
    spec.validate()?;
    let nodes = |extent: f64, voxel: f64| (extent / voxel).floor() as usize + 1;
    let nx = nodes(spec.extent_mm[0], spec.voxel_mm);
    let ny = nodes(spec.extent_mm[1], spec.voxel_mm);
    let nz = nodes(spec.extent_mm[2], spec.voxel_mm);
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::InvalidPhantom {
            detail: format!("grid {nx}x{ny}x{nz} too small for interpolation"),
        });
    }
    let n = nx * ny * nz;
    let bg = &spec.tissues[spec.tissue_index(&spec.background)?];
    let mut vol = ParamVolume {
        nx,
        ny,
        nz,
        voxel_mm: spec.voxel_mm,
        attenuation: vec![0.0; n],
        reflectance: vec![0.0; n],
        border_prob: vec![0.0; n],
        scatter_density: vec![0.0; n],
        scatter_amplitude: vec![0.0; n],
        background: [
            bg.attenuation,
            0.0,
            0.0,
            bg.scatter_density,
            bg.scatter_amplitude,
        ],
    };
    for ix in 0..nx {
        for iz in 0..nz {
            let mut prev: Option<usize> = None;
            for iy in 0..ny {
                let p = Vec3::new(
                    ix as f64 * spec.voxel_mm,
                    iy as f64 * spec.voxel_mm,
                    iz as f64 * spec.voxel_mm,
                );
                let t = spec.tissue_at(p)?;
                let tissue = &spec.tissues[t];
                let i = vol.idx(ix, iy, iz);
                vol.attenuation[i] = tissue.attenuation;
                vol.scatter_density[i] = tissue.scatter_density;
                vol.scatter_amplitude[i] = tissue.scatter_amplitude;
                if prev.is_some() && prev != Some(t) {
                    vol.border_prob[i] = 1.0;
                    vol.reflectance[i] = tissue.reflectance;
                }
                prev = Some(t);
            }
        }
    }
    Ok(vol)
}

/// Swept probe path: frame i sits at start + i * step, tilted about the
/// lateral axis by a fixed angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    pub start_mm: [f64; 3],
    pub step_mm: [f64; 3],
    pub tilt_deg: f64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config(String::from("trajectory with zero frames")));
        }
        if self.tilt_deg.abs() > MAX_TILT_DEG {
            return Err(Error::config(format!(
                "tilt {} deg exceeds the {} deg limit",
                self.tilt_deg, MAX_TILT_DEG
            )));
        }
        Ok(())
    }

    pub fn pose_for_frame(&self, frame: usize) -> Pose {
        let t = Vec3::new(
            self.start_mm[0] + frame as f64 * self.step_mm[0],
            self.start_mm[1] + frame as f64 * self.step_mm[1],
            self.start_mm[2] + frame as f64 * self.step_mm[2],
        );
        Pose::translation(t).compose(&Pose::rot_x(self.tilt_deg.to_radians()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    pub role: SweepRole,
    pub trajectory: TrajectorySpec,
}

/// A phantom plus the acquisition program run over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub phantom: PhantomSpec,
    pub frame: FrameSpec,
    pub sweeps: Vec<SweepSpec>,
}

impl SceneSpec {
    /// Full demonstration scene: four tilted training sweeps, one
    /// perpendicular test sweep, two tilted test sweeps.
    pub fn demo() -> SceneSpec {
        SceneSpec {
            phantom: PhantomSpec::layered_with_reflector(),
            frame: demo_frame_spec(),
            sweeps: demo_sweeps(&[-20.0, -10.0, 10.0, 20.0], &[0.0, -15.0, 15.0]),
        }
    }

    /// Reduced scene for fast end-to-end runs: the four tilted training
    /// sweeps and the perpendicular test sweep only.
    pub fn compact() -> SceneSpec {
        SceneSpec {
            phantom: PhantomSpec::layered_with_reflector(),
            frame: demo_frame_spec(),
            sweeps: demo_sweeps(&[-20.0, -10.0, 10.0, 20.0], &[0.0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.frame.validate()?;
        if self.sweeps.is_empty() {
            return Err(Error::EmptyInput { what: "sweeps" });
        }
        for s in &self.sweeps {
            s.trajectory.validate()?;
        }
        Ok(())
    }
}

fn demo_frame_spec() -> FrameSpec {
    FrameSpec {
        scanlines: 64,
        depth_samples: 96,
        lateral_spacing_mm: 0.8,
        axial_spacing_mm: 0.6,
    }
}

fn demo_sweeps(train_tilts: &[f64], test_tilts: &[f64]) -> Vec<SweepSpec> {
    let traj = |tilt: f64| TrajectorySpec {
        frames: 50,
        start_mm: [26.0, 0.0, 20.0],
        step_mm: [0.0, 0.0, 1.0],
        tilt_deg: tilt,
    };
    let label = |role: &str, tilt: f64| {
        if tilt == 0.0 {
            format!("{role}-perpendicular")
        } else {
            format!("{role}-tilt{tilt:+.0}")
        }
    };
    let mut sweeps = Vec::new();
    for &t in train_tilts {
        sweeps.push(SweepSpec {
            name: label("train", t),
            role: SweepRole::Train,
            trajectory: traj(t),
        });
    }
    for &t in test_tilts {
        sweeps.push(SweepSpec {
            name: label("test", t),
            role: SweepRole::Test,
            trajectory: traj(t),
        });
    }
    sweeps
}

/// One simulated frame: where it was taken, what the probe recorded,
/// and the parameter maps it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedFrame {
    pub pose: Pose,
    pub echo: Grid,
    pub maps: ParamMaps,
}

/// Render every frame of a sweep from the rasterized phantom. The frame
/// index feeds the per-frame draw streams, so two sweeps simulated with
/// the same seed and trajectory are identical.
pub fn simulate_sweep(
    volume: &ParamVolume,
    frame: &FrameSpec,
    trajectory: &TrajectorySpec,
    config: &RenderConfig,
    seed: u64,
) -> Result<Vec<SimulatedFrame>> {
    trajectory.validate()?;
    let mut frames = Vec::with_capacity(trajectory.frames);
    for i in 0..trajectory.frames {
        let pose = trajectory.pose_for_frame(i);
        let maps = volume.sample_frame(&pose, frame)?;
        let rendered = render_param_maps(&maps, frame, config, seed, i as u64)?;
        frames.push(SimulatedFrame {
            pose,
            echo: rendered.echo,
            maps,
        });
    }
    Ok(frames)
}
