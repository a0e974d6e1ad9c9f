//! Volume compounding: splatting posed frames into a shared intensity
//! volume and re-slicing it from arbitrary poses.
//!
//! Frames splat each sample to its nearest voxel node in a fixed frame
//! order; slicing interpolates trilinearly and reads zero outside the
//! volume.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{frame_sample_points, FrameSpec, Pose, Vec3, VolumeBounds};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompoundMethod {
    /// Average of every sample that lands in a voxel.
    Mean,
    /// Brightest sample that lands in a voxel.
    Max,
}

impl CompoundMethod {
    pub fn name(self) -> &'static str {
        match self {
            CompoundMethod::Mean => "mean",
            CompoundMethod::Max => "max",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "mean" => Ok(CompoundMethod::Mean),
            "max" => Ok(CompoundMethod::Max),
            other => Err(Error::config(format!(
                "unknown compounding method {other}, expected mean or max"
            ))),
        }
    }
}

/// Scalar intensity volume on grid nodes spaced `voxel_mm` apart, node
/// (0, 0, 0) at `bounds.min`. `hits` counts the samples splatted into
/// each node; unhit nodes hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_mm: f64,
    pub bounds: VolumeBounds,
    pub data: Vec<f32>,
    pub hits: Vec<u32>,
}

impl IntensityVolume {
    #[inline]
    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ny + iy) * self.nz + iz
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Trilinear intensity at a world point, zero outside the node box.
    pub fn sample(&self, p: Vec3) -> f32 {
        let g = Vec3::new(
            (p.x - self.bounds.min.x) / self.voxel_mm,
            (p.y - self.bounds.min.y) / self.voxel_mm,
            (p.z - self.bounds.min.z) / self.voxel_mm,
        );
        if g.x < 0.0
            || g.y < 0.0
            || g.z < 0.0
            || g.x > (self.nx - 1) as f64
            || g.y > (self.ny - 1) as f64
            || g.z > (self.nz - 1) as f64
        {
            return 0.0;
        }
        let cell = |v: f64, n: usize| -> (usize, f64) {
            let i = (v.floor() as usize).min(n - 1);
            (i, v - i as f64)
        };
        let (x0, fx) = cell(g.x, self.nx);
        let (y0, fy) = cell(g.y, self.ny);
        let (z0, fz) = cell(g.z, self.nz);
        let x1 = (x0 + 1).min(self.nx - 1);
        let y1 = (y0 + 1).min(self.ny - 1);
        let z1 = (z0 + 1).min(self.nz - 1);
        let at = |ix: usize, iy: usize, iz: usize| self.data[self.index(ix, iy, iz)] as f64;
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        lerp(c0, c1, fz) as f32
    }
}

/// Splat posed frames into a volume over `bounds`. Samples falling
/// outside the bounds are dropped.
pub fn compound(
    frames: &[(&Pose, &Grid)],
    spec: &FrameSpec,
    bounds: VolumeBounds,
    voxel_mm: f64,
    method: CompoundMethod,
) -> Result<IntensityVolume> {
    if frames.is_empty() {
        return Err(Error::EmptyInput {
            what: "frames to compound",
        });
    }
    if !(voxel_mm > 0.0) {
        return Err(Error::config(format!(
            "voxel size {voxel_mm} must be positive"
        )));
    }
    spec.validate()?;
    let size = bounds.size();
    let nodes = |extent: f64| (extent / voxel_mm).floor() as usize + 1;
    let (nx, ny, nz) = (nodes(size.x), nodes(size.y), nodes(size.z));
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::DegenerateBounds {
            detail: format!("volume grid {nx}x{ny}x{nz} too small for interpolation"),
        });
    }
    let n = nx * ny * nz;
    let mut vol = IntensityVolume {
        nx,
        ny,
        nz,
        voxel_mm,
        bounds,
        data: vec![0.0; n],
        hits: vec![0; n],
    };
    for (pose, grid) in frames {
        if grid.scanlines != spec.scanlines || grid.depth != spec.depth_samples {
            return Err(Error::ShapeMismatch {
                op: "compound",
                lhs: vec![grid.scanlines, grid.depth],
                rhs: vec![spec.scanlines, spec.depth_samples],
            });
        }
        let points = frame_sample_points(pose, spec);
        for (value, p) in grid.data.iter().zip(points) {
            let nearest = |v: f64, min: f64, n: usize| -> Option<usize> {
                let i = ((v - min) / voxel_mm).round();
                (i >= 0.0 && i <= (n - 1) as f64).then_some(i as usize)
            };
            let (Some(ix), Some(iy), Some(iz)) = (
                nearest(p.x, bounds.min.x, nx),
                nearest(p.y, bounds.min.y, ny),
                nearest(p.z, bounds.min.z, nz),
            ) else {
                continue;
            };
            let i = vol.index(ix, iy, iz);
            match method {
                CompoundMethod::Mean => vol.data[i] += value,
                CompoundMethod::Max => {
                    if vol.hits[i] == 0 || *value > vol.data[i] {
                        vol.data[i] = *value;
                    }
                }
            }
            vol.hits[i] += 1;
        }
    }
    if method == CompoundMethod::Mean {
        for (v, &h) in vol.data.iter_mut().zip(&vol.hits) {
            if h > 0 {
                *v /= h as f32;
            }
        }
    }
    Ok(vol)
}

/// Resample the volume on a posed frame grid.
pub fn slice_volume(vol: &IntensityVolume, pose: &Pose, spec: &FrameSpec) -> Result<Grid> {
    pose.validate()?;
    spec.validate()?;
    let points = frame_sample_points(pose, spec);
    let mut grid = Grid::zeros(spec.scanlines, spec.depth_samples);
    for (slot, p) in grid.data.iter_mut().zip(points) {
        *slot = vol.sample(p);
    }
    Ok(grid)
}

const VOLUME_MAGIC: &str = "ECHOVOL1";

/// Text header (magic, grid, voxel size, bounds, hint that hits follow)
/// then the node intensities and hit counts, little endian.
pub fn save_volume(path: &Path, vol: &IntensityVolume) -> Result<()> {
    let b = &vol.bounds;
    let mut bytes = format!(
        "{VOLUME_MAGIC}\n{} {} {}\n{}\n{} {} {}\n{} {} {}\n",
        vol.nx, vol.ny, vol.nz, vol.voxel_mm, b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z,
    )
    .into_bytes();
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for h in &vol.hits {
        bytes.extend_from_slice(&h.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<IntensityVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut line = || -> Result<&str> {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b'\n' {
            pos += 1;
        }
        if pos == bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: String::from("truncated header"),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: String::from("header is not utf-8"),
        })?;
        pos += 1;
        Ok(text)
    };
    if line()? != VOLUME_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing {VOLUME_MAGIC} magic"),
        });
    }
    let parse_fields = |text: &str, want: usize| -> Result<Vec<f64>> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad header numbers: {text}"),
            })?;
        if vals.len() != want {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected {want} header values, found {}", vals.len()),
            });
        }
        Ok(vals)
    };
    let dims = parse_fields(line()?, 3)?;
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let voxel_mm = parse_fields(line()?, 1)?[0];
    let mn = parse_fields(line()?, 3)?;
    let mx = parse_fields(line()?, 3)?;
    let bounds = VolumeBounds::new(
        Vec3::new(mn[0], mn[1], mn[2]),
        Vec3::new(mx[0], mx[1], mx[2]),
    )?;
    let n = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: String::from("volume dimensions overflow"),
        })?;
    let expected = n * 4 + n * 4;
    if bytes.len() != pos + expected {
        return Err(Error::CountMismatch {
            path: path.to_path_buf(),
            detail: format!(
                "payload holds {} bytes, header promises {expected}",
                bytes.len() - pos
            ),
        });
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[pos..pos + n * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    pos += n * 4;
    let mut hits = Vec::with_capacity(n);
    for chunk in bytes[pos..pos + n * 4].chunks_exact(4) {
        hits.push(u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(IntensityVolume {
        nx,
        ny,
        nz,
        voxel_mm,
        bounds,
        data,
        hits,
    })
}
