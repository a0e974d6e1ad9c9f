//! Poses, per-frame ray geometry, and volume normalization.
//!
//! World units are millimetres throughout. A frame is a W x D grid of
//! samples: scanline index w runs laterally (frame-local +x), depth index
//! d runs axially away from the transducer (frame-local +y). Scanline
//! origins sit on the transducer edge, centred laterally around the
//! frame-local origin.

use crate::error::{Error, Result};

pub const POSE_ORTHO_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Vec3::new(0.0, 0.0, 0.0)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Rigid transform from frame-local to world coordinates, stored as a
/// row-major 4x4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub m: [f64; 16],
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        Pose { m }
    }

    /// Validates rigidity: rotation block orthonormal with positive
    /// determinant, last row (0,0,0,1).
    pub fn from_matrix(m: [f64; 16]) -> Result<Self> {
        let pose = Pose { m };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.m;
        for (i, want) in [(12, 0.0), (13, 0.0), (14, 0.0), (15, 1.0)] {
            if (m[i] - want).abs() > POSE_ORTHO_TOL {
                return Err(Error::InvalidPose {
                    detail: format!("bottom row entry {i} is {}, expected {want}", m[i]),
                });
            }
        }
        // R . R^T = I
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += m[r * 4 + k] * m[c * 4 + k];
                }
                let want = if r == c { 1.0 } else { 0.0 };
                if (acc - want).abs() > POSE_ORTHO_TOL {
                    return Err(Error::InvalidPose {
                        detail: format!("rotation rows {r},{c} have dot {acc:.8}, expected {want}"),
                    });
                }
            }
        }
        let det = m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8])
            + m[2] * (m[4] * m[9] - m[5] * m[8]);
        if det < 0.0 {
            return Err(Error::InvalidPose {
                detail: format!("rotation determinant {det:.8} is negative (reflection)"),
            });
        }
        Ok(())
    }

    pub fn translation(t: Vec3) -> Self {
        let mut p = Pose::identity();
        p.m[3] = t.x;
        p.m[7] = t.y;
        p.m[11] = t.z;
        p
    }

    /// Rotation about the frame-local x axis (lateral), radians.
    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        let mut p = Pose::identity();
        p.m[5] = c;
        p.m[6] = -s;
        p.m[9] = s;
        p.m[10] = c;
        p
    }

    /// Rotation about the frame-local y axis (axial), radians.
    pub fn rot_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        let mut p = Pose::identity();
        p.m[0] = c;
        p.m[2] = s;
        p.m[8] = -s;
        p.m[10] = c;
        p
    }

    /// Rotation about the frame-local z axis (elevational), radians.
    pub fn rot_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        let mut p = Pose::identity();
        p.m[0] = c;
        p.m[1] = -s;
        p.m[4] = s;
        p.m[5] = c;
        p
    }

    /// self applied after `other`: (self * other) x.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut m = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += self.m[r * 4 + k] * other.m[k * 4 + c];
                }
                m[r * 4 + c] = acc;
            }
        }
        Pose { m }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
            m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
            m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11],
        )
    }

    pub fn rotate_vector(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[4] * v.x + m[5] * v.y + m[6] * v.z,
            m[8] * v.x + m[9] * v.y + m[10] * v.z,
        )
    }

    pub fn translation_part(&self) -> Vec3 {
        Vec3::new(self.m[3], self.m[7], self.m[11])
    }
}

/// Acquisition grid of one frame: scanline count, samples per scanline,
/// and physical spacings in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub scanlines: usize,
    pub depth_samples: usize,
    pub lateral_spacing_mm: f64,
    pub axial_spacing_mm: f64,
}

impl FrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scanlines == 0 || self.depth_samples == 0 {
            return Err(Error::config(format!(
                "frame grid {}x{} must be non-empty",
                self.scanlines, self.depth_samples
            )));
        }
        if self.lateral_spacing_mm <= 0.0 || self.axial_spacing_mm <= 0.0 {
            return Err(Error::config(format!(
                "frame spacings {}x{} mm must be positive",
                self.lateral_spacing_mm, self.axial_spacing_mm
            )));
        }
        Ok(())
    }

    /// Frame-local origin of scanline w, on the transducer edge.
    pub fn scanline_origin(&self, w: usize) -> Vec3 {
        let centre = (self.scanlines as f64 - 1.0) / 2.0;
        Vec3::new((w as f64 - centre) * self.lateral_spacing_mm, 0.0, 0.0)
    }

    pub fn width_mm(&self) -> f64 {
        (self.scanlines as f64 - 1.0) * self.lateral_spacing_mm
    }

    pub fn depth_mm(&self) -> f64 {
        (self.depth_samples as f64 - 1.0) * self.axial_spacing_mm
    }
}

/// One scanline in world coordinates: r(t) = origin + t * direction,
/// with t in millimetres and direction unit length.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin.add(self.direction.scale(t))
    }
}

/// World-space rays of every scanline of a posed frame, in scanline
/// order. All rays of a frame share one direction: the image's axial
/// axis pushed through the pose rotation.
pub fn rays_for_frame(pose: &Pose, spec: &FrameSpec) -> Vec<Ray> {
    let direction = pose.rotate_vector(Vec3::new(0.0, 1.0, 0.0));
    (0..spec.scanlines)
        .map(|w| Ray {
            origin: pose.transform_point(spec.scanline_origin(w)),
            direction,
        })
        .collect()
}

/// World positions of every sample of a posed frame, scanline-major:
/// index w * depth_samples + d, matching the frame grid layout. Sample d
/// sits at depth d * axial_spacing along its ray.
pub fn frame_sample_points(pose: &Pose, spec: &FrameSpec) -> Vec<Vec3> {
    let rays = rays_for_frame(pose, spec);
    let mut pts = Vec::with_capacity(spec.scanlines * spec.depth_samples);
    for ray in &rays {
        for d in 0..spec.depth_samples {
            pts.push(ray.at(d as f64 * spec.axial_spacing_mm));
        }
    }
    pts
}

/// Axis-aligned world box mapped onto the [-1, 1] cube for network
/// input.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl VolumeBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(max.x > min.x && max.y > min.y && max.z > min.z) {
            return Err(Error::DegenerateBounds {
                detail: format!(
                    "min ({}, {}, {}) must be strictly below max ({}, {}, {}) on every axis",
                    min.x, min.y, min.z, max.x, max.y, max.z
                ),
            });
        }
        Ok(VolumeBounds { min, max })
    }

    pub fn from_points<I: IntoIterator<Item = Vec3>>(points: I) -> Result<Self> {
        let mut it = points.into_iter();
        let first = it.next().ok_or(Error::EmptyInput {
            what: "bounds from points",
        })?;
        let (mut min, mut max) = (first, first);
        for p in it {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            min.z = min.z.min(p.z);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
            max.z = max.z.max(p.z);
        }
        VolumeBounds::new(min, max)
    }

    /// Grow symmetrically by `fraction` of each side length.
    pub fn expanded(&self, fraction: f64) -> VolumeBounds {
        let half = self.size().scale(fraction / 2.0);
        VolumeBounds {
            min: self.min.sub(half),
            max: self.max.add(half),
        }
    }

    pub fn size(&self) -> Vec3 {
        self.max.sub(self.min)
    }

    pub fn center(&self) -> Vec3 {
        self.min.add(self.max).scale(0.5)
    }

    /// World point to the [-1, 1] cube (min maps to -1, max to +1).
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        let s = self.size();
        Vec3::new(
            2.0 * (p.x - self.min.x) / s.x - 1.0,
            2.0 * (p.y - self.min.y) / s.y - 1.0,
            2.0 * (p.z - self.min.z) / s.z - 1.0,
        )
    }

    pub fn denormalize(&self, p: Vec3) -> Vec3 {
        let s = self.size();
        Vec3::new(
            self.min.x + (p.x + 1.0) * 0.5 * s.x,
            self.min.y + (p.y + 1.0) * 0.5 * s.y,
            self.min.z + (p.z + 1.0) * 0.5 * s.z,
        )
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        a.sub(b).norm() < tol
    }

    #[test]
    fn identity_pose_keeps_points() {
        let p = Pose::identity();
        let v = Vec3::new(1.0, -2.0, 3.0);
        assert_eq!(p.transform_point(v), v);
    }

    #[test]
    fn sheared_matrix_is_rejected() {
        let mut m = Pose::identity().m;
        m[1] = 0.2; // shear x by y
        let err = Pose::from_matrix(m).unwrap_err().to_string();
        assert!(err.contains("dot"), "{err}");
    }

    #[test]
    fn reflection_is_rejected() {
        let mut m = Pose::identity().m;
        m[0] = -1.0;
        assert!(Pose::from_matrix(m).is_err());
    }

    #[test]
    fn bad_bottom_row_is_rejected() {
        let mut m = Pose::identity().m;
        m[14] = 0.5;
        assert!(Pose::from_matrix(m).is_err());
    }

    #[test]
    fn rotation_about_x_tilts_axial_direction() {
        let a = 0.3_f64;
        let pose = Pose::rot_x(a);
        pose.validate().unwrap();
        let d = pose.rotate_vector(Vec3::new(0.0, 1.0, 0.0));
        assert!(close(d, Vec3::new(0.0, a.cos(), a.sin()), 1e-12));
        assert!((d.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scanline_origins_are_centred_on_transducer_edge() {
        let spec = FrameSpec {
            scanlines: 5,
            depth_samples: 10,
            lateral_spacing_mm: 2.0,
            axial_spacing_mm: 1.0,
        };
        assert_eq!(spec.scanline_origin(0), Vec3::new(-4.0, 0.0, 0.0));
        assert_eq!(spec.scanline_origin(2), Vec3::new(0.0, 0.0, 0.0));
        assert_eq!(spec.scanline_origin(4), Vec3::new(4.0, 0.0, 0.0));
    }

    #[test]
    fn sample_points_march_axially_from_translated_origin() {
        let spec = FrameSpec {
            scanlines: 3,
            depth_samples: 4,
            lateral_spacing_mm: 1.0,
            axial_spacing_mm: 0.5,
        };
        let pose = Pose::translation(Vec3::new(10.0, 20.0, 30.0));
        let pts = frame_sample_points(&pose, &spec);
        assert_eq!(pts.len(), 12);
        // w = 1 is the central scanline; d = 3 is 1.5 mm deep.
        assert!(close(pts[4 + 3], Vec3::new(10.0, 21.5, 30.0), 1e-12));
        // w = 0 sits one lateral spacing to the left.
        assert!(close(pts[3], Vec3::new(9.0, 21.5, 30.0), 1e-12));
    }

    #[test]
    fn tilted_frame_directions_follow_rotation() {
        let spec = FrameSpec {
            scanlines: 2,
            depth_samples: 2,
            lateral_spacing_mm: 1.0,
            axial_spacing_mm: 1.0,
        };
        let tilt = 0.2_f64;
        let pose = Pose::translation(Vec3::new(0.0, 0.0, 5.0)).compose(&Pose::rot_x(tilt));
        let rays = rays_for_frame(&pose, &spec);
        for r in &rays {
            assert!(close(
                r.direction,
                Vec3::new(0.0, tilt.cos(), tilt.sin()),
                1e-12
            ));
        }
        // Origins keep their lateral offsets; tilt is about the lateral axis.
        assert!(close(rays[0].origin, Vec3::new(-0.5, 0.0, 5.0), 1e-12));
        assert!(close(rays[1].origin, Vec3::new(0.5, 0.0, 5.0), 1e-12));
    }

    #[test]
    fn normalize_roundtrip_and_corners() {
        let b = VolumeBounds::new(Vec3::new(0.0, 10.0, -5.0), Vec3::new(4.0, 30.0, 5.0)).unwrap();
        assert!(close(
            b.normalize(b.min),
            Vec3::new(-1.0, -1.0, -1.0),
            1e-12
        ));
        assert!(close(b.normalize(b.max), Vec3::new(1.0, 1.0, 1.0), 1e-12));
        let p = Vec3::new(1.0, 12.0, 3.0);
        assert!(close(b.denormalize(b.normalize(p)), p, 1e-12));
    }

    #[test]
    fn expansion_grows_symmetrically() {
        let b = VolumeBounds::new(Vec3::zero(), Vec3::new(10.0, 20.0, 40.0)).unwrap();
        let e = b.expanded(0.05);
        assert!(close(e.min, Vec3::new(-0.25, -0.5, -1.0), 1e-12));
        assert!(close(e.max, Vec3::new(10.25, 20.5, 41.0), 1e-12));
    }

    #[test]
    fn degenerate_bounds_are_rejected() {
        assert!(VolumeBounds::new(Vec3::zero(), Vec3::new(1.0, 0.0, 1.0)).is_err());
        assert!(VolumeBounds::from_points([Vec3::zero(), Vec3::new(1.0, 1.0, 0.0)]).is_err());
    }

    #[test]
    fn bounds_cover_all_sample_points_of_a_sweep() {
        let spec = FrameSpec {
            scanlines: 8,
            depth_samples: 16,
            lateral_spacing_mm: 1.0,
            axial_spacing_mm: 1.0,
        };
        let mut all = Vec::new();
        for k in 0..5 {
            let pose = Pose::translation(Vec3::new(0.0, 0.0, k as f64));
            all.extend(frame_sample_points(&pose, &spec));
        }
        let b = VolumeBounds::from_points(all.iter().copied()).unwrap();
        for p in &all {
            assert!(b.contains(*p));
        }
    }
}
