//! On-disk sweep datasets.
//!
//! Layout under a dataset root:
//!   manifest.json
//!   sweeps/<name>/poses.txt                 one 4x4 row-major pose per line
//!   sweeps/<name>/frames/frame_0000.pgm     16-bit echo images
//!   sweeps/<name>/gt/frame_0000_<channel>.pgm
//!
//! Echo images store value / echo_scale against a 65535 maxval, which
//! round-trips exactly under requantization. Ground-truth attenuation is
//! normalized by its per-frame maximum before writing; the other four
//! channels are already in [0, 1].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameSpec, Pose};
use crate::grid::{Grid, ParamMaps};
use crate::phantom::{SimulatedFrame, SweepRole, SweepSpec};

pub const DATASET_FORMAT: &str = "echofield-dataset-v1";

/// Echo values live in [0, 2): reflection and backscatter are each
/// bounded by the unit incident intensity, so their sum fits this fixed
/// quantization scale losslessly.
pub const ECHO_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    pub role: SweepRole,
    pub tilt_deg: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub frame: FrameSpec,
    pub echo_scale: f64,
    pub seed: u64,
    pub sampling: String,
    pub sweeps: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepData {
    pub entry: SweepEntry,
    pub poses: Vec<Pose>,
    pub echoes: Vec<Grid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub sweeps: Vec<SweepData>,
}

impl Dataset {
    /// Every (pose, echo) pair of the training sweeps, in sweep order.
    pub fn training_frames(&self) -> Vec<(&Pose, &Grid)> {
        self.frames_with_role(SweepRole::Train)
    }

    pub fn test_frames(&self) -> Vec<(&Pose, &Grid)> {
        self.frames_with_role(SweepRole::Test)
    }

    fn frames_with_role(&self, role: SweepRole) -> Vec<(&Pose, &Grid)> {
        let mut out = Vec::new();
        for sweep in self.sweeps.iter().filter(|s| s.entry.role == role) {
            out.extend(sweep.poses.iter().zip(sweep.echoes.iter()));
        }
        out
    }

    pub fn sweep(&self, name: &str) -> Option<&SweepData> {
        self.sweeps.iter().find(|s| s.entry.name == name)
    }
}

fn frame_file(index: usize) -> String {
    format!("frame_{index:04}.pgm")
}

fn gt_file(index: usize, channel: &str) -> String {
    format!("frame_{index:04}_{channel}.pgm")
}

/// Write a grid as a binary 16-bit PGM. Values are divided by `scale`,
/// clamped to [0, 1], and rounded to the 65535 range. Image columns are
/// scanlines, rows are depth samples.
pub fn write_pgm(path: &Path, grid: &Grid, scale: f64) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    emit(format!("P5\n{} {}\n65535\n", grid.scanlines, grid.depth).as_bytes())?;
    for d in 0..grid.depth {
        for s in 0..grid.scanlines {
            let v = (grid.at(s, d) as f64 / scale).clamp(0.0, 1.0);
            let q = (v * 65535.0).round() as u16;
            emit(&q.to_be_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a binary PGM into a grid of fractions in [0, 1] (value divided
/// by the file's maxval). Accepts 8- and 16-bit payloads and header
/// comments.
pub fn read_pgm(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: String::from("truncated header"),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("expected P5, found {magic}"),
        });
    }
    let parse_dim = |t: String| -> Result<usize> {
        t.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad header number {t}"),
        })
    };
    let width = parse_dim(token(&bytes)?)?;
    let height = parse_dim(token(&bytes)?)?;
    let maxval = parse_dim(token(&bytes)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1;
    let wide = maxval > 255;
    let expected = width * height * if wide { 2 } else { 1 };
    if bytes.len() < pos + expected {
        return Err(Error::CountMismatch {
            path: path.to_path_buf(),
            detail: format!(
                "payload holds {} bytes, header promises {expected}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    let mut grid = Grid::zeros(width, height);
    for d in 0..height {
        for s in 0..width {
            let q = if wide {
                let b = &bytes[pos..pos + 2];
                pos += 2;
                u16::from_be_bytes([b[0], b[1]]) as u32
            } else {
                let b = bytes[pos];
                pos += 1;
                b as u32
            };
            grid.set(s, d, q as f32 / maxval as f32);
        }
    }
    Ok(grid)
}

/// One pose per line: 16 row-major values, shortest round-trip decimals.
pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut text = String::new();
    for pose in poses {
        let line: Vec<String> = pose.m.iter().map(|v| format!("{v}")).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut m = [0.0f64; 16];
        let mut count = 0;
        for tok in line.split_whitespace() {
            if count == 16 {
                count += 1;
                break;
            }
            m[count] = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("bad number {tok}"),
            })?;
            count += 1;
        }
        if count != 16 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("expected 16 values per pose, found {count}"),
            });
        }
        poses.push(Pose::from_matrix(m).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(poses)
}

/// Attenuation normalized by its frame maximum; unchanged if all zero.
pub fn normalize_attenuation(grid: &Grid) -> Grid {
    let max = grid.max();
    if max <= 0.0 {
        return grid.clone();
    }
    Grid::from_fn(grid.scanlines, grid.depth, |s, d| grid.at(s, d) / max)
}

/// Write a complete dataset: manifest, poses, echo frames, and the five
/// ground-truth channel images per frame.
pub fn save_dataset(
    root: &Path,
    frame: &FrameSpec,
    seed: u64,
    sampling: &str,
    sweeps: &[(SweepSpec, Vec<SimulatedFrame>)],
) -> Result<()> {
    let manifest = DatasetManifest {
        format: String::from(DATASET_FORMAT),
        frame: *frame,
        echo_scale: ECHO_SCALE,
        seed,
        sampling: String::from(sampling),
        sweeps: sweeps
            .iter()
            .map(|(spec, frames)| SweepEntry {
                name: spec.name.clone(),
                role: spec.role,
                tilt_deg: spec.trajectory.tilt_deg,
                frames: frames.len(),
            })
            .collect(),
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    for (spec, frames) in sweeps {
        let dir = root.join("sweeps").join(&spec.name);
        let frames_dir = dir.join("frames");
        let gt_dir = dir.join("gt");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
        write_poses(&dir.join("poses.txt"), &poses)?;
        for (i, f) in frames.iter().enumerate() {
            write_pgm(&frames_dir.join(frame_file(i)), &f.echo, ECHO_SCALE)?;
            for (name, grid) in ParamMaps::channel_names().iter().zip(f.maps.channels()) {
                let image = if *name == "attenuation" {
                    normalize_attenuation(grid)
                } else {
                    (*grid).clone()
                };
                write_pgm(&gt_dir.join(gt_file(i, name)), &image, 1.0)?;
            }
        }
    }
    Ok(())
}

/// Load manifest, poses, and echo frames. Ground truth stays on disk;
/// fetch single frames with [`load_gt_maps`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format {
            path: manifest_path,
            detail: format!(
                "format {} is not the supported {DATASET_FORMAT}",
                manifest.format
            ),
        });
    }
    manifest.frame.validate()?;
    let mut sweeps = Vec::with_capacity(manifest.sweeps.len());
    for entry in &manifest.sweeps {
        let dir = root.join("sweeps").join(&entry.name);
        let poses_path = dir.join("poses.txt");
        let poses = read_poses(&poses_path)?;
        if poses.len() != entry.frames {
            return Err(Error::CountMismatch {
                path: poses_path,
                detail: format!(
                    "sweep {} promises {} frames, poses.txt holds {}",
                    entry.name,
                    entry.frames,
                    poses.len()
                ),
            });
        }
        let mut echoes = Vec::with_capacity(entry.frames);
        for i in 0..entry.frames {
            let path = dir.join("frames").join(frame_file(i));
            let fractions = read_pgm(&path)?;
            if fractions.scanlines != manifest.frame.scanlines
                || fractions.depth != manifest.frame.depth_samples
            {
                return Err(Error::CountMismatch {
                    path,
                    detail: format!(
                        "image {}x{} does not match the manifest frame {}x{}",
                        fractions.scanlines,
                        fractions.depth,
                        manifest.frame.scanlines,
                        manifest.frame.depth_samples
                    ),
                });
            }
            let scale = manifest.echo_scale as f32;
            echoes.push(Grid::from_fn(
                fractions.scanlines,
                fractions.depth,
                |s, d| fractions.at(s, d) * scale,
            ));
        }
        sweeps.push(SweepData {
            entry: entry.clone(),
            poses,
            echoes,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        sweeps,
    })
}

/// Ground-truth channel images of one frame, as stored (attenuation is
/// the per-frame normalized version).
pub fn load_gt_maps(root: &Path, sweep: &str, frame_index: usize) -> Result<ParamMaps> {
    let gt_dir = root.join("sweeps").join(sweep).join("gt");
    let mut grids = Vec::with_capacity(5);
    for name in ParamMaps::channel_names() {
        grids.push(read_pgm(&gt_dir.join(gt_file(frame_index, name)))?);
    }
    let mut it = grids.into_iter();
    Ok(ParamMaps {
        attenuation: it.next().unwrap(),
        reflectance: it.next().unwrap(),
        border_prob: it.next().unwrap(),
        scatter_density: it.next().unwrap(),
        scatter_amplitude: it.next().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, simulate_sweep, PhantomSpec, TrajectorySpec};
    use crate::renderer::RenderConfig;
    use crate::rng::DrawKey;

    fn tiny_frame() -> FrameSpec {
        FrameSpec {
            scanlines: 16,
            depth_samples: 24,
            lateral_spacing_mm: 3.0,
            axial_spacing_mm: 2.2,
        }
    }

    fn tiny_sweeps() -> Vec<(SweepSpec, Vec<SimulatedFrame>)> {
        let vol = build_phantom(&PhantomSpec::layered_with_reflector()).unwrap();
        let cfg = RenderConfig::default();
        let mut out = Vec::new();
        for (name, role, tilt) in [
            ("train-a", SweepRole::Train, 10.0),
            ("test-a", SweepRole::Test, 0.0),
        ] {
            let traj = TrajectorySpec {
                frames: 3,
                start_mm: [26.0, 0.0, 40.0],
                step_mm: [0.0, 0.0, 2.0],
                tilt_deg: tilt,
            };
            let frames = simulate_sweep(&vol, &tiny_frame(), &traj, &cfg, 5).unwrap();
            out.push((
                SweepSpec {
                    name: String::from(name),
                    role,
                    trajectory: traj,
                },
                frames,
            ));
        }
        out
    }

    #[test]
    fn pgm_requantization_is_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let key = DrawKey {
            seed: 3,
            frame: 0,
            stream: 60,
        };
        let grid = Grid::from_fn(9, 7, |s, d| 1.9 * key.uniform((s * 7 + d) as u64) as f32);
        let p1 = dir.path().join("a.pgm");
        let p2 = dir.path().join("b.pgm");
        write_pgm(&p1, &grid, ECHO_SCALE).unwrap();
        let back = read_pgm(&p1).unwrap();
        let restored = Grid::from_fn(9, 7, |s, d| back.at(s, d) * ECHO_SCALE as f32);
        for (a, b) in grid.data.iter().zip(&restored.data) {
            assert!((a - b).abs() <= ECHO_SCALE as f32 / 65535.0);
        }
        write_pgm(&p2, &restored, ECHO_SCALE).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn poses_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let poses: Vec<Pose> = (0..4)
            .map(|i| {
                Pose::translation(crate::geometry::Vec3::new(0.1 * i as f64, -2.5, 7.0))
                    .compose(&Pose::rot_x(0.3 + 0.01 * i as f64))
            })
            .collect();
        let path = dir.path().join("poses.txt");
        write_poses(&path, &poses).unwrap();
        let back = read_poses(&path).unwrap();
        assert_eq!(poses.len(), back.len());
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.m, b.m);
        }
    }

    #[test]
    fn dataset_round_trips_and_resaves_identically() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let sweeps = tiny_sweeps();
        save_dataset(&root, &tiny_frame(), 5, "hard", &sweeps).unwrap();
        let ds = load_dataset(&root).unwrap();
        assert_eq!(ds.manifest.sweeps.len(), 2);
        assert_eq!(ds.training_frames().len(), 3);
        assert_eq!(ds.test_frames().len(), 3);
        for ((_, sim), loaded) in sweeps.iter().zip(&ds.sweeps) {
            for (f, (pose, echo)) in sim
                .iter()
                .zip(loaded.poses.iter().zip(loaded.echoes.iter()))
            {
                assert_eq!(f.pose.m, pose.m);
                for (a, b) in f.echo.data.iter().zip(&echo.data) {
                    assert!((a - b).abs() <= ECHO_SCALE as f32 / 65535.0);
                }
            }
        }

        // Saving what was loaded reproduces every byte.
        let again = dir.path().join("ds2");
        let resim: Vec<(SweepSpec, Vec<SimulatedFrame>)> = sweeps
            .iter()
            .zip(&ds.sweeps)
            .map(|((spec, sim), loaded)| {
                let frames = sim
                    .iter()
                    .zip(loaded.echoes.iter())
                    .enumerate()
                    .map(|(i, (f, echo))| SimulatedFrame {
                        pose: f.pose,
                        echo: echo.clone(),
                        maps: load_gt_maps(&root, &spec.name, i).unwrap(),
                    })
                    .collect();
                (spec.clone(), frames)
            })
            .collect();
        save_dataset(&again, &tiny_frame(), 5, "hard", &resim).unwrap();
        compare_trees(&root, &again);
    }

    fn compare_trees(a: &Path, b: &Path) {
        let mut names: Vec<PathBuf> = Vec::new();
        collect_files(a, a, &mut names);
        assert!(!names.is_empty());
        for rel in names {
            let left = fs::read(a.join(&rel)).unwrap();
            let right = fs::read(b.join(&rel)).unwrap();
            assert_eq!(left, right, "{} differs", rel.display());
        }
    }

    fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                collect_files(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }

    #[test]
    fn ground_truth_attenuation_is_frame_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let sweeps = tiny_sweeps();
        save_dataset(&root, &tiny_frame(), 5, "hard", &sweeps).unwrap();
        let gt = load_gt_maps(&root, "train-a", 0).unwrap();
        assert!((gt.attenuation.max() - 1.0).abs() < 1e-4);
        for g in gt.channels() {
            assert!(g.min() >= 0.0 && g.max() <= 1.0);
        }
    }

    #[test]
    fn corrupt_inputs_fail_with_diagnostics() {
        let dir = tempfile::tempdir().unwrap();

        let bad_magic = dir.path().join("bad.pgm");
        fs::write(&bad_magic, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(matches!(read_pgm(&bad_magic), Err(Error::Format { .. })));

        let truncated = dir.path().join("short.pgm");
        fs::write(&truncated, b"P5\n4 4\n65535\nxx").unwrap();
        assert!(matches!(
            read_pgm(&truncated),
            Err(Error::CountMismatch { .. })
        ));

        let poses = dir.path().join("poses.txt");
        fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0\n").unwrap();
        match read_poses(&poses) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected a parse error, got {other:?}"),
        }

        let root = dir.path().join("ds");
        let sweeps = tiny_sweeps();
        save_dataset(&root, &tiny_frame(), 5, "hard", &sweeps).unwrap();
        let manifest = root.join("manifest.json");
        let text = fs::read_to_string(&manifest)
            .unwrap()
            .replace(DATASET_FORMAT, "other-format");
        fs::write(&manifest, text).unwrap();
        assert!(matches!(load_dataset(&root), Err(Error::Format { .. })));
    }

    #[test]
    fn pose_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let sweeps = tiny_sweeps();
        save_dataset(&root, &tiny_frame(), 5, "hard", &sweeps).unwrap();
        let poses = root.join("sweeps").join("train-a").join("poses.txt");
        let text = fs::read_to_string(&poses).unwrap();
        let one_line: String = text.lines().take(1).collect::<Vec<_>>().join("\n") + "\n";
        fs::write(&poses, one_line).unwrap();
        assert!(matches!(
            load_dataset(&root),
            Err(Error::CountMismatch { .. })
        ));
    }
}
