//! Optimization of the tissue network against recorded sweeps.
//!
//! Each iteration renders one whole training frame from the network
//! through the differentiable pipeline, scores it against the recorded
//! echo image, and applies an Adam step to the network weights. Frames
//! rotate in a seed-shuffled round robin, reshuffled every epoch.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{frame_sample_points, FrameSpec, Pose, Vec3, VolumeBounds};
use crate::grid::{Grid, ParamMaps};
use crate::inr::{intensity_field, tissue_field, EncodingConfig, Mlp, MlpConfig};
use crate::loss::{combined_loss, ssim_value, LossConfig, ScoreStats};
use crate::renderer::{render_frame, RenderConfig};
use crate::rng::derive_seed;

const SALT_INIT: u64 = 0x494e_4954;
const SALT_DRAW: u64 = 0x4452_4157;
const SALT_SHUFFLE: u64 = 0x5348_5546;

/// What the network's output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Five tissue channels driven through the physics renderer.
    Ultra,
    /// One channel read directly as image intensity, no renderer.
    NoRenderBaseline,
}

impl ModelVariant {
    pub fn output_dim(self) -> usize {
        match self {
            ModelVariant::Ultra => 5,
            ModelVariant::NoRenderBaseline => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Ultra => "ultra",
            ModelVariant::NoRenderBaseline => "no-render-baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate halves each time this many steps complete.
    pub lr_halflife: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    pub encoding: EncodingConfig,
    pub mlp: MlpConfig,
    pub render: RenderConfig,
    pub loss: LossConfig,
    /// Symmetric fractional enlargement of the training-point bounds.
    pub bounds_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            learning_rate: 5e-4,
            lr_halflife: 2500,
            seed: 7,
            variant: ModelVariant::Ultra,
            encoding: EncodingConfig::default(),
            mlp: MlpConfig::default(),
            render: RenderConfig::default(),
            loss: LossConfig::default(),
            bounds_margin: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.lr_halflife == 0 {
            return Err(Error::config(String::from("lr_halflife must be nonzero")));
        }
        if !(self.bounds_margin >= 0.0) {
            return Err(Error::config(format!(
                "bounds margin {} must be non-negative",
                self.bounds_margin
            )));
        }
        self.loss.validate()?;
        let mut mlp = self.mlp;
        mlp.output_dim = self.variant.output_dim();
        mlp.validate()
    }
}

/// Trained (or initialized) network plus the world box its inputs are
/// normalized against.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub mlp: Mlp,
    pub bounds: VolumeBounds,
}

impl Model {
    /// Fresh network with the variant's output width, weights seeded
    /// from the training seed.
    pub fn init(config: &TrainConfig, bounds: VolumeBounds) -> Result<Model> {
        config.validate()?;
        let mut mlp_cfg = config.mlp;
        mlp_cfg.output_dim = config.variant.output_dim();
        let mlp = Mlp::init(
            config.encoding,
            mlp_cfg,
            derive_seed(config.seed, SALT_INIT),
        )?;
        Ok(Model {
            variant: config.variant,
            mlp,
            bounds,
        })
    }

    fn normalized_frame_points(&self, pose: &Pose, spec: &FrameSpec) -> Vec<Vec3> {
        frame_sample_points(pose, spec)
            .into_iter()
            .map(|p| self.bounds.normalize(p))
            .collect()
    }

    /// Synthesized echo image of one frame as a [scanlines, depth]
    /// tensor on the given tape.
    pub fn echo_tensor(
        &self,
        tape: &mut Tape<f32>,
        params: &[crate::diff::Tensor],
        pose: &Pose,
        spec: &FrameSpec,
        render: &RenderConfig,
        seed: u64,
        frame: u64,
    ) -> Result<crate::diff::Tensor> {
        let points = self.normalized_frame_points(pose, spec);
        let raw = self.mlp.query(tape, params, &points)?;
        match self.variant {
            ModelVariant::Ultra => {
                let field = tissue_field(tape, raw)?;
                let (echo, _) = render_frame(tape, &field, spec, render, seed, frame)?;
                Ok(echo)
            }
            ModelVariant::NoRenderBaseline => {
                let img = intensity_field(tape, raw)?;
                tape.reshape(img, vec![spec.scanlines, spec.depth_samples])
            }
        }
    }

    /// Render a frame from an arbitrary pose, off the gradient tape.
    pub fn render_view(
        &self,
        pose: &Pose,
        spec: &FrameSpec,
        render: &RenderConfig,
        seed: u64,
        frame: u64,
    ) -> Result<Grid> {
        let mut tape: Tape<f32> = Tape::new();
        tape.set_recording(false);
        let params = self.mlp.emit_params(&mut tape)?;
        let echo = self.echo_tensor(&mut tape, &params, pose, spec, render, seed, frame)?;
        Grid::from_vec(
            spec.scanlines,
            spec.depth_samples,
            tape.value(echo).to_vec(),
        )
    }

    /// The five learned tissue maps over a frame's sample grid. Only
    /// the renderer-driven variant stores tissue channels.
    pub fn decompose_view(&self, pose: &Pose, spec: &FrameSpec) -> Result<ParamMaps> {
        if self.variant != ModelVariant::Ultra {
            return Err(Error::VariantMismatch {
                expected: String::from(ModelVariant::Ultra.name()),
                got: String::from(self.variant.name()),
            });
        }
        spec.validate()?;
        let mut tape: Tape<f32> = Tape::new();
        tape.set_recording(false);
        let params = self.mlp.emit_params(&mut tape)?;
        let points = self.normalized_frame_points(pose, spec);
        let raw = self.mlp.query(&mut tape, &params, &points)?;
        let field = tissue_field(&mut tape, raw)?;
        let (w, d) = (spec.scanlines, spec.depth_samples);
        let grab = |t: crate::diff::Tensor| Grid::from_vec(w, d, tape.value(t).to_vec());
        Ok(ParamMaps {
            attenuation: grab(field.attenuation)?,
            reflectance: grab(field.reflectance)?,
            border_prob: grab(field.border_prob)?,
            scatter_density: grab(field.scatter_density)?,
            scatter_amplitude: grab(field.scatter_amplitude)?,
        })
    }
}

/// Tight box around every sample point of the given posed frames,
/// symmetrically expanded by the margin fraction.
pub fn bounds_for_frames(poses: &[&Pose], spec: &FrameSpec, margin: f64) -> Result<VolumeBounds> {
    if poses.is_empty() {
        return Err(Error::EmptyInput {
            what: "poses for bounds",
        });
    }
    let mut points = Vec::new();
    for pose in poses {
        points.extend(frame_sample_points(pose, spec));
    }
    Ok(VolumeBounds::from_points(points)?.expanded(margin))
}

/// Adam with a step-halving schedule. Moments are kept in f64.
struct Adam {
    lr0: f64,
    halflife: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr0: f64, halflife: usize, sizes: &[usize]) -> Adam {
        Adam {
            lr0,
            halflife,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn lr(&self) -> f64 {
        // t is the number of completed steps when the rate is applied.
        self.lr0 * 0.5f64.powi((self.t / self.halflife) as i32)
    }

    fn step(&mut self, params: &mut [crate::inr::Param], grads: &[Option<&[f32]>]) {
        let lr = self.lr();
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in param.data.iter_mut().enumerate() {
                let g = grad[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub iterations_done: usize,
    pub losses: Vec<f64>,
}

/// Fit the network to the training frames. `progress` sees every
/// iteration's loss. Fails on a non-finite loss rather than continuing
/// with poisoned weights.
pub fn train(
    frames: &[(&Pose, &Grid)],
    spec: &FrameSpec,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainedModel> {
    if frames.is_empty() {
        return Err(Error::EmptyInput {
            what: "training frames",
        });
    }
    spec.validate()?;
    config.validate()?;
    for (_, echo) in frames {
        if echo.scanlines != spec.scanlines || echo.depth != spec.depth_samples {
            return Err(Error::ShapeMismatch {
                op: "train",
                lhs: vec![echo.scanlines, echo.depth],
                rhs: vec![spec.scanlines, spec.depth_samples],
            });
        }
    }
    let poses: Vec<&Pose> = frames.iter().map(|(p, _)| *p).collect();
    let bounds = bounds_for_frames(&poses, spec, config.bounds_margin)?;
    let mut model = Model::init(config, bounds)?;

    let sizes: Vec<usize> = model.mlp.params.iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(config.learning_rate, config.lr_halflife, &sizes);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut losses = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let pos = iter % frames.len();
        if pos == 0 {
            let epoch = (iter / frames.len()) as u64;
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(config.seed, SALT_SHUFFLE ^ epoch));
            order.shuffle(&mut rng);
        }
        let frame_idx = order[pos];
        let (pose, echo) = frames[frame_idx];

        let mut tape: Tape<f32> = Tape::new();
        let params = model.mlp.emit_params(&mut tape)?;
        let draw_seed = derive_seed(derive_seed(config.seed, SALT_DRAW), iter as u64);
        let predicted = model.echo_tensor(
            &mut tape,
            &params,
            pose,
            spec,
            &config.render,
            draw_seed,
            frame_idx as u64,
        )?;
        let target = tape.leaf(echo.data.clone(), vec![spec.scanlines, spec.depth_samples])?;
        let loss = combined_loss(&mut tape, predicted, target, &config.loss)?;
        let value = tape.scalar_value(loss)? as f64;
        if !value.is_finite() {
            return Err(Error::NanLoss { iteration: iter });
        }
        let store = tape.backward(loss)?;
        let grads: Vec<Option<&[f32]>> = params.iter().map(|&t| store.get(t)).collect();
        adam.step(&mut model.mlp.params, &grads);
        losses.push(value);
        progress(iter, value);
    }

    Ok(TrainedModel {
        model,
        config: *config,
        iterations_done: config.iterations,
        losses,
    })
}

/// Mean structural similarity of rendered views against recorded
/// frames, one score per frame.
pub fn evaluate(
    model: &Model,
    frames: &[(&Pose, &Grid)],
    spec: &FrameSpec,
    render: &RenderConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<ScoreStats> {
    if frames.is_empty() {
        return Err(Error::EmptyInput {
            what: "evaluation frames",
        });
    }
    let mut scores = Vec::with_capacity(frames.len());
    for (i, (pose, echo)) in frames.iter().enumerate() {
        let view = model.render_view(pose, spec, render, seed, i as u64)?;
        scores.push(ssim_value(&view, echo, &loss.ssim)?);
    }
    ScoreStats::from_scores(scores)
}

/// Per-frame scores as tab-separated `frame<TAB>ssim` rows.
pub fn write_scores_tsv(path: &Path, stats: &ScoreStats) -> Result<()> {
    let mut text = String::from("frame\tssim\n");
    for (i, s) in stats.per_frame.iter().enumerate() {
        text.push_str(&format!("{i}\t{s}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const CHECKPOINT_MAGIC: &[u8] = b"UNRF1\n";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    bounds: VolumeBounds,
    iterations: usize,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

/// Binary checkpoint: magic line, one-line JSON header, then the raw
/// little-endian f32 weights in parameter order.
pub fn save_checkpoint(path: &Path, trained: &TrainedModel) -> Result<()> {
    let header = CheckpointHeader {
        config: trained.config,
        bounds: trained.model.bounds,
        iterations: trained.iterations_done,
        params: trained
            .model
            .mlp
            .params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint {
        detail: e.to_string(),
    })?;
    bytes.extend_from_slice(json.as_bytes());
    bytes.push(b'\n');
    for p in &trained.model.mlp.params {
        for w in &p.data {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint {
            detail: format!("{}: not a checkpoint (bad magic)", path.display()),
        });
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint {
            detail: format!("{}: missing header line", path.display()),
        })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..header_end]).map_err(|e| Error::Checkpoint {
            detail: format!("{}: {e}", path.display()),
        })?;
    let mut model = Model::init(&header.config, header.bounds)?;
    if model.mlp.params.len() != header.params.len() {
        return Err(Error::Checkpoint {
            detail: format!(
                "{}: header lists {} parameters, the configuration builds {}",
                path.display(),
                header.params.len(),
                model.mlp.params.len()
            ),
        });
    }
    let mut cursor = CHECKPOINT_MAGIC.len() + header_end + 1;
    for (param, meta) in model.mlp.params.iter_mut().zip(&header.params) {
        if param.name != meta.name || param.shape != meta.shape {
            return Err(Error::Checkpoint {
                detail: format!(
                    "{}: parameter {} {:?} does not match stored {} {:?}",
                    path.display(),
                    param.name,
                    param.shape,
                    meta.name,
                    meta.shape
                ),
            });
        }
        let n = param.numel() * 4;
        if bytes.len() < cursor + n {
            return Err(Error::Checkpoint {
                detail: format!("{}: weight payload truncated", path.display()),
            });
        }
        for (j, chunk) in bytes[cursor..cursor + n].chunks_exact(4).enumerate() {
            param.data[j] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        cursor += n;
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint {
            detail: format!(
                "{}: {} trailing bytes after the weights",
                path.display(),
                bytes.len() - cursor
            ),
        });
    }
    Ok(TrainedModel {
        model,
        config: header.config,
        iterations_done: header.iterations,
        losses: Vec::new(),
    })
}
