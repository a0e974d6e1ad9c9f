//! The command bodies behind each subcommand.

use std::fs;
use std::path::Path;

use echofield_core::compound::{
    compound as compound_frames, load_volume, save_volume, slice_volume, CompoundMethod,
};
use echofield_core::dataset::{
    load_dataset, normalize_attenuation, save_dataset, write_pgm, Dataset, ECHO_SCALE,
};
use echofield_core::diff::gradcheck::{cross_width_suite, op_suite, CheckReport, TOL_F32, TOL_F64};
use echofield_core::geometry::Pose;
use echofield_core::inr::{EncodingConfig, MlpConfig};
use echofield_core::loss::{LossConfig, SsimConfig};
use echofield_core::phantom::{build_phantom, simulate_sweep, SceneSpec, SweepRole};
use echofield_core::renderer::{gradient_suite, RenderConfig, SamplingMode};
use echofield_core::rng::derive_seed;
use echofield_core::trainer::{
    bounds_for_frames, evaluate, load_checkpoint, save_checkpoint, write_scores_tsv, ModelVariant,
    TrainConfig, TrainedModel,
};
use echofield_core::ParamMaps;

use crate::config::Resolver;
use crate::{
    CliError, CompoundArgs, DecomposeArgs, EvalArgs, GradcheckArgs, RenderArgs, SimulateArgs,
    SliceArgs, TrainArgs,
};

/// Builds the sampling mode from its name plus an optional temperature.
/// A temperature with a non-relaxed mode is a contradiction, not a
/// silently ignored flag.
fn sampling_mode(name: &str, tau: Option<f64>) -> Result<SamplingMode, CliError> {
    let mut mode = SamplingMode::parse(name)?;
    if let Some(t) = tau {
        match &mut mode {
            SamplingMode::Relaxed { tau } => {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(CliError::Validation(format!(
                        "temperature {t} must be positive and finite"
                    )));
                }
                *tau = t;
            }
            other => {
                return Err(CliError::Validation(format!(
                    "a temperature only applies to relaxed sampling, mode is {}",
                    other.name()
                )));
            }
        }
    }
    Ok(mode)
}

fn parse_role(text: &str) -> Result<SweepRole, CliError> {
    match text {
        "train" => Ok(SweepRole::Train),
        "test" => Ok(SweepRole::Test),
        other => Err(CliError::Validation(format!(
            "unknown role '{other}' (train, test)"
        ))),
    }
}

fn parse_variant(text: &str) -> Result<ModelVariant, CliError> {
    match text {
        "ultra" => Ok(ModelVariant::Ultra),
        "no-render-baseline" => Ok(ModelVariant::NoRenderBaseline),
        other => Err(CliError::Validation(format!(
            "unknown variant '{other}' (ultra, no-render-baseline)"
        ))),
    }
}

fn load_model(path: &Path) -> Result<TrainedModel, CliError> {
    Ok(load_checkpoint(path)?)
}

fn frame_pose<'a>(dataset: &'a Dataset, sweep: &str, frame: usize) -> Result<&'a Pose, CliError> {
    let data = dataset.sweep(sweep).ok_or_else(|| {
        let names: Vec<&str> = dataset
            .sweeps
            .iter()
            .map(|s| s.entry.name.as_str())
            .collect();
        CliError::Validation(format!(
            "sweep '{sweep}' not in dataset (available: {})",
            names.join(", ")
        ))
    })?;
    data.poses.get(frame).ok_or_else(|| {
        CliError::Validation(format!(
            "frame {frame} out of range, sweep '{sweep}' has {} frames",
            data.poses.len()
        ))
    })
}

fn role_frames(dataset: &Dataset, role: SweepRole) -> Vec<(&Pose, &echofield_core::Grid)> {
    match role {
        SweepRole::Train => dataset.training_frames(),
        SweepRole::Test => dataset.test_frames(),
    }
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mode = sampling_mode(&args.mode, args.tau)?;
    let scene = if let Some(path) = &args.scene_file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str::<SceneSpec>(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
    } else {
        match args.scene.as_str() {
            "demo" => SceneSpec::demo(),
            "compact" => SceneSpec::compact(),
            other => {
                return Err(CliError::Validation(format!(
                    "unknown scene '{other}' (demo, compact)"
                )));
            }
        }
    };
    scene.validate()?;
    let volume = build_phantom(&scene.phantom)?;
    let config = RenderConfig {
        mode,
        ..RenderConfig::default()
    };
    let mut sweeps = Vec::with_capacity(scene.sweeps.len());
    let mut frame_total = 0usize;
    for (i, sweep) in scene.sweeps.iter().enumerate() {
        // A per-sweep seed keeps same-tilt sweeps from sharing draws.
        let sweep_seed = derive_seed(args.seed, i as u64);
        let frames = simulate_sweep(
            &volume,
            &scene.frame,
            &sweep.trajectory,
            &config,
            sweep_seed,
        )?;
        frame_total += frames.len();
        sweeps.push((sweep.clone(), frames));
    }
    save_dataset(&args.out, &scene.frame, args.seed, mode.name(), &sweeps)?;
    println!(
        "wrote {} sweeps, {} frames of {}x{} to {}",
        sweeps.len(),
        frame_total,
        scene.frame.scanlines,
        scene.frame.depth_samples,
        args.out.display()
    );
    Ok(())
}

/// Resolves the full training configuration from flags, the optional
/// key=value file, and defaults, in that order of precedence.
fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let mut r = Resolver::from_file(args.config.as_deref())?;

    let iterations = r.take("iterations", args.iterations, d.iterations)?;
    let learning_rate = r.take("learning_rate", args.learning_rate, d.learning_rate)?;
    let lr_halflife = r.take("lr_halflife", args.lr_halflife, d.lr_halflife)?;
    let seed = r.take("seed", args.seed, d.seed)?;
    let variant_name = r.take(
        "variant",
        args.variant.clone(),
        String::from(d.variant.name()),
    )?;
    let frequencies = r.take("frequencies", args.frequencies, d.encoding.frequencies)?;
    let include_input = r.take(
        "include_input",
        args.include_input,
        d.encoding.include_input,
    )?;
    let hidden_layers = r.take("hidden_layers", args.hidden_layers, d.mlp.hidden_layers)?;
    let width = r.take("width", args.width, d.mlp.width)?;
    let skip_layer = r.take("skip_layer", args.skip_layer, d.mlp.skip_layer)?;
    let tau_given = args.tau.is_some() || r.has("tau");
    let mode_name = r.take(
        "mode",
        args.mode.clone(),
        String::from(d.render.mode.name()),
    )?;
    let tau = r.take("tau", args.tau, SamplingMode::DEFAULT_TAU)?;
    let ssim_weight = r.take("ssim_weight", args.ssim_weight, d.loss.ssim_weight)?;
    let ssim_window = r.take("ssim_window", args.ssim_window, d.loss.ssim.window_size)?;
    let ssim_sigma = r.take("ssim_sigma", args.ssim_sigma, d.loss.ssim.sigma)?;
    let bounds_margin = r.take("bounds_margin", args.bounds_margin, d.bounds_margin)?;
    let frequency = r.take("frequency", args.frequency, d.render.frequency)?;
    let psf_size = r.take("psf_size", args.psf_size, d.render.psf_size)?;
    let psf_lateral_sigma = r.take(
        "psf_lateral_sigma",
        args.psf_lateral_sigma,
        d.render.psf_lateral_sigma,
    )?;
    let psf_axial_sigma = r.take(
        "psf_axial_sigma",
        args.psf_axial_sigma,
        d.render.psf_axial_sigma,
    )?;
    let resolved = r.finish()?;

    eprintln!("resolved training configuration:");
    for (key, value) in &resolved {
        eprintln!("  {key} = {value}");
    }

    let variant = parse_variant(&variant_name)?;
    let mode = sampling_mode(&mode_name, tau_given.then_some(tau))?;
    Ok(TrainConfig {
        iterations,
        learning_rate,
        lr_halflife,
        seed,
        variant,
        encoding: EncodingConfig {
            frequencies,
            include_input,
        },
        mlp: MlpConfig {
            hidden_layers,
            width,
            skip_layer,
            output_dim: variant.output_dim(),
        },
        render: RenderConfig {
            frequency,
            incident_intensity: d.render.incident_intensity,
            psf_size,
            psf_lateral_sigma,
            psf_axial_sigma,
            mode,
        },
        loss: LossConfig {
            ssim_weight,
            ssim: SsimConfig {
                window_size: ssim_window,
                sigma: ssim_sigma,
                ..d.loss.ssim
            },
        },
        bounds_margin,
    })
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let config = resolve_train_config(&args)?;
    let dataset = load_dataset(&args.data)?;
    let frames = dataset.training_frames();
    let log_every = args.log_every;
    let iterations = config.iterations;
    let trained =
        echofield_core::trainer::train(&frames, &dataset.manifest.frame, &config, |iter, loss| {
            let last = iter + 1 == iterations;
            if log_every > 0 && (iter % log_every == 0 || last) {
                eprintln!("iter {iter} loss {loss:.6}");
            }
        })?;
    save_checkpoint(&args.out, &trained)?;
    let final_loss = trained.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} iterations on {} frames, final loss {:.6}, wrote {}",
        trained.iterations_done,
        frames.len(),
        final_loss,
        args.out.display()
    );
    Ok(())
}

pub fn render(args: RenderArgs) -> Result<(), CliError> {
    let trained = load_model(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    let pose = frame_pose(&dataset, &args.sweep, args.frame)?;
    let mode = sampling_mode(&args.mode, args.tau)?;
    let render = RenderConfig {
        mode,
        ..trained.config.render
    };
    let view = trained.model.render_view(
        pose,
        &dataset.manifest.frame,
        &render,
        args.seed,
        args.frame as u64,
    )?;
    write_pgm(&args.out, &view, ECHO_SCALE)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let trained = load_model(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    let role = parse_role(&args.role)?;
    let frames = role_frames(&dataset, role);
    let mode = sampling_mode(&args.mode, args.tau)?;
    let render = RenderConfig {
        mode,
        ..trained.config.render
    };
    let stats = evaluate(
        &trained.model,
        &frames,
        &dataset.manifest.frame,
        &render,
        &trained.config.loss,
        args.seed,
    )?;
    write_scores_tsv(&args.out, &stats)?;
    println!(
        "{} frames: mean ssim {:.4}, median ssim {:.4}",
        stats.per_frame.len(),
        stats.mean,
        stats.median
    );
    Ok(())
}

pub fn decompose(args: DecomposeArgs) -> Result<(), CliError> {
    let trained = load_model(&args.model)?;
    let dataset = load_dataset(&args.data)?;
    let pose = frame_pose(&dataset, &args.sweep, args.frame)?;
    let maps = trained
        .model
        .decompose_view(pose, &dataset.manifest.frame)?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out_dir.display())))?;
    for (grid, name) in maps.channels().into_iter().zip(ParamMaps::channel_names()) {
        let path = args.out_dir.join(format!("{name}.pgm"));
        // Attenuation is unbounded above; print its shape, not its scale.
        if name == "attenuation" {
            write_pgm(&path, &normalize_attenuation(grid), 1.0)?;
        } else {
            write_pgm(&path, grid, 1.0)?;
        }
    }
    println!(
        "wrote {} channel images to {}",
        ParamMaps::channel_names().len(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn compound(args: CompoundArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let method = CompoundMethod::parse(&args.method)?;
    let role = parse_role(&args.role)?;
    let frames = role_frames(&dataset, role);
    let poses: Vec<&Pose> = frames.iter().map(|(pose, _)| *pose).collect();
    let bounds = bounds_for_frames(&poses, &dataset.manifest.frame, args.margin)?;
    let volume = compound_frames(&frames, &dataset.manifest.frame, bounds, args.voxel, method)?;
    save_volume(&args.out, &volume)?;
    println!(
        "compounded {} frames into a {}x{}x{} {} volume, wrote {}",
        frames.len(),
        volume.nx,
        volume.ny,
        volume.nz,
        method.name(),
        args.out.display()
    );
    Ok(())
}

pub fn slice(args: SliceArgs) -> Result<(), CliError> {
    let volume = load_volume(&args.volume)?;
    let dataset = load_dataset(&args.data)?;
    let pose = frame_pose(&dataset, &args.sweep, args.frame)?;
    let grid = slice_volume(&volume, pose, &dataset.manifest.frame)?;
    write_pgm(&args.out, &grid, ECHO_SCALE)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn print_suite(title: &str, reports: &[CheckReport], tol: f64) -> usize {
    println!("{title} (tolerance {tol:.0e})");
    let mut failures = 0;
    for r in reports {
        let ok = r.passes(tol);
        if !ok {
            failures += 1;
        }
        println!(
            "  {:<32} max {:>9.2e}  mean {:>9.2e}  [{}]",
            r.name,
            r.max_rel_err,
            r.mean_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    failures
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut failures = 0;
    let mut total = 0;

    let f64_reports = op_suite::<f64>(args.seed, 1e-6)?;
    total += f64_reports.len();
    failures += print_suite("finite differences, 64-bit", &f64_reports, TOL_F64);

    let cross = cross_width_suite(args.seed)?;
    total += cross.len();
    failures += print_suite("32-bit against 64-bit analytic", &cross, TOL_F32);

    let render = gradient_suite(args.seed)?;
    total += render.len();
    failures += print_suite("renderer channels", &render, TOL_F64);

    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} of {total} gradient checks failed"
        )));
    }
    println!("all {total} gradient checks passed");
    Ok(())
}
