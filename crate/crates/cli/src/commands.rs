use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use elastica::energy::{energy_gradient, finite_difference_gradient, max_relative_error, ElasticaParams};
use elastica::image_io::{
    checkerboard_score, load_image, load_mask, mae, make_random_mask, make_shape_instance, save_image, save_mask,
    BitDepth, ImageGrid, MaskGrid, Region,
};
use elastica::network::NetworkSpec;
use elastica::optimizer::LrSchedule;
use elastica::presets::{Preset, DECAY_FACTOR, DECAY_PERIOD};
use elastica::solver::{
    resume, run, sweep_b, Checkpoint, LogEntry, Manifest, Mode, Problem, RunObserver, RunOutput, SolverConfig,
};
use elastica::{energy, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::{
    AblateArgs, Command, GradcheckArgs, InpaintArgs, InputArgs, InstanceArgs, OutputArgs, SolverArgs, SweepArgs,
};

/// Largest image the gradient check accepts; it evaluates the energy twice
/// per pixel.
pub const GRADCHECK_MAX_SIZE: usize = 32;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    GradientMismatch { error: f64 },
}

impl Failure {
    /// 1 usage or validation, 2 numerical failure, 3 file access.
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Diverged { .. }) | Failure::GradientMismatch { .. } => 2,
            Failure::Core(Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_)) => 3,
            Failure::Core(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::GradientMismatch { error } => {
                write!(
                    f,
                    "gradient check failed: relative error {error:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
                )
            }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Inpaint(a) => inpaint(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepB(a) => sweep(a),
        Command::MakeInstance(a) => make_instance(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Loaded inputs plus their description for the manifest.
struct Inputs {
    problem: Problem,
    generated_mask: bool,
    manifest: Manifest,
}

/// Reads every input file. `reference_fallback` uses the image itself as
/// ground truth when none is given.
fn load_inputs(args: &InputArgs, reference_fallback: bool) -> CliResult<Inputs> {
    let image = load_image(&args.image)?;
    let (h, w) = image.dims();
    let mut manifest = Manifest::new();
    manifest
        .set("image", args.image.display())
        .set("height", h)
        .set("width", w);
    let mask = match (&args.mask, args.mask_density) {
        (Some(path), _) => {
            manifest.set("mask", path.display());
            load_mask(path)?
        }
        (None, Some(density)) => {
            manifest.set("mask_density", density).set("mask_seed", args.mask_seed);
            make_random_mask(h, w, density, args.mask_seed)?
        }
        (None, None) => {
            return Err(Error::InvalidArgument("either --mask or --mask-density is required".into()).into())
        }
    };
    let ground_truth = match &args.ground_truth {
        Some(path) => {
            manifest.set("ground_truth", path.display());
            Some(load_image(path)?)
        }
        None if reference_fallback => {
            manifest.set("ground_truth", args.image.display());
            Some(image.clone())
        }
        None => None,
    };
    Ok(Inputs {
        problem: Problem::new(image, mask, ground_truth)?,
        generated_mask: args.mask.is_none(),
        manifest,
    })
}

fn solver_config(args: &SolverArgs, height: usize, width: usize) -> CliResult<SolverConfig> {
    let preset = args.preset;
    let iterations = args.iterations.unwrap_or(preset.default_iterations());
    let mut config = preset.config(height, width, args.channels, iterations)?;
    config.mode = args.mode;
    let defaults = preset.params();
    config.params = ElasticaParams::new(args.b.unwrap_or(defaults.b), args.epsilon.unwrap_or(defaults.epsilon))?;
    config.schedule = LrSchedule::periodic(
        args.lr.unwrap_or(preset.learning_rate()),
        args.decay_every,
        args.decay_factor,
        iterations,
    )?;
    let variant = args.arch.unwrap_or(config.network.variant);
    let scales = args.scales.unwrap_or(config.network.scales);
    config.network = match variant {
        elastica::network::Variant::Unet => NetworkSpec::unet(scales, args.channels),
        elastica::network::Variant::GatedUnet => NetworkSpec::gated_unet(scales, args.channels),
    };
    if let Some(init) = args.init {
        config.init = init;
    }
    if let Some(update) = args.direct_update {
        config.direct_update = update;
    }
    config.seed = args.seed;
    config.log_every = args.log_every;
    config.checkpoint_every = args.checkpoint_every;
    config.clip_norm = args.clip_norm;
    config.validate()?;
    Ok(config)
}

/// Destination of everything a command writes.
struct Outputs {
    dir: PathBuf,
    extension: &'static str,
    depth: BitDepth,
    quiet: bool,
}

impl Outputs {
    fn new(args: &OutputArgs) -> Self {
        Outputs {
            dir: args.out_dir.clone(),
            extension: args.format.extension(),
            depth: args.depth(),
            quiet: args.quiet,
        }
    }

    fn sub(&self, name: &str) -> Self {
        Outputs {
            dir: self.dir.join(name),
            ..*self
        }
    }

    fn create(&self) -> CliResult<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::Io {
            path: self.dir.clone(),
            source: e,
        })?;
        Ok(())
    }

    fn image_path(&self, stem: &str) -> PathBuf {
        self.dir.join(format!("{stem}.{}", self.extension))
    }

    fn save(&self, img: &ImageGrid, stem: &str) -> CliResult<()> {
        save_image(&img.clamped(), self.image_path(stem), self.depth)?;
        Ok(())
    }
}

/// Prints progress and writes periodic checkpoints.
struct Progress {
    label: String,
    quiet: bool,
    checkpoint_dir: PathBuf,
}

impl RunObserver<f32> for Progress {
    fn on_log(&mut self, entry: &LogEntry, _image: &ImageGrid) -> elastica::Result<()> {
        if !self.quiet {
            let mae = entry.mae_inpaint.map(|m| format!("  mae {m:.5}")).unwrap_or_default();
            eprintln!(
                "{}iter {:>8}  energy {:.6e}{mae}  lr {:e}",
                self.label, entry.iteration, entry.energy, entry.lr
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint<f32>) -> elastica::Result<()> {
        checkpoint.save(self.checkpoint_dir.join(checkpoint_name(checkpoint.iteration)))
    }
}

fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:08}.ckpt")
}

/// Runs one configuration and writes its artefacts; records the outcome in
/// `manifest`.
fn solve(
    problem: &Problem,
    config: &SolverConfig,
    from: Option<Checkpoint<f32>>,
    out: &Outputs,
    label: &str,
    manifest: &mut Manifest,
) -> CliResult<RunOutput<f32>> {
    let checkpoint_dir = out.dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir).map_err(|e| Error::Io {
        path: checkpoint_dir.clone(),
        source: e,
    })?;
    manifest.extend(&config.manifest());
    manifest.set("status", "running");
    manifest.write(out.dir.join("manifest.txt"))?;
    let mut progress = Progress {
        label: label.to_string(),
        quiet: out.quiet,
        checkpoint_dir: checkpoint_dir.clone(),
    };
    let result = match from {
        Some(ck) => resume(problem, config, ck, &mut progress),
        None => run(problem, config, &mut progress),
    };
    let output = match result {
        Ok(o) => o,
        Err(Error::Diverged {
            iteration,
            last_finite_iteration,
            last_finite,
        }) => {
            out.save(&last_finite, "last_finite")?;
            manifest
                .set("status", "diverged")
                .set("diverged_at", iteration)
                .set("last_finite_iteration", last_finite_iteration);
            manifest.write(out.dir.join("manifest.txt"))?;
            return Err(Error::Diverged {
                iteration,
                last_finite_iteration,
                last_finite,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    output.record.write_csv(out.dir.join("metrics.csv"))?;
    output.record.write_filtered_csv(out.dir.join("metrics_filtered.csv"))?;
    out.save(&output.final_image, "final")?;
    manifest.set("status", "completed").set(
        "final_checkpoint",
        checkpoint_dir
            .join(checkpoint_name(output.checkpoint.iteration))
            .display(),
    );
    if let Some(last) = output.record.last() {
        manifest
            .set("final_iteration", last.iteration)
            .set("final_energy", last.energy);
        if let Some(m) = last.mae_inpaint {
            manifest.set("final_mae", m);
        }
    }
    let region = Region::Unknown(&problem.mask);
    if problem.mask.count_unknown() > 0 {
        manifest.set("final_checkerboard", checkerboard_score(&output.final_image, region)?);
    }
    if let Some(best) = &output.record.best {
        out.save(&best.image, "best")?;
        manifest
            .set("best_iteration", best.iteration)
            .set("best_mae", best.mae)
            .set(
                "best_energy",
                energy::energy::<f64>(&best.image, &problem.mask, &config.params)?,
            )
            .set("best_checkerboard", checkerboard_score(&best.image, region)?);
    }
    manifest.write(out.dir.join("manifest.txt"))?;
    Ok(output)
}

fn set_decay(manifest: &mut Manifest, every: u64, factor: f64) {
    manifest.set("lr_decay_every", every).set("lr_decay_factor", factor);
}

fn write_generated_mask(inputs: &Inputs, out: &Outputs) -> CliResult<()> {
    if inputs.generated_mask {
        save_mask(&inputs.problem.mask, out.dir.join("mask.png"))?;
    }
    Ok(())
}

fn inpaint(args: InpaintArgs) -> CliResult<()> {
    let inputs = load_inputs(&args.input, false)?;
    let (h, w) = inputs.problem.image.dims();
    let config = solver_config(&args.solver, h, w)?;
    let from = args.resume.as_deref().map(Checkpoint::<f32>::load).transpose()?;
    if let Some(ck) = &from {
        ck.ensure_matches(&config)?;
    }
    let out = Outputs::new(&args.output);
    out.create()?;
    write_generated_mask(&inputs, &out)?;
    let mut manifest = inputs.manifest.clone();
    manifest.set("command", "inpaint").set("preset", args.solver.preset);
    set_decay(&mut manifest, args.solver.decay_every, args.solver.decay_factor);
    if let Some(path) = &args.resume {
        manifest.set("resumed_from", path.display());
    }
    solve(&inputs.problem, &config, from, &out, "", &mut manifest)?;
    Ok(())
}

fn ablate(args: AblateArgs) -> CliResult<()> {
    let inputs = load_inputs(&args.input, true)?;
    let (h, w) = inputs.problem.image.dims();
    let mut deep = Preset::PaperAblation.config(h, w, args.channels, args.iterations)?;
    deep.seed = args.seed;
    deep.log_every = args.log_every;
    deep.checkpoint_every = 0;
    let direct = SolverConfig {
        mode: Mode::Direct,
        ..deep.clone()
    };
    let out = Outputs::new(&args.output);
    out.create()?;
    write_generated_mask(&inputs, &out)?;
    let mut rows = Vec::new();
    for (config, name) in [(&direct, "direct"), (&deep, "deep-prior")] {
        let dir = out.sub(name);
        dir.create()?;
        let mut manifest = inputs.manifest.clone();
        manifest.set("command", "ablate").set("preset", Preset::PaperAblation);
        set_decay(&mut manifest, DECAY_PERIOD, DECAY_FACTOR);
        let run = solve(&inputs.problem, config, None, &dir, &format!("{name}: "), &mut manifest)?;
        let err = mae(
            &run.final_image,
            inputs.problem.ground_truth.as_ref().expect("reference set"),
            Region::Unknown(&inputs.problem.mask),
        )?;
        let last = run.record.last().expect("at least one entry");
        rows.push([
            name.to_string(),
            last.energy.to_string(),
            err.to_string(),
            checkerboard_score(&run.final_image, Region::Unknown(&inputs.problem.mask))?.to_string(),
        ]);
    }
    let mut text = String::from("mode,final_energy,mae,checkerboard\n");
    for r in &rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write_text(&out.dir.join("summary.csv"), &text)?;
    if !out.quiet {
        print!("{text}");
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> CliResult<()> {
    let inputs = load_inputs(&args.input, true)?;
    let (h, w) = inputs.problem.image.dims();
    let config = solver_config(&args.solver, h, w)?;
    for &b in &args.b_values {
        ElasticaParams::new(b, config.params.epsilon)?;
    }
    let out = Outputs::new(&args.output);
    out.create()?;
    write_generated_mask(&inputs, &out)?;
    let result = sweep_b::<f32>(&inputs.problem, &config, &args.b_values)?;
    let mut text = String::from("b,best_mae\n");
    for (b, m) in &result.table {
        text.push_str(&format!("{b},{m}\n"));
    }
    write_text(&out.dir.join("sweep.csv"), &text)?;
    let mut manifest = inputs.manifest.clone();
    manifest
        .set("command", "sweep-b")
        .set("preset", args.solver.preset)
        .set("lr_decay_every", args.solver.decay_every)
        .set("lr_decay_factor", args.solver.decay_factor)
        .set(
            "b_values",
            args.b_values
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
    let mut best_config = config.clone();
    best_config.params = ElasticaParams::new(result.best_b, config.params.epsilon)?;
    manifest.extend(&best_config.manifest());
    manifest.set("best_b", result.best_b);
    let run = &result.best_run;
    run.record.write_csv(out.dir.join("metrics.csv"))?;
    out.save(&run.final_image, "final")?;
    if let Some(best) = &run.record.best {
        out.save(&best.image, "best")?;
        manifest.set("best_iteration", best.iteration).set("best_mae", best.mae);
    }
    manifest.write(out.dir.join("manifest.txt"))?;
    if !out.quiet {
        print!("{text}");
    }
    Ok(())
}

fn make_instance(args: InstanceArgs) -> CliResult<()> {
    let instance = make_shape_instance(args.kind, args.size, args.gap)?;
    let out = Outputs::new(&args.output);
    out.create()?;
    out.save(&instance.ground_truth, "ground_truth")?;
    save_mask(&instance.mask, out.dir.join("mask.png"))?;
    let mut manifest = Manifest::new();
    manifest
        .set("command", "make-instance")
        .set("kind", args.kind.name())
        .set("size", args.size)
        .set("gap", args.gap)
        .set("band", format!("{}..{}", instance.band.0, instance.band.1));
    manifest.write(out.dir.join("manifest.txt"))?;
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    if args.size > GRADCHECK_MAX_SIZE || args.size < 3 {
        return Err(Error::InvalidArgument(format!(
            "gradient check size must lie in 3..={GRADCHECK_MAX_SIZE}, got {}",
            args.size
        ))
        .into());
    }
    let params = ElasticaParams::new(args.b, args.epsilon)?;
    let n = args.size;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let u = ImageGrid::from_fn(n, n, |_, _| rng.random::<f64>());
    let mask: MaskGrid = make_random_mask(n, n, args.density, args.seed)?;
    let backward = energy_gradient::<f64>(&u, &mask, &params)?;
    let numeric = finite_difference_gradient(&u, &mask, &params, args.step)?;
    let error = max_relative_error(backward.data(), numeric.data());
    println!(
        "max relative error {error:.3e} (size {n}, b {}, epsilon {})",
        args.b, args.epsilon
    );
    if error > GRADCHECK_TOLERANCE {
        return Err(Failure::GradientMismatch { error });
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}
