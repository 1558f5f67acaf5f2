//! The inpainting loop.
//!
//! Deep-prior mode optimises the weights `θ` of a network `N`:
//!
//! ```text
//! u_k     = c ⊙ f + (1 - c) ⊙ N(x; θ_k)        (remasking)
//! θ_(k+1) = θ_k - Adam(∇_θ E(u_k))
//! ```
//!
//! where `x = [c ⊙ f + (1 - c) ⊙ init, c]` is fixed for the whole run.
//! Direct mode optimises the pixels of the inpainting domain instead. Both
//! share logging, best-iterate tracking, checkpoints and the divergence
//! guard.

pub mod checkpoint;
pub mod record;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use record::{BestIterate, LogEntry, Manifest, RunRecord};

use crate::energy::{elastica_loss, ElasticaParams};
use crate::error::{Error, Result};
use crate::image_io::{mae, ImageGrid, MaskGrid, Region};
use crate::network::{NamedTensor, Network, NetworkSpec};
use crate::optimizer::{clip_global_norm, gd_step, AdamState, LrSchedule};
use crate::tensor::{mirror_index, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    DeepPrior,
    Direct,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DeepPrior => "deep-prior",
            Mode::Direct => "direct",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep-prior" => Ok(Mode::DeepPrior),
            "direct" => Ok(Mode::Direct),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?}; expected deep-prior or direct"
            ))),
        }
    }
}

/// Initial grey values of the inpainting domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform noise in `[0, 1)`, drawn once from the run seed.
    UniformNoise,
    /// Mean of the known pixels.
    MeanGrey,
    Constant(f64),
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::UniformNoise => f.write_str("noise"),
            Init::MeanGrey => f.write_str("mean-grey"),
            Init::Constant(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Init::UniformNoise),
            "mean-grey" => Ok(Init::MeanGrey),
            other => match other.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok(Init::Constant(v)),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown init {other:?}; expected noise, mean-grey or a grey value in [0, 1]"
                ))),
            },
        }
    }
}

/// Update rule of direct mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectUpdate {
    Adam,
    GradientDescent,
}

impl fmt::Display for DirectUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectUpdate::Adam => "adam",
            DirectUpdate::GradientDescent => "gd",
        })
    }
}

impl FromStr for DirectUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(DirectUpdate::Adam),
            "gd" => Ok(DirectUpdate::GradientDescent),
            other => Err(Error::InvalidArgument(format!(
                "unknown update {other:?}; expected adam or gd"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub mode: Mode,
    pub params: ElasticaParams,
    /// Ignored in direct mode.
    pub network: NetworkSpec,
    pub schedule: LrSchedule,
    pub max_iterations: u64,
    pub init: Init,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub direct_update: DirectUpdate,
    /// Optional global gradient-norm limit.
    pub clip_norm: Option<f64>,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.schedule.validate()?;
        if self.mode == Mode::DeepPrior {
            self.network.validate()?;
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max iterations must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log interval must be at least 1".into()));
        }
        if let Init::Constant(v) = self.init {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "constant init must lie in [0, 1], got {v}"
                )));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Every setting that influences the run, as `key=value` lines.
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("mode", self.mode)
            .set("b", self.params.b)
            .set("epsilon", self.params.epsilon)
            .set("h", self.params.h)
            .set("lr", self.schedule.initial)
            .set(
                "lr_milestones",
                self.schedule
                    .milestones
                    .iter()
                    .map(|(it, m)| format!("{it}:{m}"))
                    .collect::<Vec<_>>()
                    .join(";"),
            )
            .set("max_iterations", self.max_iterations)
            .set("init", self.init)
            .set("seed", self.seed)
            .set("log_every", self.log_every)
            .set("checkpoint_every", self.checkpoint_every)
            .set(
                "clip_norm",
                self.clip_norm.map(|c| c.to_string()).unwrap_or_else(|| "none".into()),
            );
        match self.mode {
            Mode::DeepPrior => {
                let n = &self.network;
                m.set("network", n.variant)
                    .set("scales", n.scales)
                    .set("convs_per_scale", n.convs_per_scale)
                    .set("base_channels", n.base_channels)
                    .set("kernel_size", n.kernel_size)
                    .set(
                        "coarse_dilations",
                        n.coarse_dilations
                            .iter()
                            .map(|d| d.to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                    )
                    .set("optimizer", "adam");
            }
            Mode::Direct => {
                m.set("optimizer", self.direct_update);
            }
        }
        m
    }
}

/// Known data `f` on the pixels where the mask is set, plus optional ground
/// truth for metrics.
#[derive(Clone, Debug)]
pub struct Problem {
    pub image: ImageGrid,
    pub mask: MaskGrid,
    pub ground_truth: Option<ImageGrid>,
}

impl Problem {
    pub fn new(image: ImageGrid, mask: MaskGrid, ground_truth: Option<ImageGrid>) -> Result<Self> {
        let dims = image.dims();
        if mask.dims() != dims {
            return Err(Error::shape(
                "problem mask",
                &[mask.height(), mask.width()],
                &[dims.0, dims.1],
            ));
        }
        if let Some(gt) = &ground_truth {
            if gt.dims() != dims {
                return Err(Error::shape(
                    "problem ground truth",
                    &[gt.height(), gt.width()],
                    &[dims.0, dims.1],
                ));
            }
        }
        if dims.0 < 3 || dims.1 < 3 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 3x3, got {}x{}",
                dims.0, dims.1
            )));
        }
        Ok(Problem {
            image,
            mask,
            ground_truth,
        })
    }

    /// Inpainting problem built from a complete image: known data is the
    /// ground truth itself.
    pub fn from_ground_truth(ground_truth: ImageGrid, mask: MaskGrid) -> Result<Self> {
        Self::new(ground_truth.clone(), mask, Some(ground_truth))
    }
}

/// `c ⊙ f + (1 - c) ⊙ u`; known pixels are copied from `f` exactly.
pub fn remask(u: &ImageGrid, f: &ImageGrid, c: &MaskGrid) -> Result<ImageGrid> {
    if u.dims() != f.dims() || c.dims() != f.dims() {
        return Err(Error::shape(
            "remask",
            &[u.height(), u.width()],
            &[f.height(), f.width()],
        ));
    }
    let (h, w) = f.dims();
    Ok(
        ImageGrid::from_fn(h, w, |i, j| if c.is_known(i, j) { f.get(i, j) } else { u.get(i, j) })
            .with_spacing(f.spacing()),
    )
}

/// Callbacks fired during a run.
pub trait RunObserver<T> {
    /// Called for every logged iteration with the remasked iterate.
    fn on_log(&mut self, _entry: &LogEntry, _image: &ImageGrid) -> Result<()> {
        Ok(())
    }

    /// Called with the state after every `checkpoint_every` completed steps.
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> RunObserver<T> for () {}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub record: RunRecord,
    /// Remasked iterate after the last step.
    pub final_image: ImageGrid,
    /// State after the last step, for resuming.
    pub checkpoint: Checkpoint<T>,
}

impl<T> RunOutput<T> {
    pub fn best_image(&self) -> Option<&ImageGrid> {
        self.record.best.as_ref().map(|b| &b.image)
    }
}

/// Runs `config.max_iterations` steps from scratch.
pub fn run<T: Scalar>(
    problem: &Problem,
    config: &SolverConfig,
    observer: &mut dyn RunObserver<T>,
) -> Result<RunOutput<T>> {
    Solver::new(problem, config, None)?.run(observer)
}

/// Continues a run from `checkpoint` up to `config.max_iterations`.
pub fn resume<T: Scalar>(
    problem: &Problem,
    config: &SolverConfig,
    checkpoint: Checkpoint<T>,
    observer: &mut dyn RunObserver<T>,
) -> Result<RunOutput<T>> {
    Solver::new(problem, config, Some(checkpoint))?.run(observer)
}

pub fn run_deep_prior<T: Scalar>(problem: &Problem, config: &SolverConfig) -> Result<RunOutput<T>> {
    if config.mode != Mode::DeepPrior {
        return Err(Error::InvalidArgument("run_deep_prior needs mode deep-prior".into()));
    }
    run(problem, config, &mut ())
}

pub fn run_direct<T: Scalar>(problem: &Problem, config: &SolverConfig) -> Result<RunOutput<T>> {
    if config.mode != Mode::Direct {
        return Err(Error::InvalidArgument("run_direct needs mode direct".into()));
    }
    run(problem, config, &mut ())
}

#[derive(Clone, Debug)]
pub struct SweepResult<T> {
    /// `(b, best MAE)` in the order given.
    pub table: Vec<(f64, f64)>,
    pub best_b: f64,
    /// Artefacts of the run with the lowest best MAE.
    pub best_run: RunOutput<T>,
}

/// One full run per `b`; keeps the run with the lowest best MAE.
pub fn sweep_b<T: Scalar>(problem: &Problem, config: &SolverConfig, b_values: &[f64]) -> Result<SweepResult<T>> {
    if b_values.is_empty() {
        return Err(Error::InvalidArgument("b sweep needs at least one value".into()));
    }
    if problem.ground_truth.is_none() {
        return Err(Error::InvalidArgument("b sweep needs ground truth".into()));
    }
    let mut table = Vec::with_capacity(b_values.len());
    let mut best: Option<(f64, f64, RunOutput<T>)> = None;
    for &b in b_values {
        let mut cfg = config.clone();
        cfg.params = ElasticaParams::with_spacing(b, config.params.epsilon, config.params.h)?;
        let out = run(problem, &cfg, &mut ())?;
        let score = out
            .record
            .best
            .as_ref()
            .map(|x| x.mae)
            .ok_or_else(|| Error::InvalidArgument("b sweep needs a non-empty inpainting domain".into()))?;
        table.push((b, score));
        if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
            best = Some((b, score, out));
        }
    }
    let (best_b, _, best_run) = best.expect("at least one run");
    Ok(SweepResult {
        table,
        best_b,
        best_run,
    })
}

/// Fixed inputs of a run.
struct Setup<T> {
    /// Network input `[2, Hp, Wp]`, padded by mirroring at the bottom and right.
    input: Tensor<T>,
    /// `c ⊙ f` as `[1, H, W]`.
    known: Tensor<T>,
    /// `1 - c` as `[1, H, W]`.
    unknown: Tensor<T>,
    /// Initial image `c ⊙ f + (1 - c) ⊙ init`.
    initial: ImageGrid,
    height: usize,
    width: usize,
}

impl<T: Scalar> Setup<T> {
    fn new(problem: &Problem, config: &SolverConfig) -> Self {
        let (f, c) = (&problem.image, &problem.mask);
        let (h, w) = f.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let fill = match config.init {
            Init::UniformNoise => None,
            Init::MeanGrey => Some(c.known_mean(f)),
            Init::Constant(v) => Some(v),
        };
        let initial = ImageGrid::from_fn(h, w, |i, j| {
            let noise = fill.unwrap_or_else(|| rng.random_range(0.0..1.0));
            if c.is_known(i, j) {
                f.get(i, j)
            } else {
                noise
            }
        })
        .with_spacing(f.spacing());

        let m = match config.mode {
            Mode::DeepPrior => config.network.required_multiple(),
            Mode::Direct => 1,
        };
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut data = Vec::with_capacity(2 * hp * wp);
        for channel in 0..2 {
            for i in 0..hp {
                let ii = mirror_index(i as isize, h);
                for j in 0..wp {
                    let jj = mirror_index(j as isize, w);
                    let v = if channel == 0 {
                        initial.get(ii, jj)
                    } else if c.is_known(ii, jj) {
                        1.0
                    } else {
                        0.0
                    };
                    data.push(T::from_f64(v));
                }
            }
        }
        let known = Tensor::from_fn(vec![1, h, w], |k| {
            T::from_f64(if c.known()[k] { f.data()[k] } else { 0.0 })
        });
        Setup {
            input: Tensor::new(vec![2, hp, wp], data).expect("padded input"),
            known,
            unknown: c.unknown_tensor(),
            initial,
            height: h,
            width: w,
        }
    }

    /// Remasked image from a raw `[1, Hp, Wp]` or `[1, H, W]` candidate.
    fn remask(&self, tape: &mut Tape<T>, raw: Var) -> Result<Var> {
        let raw = if tape.shape(raw)[1..] != [self.height, self.width] {
            tape.crop(raw, self.height, self.width)?
        } else {
            raw
        };
        let unknown = tape.constant(self.unknown.clone());
        let known = tape.constant(self.known.clone());
        let fill = tape.mul(raw, unknown)?;
        tape.add(known, fill)
    }
}

enum Model<T> {
    Net(Network<T>),
    Pixels(Tensor<T>),
}

impl<T: Scalar> Model<T> {
    fn state(&self) -> Vec<NamedTensor<T>> {
        match self {
            Model::Net(net) => net.params().to_vec(),
            Model::Pixels(p) => vec![NamedTensor {
                name: "pixels".into(),
                value: p.clone(),
            }],
        }
    }

    fn sizes(&self) -> Vec<usize> {
        match self {
            Model::Net(net) => net.params().iter().map(|p| p.value.numel()).collect(),
            Model::Pixels(p) => vec![p.numel()],
        }
    }

    /// Leaves on the tape, the remasked image and the energy.
    fn evaluate(
        &self,
        tape: &mut Tape<T>,
        setup: &Setup<T>,
        params: &ElasticaParams,
        mask: &MaskGrid,
    ) -> Result<(Vec<Var>, Var, Var)> {
        let (leaves, raw) = match self {
            Model::Net(net) => {
                let vars = net.bind(tape);
                let x = tape.constant(setup.input.clone());
                let out = net.forward(tape, &vars, x)?;
                (vars, out)
            }
            Model::Pixels(p) => {
                let v = tape.param(p.clone());
                (vec![v], v)
            }
        };
        let u = setup.remask(tape, raw)?;
        let loss = elastica_loss(tape, u, mask, params)?;
        Ok((leaves, u, loss))
    }

    fn arrays_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Model::Net(net) => net.params_mut().iter_mut().map(|p| p.value.data_mut()).collect(),
            Model::Pixels(p) => vec![p.data_mut()],
        }
    }
}

struct Solver<'a, T> {
    problem: &'a Problem,
    config: &'a SolverConfig,
    setup: Setup<T>,
    model: Model<T>,
    adam: Option<AdamState<T>>,
    start: u64,
    best: Option<BestIterate>,
}

impl<'a, T: Scalar> Solver<'a, T> {
    fn new(problem: &'a Problem, config: &'a SolverConfig, from: Option<Checkpoint<T>>) -> Result<Self> {
        config.validate()?;
        let setup = Setup::new(problem, config);
        let uses_adam = config.mode == Mode::DeepPrior || config.direct_update == DirectUpdate::Adam;
        let Some(ck) = from else {
            let model = match config.mode {
                Mode::DeepPrior => Model::Net(Network::build(config.network.clone(), config.seed)?),
                Mode::Direct => Model::Pixels(setup.initial.to_tensor()),
            };
            let adam = uses_adam.then(|| AdamState::new(model.sizes()));
            return Ok(Solver {
                problem,
                config,
                setup,
                model,
                adam,
                start: 0,
                best: None,
            });
        };

        ck.ensure_matches(config)?;
        let model = match config.mode {
            Mode::DeepPrior => Model::Net(Network::from_parameters(config.network.clone(), ck.state)?),
            Mode::Direct => {
                let [pixels] = <[NamedTensor<T>; 1]>::try_from(ck.state)
                    .map_err(|_| Error::Checkpoint("direct-mode checkpoint must hold one pixel array".into()))?;
                if pixels.value.shape() != [1, setup.height, setup.width] {
                    return Err(Error::Checkpoint(format!(
                        "pixel array {:?} does not match the image",
                        pixels.value.shape()
                    )));
                }
                Model::Pixels(pixels.value)
            }
        };
        if uses_adam != ck.adam.is_some() {
            return Err(Error::Checkpoint(
                "optimizer state does not match the configured update rule".into(),
            ));
        }
        if let Some(adam) = &ck.adam {
            if adam.m.iter().map(Vec::len).ne(model.sizes()) {
                return Err(Error::Checkpoint("Adam moments do not match the parameters".into()));
            }
        }
        Ok(Solver {
            problem,
            config,
            setup,
            model,
            adam: ck.adam,
            start: ck.iteration,
            best: ck.best,
        })
    }

    fn checkpoint(&self, iteration: u64) -> Checkpoint<T> {
        Checkpoint {
            header: self.config.manifest(),
            iteration,
            state: self.model.state(),
            adam: self.adam.clone(),
            best: self.best.clone(),
        }
    }

    /// Logs and tracks the best iterate; returns the image.
    fn observe(
        &mut self,
        iteration: u64,
        energy: f64,
        u: &Tensor<T>,
        observer: &mut dyn RunObserver<T>,
        record: &mut RunRecord,
    ) -> Result<ImageGrid> {
        // Remasking again in 64-bit keeps the known pixels bitwise equal to f
        // even when training runs in single precision.
        let mask = &self.problem.mask;
        let image = remask(&ImageGrid::from_tensor(u)?, &self.problem.image, mask)?;
        let (mae_inpaint, mae_full) = match &self.problem.ground_truth {
            Some(gt) => {
                let inpaint = if mask.count_unknown() > 0 {
                    Some(mae(&image, gt, Region::Unknown(mask))?)
                } else {
                    None
                };
                (inpaint, Some(mae(&image, gt, Region::Whole)?))
            }
            None => (None, None),
        };
        if let Some(m) = mae_inpaint {
            if self.best.as_ref().is_none_or(|b| m < b.mae) {
                self.best = Some(BestIterate {
                    iteration,
                    mae: m,
                    image: image.clone(),
                });
            }
        }
        let is_last = iteration == self.config.max_iterations;
        if iteration.is_multiple_of(self.config.log_every) || is_last {
            let entry = LogEntry {
                iteration,
                energy,
                mae_inpaint,
                mae_full,
                lr: self.config.schedule.lr_at(iteration),
            };
            observer.on_log(&entry, &image)?;
            record.entries.push(entry);
        }
        Ok(image)
    }

    fn run(mut self, observer: &mut dyn RunObserver<T>) -> Result<RunOutput<T>> {
        let cfg = self.config;
        let mask = &self.problem.mask;
        let mut record = RunRecord::default();
        let mut last_finite = (self.start, self.setup.initial.clone());
        if self.start > cfg.max_iterations {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at iteration {}, beyond the configured {}",
                self.start, cfg.max_iterations
            )));
        }

        for k in self.start..=cfg.max_iterations {
            if k > self.start && cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 && k < cfg.max_iterations {
                observer.on_checkpoint(&self.checkpoint(k))?;
            }
            let mut tape = Tape::new();
            let (leaves, u, loss) = self.model.evaluate(&mut tape, &self.setup, &cfg.params, mask)?;
            let energy = tape.value(loss).data()[0].as_f64();
            if !energy.is_finite() {
                return Err(Error::Diverged {
                    iteration: k,
                    last_finite_iteration: last_finite.0,
                    last_finite: Box::new(last_finite.1),
                });
            }
            let image = self.observe(k, energy, tape.value(u), observer, &mut record)?;
            last_finite = (k, image);
            if k == cfg.max_iterations {
                break;
            }

            tape.backward(loss)?;
            let mut grads: Vec<Tensor<T>> = leaves
                .iter()
                .map(|&v| tape.take_grad(v).expect("leaf gradient"))
                .collect();
            drop(tape);
            if let Some(limit) = cfg.clip_norm {
                let mut views: Vec<&mut [T]> = grads.iter_mut().map(|g| g.data_mut()).collect();
                clip_global_norm(&mut views, limit);
            }
            let lr = cfg.schedule.lr_at(k);
            let arrays = self.model.arrays_mut();
            match &mut self.adam {
                Some(adam) => adam.step(lr, arrays.into_iter().zip(grads.iter().map(|g| g.data())))?,
                None => {
                    for (p, g) in arrays.into_iter().zip(&grads) {
                        gd_step(p, g.data(), lr)?;
                    }
                }
            }
        }

        let checkpoint = self.checkpoint(cfg.max_iterations);
        observer.on_checkpoint(&checkpoint)?;
        record.best = self.best;
        Ok(RunOutput {
            record,
            final_image: last_finite.1,
            checkpoint,
        })
    }
}
