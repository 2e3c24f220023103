//! Training loop for the conditional denoiser.
//!
//! Per example the objective is `mse(ε, ε̂) + λ₁ (1 - cos(Φ(x̂₀), z_y))`, where
//! `x̂₀` is recovered from `ε̂` and `Φ` is the frozen toy image embedder.
//! Gradients are averaged over the batch, followed by one Adam step and one
//! EMA update.
//!
//! All randomness for step `k` comes from a stream derived from
//! `(seed, k)`, so a checkpoint only needs the step counter to resume
//! exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::conditioning::{
    load_external_embedding, read_embedding_manifest, toy_text_embed, ConditioningEmbedding,
    LabelPrompt, ToyImageEmbedder,
};
use crate::config::KeyValues;
use crate::denoiser::{
    adam_step, build_on_tape, init_params, AdamConfig, AdamState, ArchitectureConfig,
    DenoiserParams,
};
use crate::diffusion::{ema_update, forward_marginal, linear_beta_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{load_image, save_pgm, standard_normal_field, Image, PgmDepth, SeededRng};
use crate::par;
use crate::phantom::{generate_phantom, suite_params, PhantomParams};
use crate::wavelet::{starlet_decompose, starlet_reconstruct, WaveletPyramid};

const STREAM_INIT: u64 = 1;
const STREAM_STEP: u64 = 2;
const RECONSTRUCTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda1: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Number of diffusion steps `T`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub arch: ArchitectureConfig,
    /// 0 disables checkpointing.
    pub checkpoint_every: u64,
    /// Apply the alignment term only for `t <= align_max_t`.
    pub align_max_t: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            adam: AdamConfig::default(),
            lambda1: 0.1,
            ema_decay: 0.999,
            seed: 0,
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            arch: ArchitectureConfig::default(),
            checkpoint_every: 500,
            align_max_t: None,
        }
    }
}

const TRAINING_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda1",
    "ema_decay",
    "seed",
    "T",
    "beta_start",
    "beta_end",
    "checkpoint_every",
    "align_max_t",
];

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.align_max_t == Some(0) {
            return bad("align_max_t must be positive");
        }
        self.adam.validate()?;
        self.arch.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = TRAINING_KEYS
            .iter()
            .chain(ArchitectureConfig::KEYS)
            .copied()
            .collect();
        kv.reject_unknown(&known)?;
        let d = Self::default();
        let align_max_t = match kv.get_str("align_max_t") {
            None | Some("none") => None,
            Some(_) => Some(kv.get_or("align_max_t", 0usize)?),
        };
        let cfg = Self {
            steps: kv.get_or("steps", d.steps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                lr: kv.get_or("lr", d.adam.lr)?,
                beta1: kv.get_or("beta1", d.adam.beta1)?,
                beta2: kv.get_or("beta2", d.adam.beta2)?,
                eps: kv.get_or("adam_eps", d.adam.eps)?,
            },
            lambda1: kv.get_or("lambda1", d.lambda1)?,
            ema_decay: kv.get_or("ema_decay", d.ema_decay)?,
            seed: kv.get_or("seed", d.seed)?,
            diffusion_steps: kv.get_or("T", d.diffusion_steps)?,
            beta_start: kv.get_or("beta_start", d.beta_start)?,
            beta_end: kv.get_or("beta_end", d.beta_end)?,
            arch: ArchitectureConfig::from_kv(kv)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
            align_max_t,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.adam.lr);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("lambda1", self.lambda1);
        kv.set("ema_decay", self.ema_decay);
        kv.set("seed", self.seed);
        kv.set("T", self.diffusion_steps);
        kv.set("beta_start", self.beta_start);
        kv.set("beta_end", self.beta_end);
        kv.set("checkpoint_every", self.checkpoint_every);
        match self.align_max_t {
            Some(t) => kv.set("align_max_t", t),
            None => kv.set("align_max_t", "none"),
        }
        self.arch.write_kv(&mut kv);
        kv
    }
}

/// One training example with its cached encoder features and label embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Image,
    pub label: LabelPrompt,
    pub pyramid: WaveletPyramid,
    pub z_y: ConditioningEmbedding,
}

impl Example {
    /// Decomposes `image` and embeds `label` with the toy text encoder.
    pub fn new(image: Image, label: LabelPrompt, scales: usize, embed_dim: usize) -> Result<Self> {
        let z_y = toy_text_embed(&label, embed_dim)?;
        Self::with_embedding(image, label, scales, z_y)
    }

    pub fn with_embedding(
        image: Image,
        label: LabelPrompt,
        scales: usize,
        z_y: ConditioningEmbedding,
    ) -> Result<Self> {
        let pyramid = starlet_decompose(&image, scales)?;
        let err = starlet_reconstruct(&pyramid).max_abs_diff(&image);
        if !(err < RECONSTRUCTION_TOL) {
            return Err(Error::Invariant(format!(
                "pyramid reconstruction error {err:e} exceeds {RECONSTRUCTION_TOL:e}"
            )));
        }
        Ok(Self {
            image,
            label,
            pyramid,
            z_y,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Example>,
}

impl Dataset {
    pub fn new(items: Vec<Example>) -> Result<Self> {
        if let Some(first) = items.first() {
            let dims = first.image.dims();
            let (scales, dim) = (first.pyramid.scales(), first.z_y.dim());
            for (i, ex) in items.iter().enumerate() {
                if ex.image.dims() != dims || ex.pyramid.dims() != dims {
                    return Err(Error::Invariant(format!(
                        "example {i} has dims {:?}, expected {dims:?}",
                        ex.image.dims()
                    )));
                }
                if ex.pyramid.scales() != scales || ex.z_y.dim() != dim {
                    return Err(Error::Invariant(format!(
                        "example {i} has inconsistent scales or embedding dim"
                    )));
                }
            }
        }
        Ok(Self { items })
    }

    /// `n` seeded phantoms with cycling B-line counts.
    pub fn phantoms(n: usize, base: &PhantomParams, seed: u64, scales: usize, embed_dim: usize) -> Result<Self> {
        let items = par::map_range(n, |i| {
            let (img, label) = generate_phantom(&suite_params(base, seed, i, 4))?;
            Example::new(img, label, scales, embed_dim)
        });
        Self::new(items.into_iter().collect::<Result<_>>()?)
    }

    /// Reads `images/*.pgm`, `labels.tsv` (`filename<TAB>label`) and, when
    /// present, `embeddings/manifest.tsv` (`label<TAB>vector file`). Labels
    /// without an external vector use the toy text encoder.
    pub fn load(dir: &Path, scales: usize, embed_dim: usize) -> Result<Self> {
        let labels_path = dir.join("labels.tsv");
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let manifest = dir.join("embeddings").join("manifest.tsv");
        let external = if manifest.exists() {
            read_embedding_manifest(&manifest)?
                .into_iter()
                .map(|(label, path)| Ok((label, load_external_embedding(&path, embed_dim)?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (file, label) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected filename<TAB>label", labels_path.display(), n + 1))
            })?;
            entries.push((dir.join("images").join(file.trim()), LabelPrompt::new(label)?));
        }
        let items = par::map(&entries, |(path, label)| {
            let img = load_image(path)?;
            let z_y = match external.iter().find(|(l, _)| l == label) {
                Some((_, z)) => z.clone(),
                None => toy_text_embed(label, embed_dim)?,
            };
            Example::with_embedding(img, label.clone(), scales, z_y)
        });
        Self::new(items.into_iter().collect::<Result<_>>()?)
    }

    pub fn items(&self) -> &[Example] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.items.first().map(|e| e.image.dims())
    }
}

/// Writes `images/NNNN.pgm` (16-bit) and `labels.tsv` under `dir`.
pub fn write_dataset_dir(dir: &Path, items: &[(Image, LabelPrompt)]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut labels = String::new();
    for (i, (img, label)) in items.iter().enumerate() {
        let name = format!("{i:04}.pgm");
        save_pgm(img, &images.join(&name), PgmDepth::Sixteen)?;
        writeln!(labels, "{name}\t{label}").expect("string write");
    }
    let path = dir.join("labels.tsv");
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

/// Mean squared difference.
pub fn mse_loss(eps: &Image, eps_pred: &Image) -> Result<f64> {
    eps.check_same_dims(eps_pred, "mse operands")?;
    Ok(eps.rms_diff(eps_pred).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub total: f64,
    pub mse: f64,
    pub align: f64,
}

/// Objective value and parameter gradient for one `(x₀, t, ε)` draw.
pub fn example_objective(
    params: &DenoiserParams,
    example: &Example,
    t: usize,
    eps: &Image,
    sched: &NoiseSchedule,
    lambda1: f64,
    embedder: &ToyImageEmbedder,
) -> Result<(StepMetrics, DenoiserParams)> {
    let x_t = forward_marginal(&example.image, t, eps, sched)?;
    let (w, h) = x_t.dims();
    let mut tape = Tape::new();
    let (vars, out) = build_on_tape(&mut tape, params, &x_t, t, &example.z_y, &example.pyramid)?;
    let mse = tape.mse_to(out, eps.pixels());

    let ab = sched.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    let offset: Vec<f64> = x_t.pixels().iter().map(|v| v * inv).collect();
    let x0_hat = tape.affine(out, -(1.0 - ab).sqrt() * inv, Some(&offset));
    let x0_hat = tape.reshape(x0_hat, vec![w * h]);
    let z_img = embedder.embed_on_tape(&mut tape, x0_hat, w, h)?;
    let align = tape.cosine_distance_to(z_img, example.z_y.values())?;

    let weighted = tape.scale(align, lambda1);
    let total = tape.add(mse, weighted);
    let metrics = StepMetrics {
        total: tape.value(total)[0],
        mse: tape.value(mse)[0],
        align: tape.value(align)[0],
    };
    let mut grads = tape.backward(total, &[1.0]);
    let mut result = params.zeros_like();
    for (block, var) in result.blocks_mut().iter_mut().zip(vars) {
        if let Some(g) = grads.take(var) {
            block.values = g;
        }
    }
    Ok((metrics, result))
}

/// Parameters, EMA shadow and optimizer state. `adam.step` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Self {
        Self {
            ema: params.clone(),
            adam: AdamState::new(&params),
            params,
        }
    }

    /// Fresh state initialized from `cfg.seed`.
    pub fn init(cfg: &TrainingConfig) -> Result<Self> {
        let mut rng = SeededRng::derive(cfg.seed, &[STREAM_INIT]);
        Ok(Self::new(init_params(&cfg.arch, &mut rng)?))
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

/// A batch draw: example indices, timesteps and noise fields.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noise: Vec<Image>,
}

impl Batch {
    /// Samples indices uniformly with replacement, `t ~ U{1..T}` and `ε ~ N(0, I)`.
    pub fn draw(dataset: &Dataset, cfg: &TrainingConfig, rng: &mut SeededRng) -> Result<Self> {
        let (w, h) = dataset
            .dims()
            .ok_or_else(|| Error::Parameter("dataset is empty".into()))?;
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.index(dataset.len())).collect();
        let timesteps = (0..cfg.batch_size)
            .map(|_| 1 + rng.index(cfg.diffusion_steps))
            .collect();
        let noise = (0..cfg.batch_size)
            .map(|_| standard_normal_field(rng, w, h))
            .collect();
        Ok(Self {
            indices,
            timesteps,
            noise,
        })
    }
}

/// One optimizer step on `batch`: averaged gradients, Adam, EMA.
pub fn training_step(
    state: &mut TrainState,
    dataset: &Dataset,
    batch: &Batch,
    sched: &NoiseSchedule,
    cfg: &TrainingConfig,
    embedder: &ToyImageEmbedder,
) -> Result<StepMetrics> {
    let step = state.step() as usize + 1;
    let params = &state.params;
    let results = par::map_range(batch.indices.len(), |b| {
        let t = batch.timesteps[b];
        let lambda = match cfg.align_max_t {
            Some(max_t) if t > max_t => 0.0,
            _ => cfg.lambda1,
        };
        example_objective(params, &dataset.items[batch.indices[b]], t, &batch.noise[b], sched, lambda, embedder)
    });

    let n = results.len() as f64;
    let mut grads = params.zeros_like();
    let mut sum = StepMetrics {
        total: 0.0,
        mse: 0.0,
        align: 0.0,
    };
    for r in results {
        let (m, g) = r.map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step, detail },
            Error::UndefinedCosine => Error::Divergence {
                step,
                detail: "predicted image has a zero embedding".into(),
            },
            other => other,
        })?;
        sum.total += m.total;
        sum.mse += m.mse;
        sum.align += m.align;
        grads.add_assign(&g);
    }
    grads.scale_assign(1.0 / n);
    let metrics = StepMetrics {
        total: sum.total / n,
        mse: sum.mse / n,
        align: sum.align / n,
    };
    if !metrics.total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("loss {}", metrics.total),
        });
    }
    adam_step(&mut state.params, &grads, &mut state.adam, &cfg.adam)?;
    ema_update(&mut state.ema, &state.params, cfg.ema_decay)?;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub align: f64,
}

pub fn loss_curve_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,total,mse,align\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.total, r.mse, r.align).expect("string write");
    }
    out
}

pub fn parse_loss_curve(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,total,mse,align") {
        return Err(Error::Format("loss curve header must be step,total,mse,align".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad loss curve row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRow {
                step: f[0].parse().map_err(|_| bad())?,
                total: num(f[1])?,
                mse: num(f[2])?,
                align: num(f[3])?,
            })
        })
        .collect()
}

/// Final weights plus the loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub curve: Vec<LossRow>,
}

/// Owns the training state and drives steps, checkpoints and resume.
#[derive(Debug)]
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainingConfig,
    sched: NoiseSchedule,
    embedder: ToyImageEmbedder,
    state: TrainState,
    curve: Vec<LossRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainingConfig) -> Result<Self> {
        let state = TrainState::init(&cfg)?;
        Self::from_parts(dataset, cfg, state, Vec::new())
    }

    fn from_parts(dataset: &'a Dataset, cfg: TrainingConfig, state: TrainState, curve: Vec<LossRow>) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Parameter("dataset is empty".into()));
        }
        let first = &dataset.items()[0];
        if first.pyramid.scales() != cfg.arch.scales || first.z_y.dim() != cfg.arch.embed_dim {
            return Err(Error::Parameter(format!(
                "dataset has {} scales and embedding dim {}, config expects {} and {}",
                first.pyramid.scales(),
                first.z_y.dim(),
                cfg.arch.scales,
                cfg.arch.embed_dim
            )));
        }
        Ok(Self {
            dataset,
            sched: cfg.schedule()?,
            embedder: ToyImageEmbedder::with_dim(cfg.arch.embed_dim),
            cfg,
            state,
            curve,
        })
    }

    /// Continues from a checkpoint directory written by [`Trainer::save_checkpoint`].
    pub fn resume(dataset: &'a Dataset, checkpoint: &Path) -> Result<Self> {
        let cfg_path = checkpoint.join("config.txt");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = TrainingConfig::parse(&text)?;
        let state_path = checkpoint.join("state.txt");
        let kv = KeyValues::parse(&fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?)?;
        let step: u64 = kv.get_or("step", 0)?;
        let params = DenoiserParams::load(checkpoint, "params")?;
        let ema = DenoiserParams::load(checkpoint, "ema")?;
        let m = DenoiserParams::load(checkpoint, "adam_m")?;
        let v = DenoiserParams::load(checkpoint, "adam_v")?;
        for other in [&ema, &m, &v] {
            params.check_same_shape(other)?;
        }
        if *params.arch() != cfg.arch {
            return Err(Error::Corruption("checkpoint parameters do not match its config".into()));
        }
        let curve_path = checkpoint.join("loss.csv");
        let curve = parse_loss_curve(&fs::read_to_string(&curve_path).map_err(|e| Error::io(&curve_path, e))?)?;
        if curve.len() as u64 != step {
            return Err(Error::Corruption(format!(
                "checkpoint at step {step} has {} loss rows",
                curve.len()
            )));
        }
        let state = TrainState {
            params,
            ema,
            adam: AdamState { m, v, step },
        };
        Self::from_parts(dataset, cfg, state, curve)
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    /// Changes the total step budget, e.g. to extend a resumed run.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.cfg.steps = steps;
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn curve(&self) -> &[LossRow] {
        &self.curve
    }

    pub fn step(&self) -> u64 {
        self.state.step()
    }

    /// Runs one step with the stream for the next step index.
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let k = self.state.step() + 1;
        let mut rng = SeededRng::derive(self.cfg.seed, &[STREAM_STEP, k]);
        let batch = Batch::draw(self.dataset, &self.cfg, &mut rng)?;
        let m = training_step(&mut self.state, self.dataset, &batch, &self.sched, &self.cfg, &self.embedder)?;
        self.curve.push(LossRow {
            step: k,
            total: m.total,
            mse: m.mse,
            align: m.align,
        });
        Ok(m)
    }

    /// Steps until `until` (capped at `cfg.steps`), checkpointing into
    /// `out_dir/checkpoints` every `checkpoint_every` steps when given.
    pub fn run_until(&mut self, until: u64, out_dir: Option<&Path>) -> Result<()> {
        let until = until.min(self.cfg.steps);
        while self.state.step() < until {
            self.step_once()?;
            let k = self.state.step();
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && k % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(&checkpoint_path(dir, k))?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        self.run_until(self.cfg.steps, out_dir)
    }

    /// Writes the full state to `dir` atomically (staged, then renamed).
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let staging = dir.with_extension("partial");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        self.state.params.save(&staging, "params")?;
        self.state.ema.save(&staging, "ema")?;
        self.state.adam.m.save(&staging, "adam_m")?;
        self.state.adam.v.save(&staging, "adam_v")?;
        let write = |name: &str, text: String| {
            let p = staging.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("config.txt", self.cfg.to_kv().to_text())?;
        write(
            "state.txt",
            format!("step = {}\nseed = {}\n", self.state.step(), self.cfg.seed),
        )?;
        write("loss.csv", loss_curve_csv(&self.curve))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            params: self.state.params,
            ema: self.state.ema,
            curve: self.curve,
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:08}"))
}

/// Highest-step complete checkpoint under `out_dir/checkpoints`.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = out_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().map_or(true, |(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Trains from scratch without checkpoints.
pub fn train(dataset: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, cfg.clone())?;
    trainer.run(None)?;
    Ok(trainer.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            steps: 6,
            batch_size: 3,
            arch: ArchitectureConfig::tiny(),
            diffusion_steps: 20,
            checkpoint_every: 2,
            seed: 9,
            ..Default::default()
        }
    }

    fn tiny_dataset(cfg: &TrainingConfig, n: usize) -> Dataset {
        let base = PhantomParams {
            width: 16,
            height: 16,
            ..Default::default()
        };
        Dataset::phantoms(n, &base, 3, cfg.arch.scales, cfg.arch.embed_dim).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let z = Image::zeros(2, 2);
        assert_eq!(mse_loss(&a, &z).unwrap(), 3.5);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.25);
        assert!((mse_loss(&a, &shifted).unwrap() - 0.0625).abs() < 1e-15);
        assert!(mse_loss(&a, &Image::zeros(1, 4)).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainingConfig {
            align_max_t: Some(40),
            ..tiny_cfg()
        };
        let back = TrainingConfig::parse(&cfg.to_kv().to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(TrainingConfig::parse("").unwrap(), TrainingConfig::default());
        assert!(TrainingConfig::parse("batch_size = 0").is_err());
        assert!(TrainingConfig::parse("lambda1 = -1").is_err());
        assert!(TrainingConfig::parse("learning_rate = 1").is_err());
        assert!(TrainingConfig::parse("ema_decay = 1").is_err());
    }

    /// Central differences on the full objective, every parameter.
    #[test]
    fn objective_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(&cfg, 2);
        let sched = cfg.schedule().unwrap();
        let embedder = ToyImageEmbedder::with_dim(cfg.arch.embed_dim);
        let mut rng = SeededRng::new(4);
        let params = init_params(&cfg.arch, &mut rng).unwrap();
        let ex = &data.items()[1];
        let eps = standard_normal_field(&mut rng, 16, 16);
        let t = 7;
        let (_, grads) = example_objective(&params, ex, t, &eps, &sched, 0.5, &embedder).unwrap();
        let eval = |p: &DenoiserParams| example_objective(p, ex, t, &eps, &sched, 0.5, &embedder).unwrap().0.total;
        let h = 1e-5;
        let analytic: Vec<f64> = grads.values().copied().collect();
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            *plus.values_mut().nth(i).unwrap() += h;
            let mut minus = params.clone();
            *minus.values_mut().nth(i).unwrap() -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-7);
            assert!(rel < 1e-4, "param {i}: analytic {g} fd {fd}");
        }
    }

    #[test]
    fn zero_lambda_gives_plain_mse_and_exact_noise_gives_zero_mse() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(&cfg, 1);
        let sched = cfg.schedule().unwrap();
        let embedder = ToyImageEmbedder::with_dim(cfg.arch.embed_dim);
        let mut rng = SeededRng::new(2);
        let params = init_params(&cfg.arch, &mut rng).unwrap();
        let eps = standard_normal_field(&mut rng, 16, 16);
        let (m, _) = example_objective(&params, &data.items()[0], 3, &eps, &sched, 0.0, &embedder).unwrap();
        assert_eq!(m.total, m.mse);
        assert!(m.align > 0.0);

        let zero = Image::zeros(16, 16);
        let (m, _) = example_objective(&params.zeros_like(), &data.items()[0], 3, &zero, &sched, 0.0, &embedder).unwrap();
        assert_eq!(m.mse, 0.0);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let cfg = TrainingConfig { steps: 0, ..tiny_cfg() };
        let data = tiny_dataset(&cfg, 2);
        let out = train(&data, &cfg).unwrap();
        assert!(out.curve.is_empty());
        assert!(out.params.bitwise_eq(&TrainState::init(&cfg).unwrap().params));
    }

    #[test]
    fn training_is_deterministic_with_complete_curve() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(&cfg, 4);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        assert!(a.ema.bitwise_eq(&b.ema));
        assert_eq!(a.curve, b.curve);
        let steps: Vec<u64> = a.curve.iter().map(|r| r.step).collect();
        assert_eq!(steps, (1..=6).collect::<Vec<_>>());
        let c = train(&data, &TrainingConfig { seed: 10, ..cfg }).unwrap();
        assert!(!a.params.bitwise_eq(&c.params));
    }

    /// λ₁ = 0 and λ₁ > 0 runs share the random stream, so their first-step
    /// MSE agrees and the λ₁ = 0 totals equal the MSE column.
    #[test]
    fn lambda_ablation_shares_stream() {
        let cfg = TrainingConfig { lambda1: 0.0, ..tiny_cfg() };
        let data = tiny_dataset(&cfg, 4);
        let plain = train(&data, &cfg).unwrap();
        assert!(plain.curve.iter().all(|r| r.total == r.mse));
        let aligned = train(&data, &TrainingConfig { lambda1: 0.3, ..cfg }).unwrap();
        assert_eq!(plain.curve[0].mse, aligned.curve[0].mse);
        assert_eq!(plain.curve[0].align, aligned.curve[0].align);
    }

    #[test]
    fn resume_is_exact() {
        let cfg = tiny_cfg();
        let data = tiny_dataset(&cfg, 4);
        let dir = tempfile::tempdir().unwrap();
        let full = train(&data, &cfg).unwrap();

        let mut first = Trainer::new(&data, cfg.clone()).unwrap();
        first.run_until(4, Some(dir.path())).unwrap();
        let ckpt = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert!(ckpt.ends_with("step-00000004"));
        let mut resumed = Trainer::resume(&data, &ckpt).unwrap();
        assert_eq!(resumed.step(), 4);
        resumed.run(None).unwrap();
        let out = resumed.into_outcome();
        assert!(out.params.bitwise_eq(&full.params));
        assert!(out.ema.bitwise_eq(&full.ema));
        assert_eq!(out.curve, full.curve);
    }

    #[test]
    fn loss_curve_csv_round_trips() {
        let rows = vec![
            LossRow { step: 1, total: 0.1 + 0.2, mse: 1e-300, align: 2.0 },
            LossRow { step: 2, total: 1.0 / 3.0, mse: 0.5, align: 0.0 },
        ];
        let text = loss_curve_csv(&rows);
        assert!(text.starts_with("step,total,mse,align\n"));
        assert_eq!(parse_loss_curve(&text).unwrap(), rows);
        assert!(parse_loss_curve("a,b\n").is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<(Image, LabelPrompt)> = (0..3)
            .map(|i| {
                generate_phantom(&PhantomParams {
                    width: 12,
                    height: 12,
                    n_blines: i,
                    seed: i as u64,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        write_dataset_dir(dir.path(), &items).unwrap();
        let data = Dataset::load(dir.path(), cfg.arch.scales, cfg.arch.embed_dim).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.items()[2].label.text(), "2 B-lines");
        assert!(data.items()[1].image.max_abs_diff(&items[1].0) < 1e-4);

        let emb_dir = dir.path().join("embeddings");
        fs::create_dir_all(&emb_dir).unwrap();
        let z = ConditioningEmbedding::new(vec![1.0, 0.0, 0.0, 0.0], crate::conditioning::EmbeddingSource::ExternalFile).unwrap();
        z.save(&emb_dir.join("one.awt")).unwrap();
        fs::write(emb_dir.join("manifest.tsv"), "1 B-lines\tone.awt\n").unwrap();
        let data = Dataset::load(dir.path(), cfg.arch.scales, cfg.arch.embed_dim).unwrap();
        assert_eq!(data.items()[1].z_y.values(), z.values());
        assert!(Dataset::load(dir.path(), cfg.arch.scales, 5).is_err());
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let cfg = tiny_cfg();
        let a = Example::new(Image::zeros(8, 8), LabelPrompt::new("x").unwrap(), 2, 4).unwrap();
        let b = Example::new(Image::zeros(9, 8), LabelPrompt::new("x").unwrap(), 2, 4).unwrap();
        assert!(Dataset::new(vec![a.clone(), b]).is_err());
        let data = Dataset::new(vec![a]).unwrap();
        let wrong = TrainingConfig { arch: ArchitectureConfig::default(), ..cfg };
        assert!(Trainer::new(&data, wrong).is_err());
    }
}
