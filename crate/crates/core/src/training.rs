//! Reconstruction by fitting a neural field to projections.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::HashGridConfig;
use crate::error::{invalid, Error, Result};
use crate::field::{FieldConfig, FieldKind, NeuralField, RenderedRay, ThresholdSurrogate};
use crate::geometry::{intersect_aabb, ScannerGeometry, VolumeExtent};
use crate::grad::{loss_forward_backward, GradEngine, LossOptions, LossTerms, RayBatch};
use crate::metrics::{psnr, ssim, Psnr};
use crate::optim::{AdamConfig, AdamState};
use crate::phantom::{threshold_masks, DEFAULT_T_ALPHA, DEFAULT_T_BETA};
use crate::projector::{perturb_projections, project_masks, project_volume, NoiseSpec, ProjectionStack};
use crate::volume::Volume;

/// Quadrature samples per ray used to simulate measured projections.
pub const SIMULATION_SAMPLES: usize = 256;

/// `max(0, 1 - t / (k T))^2 * lambda0`.
pub fn lambda_schedule(t: usize, total: usize, k: f64, lambda0: f64) -> f64 {
    let r = (1.0 - t as f64 / (k * total as f64)).max(0.0);
    r * r * lambda0
}

/// `mean|S - S_gt| + lambda * mean[(A - A_sup)^2 + (B - B_sup)^2]`.
pub fn composite_loss(
    rendered: &[RenderedRay],
    gt_sigma: &[f64],
    sup_alpha: &[f64],
    sup_beta: &[f64],
    lambda: f64,
) -> Result<f64> {
    let n = rendered.len();
    if gt_sigma.len() != n || sup_alpha.len() != n || sup_beta.len() != n {
        return invalid("composite_loss inputs differ in length");
    }
    if n == 0 {
        return invalid("composite_loss needs at least one ray");
    }
    let mut data = 0.0;
    let mut tissue = 0.0;
    for i in 0..n {
        let r = rendered[i];
        data += (r.sigma_acc - gt_sigma[i]).abs();
        tissue += (r.alpha_acc - sup_alpha[i]).powi(2) + (r.beta_acc - sup_beta[i]).powi(2);
    }
    Ok((data + lambda * tissue) / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Tnt,
    TntConstLambda,
    TntNosup,
    Mlp,
    MlpThreshSup,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Tnt,
        TrainMode::TntConstLambda,
        TrainMode::TntNosup,
        TrainMode::Mlp,
        TrainMode::MlpThreshSup,
    ];

    pub fn field_kind(self) -> FieldKind {
        match self {
            TrainMode::Mlp | TrainMode::MlpThreshSup => FieldKind::Single,
            _ => FieldKind::Quad,
        }
    }

    pub fn needs_supervision(self) -> bool {
        !matches!(self, TrainMode::TntNosup | TrainMode::Mlp)
    }

    /// Tissue weight at iteration `t`.
    pub fn lambda(self, t: usize, cfg: &TrainConfig) -> f64 {
        match self {
            TrainMode::Tnt | TrainMode::MlpThreshSup => {
                lambda_schedule(t, cfg.total_iterations, cfg.k, cfg.lambda0)
            }
            TrainMode::TntConstLambda => cfg.lambda0,
            TrainMode::TntNosup | TrainMode::Mlp => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Tnt => "tnt",
            TrainMode::TntConstLambda => "tnt_const_lambda",
            TrainMode::TntNosup => "tnt_nosup",
            TrainMode::Mlp => "mlp",
            TrainMode::MlpThreshSup => "mlp_thresh_sup",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Projections of the thresholded ground-truth masks.
    Target,
    /// The same, perturbed by a smooth gain and Gaussian noise.
    TargetNoisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iterations: usize,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub lambda0: f64,
    pub k: f64,
    pub lr: f64,
    pub mode: TrainMode,
    pub supervision: Supervision,
    /// Perturbation for noisy supervision; `None` derives it from the stacks.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
    pub eval_every: usize,
    pub t_alpha: f64,
    pub t_beta: f64,
    pub surrogate_temp: f64,
    pub grid: HashGridConfig,
    #[serde(default)]
    pub deterministic: bool,
}

impl TrainConfig {
    /// CPU-sized preset for a `volume_size`^3 scene.
    pub fn desk(mode: TrainMode, volume_size: usize) -> Self {
        Self {
            total_iterations: 2000,
            batch_rays: 512,
            n_samples: 128,
            lambda0: 5.0,
            k: 0.5,
            lr: 1e-3,
            mode,
            supervision: Supervision::Target,
            noise: None,
            seed: 0,
            eval_every: 100,
            t_alpha: DEFAULT_T_ALPHA,
            t_beta: DEFAULT_T_BETA,
            surrogate_temp: 0.02,
            grid: HashGridConfig::desk(volume_size),
            deterministic: false,
        }
    }

    pub fn full(mode: TrainMode) -> Self {
        Self {
            total_iterations: 10_000,
            batch_rays: 1024,
            n_samples: 576,
            lr: 3e-4,
            eval_every: 500,
            grid: HashGridConfig::full(),
            ..Self::desk(mode, 256)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 || self.batch_rays == 0 || self.n_samples == 0 {
            return invalid("iterations, batch size and samples per ray must be positive");
        }
        if !(self.lambda0 >= 0.0) {
            return invalid("lambda0 must be non-negative");
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return invalid("k must lie in (0, 1]");
        }
        if self.eval_every == 0 {
            return invalid("eval_every must be positive");
        }
        if !(self.surrogate_temp > 0.0) {
            return invalid("surrogate temperature must be positive");
        }
        if !(self.t_alpha < self.t_beta) {
            return invalid("t_alpha must be below t_beta");
        }
        AdamConfig::with_lr(self.lr).validate()?;
        self.grid.validate()
    }

    pub fn surrogate(&self) -> Option<ThresholdSurrogate> {
        (self.mode == TrainMode::MlpThreshSup).then_some(ThresholdSurrogate {
            t_alpha: self.t_alpha,
            t_beta: self.t_beta,
            temperature: self.surrogate_temp,
        })
    }
}

/// Everything a reconstruction may look at: measured projections, optional
/// tissue supervision and the ground truth used only for scoring.
#[derive(Debug, Clone)]
pub struct Scene {
    pub truth: Volume,
    pub geom: ScannerGeometry,
    pub sigma: ProjectionStack,
    pub alpha: Option<ProjectionStack>,
    pub beta: Option<ProjectionStack>,
}

impl Scene {
    /// Simulates projections of `truth` (no supervision attached).
    pub fn simulate(truth: Volume, geom: ScannerGeometry) -> Result<Self> {
        let sigma = project_volume(&truth, &geom, SIMULATION_SAMPLES)?;
        Ok(Self {
            truth,
            geom,
            sigma,
            alpha: None,
            beta: None,
        })
    }

    /// Attaches tissue supervision derived from the thresholded ground truth.
    pub fn with_supervision(mut self, kind: Supervision, t_alpha: f64, t_beta: f64, noise: Option<&NoiseSpec>) -> Result<Self> {
        let masks = threshold_masks(&self.truth, t_alpha, t_beta)?;
        let (a, b) = project_masks(&masks, &self.geom, SIMULATION_SAMPLES)?;
        let (a, b) = match kind {
            Supervision::Target => (a, b),
            Supervision::TargetNoisy => {
                let na = noise.cloned().unwrap_or_else(|| NoiseSpec::default_for(&a, 1));
                let nb = NoiseSpec {
                    gaussian_sigma: noise.map_or(0.05 * b.mean(), |n| n.gaussian_sigma),
                    seed: na.seed.wrapping_add(1),
                    ..na.clone()
                };
                (perturb_projections(&a, &na)?, perturb_projections(&b, &nb)?)
            }
        };
        self.alpha = Some(a);
        self.beta = Some(b);
        Ok(self)
    }

    /// Scene for `config`: supervision attached when its mode needs it.
    pub fn for_config(truth: Volume, geom: ScannerGeometry, config: &TrainConfig) -> Result<Self> {
        let s = Self::simulate(truth, geom)?;
        if config.mode.needs_supervision() {
            s.with_supervision(config.supervision, config.t_alpha, config.t_beta, config.noise.as_ref())
        } else {
            Ok(s)
        }
    }

    pub fn extent(&self) -> &VolumeExtent {
        &self.truth.extent
    }
}

/// Per-view pixel counts: `floor(B / V)` everywhere plus one for `B mod V`
/// randomly chosen views.
pub fn allocate_rays<R: Rng + ?Sized>(n_views: usize, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_views == 0 || batch < n_views {
        return invalid(format!("batch of {batch} rays cannot cover {n_views} views"));
    }
    let mut counts = vec![batch / n_views; n_views];
    for v in sample(rng, n_views, batch % n_views) {
        counts[v] += 1;
    }
    Ok(counts)
}

/// A sampled detector pixel and its targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

const MAX_RESAMPLE: usize = 10_000;

/// Draws `batch` pixels with balanced per-view allocation; pixels whose rays
/// miss `extent` are redrawn within the same view.
pub fn sample_pixels<R: Rng + ?Sized>(
    geom: &ScannerGeometry,
    extent: &VolumeExtent,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<PixelSample>> {
    let counts = allocate_rays(geom.n_views(), batch, rng)?;
    let mut out = Vec::with_capacity(batch);
    for (view, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut tries = 0;
            loop {
                let row = rng.gen_range(0..geom.det_rows);
                let col = rng.gen_range(0..geom.det_cols);
                if intersect_aabb(&geom.ray_unchecked(view, row, col), extent).is_some() {
                    out.push(PixelSample { view, row, col });
                    break;
                }
                tries += 1;
                if tries >= MAX_RESAMPLE {
                    return invalid(format!("view {view} has no pixel whose ray meets the volume"));
                }
            }
        }
    }
    Ok(out)
}

/// Training batch: pixels from [`sample_pixels`] with jittered samples along
/// their rays and targets read from the stacks (zero when absent).
pub fn sample_batch<R: Rng + ?Sized>(
    scene: &Scene,
    field: &NeuralField,
    batch_rays: usize,
    n_samples: usize,
    rng: &mut R,
    out: &mut RayBatch,
) -> Result<()> {
    let pixels = sample_pixels(&scene.geom, field.domain(), batch_rays, rng)?;
    out.clear();
    out.n_samples = n_samples;
    let read = |s: &Option<ProjectionStack>, p: &PixelSample| s.as_ref().map_or(0.0, |s| s.get(p.view, p.row, p.col) as f64);
    for p in &pixels {
        let ray = scene.geom.ray_unchecked(p.view, p.row, p.col);
        let t = [
            scene.sigma.get(p.view, p.row, p.col) as f64,
            read(&scene.alpha, p),
            read(&scene.beta, p),
        ];
        if !out.push_ray(field, &ray, t, Some(&mut *rng)) {
            return invalid("sampled ray misses the field domain");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Batch loss of the most recent step (absent before the first step).
    pub loss: Option<LossTerms>,
    pub lambda: f64,
    pub psnr: Psnr,
    pub ssim: f64,
    /// Omitted for deterministic runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn final_psnr(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.psnr.value())
    }

    /// First logged iteration whose PSNR reaches `target`.
    pub fn first_reaching(&self, target: f64) -> Option<usize> {
        self.records.iter().find(|r| r.psnr.value() >= target).map(|r| r.iteration)
    }
}

/// Step-wise trainer. After an error the field still holds the last
/// parameters that produced a finite loss.
pub struct Trainer<'a> {
    pub scene: &'a Scene,
    pub config: TrainConfig,
    pub field: NeuralField,
    pub adam: AdamState,
    pub log: TrainLog,
    pub iteration: usize,
    engine: GradEngine,
    batch: RayBatch,
    rng: ChaCha8Rng,
    start: Instant,
    last_loss: Option<LossTerms>,
}

impl<'a> Trainer<'a> {
    pub fn new(scene: &'a Scene, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode.needs_supervision() && (scene.alpha.is_none() || scene.beta.is_none()) {
            return invalid(format!("mode {} needs tissue supervision stacks", config.mode.as_str()));
        }
        if scene.geom.n_views() > config.batch_rays {
            return invalid("batch size must be at least the number of views");
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fcfg = FieldConfig::new(config.mode.field_kind(), config.grid.clone(), *scene.extent());
        let field = NeuralField::new(&fcfg, &mut init_rng)?;
        let adam = AdamState::new(field.params().len(), AdamConfig::with_lr(config.lr))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            scene,
            field,
            adam,
            log: TrainLog::default(),
            iteration: 0,
            engine: GradEngine::new(),
            batch: RayBatch::new(config.n_samples),
            rng,
            start: Instant::now(),
            last_loss: None,
            config,
        })
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            surrogate: self.config.surrogate(),
            deterministic: self.config.deterministic,
        }
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossTerms> {
        let lambda = self.config.mode.lambda(self.iteration, &self.config);
        sample_batch(
            self.scene,
            &self.field,
            self.config.batch_rays,
            self.config.n_samples,
            &mut self.rng,
            &mut self.batch,
        )?;
        let opts = self.loss_options();
        let loss = loss_forward_backward(&self.field, &self.batch, lambda, &opts, &mut self.engine).map_err(|e| {
            Error::Divergence {
                iteration: self.iteration,
                message: e.to_string(),
            }
        })?;
        if let Some(i) = self.engine.grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                message: format!("non-finite gradient for parameter {i}"),
            });
        }
        let mut candidate = self.field.params().values.clone();
        self.adam.step(&mut candidate, &self.engine.grads)?;
        if candidate.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                message: "update produced non-finite parameters".into(),
            });
        }
        self.field.params_mut().values = candidate;
        self.iteration += 1;
        self.last_loss = Some(loss);
        Ok(loss)
    }

    /// Scores the current field against the ground truth and logs it.
    pub fn evaluate(&mut self) -> Result<&LogRecord> {
        let vol = self.field.extract_volume(self.scene.extent())?;
        let rec = LogRecord {
            iteration: self.iteration,
            loss: self.last_loss,
            lambda: self.config.mode.lambda(self.iteration, &self.config),
            psnr: psnr(&vol, &self.scene.truth, 1.0)?,
            ssim: ssim(&vol, &self.scene.truth, 1.0)?,
            seconds: (!self.config.deterministic).then(|| self.start.elapsed().as_secs_f64()),
        };
        self.log.records.push(rec);
        Ok(self.log.records.last().unwrap())
    }

    /// Runs the remaining iterations, evaluating at 0, every `eval_every`
    /// iterations and at the end.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// As [`Trainer::run`], calling `on_eval` after every evaluation.
    pub fn run_with(&mut self, mut on_eval: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        if self.log.records.is_empty() {
            self.evaluate()?;
            on_eval(self)?;
        }
        while self.iteration < self.config.total_iterations {
            self.step()?;
            if self.iteration % self.config.eval_every == 0 || self.iteration == self.config.total_iterations {
                self.evaluate()?;
                on_eval(self)?;
            }
        }
        Ok(())
    }
}

/// Trains a field for `scene`; returns it with its log.
pub fn train(scene: &Scene, config: &TrainConfig) -> Result<(NeuralField, TrainLog)> {
    let mut t = Trainer::new(scene, config.clone())?;
    t.run()?;
    Ok((t.field, t.log))
}
