//! Command implementations shared by the binary and the tests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tnt::baselines::{fdk, sart};
use tnt::field::NeuralField;
use tnt::metrics::EvalReport;
use tnt::phantom::{add_foreign_bodies, clip_hard_tissue, generate_head_phantom, threshold_masks};
use tnt::projector::{project_masks, project_volume};
use tnt::training::{Scene, TrainLog, TrainMode, Trainer, SIMULATION_SAMPLES};
use tnt::volume::{TissueMasks, Volume};
use tnt::{Error, Result};

use crate::config::RunConfig;
use crate::io::{self, Axis};

/// Every reconstruction method the CLI can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tnt,
    TntConstLambda,
    TntNosup,
    Mlp,
    MlpThreshSup,
    Sart,
    Fdk,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Tnt,
        Method::TntConstLambda,
        Method::TntNosup,
        Method::Mlp,
        Method::MlpThreshSup,
        Method::Sart,
        Method::Fdk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Tnt => "tnt",
            Method::TntConstLambda => "tnt-const-lambda",
            Method::TntNosup => "tnt-nosup",
            Method::Mlp => "mlp",
            Method::MlpThreshSup => "mlp-thresh-sup",
            Method::Sart => "sart",
            Method::Fdk => "fdk",
        }
    }

    pub fn train_mode(self) -> Option<TrainMode> {
        match self {
            Method::Tnt => Some(TrainMode::Tnt),
            Method::TntConstLambda => Some(TrainMode::TntConstLambda),
            Method::TntNosup => Some(TrainMode::TntNosup),
            Method::Mlp => Some(TrainMode::Mlp),
            Method::MlpThreshSup => Some(TrainMode::MlpThreshSup),
            Method::Sart | Method::Fdk => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('-', "_") == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Ground-truth phantom and tissue masks described by `cfg.phantom`.
pub fn build_phantom(cfg: &RunConfig) -> Result<(Volume, TissueMasks)> {
    let (mut vol, mut masks) = generate_head_phantom(&cfg.phantom.head)?;
    if let Some(fb) = &cfg.phantom.foreign_bodies {
        (vol, masks) = add_foreign_bodies(&vol, &masks, fb)?;
    }
    if let Some(cap) = cfg.phantom.clip_hard {
        vol = clip_hard_tissue(&vol, cap)?;
        masks.beta = threshold_masks(&vol, cfg.train.t_alpha, cfg.train.t_beta)?.beta;
    }
    Ok((vol, masks))
}

/// Output of one reconstruction.
pub struct MethodRun {
    pub volume: Volume,
    pub field: Option<NeuralField>,
    pub log: Option<TrainLog>,
    pub seconds: Option<f64>,
    pub iterations: usize,
}

/// Reconstructs `truth` from `views` simulated projections. Neural methods
/// checkpoint into `checkpoint` at every evaluation, and on divergence leave
/// the last finite state there before returning the error.
pub fn run_method(cfg: &RunConfig, method: Method, truth: &Volume, views: usize, checkpoint: Option<&Path>) -> Result<MethodRun> {
    let geom = cfg.geometry_with_views(views)?;
    let deterministic = cfg.deterministic || cfg.train.deterministic;
    let start = Instant::now();
    let seconds = |s: Instant| (!deterministic).then(|| s.elapsed().as_secs_f64());
    match method.train_mode() {
        Some(mode) => {
            let mut tc = cfg.train.clone();
            tc.mode = mode;
            tc.deterministic = deterministic;
            let scene = Scene::for_config(truth.clone(), geom, &tc)?;
            let mut trainer = Trainer::new(&scene, tc)?;
            let result = trainer.run_with(|t| match checkpoint {
                Some(path) => io::write_checkpoint(path, &t.field, t.iteration),
                None => Ok(()),
            });
            if let Err(e) = result {
                if let (Error::Divergence { .. }, Some(path)) = (&e, checkpoint) {
                    io::write_checkpoint(path, &trainer.field, trainer.iteration)?;
                }
                return Err(e);
            }
            let volume = trainer.field.extract_volume(&truth.extent)?;
            Ok(MethodRun {
                volume,
                iterations: trainer.iteration,
                field: Some(trainer.field),
                log: Some(trainer.log),
                seconds: seconds(start),
            })
        }
        None => {
            let stack = project_volume(truth, &geom, SIMULATION_SAMPLES)?;
            let (volume, iterations) = if method == Method::Sart {
                (sart(&stack, &truth.extent, &cfg.sart)?, cfg.sart.n_iterations)
            } else {
                (fdk(&stack, &truth.extent, &cfg.fdk)?, 0)
            };
            Ok(MethodRun {
                volume,
                field: None,
                log: None,
                seconds: seconds(start),
                iterations,
            })
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `phantom.raw`, `alpha.raw` and `beta.raw` (with sidecars) into `out`.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (vol, masks) = build_phantom(cfg)?;
    ensure_dir(out)?;
    let paths = [out.join("phantom.raw"), out.join("alpha.raw"), out.join("beta.raw")];
    io::write_volume(&paths[0], &vol, "sigma")?;
    io::write_volume(&paths[1], &masks.alpha, "alpha_mask")?;
    io::write_volume(&paths[2], &masks.beta, "beta_mask")?;
    Ok(paths.to_vec())
}

/// Projects a volume (and optionally its masks) for the configured scanner.
pub fn cmd_project(cfg: &RunConfig, volume: &Path, masks: Option<(&Path, &Path)>, views: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (vol, _) = io::read_volume(volume)?;
    let geom = cfg.geometry_with_views(views)?;
    ensure_dir(out)?;
    let mut written = vec![out.join("sigma.raw")];
    io::write_projections(&written[0], &project_volume(&vol, &geom, SIMULATION_SAMPLES)?)?;
    if let Some((a, b)) = masks {
        let masks = TissueMasks::new(io::read_volume(a)?.0, io::read_volume(b)?.0)?;
        let (pa, pb) = project_masks(&masks, &geom, SIMULATION_SAMPLES)?;
        written.push(out.join("alpha.raw"));
        written.push(out.join("beta.raw"));
        io::write_projections(&written[1], &pa)?;
        io::write_projections(&written[2], &pb)?;
    }
    Ok(written)
}

/// Provenance of a reconstruction directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub method: Method,
    pub views: usize,
    pub seed: u64,
    pub config: RunConfig,
}

/// Reconstructs with `method` and writes `recon.raw`, `report.json`,
/// `run.json` and, for neural methods, `checkpoint.bin` and `log.jsonl`.
pub fn cmd_reconstruct(cfg: &RunConfig, method: Method, views: usize, truth: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let truth = match truth {
        Some(p) => io::read_volume(p)?.0,
        None => build_phantom(cfg)?.0,
    };
    ensure_dir(out)?;
    let ckpt = out.join("checkpoint.bin");
    let run = run_method(cfg, method, &truth, views, method.train_mode().is_some().then_some(ckpt.as_path()))?;
    io::write_volume(&out.join("recon.raw"), &run.volume, "sigma")?;
    if let Some(log) = &run.log {
        io::atomic_write(&out.join("log.jsonl"), log.to_jsonl()?.as_bytes())?;
    }
    let mut report = EvalReport::new(1.0);
    report.add(method.as_str(), views, cfg.train.seed, &run.volume, &truth, run.seconds, run.iterations)?;
    io::write_json(&out.join("report.json"), &report)?;
    io::write_json(
        &out.join("run.json"),
        &RunRecord {
            method,
            views,
            seed: cfg.train.seed,
            config: cfg.clone(),
        },
    )?;
    Ok(report)
}

/// Scores a reconstruction against ground truth.
pub fn cmd_eval(recon: &Path, truth: &Path, label: &str, views: usize, seed: u64, data_range: f64, out: &Path) -> Result<EvalReport> {
    let (r, _) = io::read_volume(recon)?;
    let (t, _) = io::read_volume(truth)?;
    let mut report = EvalReport::new(data_range);
    report.add(label, views, seed, &r, &t, None, 0)?;
    io::write_json(out, &report)?;
    Ok(report)
}

pub fn cmd_slice(volume: &Path, axis: Axis, index: usize, window: (f64, f64), out: &Path) -> Result<io::SliceHeader> {
    let (vol, _) = io::read_volume(volume)?;
    io::write_slice(out, &vol, axis, index, window)
}

/// Mean metrics of one (method, views) cell of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub method: String,
    pub views: usize,
    pub seeds: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub report: EvalReport,
    pub summary: Vec<MatrixCell>,
}

impl MatrixReport {
    pub fn from_report(report: EvalReport) -> Self {
        let mut groups: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
        for r in &report.rows {
            groups.entry((r.method.clone(), r.views)).or_default().push((r.psnr.value(), r.ssim));
        }
        let summary = groups
            .into_iter()
            .map(|((method, views), v)| MatrixCell {
                method,
                views,
                seeds: v.len(),
                mean_psnr: v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64,
                mean_ssim: v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64,
            })
            .collect();
        Self { report, summary }
    }

    /// Methods as rows, view counts as columns, mean PSNR / SSIM per cell.
    pub fn to_markdown(&self) -> String {
        let mut views: Vec<usize> = self.summary.iter().map(|c| c.views).collect();
        views.sort_unstable();
        views.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for c in &self.summary {
            if !methods.contains(&c.method.as_str()) {
                methods.push(&c.method);
            }
        }
        let mut s = String::from("| method |");
        for v in &views {
            s.push_str(&format!(" {v} views |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(views.len()));
        s.push('\n');
        for m in methods {
            s.push_str(&format!("| {m} |"));
            for v in &views {
                match self.summary.iter().find(|c| c.method == m && c.views == *v) {
                    Some(c) => s.push_str(&format!(" {:.2} / {:.4} |", c.mean_psnr, c.mean_ssim)),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every (seed, views, method) cell, writing each into
/// `out/<method>/v<views>/s<seed>` and the combined tables into `out`.
pub fn cmd_matrix(cfg: &RunConfig, views: &[usize], methods: &[Method], seeds: &[u64], out: &Path) -> Result<MatrixReport> {
    if views.is_empty() || methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("matrix needs at least one view count, method and seed".into()));
    }
    let mut report = EvalReport::new(1.0);
    for &seed in seeds {
        let cfg = cfg.clone().with_seed(seed);
        for &v in views {
            for &m in methods {
                let cell = out.join(m.as_str()).join(format!("v{v}")).join(format!("s{seed}"));
                let r = cmd_reconstruct(&cfg, m, v, None, &cell)?;
                report.rows.extend(r.rows);
            }
        }
    }
    let matrix = MatrixReport::from_report(report);
    io::write_json(&out.join("report.json"), &matrix)?;
    io::atomic_write(&out.join("table.md"), matrix.to_markdown().as_bytes())?;
    Ok(matrix)
}
