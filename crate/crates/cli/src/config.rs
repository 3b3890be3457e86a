//! Run configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tnt::baselines::{FdkConfig, SartConfig};
use tnt::geometry::{make_circular_trajectory, ScannerGeometry};
use tnt::phantom::{ForeignBodySpec, PhantomSpec};
use tnt::training::{TrainConfig, TrainMode};
use tnt::{Error, Result};

/// JSON schema describing [`RunConfig`] files.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub sad: f64,
    pub sdd: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pixel_pitch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub n_views: usize,
    pub range_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub head: PhantomSpec,
    /// Inserts high-attenuation balls into soft tissue.
    #[serde(default)]
    pub foreign_bodies: Option<ForeignBodySpec>,
    /// Caps every value at this level, removing hard tissue.
    #[serde(default)]
    pub clip_hard: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: DetectorSpec,
    pub phantom: PhantomConfig,
    pub trajectory: TrajectorySpec,
    pub train: TrainConfig,
    pub sart: SartConfig,
    pub fdk: FdkConfig,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub deterministic: bool,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => {
                let head = PhantomSpec::default();
                Self {
                    geometry: DetectorSpec {
                        sad: 2.0,
                        sdd: 4.0,
                        det_rows: 64,
                        det_cols: 64,
                        det_pixel_pitch: 2.0 / 64.0,
                    },
                    trajectory: TrajectorySpec {
                        n_views: 20,
                        range_deg: 180.0,
                    },
                    train: TrainConfig::desk(TrainMode::Tnt, head.size),
                    phantom: PhantomConfig {
                        head,
                        foreign_bodies: None,
                        clip_hard: None,
                    },
                    sart: SartConfig::default(),
                    fdk: FdkConfig::default(),
                    out_dir: None,
                    deterministic: false,
                }
            }
            Scale::Full => {
                let mut c = Self::preset(Scale::Desk);
                c.geometry.det_rows = 512;
                c.geometry.det_cols = 512;
                c.geometry.det_pixel_pitch = 3.2 / 512.0;
                c.phantom.head.size = 256;
                c.train = TrainConfig::full(TrainMode::Tnt);
                c.sart.n_samples = 512;
                c
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.phantom.head.validate()?;
        self.train.validate()?;
        self.sart.validate()?;
        if let Some(cap) = self.phantom.clip_hard {
            if !(cap > 0.0) {
                return Err(Error::InvalidArgument("clip_hard must be positive".into()));
            }
        }
        Ok(())
    }

    /// Scanner for the configured trajectory.
    pub fn geometry(&self) -> Result<ScannerGeometry> {
        self.geometry_with_views(self.trajectory.n_views)
    }

    pub fn geometry_with_views(&self, n_views: usize) -> Result<ScannerGeometry> {
        let d = &self.geometry;
        ScannerGeometry::new(
            d.sad,
            d.sdd,
            d.det_rows,
            d.det_cols,
            d.det_pixel_pitch,
            make_circular_trajectory(n_views, self.trajectory.range_deg)?,
        )
    }

    /// Applies the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.head.seed = seed;
        if let Some(fb) = &mut self.phantom.foreign_bodies {
            fb.seed = seed;
        }
        self.train.seed = seed;
        self
    }
}
