use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use fovcast_core::eval::{WindowConfig, DEFAULT_ALPHAS};
use fovcast_core::heatmap::HeatmapConfig;
use fovcast_core::neural::persist::atomic_write;
use fovcast_core::neural::{
    Fusion, HeatmapModelConfig, TrainConfig, TrajectoryConfig, TrajectoryVariant,
};
use fovcast_core::Error;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    Trajectory,
    Heatmap,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub sessions: Option<PathBuf>,
    /// Directory of `<video_id>.bin` saliency grids, frame after frame.
    pub saliency: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

/// Everything a command needs. Loaded from TOML or JSON, then patched by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub family: Family,
    pub window: WindowConfig,
    pub alphas: Vec<f64>,
    pub trajectory: TrajectoryConfig,
    pub heatmap_model: HeatmapModelConfig,
    pub heatmap: HeatmapConfig,
    pub train: TrainConfig,
    /// Videos held out for evaluation; training uses the others.
    pub test_videos: Vec<String>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: Family::Trajectory,
            window: WindowConfig::default(),
            alphas: DEFAULT_ALPHAS.to_vec(),
            trajectory: TrajectoryConfig::default(),
            heatmap_model: HeatmapModelConfig::default(),
            heatmap: HeatmapConfig::default(),
            train: TrainConfig::default(),
            test_videos: Vec::new(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
            _ => toml::from_str(&text).map_err(|e| e.to_string()),
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    /// Copies the window lengths into both model configs.
    pub fn sync(&mut self) {
        self.trajectory.past_seconds = self.window.past_seconds;
        self.trajectory.horizons = self.window.horizons;
        self.heatmap_model.past_seconds = self.window.past_seconds;
        self.heatmap_model.horizons = self.window.horizons;
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.heatmap.validate()?;
        self.train.validate()?;
        self.trajectory.validate()?;
        self.heatmap_model.validate()?;
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(
                Error::Config("alphas must be a nonempty list of positive values".into()).into(),
            );
        }
        Ok(())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        atomic_write(&dir.join(RUN_CONFIG_FILE), text.as_bytes())?;
        Ok(())
    }
}

fn variant(s: &str) -> Result<TrajectoryVariant, String> {
    TrajectoryVariant::from_name(s).ok_or_else(|| {
        let names: Vec<_> = TrajectoryVariant::ALL.iter().map(|v| v.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn fusion(s: &str) -> Result<Fusion, String> {
    Fusion::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Fusion::ALL.iter().map(|v| v.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Flags shared by every run command. A flag, when given, wins over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub family: Option<Family>,
    #[arg(long, global = true, value_parser = variant)]
    pub variant: Option<TrajectoryVariant>,
    #[arg(long, global = true, value_parser = fusion)]
    pub fusion: Option<Fusion>,
    #[arg(long, global = true)]
    pub past_seconds: Option<usize>,
    #[arg(long, global = true)]
    pub horizons: Option<usize>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Keep a trailing second with fewer frames than the frame rate.
    #[arg(long, global = true)]
    pub keep_partial: bool,
    #[arg(long, global = true, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub n_others: Option<usize>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub test_videos: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub saliency: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.family {
            cfg.family = v;
        }
        if let Some(v) = self.variant {
            cfg.trajectory.variant = v;
        }
        if let Some(v) = self.fusion {
            cfg.heatmap_model.fusion = v;
        }
        if let Some(v) = self.past_seconds {
            cfg.window.past_seconds = v;
        }
        if let Some(v) = self.horizons {
            cfg.window.horizons = v;
        }
        if let Some(v) = self.stride {
            cfg.window.stride = v;
        }
        if self.keep_partial {
            cfg.window.keep_partial = true;
        }
        if let Some(v) = &self.alphas {
            cfg.alphas = v.clone();
        }
        if let Some(v) = self.n_others {
            cfg.trajectory.n_others = v;
        }
        if let Some(v) = self.hidden {
            cfg.trajectory.hidden = v;
        }
        if let Some(v) = &self.channels {
            cfg.heatmap_model.channels = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
            cfg.trajectory.seed = v;
            cfg.heatmap_model.seed = v;
        }
        if let Some(v) = &self.test_videos {
            cfg.test_videos = v.clone();
        }
        if let Some(v) = &self.saliency {
            cfg.paths.saliency = Some(v.clone());
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "alphas = [1.0]\n[window]\nhorizons = 4\n[train]\nepochs = 7\n",
        )
        .unwrap();
        let o = Overrides {
            config: Some(path),
            epochs: Some(2),
            ..Overrides::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.window.horizons, 4);
        assert_eq!(cfg.trajectory.horizons, 4);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.alphas, vec![1.0]);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            family: Family::Heatmap,
            test_videos: vec!["v1".into()],
            ..RunConfig::default()
        };
        cfg.write_to(dir.path()).unwrap();
        assert_eq!(
            RunConfig::from_file(&dir.path().join(RUN_CONFIG_FILE)).unwrap(),
            cfg
        );
    }

    #[test]
    fn rejects_bad_values() {
        let o = Overrides {
            alphas: Some(vec![]),
            ..Overrides::default()
        };
        assert!(o.resolve().is_err());
        let o = Overrides {
            horizons: Some(0),
            ..Overrides::default()
        };
        assert!(o.resolve().is_err());
    }
}
