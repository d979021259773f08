//! Experiment configuration: one JSON file, overridden by command-line flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tps_partition::fit::{CaeTrainConfig, FitConfig, RegressorTrainConfig};
use tps_partition::phantom::{JitterRanges, PhantomParams};
use tps_partition::util::derive_seed;
use tps_partition::voxel::Axis;

/// `nx × nz` control-point layout, written `NXxNZ` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub nx: usize,
    pub nz: usize,
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected NXxNZ, got {s:?}"))?;
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
        let (nx, nz) = (parse(a)?, parse(b)?);
        if nx < 2 || nz < 2 {
            return Err(format!("grid sides must be >= 2, got {nx}x{nz}"));
        }
        Ok(Self { nx, nz })
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.nx, self.nz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaeSettings {
    /// Input side of the autoencoder; `None` means half the volume side.
    pub side: Option<usize>,
    pub latent: usize,
    pub train: CaeTrainConfig,
}

impl Default for CaeSettings {
    fn default() -> Self {
        Self {
            side: None,
            latent: 64,
            train: CaeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomParams,
    pub jitter: JitterRanges,
    /// Layout used by `fit`, `train` and `eval`, and by `sweep` when set
    /// explicitly with `--grid`.
    pub grid: Layout,
    pub fit: FitConfig,
    pub cae: CaeSettings,
    pub regressor: RegressorTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomParams::default(),
            jitter: JitterRanges::default(),
            grid: Layout { nx: 10, nz: 10 },
            fit: FitConfig::default(),
            cae: CaeSettings::default(),
            regressor: RegressorTrainConfig::default(),
        }
    }
}

/// Flags shared by the fitting commands; each overrides the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct FitFlags {
    /// Control-point layout, e.g. 10x10.
    #[arg(long)]
    pub grid: Option<Layout>,
    /// Soft-mask temperature, mm.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Optimizer iterations (fit, sweep) or epochs (train).
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Height axis of the surface.
    #[arg(long, value_parser = parse_axis)]
    pub axis: Option<Axis>,
    /// Put the body on the positive side of the surface.
    #[arg(long)]
    pub flip: bool,
}

pub fn parse_axis(s: &str) -> Result<Axis, String> {
    match s {
        "x" | "X" => Ok(Axis::X),
        "y" | "Y" => Ok(Axis::Y),
        "z" | "Z" => Ok(Axis::Z),
        _ => Err(format!("axis must be x, y or z, got {s:?}")),
    }
}

impl ExperimentConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(
        path: Option<&Path>,
        seed: Option<u64>,
        flags: &FitFlags,
    ) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(g) = flags.grid {
            cfg.grid = g;
        }
        if let Some(t) = flags.tau {
            cfg.fit.tau_mm = t;
        }
        if let Some(n) = flags.iters {
            cfg.fit.iterations = n;
            cfg.regressor.epochs = n;
        }
        if let Some(t) = flags.threshold {
            cfg.fit.threshold = t;
        }
        if let Some(a) = flags.axis {
            cfg.fit.height_axis = a;
        }
        if flags.flip {
            cfg.fit.flip = true;
        }
        // every stage seed follows the master seed
        cfg.fit.seed = cfg.seed;
        cfg.cae.train.seed = cfg.seed;
        cfg.regressor.seed = cfg.seed;
        cfg.regressor.fit = cfg.fit.clone();
        cfg.fit.validate()?;
        if cfg.cae.latent == 0 {
            bail!("latent size must be >= 1");
        }
        Ok(cfg)
    }

    /// Initialization seed of a new shape model.
    pub fn cae_init_seed(&self) -> u64 {
        derive_seed(self.seed, "cae/init")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_parsing() {
        assert_eq!("8x12".parse::<Layout>().unwrap(), Layout { nx: 8, nz: 12 });
        assert_eq!("10X10".parse::<Layout>().unwrap().to_string(), "10x10");
        assert!("1x5".parse::<Layout>().is_err());
        assert!("64".parse::<Layout>().is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"seed": 4, "fit": {"tau_mm": 2.0, "iterations": 7}}"#,
        )
        .unwrap();
        let flags = FitFlags {
            tau: Some(0.5),
            ..FitFlags::default()
        };
        let cfg = ExperimentConfig::resolve(Some(&path), None, &flags).unwrap();
        assert_eq!(cfg.fit.tau_mm, 0.5);
        assert_eq!(cfg.fit.iterations, 7);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.regressor.seed, 4);
        let cfg = ExperimentConfig::resolve(Some(&path), Some(9), &flags).unwrap();
        assert_eq!(cfg.fit.seed, 9);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::resolve(None, Some(3), &FitFlags::default()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ExperimentConfig>(&text).unwrap(),
            cfg
        );
    }
}
