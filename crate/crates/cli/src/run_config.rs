//! The flat `key=value` run configuration shared by every subcommand.
//!
//! Relative paths are resolved against the directory of the config file.
//! `LD_SEED`, when set, replaces `seed`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use dfas_core::config::FlatConfig;
use dfas_core::dataio::{ClassCounts, GenConfig, Split};
use dfas_core::eval::Fusion;
use dfas_core::trainer::TrainConfig;
use dfas_core::{Error, Result};

pub const SEED_ENV: &str = "LD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorBy {
    Label,
    Attack,
    Device,
}

impl std::str::FromStr for ColorBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(ColorBy::Label),
            "attack" | "attack_type" => Ok(ColorBy::Attack),
            "device" => Ok(ColorBy::Device),
            other => Err(Error::Config(format!("unknown plot_color `{other}` (label|attack|device)"))),
        }
    }
}

impl std::fmt::Display for ColorBy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ColorBy::Label => "label",
            ColorBy::Attack => "attack",
            ColorBy::Device => "device",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Dataset root holding `train/`, `dev/`, `test/` (default `data`).
    pub data_root: PathBuf,
    /// Output directory for checkpoints, logs and reports (default `run`).
    pub run_dir: PathBuf,
    pub gen: GenConfig,
    pub train: TrainConfig,
    /// Score fusion rule, `average` or `max` (default `average`).
    pub fusion: Fusion,
    /// Split scored by `eval` and used for translations (default `test`).
    pub eval_split: Split,
    /// Split whose EER point fixes the threshold (default `dev`).
    pub threshold_split: Split,
    /// Live/spoof pairs rendered by `translate` (default 4).
    pub translate_pairs: usize,
    /// Append content features to the exported liveness features (default false).
    pub include_content: bool,
    pub plot_color: ColorBy,
    /// Checkpoint used by eval/translate (default `<run_dir>/final.safetensors`).
    pub checkpoint: Option<PathBuf>,
    /// Resume training from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Target dataset root for `cross-eval`.
    pub cross_root: Option<PathBuf>,
    pub cross_split: Split,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<&str>) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
        Self::parse(&text, &base, seed_override)
    }

    pub fn parse(text: &str, base: &Path, seed_override: Option<&str>) -> Result<Self> {
        let mut c = FlatConfig::parse(text)?;
        if let Some(seed) = seed_override {
            c.set("seed", seed.trim());
        }
        let path_or = |c: &mut FlatConfig, key: &str, default: &str| resolve(base, &c.take_str(key).unwrap_or_else(|| default.into()));
        let opt_path = |c: &mut FlatConfig, key: &str| c.take_str(key).filter(|v| !v.is_empty()).map(|v| resolve(base, &v));

        let data_root = path_or(&mut c, "data_root", "data");
        let run_dir = path_or(&mut c, "run_dir", "run");
        let train = TrainConfig::take_from(&mut c)?;
        let counts = |c: &mut FlatConfig, split: &str, live: usize, spoof: usize| -> Result<ClassCounts> {
            Ok(ClassCounts {
                live: c.take_or(&format!("{split}_live"), live)?,
                spoof: c.take_or(&format!("{split}_spoof"), spoof)?,
            })
        };
        let gen = GenConfig {
            root: data_root.clone(),
            resolution: train.net.resolution,
            train: counts(&mut c, "train", 200, 200)?,
            dev: counts(&mut c, "dev", 50, 50)?,
            test: counts(&mut c, "test", 100, 100)?,
            devices: c.take_or("devices", 3)?,
            seed: train.seed,
        };
        gen.validate()?;
        let cfg = Self {
            data_root,
            run_dir,
            gen,
            train,
            fusion: c.take_or("fusion", Fusion::Average)?,
            eval_split: c.take_or("eval_split", Split::Test)?,
            threshold_split: c.take_or("threshold_split", Split::Dev)?,
            translate_pairs: c.take_or("translate_pairs", 4)?,
            include_content: c.take_or("include_content", false)?,
            plot_color: c.take_or("plot_color", ColorBy::Label)?,
            checkpoint: opt_path(&mut c, "checkpoint"),
            resume: opt_path(&mut c, "resume"),
            cross_root: opt_path(&mut c, "cross_root"),
            cross_split: c.take_or("cross_split", Split::Test)?,
        };
        c.finish()?;
        Ok(cfg)
    }

    /// Every key with its resolved value; parses back to the same config.
    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::default();
        c.set("data_root", self.data_root.display());
        c.set("run_dir", self.run_dir.display());
        self.train.write_into(&mut c);
        for (split, n) in [("train", self.gen.train), ("dev", self.gen.dev), ("test", self.gen.test)] {
            c.set(&format!("{split}_live"), n.live);
            c.set(&format!("{split}_spoof"), n.spoof);
        }
        c.set("devices", self.gen.devices);
        c.set("fusion", self.fusion);
        c.set("eval_split", self.eval_split);
        c.set("threshold_split", self.threshold_split);
        c.set("translate_pairs", self.translate_pairs);
        c.set("include_content", self.include_content);
        c.set("plot_color", self.plot_color);
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        c.set("checkpoint", opt(&self.checkpoint));
        c.set("resume", opt(&self.resume));
        c.set("cross_root", opt(&self.cross_root));
        c.set("cross_split", self.cross_split);
        c
    }

    pub fn header(&self) -> String {
        let body = self.to_flat().to_text();
        format!("# resolved config\n{body}# end resolved config\n")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.run_dir.join(dfas_core::trainer::FINAL_CHECKPOINT))
    }

    pub fn depth_checkpoint_path(&self) -> PathBuf {
        self.run_dir.join("depth_pretrained.safetensors")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.run_dir.join("eval")
    }

    pub fn features_path(&self, split: Split) -> PathBuf {
        self.eval_dir().join(format!("features_{split}.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_reparses_to_the_same_config() {
        let base = Path::new("/tmp/cfgbase");
        let cfg = RunConfig::parse("resolution=32\nsteps=7\nrun_dir=out\nfusion=max\ncheckpoint=x.safetensors\n", base, None).unwrap();
        assert_eq!(cfg.run_dir, base.join("out"));
        assert_eq!(cfg.checkpoint.as_deref(), Some(base.join("x.safetensors").as_path()));
        let again = RunConfig::parse(&cfg.header(), Path::new("/elsewhere"), None).unwrap();
        assert_eq!(again.header(), cfg.header());
    }

    #[test]
    fn seed_override_and_unknown_keys() {
        let cfg = RunConfig::parse("seed=3\n", Path::new("/"), Some("11")).unwrap();
        assert_eq!((cfg.train.seed, cfg.gen.seed), (11, 11));
        assert!(matches!(RunConfig::parse("bogus=1\n", Path::new("/"), None), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("resolution=63\n", Path::new("/"), None), Err(Error::Config(_))));
    }
}
