//! Flat `key=value` run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use coca_core::adapt::AdaptConfig;
use coca_core::classifier::{SourceModelKind, TrainSchedule};
use coca_core::clustering::KMethod;
use coca_core::data_io::SyntheticConfig;
use coca_core::metrics::DEFAULT_HIST_BINS;

use crate::error::CliError;

pub const SEED_ENV: &str = "COCA_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SyntheticConfig,
    pub model: SourceModelKind,
    pub schedule: TrainSchedule,
    pub source_batch_size: Option<usize>,
    pub adapt: AdaptConfig,
    pub zero_shot: bool,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SyntheticConfig::default(),
            model: SourceModelKind::CrossModal,
            schedule: TrainSchedule::default(),
            source_batch_size: None,
            adapt: AdaptConfig::default(),
            zero_shot: false,
            hist_bins: DEFAULT_HIST_BINS,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// `none`/`full` or a count.
fn optional(key: &str, value: &str, word: &str) -> Result<Option<usize>, CliError> {
    if value.eq_ignore_ascii_case(word) {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn show_optional(v: Option<usize>, word: &str) -> String {
    v.map_or_else(|| word.to_owned(), |x| x.to_string())
}

pub const KEYS: &[&str] = &[
    "seed",
    "dim",
    "common",
    "source_private",
    "target_private",
    "shots_per_class",
    "val_shots_per_class",
    "samples_per_class",
    "rotation_deg",
    "mean_jitter",
    "noise",
    "cluster_spread",
    "grid",
    "context_scale",
    "model",
    "warmup_iters",
    "warmup_floor",
    "total_iters",
    "base_lr",
    "weight_decay",
    "eval_every",
    "patience",
    "source_batch_size",
    "k_method",
    "forced_k",
    "tau",
    "mask_ratio",
    "ema_decay",
    "max_epochs",
    "adapt_lr",
    "adapt_weight_decay",
    "adapt_batch_size",
    "mieci",
    "zero_shot",
    "hist_bins",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let s = &mut self.synth;
        let t = &mut self.schedule;
        let a = &mut self.adapt;
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "dim" => s.dim = num(key, v)?,
            "common" => s.common_count = num(key, v)?,
            "source_private" => s.source_private_count = num(key, v)?,
            "target_private" => s.target_private_count = num(key, v)?,
            "shots_per_class" => s.shots_per_class = num(key, v)?,
            "val_shots_per_class" => s.val_shots_per_class = num(key, v)?,
            "samples_per_class" => s.samples_per_class = num(key, v)?,
            "rotation_deg" => s.shift.rotation_deg = num(key, v)?,
            "mean_jitter" => s.shift.mean_jitter = num(key, v)?,
            "noise" => s.shift.noise = num(key, v)?,
            "cluster_spread" => s.cluster_spread = num(key, v)?,
            "grid" => s.grid = num(key, v)?,
            "context_scale" => s.context_scale = num(key, v)?,
            "model" => self.model = v.parse().map_err(CliError::from)?,
            "warmup_iters" => t.warmup_iters = num(key, v)?,
            "warmup_floor" => t.warmup_floor = num(key, v)?,
            "total_iters" => t.total_iters = num(key, v)?,
            "base_lr" => t.base_lr = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "eval_every" => t.eval_every = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "source_batch_size" => self.source_batch_size = optional(key, v, "auto")?,
            "k_method" => a.k_method = v.parse::<KMethod>().map_err(CliError::from)?,
            "forced_k" => a.forced_k = optional(key, v, "none")?,
            "tau" => a.tau = num(key, v)?,
            "mask_ratio" => a.mask_ratio = num(key, v)?,
            "ema_decay" => a.ema_decay = num(key, v)?,
            "max_epochs" => a.max_epochs = num(key, v)?,
            "adapt_lr" => a.lr = num(key, v)?,
            "adapt_weight_decay" => a.weight_decay = num(key, v)?,
            "adapt_batch_size" => a.batch_size = optional(key, v, "full")?,
            "mieci" => a.losses.mask = flag(key, v)?,
            "zero_shot" => self.zero_shot = flag(key, v)?,
            "hist_bins" => self.hist_bins = num(key, v)?,
            other => {
                return Err(CliError::config(format!(
                    "unknown config key {other:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// `key=value` assignment as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::config(format!("{origin}:{}: {}", i + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let t = &self.schedule;
        let a = &self.adapt;
        let values = [
            self.seed.to_string(),
            s.dim.to_string(),
            s.common_count.to_string(),
            s.source_private_count.to_string(),
            s.target_private_count.to_string(),
            s.shots_per_class.to_string(),
            s.val_shots_per_class.to_string(),
            s.samples_per_class.to_string(),
            s.shift.rotation_deg.to_string(),
            s.shift.mean_jitter.to_string(),
            s.shift.noise.to_string(),
            s.cluster_spread.to_string(),
            s.grid.to_string(),
            s.context_scale.to_string(),
            self.model.to_string(),
            t.warmup_iters.to_string(),
            t.warmup_floor.to_string(),
            t.total_iters.to_string(),
            t.base_lr.to_string(),
            t.weight_decay.to_string(),
            t.eval_every.to_string(),
            t.patience.to_string(),
            show_optional(self.source_batch_size, "auto"),
            a.k_method.to_string(),
            show_optional(a.forced_k, "none"),
            a.tau.to_string(),
            a.mask_ratio.to_string(),
            a.ema_decay.to_string(),
            a.max_epochs.to_string(),
            a.lr.to_string(),
            a.weight_decay.to_string(),
            show_optional(a.batch_size, "full"),
            a.losses.mask.to_string(),
            self.zero_shot.to_string(),
            self.hist_bins.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 12 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..12].to_owned()
    }

    /// Pushes the seed into the component configs and validates all of them.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.synth.seed = self.seed;
        self.adapt.seed = self.seed;
        self.synth.validate()?;
        self.schedule.validate()?;
        self.adapt.validate()?;
        if matches!(self.source_batch_size, Some(b) if b < 2) {
            return Err(CliError::config("source_batch_size must be at least 2"));
        }
        if self.hist_bins < 2 {
            return Err(CliError::config("hist_bins must be at least 2"));
        }
        Ok(())
    }

    pub fn provenance(&self, command: &str) -> String {
        format!(
            "coca {} {command} seed={} config={}",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.hash()
        )
    }
}

/// `--sweep key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

impl Sweep {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("sweep {spec:?}: expected key=v1,v2,...")))?;
        let key = key.trim().to_owned();
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::config(format!("sweep over unknown key {key:?}")));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_owned()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::config(format!("sweep {key}: no values")));
        }
        Ok(Self { key, values })
    }
}

/// One resolved run of a possibly swept command.
#[derive(Debug, Clone)]
pub struct Point {
    pub config: RunConfig,
    /// `key-value` pairs joined with `_`; empty without a sweep.
    pub suffix: String,
    pub label: String,
}

/// Cartesian product of all sweeps over `base`, each point validated.
pub fn expand(base: &RunConfig, sweeps: &[Sweep]) -> Result<Vec<Point>, CliError> {
    let mut points = vec![(base.clone(), Vec::<(String, String)>::new())];
    for sw in sweeps {
        let mut next = Vec::with_capacity(points.len() * sw.values.len());
        for (cfg, assigned) in &points {
            for v in &sw.values {
                let mut c = cfg.clone();
                c.set(&sw.key, v)?;
                let mut a = assigned.clone();
                a.push((sw.key.clone(), v.clone()));
                next.push((c, a));
            }
        }
        points = next;
    }
    points
        .into_iter()
        .map(|(mut config, assigned)| {
            config.finalize()?;
            Ok(Point {
                config,
                suffix: assigned.iter().map(|(k, v)| format!("{k}-{v}")).collect::<Vec<_>>().join("_"),
                label: assigned.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let base = RunConfig::default();
        let mut copy = RunConfig::default();
        copy.apply_text(&base.to_text(), "dump").unwrap();
        assert_eq!(copy, base);
        assert_eq!(base.entries().len(), KEYS.len());
    }

    #[test]
    fn file_syntax() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\ntau = 0.4  # trailing\nadapt_batch_size=full\nforced_k=7\n", "f")
            .unwrap();
        assert_eq!(c.adapt.tau, 0.4);
        assert_eq!(c.adapt.batch_size, None);
        assert_eq!(c.adapt.forced_k, Some(7));
        let err = c.apply_text("tau=0.4\nbogus=1\n", "f").unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("f:2"));
        assert!(c.apply_text("novalue\n", "f").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("noise", "0.1").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn sweep_expansion() {
        let sweeps = [Sweep::parse("tau=0.4,0.6").unwrap(), Sweep::parse("mask_ratio=0.1,0.2,0.3").unwrap()];
        let pts = expand(&RunConfig::default(), &sweeps).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].suffix, "tau-0.4_mask_ratio-0.2");
        assert_eq!(pts[5].config.adapt.tau, 0.6);
        assert!(Sweep::parse("nope=1").is_err());
        assert!(expand(&RunConfig::default(), &[Sweep::parse("tau=2").unwrap()]).is_err());
    }
}
