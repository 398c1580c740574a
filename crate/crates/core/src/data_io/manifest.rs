use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "a photo of a {CLS}";

/// Relation between the source and target label sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Regime {
    /// Closed set: identical label sets.
    Cda,
    /// Partial: the target set is a strict subset of the source set.
    Pda,
    /// Open set: the source set is a strict subset of the target set.
    Osda,
    /// Open-partial: private classes on both sides.
    Opda,
}

impl Regime {
    pub fn from_private_counts(source_private: usize, target_private: usize) -> Self {
        match (source_private > 0, target_private > 0) {
            (false, false) => Regime::Cda,
            (true, false) => Regime::Pda,
            (false, true) => Regime::Osda,
            (true, true) => Regime::Opda,
        }
    }

    pub fn has_target_private(self) -> bool {
        matches!(self, Regime::Osda | Regime::Opda)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Cda => "CDA",
            Regime::Pda => "PDA",
            Regime::Osda => "OSDA",
            Regime::Opda => "OPDA",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CDA" => Ok(Regime::Cda),
            "PDA" => Ok(Regime::Pda),
            "OSDA" => Ok(Regime::Osda),
            "OPDA" => Ok(Regime::Opda),
            other => Err(Error::InvalidRegime(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub common: usize,
    pub source_private: usize,
    pub target_private: usize,
}

/// Class index sets over the universe `[common.., source private.., target private..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub counts: ClassCounts,
    pub regime: Regime,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub common: Vec<usize>,
}

/// Index sets for `regime`. PDA drops target-private classes, OSDA drops
/// source-private classes and CDA drops both; the remaining counts must then
/// actually realize the requested regime.
pub fn split_regime(counts: ClassCounts, regime: Regime) -> Result<ClassSplit> {
    let mut c = counts;
    match regime {
        Regime::Cda => {
            c.source_private = 0;
            c.target_private = 0;
        }
        Regime::Pda => c.target_private = 0,
        Regime::Osda => c.source_private = 0,
        Regime::Opda => {}
    }
    if c.common == 0 {
        return Err(Error::InvalidRegime(format!("{regime} needs at least one common class")));
    }
    let realized = Regime::from_private_counts(c.source_private, c.target_private);
    if realized != regime {
        return Err(Error::InvalidRegime(format!(
            "{regime} impossible with {} source-private and {} target-private classes",
            c.source_private, c.target_private
        )));
    }
    let common: Vec<usize> = (0..c.common).collect();
    let sp = c.common..c.common + c.source_private;
    let tp = sp.end..sp.end + c.target_private;
    Ok(ClassSplit {
        counts: c,
        regime,
        source: common.iter().copied().chain(sp).collect(),
        target: common.iter().copied().chain(tp).collect(),
        common,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderSpec {
    pub dim: usize,
    pub grid: usize,
    pub context_scale: f64,
    pub seed: u64,
}

/// Class bookkeeping for a source/target pair. Source classes are listed in
/// head order: position `i` in `source_classes` is output `i` of the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub class_names: Vec<String>,
    pub source_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    pub common_classes: Vec<usize>,
    pub regime: Regime,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_encoder: Option<ToyEncoderSpec>,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_owned()
}

impl DatasetManifest {
    pub fn from_split(split: &ClassSplit, class_names: Vec<String>) -> Result<Self> {
        let m = Self {
            provenance: None,
            class_names,
            source_classes: split.source.clone(),
            target_classes: split.target.clone(),
            common_classes: split.common.clone(),
            regime: split.regime,
            prompt_template: default_template(),
            toy_encoder: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_names.len();
        for (what, set) in [
            ("source", &self.source_classes),
            ("target", &self.target_classes),
            ("common", &self.common_classes),
        ] {
            if let Some(&bad) = set.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidRegime(format!("{what} class {bad} out of {n} names")));
            }
            if set.iter().collect::<BTreeSet<_>>().len() != set.len() {
                return Err(Error::InvalidRegime(format!("{what} classes repeat")));
            }
        }
        let s: BTreeSet<usize> = self.source_classes.iter().copied().collect();
        let t: BTreeSet<usize> = self.target_classes.iter().copied().collect();
        let c: BTreeSet<usize> = self.common_classes.iter().copied().collect();
        if s.intersection(&t).copied().collect::<BTreeSet<_>>() != c {
            return Err(Error::InvalidRegime("common classes differ from source ∩ target".into()));
        }
        let realized = Regime::from_private_counts(s.len() - c.len(), t.len() - c.len());
        if realized != self.regime || c.is_empty() {
            return Err(Error::InvalidRegime(format!(
                "declared {} but class sets realize {realized} with {} common classes",
                self.regime,
                c.len()
            )));
        }
        if self.prompt_template.matches("{CLS}").count() != 1 {
            return Err(Error::InvalidConfig(format!(
                "prompt template {:?} must contain {{CLS}} exactly once",
                self.prompt_template
            )));
        }
        Ok(())
    }

    pub fn source_class_count(&self) -> usize {
        self.source_classes.len()
    }

    /// Head index of a universe class, if it is a source class.
    pub fn head_index(&self, class: usize) -> Option<usize> {
        self.source_classes.iter().position(|&c| c == class)
    }

    /// Head indices of the common classes.
    pub fn common_head_indices(&self) -> Vec<usize> {
        self.common_classes.iter().filter_map(|&c| self.head_index(c)).collect()
    }

    pub fn source_class_names(&self) -> Vec<String> {
        self.source_classes.iter().map(|&c| self.class_names[c].clone()).collect()
    }

    pub fn prompt(&self, class: usize) -> String {
        self.prompt_template.replace("{CLS}", &self.class_names[class])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
