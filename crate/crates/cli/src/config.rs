// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative run configuration (TOML) with command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lenslab::corpus::{ClauseFinalMode, Measure};
use lenslab::lens::train::{KlDirection, TrainHyper};
use lenslab::ngram::Smoothing;

use crate::ConfigError;

pub const DEFAULT_CONFIG_FILE: &str = "lenslab.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LensSelection {
    #[default]
    Logit,
    Tuned,
    Both,
}

impl LensSelection {
    pub fn kinds(self) -> Vec<lenslab::LensKind> {
        use lenslab::LensKind::*;
        match self {
            LensSelection::Logit => vec![Logit],
            LensSelection::Tuned => vec![Tuned],
            LensSelection::Both => vec![Logit, Tuned],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClauseFinal {
    #[default]
    Off,
    Column,
    #[serde(alias = "punctuation")]
    Punct,
}

impl ClauseFinal {
    pub fn mode(self) -> Option<ClauseFinalMode> {
        match self {
            ClauseFinal::Off => None,
            ClauseFinal::Column => Some(ClauseFinalMode::Column),
            ClauseFinal::Punct => Some(ClauseFinalMode::Punctuation),
        }
    }
}

/// Where a model's tuned-lens translators come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TranslatorSource {
    /// Produced by `fit-lens` under the output directory.
    #[default]
    Trained,
    /// Read from `translator_path`.
    Imported,
    /// Identity maps: the tuned lens reduces to the logit lens.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub bundle: PathBuf,
    /// Grouping for win rates, e.g. `gpt2`.
    pub family: String,
    /// Defaults to the bundle's parameter count.
    #[serde(default)]
    pub param_count: Option<u64>,
    #[serde(default)]
    pub translators: TranslatorSource,
    #[serde(default)]
    pub translator_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub path: PathBuf,
    /// Stimulus set shared by datasets over the same texts.
    #[serde(default)]
    pub stimuli: Option<String>,
    /// Expected measure; rows with other measures are an error.
    #[serde(default)]
    pub measure: Option<Measure>,
    #[serde(default)]
    pub citation: Option<String>,
}

impl DatasetEntry {
    pub fn stimuli_id(&self) -> &str {
        self.stimuli.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LensTraining {
    /// One sentence or document per line.
    pub corpus: Option<PathBuf>,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub val_fraction: f64,
    pub cosine: bool,
    pub direction: KlDirection,
    pub eval_every: usize,
}

impl Default for LensTraining {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            corpus: None,
            lr: h.lr,
            steps: h.steps,
            batch: h.batch,
            val_fraction: h.val_fraction,
            cosine: h.cosine,
            direction: h.direction,
            eval_every: h.eval_every,
        }
    }
}

impl LensTraining {
    pub fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            val_fraction: self.val_fraction,
            cosine: self.cosine,
            direction: self.direction,
            seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramConfig {
    pub corpus: Option<PathBuf>,
    pub smoothing: Smoothing,
}

impl Default for NgramConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            smoothing: Smoothing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Keep words lacking two words of left context (lags zero-filled).
    pub include_incomplete: bool,
    /// Comparator for contextualization; defaults to the largest model.
    pub reference_model: Option<String>,
    pub interaction: bool,
    pub error_regression: bool,
    pub contextualization: bool,
    /// Sliding-window length; defaults to the model context size.
    pub window: Option<usize>,
    pub stride: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            include_incomplete: false,
            reference_model: None,
            interaction: true,
            error_regression: true,
            contextualization: true,
            window: None,
            stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub lens: LensSelection,
    #[serde(default)]
    pub clause_final: ClauseFinal,
    /// `word per_million` table; without one, frequencies are counted
    /// from the datasets' own words.
    #[serde(default)]
    pub frequency: Option<PathBuf>,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub lens_training: LensTraining,
    #[serde(default)]
    pub ngram: NgramConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub lens: Option<LensSelection>,
    pub clause_final: Option<ClauseFinal>,
}

impl RunConfig {
    /// Parse TOML, resolve relative paths against `base`, apply overrides
    /// and validate.
    pub fn from_toml(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError(format!("invalid configuration: {e}")))?;
        cfg.resolve(base);
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(l) = overrides.lens {
            cfg.lens = l;
        }
        if let Some(c) = overrides.clause_final {
            cfg.clause_final = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(f) = &mut self.frequency {
            fix(f);
        }
        for m in &mut self.models {
            fix(&mut m.bundle);
            if let Some(t) = &mut m.translator_path {
                fix(t);
            }
        }
        for d in &mut self.datasets {
            fix(&mut d.path);
        }
        if let Some(c) = &mut self.lens_training.corpus {
            fix(c);
        }
        if let Some(c) = &mut self.ngram.corpus {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.models.is_empty() {
            return err("configuration lists no models".into());
        }
        let mut ids = BTreeMap::new();
        for m in &self.models {
            if ids.insert(m.id.as_str(), ()).is_some() {
                return err(format!("duplicate model id {:?}", m.id));
            }
            if !m.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return err(format!("model id {:?} may only use [A-Za-z0-9._-]", m.id));
            }
            if !m.bundle.is_dir() {
                return err(format!("model {:?}: bundle {} does not exist", m.id, m.bundle.display()));
            }
            match (m.translators, &m.translator_path) {
                (TranslatorSource::Imported, None) => {
                    return err(format!("model {:?}: imported translators need translator_path", m.id))
                }
                (TranslatorSource::Imported, Some(p)) if !p.is_dir() => {
                    return err(format!("model {:?}: translator_path {} does not exist", m.id, p.display()))
                }
                _ => {}
            }
        }
        let mut ds = BTreeMap::new();
        for d in &self.datasets {
            if ds.insert(d.id.as_str(), ()).is_some() {
                return err(format!("duplicate dataset id {:?}", d.id));
            }
            if !d.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return err(format!("dataset id {:?} may only use [A-Za-z0-9._-]", d.id));
            }
            if !d.path.is_file() {
                return err(format!("dataset {:?}: {} does not exist", d.id, d.path.display()));
            }
        }
        for (what, p) in [
            ("frequency table", &self.frequency),
            ("lens training corpus", &self.lens_training.corpus),
            ("n-gram corpus", &self.ngram.corpus),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return err(format!("{what} {} does not exist", p.display()));
                }
            }
        }
        if let Some(r) = &self.analysis.reference_model {
            if !ids.contains_key(r.as_str()) {
                return err(format!("reference_model {r:?} is not a configured model"));
            }
        }
        Ok(())
    }

    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("m")).unwrap();
        let text = r#"
            seed = 3
            lens = "logit"
            [[models]]
            id = "toy"
            bundle = "m"
            family = "toy"
        "#;
        let o = Overrides {
            seed: Some(9),
            lens: Some(LensSelection::Both),
            ..Default::default()
        };
        let c = RunConfig::from_toml(text, dir.path(), &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.lens, LensSelection::Both);
        assert_eq!(c.out_dir, dir.path().join("out"));
        assert_eq!(c.models[0].bundle, dir.path().join("m"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides::default();
        assert!(RunConfig::from_toml("models = []", dir.path(), &o).is_err());
        let missing = "[[models]]\nid='a'\nbundle='nope'\nfamily='f'\n";
        let e = RunConfig::from_toml(missing, dir.path(), &o).unwrap_err();
        assert!(e.0.contains("does not exist"));
        assert!(RunConfig::from_toml("bogus = 1\nmodels=[]", dir.path(), &o).is_err());
    }
}
