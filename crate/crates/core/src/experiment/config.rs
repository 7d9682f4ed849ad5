//! Declarative experiment configuration, read from a single TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasetkit::{IngestOptions, SplitSpec, Subset, SyntheticConfig};
use crate::metrics::{EvalConfig, DEFAULT_AP_THRESHOLDS};
use crate::model::BackboneConfig;
use crate::schema::{TaskGroup, TaskId};
use crate::training::{Regime, TrainConfig};

use super::ExperimentError;

/// Environment variable naming the root under which runs are created when
/// neither the config nor the command line gives an output directory.
pub const OUTPUT_ROOT_ENV: &str = "CRASHCHAT_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RegimeKind {
    Independent,
    Homogeneous,
    Heterogeneous,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 3] = [RegimeKind::Independent, RegimeKind::Homogeneous, RegimeKind::Heterogeneous];

    /// Concrete runs of this kind, in execution order.
    pub fn runs(self) -> Vec<Regime> {
        match self {
            RegimeKind::Independent => TaskId::ALL.iter().map(|&task| Regime::Independent { task }).collect(),
            RegimeKind::Homogeneous => {
                vec![Regime::Homogeneous { group: TaskGroup::Lc }, Regime::Homogeneous { group: TaskGroup::Pc }]
            }
            RegimeKind::Heterogeneous => vec![Regime::Heterogeneous],
        }
    }
}

impl FromStr for RegimeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independent" | "ind" => Ok(RegimeKind::Independent),
            "homogeneous" | "homo" => Ok(RegimeKind::Homogeneous),
            "heterogeneous" | "hete" => Ok(RegimeKind::Heterogeneous),
            other => Err(format!("unknown regime kind `{other}`")),
        }
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegimeKind::Independent => "independent",
            RegimeKind::Homogeneous => "homogeneous",
            RegimeKind::Heterogeneous => "heterogeneous",
        })
    }
}

/// Synthetic videos unless `manifest` is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub ingest: IngestOptions,
    pub synthetic: SyntheticConfig,
    pub split: SplitSpec,
}

/// Training settings per run. Localization targets need far more epochs
/// than the text and recognition targets on the synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainSection {
    pub independent_lc: TrainConfig,
    pub independent_pc: TrainConfig,
    pub homogeneous_lc: TrainConfig,
    pub homogeneous_pc: TrainConfig,
    pub heterogeneous: TrainConfig,
}

pub const LC_EPOCHS: usize = 12;
pub const PC_EPOCHS: usize = 200;

impl Default for TrainSection {
    fn default() -> Self {
        let lc = TrainConfig { epochs: LC_EPOCHS, ..Default::default() };
        let pc = TrainConfig { epochs: PC_EPOCHS, ..Default::default() };
        Self {
            independent_lc: lc.clone(),
            independent_pc: pc.clone(),
            homogeneous_lc: lc.clone(),
            homogeneous_pc: pc,
            heterogeneous: lc,
        }
    }
}

impl TrainSection {
    pub fn for_regime(&self, regime: Regime) -> &TrainConfig {
        match regime {
            Regime::Independent { task } if task.group() == TaskGroup::Lc => &self.independent_lc,
            Regime::Independent { .. } => &self.independent_pc,
            Regime::Homogeneous { group: TaskGroup::Lc } => &self.homogeneous_lc,
            Regime::Homogeneous { group: TaskGroup::Pc } => &self.homogeneous_pc,
            Regime::Heterogeneous => &self.heterogeneous,
        }
    }

    fn all_mut(&mut self) -> [&mut TrainConfig; 5] {
        [
            &mut self.independent_lc,
            &mut self.independent_pc,
            &mut self.homogeneous_lc,
            &mut self.homogeneous_pc,
            &mut self.heterogeneous,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EvalSection {
    /// Overrides every annotation's pre-crash tolerance when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub ap_thresholds: Vec<f64>,
    pub split: Subset,
    pub tasks: Vec<TaskId>,
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            delta: None,
            ap_thresholds: DEFAULT_AP_THRESHOLDS.to_vec(),
            split: Subset::Test,
            tasks: TaskId::ALL.to_vec(),
            max_new_tokens: 32,
        }
    }
}

impl EvalSection {
    pub fn metrics_config(&self) -> EvalConfig {
        EvalConfig { delta: self.delta, ap_thresholds: self.ap_thresholds.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExperimentConfig {
    pub name: String,
    /// When set, replaces the seed of every section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Run directory. Not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub regimes: Vec<RegimeKind>,
    pub dataset: DatasetSection,
    pub model: BackboneConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: None,
            output_dir: None,
            regimes: RegimeKind::ALL.to_vec(),
            dataset: DatasetSection::default(),
            model: BackboneConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io(path.to_path_buf(), e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        // A relative manifest path is relative to the config file.
        if let (Some(m), Some(dir)) = (&cfg.dataset.manifest, path.parent()) {
            if m.is_relative() {
                let joined = dir.join(m);
                cfg.dataset.manifest = Some(std::path::absolute(&joined).unwrap_or(joined));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Applies one `section.key=value` override, where `value` is a TOML
    /// value (bare words are taken as strings).
    pub fn with_override(&self, assignment: &str) -> Result<Self, ExperimentError> {
        let bad = |m: String| ExperimentError::Config(m);
        let (key, raw) = assignment.split_once('=').ok_or_else(|| bad(format!("override `{assignment}` lacks `=`")))?;
        let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let mut root = toml::Value::Table(toml::Table::try_from(self).map_err(|e| bad(e.to_string()))?);
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| bad(format!("`{key}`: `{part}` is not inside a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        root.try_into().map_err(|e: toml::de::Error| bad(format!("override `{assignment}`: {e}")))
    }

    /// Copy with the global seed pushed into every section and the manifest
    /// path made absolute.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(m) = &c.dataset.manifest {
            c.dataset.manifest = Some(std::path::absolute(m).unwrap_or_else(|_| m.clone()));
        }
        if let Some(seed) = c.seed {
            c.dataset.synthetic.seed = seed;
            c.dataset.ingest.seed = seed;
            c.dataset.split.seed = seed;
            c.model.seed = seed;
            for t in c.train.all_mut() {
                t.seed = seed;
            }
        }
        c.regimes.sort();
        c.regimes.dedup();
        c
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg_err = |e: &dyn fmt::Display| ExperimentError::Config(e.to_string());
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ExperimentError::Config(format!("invalid run name `{}`", self.name)));
        }
        if self.dataset.manifest.is_none() {
            self.dataset.synthetic.validate().map_err(|e| cfg_err(&e))?;
        }
        self.dataset.split.validate().map_err(|e| cfg_err(&e))?;
        self.model.validate().map_err(|e| cfg_err(&e))?;
        let TrainSection { independent_lc, independent_pc, homogeneous_lc, homogeneous_pc, heterogeneous } =
            &self.train;
        for t in [independent_lc, independent_pc, homogeneous_lc, homogeneous_pc, heterogeneous] {
            t.validate().map_err(|e| cfg_err(&e))?;
        }
        self.eval.metrics_config().validate().map_err(|e| cfg_err(&e))?;
        if self.eval.tasks.is_empty() || self.eval.max_new_tokens == 0 {
            return Err(ExperimentError::Config("eval needs at least one task and maxNewTokens > 0".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config as JSON, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes to JSON");
        hex::encode(Sha256::digest(&json))
    }

    /// Output directory, falling back to `$CRASHCHAT_OUT/<name>` and then `runs/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUTPUT_ROOT.into());
        root.join(&self.name)
    }

    /// Every training run the config asks for, in execution order.
    pub fn planned_runs(&self) -> Vec<Regime> {
        let mut kinds = self.regimes.clone();
        kinds.sort();
        kinds.dedup();
        kinds.into_iter().flat_map(RegimeKind::runs).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: ExperimentConfig = toml::from_str(
            "seed = 5\nregimes = [\"heterogeneous\"]\n[dataset.synthetic]\nnumPositive = 4\n[train.heterogeneous]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(c.dataset.synthetic.num_positive, 4);
        assert_eq!(c.dataset.synthetic.num_negative, 200);
        assert_eq!(c.train.heterogeneous.epochs, 3);
        assert_eq!(c.train.homogeneous_pc.epochs, PC_EPOCHS);
        let r = c.resolved();
        assert_eq!((r.model.seed, r.dataset.split.seed, r.train.heterogeneous.seed), (5, 5, 5));
        assert_eq!(c.planned_runs(), vec![Regime::Heterogeneous]);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: Some("/elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: Some(1), ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn per_regime_budgets() {
        let t = TrainSection::default();
        assert_eq!(t.for_regime(Regime::Heterogeneous).epochs, LC_EPOCHS);
        assert_eq!(t.for_regime(Regime::Homogeneous { group: TaskGroup::Pc }).epochs, PC_EPOCHS);
        assert_eq!(t.for_regime(Regime::Independent { task: TaskId::PreCrashLocalization }).epochs, PC_EPOCHS);
        assert_eq!(t.for_regime(Regime::Independent { task: TaskId::Description }).epochs, LC_EPOCHS);
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default()
            .with_override("dataset.synthetic.numPositive=12")
            .unwrap()
            .with_override("regimes=[\"heterogeneous\"]")
            .unwrap()
            .with_override("name = smoke")
            .unwrap();
        assert_eq!(c.dataset.synthetic.num_positive, 12);
        assert_eq!(c.regimes, vec![RegimeKind::Heterogeneous]);
        assert_eq!(c.name, "smoke");
        assert!(ExperimentConfig::default().with_override("model.rank=\"x\"").is_err());
        assert!(ExperimentConfig::default().with_override("noequals").is_err());
    }

    #[test]
    fn default_plan_has_nine_runs() {
        assert_eq!(ExperimentConfig::default().planned_runs().len(), 9);
    }
}
