//! Run configuration.
//!
//! One TOML file per experiment. Top-level keys pick the scenario, seeds and
//! output directory; each section mirrors a library module. `[data]` is
//! parsed against the chosen scenario, so keys belonging to another scenario
//! are rejected like any other unknown key.
//!
//! ```toml
//! scenario = "longtail"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [data]
//! imbalance_ratio = 100.0
//!
//! [loss]
//! alpha = 0.5
//!
//! [trainer]
//! total_iters = 2000
//! ```

use std::path::{Path, PathBuf};

use iada::class_stats::CovarianceMode;
use iada::data::{ClassGeometry, NoiseKind, SubpopConfig};
use iada::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Longtail,
    Noise,
    Subpop,
    CustomCsv,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Longtail => "longtail",
            ScenarioKind::Noise => "noise",
            ScenarioKind::Subpop => "subpop",
            ScenarioKind::CustomCsv => "custom-csv",
        }
    }
}

/// Gaussian-blob classes with geometric class sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongtailData {
    pub num_classes: usize,
    pub n_max: usize,
    pub imbalance_ratio: f64,
    pub dim: usize,
    pub geometry: ClassGeometry,
    pub test_per_class: usize,
    /// Balanced pool the metadata is drawn from (disjoint from training).
    pub meta_pool_per_class: usize,
    pub meta_per_class: usize,
}

impl Default for LongtailData {
    fn default() -> Self {
        Self {
            num_classes: 5,
            n_max: 500,
            imbalance_ratio: 100.0,
            dim: 4,
            geometry: ClassGeometry::default(),
            test_per_class: 300,
            meta_pool_per_class: 40,
            meta_per_class: 10,
        }
    }
}

/// Balanced blobs with injected label noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseData {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub geometry: ClassGeometry,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub test_per_class: usize,
    pub meta_pool_per_class: usize,
    pub meta_per_class: usize,
}

impl Default for NoiseData {
    fn default() -> Self {
        Self {
            num_classes: 5,
            per_class: 300,
            dim: 4,
            geometry: ClassGeometry::default(),
            noise_kind: NoiseKind::Flip,
            noise_rate: 0.4,
            test_per_class: 300,
            meta_pool_per_class: 40,
            meta_per_class: 10,
        }
    }
}

/// Spurious-correlation task. Group order is `(y0,a0), (y1,a1), (y0,a1), (y1,a0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubpopData {
    pub n_train: usize,
    pub n_test: usize,
    pub core_dims: usize,
    pub spurious_dims: usize,
    pub noise_std: f64,
    pub core_sep: f64,
    pub spurious_sep: f64,
    pub group_balance_train: [f64; 4],
    pub group_balance_test: [f64; 4],
    /// Group-balanced pool the metadata is drawn from.
    pub meta_pool: usize,
    pub meta_per_class: usize,
}

impl Default for SubpopData {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 2000,
            core_dims: 2,
            spurious_dims: 2,
            noise_std: 1.0,
            core_sep: 1.5,
            spurious_sep: 4.0,
            group_balance_train: [0.73, 0.22, 0.04, 0.012],
            group_balance_test: [0.25; 4],
            meta_pool: 400,
            meta_per_class: 100,
        }
    }
}

impl SubpopData {
    pub fn generator(&self) -> SubpopConfig {
        SubpopConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            core_dims: self.core_dims,
            spurious_dims: self.spurious_dims,
            noise_std: self.noise_std,
            core_sep: self.core_sep,
            spurious_sep: self.spurious_sep,
            group_balance_train: self.group_balance_train,
            group_balance_test: self.group_balance_test,
        }
    }
}

/// CSV files in the `f0..,label[,group]` layout. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Clean balanced metadata; split off `train` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default = "default_meta_per_class")]
    pub meta_per_class: usize,
}

fn default_meta_per_class() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Longtail(LongtailData),
    Noise(NoiseData),
    Subpop(SubpopData),
    CustomCsv(CsvData),
}

impl DataConfig {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            DataConfig::Longtail(_) => ScenarioKind::Longtail,
            DataConfig::Noise(_) => ScenarioKind::Noise,
            DataConfig::Subpop(_) => ScenarioKind::Subpop,
            DataConfig::CustomCsv(_) => ScenarioKind::CustomCsv,
        }
    }

    fn parse(kind: ScenarioKind, table: Option<toml::Table>) -> Result<Self, CliError> {
        let table = table.unwrap_or_default();
        let value = toml::Value::Table(table);
        let bad = |e: toml::de::Error| CliError::Config(format!("[data] for scenario {}: {e}", kind.name()));
        Ok(match kind {
            ScenarioKind::Longtail => DataConfig::Longtail(value.try_into().map_err(bad)?),
            ScenarioKind::Noise => DataConfig::Noise(value.try_into().map_err(bad)?),
            ScenarioKind::Subpop => DataConfig::Subpop(value.try_into().map_err(bad)?),
            ScenarioKind::CustomCsv => DataConfig::CustomCsv(value.try_into().map_err(bad)?),
        })
    }

    fn to_table(&self) -> toml::Table {
        let t = match self {
            DataConfig::Longtail(d) => toml::Table::try_from(d),
            DataConfig::Noise(d) => toml::Table::try_from(d),
            DataConfig::Subpop(d) => toml::Table::try_from(d),
            DataConfig::CustomCsv(d) => toml::Table::try_from(d),
        };
        t.expect("data sections serialize to tables")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { hidden: vec![64, 64], feature_dim: 16 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassStatsSection {
    pub covariance: CovarianceMode,
    /// Keep Σ at its running estimate instead of meta-updating it.
    pub freeze_sigma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub differentiate_rho_weights: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0, differentiate_rho_weights: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacteristicsSection {
    pub history_decay: f64,
}

impl Default for CharacteristicsSection {
    fn default() -> Self {
        Self { history_decay: TrainerConfig::default().history_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub hidden: usize,
    pub meta_lr: f64,
}

impl Default for PerturbSection {
    fn default() -> Self {
        let d = TrainerConfig::default();
        Self { hidden: d.perturb_hidden, meta_lr: d.meta_lr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    /// `T₁`; 30% of `total_iters` when absent. Equal to `total_iters` gives
    /// plain cross-entropy training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_iters: Option<usize>,
    pub total_iters: usize,
    pub batch_size: usize,
    pub meta_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainerConfig::default();
        Self {
            warmup_iters: None,
            total_iters: 2000,
            batch_size: d.batch_size,
            meta_batch_size: d.meta_batch_size,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            lr_milestones: d.lr_milestones,
            lr_decay: d.lr_decay,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Drop the covariance term (α = 0).
    pub disable_g: bool,
    /// Drop the prior adjustment (β = 0).
    pub disable_f: bool,
    /// Freeze ε ≡ 0.
    pub disable_r: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Run the verification suites before training and refuse to train on failure.
    pub enabled: bool,
    pub quick: bool,
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { enabled: false, quick: true, seed: 0 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: ScenarioKind,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    data: Option<toml::Table>,
    #[serde(default)]
    classifier: ClassifierSection,
    #[serde(default)]
    class_stats: ClassStatsSection,
    #[serde(default)]
    loss: LossSection,
    #[serde(default)]
    characteristics: CharacteristicsSection,
    #[serde(default)]
    perturb: PerturbSection,
    #[serde(default)]
    trainer: TrainerSection,
    #[serde(default)]
    ablation: AblationSection,
    #[serde(default)]
    oracle: OracleSection,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    scenario: ScenarioKind,
    seeds: &'a [u64],
    output_dir: &'a Path,
    data: toml::Table,
    classifier: &'a ClassifierSection,
    class_stats: &'a ClassStatsSection,
    loss: &'a LossSection,
    characteristics: &'a CharacteristicsSection,
    perturb: &'a PerturbSection,
    trainer: &'a TrainerSection,
    ablation: &'a AblationSection,
    oracle: &'a OracleSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    /// Relative to the output root.
    pub output_dir: PathBuf,
    pub classifier: ClassifierSection,
    pub class_stats: ClassStatsSection,
    pub loss: LossSection,
    pub characteristics: CharacteristicsSection,
    pub perturb: PerturbSection,
    pub trainer: TrainerSection,
    pub ablation: AblationSection,
    pub oracle: OracleSection,
}

impl RunConfig {
    /// Defaults for a synthetic scenario.
    pub fn for_scenario(kind: ScenarioKind) -> Result<Self, CliError> {
        Self::from_raw(RawConfig {
            scenario: kind,
            seeds: None,
            output_dir: None,
            data: None,
            classifier: Default::default(),
            class_stats: Default::default(),
            loss: Default::default(),
            characteristics: Default::default(),
            perturb: Default::default(),
            trainer: Default::default(),
            ablation: Default::default(),
            oracle: Default::default(),
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_raw(raw)
    }

    /// Loads and validates; CSV paths are made relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DataConfig::CustomCsv(csv) = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut csv.train);
            csv.test.as_mut().map(fix);
            csv.meta.as_mut().map(fix);
        }
        Ok(cfg)
    }

    fn from_raw(raw: RawConfig) -> Result<Self, CliError> {
        let data = DataConfig::parse(raw.scenario, raw.data)?;
        let cfg = Self {
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from(raw.scenario.name())),
            seeds: raw.seeds.unwrap_or_else(|| vec![0]),
            data,
            classifier: raw.classifier,
            class_stats: raw.class_stats,
            loss: raw.loss,
            characteristics: raw.characteristics,
            perturb: raw.perturb,
            trainer: raw.trainer,
            ablation: raw.ablation,
            oracle: raw.oracle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> ScenarioKind {
        self.data.kind()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad(format!("duplicate seeds in {:?}", self.seeds));
        }
        match &self.data {
            DataConfig::Longtail(d) => {
                if d.num_classes < 2 || d.n_max == 0 || !(d.imbalance_ratio >= 1.0) || d.dim < 2 {
                    return bad("longtail needs ≥ 2 classes, n_max > 0, imbalance_ratio ≥ 1 and dim ≥ 2".into());
                }
                if d.meta_pool_per_class <= d.meta_per_class || d.meta_per_class == 0 {
                    return bad("meta_pool_per_class must exceed meta_per_class > 0".into());
                }
            }
            DataConfig::Noise(d) => {
                if d.num_classes < 2 || d.per_class == 0 || d.dim < 2 {
                    return bad("noise needs ≥ 2 classes, per_class > 0 and dim ≥ 2".into());
                }
                if !(0.0..1.0).contains(&d.noise_rate) {
                    return bad(format!("noise_rate {} outside [0, 1)", d.noise_rate));
                }
                if d.meta_pool_per_class <= d.meta_per_class || d.meta_per_class == 0 {
                    return bad("meta_pool_per_class must exceed meta_per_class > 0".into());
                }
            }
            DataConfig::Subpop(d) => {
                if d.meta_per_class == 0 || d.meta_pool <= 2 * d.meta_per_class {
                    return bad("meta_pool must exceed twice meta_per_class > 0".into());
                }
            }
            DataConfig::CustomCsv(d) => {
                if d.meta_per_class == 0 {
                    return bad("meta_per_class must be positive".into());
                }
            }
        }
        self.trainer_config(self.seeds[0]).validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Library trainer settings for one seed, with the ablation toggles applied.
    pub fn trainer_config(&self, seed: u64) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            warmup_iters: t.warmup_iters,
            total_iters: t.total_iters,
            batch_size: t.batch_size,
            meta_batch_size: t.meta_batch_size,
            lr: t.lr,
            meta_lr: self.perturb.meta_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones.clone(),
            lr_decay: t.lr_decay,
            alpha: if self.ablation.disable_g { 0.0 } else { self.loss.alpha },
            beta: if self.ablation.disable_f { 0.0 } else { self.loss.beta },
            differentiate_rho_weights: self.loss.differentiate_rho_weights,
            learn_eps: !self.ablation.disable_r,
            update_omega: !self.ablation.disable_r,
            update_sigma: !self.class_stats.freeze_sigma,
            covariance: self.class_stats.covariance,
            hidden: self.classifier.hidden.clone(),
            feature_dim: self.classifier.feature_dim,
            perturb_hidden: self.perturb.hidden,
            history_decay: self.characteristics.history_decay,
            seed,
            grad_clip: t.grad_clip,
        }
    }

    /// Plain cross-entropy baseline: the warm-up phase spans the whole run.
    pub fn cross_entropy_baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.trainer.warmup_iters = Some(cfg.trainer.total_iters);
        cfg
    }

    pub fn with_seeds(&self, seeds: Vec<u64>) -> Self {
        Self { seeds, ..self.clone() }
    }

    pub fn to_toml_string(&self) -> String {
        let resolved = ResolvedConfig {
            scenario: self.scenario(),
            seeds: &self.seeds,
            output_dir: &self.output_dir,
            data: self.data.to_table(),
            classifier: &self.classifier,
            class_stats: &self.class_stats,
            loss: &self.loss,
            characteristics: &self.characteristics,
            perturb: &self.perturb,
            trainer: &self.trainer,
            ablation: &self.ablation,
            oracle: &self.oracle,
        };
        toml::to_string(&resolved).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::from_toml_str("scenario = \"longtail\"").unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.output_dir, PathBuf::from("longtail"));
        assert_eq!(cfg.data, DataConfig::Longtail(LongtailData::default()));
        assert_eq!(cfg.trainer_config(3).seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "scenario = \"longtail\"\ncolour = 1",
            "scenario = \"longtail\"\n[trainer]\nlearning_rate = 0.1",
            "scenario = \"longtail\"\n[data]\nnoise_rate = 0.4",
            "scenario = \"subpop\"\n[data]\nimbalance_ratio = 10.0",
            "scenario = \"longtail\"\n[extra]\na = 1",
            "scenario = \"mnist\"",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "scenario = \"longtail\"\nseeds = []",
            "scenario = \"longtail\"\nseeds = [1, 1]",
            "scenario = \"noise\"\n[data]\nnoise_rate = 1.5",
            "scenario = \"longtail\"\n[trainer]\nbatch_size = 0",
            "scenario = \"longtail\"\n[trainer]\ngrad_clip = -1.0",
            "scenario = \"custom-csv\"",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn resolved_config_roundtrips() {
        for kind in [ScenarioKind::Longtail, ScenarioKind::Noise, ScenarioKind::Subpop] {
            let mut cfg = RunConfig::for_scenario(kind).unwrap();
            cfg.seeds = vec![4, 2];
            cfg.ablation.disable_g = true;
            cfg.trainer.warmup_iters = Some(7);
            let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            assert_eq!(back, cfg);
        }
        let csv = RunConfig::from_toml_str("scenario = \"custom-csv\"\n[data]\ntrain = \"a.csv\"").unwrap();
        assert_eq!(RunConfig::from_toml_str(&csv.to_toml_string()).unwrap(), csv);
    }

    #[test]
    fn toggles_map_onto_the_trainer() {
        let mut cfg = RunConfig::for_scenario(ScenarioKind::Longtail).unwrap();
        cfg.ablation = AblationSection { disable_g: true, disable_f: true, disable_r: true };
        let t = cfg.trainer_config(0);
        assert_eq!((t.alpha, t.beta, t.learn_eps), (0.0, 0.0, false));
        let ce = cfg.cross_entropy_baseline().trainer_config(0);
        assert_eq!(ce.warmup(), ce.total_iters);
    }
}
