//! Run configuration: a TOML file with one table per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{InitOptions, RangeInit, WeightInit};
use crate::datapipe::Sampling;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::srnet::{PretrainConfig, SrNetConfig};

/// Quantization method run by the quantize stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Bit mapping, bit-aware clipping and fine-tuning.
    Adabm,
    /// Min/max ranges, no bit mapping, no fine-tuning.
    Minmax,
    MinmaxFt,
    /// 1st/99th percentile ranges, no bit mapping, no fine-tuning.
    Percentile,
    PercentileFt,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Adabm => "adabm",
            QuantMode::Minmax => "minmax",
            QuantMode::MinmaxFt => "minmax_ft",
            QuantMode::Percentile => "percentile",
            QuantMode::PercentileFt => "percentile_ft",
        }
    }

    pub fn finetunes(self) -> bool {
        matches!(
            self,
            QuantMode::Adabm | QuantMode::MinmaxFt | QuantMode::PercentileFt
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Random,
    Stratified,
}

/// Where calibration and probe images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory of LR calibration PNGs; synthetic images when absent.
    pub calib_dir: Option<PathBuf>,
    pub calib_count: usize,
    pub sampling: SamplingKind,
    /// Number of complexity groups for stratified sampling.
    pub strata: usize,
    /// Calibration patch side.
    pub patch: usize,
    /// Synthetic pool size when no directory is given.
    pub synth_pool: usize,
    /// Side of each synthetic LR image.
    pub synth_size: usize,
    /// Held-out synthetic images used for PSNR logging during fine-tuning.
    pub probe_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            calib_dir: None,
            calib_count: 100,
            sampling: SamplingKind::Random,
            strata: 4,
            patch: 32,
            synth_pool: 300,
            synth_size: 32,
            probe_count: 10,
        }
    }
}

impl DataConfig {
    pub fn sampling(&self) -> Sampling {
        match self.sampling {
            SamplingKind::Random => Sampling::Random,
            SamplingKind::Stratified => Sampling::Stratified(self.strata),
        }
    }
}

/// User-facing part of the initialization options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub p_i: f64,
    pub p_l: f64,
    pub momentum: f64,
    pub factor_magnitude: u32,
    pub batch_size: usize,
    /// Ablation switches; baseline modes force both off.
    pub bit_aware_clip: bool,
    pub bit_mapping: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let d = InitOptions::default();
        CalibrationConfig {
            p_i: d.p_i,
            p_l: d.p_l,
            momentum: 0.9,
            factor_magnitude: d.factor_magnitude,
            batch_size: d.batch_size,
            bit_aware_clip: d.bit_aware_clip,
            bit_mapping: d.bit_mapping,
        }
    }
}

/// Provenance written with every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInfo {
    pub version: String,
    pub command: String,
}

/// Version string recorded in manifests.
pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: QuantMode,
    pub network: SrNetConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub calibration: CalibrationConfig,
    pub finetune: FinetuneConfig,
    /// Present in manifests; ignored when loading.
    pub manifest: Option<ManifestInfo>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: QuantMode::Adabm,
            network: SrNetConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            calibration: CalibrationConfig::default(),
            finetune: FinetuneConfig::default(),
            manifest: None,
        }
    }
}

/// Keys that may be absent from a serialized default config.
const OPTIONAL_KEYS: &[&str] = &[
    "data.calib_dir",
    "finetune.b_tar",
    "manifest",
    "manifest.version",
    "manifest.command",
];

/// Keys whose values are derived from the top-level seed.
const DERIVED_KEYS: &[&str] = &["pretrain.seed", "finetune.seed"];

fn collect_keys(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if let toml::Value::Table(t) = v {
            collect_keys(&key, t, out);
        }
        out.push(key);
    }
}

impl RunConfig {
    /// Parse TOML text. Every unknown key and every invalid value is
    /// reported in one error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        let default =
            toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut allowed = Vec::new();
        collect_keys("", &default, &mut allowed);
        allowed.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
        let mut present = Vec::new();
        collect_keys("", &table, &mut present);
        let mut errs: Vec<String> = present
            .iter()
            .filter(|k| DERIVED_KEYS.contains(&k.as_str()))
            .map(|k| format!("{k}: set the top-level `seed` instead"))
            .collect();
        errs.extend(
            present
                .iter()
                .filter(|k| !allowed.contains(k))
                .map(|k| format!("{k}: unknown key")),
        );
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg.with_derived_seeds())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml_str(&text)
    }

    /// TOML text of the config, without derived seeds.
    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for key in DERIVED_KEYS {
            let (section, field) = key.split_once('.').expect("dotted key");
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.remove(field);
            }
        }
        toml::to_string(&table).expect("table serializes")
    }

    /// Propagate the top-level seed into the stage configs.
    pub fn with_derived_seeds(mut self) -> Self {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed.wrapping_add(4);
        self
    }

    /// Override the seed (as the `--seed` flag does).
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        *self = self.clone().with_derived_seeds();
    }

    /// Every violated constraint.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.network.validate();
        errs.extend(self.pretrain.validate(self.network.scale));
        errs.extend(self.finetune.validate());
        let c = &self.calibration;
        for (name, p) in [("p_i", c.p_i), ("p_l", c.p_l)] {
            if !(p > 0.0 && p <= 50.0) {
                errs.push(format!("calibration.{name} must be in (0, 50], got {p}"));
            }
        }
        if !(0.0..=1.0).contains(&c.momentum) {
            errs.push(format!(
                "calibration.momentum must be in [0, 1], got {}",
                c.momentum
            ));
        }
        if c.batch_size == 0 {
            errs.push("calibration.batch_size must be >= 1".into());
        }
        if c.factor_magnitude > 6 {
            errs.push(format!(
                "calibration.factor_magnitude must be <= 6, got {}",
                c.factor_magnitude
            ));
        }
        let d = &self.data;
        if d.calib_count == 0 {
            errs.push("data.calib_count must be >= 1".into());
        }
        if d.patch == 0 {
            errs.push("data.patch must be >= 1".into());
        }
        if d.synth_size == 0 {
            errs.push("data.synth_size must be >= 1".into());
        }
        if d.calib_dir.is_none() && d.synth_pool < d.calib_count {
            errs.push(format!(
                "data.synth_pool ({}) must be >= data.calib_count ({})",
                d.synth_pool, d.calib_count
            ));
        }
        if d.sampling == SamplingKind::Stratified && d.strata == 0 {
            errs.push("data.strata must be >= 1".into());
        }
        errs
    }

    /// Initialization options implied by the mode.
    pub fn init_options(&self) -> InitOptions {
        let c = &self.calibration;
        let baseline = self.mode != QuantMode::Adabm;
        InitOptions {
            p_i: c.p_i,
            p_l: c.p_l,
            momentum: c.momentum as f32,
            factor_magnitude: c.factor_magnitude,
            batch_size: c.batch_size,
            range_init: match self.mode {
                QuantMode::Percentile | QuantMode::PercentileFt => RangeInit::Percentile,
                _ => RangeInit::MinMax,
            },
            weight_init: if baseline {
                WeightInit::MaxAbs
            } else {
                WeightInit::Omse
            },
            bit_aware_clip: !baseline && c.bit_aware_clip,
            bit_mapping: !baseline && c.bit_mapping,
            seed: self.seed.wrapping_add(3),
        }
    }

    /// Seed of the synthetic calibration pool.
    pub fn pool_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Seed of calibration sampling.
    pub fn sampling_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// Seed of the held-out probe images.
    pub fn probe_seed(&self) -> u64 {
        self.seed.wrapping_add(5)
    }

    /// Manifest text: the full config plus provenance.
    pub fn manifest(&self, command: &str) -> String {
        let mut m = self.clone();
        m.manifest = Some(ManifestInfo {
            version: version_string(),
            command: command.to_string(),
        });
        m.to_toml_string()
    }
}
