use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::synth::SceneSpec;

/// SGD with momentum, global gradient-norm clipping and one step decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Epoch from which the step size is multiplied by `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 35.0,
            decay_epoch: 15,
            decay_factor: 0.1,
        }
    }
}

/// Synthetic domains and split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    /// Domain names understood by `DomainStyle::by_name`.
    pub domains: Vec<String>,
    pub source: String,
    pub targets: Vec<String>,
    pub train_count: usize,
    pub test_count: usize,
    /// Scene seed; train and test scenes use `seed` and `seed + 1`.
    pub seed: u64,
    /// Train on only the first `n` source images.
    pub train_subset: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            domains: vec!["A".into(), "B".into(), "C".into()],
            source: "A".into(),
            targets: vec!["B".into(), "C".into()],
            train_count: 200,
            test_count: 50,
            seed: 2024,
            train_subset: None,
        }
    }
}

/// Where the hallucination statistics come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum BankConfig {
    /// `count` entries with random per-channel mean and scale.
    Synthetic { count: usize },
    /// The first `count` source training images through a frozen random encoder.
    Encoded { count: usize },
    /// A bank written by `StyleBank::write`.
    File { path: PathBuf },
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig::Synthetic { count: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Stops training early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Seeds initialization, style draws, shuffling and sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub bank: BankConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            detector: DetectorConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 20,
            max_steps: None,
            batch_size: 4,
            seed: 0,
            data: DataConfig::default(),
            bank: BankConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON; missing keys take defaults, unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.data.scene.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return fail("epochs and batch_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.grad_clip >= 0.0) {
            return fail("optimizer settings out of range".into());
        }
        if !(o.decay_factor > 0.0) {
            return fail(format!("decay_factor must be positive, got {}", o.decay_factor));
        }
        if self.data.scene.image_size != self.detector.image_size {
            return fail(format!(
                "scene image_size {} differs from detector image_size {}",
                self.data.scene.image_size, self.detector.image_size
            ));
        }
        if self.data.scene.classes.len() != self.detector.num_classes {
            return fail(format!(
                "scene has {} classes but the detector expects {}",
                self.data.scene.classes.len(),
                self.detector.num_classes
            ));
        }
        let d = &self.data;
        for name in std::iter::once(&d.source).chain(&d.targets) {
            if !d.domains.contains(name) {
                return fail(format!("domain {name:?} is not among the generated domains {:?}", d.domains));
            }
        }
        if d.train_count == 0 || d.test_count == 0 || d.train_subset == Some(0) {
            return fail("split sizes must be positive".into());
        }
        match &self.bank {
            BankConfig::Synthetic { count } | BankConfig::Encoded { count } if *count == 0 => {
                fail("style bank count must be positive".into())
            }
            _ => Ok(()),
        }
    }
}
