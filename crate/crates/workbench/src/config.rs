//! Declarative run configurations: a flat TOML file with typed sections.
//! Unknown keys are errors. A config fully determines a run; its canonical
//! re-serialization is hashed to content-address the results directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rst_core::{AttackConfig, AttackNorm, InitMethod, NetworkSpec, Schedule, SparsityPattern};

use crate::error::{Result, WorkbenchError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2s: Option<R2sSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<DistanceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<String>,
}

fn default_out_dir() -> String {
    "runs".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    #[serde(default)]
    pub train_limit: usize,
    #[serde(default)]
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_init")]
    pub init: String,
}

fn default_preset() -> String {
    "desk_cnn".into()
}

fn default_init() -> String {
    "signed_kaiming_constant".into()
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            preset: default_preset(),
            init: default_init(),
        }
    }
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_gamma() -> f64 {
    0.1
}

// serde cannot enforce deny_unknown_fields through #[serde(flatten)], so the
// schedule fields are repeated verbatim in each section that runs a loop.
macro_rules! schedule_fields {
    ($name:ident { $($extra:tt)* }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $($extra)*
            pub epochs: usize,
            #[serde(default = "default_batch")]
            pub batch_size: usize,
            #[serde(default = "default_lr")]
            pub lr: f64,
            #[serde(default = "default_momentum")]
            pub momentum: f64,
            #[serde(default)]
            pub milestones: Vec<usize>,
            #[serde(default = "default_gamma")]
            pub gamma: f64,
        }

        impl $name {
            pub fn to_schedule(&self) -> Result<Schedule> {
                Schedule::new(
                    self.epochs,
                    self.batch_size,
                    self.lr,
                    self.momentum,
                    self.milestones.clone(),
                    self.gamma,
                )
                .map_err(WorkbenchError::core("config"))
            }
        }
    };
}

schedule_fields!(SearchSection {
    pub ratios: Vec<f64>,
    #[serde(default = "default_pattern")]
    pub pattern: String,
    /// Inner adversary: `pgdN`, `fgsm`, or `fgsm_rs`.
    #[serde(default = "default_adversary")]
    pub adversary: String,
    /// Dense-trained checkpoint to draw trained tickets from; omitted for
    /// scratch-ticket search over random weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Reinitialize the final linear layer when the source's class count
    /// differs from the dataset's.
    #[serde(default)]
    pub reinit_last: bool,
});

fn default_pattern() -> String {
    "element".into()
}

fn default_adversary() -> String {
    "pgd7".into()
}

schedule_fields!(TrainSection {
    /// `natural` or `adversarial`.
    pub mode: String,
});

schedule_fields!(FinetuneSection {
    /// Path to the input ticket checkpoint.
    pub ticket: String,
    /// `inherit` or `reinit`.
    pub mode: String,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// `pgd`, `fgsm`, or `fgsm_rs`.
    #[serde(default = "default_attack_kind")]
    pub kind: String,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Step size; defaults to eps/4 for PGD, eps for FGSM, 1.25*eps for
    /// FGSM-RS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub lo: f64,
    #[serde(default = "default_one")]
    pub hi: f64,
}

fn default_attack_kind() -> String {
    "pgd".into()
}
fn default_norm() -> String {
    "linf".into()
}
fn default_eps() -> f64 {
    0.1
}
fn default_steps() -> usize {
    20
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: default_attack_kind(),
            norm: default_norm(),
            eps: default_eps(),
            alpha: None,
            steps: default_steps(),
            random_start: default_true(),
            lo: 0.0,
            hi: default_one(),
        }
    }
}

impl AttackSection {
    pub fn to_attack(&self) -> Result<AttackConfig> {
        let norm = match self.norm.as_str() {
            "linf" => AttackNorm::Linf,
            "l2" => AttackNorm::L2,
            other => {
                return Err(WorkbenchError::Config(format!(
                    "unknown attack norm {other:?} (linf or l2)"
                )))
            }
        };
        let bounds = (self.lo, self.hi);
        let cfg = match self.kind.as_str() {
            "pgd" => AttackConfig::new(
                norm,
                self.eps,
                self.alpha.unwrap_or(self.eps / 4.0),
                self.steps,
                self.random_start,
                bounds,
            ),
            "fgsm" => AttackConfig::new(
                norm,
                self.eps,
                self.alpha.unwrap_or(self.eps),
                1,
                false,
                bounds,
            ),
            "fgsm_rs" => AttackConfig::new(
                norm,
                self.eps,
                self.alpha.unwrap_or(1.25 * self.eps),
                1,
                true,
                bounds,
            ),
            other => {
                return Err(WorkbenchError::Config(format!(
                    "unknown attack kind {other:?} (pgd, fgsm, fgsm_rs)"
                )))
            }
        };
        cfg.map_err(WorkbenchError::core("config"))
    }

    /// Short label used in report rows, e.g. `pgd20-linf-eps0.1`.
    pub fn label(&self) -> Result<String> {
        Ok(self.to_attack()?.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R2sSection {
    pub checkpoints: Vec<String>,
    #[serde(default = "default_adaptive")]
    pub adaptive: Vec<String>,
    /// `exact` or `sampled`.
    #[serde(default = "default_estimator")]
    pub estimator: String,
    /// Sampling distribution over candidates; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<f64>>,
    /// Sample once per batch instead of per input (off by default).
    #[serde(default)]
    pub per_batch: bool,
}

fn default_adaptive() -> Vec<String> {
    vec!["none".into()]
}

fn default_estimator() -> String {
    "exact".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceSection {
    pub checkpoints: Vec<String>,
    pub eps_list: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSection {
    /// `ratio_curve`, `transfer_heatmap`, or `distance_bars`.
    pub kind: String,
    /// Input results CSV.
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WorkbenchError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| WorkbenchError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical serialized form; the basis of the config hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex-truncated SHA-256 of the canonical form. Changes iff any config
    /// field changes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn init_method(&self) -> Result<InitMethod> {
        InitMethod::from_name(&self.network.init).ok_or_else(|| {
            WorkbenchError::Config(format!("unknown init method {:?}", self.network.init))
        })
    }

    pub fn network_spec(&self, input: (usize, usize, usize), classes: usize) -> Result<NetworkSpec> {
        let id = format!(
            "{}:{}x{}x{}:{}",
            self.network.preset, input.0, input.1, input.2, classes
        );
        NetworkSpec::from_id(&id).map_err(WorkbenchError::core("config"))
    }

    pub fn pattern(&self) -> Result<SparsityPattern> {
        let name = self
            .search
            .as_ref()
            .map(|s| s.pattern.as_str())
            .unwrap_or("element");
        SparsityPattern::from_name(name)
            .ok_or_else(|| WorkbenchError::Config(format!("unknown sparsity pattern {name:?}")))
    }

    /// Search-time adversary built from the adversary name and the attack
    /// section's epsilon, norm, and bounds.
    pub fn search_adversary(&self) -> Result<AttackConfig> {
        let name = self
            .search
            .as_ref()
            .map(|s| s.adversary.as_str())
            .unwrap_or("pgd7");
        let norm = match self.attack.norm.as_str() {
            "linf" => AttackNorm::Linf,
            "l2" => AttackNorm::L2,
            other => {
                return Err(WorkbenchError::Config(format!(
                    "unknown attack norm {other:?}"
                )))
            }
        };
        let eps = self.attack.eps;
        let bounds = (self.attack.lo, self.attack.hi);
        let cfg = if name == "fgsm" {
            AttackConfig::new(norm, eps, eps, 1, false, bounds)
        } else if name == "fgsm_rs" {
            AttackConfig::new(norm, eps, 1.25 * eps, 1, true, bounds)
        } else if let Some(steps) = name.strip_prefix("pgd").and_then(|s| s.parse::<usize>().ok())
        {
            AttackConfig::new(norm, eps, eps / 4.0, steps, true, bounds)
        } else {
            return Err(WorkbenchError::Config(format!(
                "unknown search adversary {name:?} (pgdN, fgsm, fgsm_rs)"
            )));
        };
        cfg.map_err(WorkbenchError::core("config"))
    }
}
