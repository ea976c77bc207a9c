//! Optimizer schedule, training loop, checkpoints and the ablation runner.

mod ablation;
mod checkpoint;
mod optim;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{CausalityTerms, LossConfig};
use crate::model::{BlockNorm, ModelConfig, NormMode};

pub use ablation::{
    run_ablation, AblationCell, AblationMatrix, AblationRow, AblationTable, DIVERGENCE_SAMPLES,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use optim::{lr_schedule, Adam, OptimConfig};
pub use train::{
    divergence_from_checkpoint, evaluate_checkpoint, evaluate_train_split, train_run, EpochRecord,
    RunRecord, Seeds, StepLog,
};

/// Training scheme: model modes plus which dual causality terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scheme {
    Baseline,
    /// Every batch norm replaced by instance norm.
    BaselineAIn,
    /// An instance-norm layer after each stage.
    BaselineIn,
    BaselineSnr,
    SnrWithoutLoss,
    SnrWithoutPlus,
    SnrWithoutMinus,
    SnrConv,
    SnrG2,
    /// SNR only after one stage (1-based).
    SnrStage(usize),
}

impl Scheme {
    pub const TABLE: [Scheme; 9] = [
        Scheme::Baseline,
        Scheme::BaselineAIn,
        Scheme::BaselineIn,
        Scheme::BaselineSnr,
        Scheme::SnrWithoutLoss,
        Scheme::SnrWithoutPlus,
        Scheme::SnrWithoutMinus,
        Scheme::SnrConv,
        Scheme::SnrG2,
    ];

    /// Row label used in tables.
    pub fn label(&self) -> String {
        match self {
            Scheme::Baseline => "Baseline".into(),
            Scheme::BaselineAIn => "Baseline-A-IN".into(),
            Scheme::BaselineIn => "Baseline-IN".into(),
            Scheme::BaselineSnr => "Baseline-SNR".into(),
            Scheme::SnrWithoutLoss => "SNR w/o L_SNR".into(),
            Scheme::SnrWithoutPlus => "SNR w/o L+".into(),
            Scheme::SnrWithoutMinus => "SNR w/o L-".into(),
            Scheme::SnrConv => "SNR_conv".into(),
            Scheme::SnrG2 => "SNR_g2".into(),
            Scheme::SnrStage(s) => format!("SNR stage-{s}"),
        }
    }

    /// Applies the scheme's stage modes and block norm to `cfg`.
    pub fn configure(&self, cfg: &mut ModelConfig) -> Result<()> {
        cfg.baseline_norm = BlockNorm::BatchNorm;
        let mode = match self {
            Scheme::Baseline => NormMode::None,
            Scheme::BaselineAIn => {
                cfg.baseline_norm = BlockNorm::InstanceNorm;
                NormMode::None
            }
            Scheme::BaselineIn => NormMode::InOnly,
            Scheme::SnrConv => NormMode::SnrConv,
            Scheme::SnrG2 => NormMode::SnrG2,
            Scheme::SnrStage(s) => {
                if *s == 0 || *s > cfg.stages.len() {
                    return Err(Error::Config(format!(
                        "stage {s} out of range for {} stages",
                        cfg.stages.len()
                    )));
                }
                cfg.set_modes(NormMode::None);
                cfg.stages[s - 1].mode = NormMode::Snr;
                return Ok(());
            }
            _ => NormMode::Snr,
        };
        cfg.set_modes(mode);
        Ok(())
    }

    pub fn terms(&self) -> CausalityTerms {
        let (clarification, destruction) = match self {
            Scheme::SnrWithoutLoss => (false, false),
            Scheme::SnrWithoutPlus => (false, true),
            Scheme::SnrWithoutMinus => (true, false),
            _ => (true, true),
        };
        CausalityTerms {
            clarification,
            destruction,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Baseline => f.write_str("baseline"),
            Scheme::BaselineAIn => f.write_str("baseline_a_in"),
            Scheme::BaselineIn => f.write_str("baseline_in"),
            Scheme::BaselineSnr => f.write_str("baseline_snr"),
            Scheme::SnrWithoutLoss => f.write_str("snr_wo_lsnr"),
            Scheme::SnrWithoutPlus => f.write_str("snr_wo_lplus"),
            Scheme::SnrWithoutMinus => f.write_str("snr_wo_lminus"),
            Scheme::SnrConv => f.write_str("snr_conv"),
            Scheme::SnrG2 => f.write_str("snr_g2"),
            Scheme::SnrStage(s) => write!(f, "snr_stage{s}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match key.as_str() {
            "baseline" => Scheme::Baseline,
            "baseline_a_in" => Scheme::BaselineAIn,
            "baseline_in" => Scheme::BaselineIn,
            "baseline_snr" | "snr" => Scheme::BaselineSnr,
            "snr_wo_lsnr" => Scheme::SnrWithoutLoss,
            "snr_wo_lplus" => Scheme::SnrWithoutPlus,
            "snr_wo_lminus" => Scheme::SnrWithoutMinus,
            "snr_conv" => Scheme::SnrConv,
            "snr_g2" => Scheme::SnrG2,
            other => match other.strip_prefix("snr_stage").map(str::parse) {
                Some(Ok(n)) => Scheme::SnrStage(n),
                _ => return Err(Error::Config(format!("unknown scheme {s:?}"))),
            },
        })
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Backbone geometry; the number of identities comes from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub reduction: usize,
    pub lambda: Vec<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            input: d.input,
            channels: d.stages.iter().map(|s| s.out_channels).collect(),
            embedding_dim: d.embedding_dim,
            reduction: d.reduction,
            lambda: d.lambda,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, scheme: Scheme, num_identities: usize, seed: u64) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::with_channels(
            self.input,
            &self.channels,
            self.embedding_dim,
            num_identities,
        );
        cfg.reduction = self.reduction;
        cfg.lambda = self.lambda.clone();
        cfg.seed = seed;
        scheme.configure(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    /// Batches per epoch; defaults to one pass over the training split.
    pub batches_per_epoch: Option<usize>,
    /// Evaluate (and checkpoint) every this many epochs; 0 disables.
    pub eval_every: usize,
    pub dataset: PathBuf,
    /// Held-out domain for periodic evaluation.
    pub target_domain: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::BaselineSnr,
            model: ModelSpec::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            epochs: 60,
            p: 4,
            k: 4,
            seed: 0,
            batches_per_epoch: None,
            eval_every: 10,
            dataset: PathBuf::new(),
            target_domain: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.epochs < self.optim.warmup_epochs {
            return Err(Error::Config(format!(
                "epochs ({}) must cover the warmup ({})",
                self.epochs, self.optim.warmup_epochs
            )));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config("P and K must both be at least 2".into()));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches_per_epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Loss settings with the scheme's term selection applied.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss.clone();
        let t = self.scheme.terms();
        l.terms.clarification &= t.clarification;
        l.terms.destruction &= t.destruction;
        l
    }

    /// Short hash of everything that determines the trained weights.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        config_hash(&c)
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_round_trip() {
        let mut all = Scheme::TABLE.to_vec();
        all.push(Scheme::SnrStage(3));
        for s in all {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
        }
        assert!("resnet".parse::<Scheme>().is_err());
        assert_eq!(
            "Baseline-SNR".parse::<Scheme>().unwrap(),
            Scheme::BaselineSnr
        );
    }

    #[test]
    fn stage_placement() {
        let mut cfg = ModelConfig::desk(5);
        Scheme::SnrStage(2).configure(&mut cfg).unwrap();
        let modes: Vec<NormMode> = cfg.stages.iter().map(|s| s.mode).collect();
        assert_eq!(
            modes,
            [
                NormMode::None,
                NormMode::Snr,
                NormMode::None,
                NormMode::None
            ]
        );
        assert!(Scheme::SnrStage(5).configure(&mut cfg).is_err());
    }

    #[test]
    fn hash_ignores_dataset_path() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.dataset = "/elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
