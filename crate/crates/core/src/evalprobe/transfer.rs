use serde::{Deserialize, Serialize};

use super::probe::{evaluate, train_probe_set, ProbeConfig, ProbeResult};
use crate::contrastive::{pretrain, simclr_mode, AugmentationPolicy, PretrainOutcome, SupConConfig};
use crate::error::Result;
use crate::models::{build_backbone, build_projection_head, Backbone, BackboneConfig};
use crate::seed::derive_seed;
use crate::synthdata::{Dataset, LabeledSplits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadDims {
    pub hidden: usize,
    pub output: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        Self { hidden: 64, output: 32 }
    }
}

/// Everything shared by the methods being compared: data, initialization
/// seeds and training settings.
#[derive(Debug, Clone)]
pub struct TransferSetup<'a> {
    pub unlabeled: &'a Dataset,
    pub splits: &'a LabeledSplits,
    pub policy: AugmentationPolicy,
    pub backbone: BackboneConfig,
    pub head: HeadDims,
    pub supcon: SupConConfig,
    pub probe: ProbeConfig,
    pub seed: u64,
}

pub enum Pretraining<'l> {
    RandomInit,
    Severity(&'l [usize]),
    SimClr,
}

impl TransferSetup<'_> {
    /// The common starting point of every method.
    pub fn initial_backbone(&self) -> Result<Backbone> {
        build_backbone(&self.backbone, derive_seed(self.seed, "backbone-init"))
    }

    pub fn pretrain(&self, method: &Pretraining) -> Result<PretrainOutcome> {
        let backbone = self.initial_backbone()?;
        let mut head = build_projection_head(
            self.backbone.embedding_dim,
            self.head.hidden,
            self.head.output,
            self.backbone.bias,
            derive_seed(self.seed, "projection-init"),
        )?;
        let seed = derive_seed(self.seed, "pretrain");
        match method {
            Pretraining::RandomInit => Ok(PretrainOutcome {
                backbone,
                loss_curve: Vec::new(),
                optimizer: None,
            }),
            Pretraining::Severity(labels) => pretrain(
                backbone,
                &mut head,
                self.unlabeled,
                labels,
                &self.policy,
                &self.supcon,
                seed,
            ),
            Pretraining::SimClr => simclr_mode(backbone, &mut head, self.unlabeled, &self.policy, &self.supcon, seed),
        }
    }

    pub fn probe(&self, backbone: &Backbone, method: &str) -> Result<ProbeResult> {
        let norm = self.policy.normalization;
        let probes = train_probe_set(backbone, &self.splits.train, &norm, &self.probe, derive_seed(self.seed, "probe"))?;
        let mut result = evaluate(backbone, &probes, self.splits, &norm, method)?;
        result.seed = Some(self.seed);
        Ok(result)
    }

    pub fn run(&self, method: &Pretraining, name: &str) -> Result<ProbeResult> {
        let out = self.pretrain(method)?;
        self.probe(&out.backbone, name)
    }
}
