//! Run directories. Each stage reads the files written by earlier stages,
//! checks that they were produced under the same config hash, and writes its
//! outputs plus a `stage.json` record into its own subdirectory.
//!
//! ```text
//! <run>/config.toml
//! <run>/data/                       gen-data
//! <run>/gradcon/                    train-gradcon
//! <run>/scores/<scorer>/            score --scorer <scorer>
//! <run>/scores/classifier/          shared by msp, odin and mahalanobis
//! <run>/labels/<scorer>_n<N>/       make-labels --bins N --scorer <scorer>
//! <run>/pretrain/<method>/          pretrain --mode ...
//! <run>/probe/<method>/<task>/      probe --task <task> --method <method>
//! <run>/evaluate/<method>/          evaluate --method <method>
//! <run>/ablate/                     ablate --bins N
//! <run>/report/                     report
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{
    autoencoder_checkpoint, backbone_checkpoint, classifier_checkpoint, load_autoencoder, load_backbone,
    load_classifier, load_probe, probe_checkpoint, Checkpoint,
};
use super::config::ExperimentConfig;
use crate::baselines::{
    ablation_csv, classifier_scores, train_supervised_classifier, AblationRow, Scorer, SupervisedClassifier,
};
use crate::contrastive::{write_loss_curve, Normalization};
use crate::error::{Error, Result};
use crate::evalprobe::{
    evaluate, probe_task_seed, roc_auc, spearman, train_probe, write_table, Pretraining, ProbeResult, ProbeSet,
    ProbeTask, TransferSetup,
};
use crate::gradcon::{score_dataset, train_gradcon, EpochLog, GradconOutcome};
use crate::labeling::{assign_severity_labels, extreme_bin_report, write_extreme_bin_report, write_label_csv};
use crate::seed::derive_seed;
use crate::synthdata::{
    generate_healthy_with_prefix, generate_labeled_splits, generate_unlabeled, read_labels, read_manifest,
    read_split, write_dataset_dir, write_labels, Dataset, GroundTruth, LabeledSplits, BIOMARKER_NAMES,
};

const DATA: &str = "data";
const GRADCON: &str = "gradcon";
const CLASSIFIER: &str = "scores/classifier";
const ABLATE: &str = "ablate";
const REPORT: &str = "report";
const RECORD: &str = "stage.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Severity,
    Msp,
    Odin,
    Mahalanobis,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 4] = [
        ScorerKind::Severity,
        ScorerKind::Msp,
        ScorerKind::Odin,
        ScorerKind::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Severity => "severity",
            ScorerKind::Msp => "msp",
            ScorerKind::Odin => "odin",
            ScorerKind::Mahalanobis => "mahalanobis",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PretrainMode {
    /// Keep the initial weights (the frozen random baseline).
    Random,
    Severity,
    Simclr,
}

/// A backbone variant: the name of its pretraining directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Random,
    SimClr,
    Severity { scorer: ScorerKind, n_bins: usize },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Random => write!(f, "random"),
            Method::SimClr => write!(f, "simclr"),
            Method::Severity { scorer, n_bins } => write!(f, "{}_n{n_bins}", scorer.name()),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown method {s}: expected random, simclr or <scorer>_n<bins>"));
        match s {
            "random" => Ok(Method::Random),
            "simclr" => Ok(Method::SimClr),
            _ => {
                let (scorer, n) = s.rsplit_once("_n").ok_or_else(bad)?;
                Ok(Method::Severity {
                    scorer: ScorerKind::parse(scorer).ok_or_else(bad)?,
                    n_bins: n.parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

impl Method {
    fn pretrain_command(&self) -> String {
        match self {
            Method::Random => "pretrain --mode random".into(),
            Method::SimClr => "pretrain --mode simclr".into(),
            Method::Severity { scorer, n_bins } => {
                format!("pretrain --mode severity --bins {n_bins} --scorer {}", scorer.name())
            }
        }
    }
}

pub fn task_name(task: ProbeTask) -> &'static str {
    match task {
        ProbeTask::Binary(b) => BIOMARKER_NAMES[b],
        ProbeTask::MultiLabel => "multilabel",
    }
}

pub fn parse_task(s: &str) -> Result<ProbeTask> {
    if s == "multilabel" {
        return Ok(ProbeTask::MultiLabel);
    }
    BIOMARKER_NAMES
        .iter()
        .position(|&n| n == s)
        .map(ProbeTask::Binary)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s}: expected bio_a..bio_e or multilabel")))
}

/// Every probe task, binary ones first.
pub fn all_tasks() -> Vec<ProbeTask> {
    (0..BIOMARKER_NAMES.len())
        .map(ProbeTask::Binary)
        .chain([ProbeTask::MultiLabel])
        .collect()
}

/// Provenance written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub command: String,
    pub config_hash: String,
    pub run_seed: u64,
    pub stage_seed: u64,
    pub version: String,
    /// Run-relative directories this stage read.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// Figures the report derives from the severity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradconCheck {
    /// Held-out healthy (negative) against lesioned unlabeled images.
    pub auroc_healthy_vs_anomalous: f64,
    pub spearman_vs_severity: f64,
    pub first_epoch_holdout_alignment: Option<f64>,
    pub final_epoch_holdout_alignment: Option<f64>,
}

pub struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    hash: String,
    force: bool,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dir: dir.into(),
            hash: config.hash(),
            config,
            force,
        })
    }

    /// Uses `config` if given, else the run's own `config.toml`, else the
    /// defaults.
    pub fn open(dir: impl Into<PathBuf>, config: Option<ExperimentConfig>, force: bool) -> Result<Self> {
        let dir = dir.into();
        let config = match config {
            Some(c) => c,
            None if dir.join("config.toml").exists() => ExperimentConfig::load(&dir.join("config.toml"))?,
            None => ExperimentConfig::default(),
        };
        Self::new(dir, config, force)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn read_record(&self, rel: &str) -> Option<StageRecord> {
        let text = fs::read_to_string(self.path(rel).join(RECORD)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Fails unless `rel` holds a finished stage produced under the current
    /// config. `command` is what the user should run to produce it.
    pub fn require(&self, rel: &str, command: &str) -> Result<StageRecord> {
        let path = self.path(rel).join(RECORD);
        let record = self.read_record(rel).ok_or_else(|| Error::MissingArtifact {
            path: path.clone(),
            stage: command.to_string(),
        })?;
        if record.config_hash != self.hash && !self.force {
            return Err(Error::ConfigHashMismatch {
                path,
                expected: self.hash.clone(),
                found: record.config_hash,
            });
        }
        Ok(record)
    }

    fn is_current(&self, rel: &str) -> bool {
        self.read_record(rel)
            .is_some_and(|r| self.force || r.config_hash == self.hash)
    }

    fn stage_dir(&self, rel: &str) -> Result<PathBuf> {
        let dir = self.path(rel);
        // a stale record must not outlive a failed rerun
        let _ = fs::remove_file(dir.join(RECORD));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn finish(&self, rel: &str, command: &str, stage_seed: u64, inputs: &[&str], outputs: &[&str]) -> Result<()> {
        let record = StageRecord {
            command: command.to_string(),
            config_hash: self.hash.clone(),
            run_seed: self.config.run.seed,
            stage_seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        fs::write(self.path(rel).join(RECORD), serde_json::to_string_pretty(&record)?)?;
        Ok(())
    }

    fn transfer_seed(&self) -> u64 {
        self.config.stage_seed("transfer")
    }

    fn base_checkpoint(&self, epoch: u64, seed: u64) -> Checkpoint {
        Checkpoint::new("", epoch, seed, &self.hash)
    }

    fn split(&self, name: &str, labeled: bool) -> Result<Dataset> {
        self.require(DATA, "gen-data")?;
        let dir = self.path(DATA);
        let manifest = read_manifest(&dir)?;
        let labels = if labeled {
            Some(read_labels(&dir.join("labels.csv"))?)
        } else {
            None
        };
        read_split(&dir, &manifest, name, labels.as_deref())
    }

    pub fn unlabeled(&self) -> Result<Dataset> {
        self.split("unlabeled", false)
    }

    pub fn unlabeled_truth(&self) -> Result<Vec<(String, GroundTruth)>> {
        self.require(DATA, "gen-data")?;
        read_labels(&self.path(DATA).join("unlabeled_truth.csv"))
    }

    pub fn labeled_splits(&self) -> Result<LabeledSplits> {
        Ok(LabeledSplits {
            train: self.split("train", true)?,
            binary_tests: BIOMARKER_NAMES
                .iter()
                .map(|n| self.split(&format!("test_{n}"), true))
                .collect::<Result<_>>()?,
            multilabel_test: self.split("test_multilabel", true)?,
        })
    }

    pub fn gen_data(&self) -> Result<()> {
        let c = &self.config;
        let synth = c.synth();
        let healthy = generate_healthy_with_prefix(c.data.n_healthy, &synth, "h")?;
        let holdout = generate_healthy_with_prefix(c.data.n_healthy_holdout, &synth, "hv")?;
        let corpus = generate_unlabeled(c.data.n_unlabeled, c.data.severity_max, &synth)?;
        let splits = generate_labeled_splits(
            c.data.n_train,
            c.data.n_test_per_biomarker,
            c.data.n_multilabel_test,
            c.data.severity_max,
            &synth,
        )?;
        let test_names: Vec<String> = BIOMARKER_NAMES.iter().map(|n| format!("test_{n}")).collect();
        let mut parts: Vec<(&str, &Dataset)> = vec![
            ("healthy", &healthy),
            ("healthy_holdout", &holdout),
            ("unlabeled", corpus.view()),
            ("train", &splits.train),
        ];
        parts.extend(test_names.iter().map(String::as_str).zip(&splits.binary_tests));
        parts.push(("test_multilabel", &splits.multilabel_test));
        let truth_rows = |ds: &Dataset| -> Vec<(String, GroundTruth)> {
            ds.samples
                .iter()
                .filter_map(|s| Some((s.id.clone(), GroundTruth { severity: s.severity?, biomarkers: s.biomarkers? })))
                .collect()
        };
        let mut rows = truth_rows(&splits.train);
        for ds in splits.binary_tests.iter().chain([&splits.multilabel_test]) {
            rows.extend(truth_rows(ds));
        }

        let dir = self.path(DATA);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        write_dataset_dir(&dir, &synth, &self.hash, &parts, Some(("labels.csv", rows)))?;
        let unlabeled_truth: Vec<(String, GroundTruth)> =
            corpus.view().ids().into_iter().zip(corpus.ground_truth().iter().copied()).collect();
        write_labels(&dir.join("unlabeled_truth.csv"), &unlabeled_truth)?;
        fs::write(self.dir.join("config.toml"), c.to_toml()?)?;
        self.finish(
            DATA,
            "gen-data",
            synth.seed,
            &[],
            &["manifest.json", "images/", "labels.csv", "unlabeled_truth.csv"],
        )
    }

    pub fn train_gradcon(&self) -> Result<GradconOutcome> {
        let healthy = self.split("healthy", false)?;
        let holdout = self.split("healthy_holdout", false)?;
        let seed = self.config.stage_seed("train-gradcon");
        let out = train_gradcon(&healthy, Some(&holdout), &self.config.gradcon, seed)?;
        let dir = self.stage_dir(GRADCON)?;
        let mut base = self.base_checkpoint(self.config.gradcon.epochs as u64, seed);
        base.optimizer = Some(out.optimizer.clone());
        autoencoder_checkpoint(&out.model, &out.reference, base).save(&dir.join("autoencoder.ckpt"))?;
        fs::write(dir.join("log.csv"), gradcon_log_csv(&out.log))?;
        fs::write(dir.join("log.json"), serde_json::to_string_pretty(&out.log)?)?;
        self.finish(GRADCON, "train-gradcon", seed, &[DATA], &["autoencoder.ckpt", "log.csv", "log.json"])?;
        Ok(out)
    }

    /// The supervised classifier behind the msp, odin and mahalanobis
    /// scorers; trained once per run and cached.
    pub fn classifier(&self) -> Result<SupervisedClassifier> {
        let path = self.path(CLASSIFIER).join("classifier.ckpt");
        if self.is_current(CLASSIFIER) {
            return load_classifier(&Checkpoint::load(&path)?);
        }
        let seed = self.config.stage_seed("classifier");
        let norm = Normalization::fit(&self.unlabeled()?)?;
        let model = train_supervised_classifier(
            &self.split("train", true)?,
            &self.config.backbone(),
            norm,
            &self.config.baselines.classifier,
            seed,
        )?;
        self.stage_dir(CLASSIFIER)?;
        let base = self.base_checkpoint(self.config.baselines.classifier.epochs as u64, seed);
        classifier_checkpoint(&model, base).save(&path)?;
        self.finish(CLASSIFIER, "score", seed, &[DATA], &["classifier.ckpt"])?;
        Ok(model)
    }

    fn scorer(&self, kind: ScorerKind) -> Scorer {
        match kind {
            ScorerKind::Severity => Scorer::Severity,
            ScorerKind::Msp => Scorer::Msp,
            ScorerKind::Odin => Scorer::Odin(self.config.odin()),
            ScorerKind::Mahalanobis => Scorer::Mahalanobis {
                epsilon: self.config.baselines.mahalanobis_epsilon,
            },
        }
    }

    /// Scores the unlabeled corpus; higher means more anomalous. The
    /// severity scorer also scores the held-out healthy images.
    pub fn score(&self, kind: ScorerKind) -> Result<Vec<f64>> {
        let unlabeled = self.unlabeled()?;
        let ids = unlabeled.ids();
        let rel = format!("scores/{}", kind.name());
        let command = format!("score --scorer {}", kind.name());
        if kind == ScorerKind::Severity {
            self.require(GRADCON, "train-gradcon")?;
            let (model, reference) = load_autoencoder(&Checkpoint::load(&self.path(GRADCON).join("autoencoder.ckpt"))?)?;
            let alpha = self.config.gradcon.alpha;
            let scores = score_dataset(&model, &reference, &unlabeled, alpha)?;
            let holdout = self.split("healthy_holdout", false)?;
            let holdout_scores = score_dataset(&model, &reference, &holdout, alpha)?;
            let dir = self.stage_dir(&rel)?;
            let rows = |ids: &[String], s: &[crate::gradcon::SeverityScore]| -> Vec<ScoreRow> {
                ids.iter()
                    .zip(s)
                    .map(|(id, s)| (id.clone(), Some(s.l_recon), Some(s.l_grad), s.value))
                    .collect()
            };
            write_score_csv(&dir.join("scores.csv"), &rows(&ids, &scores))?;
            write_score_csv(&dir.join("holdout.csv"), &rows(&holdout.ids(), &holdout_scores))?;
            self.finish(&rel, &command, 0, &[DATA, GRADCON], &["scores.csv", "holdout.csv"])?;
            return Ok(scores.iter().map(|s| s.value).collect());
        }
        let model = self.classifier()?;
        let scores = classifier_scores(self.scorer(kind), &model, &unlabeled, &self.split("train", true)?)?;
        let dir = self.stage_dir(&rel)?;
        let rows: Vec<ScoreRow> = ids.into_iter().zip(&scores).map(|(id, &s)| (id, None, None, s)).collect();
        write_score_csv(&dir.join("scores.csv"), &rows)?;
        self.finish(&rel, &command, 0, &[DATA, CLASSIFIER], &["scores.csv"])?;
        Ok(scores)
    }

    fn read_scores(&self, kind: ScorerKind, file: &str) -> Result<(Vec<String>, Vec<f64>)> {
        let rel = format!("scores/{}", kind.name());
        self.require(&rel, &format!("score --scorer {}", kind.name()))?;
        let rows = read_score_csv(&self.path(&rel).join(file))?;
        Ok(rows.into_iter().map(|(id, _, _, s)| (id, s)).unzip())
    }

    fn labels_rel(kind: ScorerKind, n_bins: usize) -> String {
        format!("labels/{}_n{n_bins}", kind.name())
    }

    /// Bins the scores into `n_bins` severity labels and writes the labels
    /// CSV and the extreme-bin inspection sheet.
    pub fn make_labels(&self, n_bins: usize, kind: ScorerKind) -> Result<Vec<usize>> {
        let (ids, scores) = self.read_scores(kind, "scores.csv")?;
        let labeling = assign_severity_labels(&scores, n_bins)?;
        let seed = self.config.stage_seed("make-labels");
        let smallest = labeling.bin_sizes.iter().copied().min().unwrap_or(0);
        let report = extreme_bin_report(&labeling, &ids, self.config.labels.report_k.min(smallest), seed)?;
        let rel = Self::labels_rel(kind, n_bins);
        let dir = self.stage_dir(&rel)?;
        write_label_csv(&dir.join("labels.csv"), &ids, &scores, &labeling)?;
        write_extreme_bin_report(&dir, "extremes", &report, &self.unlabeled()?)?;
        let scores_rel = format!("scores/{}", kind.name());
        self.finish(
            &rel,
            &format!("make-labels --bins {n_bins} --scorer {}", kind.name()),
            seed,
            &[DATA, &scores_rel],
            &["labels.csv", "extremes.json", "extremes.pgm"],
        )?;
        Ok(labeling.labels)
    }

    fn read_bin_labels(&self, kind: ScorerKind, n_bins: usize) -> Result<Vec<usize>> {
        let rel = Self::labels_rel(kind, n_bins);
        self.require(&rel, &format!("make-labels --bins {n_bins} --scorer {}", kind.name()))?;
        let rows = crate::labeling::read_label_csv(&self.path(&rel).join("labels.csv"))?;
        Ok(rows.into_iter().map(|(_, _, l)| l).collect())
    }

    fn transfer_setup<'a>(&self, unlabeled: &'a Dataset, splits: &'a LabeledSplits) -> Result<TransferSetup<'a>> {
        let norm = Normalization::fit(unlabeled)?;
        Ok(TransferSetup {
            unlabeled,
            splits,
            policy: self.config.policy(norm),
            backbone: self.config.backbone(),
            head: self.config.head_dims(),
            supcon: self.config.pretrain.clone(),
            probe: self.config.probe.clone(),
            seed: self.transfer_seed(),
        })
    }

    /// Pretrains (or, for `Method::Random`, only initializes) a backbone.
    pub fn pretrain(&self, method: Method) -> Result<Vec<f64>> {
        let unlabeled = self.unlabeled()?;
        let splits = self.labeled_splits()?;
        let setup = self.transfer_setup(&unlabeled, &splits)?;
        let mut inputs = vec![DATA.to_string()];
        let labels;
        let pretraining = match method {
            Method::Random => Pretraining::RandomInit,
            Method::SimClr => Pretraining::SimClr,
            Method::Severity { scorer, n_bins } => {
                labels = self.read_bin_labels(scorer, n_bins)?;
                inputs.push(Self::labels_rel(scorer, n_bins));
                Pretraining::Severity(&labels)
            }
        };
        let out = setup.pretrain(&pretraining)?;
        let rel = format!("pretrain/{method}");
        let dir = self.stage_dir(&rel)?;
        let mut base = self.base_checkpoint(out.loss_curve.len() as u64, self.transfer_seed());
        base.optimizer = out.optimizer.clone();
        backbone_checkpoint(&out.backbone, setup.policy.normalization, base).save(&dir.join("backbone.ckpt"))?;
        write_loss_curve(&dir.join("loss.csv"), &out.loss_curve)?;
        let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.finish(&rel, &method.pretrain_command(), self.transfer_seed(), &inputs, &["backbone.ckpt", "loss.csv"])?;
        Ok(out.loss_curve)
    }

    fn load_backbone(&self, method: Method) -> Result<(crate::models::Backbone, Normalization)> {
        let rel = format!("pretrain/{method}");
        self.require(&rel, &method.pretrain_command())?;
        load_backbone(&Checkpoint::load(&self.path(&rel).join("backbone.ckpt"))?)
    }

    fn probe_rel(method: Method, task: ProbeTask) -> String {
        format!("probe/{method}/{}", task_name(task))
    }

    /// Trains one linear probe on the frozen backbone of `method`.
    pub fn probe(&self, task: ProbeTask, method: Method) -> Result<()> {
        let (backbone, norm) = self.load_backbone(method)?;
        let seed = probe_task_seed(derive_seed(self.transfer_seed(), "probe"), task);
        let probe = train_probe(&backbone, &self.split("train", true)?, task, &norm, &self.config.probe, seed)?;
        let rel = Self::probe_rel(method, task);
        let dir = self.stage_dir(&rel)?;
        let base = self.base_checkpoint(self.config.probe.epochs as u64, seed);
        probe_checkpoint(&probe, base).save(&dir.join("probe.ckpt"))?;
        let pretrain_rel = format!("pretrain/{method}");
        self.finish(
            &rel,
            &format!("probe --task {} --method {method}", task_name(task)),
            seed,
            &[DATA, &pretrain_rel],
            &["probe.ckpt"],
        )
    }

    /// Evaluates all six probes of `method` on the held-out test sets.
    pub fn evaluate(&self, method: Method) -> Result<ProbeResult> {
        let (backbone, norm) = self.load_backbone(method)?;
        let load = |task: ProbeTask| -> Result<_> {
            let rel = Self::probe_rel(method, task);
            self.require(&rel, &format!("probe --task {} --method {method}", task_name(task)))?;
            load_probe(&Checkpoint::load(&self.path(&rel).join("probe.ckpt"))?)
        };
        let probes = ProbeSet {
            binary: (0..BIOMARKER_NAMES.len())
                .map(|b| load(ProbeTask::Binary(b)))
                .collect::<Result<_>>()?,
            multilabel: load(ProbeTask::MultiLabel)?,
        };
        let mut result = evaluate(&backbone, &probes, &self.labeled_splits()?, &norm, &method.to_string())?;
        result.seed = Some(self.transfer_seed());
        result.config_hash = Some(self.hash.clone());
        let rel = format!("evaluate/{method}");
        let dir = self.stage_dir(&rel)?;
        fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
        let pretrain_rel = format!("pretrain/{method}");
        let probe_rel = format!("probe/{method}");
        self.finish(
            &rel,
            &format!("evaluate --method {method}"),
            self.transfer_seed(),
            &[DATA, &pretrain_rel, &probe_rel],
            &["result.json"],
        )?;
        Ok(result)
    }

    fn read_result(&self, method: Method) -> Result<ProbeResult> {
        let rel = format!("evaluate/{method}");
        self.require(&rel, &format!("evaluate --method {method}"))?;
        Ok(serde_json::from_str(&fs::read_to_string(self.path(&rel).join("result.json"))?)?)
    }

    /// Runs whatever is missing between the scores and the evaluation of
    /// `method`; finished stages are reused.
    pub fn ensure_evaluation(&self, method: Method) -> Result<ProbeResult> {
        if self.is_current(&format!("evaluate/{method}")) {
            return self.read_result(method);
        }
        if let Method::Severity { scorer, n_bins } = method {
            if !self.is_current(&Self::labels_rel(scorer, n_bins)) {
                self.make_labels(n_bins, scorer)?;
            }
        }
        if !self.is_current(&format!("pretrain/{method}")) {
            self.pretrain(method)?;
        }
        for task in all_tasks() {
            if !self.is_current(&Self::probe_rel(method, task)) {
                self.probe(task, method)?;
            }
        }
        self.evaluate(method)
    }

    /// One row per scorer: severity labels from that scorer at `n_bins`,
    /// pretraining, and the mean multi-label AUC of the probes.
    pub fn ablate(&self, n_bins: usize) -> Result<Vec<AblationRow>> {
        for kind in ScorerKind::ALL {
            self.require(&format!("scores/{}", kind.name()), &format!("score --scorer {}", kind.name()))?;
        }
        let rows = ScorerKind::ALL
            .iter()
            .map(|&scorer| {
                let result = self.ensure_evaluation(Method::Severity { scorer, n_bins })?;
                Ok(AblationRow {
                    scorer: scorer.name().to_string(),
                    n_bins,
                    mean_auc: result.mean_auc,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.stage_dir(ABLATE)?;
        fs::write(self.path(ABLATE).join("ablation.csv"), ablation_csv(&rows))?;
        let inputs: Vec<String> = ScorerKind::ALL
            .iter()
            .map(|&scorer| format!("evaluate/{}", Method::Severity { scorer, n_bins }))
            .collect();
        let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.finish(ABLATE, &format!("ablate --bins {n_bins}"), self.transfer_seed(), &inputs, &["ablation.csv"])?;
        Ok(rows)
    }

    /// Methods in the first report table: the two baselines, then severity
    /// pretraining at each swept bin count.
    pub fn table1_methods(&self) -> Vec<Method> {
        let mut methods = vec![Method::Random, Method::SimClr];
        methods.extend(self.config.labels.bin_sweep.iter().map(|&n_bins| Method::Severity {
            scorer: ScorerKind::Severity,
            n_bins,
        }));
        methods
    }

    pub fn gradcon_check(&self) -> Result<GradconCheck> {
        let (_, unlabeled) = self.read_scores(ScorerKind::Severity, "scores.csv")?;
        let (_, holdout) = self.read_scores(ScorerKind::Severity, "holdout.csv")?;
        let truth = self.unlabeled_truth()?;
        let severity: Vec<f64> = truth.iter().map(|(_, g)| g.severity as f64).collect();
        let mut scores = holdout.clone();
        let mut positive = vec![false; holdout.len()];
        for (s, (_, g)) in unlabeled.iter().zip(&truth) {
            if g.severity > 0 {
                scores.push(*s);
                positive.push(true);
            }
        }
        self.require(GRADCON, "train-gradcon")?;
        let log: Vec<EpochLog> = serde_json::from_str(&fs::read_to_string(self.path(GRADCON).join("log.json"))?)?;
        Ok(GradconCheck {
            auroc_healthy_vs_anomalous: roc_auc(&scores, &positive)?,
            spearman_vs_severity: spearman(&unlabeled, &severity)?,
            first_epoch_holdout_alignment: log.first().and_then(|e| e.holdout_batch_alignment),
            final_epoch_holdout_alignment: log.last().and_then(|e| e.holdout_batch_alignment),
        })
    }

    /// Writes `table1.csv`, `table2.csv`, the `fig5` extreme-bin sheet, the
    /// severity-score checks and `provenance.json`.
    pub fn report(&self) -> Result<()> {
        let methods = self.table1_methods();
        let results = methods
            .iter()
            .map(|&m| self.read_result(m))
            .collect::<Result<Vec<_>>>()?;
        let n_bins = self.config.labels.n_bins;
        self.require(ABLATE, &format!("ablate --bins {n_bins}"))?;
        let fig_rel = Self::labels_rel(ScorerKind::Severity, n_bins);
        self.require(&fig_rel, &format!("make-labels --bins {n_bins} --scorer severity"))?;
        let check = self.gradcon_check()?;

        let dir = self.stage_dir(REPORT)?;
        write_table(&dir.join("table1.csv"), &results)?;
        fs::copy(self.path(ABLATE).join("ablation.csv"), dir.join("table2.csv"))?;
        let fig = self.path(&fig_rel);
        if fig.join("extremes.pgm").exists() {
            fs::copy(fig.join("extremes.pgm"), dir.join("fig5.pgm"))?;
        }
        fs::copy(fig.join("extremes.json"), dir.join("fig5.json"))?;
        fs::write(dir.join("gradcon_check.json"), serde_json::to_string_pretty(&check)?)?;

        let mut consumed: Vec<String> = vec![DATA.into(), GRADCON.into(), ABLATE.into(), fig_rel];
        for kind in ScorerKind::ALL {
            consumed.push(format!("scores/{}", kind.name()));
        }
        consumed.extend(methods.iter().map(|m| format!("evaluate/{m}")));
        let stages: BTreeMap<String, Option<StageRecord>> =
            consumed.into_iter().map(|rel| { let r = self.read_record(&rel); (rel, r) }).collect();
        let provenance = json!({
            "config_hash": self.hash,
            "run_seed": self.config.run.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "stages": stages,
        });
        fs::write(dir.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
        self.finish(
            REPORT,
            "report",
            self.config.run.seed,
            &[],
            &["table1.csv", "table2.csv", "fig5.pgm", "fig5.json", "gradcon_check.json", "provenance.json"],
        )
    }

    /// Every stage in order, as the individual subcommands would run them.
    pub fn run_all(&self) -> Result<()> {
        self.gen_data()?;
        self.train_gradcon()?;
        for kind in ScorerKind::ALL {
            self.score(kind)?;
        }
        for method in self.table1_methods() {
            self.ensure_evaluation(method)?;
        }
        self.ablate(self.config.labels.n_bins)?;
        self.report()
    }
}

type ScoreRow = (String, Option<f64>, Option<f64>, f64);

const SCORE_HEADER: &str = "sample_id,l_recon,l_grad,severity";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `sample_id,l_recon,l_grad,severity`; the two loss columns are empty for
/// scorers that do not produce them.
pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut out = format!("{SCORE_HEADER}\n");
    for (id, recon, grad, s) in rows {
        out.push_str(&format!("{id},{},{},{s}\n", opt(*recon), opt(*grad)));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(SCORE_HEADER) {
        return Err(bad("unexpected score header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| bad(format!("bad number {s}")))
    };
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns: {line}")));
            }
            let severity = num(cols[3])?.ok_or_else(|| bad(format!("missing severity: {line}")))?;
            Ok((cols[0].to_string(), num(cols[1])?, num(cols[2])?, severity))
        })
        .collect()
}

fn gradcon_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(
        "epoch,mean_objective,mean_recon,mean_grad_alignment,holdout_alignment,holdout_batch_alignment,holdout_recon\n",
    );
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch,
            e.mean_objective,
            e.mean_recon,
            e.mean_grad_alignment,
            opt(e.holdout_alignment),
            opt(e.holdout_batch_alignment),
            opt(e.holdout_recon)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Random,
            Method::SimClr,
            Method::Severity { scorer: ScorerKind::Severity, n_bins: 500 },
            Method::Severity { scorer: ScorerKind::Mahalanobis, n_bins: 7 },
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("severity_nX".parse::<Method>().is_err());
        assert!("moco".parse::<Method>().is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for t in all_tasks() {
            assert_eq!(parse_task(task_name(t)).unwrap(), t);
        }
        assert!(parse_task("bio_f").is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let rows = vec![
            ("u-0".to_string(), Some(0.1), Some(0.93), 0.1 - 0.03 * 0.93),
            ("u-1".to_string(), None, None, -0.75),
        ];
        write_score_csv(&path, &rows).unwrap();
        assert_eq!(read_score_csv(&path).unwrap(), rows);
    }
}
