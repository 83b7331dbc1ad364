//! Scores unlabeled images with the classifier-based anomaly baselines
//! (maximum softmax probability, ODIN and Mahalanobis distance) and compares
//! each with the lesion counts.
//!
//! ```bash
//! cargo run -p sevcon --example ood_baselines
//! ```

use sevcon::baselines::{classifier_scores, train_supervised_classifier, ClassifierConfig, OdinParams, Scorer};
use sevcon::contrastive::Normalization;
use sevcon::evalprobe::{roc_auc, spearman};
use sevcon::models::BackboneConfig;
use sevcon::synthdata::{generate_labeled_splits, generate_unlabeled, SynthConfig};

fn main() -> sevcon::Result<()> {
    let synth = SynthConfig::default();
    let splits = generate_labeled_splits(300, 20, 20, 4, &synth)?;
    let corpus = generate_unlabeled(300, 4, &synth)?;
    let norm = Normalization::fit(corpus.view())?;
    let cfg = ClassifierConfig { epochs: 5, ..Default::default() };
    let model = train_supervised_classifier(&splits.train, &BackboneConfig::default(), norm, &cfg, 1)?;

    let truth = corpus.ground_truth();
    let severity: Vec<f64> = truth.iter().map(|g| f64::from(g.severity)).collect();
    let lesioned: Vec<bool> = truth.iter().map(|g| g.severity > 0).collect();
    for scorer in [Scorer::Msp, Scorer::Odin(OdinParams::default()), Scorer::Mahalanobis { epsilon: 1e-3 }] {
        let s = classifier_scores(scorer, &model, corpus.view(), &splits.train)?;
        println!(
            "{:12} AUROC lesioned {:.3}  Spearman {:.3}",
            scorer.name(),
            roc_auc(&s, &lesioned)?,
            spearman(&s, &severity)?
        );
    }
    Ok(())
}
