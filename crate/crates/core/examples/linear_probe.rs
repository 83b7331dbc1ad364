//! Freezes a backbone, fits one linear probe per biomarker plus a
//! multi-label probe, and prints the evaluation row.
//!
//! ```bash
//! cargo run -p sevcon --example linear_probe
//! ```

use sevcon::contrastive::Normalization;
use sevcon::evalprobe::{evaluate, table_row, train_probe_set, ProbeConfig};
use sevcon::models::{build_backbone, BackboneConfig};
use sevcon::synthdata::{generate_labeled_splits, SynthConfig, BIOMARKER_NAMES};

fn main() -> sevcon::Result<()> {
    let splits = generate_labeled_splits(300, 100, 200, 4, &SynthConfig::default())?;
    let backbone = build_backbone(&BackboneConfig::default(), 5)?;
    let norm = Normalization::fit(&splits.train)?;

    let probes = train_probe_set(&backbone, &splits.train, &norm, &ProbeConfig::default(), 9)?;
    let result = evaluate(&backbone, &probes, &splits, &norm, "random")?;
    for (name, m) in BIOMARKER_NAMES.iter().zip(&result.binary) {
        println!("{name:6} accuracy {:.3}  f1 {:.3}", m.accuracy, m.f1);
    }
    println!("per-label AUC {:?}", result.per_label_auc.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("{}", table_row(&result)?);
    Ok(())
}
