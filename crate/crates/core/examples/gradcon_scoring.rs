//! Trains the gradient-constrained autoencoder on healthy images and checks
//! how well its severity score separates lesioned from healthy samples.
//!
//! ```bash
//! cargo run -p sevcon --example gradcon_scoring
//! ```

use sevcon::evalprobe::{roc_auc, spearman};
use sevcon::gradcon::{score_dataset, train_gradcon, GradconConfig};
use sevcon::synthdata::{generate_healthy_with_prefix, generate_unlabeled, SynthConfig};

fn main() -> sevcon::Result<()> {
    let synth = SynthConfig::default();
    let healthy = generate_healthy_with_prefix(240, &synth, "h")?;
    let holdout = generate_healthy_with_prefix(64, &synth, "hv")?;
    let corpus = generate_unlabeled(300, 4, &synth)?;

    let cfg = GradconConfig { epochs: 6, ..Default::default() };
    let out = train_gradcon(&healthy, Some(&holdout), &cfg, 1)?;
    for e in &out.log {
        let held_out = e.holdout_batch_alignment.unwrap_or(f64::NAN);
        println!("epoch {:2}  recon {:.5}  alignment {:.3}  held-out {held_out:.3}", e.epoch, e.mean_recon, e.mean_grad_alignment);
    }

    let held = score_dataset(&out.model, &out.reference, &holdout, cfg.alpha)?;
    let scored = score_dataset(&out.model, &out.reference, corpus.view(), cfg.alpha)?;
    let truth = corpus.ground_truth();

    let mut scores: Vec<f64> = held.iter().map(|s| s.value).collect();
    let mut anomalous = vec![false; scores.len()];
    for (s, gt) in scored.iter().zip(truth) {
        if gt.severity > 0 {
            scores.push(s.value);
            anomalous.push(true);
        }
    }
    let severity: Vec<f64> = truth.iter().map(|g| f64::from(g.severity)).collect();
    let values: Vec<f64> = scored.iter().map(|s| s.value).collect();
    println!("AUROC healthy vs lesioned: {:.3}", roc_auc(&scores, &anomalous)?);
    println!("Spearman vs lesion count:  {:.3}", spearman(&values, &severity)?);
    Ok(())
}
