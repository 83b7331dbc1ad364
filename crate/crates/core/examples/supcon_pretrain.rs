//! Supervised contrastive pretraining of the backbone on severity
//! pseudo-labels, next to the label-free SimCLR variant.
//!
//! ```bash
//! cargo run -p sevcon --example supcon_pretrain
//! ```

use sevcon::contrastive::{pretrain, simclr_mode, supcon_loss, AugmentationPolicy, Normalization, SupConConfig};
use sevcon::labeling::assign_severity_labels;
use sevcon::models::{build_backbone, build_projection_head, BackboneConfig};
use sevcon::numerics::Tensor;
use sevcon::synthdata::{generate_unlabeled, SynthConfig};

fn main() -> sevcon::Result<()> {
    // two pairs of identical embeddings, orthogonal across pairs
    let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])?;
    let expected = (std::f64::consts::E + 2.0).ln() - 1.0;
    println!("hand-sized batch: loss {:.5}, closed form {expected:.5}", supcon_loss(&z, &[0, 0, 1, 1], 1.0)?);

    let corpus = generate_unlabeled(256, 4, &SynthConfig::default())?;
    let data = corpus.view();
    // lesion counts stand in for a learned severity score here
    let severity: Vec<f64> = corpus.ground_truth().iter().map(|g| f64::from(g.severity)).collect();
    let labels = assign_severity_labels(&severity, 8)?.labels;

    let policy = AugmentationPolicy { normalization: Normalization::fit(data)?, ..Default::default() };
    let cfg = SupConConfig { epochs: 3, batch_size: 32, ..Default::default() };
    let bcfg = BackboneConfig::default();
    for mode in ["severity", "simclr"] {
        let backbone = build_backbone(&bcfg, 1)?;
        let mut head = build_projection_head(bcfg.embedding_dim, 64, 32, bcfg.bias, 2)?;
        let out = if mode == "severity" {
            pretrain(backbone, &mut head, data, &labels, &policy, &cfg, 3)?
        } else {
            simclr_mode(backbone, &mut head, data, &policy, &cfg, 3)?
        };
        let curve: Vec<String> = out.loss_curve.iter().map(|v| format!("{v:.4}")).collect();
        println!("{mode:8} loss per epoch: {}", curve.join(" "));
    }
    Ok(())
}
