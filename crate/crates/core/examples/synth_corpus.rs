//! Generates a handful of healthy and lesioned images and writes a contact
//! sheet, one row per severity level.
//!
//! ```bash
//! cargo run -p sevcon --example synth_corpus -- /tmp/synth.pgm
//! ```

use sevcon::synthdata::{generate_healthy, generate_unlabeled, write_contact_sheet, SynthConfig};

fn main() -> sevcon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_corpus.pgm".into());
    let cfg = SynthConfig::default();
    let healthy = generate_healthy(8, &cfg)?;
    let corpus = generate_unlabeled(400, 4, &cfg)?;

    let mut rows: Vec<&sevcon::numerics::Tensor> = healthy.images().collect();
    for severity in 1..=4 {
        rows.extend(
            corpus
                .view()
                .samples
                .iter()
                .zip(corpus.ground_truth())
                .filter(|(_, gt)| gt.severity == severity)
                .take(8)
                .map(|(s, _)| &s.image),
        );
    }
    write_contact_sheet(std::path::Path::new(&out), &rows, 8)?;
    println!("wrote {} images to {out} (row 0 healthy, row k severity k)", rows.len());
    Ok(())
}
