//! Turns continuous severity scores into `N` equal-frequency pseudo-labels
//! and samples the least and most severe bins for inspection.
//!
//! ```bash
//! cargo run -p sevcon --example severity_binning -- 10
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sevcon::labeling::{assign_severity_labels, extreme_bin_report};

fn main() -> sevcon::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_bins: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);

    // heavy-tailed scores with a block of exact ties
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut scores: Vec<f64> = (0..997).map(|_| rng.gen::<f64>().powi(3)).collect();
    scores.extend([0.5; 3]);
    let ids: Vec<String> = (0..scores.len()).map(|i| format!("s{i:04}")).collect();

    let labeling = assign_severity_labels(&scores, n_bins)?;
    println!("{} samples in {} bins, sizes {:?}", labeling.len(), labeling.n_bins, labeling.bin_sizes);
    for bin in [0, n_bins - 1] {
        let members = labeling.members(bin);
        let (lo, hi) = members
            .iter()
            .map(|&i| scores[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        println!("bin {bin:3}: scores in [{lo:.4}, {hi:.4}]");
    }

    let report = extreme_bin_report(&labeling, &ids, 5, 11)?;
    let names = |e: &[sevcon::labeling::ReportEntry]| e.iter().map(|e| e.id.clone()).collect::<Vec<_>>().join(" ");
    println!("lowest bin sample:  {}", names(&report.low));
    println!("highest bin sample: {}", names(&report.high));
    Ok(())
}
