//! Runs every stage into a run directory and prints the report tables.
//! Without a config file a small corpus is used so the run takes seconds;
//! pass a TOML file (keys as in the README) for a full-size run.
//!
//! ```bash
//! cargo run -p sevcon --example full_pipeline -- /tmp/run [config.toml]
//! ```

use std::fs;

use sevcon::cli::{ExperimentConfig, Run};

const SMALL: &str = r#"
[data]
n_healthy = 96
n_healthy_holdout = 32
n_unlabeled = 160
n_train = 80
n_test_per_biomarker = 20
n_multilabel_test = 40

[gradcon]
epochs = 3

[labels]
n_bins = 10
bin_sweep = [5, 10, 20]

[pretrain]
epochs = 2
batch_size = 32

[probe]
epochs = 10

[baselines.classifier]
epochs = 2
"#;

fn main() -> sevcon::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "run".into());
    let config = match args.next() {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::from_toml(SMALL)?,
    };
    let run = Run::new(&dir, config, true)?;
    run.run_all()?;
    for table in ["table1.csv", "table2.csv"] {
        println!("{table}\n{}", fs::read_to_string(run.path("report").join(table))?);
    }
    println!("{}", fs::read_to_string(run.path("report/gradcon_check.json"))?);
    Ok(())
}
