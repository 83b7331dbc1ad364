//! Frozen-backbone linear probing and classification metrics.

mod metrics;
mod probe;
mod transfer;

pub use metrics::{accuracy, f1, roc_auc, spearman};
pub use probe::{
    evaluate, extract_features, probe_task_seed, table_row, train_head_on_features, train_probe, train_probe_set, write_table,
    BinaryMetrics, FeatureScaler, LinearProbe, ProbeConfig, ProbeResult, ProbeSet, ProbeTask, TABLE_COLUMNS,
    TABLE_HEADER,
};
pub use transfer::{HeadDims, Pretraining, TransferSetup};
