//! Per-epoch metrics output.
//!
//! `metrics.csv` has the fixed header [`CSV_HEADER`]:
//!
//! | column | meaning |
//! |---|---|
//! | `epoch` | 1-based epoch index |
//! | `step` | optimizer steps taken so far |
//! | `j_train` | objective on the training set (mean loss plus regularizer) |
//! | `train_error` | training error rate |
//! | `j_test`, `test_error` | the same on the test set, empty when not evaluated |
//! | `nonzero_fraction` | nonzero discrete weights over all discrete weights, empty without discrete layers |
//! | `layer_nonzero` | the same per discrete layer, `;`-separated |
//! | `changed` | discrete entries changed during the epoch |
//!
//! Numbers use the shortest representation that round-trips. Wall-clock time
//! is omitted so reruns are byte-identical; `metrics.json` carries it as
//! `wall_ms`.

use std::path::Path;

use anyhow::Context;
use msa_core::msa::MetricsRecord;

pub const CSV_HEADER: [&str; 9] = [
    "epoch",
    "step",
    "j_train",
    "train_error",
    "j_test",
    "test_error",
    "nonzero_fraction",
    "layer_nonzero",
    "changed",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn csv_row(r: &MetricsRecord) -> Vec<String> {
    vec![
        r.epoch.to_string(),
        r.step.to_string(),
        r.train_objective.to_string(),
        r.train_error.to_string(),
        opt(r.test_objective),
        opt(r.test_error),
        opt(r.nonzero_fraction),
        r.layer_nonzero
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(";"),
        r.changed.to_string(),
    ]
}

pub fn to_csv(records: &[MetricsRecord]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record(csv_row(r))?;
    }
    w.into_inner().context("flushing csv")
}

pub fn write_csv(records: &[MetricsRecord], path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, to_csv(records)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(records: &[MetricsRecord], path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
