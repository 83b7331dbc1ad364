//! Severity pseudo-labels: rank the scores and cut the ranking into `n_bins`
//! equal-population bins.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng;
use crate::synthdata::{write_contact_sheet, Dataset};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityLabeling {
    pub n_bins: usize,
    /// Bin index per sample, in input order.
    pub labels: Vec<usize>,
    /// Sample indices by ascending score, ties by index.
    pub sorted_order: Vec<usize>,
    pub bin_sizes: Vec<usize>,
}

impl SeverityLabeling {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sample indices carrying `bin`, in ascending score order.
    pub fn members(&self, bin: usize) -> &[usize] {
        let start: usize = self.bin_sizes[..bin].iter().sum();
        &self.sorted_order[start..start + self.bin_sizes[bin]]
    }
}

/// Sorts the scores ascending and splits the ranking into `n_bins`
/// contiguous chunks. The first `len % n_bins` bins get one extra sample.
pub fn assign_severity_labels(scores: &[f64], n_bins: usize) -> Result<SeverityLabeling> {
    if n_bins == 0 || n_bins > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "n_bins must be in 1..={} (got {n_bins})",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "severity score {i} is not finite ({})",
            scores[i]
        )));
    }
    let mut sorted_order: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep index order
    sorted_order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let base = scores.len() / n_bins;
    let extra = scores.len() % n_bins;
    let bin_sizes: Vec<usize> = (0..n_bins).map(|b| base + usize::from(b < extra)).collect();
    let mut labels = vec![0; scores.len()];
    let mut rank = 0;
    for (bin, &size) in bin_sizes.iter().enumerate() {
        for &i in &sorted_order[rank..rank + size] {
            labels[i] = bin;
        }
        rank += size;
    }
    Ok(SeverityLabeling {
        n_bins,
        labels,
        sorted_order,
        bin_sizes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub index: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeBinReport {
    pub n_bins: usize,
    pub k: usize,
    pub seed: u64,
    pub low: Vec<ReportEntry>,
    pub high: Vec<ReportEntry>,
}

/// Samples `k` members of the lowest and of the highest bin.
pub fn extreme_bin_report(
    labeling: &SeverityLabeling,
    ids: &[String],
    k: usize,
    seed: u64,
) -> Result<ExtremeBinReport> {
    if ids.len() != labeling.len() {
        return Err(Error::shape("extreme_bin_report ids", labeling.len(), ids.len()));
    }
    let smallest = labeling.bin_sizes.iter().copied().min().unwrap_or(0);
    if k > smallest {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the smallest bin size {smallest}"
        )));
    }
    let mut r = rng(seed);
    let mut pick = |bin: usize| -> Vec<ReportEntry> {
        labeling
            .members(bin)
            .choose_multiple(&mut r, k)
            .map(|&index| ReportEntry {
                index,
                id: ids[index].clone(),
            })
            .collect()
    };
    let low = pick(0);
    let high = pick(labeling.n_bins - 1);
    Ok(ExtremeBinReport {
        n_bins: labeling.n_bins,
        k,
        seed,
        low,
        high,
    })
}

/// Writes `<stem>.json` and `<stem>.pgm` (low bin on the top row, high bin
/// below) into `dir`.
pub fn write_extreme_bin_report(
    dir: &Path,
    stem: &str,
    report: &ExtremeBinReport,
    data: &Dataset,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(report)?,
    )?;
    let images: Vec<_> = report
        .low
        .iter()
        .chain(&report.high)
        .map(|e| &data.samples[e.index].image)
        .collect();
    if !images.is_empty() {
        write_contact_sheet(&dir.join(format!("{stem}.pgm")), &images, report.k)?;
    }
    Ok(())
}

const LABEL_HEADER: &str = "sample_id,severity,bin_label";

pub fn write_label_csv(
    path: &Path,
    ids: &[String],
    scores: &[f64],
    labeling: &SeverityLabeling,
) -> Result<()> {
    if ids.len() != scores.len() || ids.len() != labeling.len() {
        return Err(Error::shape("label csv columns", ids.len(), scores.len()));
    }
    let mut out = format!("{LABEL_HEADER}\n");
    for ((id, s), l) in ids.iter().zip(scores).zip(&labeling.labels) {
        out.push_str(&format!("{id},{s},{l}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Rows of `(sample_id, severity, bin_label)`.
pub fn read_label_csv(path: &Path) -> Result<Vec<(String, f64, usize)>> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(LABEL_HEADER) {
        return Err(bad("unexpected label header".into()));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns: {line}")));
            }
            let s = cols[1].parse().map_err(|_| bad(format!("bad severity in {line}")))?;
            let l = cols[2].parse().map_err(|_| bad(format!("bad bin label in {line}")))?;
            Ok((cols[0].to_string(), s, l))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIX: [f64; 6] = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2];

    #[test]
    fn six_score_example() {
        let l = assign_severity_labels(&SIX, 3).unwrap();
        assert_eq!(l.labels, vec![2, 0, 1, 1, 2, 0]);
        assert_eq!(l.sorted_order, vec![1, 5, 3, 2, 4, 0]);
        assert_eq!(l.bin_sizes, vec![2, 2, 2]);
        assert_eq!(l.members(2), &[4, 0]);
    }

    #[test]
    fn degenerate_bin_counts() {
        let all = assign_severity_labels(&SIX, 6).unwrap();
        assert_eq!(all.labels, vec![5, 0, 3, 2, 4, 1]);
        let one = assign_severity_labels(&SIX, 1).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
        assert!(assign_severity_labels(&SIX, 0).is_err());
        assert!(assign_severity_labels(&SIX, 7).is_err());
        assert!(assign_severity_labels(&[0.1, f64::NAN], 1).is_err());
    }

    #[test]
    fn remainder_goes_low_and_ties_by_index() {
        let l = assign_severity_labels(&[1.0, 1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(l.bin_sizes, vec![3, 2]);
        assert_eq!(l.labels, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn report_examples() {
        let l = assign_severity_labels(&SIX, 3).unwrap();
        let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let r = extreme_bin_report(&l, &ids, 1, 4).unwrap();
        assert!([1, 5].contains(&r.low[0].index));
        assert!([0, 4].contains(&r.high[0].index));
        assert_eq!(r, extreme_bin_report(&l, &ids, 1, 4).unwrap());
        assert!(extreme_bin_report(&l, &ids, 3, 4).is_err());
    }

    #[test]
    fn label_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let l = assign_severity_labels(&SIX, 3).unwrap();
        let ids: Vec<String> = (0..6).map(|i| format!("u-{i}")).collect();
        write_label_csv(&path, &ids, &SIX, &l).unwrap();
        let rows = read_label_csv(&path).unwrap();
        for (k, (id, s, b)) in rows.iter().enumerate() {
            assert_eq!((id, *s, *b), (&ids[k], SIX[k], l.labels[k]));
        }
    }
}
