use crate::error::{Error, Result};

pub fn accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::shape("accuracy", labels.len(), preds.len()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Harmonic mean of precision and recall; 0 when both are 0 (including the
/// case with no positive predictions and no positive labels).
pub fn f1(preds: &[bool], labels: &[bool]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape("f1", labels.len(), preds.len()));
    }
    let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p && l).count() as f64;
    let predicted = preds.iter().filter(|&&p| p).count() as f64;
    let actual = labels.iter().filter(|&&l| l).count() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Area under the ROC curve in its Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("roc_auc: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "roc_auc needs both positive and negative labels".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the U statistic, kept integral: 2 per win, 1 per tie
    let mut doubled_u: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group = &idx[i..j];
        let pos_in_group = group.iter().filter(|&&k| labels[k]).count() as u64;
        let neg_in_group = group.len() as u64 - pos_in_group;
        doubled_u += pos_in_group * (2 * negatives_below + neg_in_group);
        negatives_below += neg_in_group;
        i = j;
    }
    Ok(doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman", a.len(), b.len()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(pearson(&ra, &rb))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0 + 1.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
