//! Composite Dice, AUC / average precision and concordance.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::assign_interval;
use crate::volume::Grid3;

/// Whole tumor `{1,2,3}`, tumor core `{1,3}` and enhancing tumor `{3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeMasks {
    pub wt: Grid3<bool>,
    pub tc: Grid3<bool>,
    pub et: Grid3<bool>,
}

pub fn composite_masks(label: &Grid3<u8>) -> Result<CompositeMasks> {
    if let Some(&bad) = label.as_slice().iter().find(|&&v| v > 3) {
        return Err(Error::InvalidLabel(format!(
            "label value {bad} outside 0..=3"
        )));
    }
    Ok(CompositeMasks {
        wt: label.map(|v| v != 0),
        tc: label.map(|v| v == 1 || v == 3),
        et: label.map(|v| v == 3),
    })
}

/// `2|P∩T| / (|P|+|T|)`, and 1 when both masks are empty.
pub fn dice(pred: &Grid3<bool>, truth: &Grid3<bool>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "mask shapes {:?} and {:?} differ",
            pred.shape(),
            truth.shape()
        )));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.as_slice().iter().zip(truth.as_slice()) {
        p += usize::from(a);
        t += usize::from(b);
        inter += usize::from(a && b);
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Dice of the three composite regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeDice {
    pub dice_wt: f64,
    pub dice_tc: f64,
    pub dice_et: f64,
}

pub fn composite_dice(pred: &Grid3<u8>, truth: &Grid3<u8>) -> Result<CompositeDice> {
    let p = composite_masks(pred)?;
    let t = composite_masks(truth)?;
    Ok(CompositeDice {
        dice_wt: dice(&p.wt, &t.wt)?,
        dice_tc: dice(&p.tc, &t.tc)?,
        dice_et: dice(&p.et, &t.et)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub auc: f64,
    pub ap: f64,
}

/// AUC from mid-ranks (ties count one half) and non-interpolated average
/// precision, evaluated at each distinct score threshold.
pub fn binary_ranking_metrics(scores: &[f64], labels: &[u8]) -> Result<RankingMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidLabel(format!("binary label {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::OutOfRange("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ranking metrics need both classes".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // ascending tie groups give mid-ranks for the Mann–Whitney statistic
    let mut rank_sum_pos = 0.0;
    let groups = tie_groups(&order, scores);
    let mut start = 0usize;
    for g in &groups {
        let mid = (start + 1 + start + g.len()) as f64 / 2.0;
        rank_sum_pos += mid * g.iter().filter(|&&i| labels[i] == 1).count() as f64;
        start += g.len();
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    let auc = u / (n_pos as f64 * n_neg as f64);

    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for g in groups.iter().rev() {
        let pos = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += pos;
        fp += g.len() - pos;
        if pos > 0 {
            ap += pos as f64 / n_pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(RankingMetrics { auc, ap })
}

fn tie_groups(sorted: &[usize], scores: &[f64]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in sorted {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Binary indexed tree of counts over `n` ranks.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn validate_survival_inputs(n: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != n || events.len() != n {
        return Err(Error::Dimension(format!(
            "{n} predictions, {} times and {} events",
            times.len(),
            events.len()
        )));
    }
    if times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::OutOfRange(
            "survival times must be positive and finite".into(),
        ));
    }
    Ok(())
}

/// Time-dependent concordance.
///
/// A pair `(i, j)` is comparable when `T_i < T_j` and `i` had the event; it
/// is concordant when `S_i(t_{k(i)}) < S_j(t_{k(i)})`, and a tie in predicted
/// survival counts one half.
pub fn concordance_index(
    curves: &[Vec<f64>],
    cut_points: &[f64],
    times: &[f64],
    events: &[bool],
) -> Result<f64> {
    let n = curves.len();
    validate_survival_inputs(n, times, events)?;
    let k = cut_points.len() + 1;
    if let Some(c) = curves.iter().find(|c| c.len() != k) {
        return Err(Error::Dimension(format!(
            "survival curve of length {}, expected {k}",
            c.len()
        )));
    }
    if curves.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::OutOfRange("NaN in survival curve".into()));
    }
    let interval: Vec<usize> = times
        .iter()
        .map(|&t| assign_interval(t, cut_points) - 1)
        .collect();

    // per interval column: sorted distinct values for rank lookup
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut v: Vec<f64> = curves.iter().map(|s| s[c]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        })
        .collect();
    let rank = |c: usize, x: f64| columns[c].partition_point(|&v| v < x);
    let mut trees: Vec<Fenwick> = columns.iter().map(|c| Fenwick::new(c.len())).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut inserted = 0u64;
    let mut g = 0;
    while g < n {
        let mut end = g;
        while end < n && times[order[end]] == times[order[g]] {
            end += 1;
        }
        for &i in &order[g..end] {
            if !events[i] {
                continue;
            }
            let c = interval[i];
            let r = rank(c, curves[i][c]);
            let below = trees[c].below(r);
            let at_or_below = trees[c].below(r + 1);
            comparable += inserted;
            tied += at_or_below - below;
            concordant += inserted - at_or_below;
        }
        for &j in &order[g..end] {
            for (c, tree) in trees.iter_mut().enumerate() {
                tree.add(rank(c, curves[j][c]));
            }
        }
        inserted += (end - g) as u64;
        g = end;
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

/// Harrell's concordance for a scalar risk (higher risk, earlier event).
pub fn harrell_c_index(risk: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    validate_survival_inputs(risk.len(), times, events)?;
    let (mut num, mut den) = (0.0, 0u64);
    for i in 0..risk.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risk.len() {
            if times[i] < times[j] {
                den += 1;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(num / den as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, num_traits::Float::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[bool]) -> Grid3<bool> {
        Grid3::from_vec((v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn composite_counts() {
        let label = Grid3::from_vec((5, 1, 1), vec![0, 1, 2, 3, 0]).unwrap();
        let m = composite_masks(&label).unwrap();
        let count = |g: &Grid3<bool>| g.as_slice().iter().filter(|&&b| b).count();
        assert_eq!((count(&m.wt), count(&m.tc), count(&m.et)), (3, 2, 1));
        assert!(composite_masks(&Grid3::from_vec((1, 1, 1), vec![4]).unwrap()).is_err());
        let empty = composite_masks(&Grid3::filled((2, 2, 2), 0)).unwrap();
        assert!(empty.wt.as_slice().iter().all(|&b| !b));
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[true, true, true, true, false, false]);
        let b = mask(&[true, true, false, false, true, true]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(
            dice(&mask(&[true, false]), &mask(&[false, true])).unwrap(),
            0.0
        );
        assert_eq!(
            dice(&mask(&[false, false]), &mask(&[false, false])).unwrap(),
            1.0
        );
        assert!(dice(&mask(&[false]), &mask(&[false, false])).is_err());
    }

    #[test]
    fn ranking_examples() {
        let r = binary_ranking_metrics(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-12);
        assert!((r.ap - 5.0 / 6.0).abs() < 1e-12);
        let sep = binary_ranking_metrics(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!((sep.auc, sep.ap), (1.0, 1.0));
        assert_eq!(
            binary_ranking_metrics(&[0.5; 4], &[0, 1, 1, 0])
                .unwrap()
                .auc,
            0.5
        );
        assert!(matches!(
            binary_ranking_metrics(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn concordance_perfect_and_tied() {
        let cuts = [2.0, 4.0];
        let times = [1.0, 3.0, 5.0];
        let events = [true, true, false];
        let good = vec![
            vec![0.2, 0.1, 0.0],
            vec![0.9, 0.5, 0.3],
            vec![0.95, 0.9, 0.8],
        ];
        assert_eq!(
            concordance_index(&good, &cuts, &times, &events).unwrap(),
            1.0
        );
        let same = vec![vec![0.9, 0.5, 0.2]; 3];
        assert_eq!(
            concordance_index(&same, &cuts, &times, &events).unwrap(),
            0.5
        );
        assert!(concordance_index(&same, &cuts, &times, &[false; 3]).is_err());
    }

    #[test]
    fn harrell_agrees_on_simple_case() {
        let c = harrell_c_index(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(c, 1.0);
    }
}
