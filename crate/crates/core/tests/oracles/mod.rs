//! Brute-force reference implementations used as test oracles. They follow
//! the metric definitions literally and share no code with the library.
#![allow(dead_code)]

/// 1-based interval: one plus the number of cut points strictly below `t`,
/// capped at the interval count.
pub fn interval_of(t: f64, cuts: &[f64]) -> usize {
    (1 + cuts.iter().filter(|&&c| c < t).count()).min(cuts.len() + 1)
}

/// Enumerates every ordered pair.
pub fn cindex(curves: &[Vec<f64>], cuts: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0usize);
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        let k = interval_of(times[i], cuts) - 1;
        for j in 0..times.len() {
            if times[i] < times[j] {
                den += 1;
                let (si, sj) = (curves[i][k], curves[j][k]);
                if si < sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// Mann–Whitney probability by counting positive/negative pairs.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den as f64
}

/// Mean over positives of the precision among everything scored at least
/// as high as that positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut n_pos = 0;
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        n_pos += 1;
        let above: Vec<usize> = (0..scores.len())
            .filter(|&j| scores[j] >= scores[i])
            .collect();
        let hits = above.iter().filter(|&&j| labels[j] == 1).count();
        total += hits as f64 / above.len() as f64;
    }
    total / n_pos as f64
}

/// `2|P∩T| / (|P|+|T|)` with both-empty = 1.
pub fn dice(p: &[bool], t: &[bool]) -> f64 {
    let inter = p.iter().zip(t).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|x| **x).count() + t.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
