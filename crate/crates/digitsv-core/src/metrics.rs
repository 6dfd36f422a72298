//! Verification metrics: DET sweep, EER, and minimum detection cost.
//!
//! The threshold sweep visits one point below every score, the midpoint of
//! each pair of adjacent distinct scores, and one point above every score.
//! At a threshold, a score is accepted when `score >= theta`, so
//! FAR = accepted non-targets / non-targets and FRR = rejected targets /
//! targets. FRR - FAR is weakly increasing along the sweep, which makes the
//! EER crossing unique; when no sweep point hits it exactly the crossing is
//! linearly interpolated between the neighbors, and exact ties resolve to the
//! smallest threshold.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Parallel score/label arrays; `true` marks a target trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("score set: scores and labels differ in length"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score set"));
        }
        let s = ScoreSet { scores, labels };
        if s.n_targets() == 0 || s.n_nontargets() == 0 {
            return Err(Error::contract("score set: both classes must be present"));
        }
        Ok(s)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_nontargets(&self) -> usize {
        self.len() - self.n_targets()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Sweep points in ascending threshold order, boundaries included.
pub fn det_points(s: &ScoreSet) -> Vec<DetPoint> {
    let n_t = s.n_targets() as f64;
    let n_n = s.n_nontargets() as f64;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).expect("finite scores"));

    let lo = s.scores[order[0]] - 1.0;
    let hi = s.scores[*order.last().expect("non-empty")] + 1.0;
    let mut thresholds = Vec::with_capacity(s.len() + 1);
    thresholds.push(lo);
    for w in order.windows(2) {
        let (a, b) = (s.scores[w[0]], s.scores[w[1]]);
        if a < b {
            thresholds.push(0.5 * (a + b));
        }
    }
    thresholds.push(hi);

    // walk the sorted scores once, counting how many of each class fall
    // below the current threshold
    let mut points = Vec::with_capacity(thresholds.len());
    let mut idx = 0;
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    for theta in thresholds {
        while idx < order.len() && s.scores[order[idx]] < theta {
            if s.labels[order[idx]] {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            idx += 1;
        }
        points.push(DetPoint {
            threshold: theta,
            far: (s.n_nontargets() - nontargets_below) as f64 / n_n,
            frr: targets_below as f64 / n_t,
        });
    }
    points
}

/// Crossing of FAR and FRR over the sweep: `(eer, threshold)`.
pub fn eer(s: &ScoreSet) -> Result<(f64, f64)> {
    Ok(eer_from_points(&det_points(s)))
}

pub(crate) fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    for (i, p) in points.iter().enumerate() {
        let diff = p.frr - p.far;
        if diff == 0.0 {
            return (p.far, p.threshold);
        }
        if diff > 0.0 {
            // sign change happened between i-1 and i; i >= 1 because the
            // lowest threshold has FRR 0, FAR 1
            let a = &points[i - 1];
            let b = p;
            let da = a.far - a.frr;
            let x = da / (da + (b.frr - b.far));
            let eer = a.frr + x * (b.frr - a.frr);
            let theta = a.threshold + x * (b.threshold - a.threshold);
            return (eer, theta);
        }
    }
    unreachable!("sweep ends above every score with FRR 1, FAR 0");
}

/// Minimum normalized detection cost over the sweep: `(min_dcf, threshold)`.
/// Ties resolve to the smaller threshold.
pub fn min_dcf(s: &ScoreSet, p_target: f64, c_miss: f64, c_fa: f64) -> Result<(f64, f64)> {
    if !(0.0 < p_target && p_target < 1.0) {
        return Err(Error::contract("min_dcf: p_target must lie in (0, 1)"));
    }
    if c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::contract("min_dcf: costs must be positive"));
    }
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best: Option<(f64, f64)> = None;
    for p in det_points(s) {
        let dcf = (c_miss * p_target * p.frr + c_fa * (1.0 - p_target) * p.far) / norm;
        if best.map_or(true, |(b, _)| dcf < b) {
            best = Some((dcf, p.threshold));
        }
    }
    Ok(best.expect("sweep is non-empty"))
}

pub const DEFAULT_P_TARGET: f64 = 0.01;
pub const DEFAULT_C_MISS: f64 = 1.0;
pub const DEFAULT_C_FA: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    // independent O(n^2) oracle: rebuild the threshold set and recount both
    // error rates with nested loops at every point
    fn naive_points(scores: &[f64], labels: &[bool]) -> Vec<DetPoint> {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut thresholds = vec![sorted[0] - 1.0];
        for i in 1..sorted.len() {
            if sorted[i - 1] < sorted[i] {
                thresholds.push(0.5 * (sorted[i - 1] + sorted[i]));
            }
        }
        thresholds.push(sorted[sorted.len() - 1] + 1.0);
        let n_t = labels.iter().filter(|&&l| l).count() as f64;
        let n_n = labels.len() as f64 - n_t;
        thresholds
            .into_iter()
            .map(|theta| {
                let mut fa = 0usize;
                let mut fr = 0usize;
                for (s, &l) in scores.iter().zip(labels) {
                    if l && *s < theta {
                        fr += 1;
                    }
                    if !l && *s >= theta {
                        fa += 1;
                    }
                }
                DetPoint { threshold: theta, far: fa as f64 / n_n, frr: fr as f64 / n_t }
            })
            .collect()
    }

    fn naive_eer(scores: &[f64], labels: &[bool]) -> (f64, f64) {
        let points = naive_points(scores, labels);
        for i in 0..points.len() {
            let d = points[i].frr - points[i].far;
            if d == 0.0 {
                return (points[i].far, points[i].threshold);
            }
            if d > 0.0 {
                let (a, b) = (points[i - 1], points[i]);
                let da = a.far - a.frr;
                let x = da / (da + (b.frr - b.far));
                return (a.frr + x * (b.frr - a.frr), a.threshold + x * (b.threshold - a.threshold));
            }
        }
        unreachable!()
    }

    fn naive_min_dcf(scores: &[f64], labels: &[bool], p: f64, cm: f64, cf: f64) -> (f64, f64) {
        let norm = (cm * p).min(cf * (1.0 - p));
        naive_points(scores, labels)
            .into_iter()
            .map(|pt| ((cm * p * pt.frr + cf * (1.0 - p) * pt.far) / norm, pt.threshold))
            .fold(None::<(f64, f64)>, |best, cand| match best {
                Some(b) if b.0 <= cand.0 => Some(b),
                _ => Some(cand),
            })
            .unwrap()
    }

    fn random_set(seed: u64, n: usize) -> ScoreSet {
        let mut r = rng::stream(seed, "metric-oracle");
        loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    // quantize some scores to force cross-class ties
                    let s = r.random_range(-3.0..3.0);
                    if r.random::<f64>() < 0.3 {
                        crate::math::round(s * 4.0) / 4.0
                    } else {
                        s
                    }
                })
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.4).collect();
            if let Ok(s) = ScoreSet::new(scores, labels) {
                return s;
            }
        }
    }

    #[test]
    fn perfect_separation_gives_zero_eer() {
        let s = ScoreSet::new(vec![0.9, 0.8, 0.1, 0.2], vec![true, true, false, false]).unwrap();
        let (e, theta) = eer(&s).unwrap();
        assert_eq!(e, 0.0);
        assert!(theta > 0.2 && theta < 0.8);
        let (d, _) = min_dcf(&s, DEFAULT_P_TARGET, DEFAULT_C_MISS, DEFAULT_C_FA).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn identical_scores_give_chance() {
        let s = ScoreSet::new(vec![0.5; 6], vec![true, false, true, false, true, false]).unwrap();
        let (e, _) = eer(&s).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
    }

    #[test]
    fn min_dcf_never_exceeds_one() {
        for seed in 0..50 {
            let s = random_set(seed, 40);
            let (d, _) = min_dcf(&s, DEFAULT_P_TARGET, DEFAULT_C_MISS, DEFAULT_C_FA).unwrap();
            assert!(d <= 1.0 + 1e-12, "seed {seed}: {d}");
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn sweep_matches_naive_oracle() {
        for seed in 0..100u64 {
            let n = 5 + (seed as usize * 7) % 496;
            let s = random_set(seed, n);
            let (e, te) = eer(&s).unwrap();
            let (ne, nte) = naive_eer(s.scores(), s.labels());
            assert!((e - ne).abs() <= 1e-12, "seed {seed}: eer {e} vs {ne}");
            assert!((te - nte).abs() <= 1e-12);
            let (d, td) = min_dcf(&s, DEFAULT_P_TARGET, DEFAULT_C_MISS, DEFAULT_C_FA).unwrap();
            let (nd, ntd) = naive_min_dcf(s.scores(), s.labels(), DEFAULT_P_TARGET, 1.0, 1.0);
            assert!((d - nd).abs() <= 1e-12, "seed {seed}: dcf {d} vs {nd}");
            assert!((td - ntd).abs() <= 1e-12);
        }
    }

    #[test]
    fn monotone_transforms_leave_metrics_unchanged() {
        let transforms: [fn(f64) -> f64; 3] = [
            |x| 2.0 * x + 1.0,
            |x| x * x * x,
            |x| crate::math::tanh(0.5 * x),
        ];
        for seed in 200..230u64 {
            let s = random_set(seed, 60);
            let (e0, _) = eer(&s).unwrap();
            let (d0, _) = min_dcf(&s, DEFAULT_P_TARGET, 1.0, 1.0).unwrap();
            for f in transforms {
                let mapped =
                    ScoreSet::new(s.scores().iter().map(|&x| f(x)).collect(), s.labels().to_vec()).unwrap();
                let (e1, _) = eer(&mapped).unwrap();
                let (d1, _) = min_dcf(&mapped, DEFAULT_P_TARGET, 1.0, 1.0).unwrap();
                assert!((e0 - e1).abs() <= 1e-12);
                assert!((d0 - d1).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        assert!(ScoreSet::new(vec![0.1, 0.2], vec![true, true]).is_err());
        assert!(ScoreSet::new(vec![0.1, 0.2], vec![false, false]).is_err());
        assert!(ScoreSet::new(vec![0.1], vec![true, false]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN, 0.2], vec![true, false]).is_err());
    }

    #[test]
    fn det_sweep_is_monotone() {
        for seed in 300..320u64 {
            let s = random_set(seed, 80);
            let points = det_points(&s);
            assert_eq!(points[0].far, 1.0);
            assert_eq!(points[0].frr, 0.0);
            let last = points.last().unwrap();
            assert_eq!(last.far, 0.0);
            assert_eq!(last.frr, 1.0);
            for w in points.windows(2) {
                assert!(w[1].threshold > w[0].threshold);
                assert!(w[1].far <= w[0].far);
                assert!(w[1].frr >= w[0].frr);
            }
        }
    }
}
