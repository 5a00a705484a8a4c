//! Passive-client detections: fake-batch gradient scoring, label-grouped
//! gradient-distance scoring, and gradient-norm distribution profiling with
//! a two-sample Kolmogorov-Smirnov comparison.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Undetected,
    Detected,
}

/// Fake-batch detector state. Decision flips exactly when the mean of the
/// trailing `window` scores drops below `threshold`, and never reverts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgState {
    pub fake_probability: f64,
    pub warmup_rounds: usize,
    pub threshold: f64,
    pub window: usize,
    pub score_history: Vec<f64>,
    pub decision: Decision,
    pub detected_at: Option<usize>,
}

impl SgState {
    pub fn new(
        fake_probability: f64,
        warmup_rounds: usize,
        threshold: f64,
        window: usize,
    ) -> SgState {
        SgState {
            fake_probability,
            warmup_rounds,
            threshold,
            window,
            score_history: Vec::new(),
            decision: Decision::Undetected,
            detected_at: None,
        }
    }

    pub fn trailing_mean(&self) -> Option<f64> {
        if self.score_history.len() < self.window {
            return None;
        }
        let tail = &self.score_history[self.score_history.len() - self.window..];
        Some(tail.iter().sum::<f64>() / self.window as f64)
    }
}

/// Running-average detector state for the label-grouped gradient-distance
/// score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsState {
    pub threshold: f64,
    pub running_scores: Vec<f64>,
    pub decision: Decision,
    pub detected_at: Option<usize>,
}

impl GsState {
    pub fn new(threshold: f64) -> GsState {
        GsState {
            threshold,
            running_scores: Vec::new(),
            decision: Decision::Undetected,
            detected_at: None,
        }
    }

    pub fn running_mean(&self) -> Option<f64> {
        if self.running_scores.is_empty() {
            return None;
        }
        Some(self.running_scores.iter().sum::<f64>() / self.running_scores.len() as f64)
    }

    pub fn update(&mut self, score: f64, round: usize) {
        self.running_scores.push(score);
        if self.decision == Decision::Undetected {
            if let Some(mean) = self.running_mean() {
                if mean < self.threshold {
                    self.decision = Decision::Detected;
                    self.detected_at = Some(round);
                }
            }
        }
    }
}

/// Replace each label with a uniform draw over the other C-1 classes.
pub fn sg_fake_batch(
    labels: &[usize],
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::contract("need at least 2 classes for fake batches"));
    }
    Ok(labels
        .iter()
        .map(|&y| {
            let draw = rng.gen_range(0..num_classes - 1);
            if draw >= y {
                draw + 1
            } else {
                draw
            }
        })
        .collect())
}

fn mean_vec(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn angle(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    let cos = (u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0);
    cos.acos()
}

fn distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Compare fake-batch gradients against a seeded random halving of the
/// regular-gradient pool; 1 means "fake batches behave very differently"
/// (honest-looking), 0.5 means indistinguishable.
pub fn sg_score(fake: &[Vec<f64>], regular: &[Vec<f64>], rng: &mut impl Rng) -> Result<f64> {
    if fake.is_empty() || regular.len() < 2 {
        return Err(Error::contract(
            "sg_score needs fake grads and >=2 regular grads",
        ));
    }
    let f_mean = mean_vec(fake);
    let r_mean = mean_vec(regular);
    let mut idx: Vec<usize> = (0..regular.len()).collect();
    idx.shuffle(rng);
    let half = regular.len() / 2;
    let r1: Vec<Vec<f64>> = idx[..half].iter().map(|&i| regular[i].clone()).collect();
    let r2: Vec<Vec<f64>> = idx[half..].iter().map(|&i| regular[i].clone()).collect();
    let r1_mean = mean_vec(&r1);
    let r2_mean = mean_vec(&r2);

    let a_f = angle(&f_mean, &r_mean);
    let a_r = angle(&r1_mean, &r2_mean);
    let d_f = distance(&f_mean, &r_mean);
    let d_r = distance(&r1_mean, &r2_mean);
    let raw = (a_f * d_f - a_r * d_r) / (a_f * d_f + a_r * d_r + 1e-12);
    Ok((raw + 1.0) / 2.0)
}

/// Append a score and update the trailing-window decision.
pub fn sg_update(state: &mut SgState, score: f64, round: usize) {
    state.score_history.push(score);
    if state.decision == Decision::Undetected {
        if let Some(mean) = state.trailing_mean() {
            if mean < state.threshold {
                state.decision = Decision::Detected;
                state.detected_at = Some(round);
            }
        }
    }
}

/// Mean pairwise gradient distance across different-label pairs vs
/// same-label pairs, mapped to [0,1]. Returns None when the batch has fewer
/// than 2 samples or a single distinct label (round skipped).
pub fn gs_score(grads: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    if grads.len() < 2 || grads.len() != labels.len() {
        return None;
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return None;
    }
    let mut d_same = 0.0;
    let mut n_same = 0usize;
    let mut d_diff = 0.0;
    let mut n_diff = 0usize;
    for i in 0..grads.len() {
        for j in (i + 1)..grads.len() {
            let d = distance(&grads[i], &grads[j]);
            if labels[i] == labels[j] {
                d_same += d;
                n_same += 1;
            } else {
                d_diff += d;
                n_diff += 1;
            }
        }
    }
    let d_same = if n_same > 0 {
        d_same / n_same as f64
    } else {
        0.0
    };
    let d_diff = d_diff / n_diff as f64;
    let raw = (d_diff - d_same) / (d_diff + d_same + 1e-12);
    Some((raw + 1.0) / 2.0)
}

/// Per-round L2 norms of per-sample embedding gradients plus a summary
/// histogram.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GradNormProfile {
    pub norms: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GradNormProfile {
    pub fn record_round(&mut self, grads: &Tensor) {
        for i in 0..grads.rows() {
            self.norms.push(norm(grads.row(i)));
        }
    }

    pub fn record_norms(&mut self, norms: &[f64]) {
        self.norms.extend_from_slice(norms);
    }

    pub fn finalize_histogram(&mut self, bins: usize) {
        if self.norms.is_empty() || bins == 0 {
            return;
        }
        let max = self.norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let width = ((max - min) / bins as f64).max(1e-12);
        self.bin_edges = (0..=bins).map(|i| min + width * i as f64).collect();
        self.counts = vec![0; bins];
        for &v in &self.norms {
            let b = (((v - min) / width) as usize).min(bins - 1);
            self.counts[b] += 1;
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic, in [0,1].
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("ks needs non-empty samples"));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (mut i, mut j) = (0usize, 0usize);
    let mut max_diff = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        let diff = (i as f64 / xa.len() as f64 - j as f64 / xb.len() as f64).abs();
        max_diff = max_diff.max(diff);
    }
    Ok(max_diff)
}

/// Asymptotic two-sample critical value c(alpha) * sqrt((n+m)/(n*m)).
pub fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n * m) as f64).sqrt()
}

/// Profile comparison for the norm-distribution detector.
pub fn compare_profiles(baseline: &GradNormProfile, live: &GradNormProfile) -> Result<f64> {
    if baseline.norms.len() < 100 || live.norms.len() < 100 {
        return Err(Error::contract("profiles need at least 100 norms each"));
    }
    ks_statistic(&baseline.norms, &live.norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::component_rng;

    #[test]
    fn fake_batch_binary_forces_complement() {
        let mut rng = component_rng(1, "sg", 0);
        let out = sg_fake_batch(&[0, 1, 0], 2, &mut rng).unwrap();
        assert_eq!(out, vec![1, 0, 1]);
    }

    #[test]
    fn fake_batch_never_matches_input() {
        let mut rng = component_rng(2, "sg", 0);
        let labels: Vec<usize> = (0..500).map(|i| i % 7).collect();
        let out = sg_fake_batch(&labels, 7, &mut rng).unwrap();
        assert!(labels.iter().zip(&out).all(|(a, b)| a != b));
        assert!(sg_fake_batch(&[0], 1, &mut rng).is_err());
    }

    #[test]
    fn fake_batch_uniform_over_wrong_classes() {
        let mut rng = component_rng(3, "sg", 0);
        let labels = vec![0usize; 10_000];
        let out = sg_fake_batch(&labels, 10, &mut rng).unwrap();
        let mut counts = vec![0usize; 10];
        for y in out {
            counts[y] += 1;
        }
        assert_eq!(counts[0], 0);
        // chi-square over 9 wrong classes at the 0.01 level (8 dof -> 20.09)
        let expected = 10_000.0 / 9.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.09, "chi2 = {}", chi2);
    }

    #[test]
    fn sg_score_reversed_fake_gives_one() {
        let mut rng = component_rng(4, "sg", 0);
        let r = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ];
        let f = vec![vec![-1.0, 0.0]];
        let s = sg_score(&f, &r, &mut rng).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{}", s);
    }

    #[test]
    fn sg_score_identical_means_gives_half() {
        let mut rng = component_rng(5, "sg", 0);
        let r = vec![vec![0.5, 0.5]; 4];
        let f = vec![vec![0.5, 0.5]; 2];
        let s = sg_score(&f, &r, &mut rng).unwrap();
        assert!((s - 0.5).abs() < 1e-9, "{}", s);
    }

    #[test]
    fn sg_score_rehalving_spread_is_small() {
        let mut rng = component_rng(6, "sg", 0);
        // structured regular pool plus distinct fake direction
        let regular: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 40.0;
                vec![1.0 + 0.1 * (t - 0.5), 0.2 * (0.5 - t)]
            })
            .collect();
        let fake = vec![vec![-1.0, 0.3]; 8];
        let scores: Vec<f64> = (0..20)
            .map(|_| sg_score(&fake, &regular, &mut rng).unwrap())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max - min < 0.05, "spread {}", max - min);
    }

    #[test]
    fn sg_scores_invariant_under_rotation() {
        let mut r1 = component_rng(7, "sg", 0);
        let mut r2 = component_rng(7, "sg", 0);
        let regular = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![1.1, -0.1],
            vec![1.0, 0.05],
        ];
        let fake = vec![vec![-0.8, 0.4]];
        let rotate = |v: &Vec<f64>| -> Vec<f64> {
            let (c, s) = (0.28f64, 0.96f64);
            vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]
        };
        let s1 = sg_score(&fake, &regular, &mut r1).unwrap();
        let fake_r: Vec<Vec<f64>> = fake.iter().map(rotate).collect();
        let reg_r: Vec<Vec<f64>> = regular.iter().map(rotate).collect();
        let s2 = sg_score(&fake_r, &reg_r, &mut r2).unwrap();
        assert!((s1 - s2).abs() < 1e-9);
    }

    #[test]
    fn sg_update_threshold_behavior() {
        let mut st = SgState::new(0.1, 20, 0.9, 10);
        for r in 0..10 {
            sg_update(&mut st, 1.0, r);
        }
        assert_eq!(st.decision, Decision::Undetected);

        let mut st = SgState::new(0.1, 20, 0.9, 10);
        for r in 0..10 {
            sg_update(&mut st, 0.5, r);
        }
        assert_eq!(st.decision, Decision::Detected);

        // boundary: trailing mean 0.89 < 0.9 detects (strict less-than)
        let mut st = SgState::new(0.1, 20, 0.9, 10);
        for r in 0..9 {
            sg_update(&mut st, 0.9, r);
        }
        sg_update(&mut st, 0.8, 9);
        assert_eq!(st.decision, Decision::Detected);
    }

    #[test]
    fn detection_is_monotone() {
        let mut st = SgState::new(0.1, 0, 0.9, 2);
        sg_update(&mut st, 0.0, 0);
        sg_update(&mut st, 0.0, 1);
        assert_eq!(st.decision, Decision::Detected);
        for r in 2..30 {
            sg_update(&mut st, 1.0, r);
        }
        assert_eq!(st.decision, Decision::Detected);
        assert_eq!(st.detected_at, Some(1));
    }

    #[test]
    fn gs_score_separated_labels() {
        // same-label identical, different-label at distance 1
        let grads = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ];
        let labels = vec![0, 0, 1, 1];
        let s = gs_score(&grads, &labels).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "s = {}", s);
    }

    #[test]
    fn gs_score_identical_gradients_half() {
        let grads = vec![vec![0.3, -0.7]; 4];
        let labels = vec![0, 1, 0, 1];
        let s = gs_score(&grads, &labels).unwrap();
        assert!((s - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gs_skips_single_label_batches() {
        let grads = vec![vec![0.1], vec![0.2]];
        assert!(gs_score(&grads, &[1, 1]).is_none());
        assert!(gs_score(&grads[..1], &[0]).is_none());
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = vec![0.1, 0.5, 0.9, 1.4];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        let b = vec![10.0, 11.0, 12.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn ks_against_shifted_sample() {
        let mut rng = component_rng(8, "ks", 0);
        let a: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.gen_range(0.5..1.5)).collect();
        let ks = ks_statistic(&a, &b).unwrap();
        assert!(ks > ks_critical(0.01, 500, 500), "ks = {}", ks);
        let c: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ks2 = ks_statistic(&a, &c).unwrap();
        assert!(ks2 < ks_critical(0.01, 500, 500), "ks2 = {}", ks2);
    }

    #[test]
    fn profile_contract() {
        let mut p1 = GradNormProfile::default();
        let mut p2 = GradNormProfile::default();
        p1.record_norms(&vec![1.0; 50]);
        p2.record_norms(&vec![1.0; 50]);
        assert!(compare_profiles(&p1, &p2).is_err());
        p1.record_norms(&vec![1.0; 60]);
        p2.record_norms(&vec![1.0; 60]);
        assert_eq!(compare_profiles(&p1, &p2).unwrap(), 0.0);
        p1.finalize_histogram(10);
        assert_eq!(p1.counts.iter().sum::<usize>(), p1.norms.len());
    }
}
