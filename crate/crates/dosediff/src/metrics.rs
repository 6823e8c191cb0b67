//! Evaluation metrics: body-masked mean absolute dose error, DVH
//! curves and summary statistics, and the homogeneity index.
//!
//! Conventions (the literature leaves these rule-sensitive, so they
//! are pinned here and used consistently by every caller):
//! - `D_x` is the minimum dose received by the hottest x% of a
//!   structure, computed as the `(1 - x/100)` quantile with linear
//!   interpolation between order statistics (inclusive).
//! - targets report D1/D95/D99; organs at risk report mean dose and
//!   the near-max D1.
//! - the DVH score is the mean absolute difference of those summary
//!   metrics between prediction and reference, averaged over
//!   structures.
//! - the homogeneity index is `(D2 - D98) / D50` over the target.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureKind {
    Target,
    Oar,
}

/// A named evaluation structure: a binary mask plus its kind.
#[derive(Debug, Clone, Copy)]
pub struct Structure<'a> {
    pub name: &'a str,
    pub mask: &'a [f64],
    pub kind: StructureKind,
}

fn masked_values(dose: &[f64], mask: &[f64], what: &'static str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = dose
        .iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m > 0.0)
        .map(|(d, _)| *d)
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyMask { what });
    }
    Ok(vals)
}

/// Quantile by linear interpolation between order statistics
/// (inclusive): index `(n - 1) * p` into the ascending sort.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Minimum dose received by the hottest `x` percent of the masked
/// voxels.
pub fn dose_at_hottest(dose: &[f64], mask: &[f64], x: f64) -> Result<f64> {
    let mut vals = masked_values(dose, mask, "dose_at_hottest")?;
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(quantile_sorted(&vals, 1.0 - x / 100.0))
}

/// Mean absolute voxel error over the body mask.
pub fn dose_score(pred: &[f64], gt: &[f64], body: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != body.len() {
        return Err(Error::ShapeMismatch {
            op: "dose_score",
            lhs: vec![pred.len()],
            rhs: vec![gt.len().min(body.len())],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if body[i] > 0.0 {
            total += (pred[i] - gt[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask { what: "dose_score" });
    }
    Ok(total / count as f64)
}

/// Cumulative dose-volume histogram: fraction of the structure
/// receiving at least each threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhCurve {
    pub thresholds: Vec<f64>,
    pub volume_fraction: Vec<f64>,
}

pub const DVH_LEVELS: usize = 256;

/// DVH over 256 uniform thresholds from 0 to the dose maximum.
pub fn dvh_curve(dose: &[f64], mask: &[f64]) -> Result<DvhCurve> {
    let vals = masked_values(dose, mask, "dvh_curve")?;
    let max = vals.iter().fold(0.0f64, |m, v| m.max(*v));
    let n = vals.len() as f64;
    let mut thresholds = Vec::with_capacity(DVH_LEVELS);
    let mut volume_fraction = Vec::with_capacity(DVH_LEVELS);
    for k in 0..DVH_LEVELS {
        let t = if DVH_LEVELS == 1 {
            0.0
        } else {
            max * k as f64 / (DVH_LEVELS - 1) as f64
        };
        let frac = vals.iter().filter(|v| **v >= t).count() as f64 / n;
        thresholds.push(t);
        volume_fraction.push(frac);
    }
    Ok(DvhCurve {
        thresholds,
        volume_fraction,
    })
}

/// Named DVH summary metrics for one structure.
pub fn dvh_metrics(dose: &[f64], mask: &[f64], kind: StructureKind) -> Result<Vec<(String, f64)>> {
    let mut vals = masked_values(dose, mask, "dvh_metrics")?;
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d = |x: f64| quantile_sorted(&vals, 1.0 - x / 100.0);
    Ok(match kind {
        StructureKind::Target => vec![
            ("D1".into(), d(1.0)),
            ("D95".into(), d(95.0)),
            ("D99".into(), d(99.0)),
        ],
        StructureKind::Oar => {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vec![("mean".into(), mean), ("D1".into(), d(1.0))]
        }
    })
}

/// Mean absolute difference of corresponding DVH summary metrics,
/// averaged over all metrics of all structures.
pub fn dvh_score(pred: &[f64], gt: &[f64], structures: &[Structure]) -> Result<f64> {
    if structures.is_empty() {
        return Err(Error::EmptyMask { what: "dvh_score" });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in structures {
        let mp = dvh_metrics(pred, s.mask, s.kind)?;
        let mg = dvh_metrics(gt, s.mask, s.kind)?;
        for ((_, a), (_, b)) in mp.iter().zip(mg.iter()) {
            total += (a - b).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Homogeneity index `(D2 - D98) / D50` over the target mask; lower
/// means a flatter target dose. Errors when the median target dose is
/// zero (the index is undefined).
pub fn homogeneity_index(dose: &[f64], ptv_mask: &[f64]) -> Result<f64> {
    let mut vals = masked_values(dose, ptv_mask, "homogeneity_index")?;
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d50 = quantile_sorted(&vals, 0.5);
    if d50 == 0.0 {
        return Err(Error::UndefinedHomogeneity);
    }
    let d2 = quantile_sorted(&vals, 0.98);
    let d98 = quantile_sorted(&vals, 0.02);
    Ok((d2 - d98) / d50)
}

/// Per-sample evaluation summary.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub dose_score: f64,
    pub dvh_score: f64,
    /// |HI(pred) - HI(reference)| over the target.
    pub hi: f64,
    pub hi_pred: f64,
    pub hi_gt: f64,
    /// Per-structure DVH-metric mean absolute differences.
    pub per_structure: Vec<(String, f64)>,
}

/// Evaluates a prediction against its reference over the standard
/// structure set; `hi` compares the two homogeneity indices so a
/// perfect prediction scores 0 on every column.
pub fn evaluate_sample(
    pred: &[f64],
    gt: &[f64],
    body: &[f64],
    structures: &[Structure],
) -> Result<MetricReport> {
    let ds = dose_score(pred, gt, body)?;
    let dvh = dvh_score(pred, gt, structures)?;
    let mut per_structure = Vec::with_capacity(structures.len());
    for s in structures {
        let mp = dvh_metrics(pred, s.mask, s.kind)?;
        let mg = dvh_metrics(gt, s.mask, s.kind)?;
        let score = mp
            .iter()
            .zip(mg.iter())
            .map(|((_, a), (_, b))| (a - b).abs())
            .sum::<f64>()
            / mp.len() as f64;
        per_structure.push((s.name.to_string(), score));
    }
    let target = structures
        .iter()
        .find(|s| s.kind == StructureKind::Target)
        .ok_or(Error::EmptyMask {
            what: "evaluate_sample: no target structure",
        })?;
    let hi_pred = homogeneity_index(pred, target.mask)?;
    let hi_gt = homogeneity_index(gt, target.mask)?;
    Ok(MetricReport {
        dose_score: ds,
        dvh_score: dvh,
        hi: (hi_pred - hi_gt).abs(),
        hi_pred,
        hi_gt,
        per_structure,
    })
}

/// CSV rows `structure,threshold,volume_fraction`.
pub fn dvh_curves_csv(curves: &[(String, DvhCurve)]) -> String {
    let mut out = String::from("structure,threshold,volume_fraction\n");
    for (name, curve) in curves {
        for (t, f) in curve.thresholds.iter().zip(curve.volume_fraction.iter()) {
            out.push_str(&format!("{name},{t},{f}\n"));
        }
    }
    out
}

/// CSV of per-sample metrics plus mean and standard-deviation rows.
pub fn reports_csv(reports: &[(String, MetricReport)]) -> String {
    let mut out = String::from("sample,dose_score,dvh_score,hi,hi_pred,hi_gt\n");
    for (id, r) in reports {
        out.push_str(&format!(
            "{id},{},{},{},{},{}\n",
            r.dose_score, r.dvh_score, r.hi, r.hi_pred, r.hi_gt
        ));
    }
    if !reports.is_empty() {
        let cols: [(&str, fn(&MetricReport) -> f64); 3] = [
            ("dose_score", |r| r.dose_score),
            ("dvh_score", |r| r.dvh_score),
            ("hi", |r| r.hi),
        ];
        let n = reports.len() as f64;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for (_, get) in cols {
            let mean = reports.iter().map(|(_, r)| get(r)).sum::<f64>() / n;
            let var = reports
                .iter()
                .map(|(_, r)| (get(r) - mean) * (get(r) - mean))
                .sum::<f64>()
                / n;
            means.push(mean);
            stds.push(var.sqrt());
        }
        out.push_str(&format!("mean,{},{},{},,\n", means[0], means[1], means[2]));
        out.push_str(&format!("std,{},{},{},,\n", stds[0], stds[1], stds[2]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn uniform_mask(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn dose_score_identity_and_offset() {
        let gt = vec![0.1, 0.5, 0.9, 0.0];
        let body = vec![1.0, 1.0, 1.0, 0.0];
        assert_eq!(dose_score(&gt, &gt, &body).unwrap(), 0.0);
        let pred: Vec<f64> = gt.iter().map(|v| v + 0.5).collect();
        assert!((dose_score(&pred, &gt, &body).unwrap() - 0.5).abs() < 1e-15);
        assert!(dose_score(&gt, &gt, &[0.0; 4]).is_err());
    }

    #[test]
    fn dose_score_matches_double_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10 {
            let n = 64;
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.2)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.2)).collect();
            let body: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.7))).collect();
            if body.iter().all(|v| *v == 0.0) {
                continue;
            }
            // oracle: explicit scalar loop in identical voxel order
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for i in 0..n {
                if body[i] > 0.0 {
                    sum += (pred[i] - gt[i]).abs();
                    cnt += 1.0;
                }
            }
            assert_eq!(dose_score(&pred, &gt, &body).unwrap(), sum / cnt);
        }
    }

    #[test]
    fn dvh_curve_of_uniform_dose_is_a_step() {
        let dose = vec![0.6; 10];
        let curve = dvh_curve(&dose, &uniform_mask(10)).unwrap();
        assert_eq!(curve.volume_fraction[0], 1.0);
        for (t, f) in curve.thresholds.iter().zip(curve.volume_fraction.iter()) {
            assert_eq!(*f, 1.0, "threshold {t}");
        }
    }

    #[test]
    fn dvh_curve_two_voxel_enumeration() {
        let dose = vec![0.2, 0.8];
        let curve = dvh_curve(&dose, &uniform_mask(2)).unwrap();
        for (t, f) in curve.thresholds.iter().zip(curve.volume_fraction.iter()) {
            let expected = if *t <= 0.2 { 1.0 } else { 0.5 };
            assert_eq!(*f, expected, "threshold {t}");
        }
        assert_eq!(curve.volume_fraction[0], 1.0);
    }

    #[test]
    fn dvh_curve_matches_sort_oracle_and_is_monotone() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = 100;
        let dose: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.2)).collect();
        let curve = dvh_curve(&dose, &uniform_mask(n)).unwrap();
        let mut sorted = dose.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::INFINITY;
        for (t, f) in curve.thresholds.iter().zip(curve.volume_fraction.iter()) {
            let oracle = sorted.iter().filter(|v| **v >= *t).count() as f64 / n as f64;
            assert_eq!(*f, oracle);
            assert!(*f <= prev);
            assert!((0.0..=1.0).contains(f));
            prev = *f;
        }
    }

    #[test]
    fn dvh_metrics_uniform_and_single_voxel() {
        let dose = vec![0.7; 50];
        for (_, v) in dvh_metrics(&dose, &uniform_mask(50), StructureKind::Target).unwrap() {
            assert_eq!(v, 0.7);
        }
        for (_, v) in dvh_metrics(&dose, &uniform_mask(50), StructureKind::Oar).unwrap() {
            // the mean accumulates rounding; quantiles are exact
            assert!((v - 0.7).abs() < 1e-12);
        }
        let one = vec![0.42];
        for (_, v) in dvh_metrics(&one, &uniform_mask(1), StructureKind::Target).unwrap() {
            assert_eq!(v, 0.42);
        }
    }

    #[test]
    fn dvh_metrics_rank_dose_pinned_by_order_statistics() {
        // doses rank/100 for ranks 1..=100
        let dose: Vec<f64> = (1..=100).map(|r| r as f64 / 100.0).collect();
        let m = dvh_metrics(&dose, &uniform_mask(100), StructureKind::Target).unwrap();
        // oracle: sorted ascending = same sequence; h = 99 * (1 - x/100)
        let oracle = |x: f64| {
            let h = 99.0 * (1.0 - x / 100.0);
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            let s = |i: usize| (i + 1) as f64 / 100.0;
            s(lo) + frac * (s(lo + 1) - s(lo))
        };
        assert!((m[0].1 - oracle(1.0)).abs() < 1e-12); // D1
        assert!((m[1].1 - oracle(95.0)).abs() < 1e-12); // D95
        assert!((m[2].1 - oracle(99.0)).abs() < 1e-12); // D99
        // D95 lands near the cold end of the distribution
        assert!((m[1].1 - 0.0595).abs() < 1e-12);
    }

    #[test]
    fn quantiles_are_translation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let dose: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let delta = rng.gen_range(-0.5..0.5);
            let shifted: Vec<f64> = dose.iter().map(|v| v + delta).collect();
            for x in [1.0, 50.0, 95.0, 99.0] {
                let a = dose_at_hottest(&dose, &uniform_mask(n), x).unwrap();
                let b = dose_at_hottest(&shifted, &uniform_mask(n), x).unwrap();
                assert!((b - (a + delta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dvh_score_identity_translation_and_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 64;
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask_a: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let mask_b: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let structures = [
            Structure {
                name: "ptv",
                mask: &mask_a,
                kind: StructureKind::Target,
            },
            Structure {
                name: "oar",
                mask: &mask_b,
                kind: StructureKind::Oar,
            },
        ];
        assert_eq!(dvh_score(&gt, &gt, &structures).unwrap(), 0.0);

        let delta = 0.17;
        let pred: Vec<f64> = gt.iter().map(|v| v + delta).collect();
        let score = dvh_score(&pred, &gt, &structures).unwrap();
        assert!((score - delta).abs() < 1e-12, "score {score}");

        // brute-force oracle over a random prediction
        let pred2: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for s in &structures {
            for ((_, a), (_, b)) in dvh_metrics(&pred2, s.mask, s.kind)
                .unwrap()
                .iter()
                .zip(dvh_metrics(&gt, s.mask, s.kind).unwrap().iter())
            {
                total += (a - b).abs();
                count += 1.0;
            }
        }
        assert_eq!(dvh_score(&pred2, &gt, &structures).unwrap(), total / count);
    }

    #[test]
    fn homogeneity_index_cases() {
        let uniform = vec![0.8; 30];
        assert_eq!(homogeneity_index(&uniform, &uniform_mask(30)).unwrap(), 0.0);

        // 98 voxels at 1.0, 2 at 1.1: D2 = 1.002, D98 = 1.0, D50 = 1.0
        let mut dose = vec![1.0; 98];
        dose.extend([1.1, 1.1]);
        let hi = homogeneity_index(&dose, &uniform_mask(100)).unwrap();
        assert!((hi - 0.002).abs() < 1e-12, "hi {hi}");

        // scale invariance
        let scaled: Vec<f64> = dose.iter().map(|v| v * 3.7).collect();
        let hi_scaled = homogeneity_index(&scaled, &uniform_mask(100)).unwrap();
        assert!((hi - hi_scaled).abs() < 1e-12);

        let zeros = vec![0.0; 10];
        assert!(matches!(
            homogeneity_index(&zeros, &uniform_mask(10)),
            Err(Error::UndefinedHomogeneity)
        ));
    }

    #[test]
    fn evaluate_sample_self_comparison_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 64;
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let body = uniform_mask(n);
        let mask: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let structures = [Structure {
            name: "ptv",
            mask: &mask,
            kind: StructureKind::Target,
        }];
        let r = evaluate_sample(&gt, &gt, &body, &structures).unwrap();
        assert_eq!(r.dose_score, 0.0);
        assert_eq!(r.dvh_score, 0.0);
        assert_eq!(r.hi, 0.0);
    }

    #[test]
    fn csv_exports_have_expected_shape() {
        let dose = vec![0.2, 0.8];
        let curve = dvh_curve(&dose, &uniform_mask(2)).unwrap();
        let csv = dvh_curves_csv(&[("ptv".into(), curve)]);
        assert!(csv.starts_with("structure,threshold,volume_fraction\n"));
        assert_eq!(csv.lines().count(), 1 + DVH_LEVELS);

        let report = MetricReport {
            dose_score: 0.1,
            dvh_score: 0.2,
            hi: 0.05,
            hi_pred: 0.3,
            hi_gt: 0.25,
            per_structure: vec![],
        };
        let csv = reports_csv(&[("0000".into(), report)]);
        assert!(csv.contains("mean,"));
        assert!(csv.contains("std,"));
    }
}
