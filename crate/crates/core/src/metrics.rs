//! Depth evaluation measures: RMSE, mean absolute relative error, and the
//! fraction of pixels within a 1.25 ratio of ground truth (delta1).
//!
//! RMSE is scale-aware; REL and delta1 are invariant to rescaling prediction
//! and ground truth together. Pixels that are masked out or have
//! non-positive ground truth never contribute.

use crate::tensor::Tensor;
use std::fmt;

/// Ratio threshold for the accuracy measure; strictly below counts as a hit.
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    /// No pixel is both masked in and has positive ground truth.
    EmptyMask,
    NoRecords,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { expected, found } => {
                write!(f, "expected shape {expected:?}, found {found:?}")
            }
            Self::EmptyMask => write!(f, "no valid pixel with positive ground truth"),
            Self::NoRecords => write!(f, "no records to aggregate"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Per-map metrics over pixels with `mask != 0` and `gt > 0`.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<MetricsRecord, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            expected: pred.shape().to_vec(),
            found: gt.shape().to_vec(),
        });
    }
    if pred.shape() != mask.shape() {
        return Err(MetricsError::ShapeMismatch {
            expected: pred.shape().to_vec(),
            found: mask.shape().to_vec(),
        });
    }
    let mut n = 0usize;
    let mut sq_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut hits = 0usize;
    for ((&p, &y), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m == 0.0 || y <= 0.0 {
            continue;
        }
        n += 1;
        let diff = p - y;
        sq_sum += diff * diff;
        rel_sum += diff.abs() / y;
        let ratio = (p / y).max(y / p);
        if ratio < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(MetricsRecord {
        rmse: (sq_sum / n as f64).sqrt(),
        rel: rel_sum / n as f64,
        delta1: hits as f64 / n as f64,
        n_pixels: n,
    })
}

/// Unweighted mean of per-domain records; pixel counts are summed.
pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsRecord, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let n = records.len() as f64;
    Ok(MetricsRecord {
        rmse: records.iter().map(|r| r.rmse).sum::<f64>() / n,
        rel: records.iter().map(|r| r.rel).sum::<f64>() / n,
        delta1: records.iter().map(|r| r.delta1).sum::<f64>() / n,
        n_pixels: records.iter().map(|r| r.n_pixels).sum(),
    })
}

/// One delta1 observation for one domain after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub stage: usize,
    pub domain: String,
    pub delta1: f64,
}

/// Flattens stage-indexed per-domain records into a delta1 series: after
/// stage k, one point per domain learned so far.
pub fn forgetting_curve(stages: &[Vec<(String, MetricsRecord)>]) -> Vec<CurvePoint> {
    let mut points = Vec::new();
    for (stage, records) in stages.iter().enumerate() {
        for (domain, record) in records {
            points.push(CurvePoint {
                stage,
                domain: domain.clone(),
                delta1: record.delta1,
            });
        }
    }
    points
}

pub const METRICS_CSV_HEADER: &str = "stage,domain,rmse,rel,delta1,routing_mode";

/// One CSV row matching [`METRICS_CSV_HEADER`].
pub fn metrics_csv_row(stage: usize, domain: &str, r: &MetricsRecord, routing_mode: &str) -> String {
    format!("{stage},{domain},{},{},{},{routing_mode}", r.rmse, r.rel, r.delta1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_perfectly() {
        let gt = t(vec![1.0, 2.0, 3.0]);
        let m = Tensor::filled(vec![3], 1.0);
        let r = compute_metrics(&gt, &gt, &m).unwrap();
        assert_eq!((r.rmse, r.rel, r.delta1), (0.0, 0.0, 1.0));
        assert_eq!(r.n_pixels, 3);
    }

    #[test]
    fn twenty_percent_over_is_inside_threshold() {
        let gt = t(vec![1.0, 2.0, 5.0]);
        let pred = t(gt.data().iter().map(|v| v * 1.2).collect());
        let m = Tensor::filled(vec![3], 1.0);
        let r = compute_metrics(&pred, &gt, &m).unwrap();
        assert!((r.rel - 0.2).abs() < 1e-12);
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn thirty_percent_over_is_outside_threshold() {
        let gt = t(vec![1.0, 2.0, 5.0]);
        let pred = t(gt.data().iter().map(|v| v * 1.3).collect());
        let m = Tensor::filled(vec![3], 1.0);
        let r = compute_metrics(&pred, &gt, &m).unwrap();
        assert_eq!(r.delta1, 0.0);
    }

    #[test]
    fn masked_and_nonpositive_gt_pixels_ignored() {
        let gt = t(vec![2.0, 0.0, 2.0, 2.0]);
        let pred = t(vec![2.0, 99.0, 99.0, 2.0]);
        let mask = t(vec![1.0, 1.0, 0.0, 1.0]);
        let r = compute_metrics(&pred, &gt, &mask).unwrap();
        assert_eq!(r.n_pixels, 2);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = t(vec![1.0]);
        let pred = t(vec![1.0]);
        let mask = t(vec![0.0]);
        assert!(matches!(compute_metrics(&pred, &gt, &mask), Err(MetricsError::EmptyMask)));
    }

    #[test]
    fn matches_per_pixel_oracle() {
        // Independent second implementation collecting explicit pixel lists.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 40;
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..10.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..10.0)).collect();
            let mask: Vec<f64> = (0..n).map(|_| f64::from(u32::from(rng.gen_bool(0.7)))).collect();

            let mut pixels: Vec<(f64, f64)> = Vec::new();
            for i in 0..n {
                if mask[i] != 0.0 && gt[i] > 0.0 {
                    pixels.push((pred[i], gt[i]));
                }
            }
            if pixels.is_empty() {
                continue;
            }
            let count = pixels.len() as f64;
            let rmse = (pixels.iter().map(|(p, y)| (p - y).powi(2)).sum::<f64>() / count).sqrt();
            let rel = pixels.iter().map(|(p, y)| (p - y).abs() / y).sum::<f64>() / count;
            let delta1 = pixels
                .iter()
                .filter(|(p, y)| (p / y).max(y / p) < 1.25)
                .count() as f64
                / count;

            let r = compute_metrics(&t(pred), &t(gt), &t(mask)).unwrap();
            assert!((r.rmse - rmse).abs() < 1e-12);
            assert!((r.rel - rel).abs() < 1e-12);
            assert!((r.delta1 - delta1).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_averages_unweighted() {
        let a = MetricsRecord { rmse: 1.0, rel: 0.1, delta1: 0.768, n_pixels: 10 };
        let b = MetricsRecord { rmse: 3.0, rel: 0.3, delta1: 0.910, n_pixels: 30 };
        let avg = aggregate(&[a, b]).unwrap();
        assert!((avg.delta1 - 0.839).abs() < 1e-12);
        assert_eq!(avg.rmse, 2.0);
        assert_eq!(avg.n_pixels, 40);
        let single = aggregate(&[a]).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn curve_for_three_stage_run_has_six_points() {
        let rec = MetricsRecord { rmse: 1.0, rel: 0.1, delta1: 0.5, n_pixels: 1 };
        let stages = vec![
            vec![("a".to_string(), rec)],
            vec![("a".to_string(), rec), ("b".to_string(), rec)],
            vec![("a".to_string(), rec), ("b".to_string(), rec), ("c".to_string(), rec)],
        ];
        assert_eq!(forgetting_curve(&stages).len(), 6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn rel_and_delta1_scale_invariant_rmse_scale_aware(scale in 0.01f64..100.0, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 16;
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..8.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..8.0)).collect();
            let mask = Tensor::filled(vec![n], 1.0);
            let base = compute_metrics(&t(pred.clone()), &t(gt.clone()), &mask).unwrap();
            let scaled = compute_metrics(
                &t(pred.iter().map(|v| v * scale).collect()),
                &t(gt.iter().map(|v| v * scale).collect()),
                &mask,
            ).unwrap();
            proptest::prop_assert!((base.rel - scaled.rel).abs() < 1e-9);
            proptest::prop_assert!((base.delta1 - scaled.delta1).abs() < 1e-12);
            proptest::prop_assert!((base.rmse * scale - scaled.rmse).abs() < 1e-9 * scale.max(1.0));
        }
    }
}
