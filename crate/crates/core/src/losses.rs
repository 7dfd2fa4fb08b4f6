//! Training objectives.
//!
//! The per-domain depth loss weights each pixel's squared error by a learned
//! confidence term: `e^{-s}(pred - gt)^2 + s`, averaged over valid pixels.
//! Knowledge preservation adds an absolute-difference consistency penalty
//! against a frozen older model plus the same depth loss on replayed samples,
//! and the total objective is `ud + sum_i lambda_i * (cons_i + replay_i)`.
//!
//! Losses are tape builders: differentiable arguments arrive as graph nodes,
//! targets and masks as plain tensors folded in as constants.

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// No valid pixel under the mask.
    EmptyMask,
    /// Median of valid ground-truth depths is not positive.
    NonPositiveMedian { median: f64 },
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    /// An old domain contributes terms but has no weight entry.
    MissingLambda { domain: String },
    /// A lambda entry is negative or non-finite.
    InvalidLambda { domain: String, value: f64 },
    Graph(GraphError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyMask => write!(f, "mask marks no valid pixel"),
            Self::NonPositiveMedian { median } => {
                write!(f, "median of valid depths is {median}, expected > 0")
            }
            Self::ShapeMismatch { expected, found } => {
                write!(f, "expected shape {expected:?}, found {found:?}")
            }
            Self::MissingLambda { domain } => {
                write!(f, "no lambda weight for contributing domain `{domain}`")
            }
            Self::InvalidLambda { domain, value } => {
                write!(f, "lambda for `{domain}` is {value}, expected finite and >= 0")
            }
            Self::Graph(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<GraphError> for LossError {
    fn from(e: GraphError) -> Self {
        Self::Graph(e)
    }
}

/// Per-domain weights and the ablation switches of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_per_domain: BTreeMap<String, f64>,
    pub enable_uncertainty: bool,
    pub enable_replay: bool,
    pub enable_uncertainty_consistency: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_per_domain: BTreeMap::new(),
            enable_uncertainty: true,
            enable_replay: true,
            enable_uncertainty_consistency: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (domain, &v) in &self.lambda_per_domain {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidLambda {
                    domain: domain.clone(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn lambda(&self, domain: &str) -> Result<f64, LossError> {
        self.lambda_per_domain
            .get(domain)
            .copied()
            .ok_or_else(|| LossError::MissingLambda { domain: domain.to_string() })
    }
}

fn check_same_shape(a: &[usize], b: &[usize]) -> Result<(), LossError> {
    if a != b {
        return Err(LossError::ShapeMismatch { expected: a.to_vec(), found: b.to_vec() });
    }
    Ok(())
}

/// Median of the masked-in entries. Mask entries are 0/1.
pub fn median_of_valid(depth: &Tensor, mask: &Tensor) -> Result<f64, LossError> {
    check_same_shape(depth.shape(), mask.shape())?;
    let mut vals: Vec<f64> = depth
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&d, _)| d)
        .collect();
    if vals.is_empty() {
        return Err(LossError::EmptyMask);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    let n = vals.len();
    let median = if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    };
    if median <= 0.0 {
        return Err(LossError::NonPositiveMedian { median });
    }
    Ok(median)
}

/// Divides valid pixels by the valid median; invalid pixels pass through.
pub fn scale_normalize(depth: &Tensor, mask: &Tensor) -> Result<Tensor, LossError> {
    let median = median_of_valid(depth, mask)?;
    let data: Vec<f64> = depth
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&d, &m)| if m != 0.0 { d / median } else { d })
        .collect();
    Ok(Tensor::new(depth.shape().to_vec(), data).expect("finite after normalization"))
}

fn valid_count(mask: &Tensor) -> Result<f64, LossError> {
    let count: f64 = mask.data().iter().sum();
    if count < 1.0 {
        return Err(LossError::EmptyMask);
    }
    Ok(count)
}

/// Mean over valid pixels of `e^{-s}(pred - gt)^2 + s`.
///
/// With `s = None` the confidence weighting is ablated and this reduces to a
/// masked mean squared error. With `normalize` set, both prediction and
/// target are divided by the valid median of `gt` first.
pub fn uncertainty_depth_loss(
    g: &mut Graph,
    pred: NodeId,
    s: Option<NodeId>,
    gt: &Tensor,
    mask: &Tensor,
    normalize: bool,
) -> Result<NodeId, LossError> {
    let pred_shape = g.value(pred)?.shape().to_vec();
    check_same_shape(&pred_shape, gt.shape())?;
    check_same_shape(&pred_shape, mask.shape())?;
    if let Some(s) = s {
        check_same_shape(&pred_shape, g.value(s)?.shape())?;
    }
    let count = valid_count(mask)?;

    let (pred_n, gt_n) = if normalize {
        let median = median_of_valid(gt, mask)?;
        let inv = g.constant_scalar(1.0 / median)?;
        (g.mul(pred, inv)?, scale_normalize(gt, mask)?)
    } else {
        (pred, gt.clone())
    };
    let gt_c = g.constant(gt_n)?;
    let residual = g.sub(pred_n, gt_c)?;
    let squared = g.square(residual)?;
    let term = match s {
        Some(s) => {
            let neg_s = g.neg(s)?;
            let weight = g.exp(neg_s)?;
            let weighted = g.mul(weight, squared)?;
            g.add(weighted, s)?
        }
        None => squared,
    };
    let mask_c = g.constant(mask.clone())?;
    let masked = g.mul(term, mask_c)?;
    let total = g.sum(masked)?;
    let inv_count = g.constant_scalar(1.0 / count)?;
    Ok(g.mul(total, inv_count)?)
}

/// Mean over all pixels of `|new_depth - old_depth|`, plus
/// `|new_s - old_s|` when uncertainty consistency is kept.
///
/// The old model's outputs are plain tensors, so no gradient reaches them.
pub fn consistency_loss(
    g: &mut Graph,
    new_depth: NodeId,
    new_s: Option<NodeId>,
    old_depth: &Tensor,
    old_s: Option<&Tensor>,
    include_uncertainty: bool,
) -> Result<NodeId, LossError> {
    let shape = g.value(new_depth)?.shape().to_vec();
    check_same_shape(&shape, old_depth.shape())?;
    let old_c = g.constant(old_depth.clone())?;
    let d_diff = g.sub(new_depth, old_c)?;
    let d_abs = g.abs(d_diff)?;
    let per_pixel = if include_uncertainty {
        let (new_s, old_s) = match (new_s, old_s) {
            (Some(n), Some(o)) => (n, o),
            _ => {
                return Err(LossError::ShapeMismatch {
                    expected: shape,
                    found: vec![],
                })
            }
        };
        check_same_shape(&shape, g.value(new_s)?.shape())?;
        check_same_shape(&shape, old_s.shape())?;
        let old_s_c = g.constant(old_s.clone())?;
        let s_diff = g.sub(new_s, old_s_c)?;
        let s_abs = g.abs(s_diff)?;
        g.add(d_abs, s_abs)?
    } else {
        d_abs
    };
    Ok(g.mean(per_pixel)?)
}

/// The depth loss applied to a replayed sample; identical contract to
/// [`uncertainty_depth_loss`].
pub fn replay_loss(
    g: &mut Graph,
    pred: NodeId,
    s: Option<NodeId>,
    gt: &Tensor,
    mask: &Tensor,
    normalize: bool,
) -> Result<NodeId, LossError> {
    uncertainty_depth_loss(g, pred, s, gt, mask, normalize)
}

/// Combines scalar loss values: `ud + sum_i lambda_i * (cons_i + replay_i)`.
pub fn total_loss(
    new_domain_loss: f64,
    old_domain_terms: &[(&str, f64, f64)],
    weights: &LossWeights,
) -> Result<f64, LossError> {
    weights.validate()?;
    let mut total = new_domain_loss;
    for (domain, cons, replay) in old_domain_terms {
        let lambda = weights.lambda(domain)?;
        total += lambda * (cons + replay);
    }
    Ok(total)
}

/// Tape-level version of [`total_loss`] for end-to-end gradient checks.
pub fn total_loss_node(
    g: &mut Graph,
    new_domain_loss: NodeId,
    old_domain_terms: &[(&str, NodeId, NodeId)],
    weights: &LossWeights,
) -> Result<NodeId, LossError> {
    weights.validate()?;
    let mut total = new_domain_loss;
    for (domain, cons, replay) in old_domain_terms {
        let lambda = weights.lambda(domain)?;
        let lambda_c = g.constant_scalar(lambda)?;
        let pair = g.add(*cons, *replay)?;
        let weighted = g.mul(lambda_c, pair)?;
        total = g.add(total, weighted)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    fn ones(n: usize) -> Tensor {
        Tensor::filled(vec![n], 1.0)
    }

    #[test]
    fn scale_normalize_constant_map_becomes_ones() {
        let d = Tensor::filled(vec![4], 4.0);
        let m = ones(4);
        let out = scale_normalize(&d, &m).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn scale_normalize_divides_by_odd_median() {
        let d = grid(vec![1.0, 2.0, 3.0, 4.0, 100.0]);
        let m = ones(5);
        let out = scale_normalize(&d, &m).unwrap();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0, 100.0].iter().map(|v| v / 3.0).collect();
        assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn scale_normalize_rejects_all_invalid() {
        let d = grid(vec![1.0, 2.0]);
        let m = Tensor::zeros(vec![2]);
        assert!(matches!(scale_normalize(&d, &m), Err(LossError::EmptyMask)));
    }

    #[test]
    fn scale_normalize_leaves_masked_pixels_untouched() {
        let d = grid(vec![2.0, 50.0, 2.0]);
        let m = grid(vec![1.0, 0.0, 1.0]);
        let out = scale_normalize(&d, &m).unwrap();
        assert_eq!(out.data(), &[1.0, 50.0, 1.0]);
    }

    fn ud_value(pred: Vec<f64>, s: Vec<f64>, gt: Vec<f64>, mask: Vec<f64>, normalize: bool) -> f64 {
        let mut g = Graph::new();
        let p = g.parameter(grid(pred)).unwrap();
        let sn = g.parameter(grid(s)).unwrap();
        let loss =
            uncertainty_depth_loss(&mut g, p, Some(sn), &grid(gt), &grid(mask), normalize).unwrap();
        g.value(loss).unwrap().item()
    }

    #[test]
    fn perfect_prediction_with_zero_s_is_zero() {
        let v = ud_value(vec![2.0, 5.0], vec![0.0, 0.0], vec![2.0, 5.0], vec![1.0, 1.0], false);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_pixel_unit_residual_hand_value() {
        let v = ud_value(vec![3.0], vec![0.0], vec![2.0], vec![1.0], false);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn residual_two_at_log_four_hand_value() {
        let v = ud_value(vec![4.0], vec![4.0_f64.ln()], vec![2.0], vec![1.0], false);
        let expect = 1.0 + 4.0_f64.ln();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn zero_s_reduces_to_mean_squared_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..5.0)).collect();
        let mask: Vec<f64> = (0..n).map(|_| f64::from(u32::from(rng.gen_bool(0.8)))).collect();
        assert!(mask.iter().sum::<f64>() >= 1.0);
        let mse = pred
            .iter()
            .zip(&gt)
            .zip(&mask)
            .map(|((p, y), m)| m * (p - y) * (p - y))
            .sum::<f64>()
            / mask.iter().sum::<f64>();
        let v = ud_value(pred, vec![0.0; n], gt, mask, false);
        assert!((v - mse).abs() < 1e-12);
    }

    #[test]
    fn gradient_descent_on_s_finds_log_square_residual() {
        for r in [0.5_f64, 1.0, 2.0] {
            let target = (r * r).ln();
            let mut s_val = 0.0;
            for _ in 0..4000 {
                let mut g = Graph::new();
                let p = g.parameter(grid(vec![r])).unwrap();
                let s = g.parameter(grid(vec![s_val])).unwrap();
                let loss = uncertainty_depth_loss(
                    &mut g,
                    p,
                    Some(s),
                    &grid(vec![0.0]),
                    &grid(vec![1.0]),
                    false,
                )
                .unwrap();
                g.backward(loss).unwrap();
                s_val -= 0.05 * g.grad(s).unwrap().item();
            }
            assert!(
                (s_val - target).abs() < 1e-2,
                "r={r}: s converged to {s_val}, optimum {target}"
            );
        }
    }

    #[test]
    fn normalization_divides_both_sides_by_gt_median() {
        // gt median 2; pred 4 vs gt 2 gives residual (2-1)^2 = 1 with s=0.
        let v = ud_value(vec![4.0], vec![0.0], vec![2.0], vec![1.0], true);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_pixels_contribute_nothing_to_value_or_gradient() {
        let gt = grid(vec![1.0, 2.0, 3.0]);
        let mask = grid(vec![1.0, 0.0, 1.0]);
        let eval = |masked_pred: f64| -> f64 {
            ud_value(
                vec![1.5, masked_pred, 2.0],
                vec![0.1, 0.2, 0.3],
                gt.data().to_vec(),
                mask.data().to_vec(),
                false,
            )
        };
        assert_eq!(eval(2.0), eval(999.0));

        let mut g = Graph::new();
        let p = g.parameter(grid(vec![1.5, 2.0, 2.0])).unwrap();
        let s = g.parameter(grid(vec![0.1, 0.2, 0.3])).unwrap();
        let loss = uncertainty_depth_loss(&mut g, p, Some(s), &gt, &mask, false).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap().data()[1], 0.0);
        assert_eq!(g.grad(s).unwrap().data()[1], 0.0);
    }

    #[test]
    fn consistency_zero_when_models_agree() {
        let mut g = Graph::new();
        let d = g.parameter(grid(vec![1.0, 2.0])).unwrap();
        let s = g.parameter(grid(vec![0.5, -0.5])).unwrap();
        let loss = consistency_loss(
            &mut g,
            d,
            Some(s),
            &grid(vec![1.0, 2.0]),
            Some(&grid(vec![0.5, -0.5])),
            true,
        )
        .unwrap();
        assert_eq!(g.value(loss).unwrap().item(), 0.0);
    }

    #[test]
    fn consistency_hand_value_single_pixel() {
        let mut g = Graph::new();
        let d = g.parameter(grid(vec![1.5])).unwrap();
        let s = g.parameter(grid(vec![0.25])).unwrap();
        let loss = consistency_loss(&mut g, d, Some(s), &grid(vec![1.0]), Some(&grid(vec![0.0])), true)
            .unwrap();
        assert_eq!(g.value(loss).unwrap().item(), 0.75);
    }

    #[test]
    fn consistency_value_symmetric_in_roles() {
        let (a_d, a_s) = (vec![1.0, 3.0], vec![0.2, -0.4]);
        let (b_d, b_s) = (vec![2.0, 2.5], vec![0.6, 0.1]);
        let run = |nd: &[f64], ns: &[f64], od: &[f64], os: &[f64]| -> f64 {
            let mut g = Graph::new();
            let d = g.parameter(grid(nd.to_vec())).unwrap();
            let s = g.parameter(grid(ns.to_vec())).unwrap();
            let loss = consistency_loss(
                &mut g,
                d,
                Some(s),
                &grid(od.to_vec()),
                Some(&grid(os.to_vec())),
                true,
            )
            .unwrap();
            g.value(loss).unwrap().item()
        };
        assert_eq!(run(&a_d, &a_s, &b_d, &b_s), run(&b_d, &b_s, &a_d, &a_s));
    }

    #[test]
    fn consistency_can_drop_uncertainty_term() {
        let mut g = Graph::new();
        let d = g.parameter(grid(vec![1.5])).unwrap();
        let loss = consistency_loss(&mut g, d, None, &grid(vec![1.0]), None, false).unwrap();
        assert_eq!(g.value(loss).unwrap().item(), 0.5);
    }

    #[test]
    fn replay_loss_is_depth_loss() {
        let (pred, s, gt, mask) = (vec![1.0, 4.0], vec![0.3, -0.2], vec![2.0, 3.5], vec![1.0, 1.0]);
        let mut g1 = Graph::new();
        let p1 = g1.parameter(grid(pred.clone())).unwrap();
        let s1 = g1.parameter(grid(s.clone())).unwrap();
        let a = replay_loss(&mut g1, p1, Some(s1), &grid(gt.clone()), &grid(mask.clone()), false)
            .unwrap();
        let mut g2 = Graph::new();
        let p2 = g2.parameter(grid(pred)).unwrap();
        let s2 = g2.parameter(grid(s)).unwrap();
        let b = uncertainty_depth_loss(&mut g2, p2, Some(s2), &grid(gt), &grid(mask), false).unwrap();
        assert_eq!(g1.value(a).unwrap().item(), g2.value(b).unwrap().item());
    }

    #[test]
    fn replay_single_pixel_unit_residual() {
        let mut g = Graph::new();
        let p = g.parameter(grid(vec![1.0])).unwrap();
        let s = g.parameter(grid(vec![0.0])).unwrap();
        let loss = replay_loss(&mut g, p, Some(s), &grid(vec![0.0]), &grid(vec![1.0]), false).unwrap();
        assert_eq!(g.value(loss).unwrap().item(), 1.0);
    }

    fn weights_with(entries: &[(&str, f64)]) -> LossWeights {
        LossWeights {
            lambda_per_domain: entries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            ..LossWeights::default()
        }
    }

    #[test]
    fn total_with_no_old_domains_is_new_loss() {
        let w = weights_with(&[]);
        assert_eq!(total_loss(1.25, &[], &w).unwrap(), 1.25);
    }

    #[test]
    fn total_hand_value_one_old_domain() {
        let w = weights_with(&[("a", 10.0)]);
        let total = total_loss(1.0, &[("a", 0.1, 0.2)], &w).unwrap();
        assert!((total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lambdas_reduce_to_fine_tuning_objective() {
        let w = weights_with(&[("a", 0.0), ("b", 0.0)]);
        let total = total_loss(0.8, &[("a", 0.3, 0.4), ("b", 0.5, 0.6)], &w).unwrap();
        assert_eq!(total, 0.8);
    }

    #[test]
    fn missing_lambda_is_an_error() {
        let w = weights_with(&[("a", 10.0)]);
        assert!(matches!(
            total_loss(1.0, &[("b", 0.1, 0.2)], &w),
            Err(LossError::MissingLambda { .. })
        ));
    }

    #[test]
    fn graph_total_matches_value_total() {
        let w = weights_with(&[("a", 10.0), ("b", 2.5)]);
        let mut g = Graph::new();
        let ud = g.constant_scalar(1.0).unwrap();
        let ca = g.constant_scalar(0.1).unwrap();
        let ra = g.constant_scalar(0.2).unwrap();
        let cb = g.constant_scalar(0.05).unwrap();
        let rb = g.constant_scalar(0.15).unwrap();
        let node = total_loss_node(&mut g, ud, &[("a", ca, ra), ("b", cb, rb)], &w).unwrap();
        let value = total_loss(1.0, &[("a", 0.1, 0.2), ("b", 0.05, 0.15)], &w).unwrap();
        assert!((g.value(node).unwrap().item() - value).abs() < 1e-15);
    }

    #[test]
    fn losses_pass_finite_difference_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..8 {
            let n = 9;
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let mask: Vec<f64> = (0..n).map(|i| f64::from(u32::from(i % 3 != 0))).collect();
            let old_d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let old_s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let mut g = Graph::new();
            let p = g.parameter(grid(pred)).unwrap();
            let sv = g.parameter(grid(s)).unwrap();
            let ud = uncertainty_depth_loss(
                &mut g,
                p,
                Some(sv),
                &grid(gt.clone()),
                &grid(mask.clone()),
                case % 2 == 0,
            )
            .unwrap();
            let cons =
                consistency_loss(&mut g, p, Some(sv), &grid(old_d), Some(&grid(old_s)), true).unwrap();
            let rep = replay_loss(&mut g, p, Some(sv), &grid(gt), &grid(mask), false).unwrap();
            let w = weights_with(&[("old", 3.0)]);
            let total = total_loss_node(&mut g, ud, &[("old", cons, rep)], &w).unwrap();
            let err = g.finite_diff_check(total, 1e-5).unwrap();
            assert!(err < 1e-4, "case {case}: finite diff error {err}");
        }
    }

    #[test]
    fn shape_and_mask_errors_are_reported() {
        let mut g = Graph::new();
        let p = g.parameter(grid(vec![1.0, 2.0])).unwrap();
        let s = g.parameter(grid(vec![0.0, 0.0])).unwrap();
        assert!(matches!(
            uncertainty_depth_loss(&mut g, p, Some(s), &grid(vec![1.0]), &grid(vec![1.0]), false),
            Err(LossError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            uncertainty_depth_loss(
                &mut g,
                p,
                Some(s),
                &grid(vec![1.0, 2.0]),
                &Tensor::zeros(vec![2]),
                false
            ),
            Err(LossError::EmptyMask)
        ));
    }
}
