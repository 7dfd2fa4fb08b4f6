//! Online domain identification and prediction.
//!
//! An incoming image is encoded once; its pooled feature is compared against
//! each learned domain's mean feature by Euclidean distance, the nearest
//! domain's head is applied to the already-computed features, and the depth
//! map comes back in that head's range. Ties break toward the earliest
//! registered domain. The index refuses to serve when its mean features were
//! computed with a different parameter generation than the model's.

use crate::metrics::{self, MetricsRecord};
use crate::model::{ModelError, MultiHeadModel};
use crate::replay::ReplayStore;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::fmt;

#[derive(Debug)]
pub enum InferenceError {
    EmptyIndex,
    /// Mean features predate the model's parameters; recompute them.
    StaleIndex { model_version: u64, index_version: u64 },
    /// An entry lacks a mean feature.
    MissingFeature { domain: String },
    FeatureDimMismatch { expected: usize, found: usize },
    UnknownDomain { domain: String },
    Model(ModelError),
    Metrics(metrics::MetricsError),
}

impl fmt::Display for InferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyIndex => write!(f, "domain index is empty"),
            Self::StaleIndex { model_version, index_version } => write!(
                f,
                "index built for model version {index_version}, model is at {model_version}; recompute mean features"
            ),
            Self::MissingFeature { domain } => {
                write!(f, "replay entry for `{domain}` has no mean feature")
            }
            Self::FeatureDimMismatch { expected, found } => {
                write!(f, "feature length {found}, index expects {expected}")
            }
            Self::UnknownDomain { domain } => write!(f, "index has no entry for `{domain}`"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for InferenceError {}

impl From<ModelError> for InferenceError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<metrics::MetricsError> for InferenceError {
    fn from(e: metrics::MetricsError) -> Self {
        Self::Metrics(e)
    }
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub domain_id: String,
    pub mean_feature: Tensor,
    pub version_tag: u64,
}

/// Mean features of every learned domain, in registration order.
#[derive(Debug, Clone)]
pub struct DomainIndex {
    entries: Vec<IndexEntry>,
    /// Standardize each feature dimension (across domain means) before
    /// computing distances. Off by default; raw features match the distance
    /// definition literally.
    pub standardize: bool,
}

impl DomainIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self, InferenceError> {
        if entries.is_empty() {
            return Err(InferenceError::EmptyIndex);
        }
        let dim = entries[0].mean_feature.numel();
        for e in &entries {
            if e.mean_feature.numel() != dim {
                return Err(InferenceError::FeatureDimMismatch {
                    expected: dim,
                    found: e.mean_feature.numel(),
                });
            }
        }
        Ok(Self { entries, standardize: false })
    }

    /// Collects every stored mean feature; fails if any is missing.
    pub fn from_store(store: &ReplayStore) -> Result<Self, InferenceError> {
        let mut entries = Vec::with_capacity(store.len());
        for e in store.entries() {
            let feature = e
                .mean_feature
                .clone()
                .ok_or_else(|| InferenceError::MissingFeature { domain: e.domain_id.clone() })?;
            entries.push(IndexEntry {
                domain_id: e.domain_id.clone(),
                mean_feature: feature,
                version_tag: e.feature_version.unwrap_or(0),
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.domain_id.clone()).collect()
    }

    fn check_fresh(&self, model: &MultiHeadModel) -> Result<(), InferenceError> {
        for e in &self.entries {
            if e.version_tag != model.version_tag() {
                return Err(InferenceError::StaleIndex {
                    model_version: model.version_tag(),
                    index_version: e.version_tag,
                });
            }
        }
        Ok(())
    }

    /// Per-dimension (mean, std) over the stored domain means.
    fn standardization(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.entries[0].mean_feature.numel();
        let n = self.entries.len() as f64;
        let mut mean = vec![0.0; dim];
        for e in &self.entries {
            for (m, v) in mean.iter_mut().zip(e.mean_feature.data()) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for e in &self.entries {
            for (s, (v, m)) in std.iter_mut().zip(e.mean_feature.data().iter().zip(&mean)) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-12);
        }
        (mean, std)
    }

    fn distances(&self, feature: &Tensor) -> Result<Vec<(String, f64)>, InferenceError> {
        let dim = self.entries[0].mean_feature.numel();
        if feature.numel() != dim {
            return Err(InferenceError::FeatureDimMismatch { expected: dim, found: feature.numel() });
        }
        let (mean, std) = if self.standardize {
            self.standardization()
        } else {
            (vec![0.0; dim], vec![1.0; dim])
        };
        Ok(self
            .entries
            .iter()
            .map(|e| {
                let d2: f64 = feature
                    .data()
                    .iter()
                    .zip(e.mean_feature.data())
                    .zip(mean.iter().zip(&std))
                    .map(|((f, mu), (m, s))| {
                        let a = (f - m) / s;
                        let b = (mu - m) / s;
                        (a - b) * (a - b)
                    })
                    .sum();
                (e.domain_id.clone(), d2.sqrt())
            })
            .collect())
    }
}

/// Cheap instrumentation of the routing path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub encoder_passes: u64,
    pub head_passes: u64,
    /// Per-element distance work: feature length times domain count.
    pub distance_elems: u64,
}

fn argmin(distances: &[(String, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, d)) in distances.iter().enumerate().skip(1) {
        if *d < distances[best].1 {
            best = i;
        }
    }
    best
}

/// Nearest-mean-feature domain for an image, plus all distances for
/// diagnostics. One encoder pass.
pub fn identify_domain(
    image: &Tensor,
    model: &MultiHeadModel,
    index: &DomainIndex,
) -> Result<(String, Vec<(String, f64)>), InferenceError> {
    index.check_fresh(model)?;
    let encoded = model.encode(image)?;
    let distances = index.distances(&encoded.feature)?;
    let best = argmin(&distances);
    Ok((distances[best].0.clone(), distances))
}

/// Routed prediction: encode once, pick the nearest domain, apply only that
/// head to the shared features.
pub fn predict(
    image: &Tensor,
    model: &MultiHeadModel,
    index: &DomainIndex,
) -> Result<(Tensor, Tensor, String), InferenceError> {
    let mut counter = OpCounter::default();
    predict_counted(image, model, index, &mut counter)
}

/// [`predict`] with operation counting for overhead checks.
pub fn predict_counted(
    image: &Tensor,
    model: &MultiHeadModel,
    index: &DomainIndex,
    counter: &mut OpCounter,
) -> Result<(Tensor, Tensor, String), InferenceError> {
    index.check_fresh(model)?;
    let encoded = model.encode(image)?;
    counter.encoder_passes += 1;
    let distances = index.distances(&encoded.feature)?;
    counter.distance_elems += (encoded.feature.numel() * index.entries.len()) as u64;
    let chosen = distances[argmin(&distances)].0.clone();
    let (depth, uncertainty) = model.apply_head(&chosen, &encoded.fused)?;
    counter.head_passes += 1;
    Ok((depth, uncertainty, chosen))
}

/// Routed-vs-oracle evaluation of one domain.
#[derive(Debug, Clone)]
pub struct DomainRouting {
    pub domain_id: String,
    /// Fraction of this domain's images routed to its own head.
    pub routing_accuracy: f64,
    pub oracle: MetricsRecord,
    pub routed: MetricsRecord,
}

#[derive(Debug, Clone)]
pub struct RoutingReport {
    /// Index registration order; confusion rows/columns follow it.
    pub labels: Vec<String>,
    /// `confusion[true][chosen]` image counts.
    pub confusion: Vec<Vec<usize>>,
    pub per_domain: Vec<DomainRouting>,
}

impl RoutingReport {
    pub fn confusion_csv(&self) -> Vec<String> {
        let mut rows = vec![format!("true_domain,{}", self.labels.join(","))];
        for (i, label) in self.labels.iter().enumerate() {
            let counts: Vec<String> = self.confusion[i].iter().map(|c| c.to_string()).collect();
            rows.push(format!("{label},{}", counts.join(",")));
        }
        rows
    }
}

/// Routes every test image, recording confusion counts and metrics under
/// learned routing versus forced (oracle) head selection.
pub fn batch_evaluate_routing(
    test_sets: &[(String, &crate::data::Dataset)],
    model: &MultiHeadModel,
    index: &DomainIndex,
) -> Result<RoutingReport, InferenceError> {
    index.check_fresh(model)?;
    let labels = index.domain_ids();
    let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
    let mut per_domain = Vec::with_capacity(test_sets.len());
    for (true_domain, ds) in test_sets {
        let true_idx = labels
            .iter()
            .position(|l| l == true_domain)
            .ok_or_else(|| InferenceError::UnknownDomain { domain: true_domain.clone() })?;
        let rows: Vec<(usize, MetricsRecord, MetricsRecord)> = ds
            .samples
            .par_iter()
            .map(|s| {
                // One encoder pass serves routing, routed head, and oracle head.
                let encoded = model.encode(&s.image)?;
                let distances = index.distances(&encoded.feature)?;
                let chosen = argmin(&distances);
                let (routed_depth, _) = model.apply_head(&labels[chosen], &encoded.fused)?;
                let (oracle_depth, _) = model.apply_head(true_domain, &encoded.fused)?;
                let routed = metrics::compute_metrics(&routed_depth, &s.depth, &s.mask)?;
                let oracle = metrics::compute_metrics(&oracle_depth, &s.depth, &s.mask)?;
                Ok::<_, InferenceError>((chosen, routed, oracle))
            })
            .collect::<Result<_, _>>()?;
        let mut hits = 0usize;
        let mut routed_records = Vec::with_capacity(rows.len());
        let mut oracle_records = Vec::with_capacity(rows.len());
        for (chosen, routed, oracle) in rows {
            confusion[true_idx][chosen] += 1;
            if chosen == true_idx {
                hits += 1;
            }
            routed_records.push(routed);
            oracle_records.push(oracle);
        }
        per_domain.push(DomainRouting {
            domain_id: true_domain.clone(),
            routing_accuracy: hits as f64 / ds.len() as f64,
            oracle: metrics::aggregate(&oracle_records)?,
            routed: metrics::aggregate(&routed_records)?,
        });
    }
    Ok(RoutingReport { labels, confusion, per_domain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, preset_by_name};
    use crate::model::EncoderConfig;
    use crate::replay::{build_replay, compute_mean_feature, ReplayStore};

    fn model_ab() -> MultiHeadModel {
        let mut m = MultiHeadModel::build_model(
            EncoderConfig::default(),
            &preset_by_name("indoor_a").unwrap(),
            5,
        )
        .unwrap();
        m.add_head(&preset_by_name("outdoor_b").unwrap(), 6).unwrap();
        m
    }

    fn index_for(model: &MultiHeadModel, seeds: (u64, u64)) -> (DomainIndex, ReplayStore) {
        let mut store = ReplayStore::new();
        for (name, seed) in [("indoor_a", seeds.0), ("outdoor_b", seeds.1)] {
            let spec = preset_by_name(name).unwrap();
            let ds = generate_domain(&spec, 4, (16, 16), seed).unwrap();
            let mut entry = build_replay(&ds, 3, seed).unwrap();
            compute_mean_feature(&mut entry, model).unwrap();
            store.push(entry);
        }
        (DomainIndex::from_store(&store).unwrap(), store)
    }

    fn image(seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![3, 16, 16], (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn singleton_index_always_wins() {
        let m = MultiHeadModel::build_model(
            EncoderConfig::default(),
            &preset_by_name("indoor_a").unwrap(),
            5,
        )
        .unwrap();
        let spec = preset_by_name("indoor_a").unwrap();
        let ds = generate_domain(&spec, 3, (16, 16), 1).unwrap();
        let mut entry = build_replay(&ds, 2, 1).unwrap();
        compute_mean_feature(&mut entry, &m).unwrap();
        let mut store = ReplayStore::new();
        store.push(entry);
        let index = DomainIndex::from_store(&store).unwrap();
        for seed in 0..5 {
            let (domain, distances) = identify_domain(&image(seed), &m, &index).unwrap();
            assert_eq!(domain, "indoor_a");
            assert_eq!(distances.len(), 1);
            assert!(distances[0].1 >= 0.0);
        }
    }

    #[test]
    fn exact_mean_feature_gives_zero_distance() {
        let m = model_ab();
        let (mut index, _) = index_for(&m, (1, 2));
        // Plant a mean feature equal to a known image's pooled feature.
        let img = image(3);
        let feature = m.encode(&img).unwrap().feature;
        index.entries[1].mean_feature = feature;
        let (domain, distances) = identify_domain(&img, &m, &index).unwrap();
        assert_eq!(domain, "outdoor_b");
        assert_eq!(distances[1].1, 0.0);
        assert!(distances[0].1 > 0.0);
    }

    #[test]
    fn ties_break_toward_earliest_registration() {
        let m = model_ab();
        let (mut index, _) = index_for(&m, (1, 2));
        let img = image(4);
        let feature = m.encode(&img).unwrap().feature;
        index.entries[0].mean_feature = feature.clone();
        index.entries[1].mean_feature = feature;
        let (domain, distances) = identify_domain(&img, &m, &index).unwrap();
        assert_eq!(domain, "indoor_a");
        assert_eq!(distances[0].1, distances[1].1);
    }

    #[test]
    fn argmin_is_invariant_under_monotone_rescaling() {
        let m = model_ab();
        let (index, _) = index_for(&m, (1, 2));
        for seed in 0..6 {
            let (_, distances) = identify_domain(&image(seed), &m, &index).unwrap();
            let plain = argmin(&distances);
            let squared: Vec<(String, f64)> =
                distances.iter().map(|(d, v)| (d.clone(), 3.0 * v * v + 1.0)).collect();
            assert_eq!(plain, argmin(&squared));
        }
    }

    #[test]
    fn stale_index_is_refused() {
        let mut m = model_ab();
        let (index, _) = index_for(&m, (1, 2));
        m.bump_version();
        assert!(matches!(
            identify_domain(&image(0), &m, &index),
            Err(InferenceError::StaleIndex { .. })
        ));
        assert!(matches!(
            predict(&image(0), &m, &index),
            Err(InferenceError::StaleIndex { .. })
        ));
    }

    #[test]
    fn predict_composes_identify_and_forward_head() {
        let m = model_ab();
        let (index, _) = index_for(&m, (1, 2));
        let img = image(7);
        let (depth, s, chosen) = predict(&img, &m, &index).unwrap();
        let (domain, _) = identify_domain(&img, &m, &index).unwrap();
        assert_eq!(chosen, domain);
        let (d_ref, s_ref, _) = m.forward_head(&img, &chosen).unwrap();
        for (a, b) in depth.data().iter().zip(d_ref.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in s.data().iter().zip(s_ref.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn routed_outdoor_depth_stays_in_outdoor_range() {
        let m = model_ab();
        let (mut index, _) = index_for(&m, (1, 2));
        let spec = preset_by_name("outdoor_b").unwrap();
        let ds = generate_domain(&spec, 2, (16, 16), 9).unwrap();
        // Force routing to outdoor by planting its feature.
        index.entries[1].mean_feature = m.encode(&ds.samples[0].image).unwrap().feature;
        let (depth, _, chosen) = predict(&ds.samples[0].image, &m, &index).unwrap();
        assert_eq!(chosen, "outdoor_b");
        assert!(depth.data().iter().all(|&v| (0.0..=80.0).contains(&v)));
    }

    #[test]
    fn routing_overhead_is_one_encode_plus_distances() {
        let m = model_ab();
        let (index, _) = index_for(&m, (1, 2));
        let mut counter = OpCounter::default();
        predict_counted(&image(1), &m, &index, &mut counter).unwrap();
        assert_eq!(counter.encoder_passes, 1);
        assert_eq!(counter.head_passes, 1);
        assert_eq!(counter.distance_elems, (16 * 2) as u64);
    }

    #[test]
    fn confusion_rows_sum_to_test_set_sizes() {
        let m = model_ab();
        let (index, _) = index_for(&m, (1, 2));
        let ds_a = generate_domain(&preset_by_name("indoor_a").unwrap(), 5, (16, 16), 21).unwrap();
        let ds_b = generate_domain(&preset_by_name("outdoor_b").unwrap(), 7, (16, 16), 22).unwrap();
        let report = batch_evaluate_routing(
            &[("indoor_a".to_string(), &ds_a), ("outdoor_b".to_string(), &ds_b)],
            &m,
            &index,
        )
        .unwrap();
        assert_eq!(report.confusion[0].iter().sum::<usize>(), 5);
        assert_eq!(report.confusion[1].iter().sum::<usize>(), 7);
        let csv = report.confusion_csv();
        assert_eq!(csv.len(), 3);
        assert!(csv[0].starts_with("true_domain,"));
    }

    #[test]
    fn oracle_column_equals_forced_head_evaluation() {
        let m = model_ab();
        let (index, _) = index_for(&m, (1, 2));
        let ds_a = generate_domain(&preset_by_name("indoor_a").unwrap(), 4, (16, 16), 31).unwrap();
        let report =
            batch_evaluate_routing(&[("indoor_a".to_string(), &ds_a)], &m, &index).unwrap();
        let forced = crate::trainer::evaluate_model(&m, &[("indoor_a".to_string(), &ds_a)]).unwrap();
        assert_eq!(report.per_domain[0].oracle, forced[0].1);
    }

    #[test]
    fn standardized_distances_still_route_consistently() {
        let m = model_ab();
        let (mut index, _) = index_for(&m, (1, 2));
        index.standardize = true;
        let (_, distances) = identify_domain(&image(2), &m, &index).unwrap();
        assert!(distances.iter().all(|(_, d)| d.is_finite() && *d >= 0.0));
    }
}
