//! Per-domain retained sample subsets and their mean encoder features.
//!
//! Each learned domain keeps a small uniform random subset of its training
//! data. The subset is replayed during later stages and doubles as the
//! estimator of the domain's mean feature vector, which online inference
//! uses for nearest-domain routing. Entries remember the model version their
//! mean feature was computed with, so a stale feature is detectable.

use crate::data::{Dataset, Sample};
use crate::format::{FileKind, FormatError, Reader, Writer};
use crate::model::{ModelError, MultiHeadModel};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::path::Path;

/// Default number of samples retained per domain.
pub const DEFAULT_RETENTION_CAP: usize = 50;

#[derive(Debug)]
pub enum ReplayError {
    EmptyDataset,
    EmptyEntry,
    /// Batch size must be at least 1.
    BadBatchSize { n: usize },
    Format(FormatError),
    Model(ModelError),
}

impl fmt::Display for ReplayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyDataset => write!(f, "cannot build replay from an empty dataset"),
            Self::EmptyEntry => write!(f, "replay entry holds no samples"),
            Self::BadBatchSize { n } => write!(f, "batch size {n} must be >= 1"),
            Self::Format(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ReplayError {}

impl From<FormatError> for ReplayError {
    fn from(e: FormatError) -> Self {
        Self::Format(e)
    }
}

impl From<ModelError> for ReplayError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// Retained subset of one domain plus its mean feature bookkeeping.
#[derive(Debug, Clone)]
pub struct ReplayEntry {
    pub domain_id: String,
    pub retention_cap: usize,
    pub selection_seed: u64,
    /// Ascending source-dataset indices of the retained samples.
    pub source_indices: Vec<usize>,
    pub samples: Vec<Sample>,
    /// Whether this domain's depth loss uses median scale normalization.
    pub scale_variant: bool,
    pub mean_feature: Option<Tensor>,
    /// Model version the mean feature was computed with.
    pub feature_version: Option<u64>,
}

impl ReplayEntry {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True when the stored mean feature does not match the model's current
    /// parameter generation.
    pub fn feature_is_stale(&self, model: &MultiHeadModel) -> bool {
        self.feature_version != Some(model.version_tag())
    }
}

/// Uniform subset without replacement, deterministic in `seed` and dependent
/// only on the dataset length, not its iteration order.
pub fn build_replay(dataset: &Dataset, cap: usize, seed: u64) -> Result<ReplayEntry, ReplayError> {
    let n = dataset.len();
    if n == 0 {
        return Err(ReplayError::EmptyDataset);
    }
    let keep = cap.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first `keep` slots become the chosen subset.
    for i in 0..keep {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..keep].to_vec();
    chosen.sort_unstable();
    let samples = chosen.iter().map(|&i| dataset.samples[i].clone()).collect();
    Ok(ReplayEntry {
        domain_id: dataset.spec.domain_id.clone(),
        retention_cap: cap,
        selection_seed: seed,
        source_indices: chosen,
        samples,
        scale_variant: dataset.spec.scale_variant,
        mean_feature: None,
        feature_version: None,
    })
}

/// Mean pooled encoder feature over the retained samples; records the model
/// version it was computed with.
pub fn compute_mean_feature(entry: &mut ReplayEntry, model: &MultiHeadModel) -> Result<Tensor, ReplayError> {
    if entry.is_empty() {
        return Err(ReplayError::EmptyEntry);
    }
    let features: Vec<Tensor> = entry
        .samples
        .par_iter()
        .map(|s| model.encode(&s.image).map(|e| e.feature))
        .collect::<Result<_, _>>()?;
    let dim = features[0].numel();
    let mut acc = vec![0.0; dim];
    for f in &features {
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / features.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    let mean = Tensor::new(vec![dim], acc).expect("finite mean feature");
    entry.mean_feature = Some(mean.clone());
    entry.feature_version = Some(model.version_tag());
    Ok(mean)
}

/// Uniform draw with replacement, deterministic in `seed`.
pub fn sample_batch<'a>(entry: &'a ReplayEntry, n: usize, seed: u64) -> Result<Vec<&'a Sample>, ReplayError> {
    if n == 0 {
        return Err(ReplayError::BadBatchSize { n });
    }
    if entry.is_empty() {
        return Err(ReplayError::EmptyEntry);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| &entry.samples[rng.gen_range(0..entry.samples.len())]).collect())
}

/// All domains' retained subsets, in learning order.
#[derive(Debug, Clone, Default)]
pub struct ReplayStore {
    entries: Vec<ReplayEntry>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ReplayEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ReplayEntry] {
        &mut self.entries
    }

    pub fn get(&self, domain_id: &str) -> Option<&ReplayEntry> {
        self.entries.iter().find(|e| e.domain_id == domain_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Recomputes every entry's mean feature with the given model.
    pub fn refresh_mean_features(&mut self, model: &MultiHeadModel) -> Result<(), ReplayError> {
        for entry in &mut self.entries {
            compute_mean_feature(entry, model)?;
        }
        Ok(())
    }

    /// One file per domain under `dir`, named `replay_<domain>.rpl`.
    pub fn save(&self, dir: &Path) -> Result<(), ReplayError> {
        std::fs::create_dir_all(dir).map_err(|e| ReplayError::Format(e.into()))?;
        for entry in &self.entries {
            save_replay_entry(entry, &dir.join(format!("replay_{}.rpl", entry.domain_id)))?;
        }
        Ok(())
    }

    /// Loads `replay_*.rpl` files from `dir` in lexicographic order; learning
    /// order is restored by the caller if it matters.
    pub fn load(dir: &Path) -> Result<Self, ReplayError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| ReplayError::Format(e.into()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("replay_") && n.ends_with(".rpl"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        let mut store = Self::new();
        for p in paths {
            store.push(load_replay_entry(&p)?);
        }
        Ok(store)
    }
}

pub fn replay_entry_to_bytes(entry: &ReplayEntry) -> Vec<u8> {
    let mut w = Writer::new(FileKind::Replay);
    w.string(&entry.domain_id);
    w.u64(entry.retention_cap as u64);
    w.u64(entry.selection_seed);
    w.u8(u8::from(entry.scale_variant));
    match entry.feature_version {
        Some(v) => {
            w.u8(1);
            w.u64(v);
        }
        None => w.u8(0),
    }
    w.u64(entry.source_indices.len() as u64);
    for &i in &entry.source_indices {
        w.u64(i as u64);
    }
    w.u64(entry.samples.len() as u64);
    for s in &entry.samples {
        w.tensor(&s.image);
        w.tensor(&s.depth);
        let mask: Vec<u8> = s.mask.data().iter().map(|&m| u8::from(m != 0.0)).collect();
        w.u8_slice(&mask);
    }
    match &entry.mean_feature {
        Some(f) => {
            w.u8(1);
            w.tensor(f);
        }
        None => w.u8(0),
    }
    w.into_bytes()
}

pub fn replay_entry_from_bytes(bytes: &[u8]) -> Result<ReplayEntry, ReplayError> {
    let mut r = Reader::open(bytes, FileKind::Replay)?;
    let domain_id = r.string()?;
    let retention_cap = r.u64()? as usize;
    let selection_seed = r.u64()?;
    let scale_variant = r.u8()? != 0;
    let feature_version = if r.u8()? == 1 { Some(r.u64()?) } else { None };
    let n_indices = r.u64()? as usize;
    let mut source_indices = Vec::with_capacity(n_indices);
    for _ in 0..n_indices {
        source_indices.push(r.u64()? as usize);
    }
    let n_samples = r.u64()? as usize;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let image = r.tensor()?;
        let depth = r.tensor()?;
        let at = r.offset();
        let mask_bytes = r.u8_slice()?;
        if mask_bytes.len() != depth.numel() {
            return Err(FormatError::Corrupt {
                offset: at,
                detail: format!("mask length {} does not match depth {}", mask_bytes.len(), depth.numel()),
            }
            .into());
        }
        let mask = Tensor::new(depth.shape().to_vec(), mask_bytes.iter().map(|&b| f64::from(b)).collect())
            .map_err(|e| FormatError::Corrupt { offset: at, detail: format!("bad mask: {e}") })?;
        samples.push(Sample { image, depth, mask });
    }
    let mean_feature = if r.u8()? == 1 { Some(r.tensor()?) } else { None };
    r.expect_eof()?;
    Ok(ReplayEntry {
        domain_id,
        retention_cap,
        selection_seed,
        source_indices,
        samples,
        scale_variant,
        mean_feature,
        feature_version,
    })
}

pub fn save_replay_entry(entry: &ReplayEntry, path: &Path) -> Result<(), ReplayError> {
    std::fs::write(path, replay_entry_to_bytes(entry)).map_err(|e| ReplayError::Format(e.into()))
}

pub fn load_replay_entry(path: &Path) -> Result<ReplayEntry, ReplayError> {
    let bytes = std::fs::read(path).map_err(|e| ReplayError::Format(e.into()))?;
    replay_entry_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, preset_by_name};
    use crate::model::{EncoderConfig, MultiHeadModel};

    fn dataset(n: usize, seed: u64) -> Dataset {
        let spec = preset_by_name("indoor_a").unwrap();
        generate_domain(&spec, n, (16, 16), seed).unwrap()
    }

    #[test]
    fn caps_at_dataset_size_without_duplicates() {
        let ds = dataset(30, 1);
        let entry = build_replay(&ds, 50, 2).unwrap();
        assert_eq!(entry.len(), 30);
        let entry = build_replay(&ds, 12, 2).unwrap();
        assert_eq!(entry.len(), 12);
        let mut sorted = entry.source_indices.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(entry.source_indices.iter().all(|&i| i < 30));
    }

    #[test]
    fn selection_is_deterministic_in_seed() {
        let ds = dataset(40, 3);
        let a = build_replay(&ds, 10, 7).unwrap();
        let b = build_replay(&ds, 10, 7).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        let c = build_replay(&ds, 10, 8).unwrap();
        assert_ne!(a.source_indices, c.source_indices);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut ds = dataset(3, 1);
        ds.samples.clear();
        assert!(matches!(build_replay(&ds, 5, 1), Err(ReplayError::EmptyDataset)));
    }

    fn model() -> MultiHeadModel {
        MultiHeadModel::build_model(EncoderConfig::default(), &preset_by_name("indoor_a").unwrap(), 5).unwrap()
    }

    #[test]
    fn mean_of_single_sample_is_its_feature() {
        let ds = dataset(5, 2);
        let mut entry = build_replay(&ds, 1, 1).unwrap();
        let m = model();
        let mean = compute_mean_feature(&mut entry, &m).unwrap();
        let direct = m.encode(&entry.samples[0].image).unwrap().feature;
        assert_eq!(mean, direct);
        assert_eq!(entry.feature_version, Some(m.version_tag()));
        assert!(!entry.feature_is_stale(&m));
    }

    #[test]
    fn mean_matches_brute_force_average() {
        let ds = dataset(50, 9);
        let mut entry = build_replay(&ds, 50, 4).unwrap();
        let m = model();
        let mean = compute_mean_feature(&mut entry, &m).unwrap();
        // Brute force: collect every feature, average each coordinate.
        let feats: Vec<Vec<f64>> = entry
            .samples
            .iter()
            .map(|s| m.encode(&s.image).unwrap().feature.data().to_vec())
            .collect();
        for d in 0..mean.numel() {
            let avg: f64 = feats.iter().map(|f| f[d]).sum::<f64>() / feats.len() as f64;
            assert!((mean.data()[d] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_feature_is_detected_after_version_bump() {
        let ds = dataset(4, 2);
        let mut entry = build_replay(&ds, 4, 1).unwrap();
        let mut m = model();
        compute_mean_feature(&mut entry, &m).unwrap();
        assert!(!entry.feature_is_stale(&m));
        m.bump_version();
        assert!(entry.feature_is_stale(&m));
    }

    #[test]
    fn batch_of_one_from_singleton_entry() {
        let ds = dataset(5, 2);
        let entry = build_replay(&ds, 1, 1).unwrap();
        let batch = sample_batch(&entry, 1, 0).unwrap();
        assert_eq!(batch[0], &entry.samples[0]);
        assert!(matches!(sample_batch(&entry, 0, 0), Err(ReplayError::BadBatchSize { .. })));
    }

    #[test]
    fn batch_draws_are_uniform_within_three_sigma() {
        let ds = dataset(10, 6);
        let entry = build_replay(&ds, 10, 1).unwrap();
        let draws = 100_000;
        let batch = sample_batch(&entry, draws, 12).unwrap();
        let mut hist = vec![0usize; entry.len()];
        for s in batch {
            let idx = entry.samples.iter().position(|e| e == s).unwrap();
            hist[idx] += 1;
        }
        let expected = draws as f64 / entry.len() as f64;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for (i, &count) in hist.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() < 3.0 * sigma,
                "bucket {i}: {count} vs {expected} +/- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn batch_is_deterministic_in_seed() {
        let ds = dataset(8, 6);
        let entry = build_replay(&ds, 8, 1).unwrap();
        let a = sample_batch(&entry, 16, 5).unwrap();
        let b = sample_batch(&entry, 16, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip_reproduces_identical_bytes() {
        let ds = dataset(6, 8);
        let mut entry = build_replay(&ds, 4, 3).unwrap();
        compute_mean_feature(&mut entry, &model()).unwrap();
        let bytes = replay_entry_to_bytes(&entry);
        let back = replay_entry_from_bytes(&bytes).unwrap();
        assert_eq!(replay_entry_to_bytes(&back), bytes);
        assert_eq!(back.domain_id, entry.domain_id);
        assert_eq!(back.source_indices, entry.source_indices);
        assert_eq!(back.feature_version, entry.feature_version);
        for (a, b) in back.samples.iter().zip(&entry.samples) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_replay_file_reports_offset() {
        let ds = dataset(3, 8);
        let entry = build_replay(&ds, 2, 3).unwrap();
        let mut bytes = replay_entry_to_bytes(&entry);
        bytes.truncate(bytes.len() - 5);
        match replay_entry_from_bytes(&bytes) {
            Err(ReplayError::Format(FormatError::Corrupt { offset, .. })) => assert!(offset > 0),
            other => panic!("expected corrupt error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn store_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReplayStore::new();
        for (i, name) in ["indoor_a", "indoor_c"].iter().enumerate() {
            let spec = preset_by_name(name).unwrap();
            let ds = generate_domain(&spec, 4, (16, 16), i as u64).unwrap();
            store.push(build_replay(&ds, 3, i as u64).unwrap());
        }
        store.save(dir.path()).unwrap();
        let loaded = ReplayStore::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.get("indoor_a").is_some());
        assert!(loaded.get("indoor_c").is_some());
    }
}
