//! Staged training: first-domain acquisition, lifelong stages that preserve
//! earlier domains through consistency and replay, and the two reference
//! strategies (plain fine-tuning, freeze-and-learn).
//!
//! A stage iterates over shuffled batches. Every sample gets its own tape;
//! gradients are averaged in index order, so identical inputs and seeds give
//! bit-identical trajectories regardless of thread scheduling. Old-domain
//! consistency targets come from a frozen snapshot evaluated on the current
//! batch images; replay batches are drawn from the per-domain retained sets.

use crate::data::Dataset;
use crate::graph::Graph;
use crate::losses::{self, LossError, LossWeights};
use crate::metrics::{self, CurvePoint, MetricsError, MetricsRecord};
use crate::model::{ModelError, ModelSnapshot, MultiHeadModel};
use crate::replay::{self, ReplayError, ReplayStore};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Full objective: depth loss + weighted consistency + replay.
    Ours,
    /// Fine-tuning: new-domain loss only, nothing protected.
    FineTune,
    /// Freeze-and-learn: only the new head trains.
    FreezeAndLearn,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ours => "ours",
            Self::FineTune => "ft",
            Self::FreezeAndLearn => "fal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_halving_period_epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub strategy: Strategy,
    pub seed: u64,
    /// Samples retained per domain when the stage ends.
    pub replay_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 1e-4,
            lr_halving_period_epochs: 5,
            batch_size: 8,
            weights: LossWeights::default(),
            strategy: Strategy::Ours,
            seed: 0,
            replay_cap: replay::DEFAULT_RETENTION_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig { detail: "batch_size must be >= 1".into() });
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::BadConfig { detail: format!("base_lr {} must be positive", self.base_lr) });
        }
        if self.lr_halving_period_epochs == 0 {
            return Err(TrainError::BadConfig { detail: "lr_halving_period_epochs must be >= 1".into() });
        }
        self.weights.validate().map_err(TrainError::Loss)?;
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index: halved after every period.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    config.base_lr * 0.5_f64.powi((epoch / config.lr_halving_period_epochs) as i32)
}

/// Per-epoch means of the raw loss terms (consistency and replay are summed
/// over old domains before weighting).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub ud: f64,
    pub cons: f64,
    pub replay: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub domain_id: String,
    pub strategy: Strategy,
    pub epoch_losses: Vec<EpochLosses>,
    /// Oracle-routed metrics per learned domain, in learning order.
    pub eval: Vec<(String, MetricsRecord)>,
    /// Informational only; never written into deterministic reports.
    pub wall_time_secs: f64,
}

pub const LOSSES_CSV_HEADER: &str = "stage,epoch,term,value";

/// Rows matching [`LOSSES_CSV_HEADER`], one per epoch per loss term.
pub fn losses_csv_rows(stage: usize, report: &StageReport) -> Vec<String> {
    let mut rows = Vec::new();
    for (epoch, l) in report.epoch_losses.iter().enumerate() {
        rows.push(format!("{stage},{epoch},ud,{}", l.ud));
        rows.push(format!("{stage},{epoch},cons,{}", l.cons));
        rows.push(format!("{stage},{epoch},replay,{}", l.replay));
        rows.push(format!("{stage},{epoch},total,{}", l.total));
    }
    rows
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig { detail: String },
    DomainMismatch { expected: String, found: String },
    MissingReplay { domain: String },
    DuplicateInOrder { domain: String },
    UnknownInOrder { domain: String, known: Vec<String> },
    SnapshotMismatch { detail: String },
    Loss(LossError),
    Model(ModelError),
    Replay(ReplayError),
    Metrics(MetricsError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadConfig { detail } => write!(f, "bad train config: {detail}"),
            Self::DomainMismatch { expected, found } => {
                write!(f, "dataset domain `{found}` does not match model head `{expected}`")
            }
            Self::MissingReplay { domain } => write!(f, "no replay entry for old domain `{domain}`"),
            Self::DuplicateInOrder { domain } => write!(f, "domain `{domain}` repeated in learning order"),
            Self::UnknownInOrder { domain, known } => {
                write!(f, "order references unknown domain `{domain}`; declared: {}", known.join(", "))
            }
            Self::SnapshotMismatch { detail } => write!(f, "old snapshot mismatch: {detail}"),
            Self::Loss(e) => write!(f, "{e}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Replay(e) => write!(f, "{e}"),
            Self::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        Self::Loss(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<ReplayError> for TrainError {
    fn from(e: ReplayError) -> Self {
        Self::Replay(e)
    }
}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        Self::Metrics(e)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const GRAD_CLIP_NORM: f64 = 10.0;

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    /// One update over the trainable subset; gradients are clipped to a
    /// global norm over that subset first.
    fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor], trainable: &[bool], lr: f64) {
        self.t += 1;
        let mut norm_sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if trainable[i] {
                norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = norm_sq.sqrt();
        let scale = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..grads.len() {
            if !trainable[i] {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].1.data_mut();
            for ((m, v), (p, g)) in m.iter_mut().zip(v.iter_mut()).zip(p.iter_mut().zip(grads[i].data())) {
                let g = g * scale;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// shared step machinery
// ---------------------------------------------------------------------------

struct SampleResult {
    grads: Vec<Tensor>,
    ud: f64,
    cons: Vec<(String, f64)>,
}

/// Old-domain terms active in this stage.
struct OldDomain {
    domain_id: String,
    lambda: f64,
    scale_variant: bool,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Forward/backward for one new-domain sample: depth loss on the new head
/// plus weighted consistency against the frozen model on the same image.
fn new_sample_pass(
    model: &MultiHeadModel,
    old: Option<&ModelSnapshot>,
    sample: &crate::data::Sample,
    new_domain: &str,
    normalize_new: bool,
    old_domains: &[OldDomain],
    use_uncertainty: bool,
    uncertainty_consistency: bool,
) -> Result<SampleResult, TrainError> {
    let mut g = Graph::new();
    let mut head_ids: Vec<&str> = vec![new_domain];
    head_ids.extend(old_domains.iter().map(|d| d.domain_id.as_str()));
    let tf = model.forward_on_tape(&mut g, &sample.image, &head_ids)?;

    let new_out = &tf.heads[new_domain];
    let s_node = use_uncertainty.then_some(new_out.uncertainty);
    let ud = losses::uncertainty_depth_loss(&mut g, new_out.depth, s_node, &sample.depth, &sample.mask, normalize_new)?;

    let mut total = ud;
    let mut cons_values = Vec::with_capacity(old_domains.len());
    if !old_domains.is_empty() {
        let snapshot = old.expect("old domains require a snapshot").model();
        let encoded = snapshot.encode(&sample.image)?;
        for od in old_domains {
            let (old_depth, old_s) = snapshot.apply_head(&od.domain_id, &encoded.fused)?;
            let out = &tf.heads[&od.domain_id];
            let include_s = use_uncertainty && uncertainty_consistency;
            let cons = losses::consistency_loss(
                &mut g,
                out.depth,
                include_s.then_some(out.uncertainty),
                &old_depth,
                include_s.then(|| &old_s),
                include_s,
            )?;
            let lambda_c = g.constant_scalar(od.lambda).map_err(LossError::Graph)?;
            let weighted = g.mul(lambda_c, cons).map_err(LossError::Graph)?;
            total = g.add(total, weighted).map_err(LossError::Graph)?;
            cons_values.push((od.domain_id.clone(), g.value(cons).map_err(LossError::Graph)?.item()));
        }
    }
    g.backward(total).map_err(LossError::Graph)?;
    let grads = tf
        .params
        .iter()
        .map(|&p| g.grad(p).map_err(LossError::Graph))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleResult {
        grads,
        ud: g.value(ud).map_err(LossError::Graph)?.item(),
        cons: cons_values,
    })
}

/// Forward/backward of the depth loss for one replayed sample through its
/// own head. Returns raw (unweighted) gradients and value.
fn replay_sample_pass(
    model: &MultiHeadModel,
    sample: &crate::data::Sample,
    domain: &str,
    normalize: bool,
    use_uncertainty: bool,
) -> Result<(Vec<Tensor>, f64), TrainError> {
    let mut g = Graph::new();
    let tf = model.forward_on_tape(&mut g, &sample.image, &[domain])?;
    let out = &tf.heads[domain];
    let s_node = use_uncertainty.then_some(out.uncertainty);
    let loss = losses::replay_loss(&mut g, out.depth, s_node, &sample.depth, &sample.mask, normalize)?;
    g.backward(loss).map_err(LossError::Graph)?;
    let grads = tf
        .params
        .iter()
        .map(|&p| g.grad(p).map_err(LossError::Graph))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((grads, g.value(loss).map_err(LossError::Graph)?.item()))
}

fn zero_grads_like(model: &MultiHeadModel) -> Vec<Tensor> {
    model
        .param_entries()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect()
}

fn accumulate(acc: &mut [Tensor], grads: &[Tensor], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
            *av += scale * gv;
        }
    }
}

/// Oracle-routed evaluation: one record per `(domain, test set)` pair, the
/// unweighted mean of per-sample metrics.
pub fn evaluate_model(
    model: &MultiHeadModel,
    test_sets: &[(String, &Dataset)],
) -> Result<Vec<(String, MetricsRecord)>, TrainError> {
    let mut out = Vec::with_capacity(test_sets.len());
    for (domain, ds) in test_sets {
        let records: Vec<MetricsRecord> = ds
            .samples
            .par_iter()
            .map(|s| {
                let (depth, _, _) = model.forward_head(&s.image, domain)?;
                metrics::compute_metrics(&depth, &s.depth, &s.mask).map_err(TrainError::Metrics)
            })
            .collect::<Result<_, _>>()?;
        out.push((domain.clone(), metrics::aggregate(&records)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// stage drivers
// ---------------------------------------------------------------------------

/// Knowledge acquisition on the very first domain. The model must hold
/// exactly this domain's head. Returns the replay entry (mean feature
/// already computed with the final encoder) and the stage report.
pub fn train_first_domain(
    model: &mut MultiHeadModel,
    dataset: &Dataset,
    config: &TrainConfig,
    test_sets: &[(String, &Dataset)],
) -> Result<(replay::ReplayEntry, StageReport), TrainError> {
    config.validate()?;
    let start = Instant::now();
    let domain = dataset.spec.domain_id.clone();
    let ids = model.domain_ids();
    if ids != vec![domain.clone()] {
        return Err(TrainError::DomainMismatch {
            expected: ids.join("+"),
            found: domain,
        });
    }
    let use_uncertainty = config.weights.enable_uncertainty;
    let normalize = dataset.spec.scale_variant;
    let mut adam = Adam::new(&model.param_entries().iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>());
    let trainable = vec![true; model.param_entries().len()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let order = shuffled_indices(dataset.len(), mix(config.seed, epoch as u64));
        let mut ud_sum = 0.0;
        let mut iters = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    new_sample_pass(model, None, &dataset.samples[i], &domain, normalize, &[], use_uncertainty, false)
                })
                .collect::<Result<_, _>>()?;
            let mut acc = zero_grads_like(model);
            let inv_b = 1.0 / results.len() as f64;
            let mut ud_batch = 0.0;
            for r in &results {
                accumulate(&mut acc, &r.grads, inv_b);
                ud_batch += r.ud * inv_b;
            }
            let mut entries = model.param_entries_mut();
            adam.step(&mut entries, &acc, &trainable, lr);
            ud_sum += ud_batch;
            iters += 1;
        }
        let ud = if iters > 0 { ud_sum / iters as f64 } else { 0.0 };
        epoch_losses.push(EpochLosses { ud, cons: 0.0, replay: 0.0, total: ud });
    }

    model.bump_version();
    let mut entry = replay::build_replay(dataset, config.replay_cap, mix(config.seed, 0x5EED))?;
    replay::compute_mean_feature(&mut entry, model)?;
    let eval = evaluate_model(model, test_sets)?;
    Ok((
        entry,
        StageReport {
            domain_id: dataset.spec.domain_id.clone(),
            strategy: config.strategy,
            epoch_losses,
            eval,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// One lifelong stage on a new domain. The new head must already exist; the
/// snapshot holds the frozen pre-stage model. Under `Ours`, every old domain
/// needs a replay entry and a lambda. `FineTune` trains everything with zero
/// protection; `FreezeAndLearn` trains only the new head. At the end the
/// store gains the new domain's entry and every mean feature is rebuilt with
/// the final encoder.
pub fn lifelong_stage(
    model: &mut MultiHeadModel,
    old_snapshot: &ModelSnapshot,
    new_dataset: &Dataset,
    stores: &mut ReplayStore,
    config: &TrainConfig,
    test_sets: &[(String, &Dataset)],
) -> Result<StageReport, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let new_domain = new_dataset.spec.domain_id.clone();
    model.head(&new_domain)?;
    let old_ids: Vec<String> = old_snapshot.model().domain_ids();
    if old_ids.contains(&new_domain) {
        return Err(TrainError::SnapshotMismatch {
            detail: format!("snapshot already contains `{new_domain}`"),
        });
    }
    let expected: Vec<String> = model
        .domain_ids()
        .into_iter()
        .filter(|d| d != &new_domain)
        .collect();
    if old_ids != expected {
        return Err(TrainError::SnapshotMismatch {
            detail: format!("snapshot domains {old_ids:?}, model minus new {expected:?}"),
        });
    }

    // Resolve per-strategy protection terms.
    let protecting = matches!(config.strategy, Strategy::Ours);
    let mut old_domains: Vec<OldDomain> = Vec::new();
    if protecting {
        for id in &old_ids {
            let lambda = config.weights.lambda(id)?;
            let entry = stores.get(id).ok_or_else(|| TrainError::MissingReplay { domain: id.clone() })?;
            if lambda > 0.0 {
                old_domains.push(OldDomain {
                    domain_id: id.clone(),
                    lambda,
                    scale_variant: entry.scale_variant,
                });
            }
        }
    }
    let replay_active = protecting && config.weights.enable_replay;
    let use_uncertainty = config.weights.enable_uncertainty;
    let uncertainty_consistency = config.weights.enable_uncertainty_consistency;
    let normalize_new = new_dataset.spec.scale_variant;

    let trainable: Vec<bool> = match config.strategy {
        Strategy::FreezeAndLearn => model
            .param_entries()
            .iter()
            .map(|(name, _)| MultiHeadModel::head_of_param(name) == Some(new_domain.as_str()))
            .collect(),
        _ => vec![true; model.param_entries().len()],
    };
    let mut adam = Adam::new(&model.param_entries().iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut iter_global: u64 = 0;

    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let order = shuffled_indices(new_dataset.len(), mix(config.seed, epoch as u64));
        let (mut ud_sum, mut cons_sum, mut replay_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut iters = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    new_sample_pass(
                        model,
                        Some(old_snapshot),
                        &new_dataset.samples[i],
                        &new_domain,
                        normalize_new,
                        &old_domains,
                        use_uncertainty,
                        uncertainty_consistency,
                    )
                })
                .collect::<Result<_, _>>()?;
            let mut acc = zero_grads_like(model);
            let inv_b = 1.0 / results.len() as f64;
            let mut ud_batch = 0.0;
            let mut cons_batch: BTreeMap<String, f64> = BTreeMap::new();
            for r in &results {
                accumulate(&mut acc, &r.grads, inv_b);
                ud_batch += r.ud * inv_b;
                for (d, v) in &r.cons {
                    *cons_batch.entry(d.clone()).or_insert(0.0) += v * inv_b;
                }
            }

            let mut replay_batch: BTreeMap<String, f64> = BTreeMap::new();
            if replay_active {
                for (k, od) in old_domains.iter().enumerate() {
                    let entry = stores
                        .get(&od.domain_id)
                        .ok_or_else(|| TrainError::MissingReplay { domain: od.domain_id.clone() })?;
                    let batch_seed = mix(config.seed, mix(iter_global, 0xB17C + k as u64));
                    let batch = replay::sample_batch(entry, config.batch_size, batch_seed)?;
                    let rep_results: Vec<(Vec<Tensor>, f64)> = batch
                        .par_iter()
                        .map(|s| replay_sample_pass(model, s, &od.domain_id, od.scale_variant, use_uncertainty))
                        .collect::<Result<_, _>>()?;
                    let inv_r = 1.0 / rep_results.len() as f64;
                    let mut value = 0.0;
                    for (grads, v) in &rep_results {
                        accumulate(&mut acc, grads, od.lambda * inv_r);
                        value += v * inv_r;
                    }
                    replay_batch.insert(od.domain_id.clone(), value);
                }
            }

            let mut entries = model.param_entries_mut();
            adam.step(&mut entries, &acc, &trainable, lr);

            // Trace values follow the combined objective exactly.
            let old_terms: Vec<(&str, f64, f64)> = old_domains
                .iter()
                .map(|od| {
                    (
                        od.domain_id.as_str(),
                        cons_batch.get(&od.domain_id).copied().unwrap_or(0.0),
                        replay_batch.get(&od.domain_id).copied().unwrap_or(0.0),
                    )
                })
                .collect();
            let total = losses::total_loss(ud_batch, &old_terms, &config.weights)?;
            ud_sum += ud_batch;
            cons_sum += old_terms.iter().map(|(_, c, _)| c).sum::<f64>();
            replay_sum += old_terms.iter().map(|(_, _, r)| r).sum::<f64>();
            total_sum += total;
            iters += 1;
            iter_global += 1;
        }
        let d = iters.max(1) as f64;
        epoch_losses.push(EpochLosses {
            ud: ud_sum / d,
            cons: cons_sum / d,
            replay: replay_sum / d,
            total: total_sum / d,
        });
    }

    model.bump_version();
    let mut entry = replay::build_replay(new_dataset, config.replay_cap, mix(config.seed, 0x5EED))?;
    replay::compute_mean_feature(&mut entry, model)?;
    stores.push(entry);
    stores.refresh_mean_features(model)?;
    let eval = evaluate_model(model, test_sets)?;
    Ok(StageReport {
        domain_id: new_domain,
        strategy: config.strategy,
        epoch_losses,
        eval,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// sequences
// ---------------------------------------------------------------------------

/// One domain's training and held-out data.
#[derive(Debug, Clone)]
pub struct DomainBundle {
    pub train: Dataset,
    pub test: Dataset,
}

impl DomainBundle {
    pub fn domain_id(&self) -> &str {
        &self.train.spec.domain_id
    }
}

#[derive(Debug, Clone)]
pub struct SequenceReport {
    pub stages: Vec<StageReport>,
    /// All learned domains evaluated after every stage.
    pub per_stage_eval: Vec<Vec<(String, MetricsRecord)>>,
    pub curve: Vec<CurvePoint>,
    /// Unweighted average over domains after the final stage.
    pub final_average: MetricsRecord,
}

/// Runs stages over `order`, evaluating every learned domain after each
/// stage. `configs` holds one config per stage. Missing lambda entries are
/// filled from each domain's `lambda_hint`. Returns the model, the replay
/// store, and the report.
pub fn run_sequence(
    encoder_config: crate::model::EncoderConfig,
    domains: &[DomainBundle],
    order: &[String],
    configs: &[TrainConfig],
    seed: u64,
) -> Result<(MultiHeadModel, ReplayStore, SequenceReport), TrainError> {
    if order.is_empty() {
        return Err(TrainError::BadConfig { detail: "empty learning order".into() });
    }
    if configs.len() != order.len() {
        return Err(TrainError::BadConfig {
            detail: format!("{} configs for {} stages", configs.len(), order.len()),
        });
    }
    let known: Vec<String> = domains.iter().map(|d| d.domain_id().to_string()).collect();
    for (i, id) in order.iter().enumerate() {
        if !known.contains(id) {
            return Err(TrainError::UnknownInOrder { domain: id.clone(), known });
        }
        if order[..i].contains(id) {
            return Err(TrainError::DuplicateInOrder { domain: id.clone() });
        }
    }
    let bundle = |id: &str| domains.iter().find(|d| d.domain_id() == id).unwrap();

    let first = bundle(&order[0]);
    let mut model = MultiHeadModel::build_model(encoder_config, &first.train.spec, mix(seed, 0x40DE1))?;
    let mut stores = ReplayStore::new();
    let mut stages = Vec::with_capacity(order.len());
    let mut per_stage_eval = Vec::with_capacity(order.len());

    for (stage_idx, id) in order.iter().enumerate() {
        let learned: Vec<(String, &Dataset)> = order[..=stage_idx]
            .iter()
            .map(|d| (d.clone(), &bundle(d).test))
            .collect();
        let mut config = configs[stage_idx].clone();
        for past in &order[..stage_idx] {
            let hint = bundle(past).train.spec.lambda_hint;
            config.weights.lambda_per_domain.entry(past.clone()).or_insert(hint);
        }
        let report = if stage_idx == 0 {
            let (entry, report) = train_first_domain(&mut model, &first.train, &config, &learned)?;
            stores.push(entry);
            report
        } else {
            let b = bundle(id);
            let snapshot = model.snapshot();
            model.add_head(&b.train.spec, mix(seed, 0xEADD + stage_idx as u64))?;
            lifelong_stage(&mut model, &snapshot, &b.train, &mut stores, &config, &learned)?
        };
        per_stage_eval.push(report.eval.clone());
        stages.push(report);
    }

    let final_records: Vec<MetricsRecord> = per_stage_eval
        .last()
        .unwrap()
        .iter()
        .map(|(_, r)| *r)
        .collect();
    let final_average = metrics::aggregate(&final_records)?;
    let curve = metrics::forgetting_curve(&per_stage_eval);
    Ok((
        model,
        stores,
        SequenceReport { stages, per_stage_eval, curve, final_average },
    ))
}
