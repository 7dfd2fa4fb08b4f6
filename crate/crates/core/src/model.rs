//! The multi-head depth network: one shared convolutional encoder plus a
//! lightweight two-conv predictor pair (depth and uncertainty) per domain.
//!
//! The encoder downsamples through stride-2 stages, compresses each stage to
//! a few channels, upsamples everything back to input resolution, and
//! concatenates — so heads see a thin full-resolution feature stack and stay
//! tiny next to the encoder. Heads are grown one per domain; adding a head
//! never touches existing parameters.
//!
//! Forward math is shared between the gradient tape and a direct no-tape
//! path, so training-time and inference-time outputs are bit-identical.

use crate::data::DomainSpec;
use crate::format::{FileKind, FormatError, Reader, Writer};
use crate::graph::{Graph, GraphError, NodeId};
use crate::kernels;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// Uncertainty outputs are clamped to this symmetric range.
pub const UNCERTAINTY_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// Channel width after each stride-2 stage.
    pub stage_widths: Vec<usize>,
    /// Total channels of the fused full-resolution feature stack.
    pub fused_feature_channels: usize,
    /// Width of the hidden layer inside every predictor branch.
    pub head_hidden_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stage_widths: vec![8, 16, 32],
            fused_feature_channels: 16,
            head_hidden_channels: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_channels == 0 {
            return Err(ModelError::InvalidConfig { detail: "input_channels must be positive".into() });
        }
        if self.stage_widths.len() < 2 {
            return Err(ModelError::InvalidConfig { detail: "need at least 2 encoder stages".into() });
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidConfig { detail: "zero stage width".into() });
        }
        if self.fused_feature_channels < self.stage_widths.len() {
            return Err(ModelError::InvalidConfig {
                detail: "fused_feature_channels must be at least the stage count".into(),
            });
        }
        if self.head_hidden_channels == 0 {
            return Err(ModelError::InvalidConfig { detail: "head_hidden_channels must be positive".into() });
        }
        Ok(())
    }

    /// Total spatial stride of the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stage_widths.len()
    }

    /// Split of the fused channels across stages, earliest stages first.
    pub fn compression_channels(&self) -> Vec<usize> {
        let n = self.stage_widths.len();
        let base = self.fused_feature_channels / n;
        let extra = self.fused_feature_channels % n;
        (0..n).map(|i| base + usize::from(i < extra)).collect()
    }
}

#[derive(Debug)]
pub enum ModelError {
    InvalidConfig { detail: String },
    DuplicateDomain { domain_id: String },
    UnknownDomain { domain_id: String, known: Vec<String> },
    BadInput { detail: String },
    Graph(GraphError),
    Format(FormatError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidConfig { detail } => write!(f, "invalid model config: {detail}"),
            Self::DuplicateDomain { domain_id } => write!(f, "domain `{domain_id}` already has a head"),
            Self::UnknownDomain { domain_id, known } => {
                write!(f, "no head for domain `{domain_id}`; known domains: {}", known.join(", "))
            }
            Self::BadInput { detail } => write!(f, "bad input: {detail}"),
            Self::Graph(e) => write!(f, "{e}"),
            Self::Format(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        Self::Graph(e)
    }
}

impl From<FormatError> for ModelError {
    fn from(e: FormatError) -> Self {
        Self::Format(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvParams {
    weight: Tensor,
    bias: Tensor,
}

impl ConvParams {
    fn init(rng: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize) -> Self {
        // He-uniform fan-in bound; biases start at zero.
        let bound = (6.0 / (ic * k * k) as f64).sqrt();
        let weight = Tensor::new(
            vec![oc, ic, k, k],
            (0..oc * ic * k * k).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("finite init");
        Self { weight, bias: Tensor::zeros(vec![oc]) }
    }

    fn count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage {
    reduce: ConvParams,
    refine: ConvParams,
    compress: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    pub domain_id: String,
    pub depth_range: (f64, f64),
    depth_hidden: ConvParams,
    depth_out: ConvParams,
    uncertainty_hidden: ConvParams,
    uncertainty_out: ConvParams,
}

impl PredictorHead {
    fn init(rng: &mut ChaCha8Rng, config: &EncoderConfig, domain_id: &str, depth_range: (f64, f64)) -> Self {
        let fused = config.fused_feature_channels;
        let hidden = config.head_hidden_channels;
        Self {
            domain_id: domain_id.to_string(),
            depth_range,
            depth_hidden: ConvParams::init(rng, hidden, fused, 1),
            depth_out: ConvParams::init(rng, 1, hidden, 3),
            uncertainty_hidden: ConvParams::init(rng, hidden, fused, 1),
            uncertainty_out: ConvParams::init(rng, 1, hidden, 3),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.depth_hidden.count()
            + self.depth_out.count()
            + self.uncertainty_hidden.count()
            + self.uncertainty_out.count()
    }
}

/// Shared encoder plus an ordered, growable list of domain heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadModel {
    config: EncoderConfig,
    stages: Vec<EncoderStage>,
    heads: Vec<PredictorHead>,
    version_tag: u64,
}

/// Deep frozen copy of a model; exposes read access only.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    model: MultiHeadModel,
}

impl ModelSnapshot {
    pub fn model(&self) -> &MultiHeadModel {
        &self.model
    }
}

/// Encoder outputs reused across heads in one pass.
pub struct Encoded {
    /// `[fused_feature_channels, h, w]` full-resolution feature stack.
    pub fused: Tensor,
    /// Global average pool of `fused`: one entry per fused channel.
    pub feature: Tensor,
}

/// Parameter counts per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub encoder: usize,
    pub heads: Vec<(String, usize)>,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.encoder + self.heads.iter().map(|(_, n)| n).sum::<usize>()
    }

    pub fn shared_fraction(&self) -> f64 {
        self.encoder as f64 / self.total() as f64
    }
}

/// Head outputs on the tape.
pub struct TapeHeadOutput {
    /// `[h, w]` depth in the head's range.
    pub depth: NodeId,
    /// `[h, w]` clamped log-variance.
    pub uncertainty: NodeId,
}

/// A model bound onto a tape: parameter leaves in canonical order plus the
/// outputs of the requested heads.
pub struct TapeForward {
    /// Aligned with [`MultiHeadModel::param_entries`].
    pub params: Vec<NodeId>,
    pub fused: NodeId,
    pub heads: BTreeMap<String, TapeHeadOutput>,
}

impl MultiHeadModel {
    /// Fresh model with the encoder and exactly one head, deterministically
    /// initialized from `seed`.
    pub fn build_model(config: EncoderConfig, first_domain: &DomainSpec, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comp = config.compression_channels();
        let mut stages = Vec::with_capacity(config.stage_widths.len());
        let mut prev = config.input_channels;
        for (i, &w) in config.stage_widths.iter().enumerate() {
            stages.push(EncoderStage {
                reduce: ConvParams::init(&mut rng, w, prev, 3),
                refine: ConvParams::init(&mut rng, w, w, 3),
                compress: ConvParams::init(&mut rng, comp[i], w, 1),
            });
            prev = w;
        }
        let head = PredictorHead::init(&mut rng, &config, &first_domain.domain_id, first_domain.depth_range);
        Ok(Self { config, stages, heads: vec![head], version_tag: 1 })
    }

    /// Appends a head for a new domain; existing parameters are untouched.
    pub fn add_head(&mut self, domain: &DomainSpec, seed: u64) -> Result<(), ModelError> {
        if self.heads.iter().any(|h| h.domain_id == domain.domain_id) {
            return Err(ModelError::DuplicateDomain { domain_id: domain.domain_id.clone() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = PredictorHead::init(&mut rng, &self.config, &domain.domain_id, domain.depth_range);
        self.heads.push(head);
        self.version_tag += 1;
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn version_tag(&self) -> u64 {
        self.version_tag
    }

    /// Marks a new parameter generation (called when a training stage ends).
    pub fn bump_version(&mut self) {
        self.version_tag += 1;
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.domain_id.clone()).collect()
    }

    pub fn heads(&self) -> &[PredictorHead] {
        &self.heads
    }

    pub fn head(&self, domain_id: &str) -> Result<&PredictorHead, ModelError> {
        self.heads
            .iter()
            .find(|h| h.domain_id == domain_id)
            .ok_or_else(|| ModelError::UnknownDomain {
                domain_id: domain_id.to_string(),
                known: self.domain_ids(),
            })
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { model: self.clone() }
    }

    pub fn param_report(&self) -> ParamReport {
        let encoder = self
            .stages
            .iter()
            .map(|s| s.reduce.count() + s.refine.count() + s.compress.count())
            .sum();
        let heads = self
            .heads
            .iter()
            .map(|h| (h.domain_id.clone(), h.parameter_count()))
            .collect();
        ParamReport { encoder, heads }
    }

    /// Canonical `(name, tensor)` listing: encoder stages in order, then
    /// heads in registration order. Checkpoints, tape bindings, and the
    /// optimizer all follow this order.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (part, conv) in [("reduce", &s.reduce), ("refine", &s.refine), ("compress", &s.compress)] {
                out.push((format!("encoder.stage{i}.{part}.weight"), &conv.weight));
                out.push((format!("encoder.stage{i}.{part}.bias"), &conv.bias));
            }
        }
        for h in &self.heads {
            for (part, conv) in [
                ("depth_hidden", &h.depth_hidden),
                ("depth_out", &h.depth_out),
                ("uncertainty_hidden", &h.uncertainty_hidden),
                ("uncertainty_out", &h.uncertainty_out),
            ] {
                out.push((format!("head.{}.{part}.weight", h.domain_id), &conv.weight));
                out.push((format!("head.{}.{part}.bias", h.domain_id), &conv.bias));
            }
        }
        out
    }

    /// Mutable view in the same canonical order as [`param_entries`].
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            for (part, conv) in [
                ("reduce", &mut s.reduce),
                ("refine", &mut s.refine),
                ("compress", &mut s.compress),
            ] {
                out.push((format!("encoder.stage{i}.{part}.weight"), &mut conv.weight));
                out.push((format!("encoder.stage{i}.{part}.bias"), &mut conv.bias));
            }
        }
        for h in &mut self.heads {
            let id = h.domain_id.clone();
            for (part, conv) in [
                ("depth_hidden", &mut h.depth_hidden),
                ("depth_out", &mut h.depth_out),
                ("uncertainty_hidden", &mut h.uncertainty_hidden),
                ("uncertainty_out", &mut h.uncertainty_out),
            ] {
                out.push((format!("head.{id}.{part}.weight"), &mut conv.weight));
                out.push((format!("head.{id}.{part}.bias"), &mut conv.bias));
            }
        }
        out
    }

    /// True for parameters belonging to the encoder (shared across domains).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    /// The head a parameter belongs to, if any.
    pub fn head_of_param(name: &str) -> Option<&str> {
        name.strip_prefix("head.").and_then(|rest| rest.split('.').next())
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize), ModelError> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.config.input_channels {
            return Err(ModelError::BadInput {
                detail: format!(
                    "image shape {s:?}, expected [{}, h, w]",
                    self.config.input_channels
                ),
            });
        }
        let factor = self.config.downsample_factor();
        if s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(ModelError::BadInput {
                detail: format!("spatial size {}x{} not divisible by {factor}", s[1], s[2]),
            });
        }
        Ok((s[1], s[2]))
    }

    // ---- direct (no-tape) forward ---------------------------------------

    /// One encoder pass: fused full-resolution features plus pooled vector.
    pub fn encode(&self, image: &Tensor) -> Result<Encoded, ModelError> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut fused_parts = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            x = relu_t(&kernels::conv2d_forward(&x, &stage.reduce.weight, &stage.reduce.bias, 2, 1));
            x = relu_t(&kernels::conv2d_forward(&x, &stage.refine.weight, &stage.refine.bias, 1, 1));
            let compressed =
                relu_t(&kernels::conv2d_forward(&x, &stage.compress.weight, &stage.compress.bias, 1, 0));
            fused_parts.push(kernels::upsample_nearest_forward(&compressed, 1 << (i + 1)));
        }
        let refs: Vec<&Tensor> = fused_parts.iter().collect();
        let fused = kernels::concat_channels(&refs);
        let (c, h, w) = (fused.shape()[0], fused.shape()[1], fused.shape()[2]);
        let pooled = kernels::avg_pool2d_forward(&fused, h, w, 1);
        let feature = pooled.reshaped(vec![c]).expect("pooled is [c,1,1]");
        Ok(Encoded { fused, feature })
    }

    /// Applies one head to already-encoded features.
    pub fn apply_head(&self, domain_id: &str, fused: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let head = self.head(domain_id)?;
        let (h, w) = (fused.shape()[1], fused.shape()[2]);
        let d_hidden =
            relu_t(&kernels::conv2d_forward(fused, &head.depth_hidden.weight, &head.depth_hidden.bias, 1, 0));
        let z = kernels::conv2d_forward(&d_hidden, &head.depth_out.weight, &head.depth_out.bias, 1, 1);
        let (lo, hi) = head.depth_range;
        let range = hi - lo;
        let depth_data: Vec<f64> = z.data().iter().map(|&v| lo + range * hard_sigmoid_scalar(v)).collect();
        let depth = Tensor::new(vec![h, w], depth_data).expect("finite depth");

        let u_hidden = relu_t(&kernels::conv2d_forward(
            fused,
            &head.uncertainty_hidden.weight,
            &head.uncertainty_hidden.bias,
            1,
            0,
        ));
        let s_raw =
            kernels::conv2d_forward(&u_hidden, &head.uncertainty_out.weight, &head.uncertainty_out.bias, 1, 1);
        let s_data: Vec<f64> = s_raw
            .data()
            .iter()
            .map(|&v| clamp_scalar(v, -UNCERTAINTY_CLAMP, UNCERTAINTY_CLAMP))
            .collect();
        let uncertainty = Tensor::new(vec![h, w], s_data).expect("finite uncertainty");
        Ok((depth, uncertainty))
    }

    /// Full pass through one head: depth, uncertainty, pooled feature.
    pub fn forward_head(&self, image: &Tensor, domain_id: &str) -> Result<(Tensor, Tensor, Tensor), ModelError> {
        self.head(domain_id)?;
        let encoded = self.encode(image)?;
        let (depth, uncertainty) = self.apply_head(domain_id, &encoded.fused)?;
        Ok((depth, uncertainty, encoded.feature))
    }

    // ---- tape forward -----------------------------------------------------

    /// Binds every parameter as a tape leaf (canonical order) and builds the
    /// forward pass for the requested heads on the shared encoder output.
    pub fn forward_on_tape(
        &self,
        g: &mut Graph,
        image: &Tensor,
        head_ids: &[&str],
    ) -> Result<TapeForward, ModelError> {
        let (h, w) = self.check_image(image)?;
        for id in head_ids {
            self.head(id)?;
        }
        let mut params = Vec::new();
        let mut by_name: BTreeMap<String, NodeId> = BTreeMap::new();
        for (name, tensor) in self.param_entries() {
            let id = g.parameter(tensor.clone())?;
            params.push(id);
            by_name.insert(name, id);
        }
        let image_node = g.input(image.clone())?;

        let mut x = image_node;
        let mut fused_parts = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            let rw = by_name[&format!("encoder.stage{i}.reduce.weight")];
            let rb = by_name[&format!("encoder.stage{i}.reduce.bias")];
            x = g.conv2d(x, rw, rb, 2, 1)?;
            x = g.relu(x)?;
            let fw = by_name[&format!("encoder.stage{i}.refine.weight")];
            let fb = by_name[&format!("encoder.stage{i}.refine.bias")];
            x = g.conv2d(x, fw, fb, 1, 1)?;
            x = g.relu(x)?;
            let cw = by_name[&format!("encoder.stage{i}.compress.weight")];
            let cb = by_name[&format!("encoder.stage{i}.compress.bias")];
            let compressed = g.conv2d(x, cw, cb, 1, 0)?;
            let compressed = g.relu(compressed)?;
            fused_parts.push(g.upsample_nearest(compressed, 1 << (i + 1))?);
        }
        let fused = g.concat_channels(&fused_parts)?;

        let mut heads = BTreeMap::new();
        for id in head_ids {
            let head = self.head(id)?;
            let dw = by_name[&format!("head.{id}.depth_hidden.weight")];
            let db = by_name[&format!("head.{id}.depth_hidden.bias")];
            let d_hidden = g.conv2d(fused, dw, db, 1, 0)?;
            let d_hidden = g.relu(d_hidden)?;
            let ow = by_name[&format!("head.{id}.depth_out.weight")];
            let ob = by_name[&format!("head.{id}.depth_out.bias")];
            let z = g.conv2d(d_hidden, ow, ob, 1, 1)?;
            let squashed = g.hard_sigmoid(z)?;
            let (lo, hi) = head.depth_range;
            let range_c = g.constant_scalar(hi - lo)?;
            let lo_c = g.constant_scalar(lo)?;
            let scaled = g.mul(range_c, squashed)?;
            let depth_map = g.add(lo_c, scaled)?;
            let depth = g.reshape(depth_map, vec![h, w])?;

            let uw = by_name[&format!("head.{id}.uncertainty_hidden.weight")];
            let ub = by_name[&format!("head.{id}.uncertainty_hidden.bias")];
            let u_hidden = g.conv2d(fused, uw, ub, 1, 0)?;
            let u_hidden = g.relu(u_hidden)?;
            let sw = by_name[&format!("head.{id}.uncertainty_out.weight")];
            let sb = by_name[&format!("head.{id}.uncertainty_out.bias")];
            let s_raw = g.conv2d(u_hidden, sw, sb, 1, 1)?;
            let s_clamped = g.clamp(s_raw, -UNCERTAINTY_CLAMP, UNCERTAINTY_CLAMP)?;
            let uncertainty = g.reshape(s_clamped, vec![h, w])?;

            heads.insert(
                id.to_string(),
                TapeHeadOutput { depth, uncertainty },
            );
        }
        Ok(TapeForward { params, fused, heads })
    }

    /// Writes parameter values back from external tensors (canonical order).
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<(), ModelError> {
        let mut entries = self.param_entries_mut();
        if entries.len() != values.len() {
            return Err(ModelError::BadInput {
                detail: format!("{} parameter tensors, expected {}", values.len(), entries.len()),
            });
        }
        for ((name, slot), value) in entries.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(ModelError::BadInput {
                    detail: format!("parameter {name} has shape {:?}, got {:?}", slot.shape(), value.shape()),
                });
            }
            **slot = value.clone();
        }
        Ok(())
    }
}

fn relu_t(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("finite relu")
}

/// Scalar twin of the tape's hard_sigmoid composition; keeps the two forward
/// paths bit-identical by replicating the exact operation order.
fn hard_sigmoid_scalar(v: f64) -> f64 {
    let scaled = v * 0.2;
    let shifted = scaled + 0.5;
    let lower = if shifted > 0.0 { shifted } else { 0.0 };
    let flipped = 1.0 - lower;
    let upper = if flipped > 0.0 { flipped } else { 0.0 };
    1.0 - upper
}

/// Scalar twin of the tape's clamp composition.
fn clamp_scalar(v: f64, lo: f64, hi: f64) -> f64 {
    let over_lo = v - lo;
    let over_lo = if over_lo > 0.0 { over_lo } else { 0.0 };
    let over_hi = v - hi;
    let over_hi = if over_hi > 0.0 { over_hi } else { 0.0 };
    lo + (over_lo - over_hi)
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

pub fn checkpoint_to_bytes(model: &MultiHeadModel) -> Vec<u8> {
    let mut w = Writer::new(FileKind::Checkpoint);
    let c = &model.config;
    w.u32(c.input_channels as u32);
    w.u32(c.stage_widths.len() as u32);
    for &sw in &c.stage_widths {
        w.u32(sw as u32);
    }
    w.u32(c.fused_feature_channels as u32);
    w.u32(c.head_hidden_channels as u32);
    w.u64(model.version_tag);
    w.u32(model.heads.len() as u32);
    for h in &model.heads {
        w.string(&h.domain_id);
        w.f64(h.depth_range.0);
        w.f64(h.depth_range.1);
    }
    let entries = model.param_entries();
    w.u32(entries.len() as u32);
    for (name, tensor) in entries {
        w.string(&name);
        w.tensor(tensor);
    }
    w.into_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MultiHeadModel, ModelError> {
    let mut r = Reader::open(bytes, FileKind::Checkpoint)?;
    let input_channels = r.u32()? as usize;
    let n_stages = r.u32()? as usize;
    if n_stages > 16 {
        return Err(FormatError::Corrupt {
            offset: r.offset(),
            detail: format!("implausible stage count {n_stages}"),
        }
        .into());
    }
    let mut stage_widths = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stage_widths.push(r.u32()? as usize);
    }
    let config = EncoderConfig {
        input_channels,
        stage_widths,
        fused_feature_channels: r.u32()? as usize,
        head_hidden_channels: r.u32()? as usize,
    };
    let version_tag = r.u64()?;
    let n_heads = r.u32()? as usize;
    let mut head_meta = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let id = r.string()?;
        let lo = r.f64()?;
        let hi = r.f64()?;
        head_meta.push((id, (lo, hi)));
    }
    if head_meta.is_empty() {
        return Err(FormatError::Corrupt { offset: r.offset(), detail: "checkpoint has no heads".into() }.into());
    }

    // Build a skeleton with the right shapes, then overwrite every tensor.
    let first_spec = DomainSpec {
        domain_id: head_meta[0].0.clone(),
        depth_range: head_meta[0].1,
        texture_family: crate::data::TextureFamily::IndoorBlocks,
        outlier_rate: 0.0,
        missing_rate: 0.0,
        lambda_hint: 0.0,
        scale_variant: false,
    };
    let mut model = MultiHeadModel::build_model(config, &first_spec, 0)?;
    for (id, range) in head_meta.iter().skip(1) {
        let spec = DomainSpec { domain_id: id.clone(), depth_range: *range, ..first_spec.clone() };
        model.add_head(&spec, 0)?;
    }
    model.version_tag = version_tag;

    let n_params = r.u32()? as usize;
    let expected = model.param_entries().len();
    if n_params != expected {
        return Err(FormatError::Corrupt {
            offset: r.offset(),
            detail: format!("{n_params} parameter records, expected {expected}"),
        }
        .into());
    }
    let mut values = Vec::with_capacity(n_params);
    let names: Vec<String> = model.param_entries().iter().map(|(n, _)| n.clone()).collect();
    for expected_name in &names {
        let at = r.offset();
        let name = r.string()?;
        if &name != expected_name {
            return Err(FormatError::Corrupt {
                offset: at,
                detail: format!("parameter `{name}`, expected `{expected_name}`"),
            }
            .into());
        }
        values.push(r.tensor()?);
    }
    r.expect_eof()?;
    model.set_params(&values)?;
    Ok(model)
}

pub fn save_checkpoint(model: &MultiHeadModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_to_bytes(model)).map_err(|e| ModelError::Format(e.into()))
}

pub fn load_checkpoint(path: &Path) -> Result<MultiHeadModel, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Format(e.into()))?;
    checkpoint_from_bytes(&bytes)
}
