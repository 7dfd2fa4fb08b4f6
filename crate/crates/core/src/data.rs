//! Procedural multi-domain RGB/depth scene generation.
//!
//! Each domain renders simple primitives (a back wall or a road with a sky
//! line, plus boxes) into an albedo map and a depth map, then shades the
//! image with depth-dependent attenuation toward an ambient color. Image
//! content therefore predicts depth: nearer surfaces keep their albedo,
//! farther ones fade. Families differ in palette, depth range, and layout,
//! giving distinct visual statistics per domain.
//!
//! Generation is deterministic per `(spec, seed, index)`; samples can be
//! produced in parallel without changing the output.

use crate::format::{FileKind, FormatError, Reader, Writer};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::path::Path;

/// Grid sides must be multiples of this (the encoder's total stride).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureFamily {
    IndoorBlocks,
    IndoorRooms,
    OutdoorRoad,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::IndoorBlocks => "indoor_blocks",
            Self::IndoorRooms => "indoor_rooms",
            Self::OutdoorRoad => "outdoor_road",
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::IndoorBlocks),
            1 => Some(Self::IndoorRooms),
            2 => Some(Self::OutdoorRoad),
            _ => None,
        }
    }
}

/// Everything that characterizes one domain's data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub domain_id: String,
    /// Meters; all clean depths fall inside, outliers inside `2 * max`.
    pub depth_range: (f64, f64),
    pub texture_family: TextureFamily,
    pub outlier_rate: f64,
    pub missing_rate: f64,
    /// Suggested consistency/replay weight when this domain must be preserved.
    pub lambda_hint: f64,
    /// Apply median scale normalization inside the depth loss.
    pub scale_variant: bool,
}

#[derive(Debug)]
pub enum DataError {
    InvalidSpec { detail: String },
    SizeNotDivisible { height: usize, width: usize, multiple: usize },
    EmptyDataset,
    UnknownPreset { name: String, known: Vec<String> },
    Format(FormatError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidSpec { detail } => write!(f, "invalid domain spec: {detail}"),
            Self::SizeNotDivisible { height, width, multiple } => {
                write!(f, "grid {height}x{width} not divisible by {multiple}")
            }
            Self::EmptyDataset => write!(f, "dataset has no samples"),
            Self::UnknownPreset { name, known } => {
                write!(f, "unknown preset `{name}`; valid presets: {}", known.join(", "))
            }
            Self::Format(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<FormatError> for DataError {
    fn from(e: FormatError) -> Self {
        Self::Format(e)
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.depth_range;
        if self.domain_id.is_empty() {
            return Err(DataError::InvalidSpec { detail: "empty domain id".into() });
        }
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(DataError::InvalidSpec {
                detail: format!("depth range ({lo}, {hi}) must satisfy 0 <= min < max"),
            });
        }
        for (name, rate) in [("outlier_rate", self.outlier_rate), ("missing_rate", self.missing_rate)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(DataError::InvalidSpec {
                    detail: format!("{name} {rate} outside [0, 1)"),
                });
            }
        }
        if !self.lambda_hint.is_finite() || self.lambda_hint < 0.0 {
            return Err(DataError::InvalidSpec {
                detail: format!("lambda_hint {} must be finite and >= 0", self.lambda_hint),
            });
        }
        Ok(())
    }
}

/// One rendered observation: RGB grid, metric depth grid, validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[h, w]`, meters.
    pub depth: Tensor,
    /// `[h, w]`, entries 0 or 1.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub seed: u64,
    /// First global sample index; train/test splits use disjoint offsets.
    pub index_offset: u64,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// scene model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Layout {
    Indoor {
        wall_depth: f64,
        wall_albedo: [f64; 3],
        /// Floor plane from this row down, interpolating wall depth to near.
        floor: Option<(usize, f64, [f64; 3])>,
    },
    Outdoor {
        horizon: usize,
        sky_depth: f64,
        sky_albedo: [f64; 3],
        ground_near_depth: f64,
        ground_albedo: [f64; 3],
        lane_period: usize,
    },
}

#[derive(Debug, Clone)]
struct BoxPrim {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    depth: f64,
    albedo: [f64; 3],
    stripe_period: usize,
    stripe_vertical: bool,
    stripe_amp: f64,
}

#[derive(Debug, Clone)]
struct Scene {
    layout: Layout,
    /// Painted far to near after the layout.
    boxes: Vec<BoxPrim>,
    fog_scale: f64,
    ambient: [f64; 3],
    noise_amp: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per (seed, index, salt).
fn sample_rng(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(salt))))
}

const SCENE_SALT: u64 = 0x5CE4E;
const CORRUPT_SALT: u64 = 0xC0421;

fn indoor_palette(family: TextureFamily) -> (&'static [[f64; 3]], [f64; 3], [f64; 3]) {
    match family {
        TextureFamily::IndoorBlocks => (
            &[
                [0.82, 0.71, 0.55],
                [0.66, 0.52, 0.41],
                [0.58, 0.44, 0.36],
                [0.77, 0.77, 0.72],
                [0.52, 0.60, 0.66],
            ],
            [0.85, 0.80, 0.72],
            [0.06, 0.06, 0.08],
        ),
        TextureFamily::IndoorRooms => (
            &[
                [0.75, 0.68, 0.58],
                [0.62, 0.55, 0.47],
                [0.55, 0.48, 0.42],
                [0.72, 0.74, 0.70],
                [0.50, 0.56, 0.63],
            ],
            [0.80, 0.78, 0.74],
            [0.05, 0.05, 0.07],
        ),
        TextureFamily::OutdoorRoad => unreachable!("outdoor uses its own palette"),
    }
}

const OUTDOOR_PALETTE: [[f64; 3]; 5] = [
    [0.75, 0.15, 0.12],
    [0.13, 0.45, 0.72],
    [0.15, 0.55, 0.20],
    [0.80, 0.75, 0.20],
    [0.45, 0.45, 0.50],
];

fn jitter(rng: &mut ChaCha8Rng, color: [f64; 3], amount: f64) -> [f64; 3] {
    let mut out = color;
    for c in &mut out {
        *c = (*c + rng.gen_range(-amount..amount)).clamp(0.02, 0.98);
    }
    out
}

fn sample_scene(spec: &DomainSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Scene {
    let (_, max) = spec.depth_range;
    match spec.texture_family {
        TextureFamily::IndoorBlocks | TextureFamily::IndoorRooms => {
            let (palette, wall, ambient) = indoor_palette(spec.texture_family);
            let wall_depth = max * rng.gen_range(0.65..0.95);
            let wall_albedo = jitter(rng, wall, 0.04);
            let floor = if spec.texture_family == TextureFamily::IndoorRooms {
                let top = (h as f64 * rng.gen_range(0.6..0.8)) as usize;
                let near = max * rng.gen_range(0.06..0.12);
                let albedo = jitter(rng, [0.45, 0.38, 0.32], 0.04);
                Some((top.min(h - 2), near, albedo))
            } else {
                None
            };
            let n_boxes = rng.gen_range(3..=7);
            let mut boxes = Vec::with_capacity(n_boxes);
            for _ in 0..n_boxes {
                let depth = max * rng.gen_range(0.12..0.62);
                // Apparent size shrinks with distance.
                let scale = (h as f64 * 0.55 * (0.18 * max) / depth).clamp(3.0, h as f64 * 0.7);
                let bw = (scale * rng.gen_range(0.6..1.4)) as usize;
                let bh = (scale * rng.gen_range(0.6..1.4)) as usize;
                let x0 = rng.gen_range(0..w);
                let y0 = rng.gen_range(0..h);
                let pick = rng.gen_range(0..palette.len());
                let albedo = jitter(rng, palette[pick], 0.05);
                boxes.push(BoxPrim {
                    x0,
                    y0,
                    x1: (x0 + bw.max(2)).min(w),
                    y1: (y0 + bh.max(2)).min(h),
                    depth,
                    albedo,
                    stripe_period: rng.gen_range(3..9),
                    stripe_vertical: rng.gen_bool(0.5),
                    stripe_amp: rng.gen_range(0.02..0.12),
                });
            }
            boxes.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());
            Scene {
                layout: Layout::Indoor { wall_depth, wall_albedo, floor },
                boxes,
                fog_scale: 0.45 * max,
                ambient,
                noise_amp: 0.015,
            }
        }
        TextureFamily::OutdoorRoad => {
            let horizon = (h as f64 * rng.gen_range(0.30..0.45)) as usize;
            let sky_depth = 0.97 * max;
            let sky_albedo = jitter(rng, [0.62, 0.74, 0.92], 0.03);
            let ground_near_depth = rng.gen_range(0.04..0.08) * max;
            let ground_albedo = jitter(rng, [0.35, 0.35, 0.37], 0.03);
            let ground_scale = ground_near_depth * (h - 1 - horizon) as f64;
            let n_boxes = rng.gen_range(2..=5);
            let mut boxes = Vec::with_capacity(n_boxes);
            for _ in 0..n_boxes {
                let depth = max * rng.gen_range(0.08..0.60);
                let bottom = horizon + (ground_scale / depth).round() as usize;
                let bottom = bottom.min(h - 1);
                let size = (h as f64 * (0.10 * max) / depth).clamp(2.0, h as f64 * 0.5);
                let bh = (size * rng.gen_range(0.8..1.5)) as usize;
                let bw = (size * rng.gen_range(0.5..1.1)) as usize;
                let x0 = rng.gen_range(0..w);
                let pick = rng.gen_range(0..OUTDOOR_PALETTE.len());
                let albedo = jitter(rng, OUTDOOR_PALETTE[pick], 0.05);
                boxes.push(BoxPrim {
                    x0,
                    y0: bottom.saturating_sub(bh.max(2)),
                    x1: (x0 + bw.max(2)).min(w),
                    y1: bottom + 1,
                    depth,
                    albedo,
                    stripe_period: rng.gen_range(3..9),
                    stripe_vertical: rng.gen_bool(0.5),
                    stripe_amp: rng.gen_range(0.02..0.10),
                });
            }
            boxes.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());
            Scene {
                layout: Layout::Outdoor {
                    horizon,
                    sky_depth,
                    sky_albedo,
                    ground_near_depth,
                    ground_albedo,
                    lane_period: rng.gen_range(6..12),
                },
                boxes,
                fog_scale: 0.35 * max,
                ambient: jitter(rng, [0.60, 0.70, 0.85], 0.02),
                noise_amp: 0.015,
            }
        }
    }
}

/// Albedo and depth maps from the painter pass; no randomness involved.
fn render_scene(scene: &Scene, h: usize, w: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut albedo = vec![[0.0; 3]; h * w];
    let mut depth = vec![0.0; h * w];
    match &scene.layout {
        Layout::Indoor { wall_depth, wall_albedo, floor } => {
            for r in 0..h {
                for c in 0..w {
                    albedo[r * w + c] = *wall_albedo;
                    depth[r * w + c] = *wall_depth;
                }
            }
            if let Some((top, near, floor_albedo)) = floor {
                for r in *top..h {
                    let t = (r - top) as f64 / (h - 1 - top).max(1) as f64;
                    let d = wall_depth * (1.0 - t) + near * t;
                    for c in 0..w {
                        depth[r * w + c] = d;
                        let stripe = if (c / 5) % 2 == 0 { 0.03 } else { -0.03 };
                        let mut a = *floor_albedo;
                        for ch in &mut a {
                            *ch = (*ch + stripe).clamp(0.02, 0.98);
                        }
                        albedo[r * w + c] = a;
                    }
                }
            }
        }
        Layout::Outdoor {
            horizon,
            sky_depth,
            sky_albedo,
            ground_near_depth,
            ground_albedo,
            lane_period,
        } => {
            let ground_scale = ground_near_depth * (h - 1 - horizon) as f64;
            for r in 0..h {
                for c in 0..w {
                    if r <= *horizon {
                        albedo[r * w + c] = *sky_albedo;
                        depth[r * w + c] = *sky_depth;
                    } else {
                        let d = (ground_scale / (r - horizon) as f64).min(*sky_depth);
                        depth[r * w + c] = d;
                        let lane = ((c + r / 2) / lane_period) % 2 == 0;
                        let mut a = *ground_albedo;
                        if lane {
                            for ch in &mut a {
                                *ch = (*ch + 0.05).clamp(0.02, 0.98);
                            }
                        }
                        albedo[r * w + c] = a;
                    }
                }
            }
        }
    }
    for b in &scene.boxes {
        for r in b.y0..b.y1.min(h) {
            for c in b.x0..b.x1.min(w) {
                let phase = if b.stripe_vertical { c - b.x0 } else { r - b.y0 };
                let stripe = if (phase / b.stripe_period) % 2 == 0 {
                    b.stripe_amp
                } else {
                    -b.stripe_amp
                };
                let mut a = b.albedo;
                for ch in &mut a {
                    *ch = (*ch + stripe).clamp(0.02, 0.98);
                }
                albedo[r * w + c] = a;
                depth[r * w + c] = b.depth;
            }
        }
    }
    (albedo, depth)
}

/// Depth-attenuated shading plus bounded pixel noise.
fn shade(scene: &Scene, albedo: &[[f64; 3]], depth: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = depth.len();
    let mut image = vec![0.0; 3 * n];
    for i in 0..n {
        let att = (-depth[i] / scene.fog_scale).exp();
        for ch in 0..3 {
            let shaded = albedo[i][ch] * att + scene.ambient[ch] * (1.0 - att);
            let noisy = shaded + rng.gen_range(-scene.noise_amp..scene.noise_amp);
            image[ch * n + i] = noisy.clamp(0.0, 1.0);
        }
    }
    image
}

/// The clean depth map of sample `index`, recomputed from its scene.
pub fn clean_depth(spec: &DomainSpec, height: usize, width: usize, seed: u64, index: u64) -> Tensor {
    let mut rng = sample_rng(seed, index, SCENE_SALT);
    let scene = sample_scene(spec, height, width, &mut rng);
    let (_, depth) = render_scene(&scene, height, width);
    Tensor::new(vec![height, width], depth).expect("finite depth")
}

fn generate_sample(spec: &DomainSpec, height: usize, width: usize, seed: u64, index: u64) -> Sample {
    let mut rng = sample_rng(seed, index, SCENE_SALT);
    let scene = sample_scene(spec, height, width, &mut rng);
    let (albedo, depth_vec) = render_scene(&scene, height, width);
    let image = shade(&scene, &albedo, &depth_vec, &mut rng);
    let depth = Tensor::new(vec![height, width], depth_vec).expect("finite depth");
    let mask = Tensor::filled(vec![height, width], 1.0);
    let (depth, mask) = corrupt_depth(
        &depth,
        &mask,
        spec.outlier_rate,
        spec.missing_rate,
        spec.depth_range.1,
        splitmix64(seed ^ splitmix64(index.wrapping_add(CORRUPT_SALT))),
    );
    Sample {
        image: Tensor::new(vec![3, height, width], image).expect("finite image"),
        depth,
        mask,
    }
}

/// Renders `n` samples for a domain, deterministically in `(spec, seed)` and
/// independent of parallel scheduling.
pub fn generate_domain(
    spec: &DomainSpec,
    n: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Dataset, DataError> {
    generate_domain_offset(spec, n, size, seed, 0)
}

/// As [`generate_domain`] but starting at a global sample index, so disjoint
/// index windows give disjoint datasets under one seed.
pub fn generate_domain_offset(
    spec: &DomainSpec,
    n: usize,
    (height, width): (usize, usize),
    seed: u64,
    index_offset: u64,
) -> Result<Dataset, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    if height % SIZE_MULTIPLE != 0 || width % SIZE_MULTIPLE != 0 {
        return Err(DataError::SizeNotDivisible { height, width, multiple: SIZE_MULTIPLE });
    }
    let samples: Vec<Sample> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, height, width, seed, index_offset + i))
        .collect();
    Ok(Dataset { spec: spec.clone(), seed, index_offset, height, width, samples })
}

/// Train and test sets drawn from disjoint index windows of one stream.
pub fn generate_splits(
    spec: &DomainSpec,
    n_train: usize,
    n_test: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let train = generate_domain_offset(spec, n_train, size, seed, 0)?;
    let test = generate_domain_offset(spec, n_test, size, seed, n_train as u64)?;
    Ok((train, test))
}

/// Applies sensor-style corruption: a `missing_rate` fraction of pixels is
/// masked invalid, an `outlier_rate` fraction keeps its mask but has depth
/// replaced by a uniform draw in `[0, 2 * max_depth]`.
pub fn corrupt_depth(
    depth: &Tensor,
    mask: &Tensor,
    outlier_rate: f64,
    missing_rate: f64,
    max_depth: f64,
    seed: u64,
) -> (Tensor, Tensor) {
    if outlier_rate == 0.0 && missing_rate == 0.0 {
        return (depth.clone(), mask.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = depth.data().to_vec();
    let mut m = mask.data().to_vec();
    for i in 0..d.len() {
        let u: f64 = rng.gen();
        if u < missing_rate {
            m[i] = 0.0;
        } else if u < missing_rate + outlier_rate {
            d[i] = rng.gen_range(0.0..2.0 * max_depth);
        }
    }
    (
        Tensor::new(depth.shape().to_vec(), d).expect("finite depth"),
        Tensor::new(mask.shape().to_vec(), m).expect("finite mask"),
    )
}

/// The three stock domains: two indoor-style with close visual statistics
/// and one outdoor-style with a far larger depth range.
pub fn domain_presets() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            domain_id: "indoor_a".to_string(),
            depth_range: (0.0, 10.0),
            texture_family: TextureFamily::IndoorBlocks,
            outlier_rate: 0.05,
            missing_rate: 0.05,
            lambda_hint: 10.0,
            scale_variant: true,
        },
        DomainSpec {
            domain_id: "outdoor_b".to_string(),
            depth_range: (0.0, 80.0),
            texture_family: TextureFamily::OutdoorRoad,
            outlier_rate: 0.05,
            missing_rate: 0.15,
            lambda_hint: 100.0,
            scale_variant: true,
        },
        DomainSpec {
            domain_id: "indoor_c".to_string(),
            depth_range: (0.0, 6.0),
            texture_family: TextureFamily::IndoorRooms,
            outlier_rate: 0.03,
            missing_rate: 0.05,
            lambda_hint: 10.0,
            scale_variant: true,
        },
    ]
}

pub fn preset_by_name(name: &str) -> Result<DomainSpec, DataError> {
    let presets = domain_presets();
    presets
        .iter()
        .find(|p| p.domain_id == name)
        .cloned()
        .ok_or_else(|| DataError::UnknownPreset {
            name: name.to_string(),
            known: presets.iter().map(|p| p.domain_id.clone()).collect(),
        })
}

// ---------------------------------------------------------------------------
// dataset container
// ---------------------------------------------------------------------------

fn write_spec(w: &mut Writer, spec: &DomainSpec) {
    w.string(&spec.domain_id);
    w.f64(spec.depth_range.0);
    w.f64(spec.depth_range.1);
    w.u8(match spec.texture_family {
        TextureFamily::IndoorBlocks => 0,
        TextureFamily::IndoorRooms => 1,
        TextureFamily::OutdoorRoad => 2,
    });
    w.f64(spec.outlier_rate);
    w.f64(spec.missing_rate);
    w.f64(spec.lambda_hint);
    w.u8(u8::from(spec.scale_variant));
}

fn read_spec(r: &mut Reader) -> Result<DomainSpec, FormatError> {
    let domain_id = r.string()?;
    let lo = r.f64()?;
    let hi = r.f64()?;
    let fam_byte = r.u8()?;
    let at = r.offset();
    let texture_family = TextureFamily::from_byte(fam_byte).ok_or(FormatError::Corrupt {
        offset: at - 1,
        detail: format!("unknown texture family byte {fam_byte}"),
    })?;
    Ok(DomainSpec {
        domain_id,
        depth_range: (lo, hi),
        texture_family,
        outlier_rate: r.f64()?,
        missing_rate: r.f64()?,
        lambda_hint: r.f64()?,
        scale_variant: r.u8()? != 0,
    })
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(FileKind::Dataset);
    write_spec(&mut w, &ds.spec);
    w.u64(ds.seed);
    w.u64(ds.index_offset);
    w.u64(ds.height as u64);
    w.u64(ds.width as u64);
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        w.f64_slice(s.image.data());
        w.f64_slice(s.depth.data());
        let mask_bytes: Vec<u8> = s.mask.data().iter().map(|&m| u8::from(m != 0.0)).collect();
        w.u8_slice(&mask_bytes);
    }
    w.into_bytes()
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = Reader::open(bytes, FileKind::Dataset)?;
    let spec = read_spec(&mut r)?;
    let seed = r.u64()?;
    let index_offset = r.u64()?;
    let height = r.u64()? as usize;
    let width = r.u64()? as usize;
    let count = r.u64()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let image = r.f64_slice()?;
        let depth = r.f64_slice()?;
        let mask = r.u8_slice()?;
        let bad = |detail: String| FormatError::Corrupt { offset: at, detail };
        if image.len() != 3 * height * width || depth.len() != height * width || mask.len() != height * width {
            return Err(bad(format!(
                "sample arrays have lengths {}/{}/{}, expected {}/{}/{}",
                image.len(),
                depth.len(),
                mask.len(),
                3 * height * width,
                height * width,
                height * width
            ))
            .into());
        }
        samples.push(Sample {
            image: Tensor::new(vec![3, height, width], image)
                .map_err(|e| bad(format!("bad image: {e}")))?,
            depth: Tensor::new(vec![height, width], depth)
                .map_err(|e| bad(format!("bad depth: {e}")))?,
            mask: Tensor::new(
                vec![height, width],
                mask.iter().map(|&b| f64::from(b)).collect(),
            )
            .map_err(|e| bad(format!("bad mask: {e}")))?,
        });
    }
    r.expect_eof()?;
    Ok(Dataset { spec, seed, index_offset, height, width, samples })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, dataset_to_bytes(ds)).map_err(|e| DataError::Format(e.into()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Format(e.into()))?;
    dataset_from_bytes(&bytes)
}
