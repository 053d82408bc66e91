//! Procedural desk-scale dataset, crop/flip augmentation, the imbalance-aware
//! sampler, and an optional IDX loader for external datasets.
//!
//! Images are rendered on a 36x36 canvas so the training pipeline can take
//! random 32x32 crops; evaluation uses the deterministic center crop.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{QdError, Result};
use crate::tensor::Tensor;

pub const CANVAS: usize = 36;
pub const CROP: usize = 32;

const VAL_PER_CLASS: usize = 50;
const TEST_PER_CLASS: usize = 63;

/// One split of the dataset. Images are [N,1,36,36] with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Borrow sample i as a [1,36,36] image copy.
    pub fn image(&self, i: usize) -> Tensor {
        let px = CANVAS * CANVAS;
        Tensor::new(
            vec![1, CANVAS, CANVAS],
            self.images.data()[i * px..(i + 1) * px].to_vec(),
        )
        .expect("stored image has canvas shape")
    }
}

/// Train/val/test splits plus the generation config.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

/// Train-split per-class counts with geometric decay (ratio 0.7), echoing a
/// long-tailed class distribution.
pub fn default_class_counts(num_classes: usize, base: usize) -> Vec<usize> {
    (0..num_classes)
        .map(|c| ((base as f64) * 0.7f64.powi(c as i32)).round().max(10.0) as usize)
        .collect()
}

fn hash_image(pixels: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    for &p in pixels {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Renders `count` images of `class`, skipping content-hash duplicates seen in
/// `taken` so the splits stay disjoint.
fn render_class(
    class: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
    taken: &mut HashSet<u64>,
    images: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) {
    let mut made = 0;
    while made < count {
        let px = render_shape(class, rng);
        let h = hash_image(&px);
        if !taken.insert(h) {
            continue;
        }
        images.extend_from_slice(&px);
        labels.push(class);
        made += 1;
    }
}

/// Procedurally rendered grayscale shapes, deterministic per seed. The train
/// split realizes `samples_per_class` exactly; val and test are balanced with
/// fixed per-class counts. Splits are disjoint by content hash.
pub fn generate_shapes_dataset(
    num_classes: usize,
    samples_per_class: &[usize],
    seed: u64,
) -> Result<Dataset> {
    if !(4..=16).contains(&num_classes) {
        return Err(QdError::Config(format!(
            "num_classes must be in [4,16], got {num_classes}"
        )));
    }
    if samples_per_class.len() != num_classes {
        return Err(QdError::Config(format!(
            "{} per-class counts for {num_classes} classes",
            samples_per_class.len()
        )));
    }
    if let Some(&bad) = samples_per_class.iter().find(|&&c| c < 10) {
        return Err(QdError::Config(format!(
            "samples_per_class entries must be >= 10, got {bad}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();

    let build = |counts: &dyn Fn(usize) -> usize,
                     rng: &mut ChaCha8Rng,
                     taken: &mut HashSet<u64>|
     -> DatasetSplit {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..num_classes {
            render_class(class, counts(class), rng, taken, &mut images, &mut labels);
        }
        let n = labels.len();
        DatasetSplit {
            images: Tensor::new(vec![n, 1, CANVAS, CANVAS], images)
                .expect("rendered images fill the canvas"),
            labels,
            num_classes,
        }
    };

    let train = build(&|c| samples_per_class[c], &mut rng, &mut taken);
    let val = build(&|_| VAL_PER_CLASS, &mut rng, &mut taken);
    let test = build(&|_| TEST_PER_CLASS, &mut rng, &mut taken);
    Ok(Dataset { train, val, test })
}

/// Smooth step from 1 inside the shape to 0 outside, over a one-pixel band
/// around the signed distance zero crossing.
fn coverage(sd: f32) -> f32 {
    (0.5 - sd).clamp(0.0, 1.0)
}

fn rotate(x: f32, y: f32, angle: f32) -> (f32, f32) {
    let (s, c) = angle.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

/// Signed distance to the shape for class `class` at local coordinates (x,y)
/// relative to the shape center, after pose rotation.
fn shape_sd(class: usize, x: f32, y: f32, p: &ShapeParams) -> f32 {
    let (x, y) = rotate(x, y, p.angle);
    let r = p.size;
    let ring = |d: f32| (d - r).abs() - p.thickness;
    match class % 16 {
        // filled circle
        0 => (x * x + y * y).sqrt() - r,
        // hollow circle
        1 => ring((x * x + y * y).sqrt()),
        // filled square
        2 => x.abs().max(y.abs()) - r,
        // hollow square
        3 => (x.abs().max(y.abs()) - r).abs() - p.thickness,
        // filled triangle (equilateral, pointing up in local frame)
        4 => {
            let k = 3.0f32.sqrt();
            let d1 = y - (-r * 0.5);
            let d2 = (k * x - y - r) / 2.0;
            let d3 = (-k * x - y - r) / 2.0;
            (-d1).max(d2).max(d3)
        }
        // plus: union of two bars
        5 => {
            let bar_h = (x.abs() - r).max(y.abs() - p.thickness);
            let bar_v = (y.abs() - r).max(x.abs() - p.thickness);
            bar_h.min(bar_v)
        }
        // single line segment
        6 => (x.abs() - r).max(y.abs() - p.thickness),
        // half-ring arc: ring restricted to the upper local half-plane
        7 => ring((x * x + y * y).sqrt()).max(-y),
        // ellipse (2:1 aspect)
        8 => ((x / 2.0) * (x / 2.0) + y * y).sqrt() - r * 0.6,
        // hollow triangle
        9 => {
            let k = 3.0f32.sqrt();
            let d1 = y - (-r * 0.5);
            let d2 = (k * x - y - r) / 2.0;
            let d3 = (-k * x - y - r) / 2.0;
            ((-d1).max(d2).max(d3)).abs() - p.thickness
        }
        // X cross: plus rotated 45 degrees
        10 => {
            let (xr, yr) = rotate(x, y, std::f32::consts::FRAC_PI_4);
            let bar_h = (xr.abs() - r).max(yr.abs() - p.thickness);
            let bar_v = (yr.abs() - r).max(xr.abs() - p.thickness);
            bar_h.min(bar_v)
        }
        // two dots
        11 => {
            let d1 = (((x - r).powi(2) + y * y).sqrt()) - r * 0.4;
            let d2 = (((x + r).powi(2) + y * y).sqrt()) - r * 0.4;
            d1.min(d2)
        }
        // diamond (L1 ball)
        12 => (x.abs() + y.abs()) - r * 1.2,
        // hollow diamond
        13 => ((x.abs() + y.abs()) - r * 1.2).abs() - p.thickness,
        // three parallel bars
        14 => {
            let spacing = r * 0.8;
            let mut d = f32::INFINITY;
            for k in -1..=1 {
                let yy = y - k as f32 * spacing;
                d = d.min((x.abs() - r).max(yy.abs() - p.thickness * 0.8));
            }
            d
        }
        // dot ring: four dots on a circle
        _ => {
            let mut d = f32::INFINITY;
            for k in 0..4 {
                let a = k as f32 * std::f32::consts::FRAC_PI_2;
                let (cx, cy) = (r * a.cos(), r * a.sin());
                d = d.min((((x - cx).powi(2) + (y - cy).powi(2)).sqrt()) - r * 0.35);
            }
            d
        }
    }
}

struct ShapeParams {
    size: f32,
    thickness: f32,
    angle: f32,
}

fn render_shape(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let size = rng.gen_range(6.0f32..10.5);
    let p = ShapeParams {
        size,
        thickness: rng.gen_range(1.2f32..2.0),
        angle: rng.gen_range(0.0f32..std::f32::consts::TAU),
    };
    let cx = CANVAS as f32 / 2.0 + rng.gen_range(-3.5f32..3.5);
    let cy = CANVAS as f32 / 2.0 + rng.gen_range(-3.5f32..3.5);
    let brightness = rng.gen_range(0.6f32..1.0);
    let noise_amp = 0.08f32;

    let mut px = vec![0.0f32; CANVAS * CANVAS];
    for row in 0..CANVAS {
        for col in 0..CANVAS {
            let x = col as f32 + 0.5 - cx;
            let y = row as f32 + 0.5 - cy;
            let v = brightness * coverage(shape_sd(class, x, y, &p));
            let noisy = v + rng.gen_range(-noise_amp..noise_amp);
            px[row * CANVAS + col] = noisy.clamp(0.0, 1.0);
        }
    }
    px
}

/// Random 32x32 crop from the 36x36 canvas, then horizontal flip with
/// probability 0.5.
pub fn augment<R: Rng>(image: &Tensor, rng: &mut R) -> Result<Tensor> {
    let dx = rng.gen_range(0..=(CANVAS - CROP));
    let dy = rng.gen_range(0..=(CANVAS - CROP));
    let flip = rng.gen_bool(0.5);
    crop(image, dx, dy, flip)
}

/// Deterministic eval transform: center crop, no flip.
pub fn center_crop(image: &Tensor) -> Result<Tensor> {
    let off = (CANVAS - CROP) / 2;
    crop(image, off, off, false)
}

fn crop(image: &Tensor, dx: usize, dy: usize, flip: bool) -> Result<Tensor> {
    if image.shape() != [1, CANVAS, CANVAS] {
        return Err(QdError::InvalidShape(format!(
            "augment expects [1,{CANVAS},{CANVAS}], got {:?}",
            image.shape()
        )));
    }
    let mut out = vec![0.0f32; CROP * CROP];
    for row in 0..CROP {
        for col in 0..CROP {
            let src_col = if flip { CROP - 1 - col } else { col } + dx;
            out[row * CROP + col] = image.data()[(row + dy) * CANVAS + src_col];
        }
    }
    Tensor::new(vec![1, CROP, CROP], out)
}

/// Assembles a [B,1,32,32] batch from split indices. Training batches get the
/// random crop/flip augmentation; eval batches the center crop.
pub fn make_batch<R: Rng>(
    split: &DatasetSplit,
    indices: &[usize],
    train: bool,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(indices.len() * CROP * CROP);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = split.image(i);
        let cropped = if train {
            augment(&img, rng)?
        } else {
            center_crop(&img)?
        };
        data.extend_from_slice(cropped.data());
        labels.push(split.labels[i]);
    }
    let batch = Tensor::new(vec![indices.len(), 1, CROP, CROP], data)?;
    Ok((batch, labels))
}

/// Draws sample indices with probability proportional to 1/count(class(i)),
/// so expected per-class draw frequencies are uniform.
pub struct ImbalancedSampler {
    dist: WeightedIndex<f64>,
    len: usize,
}

impl ImbalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(QdError::Config("sampler needs a non-empty split".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(QdError::Config(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            counts[l] += 1;
        }
        let weights: Vec<f64> = labels.iter().map(|&l| 1.0 / counts[l] as f64).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| QdError::Config(format!("sampler weights: {e}")))?;
        Ok(Self {
            dist,
            len: labels.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }

    pub fn batch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size).map(|_| self.draw(rng)).collect()
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(QdError::Parse {
            offset,
            message: "truncated IDX header".into(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// IDX image file (magic 0x00000803): returns [N,1,H,W] with pixel bytes
/// rescaled to [0,1].
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(QdError::Parse {
            offset: 0,
            message: format!("bad IDX image magic {magic:#010x}"),
        });
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    let h = read_be_u32(&bytes, 8)? as usize;
    let w = read_be_u32(&bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(QdError::Parse {
            offset: bytes.len().min(expected),
            message: format!("IDX image payload: {} bytes, expected {expected}", bytes.len()),
        });
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(QdError::Parse {
            offset: 0,
            message: format!("bad IDX label magic {magic:#010x}"),
        });
    }
    let n = read_be_u32(&bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(QdError::Parse {
            offset: bytes.len().min(8 + n),
            message: format!("IDX label payload: {} bytes, expected {}", bytes.len(), 8 + n),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}
