//! Dataset ingestion and synthesis.
//!
//! The synthetic classification task stores class evidence in anti-paired
//! correlation blocks at scales s ∈ {8, 4, 2, 1}: two adjacent s×s blocks
//! whose channel deviations are exact negatives of each other, while the
//! within-pixel channel correlation carries the class in both halves. A pair
//! always sits inside one 2s×2s cell, so any patch of size ≥ 2s sums it to
//! zero: linear patch compression erases the tier, and only tokens of size
//! ≤ s land inside a pure block whose signature a channel mixer can decode.
//! Tier s is therefore readable iff p ≤ s, and shrinking the patch unlocks
//! one more tier of evidence at a time.
//!
//! Each pair votes for the class with a per-tier flip probability (finer
//! tiers are more reliable), so every tier leaves residual uncertainty and
//! the achievable test loss falls in controlled steps as p shrinks.
//! Per-channel means and variances are identical across classes; only
//! within-pixel channel correlations differ, which is exactly what linear
//! patch mixing destroys. Block layouts come from a small set of variants,
//! keeping raw-pixel nearest-neighbor classification viable (the
//! learnability oracle). Orientation stripes, a parity lattice, occluding
//! shapes, and pixel noise are class-independent nuisance.
//! The segmentation generator rasterizes colored shapes plus 1–2 px strokes
//! into image and mask through the same loop, so masks are exact by
//! construction. Binary loaders cover the IDX and CIFAR formats. Everything
//! is deterministic from (params, seed).

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::linalg::{self, AxisMap};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    /// One class id per image.
    Class(Vec<u32>),
    /// One class id per pixel, [N × H × W] row-major.
    Masks(Vec<u8>),
}

/// Per-channel statistics computed on a training split and applied
/// identically at eval time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    /// [N × C × H × W], values in [0, 1].
    pub images: Vec<f32>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Labels,
    pub num_classes: usize,
    pub split: String,
    pub native_resolution: usize,
    pub seed: u64,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.channels * self.height * self.width;
        &self.images[i * sz..(i + 1) * sz]
    }

    pub fn class_label(&self, i: usize) -> u32 {
        match &self.labels {
            Labels::Class(v) => v[i],
            Labels::Masks(_) => panic!("mask dataset has no class labels"),
        }
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        match &self.labels {
            Labels::Masks(v) => {
                let sz = self.height * self.width;
                &v[i * sz..(i + 1) * sz]
            }
            Labels::Class(_) => panic!("classification dataset has no masks"),
        }
    }

    pub fn has_masks(&self) -> bool {
        matches!(self.labels, Labels::Masks(_))
    }

    /// Compute per-channel mean/std over this (training) split.
    pub fn compute_normalization(&mut self) {
        let plane = self.height * self.width;
        let mut mean = vec![0.0f64; self.channels];
        let mut var = vec![0.0f64; self.channels];
        let count = (self.n * plane) as f64;
        for i in 0..self.n {
            let img = self.image(i);
            for c in 0..self.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    mean[c] += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..self.n {
            let img = self.image(i);
            for c in 0..self.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count).sqrt().max(1e-6))
            .collect();
        self.normalization = Some(Normalization { mean, std });
    }

    /// All images resampled to a square resolution; labels carried over
    /// unchanged (masks are only meaningful at the native size, so resizing
    /// a mask dataset is rejected).
    pub fn resized(&self, new_size: usize) -> Result<Dataset> {
        if self.has_masks() && new_size != self.height {
            return Err(Error::Data(
                "resizing a segmentation dataset would desync its masks".into(),
            ));
        }
        let mut out = self.clone();
        out.height = new_size;
        out.width = new_size;
        out.images = Vec::with_capacity(self.n * self.channels * new_size * new_size);
        for i in 0..self.n {
            let res = resize_bilinear(
                self.image(i),
                self.channels,
                self.height,
                self.width,
                new_size,
            );
            out.images.extend_from_slice(&res);
        }
        Ok(out)
    }
}

/// Align-corners bilinear resize of a planar [C×H×W] image. Integer upscale
/// factors use the stride-anchored map, which makes "upscale then read back
/// every f-th sample" an exact round trip.
pub fn resize_bilinear(
    image: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    new_size: usize,
) -> Vec<f32> {
    let map = if new_size >= h && new_size % h == 0 && h == w {
        AxisMap::Stride(new_size / h)
    } else {
        AxisMap::AlignCorners
    };
    let mut out = vec![0.0f32; channels * new_size * new_size];
    for c in 0..channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * new_size * new_size..(c + 1) * new_size * new_size];
        linalg::resample_grid(plane, h, w, 1, new_size, new_size, map, dst);
    }
    out
}

// ── Synthetic classification ────────────────────────────────────────

/// Nuisance stripe directions (period 4), drawn per image.
const STRIPE_DIRS: [(i64, i64); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Class correlation signatures: (channel i, channel j, sign). A signature
/// pixel sets channel i to 0.5 + f·amp and channel j to 0.5 + sign·f·amp
/// (f = ±1 between the two halves of a pair), so classwise channel means
/// and variances are identical and only the within-pixel product
/// sign(Δi·Δj) and channel pair carry the label.
const CLASS_SIGS: [(usize, usize, f64); 8] = [
    (0, 1, 1.0),
    (0, 1, -1.0),
    (1, 2, 1.0),
    (1, 2, -1.0),
    (0, 2, 1.0),
    (0, 2, -1.0),
    (0, 1, 1.0),
    (1, 2, -1.0),
];

/// Nuisance 2×2 parity lattice kinds (class-independent).
fn lattice_value(kind: usize, r: usize, c: usize) -> f64 {
    match kind % 4 {
        0 => {
            if (r + c) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        1 => {
            if r % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        2 => {
            if c % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => 0.0,
    }
}

const STRIPE_AMP: f64 = 0.04;
const LATTICE_AMP: f64 = 0.06;
const SIG_AMP: f64 = 0.40;
const NOISE_STD: f64 = 0.05;

/// Evidence tiers: (block scale, pairs per image, per-pair flip probability).
/// Tier s is readable only at patch sizes ≤ s; the flip rate sets the
/// residual uncertainty each tier leaves behind.
const TIERS: [(usize, usize, f64); 4] =
    [(8, 1, 0.25), (4, 1, 0.20), (2, 2, 0.15), (1, 3, 0.10)];

/// Number of fixed block layouts; drawn per image. Keeps same-class images
/// pixel-comparable for the nearest-neighbor oracle while preventing a
/// coarse encoder from memorizing one fixed sub-patch pooling.
const LAYOUT_VARIANTS: usize = 16;

/// Anchor of pair k of a tier in layout `variant`: a deterministic pick
/// from the valid (s-aligned rows, 2s-aligned columns) grid.
fn tier_anchor(
    size: usize,
    s: usize,
    variant: usize,
    k: usize,
    taken: &[(usize, usize, usize)],
) -> (usize, usize) {
    let rows = size / s;
    let cols = size / (2 * s);
    let n = rows * cols;
    let mut index = (variant * 7 + k * 11 + s * 3) % n;
    // Walk the candidate grid until the pair is disjoint from larger
    // blocks already painted.
    for _ in 0..n {
        let r0 = (index / cols) * s;
        let c0 = (index % cols) * 2 * s;
        let overlaps = taken.iter().any(|&(tr, tc, ts)| {
            let (h, w) = (ts, 2 * ts);
            r0 < tr + h && tr < r0 + s && c0 < tc + w && tc < c0 + 2 * s
        });
        if !overlaps {
            return (r0, c0);
        }
        index = (index + 1) % n;
    }
    ((index / cols) * s, (index % cols) * 2 * s)
}

fn render_classification_image(
    img: &mut [f32],
    size: usize,
    class: usize,
    num_classes: usize,
    rng: &mut Rng,
) {
    let plane = size * size;
    // Class-independent nuisance texture.
    let (sa, sb) = STRIPE_DIRS[rng.below(STRIPE_DIRS.len())];
    let lattice_kind = rng.below(4);
    let phase_r = rng.below(4);
    let phase_c = rng.below(4);
    let stripe_amp = STRIPE_AMP * (0.8 + 0.4 * rng.uniform());
    let lattice_amp = LATTICE_AMP * (0.8 + 0.4 * rng.uniform());
    for r in 0..size {
        for c in 0..size {
            let rr = r + phase_r;
            let cc = c + phase_c;
            let st = (sa * rr as i64 + sb * cc as i64).rem_euclid(4);
            let stripe = if st < 2 { 1.0 } else { -1.0 };
            let lat = lattice_value(lattice_kind, rr, cc);
            let v = 0.5 + stripe_amp * stripe + lattice_amp * lat;
            for ch in 0..3 {
                img[ch * plane + r * size + c] = v as f32;
            }
        }
    }

    // Class-independent distractor shapes, occluding the texture. Colors
    // stay mid-range so they never mimic signature extremes.
    let n_shapes = 2 + rng.below(2);
    for _ in 0..n_shapes {
        let color = [
            0.3 + 0.4 * rng.uniform(),
            0.3 + 0.4 * rng.uniform(),
            0.3 + 0.4 * rng.uniform(),
        ];
        let sh = size / 8 + rng.below(size / 5);
        let sw = size / 8 + rng.below(size / 5);
        let r0 = rng.below(size - sh.min(size - 1));
        let c0 = rng.below(size - sw.min(size - 1));
        let disc = rng.uniform() < 0.5;
        let (cy, cx, rad) = (
            r0 as f64 + sh as f64 / 2.0,
            c0 as f64 + sw as f64 / 2.0,
            sh.min(sw) as f64 / 2.0,
        );
        for r in r0..(r0 + sh).min(size) {
            for c in c0..(c0 + sw).min(size) {
                if disc {
                    let dr = r as f64 - cy;
                    let dc = c as f64 - cx;
                    if dr * dr + dc * dc > rad * rad {
                        continue;
                    }
                }
                for ch in 0..3 {
                    img[ch * plane + r * size + c] = color[ch] as f32;
                }
            }
        }
    }

    // Anti-paired correlation tiers (painted over the shapes so evidence is
    // never occluded). Each pair votes for the class, flipped to one of the
    // wrong signatures with the tier's flip probability.
    let variant = rng.below(LAYOUT_VARIANTS);
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    for &(s, pairs, flip_q) in &TIERS {
        if 2 * s > size {
            continue;
        }
        for k in 0..pairs {
            let (r0, c0) = tier_anchor(size, s, variant, k, &taken);
            taken.push((r0, c0, s));
            let vote_class = if rng.uniform() < flip_q {
                // A coherent lie: one of the wrong signatures.
                (class + 1 + rng.below(num_classes - 1)) % num_classes
            } else {
                class
            };
            let (ci, cj, sign) = CLASS_SIGS[vote_class % CLASS_SIGS.len()];
            for (block, flip) in [(0usize, 1.0), (1, -1.0)] {
                let mut px = [0.5f64; 3];
                px[ci] = 0.5 + flip * SIG_AMP;
                px[cj] = 0.5 + flip * sign * SIG_AMP;
                for dr in 0..s {
                    for dc in 0..s {
                        let at = (r0 + dr) * size + c0 + block * s + dc;
                        for ch in 0..3 {
                            img[ch * plane + at] = px[ch] as f32;
                        }
                    }
                }
            }
        }
    }

    // Pixel noise, then clamp to [0, 1].
    for v in img.iter_mut() {
        let noisy = *v as f64 + NOISE_STD * rng.normal();
        *v = noisy.clamp(0.0, 1.0) as f32;
    }
}

/// Procedurally rendered texture-classification set; class evidence lives at
/// stripe, lattice, and single-pixel scales (see module docs). Classes are
/// balanced round-robin; fully deterministic from the seed.
pub fn synth_classification(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_classification_split(n, size, num_classes, seed, "train")
}

pub fn synth_classification_split(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    split: &str,
) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::Data(format!("image size {size} too small (≥ 8)")));
    }
    if !(2..=8).contains(&num_classes) {
        return Err(Error::Data(format!(
            "num_classes {num_classes} unsupported (2..=8)"
        )));
    }
    let plane = size * size;
    let mut images = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = Rng::derive_indexed(seed, &format!("synth-cls/{split}"), i as u64);
        render_classification_image(
            &mut images[i * 3 * plane..(i + 1) * 3 * plane],
            size,
            class,
            num_classes,
            &mut rng,
        );
        labels.push(class as u32);
    }
    Ok(Dataset {
        images,
        n,
        channels: 3,
        height: size,
        width: size,
        labels: Labels::Class(labels),
        num_classes,
        split: split.to_string(),
        native_resolution: size,
        seed,
        normalization: None,
    })
}

// ── Synthetic segmentation ──────────────────────────────────────────

/// Class palette for segmentation foregrounds (class 0 is background).
const SEG_PALETTE: [[f64; 3]; 7] = [
    [0.85, 0.25, 0.25],
    [0.25, 0.8, 0.3],
    [0.25, 0.35, 0.85],
    [0.85, 0.8, 0.25],
    [0.8, 0.3, 0.8],
    [0.3, 0.8, 0.8],
    [0.9, 0.55, 0.2],
];

struct SegCanvas<'a> {
    img: &'a mut [f32],
    mask: &'a mut [u8],
    size: usize,
}

impl SegCanvas<'_> {
    /// One shared rasterizer paints image and mask together.
    fn paint(&mut self, r: i64, c: i64, color: [f64; 3], class: u8) {
        if r < 0 || c < 0 || r >= self.size as i64 || c >= self.size as i64 {
            return;
        }
        let plane = self.size * self.size;
        let at = r as usize * self.size + c as usize;
        for ch in 0..3 {
            self.img[ch * plane + at] = color[ch] as f32;
        }
        self.mask[at] = class;
    }
}

fn render_segmentation_image(
    img: &mut [f32],
    mask: &mut [u8],
    size: usize,
    num_classes: usize,
    rng: &mut Rng,
) {
    let plane = size * size;
    // Background texture, class 0.
    for r in 0..size {
        for c in 0..size {
            let checker = if (r / 2 + c / 2) % 2 == 0 { 0.04 } else { -0.04 };
            let v = 0.45 + checker + 0.03 * rng.normal();
            for ch in 0..3 {
                img[ch * plane + r * size + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    mask.fill(0);
    let mut canvas = SegCanvas { img, mask, size };

    let fg_classes = num_classes - 1;
    let jitter = |rng: &mut Rng, base: [f64; 3]| {
        [
            (base[0] + 0.08 * rng.normal()).clamp(0.05, 0.95),
            (base[1] + 0.08 * rng.normal()).clamp(0.05, 0.95),
            (base[2] + 0.08 * rng.normal()).clamp(0.05, 0.95),
        ]
    };

    // Filled shapes.
    let n_shapes = 2 + rng.below(2);
    for _ in 0..n_shapes {
        let class = 1 + rng.below(fg_classes);
        let color = jitter(rng, SEG_PALETTE[(class - 1) % SEG_PALETTE.len()]);
        let extent = size / 6 + rng.below(size / 5);
        let r0 = rng.below(size - extent.min(size - 1)) as i64;
        let c0 = rng.below(size - extent.min(size - 1)) as i64;
        if rng.uniform() < 0.5 {
            for r in r0..r0 + extent as i64 {
                for c in c0..c0 + extent as i64 {
                    canvas.paint(r, c, color, class as u8);
                }
            }
        } else {
            let rad = extent as f64 / 2.0;
            let (cy, cx) = (r0 as f64 + rad, c0 as f64 + rad);
            for r in r0..r0 + extent as i64 {
                for c in c0..c0 + extent as i64 {
                    let (dr, dc) = (r as f64 - cy, c as f64 - cx);
                    if dr * dr + dc * dc <= rad * rad {
                        canvas.paint(r, c, color, class as u8);
                    }
                }
            }
        }
    }

    // Thin strokes: 1–2 px wide line segments. These carry the detail that
    // coarse patch grids cannot resolve.
    let n_strokes = 2 + rng.below(3);
    for _ in 0..n_strokes {
        let class = 1 + rng.below(fg_classes);
        let color = jitter(rng, SEG_PALETTE[(class - 1) % SEG_PALETTE.len()]);
        let width = 1 + rng.below(2);
        let (r0, c0) = (rng.below(size) as f64, rng.below(size) as f64);
        let ang = rng.uniform() * std::f64::consts::TAU;
        let len = (size / 3 + rng.below(size / 2)) as f64;
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f64 / 2.0;
            let r = r0 + t * ang.sin();
            let c = c0 + t * ang.cos();
            for dr in 0..width {
                for dc in 0..width {
                    canvas.paint(
                        r.round() as i64 + dr as i64,
                        c.round() as i64 + dc as i64,
                        color,
                        class as u8,
                    );
                }
            }
        }
    }
}

/// Colored shapes and thin strokes on a textured background; the mask is the
/// exact rasterization (image and mask share the painting loop).
pub fn synth_segmentation(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_segmentation_split(n, size, num_classes, seed, "train")
}

pub fn synth_segmentation_split(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
    split: &str,
) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::Data(format!("image size {size} too small (≥ 8)")));
    }
    if !(2..=8).contains(&num_classes) {
        return Err(Error::Data(format!(
            "num_classes {num_classes} unsupported for segmentation (2..=8)"
        )));
    }
    let plane = size * size;
    let mut images = vec![0.0f32; n * 3 * plane];
    let mut masks = vec![0u8; n * plane];
    for i in 0..n {
        let mut rng = Rng::derive_indexed(seed, &format!("synth-seg/{split}"), i as u64);
        render_segmentation_image(
            &mut images[i * 3 * plane..(i + 1) * 3 * plane],
            &mut masks[i * plane..(i + 1) * plane],
            size,
            num_classes,
            &mut rng,
        );
    }
    Ok(Dataset {
        images,
        n,
        channels: 3,
        height: size,
        width: size,
        labels: Labels::Masks(masks),
        num_classes,
        split: split.to_string(),
        native_resolution: size,
        seed,
        normalization: None,
    })
}

// ── Binary format loaders ───────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryFormat {
    Idx,
    CifarBinary,
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            Error::Data(format!(
                "{what}: truncated at byte {offset} (file has {} bytes)",
                bytes.len()
            ))
        })
}

/// IDX image file (magic 0x00000803, big-endian dims, u8 pixels). Labels are
/// read from the sibling file following the standard naming convention
/// (`…-images-idx3-ubyte` → `…-labels-idx1-ubyte`).
fn load_idx(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let magic = read_be_u32(&bytes, 0, "idx images")?;
    if magic != 0x0000_0803 {
        return Err(Error::Data(format!(
            "{}: bad IDX image magic {magic:#010x} at byte 0 (want 0x00000803)",
            path.display()
        )));
    }
    let n = read_be_u32(&bytes, 4, "idx images")? as usize;
    let rows = read_be_u32(&bytes, 8, "idx images")? as usize;
    let cols = read_be_u32(&bytes, 12, "idx images")? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let images: Vec<f32> = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();

    let label_path = path
        .to_string_lossy()
        .replace("images", "labels")
        .replace("idx3", "idx1");
    let label_path = Path::new(&label_path);
    let mut lbytes = Vec::new();
    std::fs::File::open(label_path)
        .map_err(|_| {
            Error::Data(format!(
                "label file {} not found next to image file",
                label_path.display()
            ))
        })?
        .read_to_end(&mut lbytes)?;
    let lmagic = read_be_u32(&lbytes, 0, "idx labels")?;
    if lmagic != 0x0000_0801 {
        return Err(Error::Data(format!(
            "{}: bad IDX label magic {lmagic:#010x} at byte 0 (want 0x00000801)",
            label_path.display()
        )));
    }
    let ln = read_be_u32(&lbytes, 4, "idx labels")? as usize;
    if ln != n || lbytes.len() != 8 + n {
        return Err(Error::Data(format!(
            "{}: expected {} labels / {} bytes, found {} / {}",
            label_path.display(),
            n,
            8 + n,
            ln,
            lbytes.len()
        )));
    }
    let labels: Vec<u32> = lbytes[8..].iter().map(|&b| b as u32).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(Dataset {
        images,
        n,
        channels: 1,
        height: rows,
        width: cols,
        labels: Labels::Class(labels),
        num_classes,
        split: "train".into(),
        native_resolution: rows,
        seed: 0,
        normalization: None,
    })
}

/// CIFAR binary: rows of 1 label byte + 1024 R + 1024 G + 1024 B bytes.
fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    const ROW: usize = 1 + 3 * 1024;
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % ROW != 0 {
        let n_full = bytes.len() / ROW;
        return Err(Error::Data(format!(
            "{}: expected a multiple of {ROW} bytes, found {} ({} full rows then truncation at byte {})",
            path.display(),
            bytes.len(),
            n_full,
            n_full * ROW
        )));
    }
    let n = bytes.len() / ROW;
    let mut images = Vec::with_capacity(n * 3 * 1024);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let row = &bytes[i * ROW..(i + 1) * ROW];
        labels.push(row[0] as u32);
        images.extend(row[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(Dataset {
        images,
        n,
        channels: 3,
        height: 32,
        width: 32,
        labels: Labels::Class(labels),
        num_classes,
        split: "train".into(),
        native_resolution: 32,
        seed: 0,
        normalization: None,
    })
}

pub fn load_small_binary(path: &Path, format: BinaryFormat) -> Result<Dataset> {
    match format {
        BinaryFormat::Idx => load_idx(path),
        BinaryFormat::CifarBinary => load_cifar_binary(path),
    }
}

// ── Single-file dataset container ───────────────────────────────────

const DATA_MAGIC: &[u8; 8] = b"PLABDATA";

#[derive(Serialize, Deserialize)]
struct DataHeader {
    version: u32,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    split: String,
    native_resolution: usize,
    seed: u64,
    normalization: Option<Normalization>,
    label_kind: String,
}

/// Serialize to the single-file container: JSON header + raw little-endian
/// pixel/label buffers.
pub fn save_container(ds: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let header = DataHeader {
        version: 1,
        n: ds.n,
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
        num_classes: ds.num_classes,
        split: ds.split.clone(),
        native_resolution: ds.native_resolution,
        seed: ds.seed,
        normalization: ds.normalization.clone(),
        label_kind: match ds.labels {
            Labels::Class(_) => "class".into(),
            Labels::Masks(_) => "masks".into(),
        },
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(DATA_MAGIC)?;
    f.write_all(&(hjson.len() as u64).to_le_bytes())?;
    f.write_all(&hjson)?;
    let mut buf = Vec::with_capacity(ds.images.len() * 4);
    for &v in &ds.images {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    match &ds.labels {
        Labels::Class(v) => {
            let mut lb = Vec::with_capacity(v.len() * 4);
            for &x in v {
                lb.extend_from_slice(&x.to_le_bytes());
            }
            f.write_all(&lb)?;
        }
        Labels::Masks(v) => f.write_all(v)?,
    }
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..8] != DATA_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a dataset container (bad magic at byte 0)",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: DataHeader = serde_json::from_slice(
        bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Data("truncated container header".into()))?,
    )?;
    let px_len = header.n * header.channels * header.height * header.width * 4;
    let px_start = 16 + hlen;
    let px = bytes
        .get(px_start..px_start + px_len)
        .ok_or_else(|| {
            Error::Data(format!(
                "truncated pixels: expected {} bytes at offset {px_start}",
                px_len
            ))
        })?;
    let images: Vec<f32> = px
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let rest = &bytes[px_start + px_len..];
    let labels = match header.label_kind.as_str() {
        "class" => {
            if rest.len() != header.n * 4 {
                return Err(Error::Data(format!(
                    "truncated labels: expected {} bytes, found {}",
                    header.n * 4,
                    rest.len()
                )));
            }
            Labels::Class(
                rest.chunks_exact(4)
                    .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            )
        }
        "masks" => {
            let want = header.n * header.height * header.width;
            if rest.len() != want {
                return Err(Error::Data(format!(
                    "truncated masks: expected {want} bytes, found {}",
                    rest.len()
                )));
            }
            Labels::Masks(rest.to_vec())
        }
        other => return Err(Error::Data(format!("unknown label kind {other}"))),
    };
    Ok(Dataset {
        images,
        n: header.n,
        channels: header.channels,
        height: header.height,
        width: header.width,
        labels,
        num_classes: header.num_classes,
        split: header.split,
        native_resolution: header.native_resolution,
        seed: header.seed,
        normalization: header.normalization,
    })
}

// ── Deterministic batching and augmentation ─────────────────────────

/// Fixed per-epoch permutation, independent of platform and thread timing.
pub fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::derive_indexed(seed, "shuffle", epoch as u64);
    rng.shuffle(&mut idx);
    idx
}

/// Random horizontal flip plus random crop with `pad` pixels of zero
/// padding. The only augmentations used at desk scale.
pub fn augment_flip_crop(
    image: &[f32],
    channels: usize,
    size: usize,
    pad: usize,
    rng: &mut Rng,
) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0.0f32; image.len()];
    let flip = rng.uniform() < 0.5;
    let dr = rng.below(2 * pad + 1) as i64 - pad as i64;
    let dc = rng.below(2 * pad + 1) as i64 - pad as i64;
    for c in 0..channels {
        for r in 0..size {
            for col in 0..size {
                let src_c = if flip { size - 1 - col } else { col } as i64 + dc;
                let src_r = r as i64 + dr;
                let v = if src_r < 0
                    || src_c < 0
                    || src_r >= size as i64
                    || src_c >= size as i64
                {
                    0.0
                } else {
                    image[c * plane + src_r as usize * size + src_c as usize]
                };
                out[c * plane + r * size + col] = v;
            }
        }
    }
    out
}

/// Mask-synchronized horizontal flip for segmentation training.
pub fn augment_flip_with_mask(
    image: &[f32],
    mask: &[u8],
    channels: usize,
    size: usize,
    rng: &mut Rng,
) -> (Vec<f32>, Vec<u8>) {
    if rng.uniform() < 0.5 {
        return (image.to_vec(), mask.to_vec());
    }
    let plane = size * size;
    let mut img = vec![0.0f32; image.len()];
    let mut msk = vec![0u8; mask.len()];
    for r in 0..size {
        for c in 0..size {
            msk[r * size + c] = mask[r * size + (size - 1 - c)];
            for ch in 0..channels {
                img[ch * plane + r * size + c] = image[ch * plane + r * size + (size - 1 - c)];
            }
        }
    }
    (img, msk)
}
