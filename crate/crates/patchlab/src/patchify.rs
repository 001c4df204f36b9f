//! Tokenization geometry: images to token sequences at any patch size p ≥ 1,
//! positional-embedding resampling across resolutions, and the
//! information-free sequence extension used by the matched-length ablation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::linalg::{self, AxisMap};
use crate::tensor::{Element, Graph, Tid};

/// Geometry of the patchify layer. Square inputs only; rectangular images
/// are rejected up front.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn new(
        image_h: usize,
        image_w: usize,
        channels: usize,
        patch: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if image_h != image_w {
            return Err(Error::Config(format!(
                "non-square images unsupported: {image_h}x{image_w}"
            )));
        }
        let cfg = PatchConfig {
            image_h,
            image_w,
            channels,
            patch,
            embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.image_h % self.patch != 0
            || self.image_w % self.patch != 0
        {
            return Err(Error::Config(format!(
                "patch size {} does not divide image {}x{}",
                self.patch, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    /// Tokens per image axis.
    pub fn grid(&self) -> usize {
        self.image_h / self.patch
    }

    /// Sequence length L = (H/p)·(W/p).
    pub fn seq_len(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Flattened patch width p·p·C fed to the projection.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Graph bindings for the patch-embedding weights. The CLS token and its
/// positional offset live here too but are injected by the model, keeping
/// this module mixer-agnostic.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedBinding {
    /// [(p·p·C) × D]
    pub proj: Tid,
    /// [D]
    pub bias: Tid,
    /// [L × D], spatial tokens only.
    pub pos: Tid,
    /// [1 × D]
    pub cls: Tid,
    /// [1 × D] learned positional offset for the CLS token.
    pub cls_pos: Tid,
}

/// Row-major gather index map: row = token over the (H/p)×(W/p) grid, col =
/// flattened (channel, pi, pj) offset inside the patch. Planar [C×H×W] input.
pub fn patch_index_map(cfg: &PatchConfig) -> Vec<i64> {
    let (h, w, c, p) = (cfg.image_h, cfg.image_w, cfg.channels, cfg.patch);
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(gh * gw * p * p * c);
    for gi in 0..gh {
        for gj in 0..gw {
            for ch in 0..c {
                for pi in 0..p {
                    for pj in 0..p {
                        let row = gi * p + pi;
                        let col = gj * p + pj;
                        idx.push((ch * h * w + row * w + col) as i64);
                    }
                }
            }
        }
    }
    idx
}

/// Tokenize one [C×H×W] image: gather patches, project, add bias and
/// positional embeddings. For p = 1 this is exactly a per-pixel linear map
/// of the C channel values.
pub fn forward<E: Element>(
    g: &mut Graph<E>,
    image: Tid,
    cfg: &PatchConfig,
    w: &PatchEmbedBinding,
) -> Result<Tid> {
    cfg.validate()?;
    let shape = g.shape(image).to_vec();
    if shape != [cfg.channels, cfg.image_h, cfg.image_w] {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: shape,
            rhs: vec![cfg.channels, cfg.image_h, cfg.image_w],
        });
    }
    let l = cfg.seq_len();
    let pd = cfg.patch_dim();
    let patches = g.gather(image, Arc::new(patch_index_map(cfg)), vec![l, pd])?;
    let projected = g.matmul(patches, w.proj)?;
    let biased = g.add(projected, w.bias)?;
    g.add(biased, w.pos)
}

/// Resample a positional table across square grids with align-corners
/// bilinear interpolation. Exact on constant and per-axis-linear fields;
/// the identity when the grid is unchanged.
pub fn pos_embed_resample<E: Element>(
    pos: &[E],
    dim: usize,
    old_grid: usize,
    new_grid: usize,
) -> Result<Vec<E>> {
    if pos.len() != old_grid * old_grid * dim {
        return Err(Error::Config(format!(
            "pos_embed_resample: table of {} entries is not a {old_grid}x{old_grid}x{dim} grid",
            pos.len()
        )));
    }
    if new_grid == old_grid {
        return Ok(pos.to_vec());
    }
    let mut out = vec![E::zero(); new_grid * new_grid * dim];
    linalg::resample_grid(
        pos,
        old_grid,
        old_grid,
        dim,
        new_grid,
        new_grid,
        AxisMap::AlignCorners,
        &mut out,
    );
    Ok(out)
}

/// Lengthen a token sequence by spatial interpolation only: view [L×D] as a
/// g×g grid, bilinearly upsample by an integer factor, and re-flatten
/// row-major. Output index (f·i, f·j) reproduces input token (i, j) exactly;
/// every other output token is a convex combination of ≤4 input tokens, so
/// no new information enters the sequence.
pub fn extend_by_interpolation<E: Element>(
    g: &mut Graph<E>,
    tokens: Tid,
    grid: usize,
    factor: usize,
) -> Result<Tid> {
    if factor < 1 {
        return Err(Error::Config("extension factor must be ≥ 1".into()));
    }
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != grid * grid {
        return Err(Error::ShapeMismatch {
            op: "extend_by_interpolation",
            lhs: shape,
            rhs: vec![grid * grid],
        });
    }
    if factor == 1 {
        return Ok(tokens);
    }
    let d = shape[1];
    let as_grid = g.reshape(tokens, vec![grid, grid, d])?;
    let up = g.resample2d(as_grid, factor * grid, factor * grid, AxisMap::Stride(factor))?;
    g.reshape(up, vec![factor * grid * factor * grid, d])
}

/// Row-major inverse of patchify ordering: [L×D] → [(H/p)×(W/p)×D].
/// CLS must be excluded before the call.
pub fn grid_view<E: Element>(
    g: &mut Graph<E>,
    tokens: Tid,
    cfg: &PatchConfig,
) -> Result<Tid> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != cfg.seq_len() {
        return Err(Error::ShapeMismatch {
            op: "grid_view",
            lhs: shape,
            rhs: vec![cfg.seq_len(), cfg.embed_dim],
        });
    }
    let d = shape[1];
    g.reshape(tokens, vec![cfg.grid(), cfg.grid(), d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn cfg(size: usize, patch: usize, dim: usize) -> PatchConfig {
        PatchConfig::new(size, size, 3, patch, dim).unwrap()
    }

    #[test]
    fn sequence_length_table() {
        // 224-input column of sequence lengths.
        for (p, l) in [(16, 196), (8, 784), (4, 3136), (2, 12544), (1, 50176)] {
            assert_eq!(cfg(224, p, 8).seq_len(), l);
        }
        // Pixel tokenization at smaller inputs.
        assert_eq!(cfg(64, 1, 8).seq_len(), 4096);
        assert_eq!(cfg(128, 1, 8).seq_len(), 16384);
    }

    #[test]
    fn halving_patch_quadruples_length() {
        for p in [16usize, 8, 4, 2] {
            let a = cfg(224, p, 8).seq_len();
            let b = cfg(224, p / 2, 8).seq_len();
            assert_eq!(b, 4 * a);
        }
    }

    #[test]
    fn indivisible_patch_rejected_with_geometry_in_message() {
        let err = PatchConfig::new(224, 224, 3, 13, 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("13") && msg.contains("224"), "{msg}");
    }

    #[test]
    fn non_square_rejected() {
        assert!(PatchConfig::new(64, 32, 3, 8, 8).is_err());
    }

    fn embed_binding<E: Element>(
        g: &mut Graph<E>,
        cfg: &PatchConfig,
        rng: &mut Rng,
    ) -> PatchEmbedBinding {
        let pd = cfg.patch_dim();
        let d = cfg.embed_dim;
        let l = cfg.seq_len();
        let proj: Vec<E> = (0..pd * d)
            .map(|_| E::from_f64(rng.normal() * 0.1))
            .collect();
        let bias: Vec<E> = (0..d).map(|_| E::from_f64(rng.normal() * 0.1)).collect();
        let pos: Vec<E> = (0..l * d)
            .map(|_| E::from_f64(rng.normal() * 0.1))
            .collect();
        PatchEmbedBinding {
            proj: g.leaf(proj, vec![pd, d], false).unwrap(),
            bias: g.leaf(bias, vec![d], false).unwrap(),
            pos: g.leaf(pos, vec![l, d], false).unwrap(),
            cls: g.leaf(vec![E::zero(); d], vec![1, d], false).unwrap(),
            cls_pos: g.leaf(vec![E::zero(); d], vec![1, d], false).unwrap(),
        }
    }

    #[test]
    fn pixel_tokenization_is_per_pixel_linear_map() {
        // p=1: token (i,j) = W^T·rgb(i,j) + bias + pos, via a direct oracle.
        let c = cfg(8, 1, 5);
        let mut rng = Rng::new(31);
        let mut g: Graph<f64> = Graph::inference();
        let img: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.uniform()).collect();
        let image = g.constant(img.clone(), vec![3, 8, 8]).unwrap();
        let b = embed_binding(&mut g, &c, &mut rng);
        let tokens = forward(&mut g, image, &c, &b).unwrap();

        let proj = g.data(b.proj).to_vec();
        let bias = g.data(b.bias).to_vec();
        let pos = g.data(b.pos).to_vec();
        for i in 0..8 {
            for j in 0..8 {
                let t = i * 8 + j;
                for dch in 0..5 {
                    let mut want = bias[dch] + pos[t * 5 + dch];
                    for ch in 0..3 {
                        want += img[ch * 64 + i * 8 + j] * proj[ch * 5 + dch];
                    }
                    let got = g.data(tokens)[t * 5 + dch];
                    assert!((got - want).abs() < 1e-10, "token {t} dim {dch}");
                }
            }
        }
    }

    #[test]
    fn patch_rows_are_row_major_over_grid() {
        // A 4x4 image with p=2: token order (0,0),(0,1),(1,0),(1,1).
        let c = PatchConfig::new(4, 4, 1, 2, 3).unwrap();
        let idx = patch_index_map(&c);
        // First row of the gather = patch at grid (0,0): pixels (0,0),(0,1),(1,0),(1,1).
        assert_eq!(&idx[0..4], &[0, 1, 4, 5]);
        // Second = grid (0,1): pixels (0,2),(0,3),(1,2),(1,3).
        assert_eq!(&idx[4..8], &[2, 3, 6, 7]);
        // Third = grid (1,0).
        assert_eq!(&idx[8..12], &[8, 9, 12, 13]);
    }

    #[test]
    fn grid_view_round_trip_and_index_oracle() {
        let c = cfg(8, 2, 4);
        let mut rng = Rng::new(33);
        let mut g: Graph<f64> = Graph::inference();
        let l = c.seq_len();
        let toks: Vec<f64> = (0..l * 4).map(|_| rng.normal()).collect();
        let tokens = g.constant(toks.clone(), vec![l, 4]).unwrap();
        let grid = grid_view(&mut g, tokens, &c).unwrap();
        assert_eq!(g.shape(grid), &[4, 4, 4]);
        // grid[i][j] == tokens[i·(W/p)+j]
        for i in 0..4 {
            for j in 0..4 {
                for d in 0..4 {
                    assert_eq!(
                        g.data(grid)[(i * 4 + j) * 4 + d],
                        toks[(i * 4 + j) * 4 + d]
                    );
                }
            }
        }
        let flat = g.reshape(grid, vec![l, 4]).unwrap();
        assert_eq!(g.data(flat), toks.as_slice());
    }

    #[test]
    fn pos_resample_identity_and_constants() {
        let mut rng = Rng::new(35);
        let d = 6;
        let pos: Vec<f64> = (0..4 * 4 * d).map(|_| rng.normal()).collect();
        let same = pos_embed_resample(&pos, d, 4, 4).unwrap();
        assert_eq!(same, pos);

        let constant = vec![1.25f64; 3 * 3 * d];
        let up = pos_embed_resample(&constant, d, 3, 7).unwrap();
        for v in up {
            assert!((v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pos_resample_exact_on_linear_ramps() {
        // 2x2 ramp to 3x3: closed-form bilinear on per-axis-linear fields.
        let d = 2;
        let f = |r: f64, c: f64, ch: usize| if ch == 0 { r } else { 10.0 * c };
        let mut pos = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                for ch in 0..d {
                    pos.push(f(r as f64, c as f64, ch));
                }
            }
        }
        let up = pos_embed_resample(&pos, d, 2, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                for ch in 0..d {
                    let want = f(r as f64 / 2.0, c as f64 / 2.0, ch);
                    let got = up[(r * 3 + c) * d + ch];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pos_resample_rejects_non_square() {
        let pos = vec![0.0f64; 5 * 2];
        assert!(pos_embed_resample(&pos, 2, 2, 3).is_err());
    }

    #[test]
    fn extension_factor_one_is_identity() {
        let mut g: Graph<f64> = Graph::inference();
        let t = g.constant(vec![1.0; 4 * 3], vec![4, 3]).unwrap();
        let e = extend_by_interpolation(&mut g, t, 2, 1).unwrap();
        assert_eq!(t, e);
    }

    #[test]
    fn extension_lengths_match_patch_scaling() {
        // g=14 (L=196): factors 2, 4, 8 hit the lengths of p/2, p/4, p/8 runs.
        let mut g: Graph<f64> = Graph::inference();
        let d = 2;
        let t = g.constant(vec![0.5; 196 * d], vec![196, d]).unwrap();
        for (f, l) in [(2usize, 784usize), (4, 3136), (8, 12544)] {
            let e = extend_by_interpolation(&mut g, t, 14, f).unwrap();
            assert_eq!(g.shape(e)[0], l);
        }
    }

    #[test]
    fn extension_round_trip_recovers_original_tokens() {
        let mut rng = Rng::new(37);
        let (grid, f, d) = (5usize, 3usize, 4usize);
        let mut g: Graph<f64> = Graph::inference();
        let toks: Vec<f64> = (0..grid * grid * d).map(|_| rng.normal()).collect();
        let t = g.constant(toks.clone(), vec![grid * grid, d]).unwrap();
        let e = extend_by_interpolation(&mut g, t, grid, f).unwrap();
        let big = g.data(e);
        let og = f * grid;
        for i in 0..grid {
            for j in 0..grid {
                for ch in 0..d {
                    let orig = toks[(i * grid + j) * d + ch];
                    let up = big[((f * i) * og + f * j) * d + ch];
                    assert_eq!(orig, up, "token ({i},{j}) ch {ch}");
                }
            }
        }
    }

    #[test]
    fn extension_outputs_are_convex_combinations() {
        // Every extended token must lie inside the per-channel min/max of its
        // four bracketing source tokens.
        let mut rng = Rng::new(39);
        let (grid, f, d) = (4usize, 2usize, 3usize);
        let mut g: Graph<f64> = Graph::inference();
        let toks: Vec<f64> = (0..grid * grid * d).map(|_| rng.normal()).collect();
        let t = g.constant(toks.clone(), vec![grid * grid, d]).unwrap();
        let e = extend_by_interpolation(&mut g, t, grid, f).unwrap();
        let big = g.data(e);
        let og = f * grid;
        for oi in 0..og {
            for oj in 0..og {
                let (i0, i1) = (oi / f, ((oi / f) + 1).min(grid - 1));
                let (j0, j1) = (oj / f, ((oj / f) + 1).min(grid - 1));
                for ch in 0..d {
                    let corners = [
                        toks[(i0 * grid + j0) * d + ch],
                        toks[(i0 * grid + j1) * d + ch],
                        toks[(i1 * grid + j0) * d + ch],
                        toks[(i1 * grid + j1) * d + ch],
                    ];
                    let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = big[(oi * og + oj) * d + ch];
                    assert!(
                        v >= lo - 1e-12 && v <= hi + 1e-12,
                        "({oi},{oj}) ch {ch}: {v} outside [{lo},{hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn extension_rejects_zero_factor() {
        let mut g: Graph<f64> = Graph::inference();
        let t = g.constant(vec![0.0; 4], vec![4, 1]).unwrap();
        assert!(extend_by_interpolation(&mut g, t, 2, 0).is_err());
    }
}
