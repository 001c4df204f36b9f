//! Analytical cost model: sequence length, parameters, FLOPs, and
//! activation memory as closed-form functions of the configuration.
//!
//! Conventions:
//! * a multiply-accumulate counts as 2 FLOPs;
//! * attention per block: 8LD² projections + 4L²D score/value work
//!   (the quadratic part is also reported separately);
//! * scan per block: channel/gate projections (linear in L) plus the
//!   recurrence itself; bidirectional doubles the gate/recurrence work;
//! * MLP per block: 4·L·D·mlp_dim;
//! * activation memory counts per-block token activations at Θ(L·D) with no
//!   L² score materialization (streaming-attention assumption), at a stated
//!   element width, defaulting to 2 bytes to match half-precision training
//!   measurements. Model and optimizer state are excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::{MixerKind, ScanDirection};
use crate::model::{count_params_breakdown, EncoderConfig, TaskHead};

/// Where the per-image FLOPs go.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub patchify: u64,
    /// Attention only: the 4L²D score/value term.
    pub attention_score: u64,
    /// Everything else inside the mixers (projections, gates, recurrence).
    pub mixer_linear: u64,
    pub mlp: u64,
    pub head: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostEstimate {
    pub seq_len: u64,
    pub params: u64,
    /// Projection weights of the patchify layer alone (p²·C·D): the term
    /// whose growth the fixed-length input-scaling pathology exposes.
    pub patchify_params: u64,
    pub flops_per_image: u64,
    pub flops: FlopsBreakdown,
    pub act_mem_bytes: u64,
    pub element_bytes: u64,
}

/// Closed-form totals for one configuration.
pub fn estimate(cfg: &EncoderConfig, element_bytes: usize) -> Result<CostEstimate> {
    cfg.validate()?;
    let l = cfg.tokens() as u64; // after optional sequence extension
    let l_raw = cfg.patch.seq_len() as u64;
    let d = cfg.embed_dim as u64;
    let mlp = cfg.mlp_dim as u64;
    let s = cfg.state_dim as u64;
    let depth = cfg.blocks as u64;
    let pd = cfg.patch.patch_dim() as u64;
    let k = cfg.num_classes as u64;
    let dirs = match (cfg.mixer_kind, cfg.direction) {
        (MixerKind::Scan, ScanDirection::Bidirectional) => 2u64,
        _ => 1u64,
    };

    let patchify = 2 * l_raw * pd * d;
    let (attention_score, mixer_linear) = match cfg.mixer_kind {
        MixerKind::Attention => (depth * 4 * l * l * d, depth * 8 * l * d * d),
        MixerKind::Scan => {
            // u and output projections once, gate projections and the
            // recurrence per direction.
            let proj = 2 * l * d * s + 2 * l * s * d + dirs * 3 * 2 * l * d * s;
            let rec = dirs * 6 * l * s;
            (0, depth * (proj + rec))
        }
    };
    let mlp_flops = depth * 4 * l * d * mlp;
    let head = 2 * d * k;
    let total = patchify + attention_score + mixer_linear + mlp_flops + head;

    // Per-block token activations (elements): residual stream + norms +
    // mixer intermediates + MLP hidden, all Θ(L).
    let per_block_elems = match cfg.mixer_kind {
        MixerKind::Attention => 8 * l * d + l * mlp,
        MixerKind::Scan => 4 * l * d + dirs * 6 * l * s + l * mlp,
    };
    let act_elems = l * d + depth * per_block_elems;

    let counts = count_params_breakdown(cfg, &TaskHead::Classify);
    Ok(CostEstimate {
        seq_len: l_raw,
        params: counts.total,
        patchify_params: (cfg.patch.patch_dim() * cfg.embed_dim) as u64,
        flops_per_image: total,
        flops: FlopsBreakdown {
            patchify,
            attention_score,
            mixer_linear,
            mlp: mlp_flops,
            head,
        },
        act_mem_bytes: act_elems * element_bytes as u64,
        element_bytes: element_bytes as u64,
    })
}

/// Default element width for memory accounting (half precision).
pub const DEFAULT_ELEMENT_BYTES: usize = 2;

/// Fix image_size/patch_size and scale both by integer factors: L stays
/// constant while the patchify projection grows as scale², the pathology
/// this scan exists to expose.
pub fn fixed_length_input_scan(
    base: &EncoderConfig,
    scales: &[usize],
    element_bytes: usize,
) -> Result<Vec<(usize, CostEstimate)>> {
    let mut out = Vec::with_capacity(scales.len());
    for &scale in scales {
        if scale < 1 {
            return Err(Error::Config("input scale must be ≥ 1".into()));
        }
        let mut cfg = base.clone();
        cfg.patch.image_h = base.patch.image_h * scale;
        cfg.patch.image_w = base.patch.image_w * scale;
        cfg.patch.patch = base.patch.patch * scale;
        let est = estimate(&cfg, element_bytes)?;
        out.push((scale, est));
    }
    Ok(out)
}

/// Aligned-column text table for a set of estimates.
pub fn render_table(rows: &[(String, CostEstimate)]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<24} {:>9} {:>14} {:>15} {:>16} {:>13}\n",
        "config", "seq_len", "params", "patchify_params", "flops_per_image", "act_mem_mb"
    ));
    for (name, e) in rows {
        s.push_str(&format!(
            "{:<24} {:>9} {:>14} {:>15} {:>16} {:>13.2}\n",
            name,
            e.seq_len,
            e.params,
            e.patchify_params,
            e.flops_per_image,
            e.act_mem_bytes as f64 / (1024.0 * 1024.0)
        ));
    }
    s
}
