//! Encoder assembly: configuration presets, deterministic initialization,
//! classification and decoder-free dense forwards, and parameter counting.
//!
//! A [`Model`] owns a named parameter registry; one registry-spec function
//! is the single source of truth for parameter names, shapes, and init
//! rules, so the analytic counter and the built registry agree exactly by
//! construction. Backbone and head parameters draw from independent rng
//! streams: two models built with the same seed but different heads share
//! bit-identical backbone weights, which the decoder-gap experiment relies
//! on.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::{
    self, AttentionBinding, BlockBinding, BlockConfig, MixerBinding, MixerKind, MlpBinding,
    ScanBinding, ScanDirection, ScanGates,
};
use crate::patchify::{self, PatchConfig, PatchEmbedBinding};
use crate::tensor::linalg::AxisMap;
use crate::tensor::params::{Init, ParamStore};
use crate::tensor::{checkpoint, Element, Graph, Rng, Tid};

/// Weight init std for embeddings, projections, and mixer weights.
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub name: String,
    pub mixer_kind: MixerKind,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    /// Attention heads; presets follow the heads = D/64 convention.
    pub heads: usize,
    /// Scan state dimension; presets fix 64 regardless of model size.
    pub state_dim: usize,
    pub direction: ScanDirection,
    pub patch: PatchConfig,
    pub drop_path_rate: f64,
    pub num_classes: usize,
    /// Sequence extension by token interpolation (1 = off). Used by the
    /// matched-length ablation; adds no information to the sequence.
    pub extend_factor: usize,
    pub ln_eps: f64,
}

impl EncoderConfig {
    fn preset(
        name: &str,
        mixer: MixerKind,
        embed: usize,
        mlp: usize,
        blocks: usize,
    ) -> EncoderConfig {
        EncoderConfig {
            name: name.to_string(),
            mixer_kind: mixer,
            embed_dim: embed,
            mlp_dim: mlp,
            blocks,
            heads: embed / 64,
            state_dim: 64,
            direction: ScanDirection::Bidirectional,
            patch: PatchConfig {
                image_h: 224,
                image_w: 224,
                channels: 3,
                patch: 16,
                embed_dim: embed,
            },
            drop_path_rate: 0.0,
            num_classes: 1000,
            extend_factor: 1,
            ln_eps: 1e-6,
        }
    }

    pub fn deit_tiny() -> Self {
        Self::preset("deit-tiny", MixerKind::Attention, 192, 768, 12)
    }
    pub fn deit_small() -> Self {
        Self::preset("deit-small", MixerKind::Attention, 384, 1536, 12)
    }
    pub fn deit_base() -> Self {
        Self::preset("deit-base", MixerKind::Attention, 768, 3072, 12)
    }
    pub fn deit_large() -> Self {
        Self::preset("deit-large", MixerKind::Attention, 1024, 4096, 24)
    }
    pub fn deit_huge() -> Self {
        Self::preset("deit-huge", MixerKind::Attention, 1280, 5120, 32)
    }
    pub fn adventurer_tiny() -> Self {
        Self::preset("adventurer-tiny", MixerKind::Scan, 256, 640, 12)
    }
    pub fn adventurer_small() -> Self {
        Self::preset("adventurer-small", MixerKind::Scan, 512, 1280, 12)
    }
    pub fn adventurer_base() -> Self {
        Self::preset("adventurer-base", MixerKind::Scan, 768, 1920, 12)
    }
    pub fn adventurer_large() -> Self {
        Self::preset("adventurer-large", MixerKind::Scan, 1024, 2560, 24)
    }
    pub fn adventurer_huge() -> Self {
        Self::preset("adventurer-huge", MixerKind::Scan, 1280, 3200, 32)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "deit-tiny" => Some(Self::deit_tiny()),
            "deit-small" => Some(Self::deit_small()),
            "deit-base" => Some(Self::deit_base()),
            "deit-large" => Some(Self::deit_large()),
            "deit-huge" => Some(Self::deit_huge()),
            "adventurer-tiny" => Some(Self::adventurer_tiny()),
            "adventurer-small" => Some(Self::adventurer_small()),
            "adventurer-base" => Some(Self::adventurer_base()),
            "adventurer-large" => Some(Self::adventurer_large()),
            "adventurer-huge" => Some(Self::adventurer_huge()),
            _ => None,
        }
    }

    /// Desk-scale configuration used by the experiment suite: small enough
    /// to train on a CPU, deep enough to show every scaling effect.
    pub fn desk(mixer: MixerKind, image: usize, patch: usize, classes: usize) -> Self {
        let embed = 8;
        EncoderConfig {
            name: format!("desk-{}", mixer.name()),
            mixer_kind: mixer,
            embed_dim: embed,
            mlp_dim: 32,
            blocks: 2,
            heads: 2,
            state_dim: 16,
            direction: ScanDirection::Bidirectional,
            patch: PatchConfig {
                image_h: image,
                image_w: image,
                channels: 3,
                patch,
                embed_dim: embed,
            },
            drop_path_rate: 0.0,
            num_classes: classes,
            extend_factor: 1,
            ln_eps: 1e-6,
        }
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch.patch = patch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.patch.embed_dim != self.embed_dim {
            return Err(Error::Config(
                "patch embed_dim disagrees with encoder embed_dim".into(),
            ));
        }
        if self.mixer_kind == MixerKind::Attention
            && (self.heads == 0 || self.embed_dim % self.heads != 0)
        {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mixer_kind == MixerKind::Scan && self.state_dim == 0 {
            return Err(Error::Config("scan state_dim must be ≥ 1".into()));
        }
        if self.extend_factor < 1 {
            return Err(Error::Config("extend_factor must be ≥ 1".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            mixer_kind: self.mixer_kind,
            embed_dim: self.embed_dim,
            mlp_dim: self.mlp_dim,
            heads: self.heads,
            state_dim: self.state_dim,
            direction: self.direction,
            drop_path_rate: self.drop_path_rate,
        }
    }

    /// Sequence length after optional extension (CLS excluded).
    pub fn tokens(&self) -> usize {
        let g = self.patch.grid() * self.extend_factor;
        g * g
    }
}

/// Dense-prediction head. `Linear` is a single projection on the token grid;
/// `ConvProxy` is a small learned decoder (per stage: 2× upsample, then
/// 3×3 conv, norm, gelu) standing in for heavyweight segmentation decoders.
/// With `stages = 0` the proxy collapses to the linear head exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub kind: SegHeadKind,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegHeadKind {
    Linear,
    ConvProxy { channels: usize, stages: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskHead {
    Classify,
    Dense(SegHeadConfig),
}

// ── Registry specification ──────────────────────────────────────────

enum Group {
    Backbone,
    Head,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitRule,
    group: Group,
}

enum InitRule {
    Zeros,
    Ones,
    TruncNormal,
    /// Residual-branch output projections: trunc normal downscaled by
    /// 1/sqrt(2·depth), which keeps deep long-sequence runs stable.
    TruncNormalResidual,
    /// Decay-gate bias spread: timescales from a few tokens to hundreds, so
    /// long sequences are summarizable by the recurrent state at init.
    DecaySpread,
}

/// Canonical parameter list for a configuration: the single source of truth
/// behind building, counting, and checkpoint layout.
fn registry_spec(cfg: &EncoderConfig, head: &TaskHead) -> Vec<ParamSpec> {
    use Group::*;
    use InitRule::*;
    let d = cfg.embed_dim;
    let l = cfg.patch.seq_len();
    let mut spec = vec![
        ParamSpec {
            name: "patch.proj".into(),
            shape: vec![cfg.patch.patch_dim(), d],
            init: TruncNormal,
            group: Backbone,
        },
        ParamSpec {
            name: "patch.bias".into(),
            shape: vec![d],
            init: Zeros,
            group: Backbone,
        },
        ParamSpec {
            name: "patch.pos".into(),
            shape: vec![l, d],
            init: TruncNormal,
            group: Backbone,
        },
        ParamSpec {
            name: "patch.cls".into(),
            shape: vec![1, d],
            init: TruncNormal,
            group: Backbone,
        },
        ParamSpec {
            name: "patch.cls_pos".into(),
            shape: vec![1, d],
            init: TruncNormal,
            group: Backbone,
        },
    ];
    for i in 0..cfg.blocks {
        let p = |suffix: &str, shape: Vec<usize>, init: InitRule| ParamSpec {
            name: format!("block{i:02}.{suffix}"),
            shape,
            init,
            group: Backbone,
        };
        spec.push(p("ln1.gamma", vec![d], Ones));
        spec.push(p("ln1.beta", vec![d], Zeros));
        match cfg.mixer_kind {
            MixerKind::Attention => {
                for w in ["attn.wq", "attn.wk", "attn.wv"] {
                    spec.push(p(w, vec![d, d], TruncNormal));
                }
                spec.push(p("attn.wo", vec![d, d], TruncNormalResidual));
                for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                    spec.push(p(b, vec![d], Zeros));
                }
            }
            MixerKind::Scan => {
                let s = cfg.state_dim;
                spec.push(p("scan.w_in", vec![d, s], TruncNormal));
                spec.push(p("scan.b_in", vec![s], Zeros));
                let mut dirs = vec!["scan.f"];
                if cfg.direction == ScanDirection::Bidirectional {
                    dirs.push("scan.r");
                }
                for dir in dirs {
                    for w in ["w_decay", "w_input", "w_output"] {
                        spec.push(p(&format!("{dir}.{w}"), vec![d, s], TruncNormal));
                    }
                    spec.push(p(&format!("{dir}.b_decay"), vec![s], DecaySpread));
                    for b in ["b_input", "b_output"] {
                        spec.push(p(&format!("{dir}.{b}"), vec![s], Zeros));
                    }
                }
                spec.push(p("scan.w_out", vec![s, d], TruncNormalResidual));
                spec.push(p("scan.b_out", vec![d], Zeros));
            }
        }
        spec.push(p("ln2.gamma", vec![d], Ones));
        spec.push(p("ln2.beta", vec![d], Zeros));
        spec.push(p("mlp.w1", vec![d, cfg.mlp_dim], TruncNormal));
        spec.push(p("mlp.b1", vec![cfg.mlp_dim], Zeros));
        spec.push(p("mlp.w2", vec![cfg.mlp_dim, d], TruncNormalResidual));
        spec.push(p("mlp.b2", vec![d], Zeros));
    }
    spec.push(ParamSpec {
        name: "final.gamma".into(),
        shape: vec![d],
        init: Ones,
        group: Backbone,
    });
    spec.push(ParamSpec {
        name: "final.beta".into(),
        shape: vec![d],
        init: Zeros,
        group: Backbone,
    });
    match head {
        TaskHead::Classify => {
            spec.push(ParamSpec {
                name: "head.weight".into(),
                shape: vec![d, cfg.num_classes],
                init: TruncNormal,
                group: Head,
            });
            spec.push(ParamSpec {
                name: "head.bias".into(),
                shape: vec![cfg.num_classes],
                init: Zeros,
                group: Head,
            });
        }
        TaskHead::Dense(seg) => {
            let (channels, stages) = match seg.kind {
                SegHeadKind::Linear => (d, 0),
                SegHeadKind::ConvProxy { channels, stages } => (channels, stages),
            };
            let mut cin = d;
            for s in 0..stages {
                spec.push(ParamSpec {
                    name: format!("seg.stage{s}.conv.weight"),
                    shape: vec![9 * cin, channels],
                    init: TruncNormal,
                    group: Head,
                });
                spec.push(ParamSpec {
                    name: format!("seg.stage{s}.conv.bias"),
                    shape: vec![channels],
                    init: Zeros,
                    group: Head,
                });
                spec.push(ParamSpec {
                    name: format!("seg.stage{s}.norm.gamma"),
                    shape: vec![channels],
                    init: Ones,
                    group: Head,
                });
                spec.push(ParamSpec {
                    name: format!("seg.stage{s}.norm.beta"),
                    shape: vec![channels],
                    init: Zeros,
                    group: Head,
                });
                cin = channels;
            }
            spec.push(ParamSpec {
                name: "seg.proj.weight".into(),
                shape: vec![cin, seg.num_classes],
                init: TruncNormal,
                group: Head,
            });
            spec.push(ParamSpec {
                name: "seg.proj.bias".into(),
                shape: vec![seg.num_classes],
                init: Zeros,
                group: Head,
            });
        }
    }
    spec
}

// ── Parameter counting ──────────────────────────────────────────────

/// Exact per-component parameter counts for a configuration.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ParamCounts {
    pub patch_proj: u64,
    pub pos_embed: u64,
    pub blocks: u64,
    pub final_norm: u64,
    pub head: u64,
    pub total: u64,
}

impl ParamCounts {
    /// Resolution- and task-independent core: the patch projection plus the
    /// mixer/MLP stack. This is the quantity architecture tables quote
    /// (positional tables scale with input size, heads with the task).
    pub fn architecture_core(&self) -> u64 {
        self.patch_proj + self.blocks + self.final_norm
    }
}

pub fn count_params_breakdown(cfg: &EncoderConfig, head: &TaskHead) -> ParamCounts {
    let mut c = ParamCounts::default();
    for p in registry_spec(cfg, head) {
        let n: u64 = p.shape.iter().product::<usize>() as u64;
        c.total += n;
        if p.name.starts_with("patch.proj") || p.name.starts_with("patch.bias") {
            c.patch_proj += n;
        } else if p.name.starts_with("patch.") {
            c.pos_embed += n;
        } else if p.name.starts_with("block") {
            c.blocks += n;
        } else if p.name.starts_with("final.") {
            c.final_norm += n;
        } else {
            c.head += n;
        }
    }
    c
}

/// Exact registry size for a configuration with its classification head,
/// computed analytically (no tensors are built).
pub fn count_params(cfg: &EncoderConfig) -> u64 {
    count_params_breakdown(cfg, &TaskHead::Classify).total
}

// ── Model ───────────────────────────────────────────────────────────

pub struct Model<E: Element> {
    pub cfg: EncoderConfig,
    pub head: TaskHead,
    pub params: ParamStore<E>,
    pub seed: u64,
}

/// Build an encoder with a classification head. Deterministic from the seed.
pub fn build_encoder<E: Element>(cfg: &EncoderConfig, seed: u64) -> Result<Model<E>> {
    Model::build(cfg, TaskHead::Classify, seed)
}

impl<E: Element> Model<E> {
    pub fn build(cfg: &EncoderConfig, head: TaskHead, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let TaskHead::Dense(seg) = &head {
            if seg.num_classes < 2 {
                return Err(Error::Config("dense head needs ≥ 2 classes".into()));
            }
        }
        let mut params = ParamStore::new();
        let mut rng_backbone = Rng::derive(seed, "init/backbone");
        let mut rng_head = Rng::derive(seed, "init/head");
        for p in registry_spec(cfg, &head) {
            let residual_std = INIT_STD / (2.0 * cfg.blocks as f64).sqrt();
            let init = match p.init {
                InitRule::Zeros => Init::Zeros,
                InitRule::Ones => Init::Ones,
                InitRule::TruncNormal => Init::TruncNormal(INIT_STD),
                InitRule::TruncNormalResidual => Init::TruncNormal(residual_std),
                InitRule::DecaySpread => Init::LinSpace(1.0, 7.0),
            };
            let rng = match p.group {
                Group::Backbone => &mut rng_backbone,
                Group::Head => &mut rng_head,
            };
            params.add(&p.name, p.shape, init, rng);
        }
        Ok(Model {
            cfg: cfg.clone(),
            head,
            params,
            seed,
        })
    }

    pub fn bind(&self, g: &mut Graph<E>) -> Result<Vec<Tid>> {
        self.params.bind(g)
    }

    fn at(&self, binds: &[Tid], name: &str) -> Tid {
        binds[self
            .params
            .lookup(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn patch_binding(&self, binds: &[Tid]) -> PatchEmbedBinding {
        PatchEmbedBinding {
            proj: self.at(binds, "patch.proj"),
            bias: self.at(binds, "patch.bias"),
            pos: self.at(binds, "patch.pos"),
            cls: self.at(binds, "patch.cls"),
            cls_pos: self.at(binds, "patch.cls_pos"),
        }
    }

    fn block_binding(&self, binds: &[Tid], i: usize) -> BlockBinding {
        let n = |suffix: &str| format!("block{i:02}.{suffix}");
        let mixer = match self.cfg.mixer_kind {
            MixerKind::Attention => MixerBinding::Attention(AttentionBinding {
                wq: self.at(binds, &n("attn.wq")),
                wk: self.at(binds, &n("attn.wk")),
                wv: self.at(binds, &n("attn.wv")),
                wo: self.at(binds, &n("attn.wo")),
                bq: self.at(binds, &n("attn.bq")),
                bk: self.at(binds, &n("attn.bk")),
                bv: self.at(binds, &n("attn.bv")),
                bo: self.at(binds, &n("attn.bo")),
                heads: self.cfg.heads,
            }),
            MixerKind::Scan => {
                let gates = |dir: &str| ScanGates {
                    w_decay: self.at(binds, &n(&format!("{dir}.w_decay"))),
                    b_decay: self.at(binds, &n(&format!("{dir}.b_decay"))),
                    w_input: self.at(binds, &n(&format!("{dir}.w_input"))),
                    b_input: self.at(binds, &n(&format!("{dir}.b_input"))),
                    w_output: self.at(binds, &n(&format!("{dir}.w_output"))),
                    b_output: self.at(binds, &n(&format!("{dir}.b_output"))),
                };
                MixerBinding::Scan(ScanBinding {
                    w_in: self.at(binds, &n("scan.w_in")),
                    b_in: self.at(binds, &n("scan.b_in")),
                    w_out: self.at(binds, &n("scan.w_out")),
                    b_out: self.at(binds, &n("scan.b_out")),
                    fwd: gates("scan.f"),
                    rev: match self.cfg.direction {
                        ScanDirection::Bidirectional => Some(gates("scan.r")),
                        ScanDirection::Forward => None,
                    },
                })
            }
        };
        BlockBinding {
            ln1_gamma: self.at(binds, &n("ln1.gamma")),
            ln1_beta: self.at(binds, &n("ln1.beta")),
            ln2_gamma: self.at(binds, &n("ln2.gamma")),
            ln2_beta: self.at(binds, &n("ln2.beta")),
            mixer,
            mlp: MlpBinding {
                w1: self.at(binds, &n("mlp.w1")),
                b1: self.at(binds, &n("mlp.b1")),
                w2: self.at(binds, &n("mlp.w2")),
                b2: self.at(binds, &n("mlp.b2")),
            },
        }
    }

    /// Shared trunk: patchify (+ optional extension), CLS injection, mixer
    /// blocks, final layernorm. Returns the normalized sequence and the CLS
    /// row index. CLS is prepended for attention (order is irrelevant there)
    /// and appended for scans so the recurrent state has seen every token.
    fn encode(&self, g: &mut Graph<E>, binds: &[Tid], image: Tid) -> Result<(Tid, usize)> {
        let pe = self.patch_binding(binds);
        let mut tokens = patchify::forward(g, image, &self.cfg.patch, &pe)?;
        if self.cfg.extend_factor > 1 {
            tokens = patchify::extend_by_interpolation(
                g,
                tokens,
                self.cfg.patch.grid(),
                self.cfg.extend_factor,
            )?;
        }
        let cls = g.add(pe.cls, pe.cls_pos)?;
        let (mut seq, cls_index) = match self.cfg.mixer_kind {
            MixerKind::Attention => (g.concat_rows(&[cls, tokens])?, 0),
            MixerKind::Scan => {
                let l = g.shape(tokens)[0];
                (g.concat_rows(&[tokens, cls])?, l)
            }
        };
        let bc = self.cfg.block_config();
        for i in 0..self.cfg.blocks {
            let bb = self.block_binding(binds, i);
            seq = mixers::block_forward(g, seq, &bc, &bb, self.cfg.ln_eps)?;
        }
        let gamma = self.at(binds, "final.gamma");
        let beta = self.at(binds, "final.beta");
        let seq = g.layernorm(seq, gamma, beta, self.cfg.ln_eps)?;
        Ok((seq, cls_index))
    }

    /// Class logits [1 × num_classes] from the final CLS representation.
    pub fn forward_classify(&self, g: &mut Graph<E>, binds: &[Tid], image: Tid) -> Result<Tid> {
        if self.head != TaskHead::Classify {
            return Err(Error::Config(
                "forward_classify on a dense-head model".into(),
            ));
        }
        let (seq, cls_index) = self.encode(g, binds, image)?;
        let cls_out = g.slice_rows(seq, cls_index, 1)?;
        let w = self.at(binds, "head.weight");
        let b = self.at(binds, "head.bias");
        let logits = g.matmul(cls_out, w)?;
        g.add(logits, b)
    }

    /// Per-pixel class logits [H·W × num_classes] (row-major over pixels).
    /// CLS is excluded from the dense features; token-grid logits are
    /// bilinearly resampled to the input resolution.
    pub fn forward_dense(&self, g: &mut Graph<E>, binds: &[Tid], image: Tid) -> Result<Tid> {
        let seg = match &self.head {
            TaskHead::Dense(seg) => *seg,
            TaskHead::Classify => {
                return Err(Error::Config("forward_dense on a classify model".into()))
            }
        };
        let (seq, cls_index) = self.encode(g, binds, image)?;
        let l = self.cfg.tokens();
        let spatial = match self.cfg.mixer_kind {
            MixerKind::Attention => g.slice_rows(seq, 1, l)?,
            MixerKind::Scan => {
                debug_assert_eq!(cls_index, l);
                g.slice_rows(seq, 0, l)?
            }
        };
        let grid = self.cfg.patch.grid() * self.cfg.extend_factor;
        let (h, w) = (self.cfg.patch.image_h, self.cfg.patch.image_w);

        let (feat, feat_grid) = match seg.kind {
            SegHeadKind::Linear => (spatial, grid),
            SegHeadKind::ConvProxy { channels, stages } => {
                let mut x = spatial;
                let mut cur_grid = grid;
                let mut cin = self.cfg.embed_dim;
                for s in 0..stages {
                    let as_grid = g.reshape(x, vec![cur_grid, cur_grid, cin])?;
                    let up = g.resample2d(as_grid, cur_grid * 2, cur_grid * 2, AxisMap::Stride(2))?;
                    cur_grid *= 2;
                    let patches = g.gather(
                        up,
                        Arc::new(conv3x3_index_map(cur_grid, cur_grid, cin)),
                        vec![cur_grid * cur_grid, 9 * cin],
                    )?;
                    let wname = format!("seg.stage{s}.conv.weight");
                    let bname = format!("seg.stage{s}.conv.bias");
                    let conv = g.matmul(patches, self.at(binds, &wname))?;
                    let conv = g.add(conv, self.at(binds, &bname))?;
                    let gname = format!("seg.stage{s}.norm.gamma");
                    let bbname = format!("seg.stage{s}.norm.beta");
                    let normed = g.layernorm(
                        conv,
                        self.at(binds, &gname),
                        self.at(binds, &bbname),
                        self.cfg.ln_eps,
                    )?;
                    x = g.gelu(normed)?;
                    cin = channels;
                }
                (x, cur_grid)
            }
        };

        let wp = self.at(binds, "seg.proj.weight");
        let bp = self.at(binds, "seg.proj.bias");
        let logits = g.matmul(feat, wp)?;
        let logits = g.add(logits, bp)?;
        let k = seg.num_classes;
        if feat_grid == h {
            // Pixel-resolution grid already; upsampling would be identity.
            return Ok(logits);
        }
        let as_grid = g.reshape(logits, vec![feat_grid, feat_grid, k])?;
        let up = g.resample2d(as_grid, h, w, AxisMap::AlignCorners)?;
        g.reshape(up, vec![h * w, k])
    }

    // ── Persistence ─────────────────────────────────────────────────

    pub fn save_checkpoint(&self, path: &Path, config_hash: &str) -> Result<()> {
        checkpoint::save(&self.params, config_hash, path)
    }

    /// Load weights saved by an identically shaped model.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<String> {
        checkpoint::load(&mut self.params, path)
    }

    /// Load weights from a model pretrained at a different resolution with
    /// the same patch size: the positional table is resampled bilinearly
    /// onto the new grid; everything else must match shapes exactly.
    pub fn load_checkpoint_resampling_pos(&mut self, path: &Path) -> Result<String> {
        let target_l = self.cfg.patch.seq_len();
        let d = self.cfg.embed_dim;
        let hash = checkpoint::load_resampling(&mut self.params, path, |name, shape, data| {
            if name == "patch.pos" && shape[0] != target_l {
                let old_grid = (shape[0] as f64).sqrt() as usize;
                if old_grid * old_grid != shape[0] {
                    return Err(Error::Checkpoint(format!(
                        "positional table of {} rows is not square",
                        shape[0]
                    )));
                }
                let new_grid = (target_l as f64).sqrt() as usize;
                let resampled = patchify::pos_embed_resample(&data, d, old_grid, new_grid)?;
                Ok((vec![target_l, d], resampled))
            } else {
                Ok((shape, data))
            }
        })?;
        Ok(hash)
    }
}

/// Zero-padded 3×3 im2col index map over a channels-last [h×w×cin] grid.
fn conv3x3_index_map(h: usize, w: usize, cin: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(h * w * 9 * cin);
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    let (r, c) = (i + di, j + dj);
                    for ch in 0..cin as i64 {
                        if r < 0 || r >= h as i64 || c < 0 || c >= w as i64 {
                            idx.push(-1);
                        } else {
                            idx.push((r * w as i64 + c) * cin as i64 + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}
