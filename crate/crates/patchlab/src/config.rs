//! Run configuration files: a human-readable TOML document with sections
//! {model, patch, recipe, data, experiment}, every field optional with
//! preset defaults, unknown keys rejected, and a content hash computed over
//! the canonicalized (fully resolved) form so whitespace and comments never
//! change artifact names.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BinaryFormat;
use crate::error::{Error, Result};
use crate::mixers::{MixerKind, ScanDirection};
use crate::model::{EncoderConfig, SegHeadConfig, SegHeadKind};
use crate::patchify::PatchConfig;
use crate::tensor::DType;
use crate::train::{Recipe, Schedule};

/// First 16 hex chars of SHA-256; used for config hashes and filenames.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

// ── Raw file schema (everything optional, fail-closed) ─────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<RawModel>,
    patch: Option<RawPatch>,
    recipe: Option<RawRecipe>,
    data: Option<RawData>,
    experiment: Option<RawExperiment>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    mixer: Option<MixerKind>,
    embed_dim: Option<usize>,
    mlp_dim: Option<usize>,
    blocks: Option<usize>,
    heads: Option<usize>,
    state_dim: Option<usize>,
    direction: Option<ScanDirection>,
    drop_path_rate: Option<f64>,
    num_classes: Option<usize>,
    extend_factor: Option<usize>,
    ln_eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPatch {
    image: Option<usize>,
    patch: Option<usize>,
    channels: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecipe {
    preset: Option<String>,
    base_lr: Option<f64>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epochs: Option<usize>,
    warmup_epochs: Option<usize>,
    batch_size: Option<usize>,
    label_smoothing: Option<f64>,
    drop_path: Option<f64>,
    augment: Option<bool>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    kind: Option<DataKind>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    size: Option<usize>,
    num_classes: Option<usize>,
    seed: Option<u64>,
    path: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    kind: Option<ExperimentKind>,
    patch_grid: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    factors: Option<Vec<usize>>,
    scales: Option<Vec<usize>>,
    p_large: Option<usize>,
    seg_channels: Option<usize>,
    seg_stages: Option<usize>,
    element: Option<String>,
}

// ── Resolved configuration ──────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SynthClassification,
    SynthSegmentation,
    Idx,
    CifarBinary,
    Container,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    Scan,
    Extend,
    InputSize,
    DecoderGap,
    Cost,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub patch_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub factors: Vec<usize>,
    pub scales: Vec<usize>,
    pub p_large: usize,
    pub seg_channels: usize,
    pub seg_stages: usize,
    pub element: DType,
}

/// Fully resolved run configuration. Serializing this struct is the
/// canonical form the content hash is computed over.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub recipe: Recipe,
    pub data: DataConfig,
    pub experiment: ExperimentConfig,
    pub ln_eps: f64,
    pub adam_eps: f64,
}

impl RunConfig {
    /// Desk-scale defaults: the patch-scaling sweep on synthetic textures.
    pub fn default_desk() -> RunConfig {
        let data = DataConfig {
            kind: DataKind::SynthClassification,
            n_train: 512,
            n_test: 256,
            size: 32,
            num_classes: 4,
            seed: 0,
            path: String::new(),
        };
        let encoder =
            EncoderConfig::desk(MixerKind::Attention, data.size, 8, data.num_classes);
        let mut recipe = Recipe::desk();
        recipe.seed = 0;
        RunConfig {
            ln_eps: encoder.ln_eps,
            encoder,
            recipe,
            data,
            experiment: ExperimentConfig {
                kind: ExperimentKind::Train,
                patch_grid: vec![8, 4, 2, 1],
                seeds: vec![0, 1, 2],
                factors: vec![2, 4],
                scales: vec![2, 4],
                p_large: 8,
                seg_channels: 24,
                seg_stages: 2,
                element: DType::F32,
            },
            adam_eps: crate::train::ADAM_EPS,
        }
    }

    /// Content hash over the canonicalized (resolved) form: stable across
    /// whitespace, comments, and spelled-out-vs-preset equivalences.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        short_hash(json.as_bytes())
    }

    /// Canonical human-readable form (used for checkpoint sidecars).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn from_sidecar_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sidecar config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.recipe.validate()?;
        if self.experiment.patch_grid.is_empty() {
            return Err(Error::Config("experiment.patch_grid is empty".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn seg_head(&self, kind: SegHeadKind) -> SegHeadConfig {
        SegHeadConfig {
            kind,
            num_classes: self.data.num_classes,
        }
    }

    pub fn proxy_head(&self) -> SegHeadConfig {
        self.seg_head(SegHeadKind::ConvProxy {
            channels: self.experiment.seg_channels,
            stages: self.experiment.seg_stages,
        })
    }
}

/// Parse a TOML run configuration, applying presets then per-field
/// overrides. Unknown keys are rejected; parse errors cite line numbers.
pub fn parse(text: &str) -> Result<RunConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
    let mut cfg = RunConfig::default_desk();

    // Data first: the encoder geometry defaults follow it.
    if let Some(d) = &raw.data {
        if let Some(k) = d.kind {
            cfg.data.kind = k;
        }
        if let Some(v) = d.n_train {
            cfg.data.n_train = v;
        }
        if let Some(v) = d.n_test {
            cfg.data.n_test = v;
        }
        if let Some(v) = d.size {
            cfg.data.size = v;
        }
        if let Some(v) = d.num_classes {
            cfg.data.num_classes = v;
        }
        if let Some(v) = d.seed {
            cfg.data.seed = v;
        }
        if let Some(v) = &d.path {
            cfg.data.path = v.clone();
        }
    }
    cfg.encoder = EncoderConfig::desk(
        cfg.encoder.mixer_kind,
        cfg.data.size,
        cfg.encoder.patch.patch,
        cfg.data.num_classes,
    );

    if let Some(m) = &raw.model {
        if let Some(preset) = &m.preset {
            cfg.encoder = EncoderConfig::by_name(preset).ok_or_else(|| {
                Error::Config(format!("unknown model preset {preset}"))
            })?;
        }
        if let Some(v) = m.mixer {
            cfg.encoder.mixer_kind = v;
            cfg.encoder.name = format!("desk-{}", v.name());
        }
        if let Some(v) = m.embed_dim {
            cfg.encoder.embed_dim = v;
            cfg.encoder.patch.embed_dim = v;
        }
        if let Some(v) = m.mlp_dim {
            cfg.encoder.mlp_dim = v;
        }
        if let Some(v) = m.blocks {
            cfg.encoder.blocks = v;
        }
        if let Some(v) = m.heads {
            cfg.encoder.heads = v;
        }
        if let Some(v) = m.state_dim {
            cfg.encoder.state_dim = v;
        }
        if let Some(v) = m.direction {
            cfg.encoder.direction = v;
        }
        if let Some(v) = m.drop_path_rate {
            cfg.encoder.drop_path_rate = v;
        }
        if let Some(v) = m.num_classes {
            cfg.encoder.num_classes = v;
        }
        if let Some(v) = m.extend_factor {
            cfg.encoder.extend_factor = v;
        }
        if let Some(v) = m.ln_eps {
            cfg.encoder.ln_eps = v;
            cfg.ln_eps = v;
        }
    }

    if let Some(p) = &raw.patch {
        if let Some(v) = p.image {
            cfg.encoder.patch.image_h = v;
            cfg.encoder.patch.image_w = v;
        }
        if let Some(v) = p.patch {
            cfg.encoder.patch.patch = v;
        }
        if let Some(v) = p.channels {
            cfg.encoder.patch.channels = v;
        }
    }

    if let Some(r) = &raw.recipe {
        if let Some(preset) = &r.preset {
            let seed = cfg.recipe.seed;
            cfg.recipe = Recipe::by_name(preset)
                .ok_or_else(|| Error::Config(format!("unknown recipe preset {preset}")))?;
            cfg.recipe.seed = seed;
        }
        if let Some(v) = r.base_lr {
            cfg.recipe.base_lr = v;
        }
        if let Some(v) = r.weight_decay {
            cfg.recipe.weight_decay = v;
        }
        if let Some(v) = r.beta1 {
            cfg.recipe.beta1 = v;
        }
        if let Some(v) = r.beta2 {
            cfg.recipe.beta2 = v;
        }
        if let Some(v) = r.epochs {
            cfg.recipe.epochs = v;
        }
        if let Some(v) = r.warmup_epochs {
            cfg.recipe.warmup_epochs = v;
        }
        if let Some(v) = r.batch_size {
            cfg.recipe.batch_size = v;
        }
        if let Some(v) = r.label_smoothing {
            cfg.recipe.label_smoothing = v;
        }
        if let Some(v) = r.drop_path {
            cfg.recipe.drop_path = v;
        }
        if let Some(v) = r.augment {
            cfg.recipe.augment = v;
        }
        if let Some(v) = r.seed {
            cfg.recipe.seed = v;
        }
        cfg.recipe.schedule = Schedule::Cosine;
    }

    if let Some(e) = &raw.experiment {
        if let Some(v) = e.kind {
            cfg.experiment.kind = v;
        }
        if let Some(v) = &e.patch_grid {
            cfg.experiment.patch_grid = v.clone();
        }
        if let Some(v) = &e.seeds {
            cfg.experiment.seeds = v.clone();
        }
        if let Some(v) = &e.factors {
            cfg.experiment.factors = v.clone();
        }
        if let Some(v) = &e.scales {
            cfg.experiment.scales = v.clone();
        }
        if let Some(v) = e.p_large {
            cfg.experiment.p_large = v;
        }
        if let Some(v) = e.seg_channels {
            cfg.experiment.seg_channels = v;
        }
        if let Some(v) = e.seg_stages {
            cfg.experiment.seg_stages = v;
        }
        if let Some(v) = &e.element {
            cfg.experiment.element = match v.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => {
                    return Err(Error::Config(format!(
                        "experiment.element must be f32 or f64, got {other}"
                    )))
                }
            };
        }
    }

    // Keep dependent fields coherent.
    cfg.encoder.patch.embed_dim = cfg.encoder.embed_dim;
    cfg.ln_eps = cfg.encoder.ln_eps;
    Ok(cfg)
}

pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// Dataset kind needed by the binary loaders.
pub fn binary_format(kind: DataKind) -> Option<BinaryFormat> {
    match kind {
        DataKind::Idx => Some(BinaryFormat::Idx),
        DataKind::CifarBinary => Some(BinaryFormat::CifarBinary),
        _ => None,
    }
}

/// Geometry sanity shared by the experiments: every p in the grid must
/// divide the input, checked before any training starts.
pub fn validate_patch_grid(image: usize, grid: &[usize]) -> Result<()> {
    for &p in grid {
        PatchConfig::new(image, image, 3, p, 8)?;
    }
    Ok(())
}
