//! The experiment layer: patch-size sweeps with power-law fits, the
//! matched-length sequence-extension ablation, fixed-length input-size
//! scaling, and the decoder-gap comparison for dense prediction.
//!
//! The harness never asserts monotonicity itself; it reports the Spearman
//! rank statistic and the log-log fit and leaves thresholds to acceptance
//! suites. All runs inside one sweep share a single recipe hash, which the
//! harness asserts — training hyperparameters never vary with patch size.

use serde::{Deserialize, Serialize};

use crate::config::short_hash;
use crate::cost::{self, DEFAULT_ELEMENT_BYTES};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_encoder, EncoderConfig, Model, SegHeadConfig, SegHeadKind, TaskHead};
use crate::tensor::Element;
use crate::train::{evaluate, normalization_of, train_run, Recipe, TrainLog};

/// One trained-and-evaluated point of a sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub patch: usize,
    pub seq_len: usize,
    pub test_loss: f64,
    pub top1: f64,
    pub miou: Option<f64>,
    pub flops_per_image: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// ln(a) of loss ≈ a·p^b.
    pub log_a: f64,
    /// The exponent.
    pub b: f64,
    pub r2: f64,
}

/// A fit needs ≥ 3 distinct patch sizes; smaller sweeps carry the marker.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitOutcome {
    Fitted(PowerLawFit),
    InsufficientPoints,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingCurve {
    /// All per-seed records, sorted by patch descending then seed.
    pub records: Vec<RunRecord>,
    /// Seed-averaged (patch, seq_len, loss, top1), patch descending.
    pub means: Vec<PatchMean>,
    pub fit: FitOutcome,
    /// Rank correlation between patch size and mean loss (+1: loss falls
    /// as patch falls).
    pub spearman: f64,
    /// One hash across every run in the sweep.
    pub recipe_hash: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PatchMean {
    pub patch: usize,
    pub seq_len: usize,
    pub test_loss: f64,
    pub top1: f64,
    pub miou: Option<f64>,
}

// ── Power-law fitting ───────────────────────────────────────────────

/// Ordinary least squares on (ln p, ln loss): loss ≈ a·p^b.
/// Zero-variance targets define r² = 1 (noiseless-constant convention).
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Harness(format!(
            "power-law fit needs ≥ 3 points, got {}",
            points.len()
        )));
    }
    for &(p, loss) in points {
        if loss <= 0.0 || p <= 0.0 {
            return Err(Error::Harness(format!(
                "power-law fit needs positive values, got ({p}, {loss})"
            )));
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(p, _)| p.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, l)| l.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Harness(
            "power-law fit needs ≥ 2 distinct patch sizes".into(),
        ));
    }
    let b = sxy / sxx;
    let log_a = my - b * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let pred = log_a + b * x;
            (y - pred) * (y - pred)
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit { log_a, b, r2 })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vs.len()).collect();
        idx.sort_by(|&a, &b| vs[a].partial_cmp(&vs[b]).unwrap());
        let mut ranks = vec![0.0; vs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vs[idx[j + 1]] == vs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..xs.len() {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if dx == 0.0 || dy == 0.0 {
        0.0
    } else {
        num / (dx * dy).sqrt()
    }
}

// ── Patch-size sweep ────────────────────────────────────────────────

/// Train one model per (patch, seed) under a single recipe and assemble the
/// scaling curve. Geometry is validated for the whole grid before any
/// training starts.
pub fn run_patch_scan<E: Element>(
    base: &EncoderConfig,
    patch_grid: &[usize],
    recipe: &Recipe,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    config_hash: &str,
) -> Result<(ScalingCurve, Vec<(usize, u64, TrainLog)>)> {
    if seeds.is_empty() {
        return Err(Error::Harness("need ≥ 1 seed".into()));
    }
    let mut grid = patch_grid.to_vec();
    grid.sort_unstable_by(|a, b| b.cmp(a));
    grid.dedup();
    for &p in &grid {
        base.clone().with_patch(p).validate()?;
    }
    let (train, test) = normalized_pair(train, test);

    let sweep_hash = recipe.content_hash();
    let mut records = Vec::new();
    let mut logs = Vec::new();
    for &p in &grid {
        let cfg = base.clone().with_patch(p);
        let flops = cost::estimate(&cfg, DEFAULT_ELEMENT_BYTES)?.flops_per_image;
        for &seed in seeds {
            let mut run_recipe = recipe.clone();
            run_recipe.seed = seed;
            // The single-recipe property: hyperparameters never vary inside
            // a sweep.
            assert_eq!(
                run_recipe.content_hash(),
                sweep_hash,
                "recipe drift inside a sweep"
            );
            let mut model: Model<E> = build_encoder(&cfg, seed)?;
            let log = train_run(&mut model, &train, &test, &run_recipe, config_hash)?;
            let eval = evaluate(&model, &test)?;
            records.push(RunRecord {
                patch: p,
                seq_len: cfg.patch.seq_len(),
                test_loss: eval.test_loss,
                top1: eval.top1,
                miou: eval.miou,
                flops_per_image: flops,
                seed,
                config_hash: config_hash.to_string(),
            });
            logs.push((p, seed, log));
        }
    }
    let curve = assemble_curve(records, &sweep_hash)?;
    Ok((curve, logs))
}

/// Seed-average records into a curve; fit when ≥ 3 distinct patch sizes.
pub fn assemble_curve(mut records: Vec<RunRecord>, recipe_hash: &str) -> Result<ScalingCurve> {
    if records.is_empty() {
        return Err(Error::Harness("no records".into()));
    }
    records.sort_by(|a, b| b.patch.cmp(&a.patch).then(a.seed.cmp(&b.seed)));
    let mut means: Vec<PatchMean> = Vec::new();
    let mut patches: Vec<usize> = records.iter().map(|r| r.patch).collect();
    patches.dedup();
    for &p in &patches {
        let rs: Vec<&RunRecord> = records.iter().filter(|r| r.patch == p).collect();
        let n = rs.len() as f64;
        let miou = if rs.iter().all(|r| r.miou.is_some()) {
            Some(rs.iter().map(|r| r.miou.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        means.push(PatchMean {
            patch: p,
            seq_len: rs[0].seq_len,
            test_loss: rs.iter().map(|r| r.test_loss).sum::<f64>() / n,
            top1: rs.iter().map(|r| r.top1).sum::<f64>() / n,
            miou,
        });
    }
    let pts: Vec<(f64, f64)> = means
        .iter()
        .map(|m| (m.patch as f64, m.test_loss))
        .collect();
    let fit = if pts.len() >= 3 {
        FitOutcome::Fitted(fit_power_law(&pts)?)
    } else {
        FitOutcome::InsufficientPoints
    };
    let sp = spearman(
        &means.iter().map(|m| m.patch as f64).collect::<Vec<_>>(),
        &means.iter().map(|m| m.test_loss).collect::<Vec<_>>(),
    );
    Ok(ScalingCurve {
        records,
        means,
        fit,
        spearman: sp,
        recipe_hash: recipe_hash.to_string(),
    })
}

fn normalized_pair(train: &Dataset, test: &Dataset) -> (Dataset, Dataset) {
    let mut train = train.clone();
    if train.normalization.is_none() {
        train.normalization = Some(normalization_of(&train));
    }
    let mut test = test.clone();
    test.normalization = train.normalization.clone();
    (train, test)
}

// ── Sequence-extension ablation ─────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtensionArm {
    pub factor: usize,
    pub seq_len: usize,
    /// Accuracy/loss when the sequence is lengthened by token interpolation
    /// at the original patch size (no new information).
    pub top1_extended: f64,
    pub loss_extended: f64,
    /// Accuracy/loss when the same length comes from an actually smaller
    /// patch (new information).
    pub top1_scaled: f64,
    pub loss_scaled: f64,
    pub gain_extended: f64,
    pub gain_scaled: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub p_large: usize,
    pub baseline_seq_len: usize,
    pub top1_baseline: f64,
    pub loss_baseline: f64,
    pub arms: Vec<ExtensionArm>,
    pub recipe_hash: String,
    pub seeds: Vec<u64>,
}

/// Matched-length comparison: lengthening by interpolation ("extending")
/// versus lengthening by an actually smaller patch ("scaling"). Lengths are
/// paired exactly, never by nearest match.
pub fn ablate_sequence_extension<E: Element>(
    base: &EncoderConfig,
    p_large: usize,
    factors: &[usize],
    recipe: &Recipe,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    config_hash: &str,
) -> Result<ExtensionReport> {
    let (train, test) = normalized_pair(train, test);
    let base_cfg = base.clone().with_patch(p_large);
    base_cfg.validate()?;
    for &f in factors {
        if f < 1 || p_large % f != 0 {
            return Err(Error::Harness(format!(
                "factor {f} does not pair with patch {p_large}: lengths would not match"
            )));
        }
    }

    let mean_eval = |cfg: &EncoderConfig| -> Result<(f64, f64)> {
        let mut top1 = 0.0;
        let mut loss = 0.0;
        for &seed in seeds {
            let mut r = recipe.clone();
            r.seed = seed;
            let mut m: Model<E> = build_encoder(cfg, seed)?;
            train_run(&mut m, &train, &test, &r, config_hash)?;
            let e = evaluate(&m, &test)?;
            top1 += e.top1;
            loss += e.test_loss;
        }
        Ok((top1 / seeds.len() as f64, loss / seeds.len() as f64))
    };

    let (top1_baseline, loss_baseline) = mean_eval(&base_cfg)?;
    let mut arms = Vec::new();
    for &f in factors {
        if f == 1 {
            arms.push(ExtensionArm {
                factor: 1,
                seq_len: base_cfg.tokens(),
                top1_extended: top1_baseline,
                loss_extended: loss_baseline,
                top1_scaled: top1_baseline,
                loss_scaled: loss_baseline,
                gain_extended: 0.0,
                gain_scaled: 0.0,
            });
            continue;
        }
        let mut extended = base_cfg.clone();
        extended.extend_factor = f;
        let scaled = base.clone().with_patch(p_large / f);
        // Exact matched-length pairing.
        if extended.tokens() != scaled.tokens() {
            return Err(Error::Harness(format!(
                "length mismatch: extended {} vs scaled {}",
                extended.tokens(),
                scaled.tokens()
            )));
        }
        let (top1_e, loss_e) = mean_eval(&extended)?;
        let (top1_s, loss_s) = mean_eval(&scaled)?;
        arms.push(ExtensionArm {
            factor: f,
            seq_len: extended.tokens(),
            top1_extended: top1_e,
            loss_extended: loss_e,
            top1_scaled: top1_s,
            loss_scaled: loss_s,
            gain_extended: top1_e - top1_baseline,
            gain_scaled: top1_s - top1_baseline,
        });
    }
    Ok(ExtensionReport {
        p_large,
        baseline_seq_len: base_cfg.tokens(),
        top1_baseline,
        loss_baseline,
        arms,
        recipe_hash: recipe.content_hash(),
        seeds: seeds.to_vec(),
    })
}

// ── Input-size scaling ablation ─────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputSizeArm {
    pub scale: usize,
    pub input: usize,
    pub patch: usize,
    pub seq_len: usize,
    pub top1: f64,
    pub test_loss: f64,
    pub patchify_params: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputSizeReport {
    pub native_resolution: usize,
    pub arms: Vec<InputSizeArm>,
    pub recipe_hash: String,
    pub seeds: Vec<u64>,
}

/// Upsample inputs beyond their native resolution while growing the patch
/// proportionally: the sequence length is pinned, information cannot
/// increase, and the patchify projection balloons quadratically.
pub fn ablate_input_size<E: Element>(
    base: &EncoderConfig,
    scales: &[usize],
    recipe: &Recipe,
    train_native: &Dataset,
    test_native: &Dataset,
    seeds: &[u64],
    config_hash: &str,
) -> Result<InputSizeReport> {
    for &s in scales {
        if s < 1 {
            return Err(Error::Harness(format!("scale {s} < 1")));
        }
    }
    let (train, test) = normalized_pair(train_native, test_native);
    let l0 = base.patch.seq_len();
    let mut arms = Vec::new();
    // The baseline (scale 1) is always measured.
    let mut scales_full = vec![1usize];
    scales_full.extend(scales.iter().copied().filter(|&s| s != 1));

    for &scale in &scales_full {
        let mut cfg = base.clone();
        cfg.patch.image_h = base.patch.image_h * scale;
        cfg.patch.image_w = base.patch.image_w * scale;
        cfg.patch.patch = base.patch.patch * scale;
        cfg.validate()?;
        assert_eq!(cfg.patch.seq_len(), l0, "sequence length must stay fixed");

        let (train_s, test_s) = if scale == 1 {
            (train.clone(), test.clone())
        } else {
            let mut tr = train.resized(base.patch.image_h * scale)?;
            // Statistics travel with the resize (interpolation preserves
            // per-channel means closely; recompute for exactness).
            tr.normalization = Some(normalization_of(&tr));
            let mut te = test.resized(base.patch.image_h * scale)?;
            te.normalization = tr.normalization.clone();
            (tr, te)
        };

        let mut top1 = 0.0;
        let mut loss = 0.0;
        for &seed in seeds {
            let mut r = recipe.clone();
            r.seed = seed;
            let mut m: Model<E> = build_encoder(&cfg, seed)?;
            train_run(&mut m, &train_s, &test_s, &r, config_hash)?;
            let e = evaluate(&m, &test_s)?;
            top1 += e.top1;
            loss += e.test_loss;
        }
        let est = cost::estimate(&cfg, DEFAULT_ELEMENT_BYTES)?;
        arms.push(InputSizeArm {
            scale,
            input: cfg.patch.image_h,
            patch: cfg.patch.patch,
            seq_len: cfg.patch.seq_len(),
            top1: top1 / seeds.len() as f64,
            test_loss: loss / seeds.len() as f64,
            patchify_params: est.patchify_params,
        });
    }
    Ok(InputSizeReport {
        native_resolution: train_native.native_resolution,
        arms,
        recipe_hash: recipe.content_hash(),
        seeds: seeds.to_vec(),
    })
}

// ── Decoder-gap scan ────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderGapRow {
    pub patch: usize,
    pub seq_len: usize,
    pub miou_linear: f64,
    pub miou_decoder: f64,
    pub gap: f64,
    pub per_seed_linear: Vec<f64>,
    pub per_seed_decoder: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderGapReport {
    pub rows: Vec<DecoderGapRow>,
    pub recipe_hash: String,
    pub seeds: Vec<u64>,
}

/// Per patch size, train the same backbone twice — once with the linear
/// head, once with the convolutional decoder proxy (identical backbone init
/// seeds) — and report gap(p) = mIoU_decoder − mIoU_linear.
pub fn decoder_gap_scan<E: Element>(
    base: &EncoderConfig,
    patch_grid: &[usize],
    proxy: SegHeadConfig,
    recipe: &Recipe,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    config_hash: &str,
) -> Result<DecoderGapReport> {
    for &p in patch_grid {
        base.clone().with_patch(p).validate()?;
    }
    if !train.has_masks() || !test.has_masks() {
        return Err(Error::Harness(
            "decoder gap scan needs a segmentation dataset".into(),
        ));
    }
    let (train, test) = normalized_pair(train, test);
    let linear = SegHeadConfig {
        kind: SegHeadKind::Linear,
        num_classes: proxy.num_classes,
    };

    let mut rows = Vec::new();
    let mut grid = patch_grid.to_vec();
    grid.sort_unstable_by(|a, b| b.cmp(a));
    grid.dedup();
    for &p in &grid {
        let cfg = base.clone().with_patch(p);
        let mut per_seed_linear = Vec::new();
        let mut per_seed_decoder = Vec::new();
        for &seed in seeds {
            let mut r = recipe.clone();
            r.seed = seed;
            for (head, out) in [
                (linear, &mut per_seed_linear),
                (proxy, &mut per_seed_decoder),
            ] {
                let mut m: Model<E> = Model::build(&cfg, TaskHead::Dense(head), seed)?;
                train_run(&mut m, &train, &test, &r, config_hash)?;
                let e = evaluate(&m, &test)?;
                out.push(e.miou.expect("segmentation eval reports miou"));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ml, md) = (mean(&per_seed_linear), mean(&per_seed_decoder));
        rows.push(DecoderGapRow {
            patch: p,
            seq_len: cfg.patch.seq_len(),
            miou_linear: ml,
            miou_decoder: md,
            gap: md - ml,
            per_seed_linear,
            per_seed_decoder,
        });
    }
    Ok(DecoderGapReport {
        rows,
        recipe_hash: recipe.content_hash(),
        seeds: seeds.to_vec(),
    })
}

// ── Report rendering ────────────────────────────────────────────────

/// The fixed plot-ready CSV schema shared by sweep artifacts.
pub const CSV_HEADER: &str = "patch,seq_len,test_loss,top1,miou,flops";

pub fn curve_to_csv(curve: &ScalingCurve) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &curve.records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.patch,
            r.seq_len,
            r.test_loss,
            r.top1,
            r.miou.map(|m| m.to_string()).unwrap_or_default(),
            r.flops_per_image
        ));
    }
    s
}

/// Parse the sweep CSV back into (patch, seq_len, loss, top1, miou, flops).
pub fn parse_sweep_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Harness("empty CSV".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(Error::Harness(format!(
            "unexpected CSV header {header:?} (want {CSV_HEADER:?})"
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Harness(format!(
                "line {}: expected 6 columns, got {}",
                lineno + 2,
                cols.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::Harness(format!("line {}: bad {what} {s:?}", lineno + 2))
            })
        };
        out.push(RunRecord {
            patch: cols[0]
                .parse()
                .map_err(|_| Error::Harness(format!("line {}: bad patch", lineno + 2)))?,
            seq_len: cols[1].parse().unwrap_or(0),
            test_loss: parse_f(cols[2], "test_loss")?,
            top1: parse_f(cols[3], "top1")?,
            miou: if cols[4].is_empty() {
                None
            } else {
                Some(parse_f(cols[4], "miou")?)
            },
            flops_per_image: cols[5].parse().unwrap_or(0),
            seed: 0,
            config_hash: String::new(),
        });
    }
    Ok(out)
}

pub fn curve_to_text(curve: &ScalingCurve) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:>6} {:>9} {:>12} {:>8} {:>8}\n",
        "patch", "seq_len", "test_loss", "top1", "miou"
    ));
    for m in &curve.means {
        s.push_str(&format!(
            "{:>6} {:>9} {:>12.5} {:>8.4} {:>8}\n",
            m.patch,
            m.seq_len,
            m.test_loss,
            m.top1,
            m.miou.map(|v| format!("{v:.4}")).unwrap_or_default()
        ));
    }
    match &curve.fit {
        FitOutcome::Fitted(f) => s.push_str(&format!(
            "fit: loss ≈ {:.5}·p^{:.4} (r² = {:.4}); spearman(p, loss) = {:+.3}\n",
            f.log_a.exp(),
            f.b,
            f.r2,
            curve.spearman
        )),
        FitOutcome::InsufficientPoints => {
            s.push_str("fit: insufficient points (< 3 distinct patch sizes)\n")
        }
    }
    s.push_str(&format!("recipe hash: {}\n", curve.recipe_hash));
    s
}

/// Stable machine-readable report document keyed by the config hash.
pub fn report_json<T: Serialize>(config_hash: &str, kind: &str, body: &T) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        config_hash: &'a str,
        kind: &'a str,
        body: &'a T,
    }
    Ok(serde_json::to_string_pretty(&Doc {
        config_hash,
        kind,
        body,
    })?)
}

/// Deterministic artifact stem: `<kind>-<config hash>`.
pub fn artifact_stem(kind: &str, config_hash: &str) -> String {
    format!("{kind}-{config_hash}")
}

/// Convenience for tests and examples: hash of an ad-hoc label.
pub fn adhoc_hash(label: &str) -> String {
    short_hash(label.as_bytes())
}
