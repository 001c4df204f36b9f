//! Patch-size sweep on synthetic texture classification: train the same
//! tiny encoder at every patch size in the grid, fit loss ≈ a·p^b, and
//! print the scaling curve.
//!
//!   cargo run --release --example patch_scan -- [attention|scan] [epochs] [n_train] [seeds]

use patchlab::data;
use patchlab::harness::{self, FitOutcome};
use patchlab::mixers::MixerKind;
use patchlab::model::EncoderConfig;
use patchlab::train::Recipe;

fn main() -> patchlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mixer = match args.get(1).map(String::as_str) {
        Some("scan") => MixerKind::Scan,
        _ => MixerKind::Attention,
    };
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_train: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(512);
    let n_seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);

    let size = 32;
    let classes = 4;
    let train = data::synth_classification_split(n_train, size, classes, 0, "train")?;
    let test = data::synth_classification_split(n_train / 2, size, classes, 0, "test")?;

    let base = EncoderConfig::desk(mixer, size, 8, classes);
    let mut recipe = Recipe::desk();
    recipe.epochs = epochs;
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let grid = [8usize, 4, 2, 1];

    eprintln!(
        "sweep: mixer={} grid={grid:?} seeds={seeds:?} epochs={epochs} n_train={n_train}",
        mixer.name()
    );
    let t0 = std::time::Instant::now();
    let (curve, _logs) = harness::run_patch_scan::<f32>(
        &base,
        &grid,
        &recipe,
        &train,
        &test,
        &seeds,
        &harness::adhoc_hash("patch-scan-example"),
    )?;
    eprintln!("total wall time: {:.1}s", t0.elapsed().as_secs_f64());

    print!("{}", harness::curve_to_text(&curve));
    if let FitOutcome::Fitted(f) = &curve.fit {
        println!(
            "log-log fit: b = {:.4}, r² = {:.4}, spearman = {:+.2}",
            f.b, f.r2, curve.spearman
        );
    }
    Ok(())
}
