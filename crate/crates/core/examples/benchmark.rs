//! A short run of the benchmark protocol: random viewpoints, ±15°/±0.25
//! start perturbations, single vs multiple hypotheses.
//!
//! cargo run --release --example benchmark [trials]

use nerfpose::bench::{run_benchmark, BenchmarkConfig, CameraConfig};
use nerfpose::field::AnalyticScene;
use nerfpose::search::SearchConfig;

fn main() -> nerfpose::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let bench = BenchmarkConfig {
        trials,
        write_traces: false,
        ..BenchmarkConfig::default()
    };
    let search = SearchConfig {
        trace_stride: 1 << 20,
        ..SearchConfig::default()
    };
    let scene = AnalyticScene::reference();
    let run = run_benchmark(&scene, "reference", &CameraConfig::default(), &search, &bench, 0)?;
    for t in &run.report.trials {
        println!(
            "trial {:>2} {:>8}: start {:5.2} deg / {:.3}  final {:6.3} deg / {:.4}",
            t.trial,
            t.mode.name(),
            t.start_rotation_error_deg,
            t.start_translation_error,
            t.rotation_error_deg.unwrap_or(f64::NAN),
            t.translation_error.unwrap_or(f64::NAN)
        );
    }
    for a in &run.report.aggregates {
        println!(
            "{:>8}: rotation <{} deg {:.2}, translation <{} {:.2}",
            a.mode.name(),
            bench.rot_threshold_deg,
            a.rotation_success_rate,
            bench.trans_threshold,
            a.translation_success_rate
        );
    }
    Ok(())
}
