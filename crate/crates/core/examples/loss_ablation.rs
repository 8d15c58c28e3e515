//! Pose recovery from corrupted observations with each pixel loss.
//!
//! cargo run --release --example loss_ablation [trials]

use nerfpose::bench::{ablation_table, run_benchmark, BenchmarkConfig, CameraConfig, Mode};
use nerfpose::field::AnalyticScene;
use nerfpose::loss::{CorruptionSpec, LossKind};
use nerfpose::search::SearchConfig;

fn main() -> nerfpose::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let bench = BenchmarkConfig {
        trials,
        losses: LossKind::ALL.to_vec(),
        modes: vec![Mode::Multiple],
        corruption: CorruptionSpec::ablation_default(),
        write_traces: false,
        ..BenchmarkConfig::default()
    };
    // A smaller pool keeps the seven-loss sweep quick.
    let search = SearchConfig {
        pool_size: 16,
        trace_stride: 1 << 20,
        ..SearchConfig::default()
    };
    let scene = AnalyticScene::reference();
    let run = run_benchmark(&scene, "reference", &CameraConfig::default(), &search, &bench, 0)?;
    println!("corruption: {:?}", bench.corruption);
    println!("{:>12} {:>10} {:>10} {:>14}", "loss", "rot <5deg", "trans", "median rot");
    for row in ablation_table(&run.report) {
        println!(
            "{:>12} {:>10.2} {:>10.2} {:>14.3}",
            row.loss,
            row.rotation_success_rate,
            row.translation_success_rate,
            row.median_rotation_error_deg.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
