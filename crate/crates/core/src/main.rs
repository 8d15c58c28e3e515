use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nerfpose::bench::{
    cmd_ablate_losses, cmd_benchmark, cmd_demo2d, cmd_invert, cmd_make_scene, cmd_train, exit_code, AblateArgs,
    BenchmarkArgs, CliConfig, Context, Demo2dArgs, InvertArgs, MakeSceneArgs, TrainArgs,
};
use nerfpose::{Error, Result};

/// Camera pose estimation by radiance field inversion.
#[derive(Parser)]
#[command(name = "nerfpose", version)]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an analytic scene into a posed dataset.
    MakeScene(MakeSceneArgs),
    /// Fit a voxel grid to a posed dataset.
    Train(TrainArgs),
    /// Recover the camera pose of one image.
    Invert(InvertArgs),
    /// Pose recovery over seeded random trials, single and multiple hypotheses.
    Benchmark(BenchmarkArgs),
    /// Benchmark every pixel loss against corrupted observations.
    AblateLosses(AblateArgs),
    /// Planar SE(2) vs SO(2)xT(2) momentum comparison.
    Demo2d(Demo2dArgs),
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let config = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    let ctx = Context::new(cli.seed, config, cli.out);
    match &cli.command {
        Command::MakeScene(args) => {
            let r = cmd_make_scene(&ctx, args)?;
            println!(
                "wrote {} and {} ({} train / {} test frames)",
                r.scene_file.display(),
                r.dataset_dir.display(),
                r.train_frames,
                r.test_frames
            );
        }
        Command::Train(args) => {
            let r = cmd_train(&ctx, args)?;
            let test = r.test_psnr.map(|p| format!("{p:.2} dB")).unwrap_or_else(|| "n/a".into());
            println!(
                "wrote {}: train PSNR {:.2} dB, test PSNR {test}",
                r.checkpoint.display(),
                r.train_psnr
            );
        }
        Command::Invert(args) => {
            let r = cmd_invert(&ctx, args)?;
            println!("best loss {:.6e} (hypothesis {})", r.best_loss, r.best_hypothesis);
            if let Some(e) = r.final_errors {
                println!("rotation error {:.3} deg, translation error {:.4}", e.rotation_deg, e.translation);
            }
        }
        Command::Benchmark(args) => {
            let r = cmd_benchmark(&ctx, args)?;
            for a in &r.aggregates {
                println!(
                    "{:<12} {:<9} rotation {:.2}  translation {:.2}  ({} trials)",
                    a.loss,
                    a.mode.name(),
                    a.rotation_success_rate,
                    a.translation_success_rate,
                    a.trials
                );
            }
        }
        Command::AblateLosses(args) => {
            for row in cmd_ablate_losses(&ctx, args)? {
                println!(
                    "{:<12} rotation {:.2}  translation {:.2}",
                    row.loss, row.rotation_success_rate, row.translation_success_rate
                );
            }
        }
        Command::Demo2d(args) => {
            let r = cmd_demo2d(&ctx, args)?;
            if args.plot {
                print!("{}", r.plot);
            }
            let steps = |s: Option<usize>| s.map(|n| n.to_string()).unwrap_or_else(|| "not converged".into());
            println!("se2: {}  so2xt2: {}", steps(r.se2_steps), steps(r.so2xt2_steps));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
