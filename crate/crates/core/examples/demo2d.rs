//! Adam on planar poses: SE(2) twists bend the translation path, separate
//! SO(2) and T(2) updates keep it on the line to the target.
//!
//! cargo run --example demo2d

use nerfpose::demo2d::{ascii_plot, run_demo, Demo2dConfig, Parameterization};

fn main() -> nerfpose::Result<()> {
    let cfg = Demo2dConfig::default();
    let se2 = run_demo(&cfg, Parameterization::Se2)?;
    let split = run_demo(&cfg, Parameterization::So2xT2)?;
    print!("{}", ascii_plot(&[&se2, &split], 64, 22));
    for run in [&se2, &split] {
        match run.steps_to_converge {
            Some(n) => println!("{:>7}: converged in {n} steps", run.parameterization.name()),
            None => println!("{:>7}: not converged", run.parameterization.name()),
        }
    }
    Ok(())
}
