use std::time::Instant;

use crete_core::environment::GridSpec;
use crete_core::invariance::GainScaler;
use crete_core::model::ModelParams;
use crete_core::selfcheck::{gradient_suite, invariance_suite, line_integral_suite, prefix_suite, GradientSuite, SuiteReport};

use crate::config::RunConfig;
use crate::error::CliError;

fn show(r: &SuiteReport, started: Instant) -> bool {
    let status = if r.passed() { "ok" } else { "FAILED" };
    println!(
        "{:<16} {:>6}  cases {:>6}  max error {:.3e} (tolerance {:.0e})  {:.1}s",
        r.name,
        status,
        r.cases,
        r.max_error,
        r.tolerance,
        started.elapsed().as_secs_f64()
    );
    for f in r.failures.iter().take(5) {
        println!("    {f}");
    }
    r.passed()
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let (model_cfg, length_scale) = cfg.model()?;
    let mut params = ModelParams::init(model_cfg, GainScaler { mean: -90.0, std: 20.0 }, seed)?;
    params.length_scale = length_scale;
    let mut ok = true;

    let t = Instant::now();
    ok &= show(&invariance_suite(&params, 100, 30, seed)?, t);
    let t = Instant::now();
    ok &= show(&gradient_suite(&params, &GradientSuite { h: 1e-5, tolerance: 1e-4, context: 6, targets: 2, per_tensor: 3 }, seed)?, t);
    let t = Instant::now();
    let (voxel, partition) = line_integral_suite(&GridSpec::default(), 20, 100_000, seed)?;
    ok &= show(&voxel, t);
    ok &= show(&partition, t);
    let t = Instant::now();
    ok &= show(&prefix_suite(&params, 50, seed)?, t);
    if ok {
        Ok(())
    } else {
        Err(CliError::Check("see failures above".into()))
    }
}
