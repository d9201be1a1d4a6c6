//! Trains a 16x16 conditioned quadratic with the temporal optimizers and the
//! dense MeZO baseline, then prints the loss every 1000 steps.
//!
//! Run with `cargo run --release --example train_quadratic`.

use tezo::objectives::{Objective, Quadratic};
use tezo::optimizers::{run, OptimizerKind, RankSpec, TrainConfig};

fn main() -> tezo::Result<()> {
    let objective = Quadratic::conditioned(16, 16, 10.0, 7)?;
    let model = objective.initial_params(11);

    let runs = [
        (OptimizerKind::Tezo, 1e-4),
        (OptimizerKind::TezoM, 1e-4),
        (OptimizerKind::TezoAdam, 1.25e-3),
        (OptimizerKind::Mezo, 4e-4),
    ];
    for (kind, eta) in runs {
        let mut cfg = TrainConfig::new(kind, 6000);
        cfg.hyper.eta = eta;
        cfg.rank = RankSpec::Fixed(4);
        cfg.factor_refresh = Some(5);
        cfg.log_every = 1000;
        cfg.seed = 3;
        let (report, _) = run(&objective, &model, &cfg)?;
        let losses: Vec<String> = report.rows.iter().map(|r| format!("{:.3e}", r.loss)).collect();
        println!(
            "{:<10} state={:<4} elements={:<9} {}",
            kind.to_string(),
            report.totals.state_floats,
            report.totals.elements_generated,
            losses.join(" ")
        );
    }
    Ok(())
}
