//! The perturbation is never stored. Applying it with `+ρ`, `−2ρ`, `+ρ` from
//! the same seed returns the weights to where they started, and the dense
//! matrix can be rebuilt on demand for inspection.

use tezo::estimators::{PerturbationSpec, Perturber};
use tezo::objectives::{Objective, Quadratic};
use tezo::rng::{domain, SeedSchedule};

fn main() -> tezo::Result<()> {
    let objective = Quadratic::isotropic(6, 5);
    let mut params = objective.initial_params(1);
    let before = params.flatten();

    let seeds = SeedSchedule::new(42);
    let perturber = Perturber::new(&params, &PerturbationSpec::tezo(vec![2]), seeds.child(domain::FACTORS))?;
    let step_seed = seeds.child(domain::PERTURBATION).derive(0);

    let rho = 1e-3;
    perturber.apply(&mut params, rho, step_seed, 0)?;
    let f_plus = objective.eval(&params, &())?;
    perturber.apply(&mut params, -2.0 * rho, step_seed, 0)?;
    let f_minus = objective.eval(&params, &())?;
    perturber.apply(&mut params, rho, step_seed, 0)?;

    let drift = before.iter().zip(params.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("kappa = {:.6}", (f_plus - f_minus) / (2.0 * rho));
    println!("max |w_after - w_before| = {drift:.2e}");

    let z = &perturber.materialize(step_seed, 0)?[0];
    println!("Z at step 0 ({}x{}, rank 2):", z.rows(), z.cols());
    for i in 0..z.rows() {
        let row: Vec<String> = z.row(i).iter().map(|x| format!("{x:>7.3}")).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
