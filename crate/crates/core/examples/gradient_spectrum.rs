//! Singular values of exact minibatch gradients on a small MLP, and how
//! similar the gradient directions are from step to step.

use tezo::config::{init_seed, BuiltObjective, RunConfig};
use tezo::objectives::{gradient_spectrum, Objective};
use tezo::rng::{domain, SeedSchedule};

fn main() -> tezo::Result<()> {
    let seed = 5;
    let cfg = RunConfig::from_pairs(&[
        ("optimizer".into(), "tezo".into()),
        ("objective".into(), "mlp:16,32,32,4".into()),
        ("steps".into(), "0".into()),
    ])?;
    let BuiltObjective::Mlp(net) = cfg.objective.build(seed)? else { unreachable!() };
    let params = net.initial_params(init_seed(seed));

    let rep = gradient_spectrum(&net, &params, &SeedSchedule::new(seed).child(domain::BATCH), 6, 6, 0.05)?;
    for s in rep.spectra.iter().filter(|s| s.step == 0 || s.step == 5) {
        let top = s.sigmas[0];
        let rel: Vec<String> = s.sigmas.iter().map(|x| format!("{:.3}", x / top)).collect();
        println!("step {} {:<4} sigma1 = {top:.3e}  sigma/sigma1 = [{}]", s.step, s.layer, rel.join(", "));
    }
    for (l, (name, _)) in rep.cosines.iter().enumerate() {
        if let Some(c) = rep.mean_offdiag_cosine(l) {
            println!("{name:<4} mean cross-step cosine = {c:.3}");
        }
    }
    Ok(())
}
