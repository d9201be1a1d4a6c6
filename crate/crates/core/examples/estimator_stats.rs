//! Monte Carlo check that the temporal estimator is unbiased with the
//! predicted variance, and that the second-moment cross term averages out.

use tezo::verify::{cross_term_stats, theorem1_check};

fn main() -> tezo::Result<()> {
    let rep = theorem1_check(4, 4, 2, 200_000, 5)?;
    println!("mean/variance over {} trials at (m, n, r) = (4, 4, 2)", rep.trials);
    println!("  max |bias| / se      = {:.3}", rep.max_z());
    println!("  empirical variance   = {:.3} +- {:.3}", rep.empirical_variance, rep.variance_std_err);
    println!("  predicted variance   = {:.3} (delta = {})", rep.predicted_variance, rep.delta);
    if let Some(ratio) = rep.ratio {
        println!("  ratio                = {ratio:.4}");
    }

    let cross = cross_term_stats(16, 16, 4, 100_000, 6)?;
    let max_mean = cross.mean.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    println!("cross term over {} trials at (16, 16, 4)", cross.trials);
    println!("  max |mean|           = {max_mean:.3e}");
    println!("  max |mean| / se      = {:.3}", cross.max_z());
    println!("  identity residual    = {:.3e}", cross.max_identity_residual);
    Ok(())
}
