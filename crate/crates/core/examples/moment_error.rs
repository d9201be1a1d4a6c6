//! Accumulated gap between the dense second moment and its separable
//! factor-space form, for growing square layers. The gap shrinks with size.

use tezo::verify::accumulated_moment_error;

fn main() -> tezo::Result<()> {
    let sizes = [(32, 32), (64, 64), (128, 128)];
    let traces = accumulated_moment_error(&sizes, 8, 1000, 0.99, &[1, 2, 3])?;
    for t in &traces {
        let mid = t.norms[t.norms.len() / 2];
        println!("{:>4}x{:<4} seed {}  E_500 = {mid:.3e}  E_1000 = {:.3e}", t.m, t.n, t.seed, t.terminal());
    }
    Ok(())
}
