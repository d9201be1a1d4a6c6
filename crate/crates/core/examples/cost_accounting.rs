//! Random elements drawn to train one 4096x4096 weight, per method.

use tezo::lowrank::{count_elements, CostModel, Method};

fn main() -> tezo::Result<()> {
    let (m, n, r) = (4096, 4096, 64);
    println!("{:>8} {:>16} {:>16} {:>16} {:>16}", "steps", "mezo", "subzo", "lozo", "tezo");
    for steps in [1_000, 10_000, 100_000] {
        let mut line = format!("{steps:>8}");
        for method in [Method::MeZO, Method::SubZO, Method::LOZO, Method::TeZO] {
            let count = count_elements(&CostModel { method, m, n, r, steps })?;
            line.push_str(&format!(" {count:>16}"));
        }
        println!("{line}");
    }
    Ok(())
}
