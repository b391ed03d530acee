//! The quadratic scalar model where the gap is bounded below by a constant times kappa.

use lazyflow::bounds::{converse_experiment, converse_horizon};
use lazyflow::flow::FlowConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (alpha, lip, r0) = (20.0, 1.0, 0.5);
    println!("{:>6} {:>9} {:>12} {:>12} {:>12}", "kappa", "T", "lower", "gap", "upper");
    for kappa in [0.05, 0.1, 0.25, 0.5, 1.0] {
        let horizon = converse_horizon(kappa, alpha, lip, r0)?;
        let res = converse_experiment(alpha, horizon, lip, r0, &FlowConfig::new(alpha, horizon))?;
        println!("{kappa:>6} {horizon:>9.3} {:>12.5e} {:>12.5e} {:>12.5e}", res.lower_bound, res.gap, res.main_bound);
    }
    Ok(())
}
