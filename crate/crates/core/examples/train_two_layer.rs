//! Train a small two-layer network and its linearization, then print every bound.

use lazyflow::bounds::{NetworkInstance, NetworkSpec};
use lazyflow::flow::FlowConfig;
use lazyflow::models::Activation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = NetworkSpec::new(8, 2, 5, Activation::Tanh, 1);
    let inst = NetworkInstance::build(&spec, 10.0, 2.0)?;
    let run = inst.evaluate(&FlowConfig::new(10.0, 2.0));
    let r = &run.report;
    if let Some(e) = &r.error {
        return Err(e.clone().into());
    }
    println!("alpha {}  T {}  R0 {:.4}  Lip(Dh) {:.4} ({})", r.alpha, r.horizon, r.r0, r.lip_dh, r.lip_source.name());
    println!("kappa        {:.4e}", r.kappa);
    println!("gap(T)       {:.4e}", r.gap);
    println!("main         {:.4e}  in window: {}", r.main_bound, r.valid_main);
    println!("trivial      {:.4e}", r.trivial_bound);
    println!("chizat       {:.4e}  valid: {}", r.chizat_bound, r.valid_chizat);
    println!("three-halves {:.4e}", r.three_halves_bound);
    println!("pass {}", r.pass);
    Ok(())
}
