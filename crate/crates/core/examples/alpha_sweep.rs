//! Gap against alpha at fixed T: the fitted log-log slope sits near -1.

use lazyflow::bounds::{alpha_scaling, NetworkSpec};
use lazyflow::flow::FlowConfig;
use lazyflow::models::Activation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = NetworkSpec::new(8, 2, 5, Activation::Sigmoid, 0);
    let alphas = [5.0, 10.0, 20.0, 40.0, 80.0];
    let sweep = alpha_scaling(&spec, &alphas, 2.0, &FlowConfig::new(1.0, 2.0))?;
    for r in &sweep.reports {
        println!("alpha {:>5}  gap {:.4e}  main bound {:.4e}  gap*alpha {:.4}", r.alpha, r.gap, r.main_bound, r.gap * r.alpha);
    }
    println!("slope {:.4}, sup gap/min(T/alpha,1) {:.4}", sweep.slope, sweep.max_lazy_ratio);
    Ok(())
}
