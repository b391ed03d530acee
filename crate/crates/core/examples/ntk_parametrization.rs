//! sqrt(m)-scaled network at alpha = 1 against the mean-field network at alpha = sqrt(m).

use lazyflow::bounds::ntk_parametrization_identity;
use lazyflow::flow::FlowConfig;
use lazyflow::models::{two_layer_init, Activation, TwoLayerNet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let integrator = FlowConfig::new(1.0, 1.0).with_tolerances(1e-11, 1e-14);
    for m in [1, 4, 16, 64] {
        let net = TwoLayerNet::synthetic(m, 3, 4, Activation::Sigmoid, 2)?;
        let w0 = two_layer_init(m, 3, 5);
        let check = ntk_parametrization_identity(&net, &w0, &net.target(), 1.0, &integrator)?;
        println!("m = {m:>3}: max output deviation {:.3e}", check.max_deviation);
    }
    Ok(())
}
