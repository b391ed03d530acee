//! Dump a trained trajectory with its running NTK gap to CSV.
//!
//! Usage: `cargo run --example trajectory_csv [PATH]` (default `trajectory.csv`).

use lazyflow::flow::{gradient_flow, linearized_flow, ntk_gap, write_trajectory_csv, FlowConfig, TrainSetup};
use lazyflow::models::{two_layer_init, Activation, TwoLayerNet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "trajectory.csv".into());
    let (alpha, horizon) = (4.0, 5.0);
    let net = TwoLayerNet::synthetic(16, 2, 6, Activation::Softplus, 3)?;
    let w0 = two_layer_init(16, 2, 3);
    let setup = TrainSetup::new(net.clone(), net.centered_target(alpha, &w0))?;
    let cfg = FlowConfig::new(alpha, horizon).with_grid(65);
    let traj = gradient_flow(&setup, &w0, &cfg, None)?;
    let bar = linearized_flow(&setup, &w0, &cfg)?;
    let gap = ntk_gap(&traj, &bar)?;
    write_trajectory_csv(path.as_ref(), &traj, Some(&gap))?;
    println!("{} rows -> {path}; loss {:.4e} -> {:.4e}; final gap {:.4e}", traj.len(), traj.losses[0], traj.losses[traj.len() - 1], gap.final_gap);
    Ok(())
}
