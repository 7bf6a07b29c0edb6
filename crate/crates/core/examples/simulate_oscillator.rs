//! Simulate one variable-mass oscillator and check a constant-parameter run
//! against the underdamped closed form.
//!
//! cargo run --release --example simulate_oscillator

use catsg::oscillator::{simulate_trajectory, InitialState, OscParams, Scenario};

fn main() -> catsg::Result<()> {
    let vm = OscParams {
        alpha: 0.6,
        ..OscParams::constant(Scenario::VM)
    };
    let traj = simulate_trajectory(&vm, InitialState { x0: 1.5, v0: -0.4 }, 64, 0.25)?;
    println!("t,position,velocity,acceleration");
    for i in (0..traj.len()).step_by(8) {
        println!(
            "{:.2},{:.5},{:.5},{:.5}",
            i as f64 * traj.dt,
            traj.position[i],
            traj.velocity[i],
            traj.acceleration[i]
        );
    }
    println!("max residual of the governing equation: {:.2e}", traj.max_residual());

    // m x'' + g x' + k x = 0 with constant m, g, k.
    let (m, g, k): (f64, f64, f64) = (1.0, 0.1, 1.0);
    let flat = OscParams::constant(Scenario::VM);
    let traj = simulate_trajectory(&flat, InitialState { x0: 1.0, v0: 0.0 }, 64, 0.25)?;
    let decay = g / (2.0 * m);
    let wd = (k / m - decay * decay).sqrt();
    let worst = (0..64)
        .map(|i| {
            let t = i as f64 * 0.25;
            let exact = (-decay * t).exp() * ((wd * t).cos() + decay / wd * (wd * t).sin());
            (traj.position[i] - exact).abs()
        })
        .fold(0.0, f64::max);
    println!("constant coefficients: max error vs closed form {worst:.2e}");
    Ok(())
}
