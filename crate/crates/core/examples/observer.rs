//! Momentum observer on a robot held by the impedance controller while a
//! constant 10 N push acts on the platform from t = 0.
//!
//! cargo run --example observer

use nalgebra::Vector3;
use rrr_contact::controller::{impedance_law, ImpedanceGains};
use rrr_contact::dynamics::RobotModel;
use rrr_contact::observer::{self, ObserverState, DEFAULT_GAIN, DEFAULT_THRESHOLDS};

fn main() -> rrr_contact::error::Result<()> {
    let model = RobotModel::default();
    let gains = ImpedanceGains::default();
    let x0 = Vector3::new(0.03, 0.0, 0.05);
    let push = Vector3::new(10.0, 0.0, 0.0);
    let dt = 1e-3;
    let mut s = model.state(x0, Vector3::zeros())?;
    let mut terms = model.terms(&s)?;
    let mut obs = ObserverState::new(Vector3::repeat(DEFAULT_GAIN), &terms.mass, &s.xdot);
    println!("{:>6} {:>9} {:>9} {:>9} {:>9}  detected", "t [s]", "fx_hat", "expected", "fy_hat", "mz_hat");
    for k in 1..=250 {
        let f_m = impedance_law(&s, &x0, &Vector3::zeros(), &gains, &terms);
        let beta = observer::beta_hat(&terms, &s.xdot);
        let next = model.step(&s, &terms, &f_m, &push, dt)?;
        terms = model.terms(&next)?;
        obs = observer::observer_step(&obs, &f_m, &beta, &terms.mass, &next.xdot, dt);
        s = next;
        if k % 25 == 0 {
            let t = k as f64 * dt;
            let e = obs.estimate;
            let detected = observer::detect_contact(&e, &DEFAULT_THRESHOLDS).any;
            println!("{t:>6.3} {:>9.4} {:>9.4} {:>9.4} {:>9.4}  {detected}", e.x, 10.0 * (1.0 - (-DEFAULT_GAIN * t).exp()), e.y, e.z);
        }
    }
    Ok(())
}
