//! Operational-space inertia at a pose and a short free-motion run with and
//! without joint friction.
//!
//! cargo run --example dynamics

use nalgebra::Vector3;
use rrr_contact::dynamics::RobotModel;

fn main() -> rrr_contact::error::Result<()> {
    let model = RobotModel::default();
    let x = Vector3::new(0.02, -0.01, 0.1);
    let m = model.mass_matrix_at(&x)?;
    println!("M_x at {:?}:{m:.4}", x.as_slice());
    println!("eigenvalues {:.4?}", m.symmetric_eigenvalues().as_slice());

    for (name, m) in [("frictionless", RobotModel { params: model.params.frictionless(), ..model.clone() }), ("default", model)] {
        let mut s = m.state(Vector3::zeros(), Vector3::new(0.05, -0.03, 0.2))?;
        let e0 = m.kinetic_energy(&s)?;
        for _ in 0..1000 {
            let terms = m.terms(&s)?;
            s = m.step(&s, &terms, &Vector3::zeros(), &Vector3::zeros(), 1e-3)?;
        }
        let e1 = m.kinetic_energy(&s)?;
        println!("{name:>12}: kinetic energy {e0:.6} J -> {e1:.6} J after 1 s, pose {:.4?}", s.x.as_slice());
    }
    Ok(())
}
