//! Inverse and forward kinematics of the default 3-RRR robot at a few poses,
//! with the conditioning of the active-joint Jacobian.
//!
//! cargo run --example kinematics

use nalgebra::Vector3;
use rrr_contact::kinematics::{self, PlatformPose, RobotGeometry, DEFAULT_BRANCH};

fn main() -> rrr_contact::error::Result<()> {
    let g = RobotGeometry::default();
    for x in [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.05, -0.03, 0.2), Vector3::new(-0.08, 0.06, -0.3)] {
        let pose = PlatformPose::from_vector(&x);
        let q = kinematics::inverse_kinematics(&pose, &g, &DEFAULT_BRANCH)?;
        let start = PlatformPose::new(x.x + 0.005, x.y - 0.005, x.z + 0.02);
        let fk = kinematics::forward_kinematics(&q.active(), &start, &g)?;
        let jac = kinematics::jacobians(&q, &pose, &g)?;
        let s = jac.j_xqa.singular_values();
        println!("pose {:?}", x.as_slice());
        println!("  active joints   {:.4?}", q.active().as_slice());
        println!("  FK error        {:.2e} after {} iterations", (fk.pose.to_vector() - x).amax(), fk.iterations);
        println!("  cond(J_xqa)     {:.2}", s.max() / s.min());
        for chain in 0..3 {
            println!("  chain {chain} clamp angle {:.4} rad", kinematics::clamp_angle(&q, chain));
        }
    }
    Ok(())
}
