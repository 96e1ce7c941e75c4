use nalgebra::SVector;
use tiltwheel::math::Vec3;
use tiltwheel::nmpc::*;
use tiltwheel::trajectory::ReferencePoint;
use tiltwheel::types::{RigidBodyState, Wrench};
use tiltwheel::{VehicleParams, GRAVITY};

fn main() {
    let cfg = NmpcConfig::default();
    let params = VehicleParams::default();
    let mg = params.mass * GRAVITY;
    let x = OcpState::new(
        Wrench::new(Vec3::new(0.0, 0.0, mg), Vec3::zeros()),
        RigidBodyState::at_rest(Vec3::new(0.0, 0.0, 1.0)),
    );
    let refs = vec![
        ReferencePoint {
            p: Vec3::new(0.0, 0.0, 1.0),
            v: Vec3::zeros(),
            q: tiltwheel::Quat::identity(),
            omega: Vec3::zeros(),
            contact: false,
        };
        cfg.horizon + 1
    ];
    let problem = build_ocp(&x, &refs, &cfg, &params, &Wrench::zero()).unwrap();
    let sol = solve(&problem, None).unwrap();
    println!("status {:?} iters {} kkt {:.3e}", sol.status, sol.iterations, sol.kkt_residual);
    println!("u0 = {:?}", sol.inputs[0].as_slice());
    println!("u1 = {:?}", sol.inputs[1].as_slice());
    for k in [0, 5, 10, 20] {
        println!(
            "stage {k}: Fz {:.6} pz {:.6} vz {:.6}",
            sol.states[k].wrench.force.z, sol.states[k].body.p.z, sol.states[k].body.v.z
        );
    }
    // And with a small upward offset (like the observed steady state):
    let mut x2 = x;
    x2.body.p.z = 1.0115;
    let problem = build_ocp(&x2, &refs, &cfg, &params, &Wrench::zero()).unwrap();
    let sol = solve(&problem, None).unwrap();
    println!("offset u0 = {:?}", sol.inputs[0].as_slice());
    let u: SVector<f64, 6> = sol.inputs[0];
    println!("offset u0_z = {:.6e}", u[2]);
}
