mod common;

use common::{gradient_instance, spaces, ARCHS};
use hrcb::objectives::Objective;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn check(objective: Objective) {
    for arch in ARCHS {
        for (name, space) in spaces() {
            for s in 0..INSTANCES {
                let err = gradient_instance(objective, arch, space, 1000 * s + 17);
                assert!(err <= TOL, "{}/{}/{name} instance {s}: {err:.3e}", objective.tag(), arch.tag());
            }
        }
    }
}

#[test]
fn gd_gradients_match_central_differences() {
    check(Objective::Gd);
}

#[test]
fn hr_gradients_match_central_differences() {
    check(Objective::Hr);
}

#[test]
fn fd_gradients_match_central_differences() {
    check(Objective::Fd);
}

#[test]
fn lr_gradients_match_central_differences() {
    check(Objective::Lr);
}
