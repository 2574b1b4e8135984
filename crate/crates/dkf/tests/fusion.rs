mod common;

use dkf::banded::{band_project, collapse_offband};
use dkf::consensus::{fuse_observation_vectors, local_information_vector, FusionPlans};
use dkf::decomposition::decompose;
use dkf::simulator::CommNetwork;
use nalgebra::DMatrix;

#[test]
fn fused_vectors_are_sums_over_observing_sensors() {
    let m = common::five_state();
    let dec = decompose(&m, 1).unwrap();
    let subs = &dec.subsystems;
    let plans = FusionPlans::new(subs, &dec.topology).unwrap();
    let mut net = CommNetwork::new(dec.topology.comm.clone());
    let y = [0.7, -1.3, 2.1];
    let locals: Vec<DMatrix<f64>> = subs
        .iter()
        .map(|s| {
            let rinv = s.r_l.clone().try_inverse().unwrap();
            local_information_vector(s, &rinv, &DMatrix::from_element(1, 1, y[s.sensor_id]))
        })
        .collect();
    let fused = fuse_observation_vectors(&mut net, &plans, subs, &locals, 1e-13, 10_000).unwrap();
    for s in subs {
        for (li, &x) in s.cutset.iter().enumerate() {
            let expect: f64 = subs
                .iter()
                .filter(|t| m.h_block(t.sensor_id).to_dense()[(0, x)] != 0.0)
                .map(|t| locals[t.sensor_id][(t.local_index(x).unwrap(), 0)])
                .sum();
            assert!((fused.i[s.sensor_id][(li, 0)] - expect).abs() < 1e-10, "sensor {} state {x}", s.sensor_id);
        }
    }
    // x2 is seen by sensors 1 and 2 only, x1 by sensor 1 alone.
    assert!((fused.i[0][(1, 0)] - (y[0] + y[1])).abs() < 1e-10);
    assert!((fused.i[0][(0, 0)] - y[0]).abs() < 1e-12);
    assert!((fused.i[2][(0, 0)] - (y[1] + y[2])).abs() < 1e-10);
}

#[test]
fn tridiagonal_collapse_formula() {
    let z = dkf::dici::random_lbanded_spd(5, 1, &mut common::rng(9)).unwrap();
    let s = z.try_inverse().unwrap();
    let band = band_project(&s, 1).unwrap();
    let s35 = s[(2, 3)] * s[(3, 4)] / s[(3, 3)];
    assert!((collapse_offband(&band, 2, 4).unwrap() - s35).abs() < 1e-12 * s.amax());
    assert!((collapse_offband(&band, 2, 4).unwrap() - s[(2, 4)]).abs() < 1e-10 * s.amax());
}
