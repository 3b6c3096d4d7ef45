//! Fixed inputs shared by the benchmarks.

use elanova::kernel::Kernel;
use elanova::propensity::attach_propensity;
use elanova::sim::{replicate_study, select_bandwidths, Mechanism, SimDesign, SMALL_N};
use elanova::Study;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major `n × r` moments centred near zero, so zero is well inside the hull.
pub fn moments(n: usize, r: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * r).map(|_| rng.random::<f64>() - 0.48).collect()
}

/// Three-arm study with dropout, fitted propensities and cross-validated bandwidths.
pub fn three_arm_study(t_len: usize) -> Study {
    let mech = Mechanism::dropout_i();
    let d = SimDesign::three_arm(SMALL_N, t_len, mech.clone(), 0.0, 0.0).with_seed(3);
    let mut study = replicate_study(&d, 0).expect("design is valid");
    let spec = mech.spec().expect("mechanism has a model");
    let specs = vec![spec; study.k()];
    attach_propensity(&mut study, &specs).expect("propensity fit");
    let hs = select_bandwidths(&d, 0, Kernel::Epanechnikov).expect("bandwidths");
    for (s, h) in study.samples.iter_mut().zip(hs) {
        s.bandwidth = Some(h);
    }
    study
}
