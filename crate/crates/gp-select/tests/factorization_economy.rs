//! The shared-inversion economy: one Gram factorization per fit, no
//! matter how many output columns share it. Runs alone in its own test
//! binary so the process-global counter is not racing other tests.

use faer::Mat;
use gp_select::gp::{factorization_count, fit};
use gp_select::kernel::KernelHyperparams;
use gp_select::rng::{derive_rng, stream};
use rand::Rng;

#[test]
fn one_factorization_regardless_of_output_count() {
    let mut r = derive_rng(3, stream::DATA_GEN, 0, 0);
    let x = Mat::from_fn(15, 2, |_, _| r.random::<f64>());
    let hp = KernelHyperparams::default();
    for h in [1usize, 3, 7] {
        let t = Mat::from_fn(15, h, |_, _| r.random::<f64>());
        let before = factorization_count();
        let _ = fit(&hp, &x, &t).unwrap();
        assert_eq!(
            factorization_count() - before,
            1,
            "fit with {h} outputs must factorize exactly once"
        );
    }
}
