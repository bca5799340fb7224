#![allow(dead_code)]

use isekf::stability::LinearSystem;
use isekf::TimeMode;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `B B' + floor I` with `B` standard normal.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let b = randn(rng, n, n);
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

/// Random system with `n <= 6`, full-rank `Q` (hence stabilizable) and a
/// dense `C`; redrawn until the detectability test passes.
pub fn random_system(rng: &mut ChaCha8Rng, mode: TimeMode) -> LinearSystem {
    loop {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=n);
        let scale = rng.random_range(0.3..1.2) / (n as f64).sqrt();
        let a = randn(rng, n, n) * scale;
        let c = randn(rng, p, n);
        let q = random_spd(rng, n, 0.1);
        let r = random_spd(rng, p, 0.5);
        let sys = LinearSystem::new(mode, a, c, q, r, DMatrix::identity(p, p)).unwrap();
        if sys.is_detectable().unwrap() && sys.is_stabilizable().unwrap() {
            return sys;
        }
    }
}

/// `U diag(s) V'` with orthogonal `U`, `V` and singular values in `[0.5, 2]`.
pub fn random_well_conditioned(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let u = randn(rng, n, n).qr().q();
    let v = randn(rng, n, n).qr().q();
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0)));
    u * s * v.transpose()
}
