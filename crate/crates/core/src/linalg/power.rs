use super::dense::{norm2, DenseMatrix};
use crate::rng::Gaussian;

/// A square linear operator known only through its action and the action of
/// its transpose.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, x: &[f64]) -> Vec<f64>;
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        assert!(self.is_square());
        self.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }

    fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        self.tr_matvec(x)
    }
}

/// Power-iteration estimate of the largest singular value of `op`, run on
/// `AᵀA` from a seeded Gaussian start. Never negative; zero for the zero
/// operator.
pub fn spectral_norm_estimate<Op: LinearOperator + ?Sized>(op: &Op, iters: usize, seed: u64) -> f64 {
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let mut rng = Gaussian::new(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.next()).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let y = op.apply(&x);
        sigma = norm2(&y);
        if sigma == 0.0 {
            return 0.0;
        }
        let z = op.apply_transpose(&y);
        let nz = norm2(&z);
        if nz == 0.0 {
            return 0.0;
        }
        x = z.into_iter().map(|v| v / nz).collect();
    }
    let last = norm2(&op.apply(&x));
    sigma.max(last)
}
