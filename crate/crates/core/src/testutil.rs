use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    let a = random_matrix(rng, n, n);
    let mut q = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut v = a.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let proj = qk.dot(&v);
            v = &v - &(&qk * proj);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(&v / norm));
    }
    q
}
