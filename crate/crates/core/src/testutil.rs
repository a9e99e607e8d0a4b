use crate::random::{gaussian_vec, seeded};
use crate::tensor::{DenseTensor, FactorMatrix};

pub(crate) fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor<f64> {
    let n = shape.iter().product();
    DenseTensor::from_vec(shape, gaussian_vec(&mut seeded(seed, 7), n, 1.0)).unwrap()
}

pub(crate) fn random_factor(rows: usize, rank: usize, seed: u64) -> FactorMatrix {
    FactorMatrix::from_vec(rows, rank, gaussian_vec(&mut seeded(seed, 8), rows * rank, 1.0)).unwrap()
}
