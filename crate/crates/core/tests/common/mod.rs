#![allow(dead_code)]

use hdrflow::Tensor;
use proptest::prelude::*;

/// Tensor of the given dims with entries drawn from `lo..hi`.
pub fn tensor(dims: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = dims.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(dims.clone(), d).unwrap())
}

/// `[C,H,W]` image with random small sides.
pub fn image(c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1usize..7, 1usize..7).prop_flat_map(move |(h, w)| tensor(vec![c, h, w], lo, hi))
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
