use std::sync::Arc;

use forge_masks::SparseMask;
use forge_tensor::{csr_matmul, kernels, CompressedRows, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn masked_forward(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    mask: &Arc<SparseMask>,
    bias: Option<&Tensor<f64>>,
) -> (Tensor<f64>, u64) {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let bv = bias.map(|b| t.constant(b.clone()));
    let y = t.masked_linear(xv, wv, mask, bv, false).unwrap();
    (t.value(y).clone(), t.macs())
}

#[test]
fn all_active_equals_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, w) = (random(&[9, 13], &mut rng), random(&[13, 6], &mut rng));
    let (y, macs) = masked_forward(&x, &w, &Arc::new(SparseMask::full(&[13, 6])), None);
    let oracle = kernels::matmul(x.data(), w.data(), 9, 13, 6);
    assert_eq!(y.data(), oracle.as_slice());
    assert_eq!(macs, 9 * 13 * 6);
}

#[test]
fn all_inactive_gives_bias_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, w) = (random(&[4, 5], &mut rng), random(&[5, 3], &mut rng));
    let mask = Arc::new(SparseMask::random_with_count(&[5, 3], 0, 0).unwrap());
    let bias = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let (y, macs) = masked_forward(&x, &w, &mask, Some(&bias));
    for row in y.data().chunks(3) {
        assert_eq!(row, bias.data());
    }
    assert_eq!(macs, 0);
}

#[test]
fn ninety_percent_sparse_matches_compressed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, w) = (random(&[32, 64], &mut rng), random(&[64, 48], &mut rng));
    let mask = Arc::new(SparseMask::random(&[64, 48], 0.9, 7).unwrap());
    let (y, _) = masked_forward(&x, &w, &mask, None);
    let (c, _) = csr_matmul(&x, &CompressedRows::from_masked(&w, &mask).unwrap()).unwrap();
    assert!(y.max_relative_diff(&c, 1e-12) <= 1e-10);
}

#[test]
fn compressed_mac_counter_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, w) = (random(&[64, 128], &mut rng), random(&[128, 128], &mut rng));
    let active = (0.1f64 * 16384.0).ceil() as usize;
    let mask = SparseMask::random_with_count(&[128, 128], active, 11).unwrap();
    let csr = CompressedRows::from_masked(&w, &mask).unwrap();
    assert_eq!(csr.nnz(), 1639);
    let (_, macs) = csr_matmul(&x, &csr).unwrap();
    assert_eq!(macs, 64 * 1639);
}

#[test]
fn compressed_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&[20, 30], &mut rng);
    let mask = SparseMask::random(&[20, 30], 0.7, 1).unwrap();
    let csr = CompressedRows::from_masked(&w, &mask).unwrap();
    let rebuilt = CompressedRows::from_parts(
        20,
        30,
        csr.offsets().to_vec(),
        csr.indices().to_vec(),
        csr.values().to_vec(),
    )
    .unwrap();
    assert_eq!(rebuilt, csr);
    let mut masked = w.clone();
    mask.apply(masked.data_mut()).unwrap();
    assert_eq!(csr.to_dense(), masked);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn compressed_equals_masked_dense(
        m in 1usize..12,
        k in 1usize..40,
        n in 1usize..40,
        sparsity in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w) = (random(&[m, k], &mut rng), random(&[k, n], &mut rng));
        let mask = Arc::new(SparseMask::random(&[k, n], sparsity, seed).unwrap());
        let (y, macs) = masked_forward(&x, &w, &mask, None);
        let csr = CompressedRows::from_masked(&w, &mask).unwrap();
        let (c, cmacs) = csr_matmul(&x, &csr).unwrap();
        prop_assert!(y.max_relative_diff(&c, 1e-12) <= 1e-10);
        prop_assert_eq!(macs, cmacs);
        prop_assert_eq!(cmacs, (m * mask.active_count()) as u64);
    }
}
