//! Finite-difference checks for every differentiable primitive.
//!
//! Each case compares the tape gradient against central differences of a
//! random scalar projection of the outputs. Structural ops (reshape, permute,
//! slice, reverse, gather, segment sum) are checked too: their Jacobians are
//! permutation matrices and any indexing slip shows up immediately.

use deformba::tensor::{
    decay_alpha, nl_contract, outer_vk, scan_states, vjp_check, ScanAlgo, Tape, Var,
    VjpCheckConfig,
};
use deformba::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn uni(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

fn check<F>(f: F, inputs: &[Tensor], tol: f64)
where
    F: Fn(&Tape, &[Var]) -> deformba::tensor::Result<Vec<Var>>,
{
    let err = vjp_check(f, inputs, &VjpCheckConfig::default()).unwrap();
    assert!(err <= tol, "vjp rel err {} > tol {}", err, tol);
}

#[test]
fn vjp_add_mul_scale() {
    let a = uni(&[2, 3], -2.0, 2.0, 1);
    let b = uni(&[2, 3], -2.0, 2.0, 2);
    check(|_, v| Ok(vec![v[0].add(&v[1])?]), &[a.clone(), b.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].mul(&v[1])?]), &[a.clone(), b], 1e-7);
    check(|_, v| Ok(vec![v[0].scale(-1.7)?]), &[a], 1e-7);
}

#[test]
fn vjp_unaries() {
    let x = uni(&[3, 4], -3.0, 3.0, 3);
    check(|_, v| Ok(vec![v[0].silu()?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].sigmoid()?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].exp()?]), &[x.clone()], 1e-6);
    check(|_, v| Ok(vec![v[0].gelu()?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].softplus()?]), &[x], 1e-7);
    // both sides of the softplus linear branch at x > 30
    let far = Tensor::new(&[2], vec![29.9, 31.0]).unwrap();
    check(|_, v| Ok(vec![v[0].softplus()?]), &[far], 1e-5);
}

#[test]
fn vjp_structural_ops() {
    let x = uni(&[2, 3, 4], -1.0, 1.0, 4);
    check(|_, v| Ok(vec![v[0].reshape(&[4, 6])?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].permute(&[2, 0, 1])?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].slice_axis(1, 1, 3)?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].reverse_axis(2)?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].sum_axis(1)?]), &[x], 1e-7);
    let img = uni(&[2, 3, 4, 5], -1.0, 1.0, 5);
    check(|_, v| Ok(vec![v[0].mean_hw()?]), &[img], 1e-7);
}

#[test]
fn vjp_matmul_all_broadcast_modes() {
    let a = uni(&[2, 3, 4], -1.0, 1.0, 6);
    let b = uni(&[2, 4, 5], -1.0, 1.0, 7);
    check(|_, v| Ok(vec![v[0].matmul(&v[1])?]), &[a, b], 1e-7);
    let w = uni(&[3, 4], -1.0, 1.0, 8);
    let x = uni(&[2, 4, 5], -1.0, 1.0, 9);
    check(|_, v| Ok(vec![v[0].matmul(&v[1])?]), &[w, x], 1e-7);
    let y = uni(&[2, 3, 4], -1.0, 1.0, 10);
    let shared = uni(&[4, 2], -1.0, 1.0, 11);
    check(|_, v| Ok(vec![v[0].matmul(&v[1])?]), &[y, shared], 1e-7);
}

#[test]
fn vjp_channel_broadcast_ops() {
    let x = uni(&[2, 3, 4], -1.0, 1.0, 12);
    let bias = uni(&[3], -1.0, 1.0, 13);
    check(|_, v| Ok(vec![v[0].add_channel_bias(&v[1])?]), &[x.clone(), bias], 1e-7);
    let d = uni(&[3], -1.0, 1.0, 14);
    check(|_, v| Ok(vec![v[0].mul_channel_vec(&v[1])?]), &[x.clone(), d], 1e-7);
    let g = uni(&[2, 3], -1.0, 1.0, 15);
    check(|_, v| Ok(vec![v[0].mul_bc(&v[1])?]), &[x.clone(), g], 1e-7);
    let w = uni(&[2, 3], -1.0, 1.0, 16);
    check(|_, v| Ok(vec![v[0].row_scale(&v[1])?]), &[x, w], 1e-7);
}

#[test]
fn vjp_conv2d_with_stride_pad_and_bias() {
    let x = uni(&[2, 3, 5, 6], -1.0, 1.0, 17);
    let w = uni(&[4, 3, 3, 3], -0.5, 0.5, 18);
    let b = uni(&[4], -0.5, 0.5, 19);
    check(|_, v| Ok(vec![v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?]), &[x.clone(), w.clone(), b], 1e-6);
    check(|_, v| Ok(vec![v[0].conv2d(&v[1], None, 1, 1)?]), &[x, w], 1e-6);
}

#[test]
fn vjp_depthwise_convs() {
    let x = uni(&[2, 3, 5, 6], -1.0, 1.0, 20);
    let k = uni(&[3, 3, 3], -0.5, 0.5, 21);
    check(|_, v| Ok(vec![v[0].dwconv2d(&v[1])?]), &[x, k], 1e-6);
    let xs = uni(&[2, 3, 7], -1.0, 1.0, 22);
    let ks = uni(&[3, 3], -0.5, 0.5, 23);
    check(|_, v| Ok(vec![v[0].dwconv1d(&v[1], true)?]), &[xs.clone(), ks.clone()], 1e-6);
    check(|_, v| Ok(vec![v[0].dwconv1d(&v[1], false)?]), &[xs, ks], 1e-6);
    let pooled = uni(&[2, 8], -1.0, 1.0, 24);
    let kc = uni(&[3], -0.5, 0.5, 25);
    check(|_, v| Ok(vec![v[0].conv1d_channel(&v[1])?]), &[pooled, kc], 1e-6);
}

#[test]
fn vjp_layer_norm_and_softmax() {
    let x = uni(&[3, 6], -2.0, 2.0, 26);
    let g = uni(&[6], 0.5, 1.5, 27);
    let b = uni(&[6], -0.5, 0.5, 28);
    check(|_, v| Ok(vec![v[0].layer_norm(&v[1], &v[2], 1e-5)?]), &[x.clone(), g, b], 1e-6);
    check(|_, v| Ok(vec![v[0].softmax(1)?]), &[x.clone()], 1e-6);
    check(|_, v| Ok(vec![v[0].softmax(0)?]), &[x], 1e-6);
}

#[test]
fn vjp_scan_family() {
    // alpha strictly inside (0,1), u moderate; every algorithm shares one adjoint
    let alpha = uni(&[1, 2, 3, 5], 0.05, 0.95, 29);
    let u = uni(&[1, 2, 3, 5], -1.0, 1.0, 30);
    for algo in [ScanAlgo::Sequential, ScanAlgo::Parallel, ScanAlgo::Chunked(3)] {
        check(
            move |_, v| Ok(vec![scan_states(&v[0], &v[1], algo)?]),
            &[alpha.clone(), u.clone()],
            1e-5,
        );
    }
}

#[test]
fn vjp_ssm_contraction_ops() {
    let v_in = uni(&[2, 3, 4], -1.0, 1.0, 31);
    let k_in = uni(&[2, 2, 4], -1.0, 1.0, 32);
    check(|_, vs| Ok(vec![outer_vk(&vs[0], &vs[1])?]), &[v_in, k_in], 1e-7);
    let sq = uni(&[2, 3, 2, 4], -1.0, 1.0, 33);
    let q = uni(&[2, 2, 4], -1.0, 1.0, 34);
    check(|_, vs| Ok(vec![nl_contract(&vs[0], &vs[1])?]), &[sq, q], 1e-7);
    let delta = uni(&[2, 3, 4], 0.05, 2.0, 35);
    let a_log = uni(&[3, 2], -1.0, 1.0, 36);
    check(|_, vs| Ok(vec![decay_alpha(&vs[0], &vs[1])?]), &[delta, a_log], 1e-6);
}

#[test]
fn vjp_bilinear_sample_off_grid_positions() {
    let map = uni(&[1, 2, 4, 5], -1.0, 1.0, 37);
    // positions at least 1e-3 from integer coordinates: the position gradient
    // is piecewise linear and finite differences must not cross a cell edge
    let pos = Tensor::new(
        &[2, 3, 2],
        vec![1.3, 0.6, 2.71, 1.41, 0.51, 2.49, 3.3, 0.4, 1.6, 1.6, 2.2, 0.8],
    )
    .unwrap();
    check(|_, v| Ok(vec![v[0].bilinear_sample(&v[1])?]), &[map.clone(), pos], 1e-6);
    // fully out-of-grid positions: value and both gradients are zero
    let far = Tensor::new(&[1, 1, 2], vec![-3.4, -2.6]).unwrap();
    check(|_, v| Ok(vec![v[0].bilinear_sample(&v[1])?]), &[map, far], 1e-7);
}

#[test]
fn vjp_gather_and_segment_sum() {
    let x = uni(&[2, 4, 3], -1.0, 1.0, 38);
    check(|_, v| Ok(vec![v[0].gather_axis1(&[3, 0, 3, 1])?]), &[x.clone()], 1e-7);
    check(|_, v| Ok(vec![v[0].segment_sum_axis1(&[1, 0, 1, 1], 2)?]), &[x], 1e-7);
}

#[test]
fn vjp_composite_chain_through_many_ops() {
    // one deep composition touching matmul, norm, activation and scan
    let x = uni(&[1, 3, 4], -1.0, 1.0, 39);
    let w = uni(&[4, 3], -0.5, 0.5, 40);
    let g = uni(&[4], 0.8, 1.2, 41);
    let b = uni(&[4], -0.2, 0.2, 42);
    check(
        |_, v| {
            let h = v[1].matmul(&v[0])?.silu()?; // [1,4,4]
            let hn = h.permute(&[0, 2, 1])?.layer_norm(&v[2], &v[3], 1e-5)?.permute(&[0, 2, 1])?;
            let alpha = hn.sigmoid()?.reshape(&[1, 2, 2, 4])?;
            let u = h.reshape(&[1, 2, 2, 4])?;
            Ok(vec![scan_states(&alpha, &u, ScanAlgo::Parallel)?])
        },
        &[x, w, g, b],
        1e-5,
    );
}
