//! Finite-difference checks through whole composite modules: the full block
//! (input and every parameter tensor probed) and the convolutional FFN.
//!
//! The offset head is pinned to fixed fractional offsets so every sampling
//! position stays well away from the integer-coordinate kinks of bilinear
//! interpolation; finite differences straddling a kink would not match the
//! one-sided analytic derivative there.

use deformba::block::{
    conv_ffn_forward, deformba_block_forward, BlockConfig, BlockParams, ConvFfnParams,
};
use deformba::tensor::{vjp_check, Tape, Var, VjpCheckConfig};
use deformba::xa::{lift_and_project, xa_block_vars, BEVGrid, CameraRig, XAConfig, XAParams};
use deformba::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn check<F>(f: F, inputs: &[Tensor], tol: f64)
where
    F: Fn(&Tape, &[Var]) -> deformba::tensor::Result<Vec<Var>>,
{
    let err = vjp_check(f, inputs, &VjpCheckConfig::default()).unwrap();
    assert!(err <= tol, "vjp rel err {} > tol {}", err, tol);
}

#[test]
fn vjp_full_block() {
    let cfg = BlockConfig::new(4, 1, 2, 2).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let mut params = BlockParams::init(&cfg, &mut rng).unwrap();
    // Fixed fractional offsets; the weight head stays zero, so probing any
    // upstream parameter leaves the sampling positions at these values.
    let ob = params.offset_net.head_offsets.bias.as_mut().unwrap();
    for (i, v) in [0.31, -0.27, 0.43, 0.19].into_iter().enumerate() {
        ob.set(&[i], v);
    }
    let wb = params.offset_net.head_weights.bias.as_mut().unwrap();
    wb.set(&[0], 0.2);
    wb.set(&[1], -0.1);

    let img = Tensor::rand_uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng);
    let mut leaves = vec![img];
    let mut ts = Vec::new();
    params.collect(&mut ts);
    leaves.extend(ts.into_iter().cloned());

    check(
        |_, vars| {
            let mut it = vars[1..].iter().cloned();
            let bv = params.lift_from(&mut it);
            Ok(vec![deformba_block_forward(&vars[0], &bv, &cfg)?])
        },
        &leaves,
        1e-5,
    );
}

#[test]
fn vjp_full_block_bidirectional_causal_conv() {
    let mut cfg = BlockConfig::new(4, 2, 2, 4).unwrap();
    cfg.conv_type = deformba::block::ConvType::Causal;
    cfg.traversal = deformba::block::Traversal::Bidirectional;
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    let mut params = BlockParams::init(&cfg, &mut rng).unwrap();
    let ob = params.offset_net.head_offsets.bias.as_mut().unwrap();
    for (i, v) in [0.41, 0.23, -0.37, 0.11, 0.29, -0.13, 0.47, -0.31].into_iter().enumerate() {
        ob.set(&[i], v);
    }

    let img = Tensor::rand_uniform(&[1, 4, 2, 4], -1.0, 1.0, &mut rng);
    let mut leaves = vec![img];
    let mut ts = Vec::new();
    params.collect(&mut ts);
    leaves.extend(ts.into_iter().cloned());

    check(
        |_, vars| {
            let mut it = vars[1..].iter().cloned();
            let bv = params.lift_from(&mut it);
            Ok(vec![deformba_block_forward(&vars[0], &bv, &cfg)?])
        },
        &leaves,
        1e-5,
    );
}

#[test]
fn vjp_conv_ffn() {
    let mut rng = ChaCha12Rng::seed_from_u64(107);
    let params = ConvFfnParams::init(3, &mut rng);
    let x = Tensor::rand_uniform(&[2, 3, 2, 3], -1.0, 1.0, &mut rng);
    let mut leaves = vec![x];
    let mut ts = Vec::new();
    params.collect(&mut ts);
    leaves.extend(ts.into_iter().cloned());

    check(
        |_, vars| {
            let mut it = vars[1..].iter().cloned();
            let fv = params.lift_from(&mut it);
            Ok(vec![conv_ffn_forward(&vars[0], &fv)?])
        },
        &leaves,
        1e-5,
    );
}

#[test]
fn vjp_full_xa_block() {
    // Toy rig: u = 0.37 + y / x, v = 0.61 + z / x over a 2x2 grid with
    // pillar heights 0.8 and 2.2, so all eight reference points hit at
    // coordinates at least 0.12 away from any integer. The offset head is
    // zero-initialized, so sampling stays at those points under probing.
    let cfg = XAConfig::new(4, 3, 2, 2, 1, 2).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(105);
    let params = XAParams::init(&cfg, &mut rng).unwrap();
    let rig = CameraRig {
        num_cams: 1,
        lidar2img: vec![[
            0.37, 1.0, 0.0, 0.0, 0.61, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ]],
        h_img: 4,
        w_img: 4,
    };
    let grid = BEVGrid {
        hb: 2,
        wb: 2,
        x_min: 0.0,
        x_max: 4.0,
        y_min: 0.0,
        y_max: 4.0,
        z_heights: vec![0.8, 2.2],
    };
    let hits = lift_and_project(&grid, &rig).unwrap();
    assert_eq!(hits.total_hits(), 8);

    let f = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let m = Tensor::rand_uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
    let mut leaves = vec![f, m];
    let mut ts = Vec::new();
    params.collect(&mut ts);
    leaves.extend(ts.into_iter().cloned());

    check(
        |_, vars| {
            let mut it = vars[2..].iter().cloned();
            let xv = params.lift_from(&mut it);
            Ok(vec![xa_block_vars(&vars[0], &vars[1], &hits, &xv, &cfg)?])
        },
        &leaves,
        1e-4,
    );
}
