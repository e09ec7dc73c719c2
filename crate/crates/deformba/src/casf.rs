//! The deformable read pass: predict per-location offsets and fusion weights
//! from the 2-D state map, bilinearly sample the map at the offset positions,
//! fuse the groups, and project to the output.
//!
//! Initialization contract: the offset and weight heads start at zero, so the
//! first forward pass samples every location at its own reference point with
//! uniform weights. For a power-of-two group count the whole read pass is
//! then bitwise the identity on the state map.

use rand::Rng;

use crate::tensor::{
    nl_contract, Conv1dChannel, Conv1dChannelVars, DepthwiseConv2d, DepthwiseConv2dVars,
    LinearLayer, LinearVars, Result, Tape, TensorError, Var,
};
use crate::Tensor;

/// Offset/weight prediction network. `head_offsets` and `head_weights` are
/// zero-initialized (weights and biases); `dw` and `eca_kernel` carry the
/// usual fan-in init.
#[derive(Clone, Debug)]
pub struct OffsetNet {
    pub dw: DepthwiseConv2d,
    pub eca_kernel: Conv1dChannel,
    pub head_offsets: LinearLayer,
    pub head_weights: LinearLayer,
}

#[derive(Clone)]
pub struct OffsetNetVars {
    pub dw: DepthwiseConv2dVars,
    pub eca_kernel: Conv1dChannelVars,
    pub head_offsets: LinearVars,
    pub head_weights: LinearVars,
}

impl OffsetNet {
    /// `c` is the state-map channel count, `g` the group count.
    pub fn init(c: usize, g: usize, rng: &mut impl Rng) -> Self {
        OffsetNet {
            dw: DepthwiseConv2d::init(c, 3, rng),
            eca_kernel: Conv1dChannel::init(3, rng),
            head_offsets: LinearLayer::zeros(2 * g, c, true),
            head_weights: LinearLayer::zeros(g, c, true),
        }
    }

    pub fn groups(&self) -> usize {
        self.head_weights.weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.dw.num_params()
            + self.eca_kernel.num_params()
            + self.head_offsets.num_params()
            + self.head_weights.num_params()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        self.dw.collect(out);
        self.eca_kernel.collect(out);
        self.head_offsets.collect(out);
        self.head_weights.collect(out);
    }

    pub fn lift(&self, tape: &Tape) -> OffsetNetVars {
        OffsetNetVars {
            dw: self.dw.lift(tape),
            eca_kernel: self.eca_kernel.lift(tape),
            head_offsets: self.head_offsets.lift(tape),
            head_weights: self.head_weights.lift(tape),
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> OffsetNetVars {
        OffsetNetVars {
            dw: self.dw.lift_from(vars),
            eca_kernel: self.eca_kernel.lift_from(vars),
            head_offsets: self.head_offsets.lift_from(vars),
            head_weights: self.head_weights.lift_from(vars),
        }
    }
}

/// Folds a state sequence `[B,C,N,L]` onto the spatial grid as
/// `[B, C*N, H, W]` in row-major sweep order (invertible, metadata only).
pub fn rearrange_states(s: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if s.rank() != 4 {
        return Err(TensorError::shape("rearrange_states", format!("{:?}", s.shape())));
    }
    let (b, c, n, l) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    if l != h * w {
        return Err(TensorError::shape(
            "rearrange_states",
            format!("L={} but grid is {}x{}", l, h, w),
        ));
    }
    s.reshaped(&[b, c * n, h, w])
}

/// Inverse of [`rearrange_states`].
pub fn flatten_states(s2d: &Tensor, n: usize) -> Result<Tensor> {
    if s2d.rank() != 4 || n == 0 || s2d.shape()[1] % n != 0 {
        return Err(TensorError::shape(
            "flatten_states",
            format!("{:?} with N={}", s2d.shape(), n),
        ));
    }
    let (b, cn, h, w) = (s2d.shape()[0], s2d.shape()[1], s2d.shape()[2], s2d.shape()[3]);
    s2d.reshaped(&[b, cn / n, n, h * w])
}

/// Channel gating: `U * sigmoid(conv1d(mean_pool_hw(U)))`, gate broadcast
/// over the spatial grid.
pub fn eca(u: &Var, kernel: &Conv1dChannelVars) -> Result<Var> {
    let gate = kernel.apply(&u.mean_hw()?)?.sigmoid()?;
    u.mul_bc(&gate)
}

/// Reference point per grid location, `[H, W, 2]` with entry `(x=j, y=i)`:
/// each location points at itself.
pub fn reference_grid(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 2], |idx| {
        if idx[2] == 0 {
            idx[1] as f64
        } else {
            idx[0] as f64
        }
    })
}

/// Offset field `dp [B,H,W,G,2]` from the gated depthwise features, and
/// fusion weights `w [B,H,W,G]` (softmax over G) from the raw state map.
pub fn predict_offsets_weights(s2d: &Var, net: &OffsetNetVars) -> Result<(Var, Var)> {
    let sh = s2d.shape();
    if sh.len() != 4 {
        return Err(TensorError::shape("predict_offsets_weights", format!("{:?}", sh)));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let l = h * w;
    let features = eca(&net.dw.apply(s2d)?, &net.eca_kernel)?;
    let off = net.head_offsets.apply(&features.reshape(&[b, c, l])?)?;
    let g = off.shape()[1] / 2;
    // channel 2g+0 is dx, 2g+1 is dy
    let dp = off
        .reshape(&[b, g, 2, l])?
        .permute(&[0, 3, 1, 2])?
        .reshape(&[b, h, w, g, 2])?;
    let logits = net.head_weights.apply(&s2d.reshape(&[b, c, l])?)?;
    let wfield = logits.softmax(1)?.permute(&[0, 2, 1])?.reshape(&[b, h, w, g])?;
    Ok((dp, wfield))
}

/// Sampling positions `P = E + dp`, in pixel units; may leave the grid.
pub fn sampling_positions(e: &Tensor, dp: &Var) -> Result<Var> {
    let sh = dp.shape();
    if sh.len() != 5 || e.shape() != [sh[1], sh[2], 2] || sh[4] != 2 {
        return Err(TensorError::shape(
            "sampling_positions",
            format!("grid {:?} with dp {:?}", e.shape(), sh),
        ));
    }
    let (b, h, w, g) = (sh[0], sh[1], sh[2], sh[3]);
    let full = Tensor::from_fn(&[b, h, w, g, 2], |i| e.at(&[i[1], i[2], i[4]]));
    let e_var = dp.tape().constant(full);
    dp.add(&e_var)
}

/// Weighted fusion over groups: `samples [B,H,W,G,C]`, `w [B,H,W,G]` ->
/// `[B,C,H,W]`. The G-sum uses the fixed pairwise tree, so uniform weights
/// over a power-of-two G reproduce a common sample exactly.
pub fn fuse(samples: &Var, w: &Var) -> Result<Var> {
    samples.row_scale(w)?.sum_axis(3)?.permute(&[0, 3, 1, 2])
}

/// Full read pass on a state map `[B,C,H,W]`: predict, sample, fuse.
pub fn casf_read(s2d: &Var, net: &OffsetNetVars) -> Result<Var> {
    let sh = s2d.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (dp, wfield) = predict_offsets_weights(s2d, net)?;
    let g = wfield.shape()[3];
    let p = sampling_positions(&reference_grid(h, w), &dp)?;
    let samples = s2d.bilinear_sample(&p.reshape(&[b, h * w * g, 2])?)?;
    fuse(&samples.reshape(&[b, h, w, g, c])?, &wfield)
}

/// Output projection `O[b,c,l] = sum_n S_Q[b,c,n,l] * Q[b,n,l] + V[b,c,l] * D[c]`.
/// `s_q` arrives with N folded into channels, `[B, C*N, L]`.
pub fn output_project(s_q: &Var, q: &Var, v: &Var, d: &Var) -> Result<Var> {
    let (sq_sh, q_sh, v_sh) = (s_q.shape(), q.shape(), v.shape());
    if sq_sh.len() != 3 || q_sh.len() != 3 || v_sh.len() != 3 {
        return Err(TensorError::shape(
            "output_project",
            format!("s_q {:?}, q {:?}, v {:?}", sq_sh, q_sh, v_sh),
        ));
    }
    let (b, c, l) = (v_sh[0], v_sh[1], v_sh[2]);
    let n = q_sh[1];
    if sq_sh != [b, c * n, l] || q_sh != [b, n, l] {
        return Err(TensorError::shape(
            "output_project",
            format!("s_q {:?}, q {:?}, v {:?}", sq_sh, q_sh, v_sh),
        ));
    }
    let state_path = nl_contract(&s_q.reshape(&[b, c, n, l])?, q)?;
    state_path.add(&v.mul_channel_vec(d)?)
}
