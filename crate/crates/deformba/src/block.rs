//! The full Deformba block: project, gate, scan the flattened grid into
//! per-position states, read the state map back through the deformable
//! sampler, and project out. Also the convolutional FFN that follows each
//! block and a small four-stage hierarchical backbone built from both.
//!
//! Config switches cover the ablation axes: convolution kind (2-D, causal
//! 1-D, or none), scan traversal (single or bidirectional), and the state
//! and read paths individually.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::casf::{casf_read, output_project, OffsetNet, OffsetNetVars};
use crate::scan::{DecayParams, DecayVars};
use crate::tensor::{
    outer_vk, scan_states, Conv2d, Conv2dVars, DepthwiseConv1d, DepthwiseConv1dVars,
    DepthwiseConv2d, DepthwiseConv2dVars, LayerNorm, LayerNormVars, LinearLayer, LinearVars,
    Result, ScanAlgo, Tape, TensorError, Var,
};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvType {
    NonCausal,
    Causal,
    None,
}

impl Default for ConvType {
    fn default() -> Self {
        ConvType::NonCausal
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    Single,
    Bidirectional,
}

impl Default for Traversal {
    fn default() -> Self {
        Traversal::Single
    }
}

fn default_n() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Block shape and ablation switches. `g` must divide `c`; disabling the
/// state path fixes `n` at 1 because the read then runs on the gated values,
/// which carry `c` channels rather than `c * n`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub c: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    pub r: usize,
    pub g: usize,
    #[serde(default)]
    pub conv_type: ConvType,
    #[serde(default)]
    pub traversal: Traversal,
    #[serde(default = "default_true")]
    pub use_state: bool,
    #[serde(default = "default_true")]
    pub use_casf: bool,
    #[serde(default)]
    pub scan: ScanAlgo,
}

impl BlockConfig {
    pub fn new(c: usize, n: usize, r: usize, g: usize) -> Result<Self> {
        let cfg = BlockConfig {
            c,
            n,
            r,
            g,
            conv_type: ConvType::default(),
            traversal: Traversal::default(),
            use_state: true,
            use_casf: true,
            scan: ScanAlgo::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.n == 0 || self.r == 0 || self.g == 0 {
            return Err(TensorError::arg("block_config", "extents must be positive"));
        }
        if self.c % self.g != 0 {
            return Err(TensorError::arg("block_config", "group count must divide the channel count"));
        }
        if !self.use_state && self.n != 1 {
            return Err(TensorError::arg("block_config", "disabling the state path requires n = 1"));
        }
        Ok(())
    }

    /// Channel count of the map the read pass sees.
    pub fn s2d_channels(&self) -> usize {
        if self.use_state {
            self.c * self.n
        } else {
            self.c
        }
    }
}

#[derive(Clone, Debug)]
pub enum ConvParams {
    NonCausal(DepthwiseConv2d),
    Causal(DepthwiseConv1d),
    None,
}

#[derive(Clone)]
pub enum ConvVars {
    NonCausal(DepthwiseConv2dVars),
    Causal(DepthwiseConv1dVars),
    None,
}

impl ConvParams {
    fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        match cfg.conv_type {
            ConvType::NonCausal => ConvParams::NonCausal(DepthwiseConv2d::init(cfg.c, 3, rng)),
            ConvType::Causal => ConvParams::Causal(DepthwiseConv1d::init(cfg.c, 3, true, rng)),
            ConvType::None => ConvParams::None,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ConvParams::NonCausal(k) => k.num_params(),
            ConvParams::Causal(k) => k.num_params(),
            ConvParams::None => 0,
        }
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        match self {
            ConvParams::NonCausal(k) => k.collect(out),
            ConvParams::Causal(k) => k.collect(out),
            ConvParams::None => {}
        }
    }

    pub fn lift(&self, tape: &Tape) -> ConvVars {
        match self {
            ConvParams::NonCausal(k) => ConvVars::NonCausal(k.lift(tape)),
            ConvParams::Causal(k) => ConvVars::Causal(k.lift(tape)),
            ConvParams::None => ConvVars::None,
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> ConvVars {
        match self {
            ConvParams::NonCausal(k) => ConvVars::NonCausal(k.lift_from(vars)),
            ConvParams::Causal(k) => ConvVars::Causal(k.lift_from(vars)),
            ConvParams::None => ConvVars::None,
        }
    }
}

/// Parameter store for one block, in forward order. The dt projection lives
/// inside `decay`; `offset_net` is created for every config so the layout
/// does not depend on the read switch, and simply goes unused when the read
/// is disabled. `d` starts at one so the skip path is the identity at init.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub lin_in: LinearLayer,
    pub conv: ConvParams,
    pub lin_v: LinearLayer,
    pub decay: DecayParams,
    pub offset_net: OffsetNet,
    pub d: Tensor,
    pub ln: LayerNorm,
    pub lin_out: LinearLayer,
}

#[derive(Clone)]
pub struct BlockVars {
    pub lin_in: LinearVars,
    pub conv: ConvVars,
    pub lin_v: LinearVars,
    pub decay: DecayVars,
    pub offset_net: OffsetNetVars,
    pub d: Var,
    pub ln: LayerNormVars,
    pub lin_out: LinearVars,
}

impl BlockParams {
    pub fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(BlockParams {
            lin_in: LinearLayer::init(cfg.c, cfg.c, true, rng),
            conv: ConvParams::init(cfg, rng),
            lin_v: LinearLayer::init(cfg.r + 2 * cfg.n, cfg.c, true, rng),
            decay: DecayParams::init(cfg.c, cfg.n, cfg.r, rng),
            offset_net: OffsetNet::init(cfg.s2d_channels(), cfg.g, rng),
            d: Tensor::ones(&[cfg.c]),
            ln: LayerNorm::new(cfg.c),
            lin_out: LinearLayer::init(cfg.c, cfg.c, true, rng),
        })
    }

    pub fn num_params(&self) -> usize {
        self.lin_in.num_params()
            + self.conv.num_params()
            + self.lin_v.num_params()
            + self.decay.num_params()
            + self.offset_net.num_params()
            + self.d.len()
            + self.ln.num_params()
            + self.lin_out.num_params()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        self.lin_in.collect(out);
        self.conv.collect(out);
        self.lin_v.collect(out);
        self.decay.collect(out);
        self.offset_net.collect(out);
        out.push(&self.d);
        self.ln.collect(out);
        self.lin_out.collect(out);
    }

    pub fn lift(&self, tape: &Tape) -> BlockVars {
        BlockVars {
            lin_in: self.lin_in.lift(tape),
            conv: self.conv.lift(tape),
            lin_v: self.lin_v.lift(tape),
            decay: self.decay.lift(tape),
            offset_net: self.offset_net.lift(tape),
            d: tape.leaf(self.d.clone()),
            ln: self.ln.lift(tape),
            lin_out: self.lin_out.lift(tape),
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> BlockVars {
        BlockVars {
            lin_in: self.lin_in.lift_from(vars),
            conv: self.conv.lift_from(vars),
            lin_v: self.lin_v.lift_from(vars),
            decay: self.decay.lift_from(vars),
            offset_net: self.offset_net.lift_from(vars),
            d: vars.next().expect("d leaf"),
            ln: self.ln.lift_from(vars),
            lin_out: self.lin_out.lift_from(vars),
        }
    }
}

/// One block forward: `[B,C,H,W] -> [B,C,H,W]`.
///
/// Project in, gate with SiLU around the configured convolution (with its
/// input as a residual), split the value projection into dt / key / query,
/// scan the flattened sequence into states, fold them onto the grid, read
/// with the deformable sampler, combine with the value skip path, and
/// normalize and project out. Bidirectional traversal averages the forward
/// scan with a reversed-sequence scan under shared parameters.
pub fn deformba_block_forward(t: &Var, p: &BlockVars, cfg: &BlockConfig) -> Result<Var> {
    cfg.validate()?;
    let sh = t.shape();
    if sh.len() != 4 || sh[1] != cfg.c {
        return Err(TensorError::shape(
            "deformba_block_forward",
            format!("input {:?} with c = {}", sh, cfg.c),
        ));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let l = h * w;

    let vt = p.lin_in.apply(&t.reshape(&[b, c, l])?)?;
    let v = match &p.conv {
        ConvVars::NonCausal(k) => {
            let vt2d = vt.reshape(&[b, c, h, w])?;
            k.apply(&vt2d)?.add(&vt2d)?.silu()?.reshape(&[b, c, l])?
        }
        ConvVars::Causal(k) => k.apply(&vt)?.add(&vt)?.silu()?,
        ConvVars::None => vt.silu()?,
    };

    let proj = p.lin_v.apply(&v)?;
    let dt = proj.slice_axis(1, 0, cfg.r)?;
    let key = proj.slice_axis(1, cfg.r, cfg.r + cfg.n)?;
    let q = proj.slice_axis(1, cfg.r + cfg.n, cfg.r + 2 * cfg.n)?;

    let s2d = if cfg.use_state {
        let alpha = p.decay.alpha(&dt)?;
        let u = outer_vk(&v, &key)?;
        let states = match cfg.traversal {
            Traversal::Single => scan_states(&alpha, &u, cfg.scan)?,
            Traversal::Bidirectional => {
                let fwd = scan_states(&alpha, &u, cfg.scan)?;
                let bwd = scan_states(&alpha.reverse_axis(3)?, &u.reverse_axis(3)?, cfg.scan)?
                    .reverse_axis(3)?;
                fwd.add(&bwd)?.scale(0.5)?
            }
        };
        states.reshape(&[b, c * cfg.n, h, w])?
    } else {
        v.reshape(&[b, c, h, w])?
    };

    let s_q = if cfg.use_casf { casf_read(&s2d, &p.offset_net)? } else { s2d };
    let o = output_project(&s_q.reshape(&[b, cfg.s2d_channels(), l])?, &q, &v, &p.d)?;

    let normed = p.ln.apply(&o.permute(&[0, 2, 1])?)?.permute(&[0, 2, 1])?;
    p.lin_out.apply(&normed)?.reshape(&[b, c, h, w])
}

/// Convolutional FFN parameters: pointwise expand to `4c`, depthwise 3x3,
/// pointwise project back to `c`.
#[derive(Clone, Debug)]
pub struct ConvFfnParams {
    pub expand: LinearLayer,
    pub dw: DepthwiseConv2d,
    pub project: LinearLayer,
}

#[derive(Clone)]
pub struct ConvFfnVars {
    pub expand: LinearVars,
    pub dw: DepthwiseConv2dVars,
    pub project: LinearVars,
}

impl ConvFfnParams {
    pub fn init(c: usize, rng: &mut impl Rng) -> Self {
        ConvFfnParams {
            expand: LinearLayer::init(4 * c, c, true, rng),
            dw: DepthwiseConv2d::init(4 * c, 3, rng),
            project: LinearLayer::init(c, 4 * c, true, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.expand.num_params() + self.dw.num_params() + self.project.num_params()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        self.expand.collect(out);
        self.dw.collect(out);
        self.project.collect(out);
    }

    pub fn lift(&self, tape: &Tape) -> ConvFfnVars {
        ConvFfnVars {
            expand: self.expand.lift(tape),
            dw: self.dw.lift(tape),
            project: self.project.lift(tape),
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> ConvFfnVars {
        ConvFfnVars {
            expand: self.expand.lift_from(vars),
            dw: self.dw.lift_from(vars),
            project: self.project.lift_from(vars),
        }
    }
}

/// `x + project(gelu(dwconv(expand(x))))` on `[B,C,H,W]`.
pub fn conv_ffn_forward(x: &Var, p: &ConvFfnVars) -> Result<Var> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(TensorError::shape("conv_ffn_forward", format!("{:?}", sh)));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let l = h * w;
    let e = p.expand.apply(&x.reshape(&[b, c, l])?)?;
    let ce = e.shape()[1];
    let mid = p.dw.apply(&e.reshape(&[b, ce, h, w])?)?.reshape(&[b, ce, l])?.gelu()?;
    x.add(&p.project.apply(&mid)?.reshape(&[b, c, h, w])?)
}

/// Backbone shape: stage 1 width `c` doubling at each boundary, one block
/// config per stage derived from `d_head` (sampling groups) and a dt rank of
/// `max(1, width / 16)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub c: usize,
    pub depths: [usize; 4],
    pub n: usize,
    pub d_head: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { c: 32, depths: [1, 1, 2, 1], n: 1, d_head: 4 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.n == 0 || self.d_head == 0 {
            return Err(TensorError::arg("backbone_config", "extents must be positive"));
        }
        if self.c % self.d_head != 0 {
            return Err(TensorError::arg("backbone_config", "d_head must divide the stage width"));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        [self.c, 2 * self.c, 4 * self.c, 8 * self.c]
    }

    /// Block config of one stage (0-based).
    pub fn block_config(&self, stage: usize) -> Result<BlockConfig> {
        self.validate()?;
        let width = self.stage_channels()[stage];
        BlockConfig::new(width, self.n, (width / 16).max(1), width / self.d_head)
    }
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub blocks: Vec<(BlockParams, ConvFfnParams)>,
    pub downsample: Option<Conv2d>,
}

#[derive(Clone)]
pub struct StageVars {
    pub blocks: Vec<(BlockVars, ConvFfnVars)>,
    pub downsample: Option<Conv2dVars>,
}

/// Full backbone parameter store: two stride-2 stem convs, then per stage
/// `depth` block/FFN pairs and a stride-2 doubling conv between stages.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    pub stem1: Conv2d,
    pub stem2: Conv2d,
    pub stages: Vec<StageParams>,
}

#[derive(Clone)]
pub struct BackboneVars {
    pub stem1: Conv2dVars,
    pub stem2: Conv2dVars,
    pub stages: Vec<StageVars>,
}

impl BackboneParams {
    pub fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_channels();
        let mut stages = Vec::with_capacity(4);
        for stage in 0..4 {
            let bc = cfg.block_config(stage)?;
            let mut blocks = Vec::with_capacity(cfg.depths[stage]);
            for _ in 0..cfg.depths[stage] {
                blocks.push((BlockParams::init(&bc, rng)?, ConvFfnParams::init(bc.c, rng)));
            }
            let downsample = (stage < 3)
                .then(|| Conv2d::init(widths[stage + 1], widths[stage], 3, 2, 1, true, rng));
            stages.push(StageParams { blocks, downsample });
        }
        Ok(BackboneParams {
            cfg: *cfg,
            stem1: Conv2d::init(cfg.c, 3, 3, 2, 1, true, rng),
            stem2: Conv2d::init(cfg.c, cfg.c, 3, 2, 1, true, rng),
            stages,
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.stem1.num_params() + self.stem2.num_params();
        for s in &self.stages {
            for (b, f) in &s.blocks {
                n += b.num_params() + f.num_params();
            }
            n += s.downsample.as_ref().map_or(0, Conv2d::num_params);
        }
        n
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        self.stem1.collect(out);
        self.stem2.collect(out);
        for s in &self.stages {
            for (b, f) in &s.blocks {
                b.collect(out);
                f.collect(out);
            }
            if let Some(d) = &s.downsample {
                d.collect(out);
            }
        }
    }

    pub fn lift(&self, tape: &Tape) -> BackboneVars {
        BackboneVars {
            stem1: self.stem1.lift(tape),
            stem2: self.stem2.lift(tape),
            stages: self
                .stages
                .iter()
                .map(|s| StageVars {
                    blocks: s.blocks.iter().map(|(b, f)| (b.lift(tape), f.lift(tape))).collect(),
                    downsample: s.downsample.as_ref().map(|d| d.lift(tape)),
                })
                .collect(),
        }
    }
}

/// Backbone forward: `[B,3,H,W]` with `H`, `W` divisible by 32 -> the four
/// stage maps at strides 4, 8, 16, 32 and widths `c, 2c, 4c, 8c`.
pub fn backbone_forward(img: &Var, p: &BackboneVars, cfg: &BackboneConfig) -> Result<Vec<Var>> {
    cfg.validate()?;
    let sh = img.shape();
    if sh.len() != 4 || sh[1] != 3 {
        return Err(TensorError::shape("backbone_forward", format!("{:?}", sh)));
    }
    if sh[2] % 32 != 0 || sh[3] % 32 != 0 {
        return Err(TensorError::shape(
            "backbone_forward",
            format!("spatial extents {}x{} not divisible by 32", sh[2], sh[3]),
        ));
    }
    let mut x = p.stem2.apply(&p.stem1.apply(img)?)?;
    let mut maps = Vec::with_capacity(4);
    for (stage, sv) in p.stages.iter().enumerate() {
        let bc = cfg.block_config(stage)?;
        for (bv, fv) in &sv.blocks {
            x = conv_ffn_forward(&deformba_block_forward(&x, bv, &bc)?, fv)?;
        }
        maps.push(x.clone());
        if let Some(ds) = &sv.downsample {
            x = ds.apply(&x)?;
        }
    }
    Ok(maps)
}

/// Value-level backbone forward on a throwaway tape.
pub fn backbone_forward_tensor(img: &Tensor, p: &BackboneParams) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let vars = p.lift(&tape);
    let img_v = tape.constant(img.clone());
    Ok(backbone_forward(&img_v, &vars, &p.cfg)?.into_iter().map(|v| v.value()).collect())
}
