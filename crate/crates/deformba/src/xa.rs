//! Cross-attention between multi-view image features and a grid of queries.
//!
//! The write pass scans each view's features once into a per-view state
//! memory. The read pass lifts every query cell into a vertical pillar of
//! 3-D points, projects the points into every camera, keeps the ones that
//! land inside an image with positive depth, and bilinearly samples the
//! memory at learned offsets around those reference points. Fusion weights
//! are a softmax over the offsets of one reference slot; the surviving
//! slots are averaged unweighted. Queries whose pillars miss every camera
//! fall back to their skip path.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scan::{DecayParams, DecayVars};
use crate::tensor::{
    outer_vk, scan_states, DepthwiseConv1d, DepthwiseConv1dVars, LayerNorm, LayerNormVars,
    LinearLayer, LinearVars, Result, ScanAlgo, Tape, TensorError, Var,
};
use crate::Tensor;

/// Minimum projected depth (meters) for a reference point to count as a hit.
pub const DEPTH_EPS: f64 = 1e-5;

/// Camera set: one row-major 4x4 matrix per camera mapping homogeneous ego
/// coordinates to homogeneous pixel coordinates. The declared image extents
/// are also the state-memory extents the read pass samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub num_cams: usize,
    pub lidar2img: Vec<[f64; 16]>,
    pub h_img: usize,
    pub w_img: usize,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cams == 0 || self.h_img == 0 || self.w_img == 0 {
            return Err(TensorError::arg("camera_rig", "extents must be positive"));
        }
        if self.lidar2img.len() != self.num_cams {
            return Err(TensorError::arg(
                "camera_rig",
                format!("{} matrices for {} cameras", self.lidar2img.len(), self.num_cams),
            ));
        }
        if self.lidar2img.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TensorError::arg("camera_rig", "projection matrices must be finite"));
        }
        Ok(())
    }
}

fn default_pillar_heights() -> Vec<f64> {
    vec![-3.0, -1.0, 1.0, 3.0]
}

/// Query grid: `hb * wb` cells over a metric ground rectangle, each lifted
/// to one 3-D point per pillar height. Cell `p = i * wb + j` is centered at
/// `x = x_min + (j + 0.5) * (x_max - x_min) / wb` and the matching `y`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BEVGrid {
    pub hb: usize,
    pub wb: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    #[serde(default = "default_pillar_heights")]
    pub z_heights: Vec<f64>,
}

impl BEVGrid {
    pub fn validate(&self) -> Result<()> {
        if self.hb == 0 || self.wb == 0 {
            return Err(TensorError::arg("bev_grid", "extents must be positive"));
        }
        if !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(TensorError::arg("bev_grid", "metric bounds must be ordered"));
        }
        if self.z_heights.is_empty() || self.z_heights.iter().any(|z| !z.is_finite()) {
            return Err(TensorError::arg("bev_grid", "pillar heights must be finite and nonempty"));
        }
        if self.z_heights.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TensorError::arg("bev_grid", "pillar heights must be strictly increasing"));
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.hb * self.wb
    }

    pub fn cell_center(&self, p: usize) -> (f64, f64) {
        let (i, j) = (p / self.wb, p % self.wb);
        let x = self.x_min + (j as f64 + 0.5) * (self.x_max - self.x_min) / self.wb as f64;
        let y = self.y_min + (i as f64 + 0.5) * (self.y_max - self.y_min) / self.hb as f64;
        (x, y)
    }
}

/// Projected reference points. `uv` holds pixel coordinates `[P, num_cams,
/// Z, 2]` (x then y), zeroed where the projection missed; `hit` is the
/// row-major mask over the same `[P, num_cams, Z]` index space.
#[derive(Clone, Debug)]
pub struct ReferenceHits {
    pub uv: Tensor,
    pub hit: Vec<bool>,
}

impl ReferenceHits {
    /// `(P, num_cams, Z)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let sh = self.uv.shape();
        (sh[0], sh[1], sh[2])
    }

    pub fn is_hit(&self, p: usize, cam: usize, z: usize) -> bool {
        let (_, nc, nz) = self.dims();
        self.hit[(p * nc + cam) * nz + z]
    }

    /// Surviving reference slots of one query.
    pub fn hit_count(&self, p: usize) -> usize {
        let (_, nc, nz) = self.dims();
        self.hit[p * nc * nz..(p + 1) * nc * nz].iter().filter(|h| **h).count()
    }

    pub fn total_hits(&self) -> usize {
        self.hit.iter().filter(|h| **h).count()
    }
}

/// Project every query pillar point into every camera. A point hits when
/// its depth `p_2` exceeds `DEPTH_EPS` and the dehomogenized pixel lands in
/// `[0, w) x [0, h)`; misses are mask entries, never errors.
pub fn lift_and_project(grid: &BEVGrid, rig: &CameraRig) -> Result<ReferenceHits> {
    grid.validate()?;
    rig.validate()?;
    let (p_cnt, nz) = (grid.num_queries(), grid.z_heights.len());
    let mut uv = Tensor::zeros(&[p_cnt, rig.num_cams, nz, 2]);
    let mut hit = vec![false; p_cnt * rig.num_cams * nz];
    for p in 0..p_cnt {
        let (x, y) = grid.cell_center(p);
        for cam in 0..rig.num_cams {
            let m = &rig.lidar2img[cam];
            for (zi, &z) in grid.z_heights.iter().enumerate() {
                let hom = [x, y, z, 1.0];
                let mut pr = [0.0; 3];
                for (row, pv) in pr.iter_mut().enumerate() {
                    *pv = (0..4).map(|col| m[row * 4 + col] * hom[col]).sum();
                }
                if pr[2] > DEPTH_EPS {
                    let (u, v) = (pr[0] / pr[2], pr[1] / pr[2]);
                    if u >= 0.0 && u < rig.w_img as f64 && v >= 0.0 && v < rig.h_img as f64 {
                        uv.set(&[p, cam, zi, 0], u);
                        uv.set(&[p, cam, zi, 1], v);
                        hit[(p * rig.num_cams + cam) * nz + zi] = true;
                    }
                }
            }
        }
    }
    Ok(ReferenceHits { uv, hit })
}

fn default_f() -> usize {
    2
}

/// Cross-attention shape: memory channels `c`, feature input channels
/// `c_in`, dt rank `r`, `f` offsets per reference point, and the rig/grid
/// extents the parameter shapes depend on. The state size is fixed at 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XAConfig {
    pub c: usize,
    pub c_in: usize,
    pub r: usize,
    #[serde(default = "default_f")]
    pub f: usize,
    pub num_cams: usize,
    pub z: usize,
    #[serde(default)]
    pub scan: ScanAlgo,
}

impl XAConfig {
    pub fn new(c: usize, c_in: usize, r: usize, f: usize, num_cams: usize, z: usize) -> Result<Self> {
        let cfg = XAConfig { c, c_in, r, f, num_cams, z, scan: ScanAlgo::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.c_in == 0 || self.r == 0 || self.f == 0 || self.num_cams == 0
            || self.z == 0
        {
            return Err(TensorError::arg("xa_config", "extents must be positive"));
        }
        Ok(())
    }

    /// Reference slots per query: one per (camera, pillar height).
    pub fn ref_slots(&self) -> usize {
        self.num_cams * self.z
    }
}

/// Cross-attention parameters, in forward order. `lin_m` splits each query
/// into a scalar gate track and a `c`-wide modulation track; `lin_off` maps
/// the scalar track to per-slot offsets plus shared fusion logits and starts
/// at zero (weights and biases) so the first read samples exactly at the
/// projected reference points with uniform weights. `d` starts at one.
#[derive(Clone, Debug)]
pub struct XAParams {
    pub lin_in: LinearLayer,
    pub dwconv: DepthwiseConv1d,
    pub lin_v: LinearLayer,
    pub decay: DecayParams,
    pub ln_write: LayerNorm,
    pub lin_m: LinearLayer,
    pub lin_q: LinearLayer,
    pub lin_off: LinearLayer,
    pub d: Tensor,
    pub ln_read: LayerNorm,
    pub lin_out: LinearLayer,
}

#[derive(Clone)]
pub struct XAVars {
    pub lin_in: LinearVars,
    pub dwconv: DepthwiseConv1dVars,
    pub lin_v: LinearVars,
    pub decay: DecayVars,
    pub ln_write: LayerNormVars,
    pub lin_m: LinearVars,
    pub lin_q: LinearVars,
    pub lin_off: LinearVars,
    pub d: Var,
    pub ln_read: LayerNormVars,
    pub lin_out: LinearVars,
}

impl XAParams {
    pub fn init(cfg: &XAConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let off_out = cfg.ref_slots() * cfg.f * 2 + cfg.f;
        Ok(XAParams {
            lin_in: LinearLayer::init(cfg.c, cfg.c_in, true, rng),
            dwconv: DepthwiseConv1d::init(cfg.c, 3, false, rng),
            lin_v: LinearLayer::init(cfg.r + 1, cfg.c, true, rng),
            decay: DecayParams::init(cfg.c, 1, cfg.r, rng),
            ln_write: LayerNorm::new(cfg.c),
            lin_m: LinearLayer::init(1 + cfg.c, cfg.c, true, rng),
            lin_q: LinearLayer::init(cfg.c, 1, true, rng),
            lin_off: LinearLayer::zeros(off_out, 1, true),
            d: Tensor::ones(&[cfg.c]),
            ln_read: LayerNorm::new(cfg.c),
            lin_out: LinearLayer::init(cfg.c, cfg.c, true, rng),
        })
    }

    pub fn num_params(&self) -> usize {
        self.lin_in.num_params()
            + self.dwconv.num_params()
            + self.lin_v.num_params()
            + self.decay.num_params()
            + self.ln_write.num_params()
            + self.lin_m.num_params()
            + self.lin_q.num_params()
            + self.lin_off.num_params()
            + self.d.len()
            + self.ln_read.num_params()
            + self.lin_out.num_params()
    }

    pub fn collect<'s>(&'s self, out: &mut Vec<&'s Tensor>) {
        self.lin_in.collect(out);
        self.dwconv.collect(out);
        self.lin_v.collect(out);
        self.decay.collect(out);
        self.ln_write.collect(out);
        self.lin_m.collect(out);
        self.lin_q.collect(out);
        self.lin_off.collect(out);
        out.push(&self.d);
        self.ln_read.collect(out);
        self.lin_out.collect(out);
    }

    pub fn lift(&self, tape: &Tape) -> XAVars {
        XAVars {
            lin_in: self.lin_in.lift(tape),
            dwconv: self.dwconv.lift(tape),
            lin_v: self.lin_v.lift(tape),
            decay: self.decay.lift(tape),
            ln_write: self.ln_write.lift(tape),
            lin_m: self.lin_m.lift(tape),
            lin_q: self.lin_q.lift(tape),
            lin_off: self.lin_off.lift(tape),
            d: tape.leaf(self.d.clone()),
            ln_read: self.ln_read.lift(tape),
            lin_out: self.lin_out.lift(tape),
        }
    }

    pub fn lift_from(&self, vars: &mut impl Iterator<Item = Var>) -> XAVars {
        XAVars {
            lin_in: self.lin_in.lift_from(vars),
            dwconv: self.dwconv.lift_from(vars),
            lin_v: self.lin_v.lift_from(vars),
            decay: self.decay.lift_from(vars),
            ln_write: self.ln_write.lift_from(vars),
            lin_m: self.lin_m.lift_from(vars),
            lin_q: self.lin_q.lift_from(vars),
            lin_off: self.lin_off.lift_from(vars),
            d: vars.next().expect("d leaf"),
            ln_read: self.ln_read.lift_from(vars),
            lin_out: self.lin_out.lift_from(vars),
        }
    }
}

/// Per-view state maps after the write pass, `[num_cams, C, h, w]`.
#[derive(Clone, Debug)]
pub struct XAStateMemory {
    pub s: Tensor,
}

/// Write pass: `[num_cams, C_in, h, w] -> [num_cams, C, h, w]`. Each view
/// is scanned independently (views ride the batch axis), then the gated
/// values rejoin as a residual and the channels are normalized per position.
pub fn xa_write(f: &Var, p: &XAVars, cfg: &XAConfig) -> Result<Var> {
    cfg.validate()?;
    let sh = f.shape();
    if sh.len() != 4 || sh[0] != cfg.num_cams || sh[1] != cfg.c_in {
        return Err(TensorError::shape(
            "xa_write",
            format!("features {:?} with num_cams = {}, c_in = {}", sh, cfg.num_cams, cfg.c_in),
        ));
    }
    let (nc, h, w) = (sh[0], sh[2], sh[3]);
    let l = h * w;
    let vt = p.lin_in.apply(&f.reshape(&[nc, cfg.c_in, l])?)?;
    let v = p.dwconv.apply(&vt)?.silu()?;
    let proj = p.lin_v.apply(&v)?;
    let dt = proj.slice_axis(1, 0, cfg.r)?;
    let key = proj.slice_axis(1, cfg.r, cfg.r + 1)?;
    let alpha = p.decay.alpha(&dt)?;
    let states = scan_states(&alpha, &outer_vk(&v, &key)?, cfg.scan)?;
    let s = states.reshape(&[nc, cfg.c, l])?.add(&v)?;
    let normed = p.ln_write.apply(&s.permute(&[0, 2, 1])?)?.permute(&[0, 2, 1])?;
    normed.reshape(&[nc, cfg.c, h, w])
}

/// Sample the memory at `uv + offsets` for every hit reference slot and fuse:
/// per slot a weighted sum over the `F` offsets (weights shared across slots),
/// then an unweighted mean over the query's hit slots. `s [num_cams,C,h,w]`,
/// `offsets [B,P,E,F,2]`, `w [B,P,F]` -> `[B,C,P]`; zero-hit queries get zero.
pub fn sample_memory(s: &Var, offsets: &Var, w: &Var, hits: &ReferenceHits) -> Result<Var> {
    let (p_cnt, nc, nz) = hits.dims();
    let e = nc * nz;
    let (s_sh, o_sh, w_sh) = (s.shape(), offsets.shape(), w.shape());
    if s_sh.len() != 4 || s_sh[0] != nc {
        return Err(TensorError::shape("sample_memory", format!("memory {:?}", s_sh)));
    }
    let c = s_sh[1];
    if o_sh.len() != 5 || o_sh[1] != p_cnt || o_sh[2] != e || o_sh[4] != 2 {
        return Err(TensorError::shape("sample_memory", format!("offsets {:?}", o_sh)));
    }
    let (b, fc) = (o_sh[0], o_sh[3]);
    if w_sh != [b, p_cnt, fc] {
        return Err(TensorError::shape("sample_memory", format!("weights {:?}", w_sh)));
    }

    let off_flat = offsets.reshape(&[b, p_cnt * e, fc, 2])?;
    let mut acc: Option<Var> = None;
    for cam in 0..nc {
        let mut rows = Vec::new();
        let mut seg = Vec::new();
        let mut base = Vec::new();
        for p in 0..p_cnt {
            for z in 0..nz {
                if hits.is_hit(p, cam, z) {
                    rows.push(p * e + cam * nz + z);
                    seg.push(p);
                    base.push((hits.uv.at(&[p, cam, z, 0]), hits.uv.at(&[p, cam, z, 1])));
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let m = rows.len();
        let base_t = Tensor::from_fn(&[b, m, fc, 2], |i| {
            if i[3] == 0 {
                base[i[1]].0
            } else {
                base[i[1]].1
            }
        });
        let pos = off_flat
            .gather_axis1(&rows)?
            .add(&s.tape().constant(base_t))?
            .reshape(&[b, m * fc, 2])?;
        let samples = s.slice_axis(0, cam, cam + 1)?.bilinear_sample(&pos)?;
        let per_slot = samples
            .reshape(&[b, m, fc, c])?
            .row_scale(&w.gather_axis1(&seg)?)?
            .sum_axis(2)?;
        let contrib = per_slot.segment_sum_axis1(&seg, p_cnt)?;
        acc = Some(match acc {
            Some(a) => a.add(&contrib)?,
            None => contrib,
        });
    }
    let summed = match acc {
        Some(a) => a,
        None => s.tape().constant(Tensor::zeros(&[b, p_cnt, c])),
    };
    let inv = Tensor::from_fn(&[b, p_cnt], |i| {
        let n = hits.hit_count(i[1]);
        if n == 0 {
            0.0
        } else {
            1.0 / n as f64
        }
    });
    summed.row_scale(&s.tape().constant(inv))?.permute(&[0, 2, 1])
}

/// Read pass: queries `[B,C,P]` against the memory. The scalar track drives
/// the offsets, fusion logits, query projection, and skip path; the wide
/// track gates the result before the final norm and projection.
///
/// Offset channels are slot-major: slot `cam * Z + z`, then offset index,
/// then (dx, dy).
pub fn xa_read(s: &Var, m: &Var, hits: &ReferenceHits, p: &XAVars, cfg: &XAConfig) -> Result<Var> {
    cfg.validate()?;
    let (p_cnt, nc, nz) = hits.dims();
    let m_sh = m.shape();
    if m_sh.len() != 3 || m_sh[1] != cfg.c || m_sh[2] != p_cnt {
        return Err(TensorError::shape(
            "xa_read",
            format!("queries {:?} with c = {}, P = {}", m_sh, cfg.c, p_cnt),
        ));
    }
    if nc != cfg.num_cams || nz != cfg.z {
        return Err(TensorError::shape(
            "xa_read",
            format!("hits ({}, {}, {}) with config cams {}, z {}", p_cnt, nc, nz, cfg.num_cams, cfg.z),
        ));
    }
    let b = m_sh[0];
    let (e, fc) = (cfg.ref_slots(), cfg.f);

    let qz = p.lin_m.apply(m)?;
    let qt = qz.slice_axis(1, 0, 1)?;
    let zg = qz.slice_axis(1, 1, 1 + cfg.c)?;
    let q = p.lin_q.apply(&qt.silu()?)?;

    let off_raw = p.lin_off.apply(&qt)?;
    let offsets = off_raw
        .slice_axis(1, 0, e * fc * 2)?
        .reshape(&[b, e, fc, 2, p_cnt])?
        .permute(&[0, 4, 1, 2, 3])?;
    let wfield = off_raw
        .slice_axis(1, e * fc * 2, e * fc * 2 + fc)?
        .softmax(1)?
        .permute(&[0, 2, 1])?;

    let s_b = sample_memory(s, &offsets, &wfield, hits)?;
    let skip = p.d.reshape(&[cfg.c, 1])?.matmul(&qt)?;
    let o = s_b.mul(&q)?.add(&skip)?;
    let gated = o.mul(&zg)?;
    let normed = p.ln_read.apply(&gated.permute(&[0, 2, 1])?)?.permute(&[0, 2, 1])?;
    p.lin_out.apply(&normed)
}

/// Write-then-read on one tape.
pub fn xa_block_vars(
    f: &Var,
    m: &Var,
    hits: &ReferenceHits,
    p: &XAVars,
    cfg: &XAConfig,
) -> Result<Var> {
    let s = xa_write(f, p, cfg)?;
    xa_read(&s, m, hits, p, cfg)
}

/// Value-level write pass.
pub fn xa_write_memory(f: &Tensor, params: &XAParams, cfg: &XAConfig) -> Result<XAStateMemory> {
    let tape = Tape::new();
    Ok(XAStateMemory { s: xa_write(&tape.constant(f.clone()), &params.lift(&tape), cfg)?.value() })
}

/// Value-level read pass; pure in the memory, so repeated calls are
/// bit-identical.
pub fn xa_read_queries(
    mem: &XAStateMemory,
    m: &Tensor,
    hits: &ReferenceHits,
    params: &XAParams,
    cfg: &XAConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.lift(&tape);
    Ok(xa_read(&tape.constant(mem.s.clone()), &tape.constant(m.clone()), hits, &vars, cfg)?.value())
}

/// End-to-end: project the grid through the rig, write the memory once,
/// read every query. The rig's image extents must match the feature extents
/// because hits are sampled directly in memory pixel units.
pub fn xa_block(
    f: &Tensor,
    m: &Tensor,
    grid: &BEVGrid,
    rig: &CameraRig,
    params: &XAParams,
    cfg: &XAConfig,
) -> Result<Tensor> {
    if cfg.num_cams != rig.num_cams || cfg.z != grid.z_heights.len() {
        return Err(TensorError::arg(
            "xa_block",
            format!(
                "config (cams {}, z {}) against rig cams {} and {} pillar heights",
                cfg.num_cams,
                cfg.z,
                rig.num_cams,
                grid.z_heights.len()
            ),
        ));
    }
    if f.shape() != [rig.num_cams, cfg.c_in, rig.h_img, rig.w_img] {
        return Err(TensorError::shape(
            "xa_block",
            format!("features {:?} against rig {}x{}", f.shape(), rig.h_img, rig.w_img),
        ));
    }
    if m.rank() != 3 || m.shape()[2] != grid.num_queries() {
        return Err(TensorError::shape(
            "xa_block",
            format!("queries {:?} against {} grid cells", m.shape(), grid.num_queries()),
        ));
    }
    let hits = lift_and_project(grid, rig)?;
    let mem = xa_write_memory(f, params, cfg)?;
    xa_read_queries(&mem, m, &hits, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::{scan_sequential, ScanInputs};
    use crate::tensor::with_counting;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn one_cell_grid(x: f64, y: f64, z: f64) -> BEVGrid {
        BEVGrid {
            hb: 1,
            wb: 1,
            x_min: x - 0.5,
            x_max: x + 0.5,
            y_min: y - 0.5,
            y_max: y + 0.5,
            z_heights: vec![z],
        }
    }

    // u = (0.37 x + y) / x, v = (0.61 x + z) / x, depth = x.
    fn toy_matrix() -> [f64; 16] {
        [0.37, 1.0, 0.0, 0.0, 0.61, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
    }

    fn toy_rig() -> CameraRig {
        CameraRig { num_cams: 1, lidar2img: vec![toy_matrix()], h_img: 4, w_img: 4 }
    }

    #[test]
    fn pinhole_on_axis_point_lands_on_the_principal_point() {
        // u = (2 x + y) / x, v = (2 x + z) / x: the x axis maps to (2, 2).
        let m = [2.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let rig = CameraRig { num_cams: 1, lidar2img: vec![m], h_img: 4, w_img: 4 };
        let hits = lift_and_project(&one_cell_grid(10.0, 0.0, 0.0), &rig).unwrap();
        assert!(hits.is_hit(0, 0, 0));
        assert_eq!(hits.uv.at(&[0, 0, 0, 0]), 2.0);
        assert_eq!(hits.uv.at(&[0, 0, 0, 1]), 2.0);
    }

    #[test]
    fn negative_depth_and_out_of_bounds_points_miss() {
        let rig = toy_rig();
        let behind = lift_and_project(&one_cell_grid(-1.0, 0.0, 0.0), &rig).unwrap();
        assert!(!behind.is_hit(0, 0, 0));
        assert_eq!(behind.hit_count(0), 0);
        // u = (0.37 * 10 + 37) / 10 = 4.07 >= w.
        let wide = lift_and_project(&one_cell_grid(10.0, 37.0, 0.0), &rig).unwrap();
        assert!(!wide.is_hit(0, 0, 0));
        assert_eq!(wide.uv.at(&[0, 0, 0, 0]), 0.0);
    }

    #[test]
    fn hit_predicate_matches_direct_recheck_on_random_rigs() {
        for seed in 0..5u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(900 + seed);
            let mut mats = Vec::new();
            for _ in 0..2 {
                let mut m = [0.0; 16];
                for v in m.iter_mut() {
                    *v = Tensor::rand_uniform(&[1], -2.0, 2.0, &mut rng).at(&[0]);
                }
                mats.push(m);
            }
            let rig = CameraRig { num_cams: 2, lidar2img: mats, h_img: 5, w_img: 6 };
            let grid = BEVGrid {
                hb: 3,
                wb: 2,
                x_min: -4.0,
                x_max: 4.0,
                y_min: -3.0,
                y_max: 3.0,
                z_heights: vec![-1.0, 0.5],
            };
            let hits = lift_and_project(&grid, &rig).unwrap();
            for p in 0..grid.num_queries() {
                let (x, y) = grid.cell_center(p);
                for cam in 0..2 {
                    let m = &rig.lidar2img[cam];
                    for (zi, &z) in grid.z_heights.iter().enumerate() {
                        let hom = [x, y, z, 1.0];
                        let pr: Vec<f64> = (0..3)
                            .map(|r| (0..4).map(|c| m[r * 4 + c] * hom[c]).sum())
                            .collect();
                        let expect = pr[2] > DEPTH_EPS && {
                            let (u, v) = (pr[0] / pr[2], pr[1] / pr[2]);
                            u >= 0.0 && u < 6.0 && v >= 0.0 && v < 5.0
                        };
                        assert_eq!(hits.is_hit(p, cam, zi), expect);
                        if expect {
                            assert_eq!(hits.uv.at(&[p, cam, zi, 0]), pr[0] / pr[2]);
                            assert_eq!(hits.uv.at(&[p, cam, zi, 1]), pr[1] / pr[2]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn write_matches_the_scan_oracle_stage_by_stage() {
        let cfg = XAConfig::new(4, 3, 2, 2, 2, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(201);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let f = Tensor::rand_uniform(&[2, 3, 2, 3], -1.0, 1.0, &mut rng);
        let got = xa_write_memory(&f, &params, &cfg).unwrap().s;

        let tape = Tape::new();
        let vars = params.lift(&tape);
        let fv = tape.constant(f.clone());
        let vt = vars.lin_in.apply(&fv.reshape(&[2, 3, 6]).unwrap()).unwrap();
        let v = vars.dwconv.apply(&vt).unwrap().silu().unwrap();
        let proj = vars.lin_v.apply(&v).unwrap();
        let dt = proj.slice_axis(1, 0, 2).unwrap();
        let key = proj.slice_axis(1, 2, 3).unwrap();
        let alpha = vars.decay.alpha(&dt).unwrap();
        let scanned = scan_sequential(
            &ScanInputs::new(v.value(), key.value(), alpha.value()).unwrap(),
        )
        .unwrap();
        let s = tape.constant(scanned.s.reshaped(&[2, 4, 6]).unwrap()).add(&v).unwrap();
        let want = vars
            .ln_write
            .apply(&s.permute(&[0, 2, 1]).unwrap())
            .unwrap()
            .permute(&[0, 2, 1])
            .unwrap()
            .reshape(&[2, 4, 2, 3])
            .unwrap()
            .value();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn single_position_write_state_is_the_outer_product() {
        let cfg = XAConfig::new(3, 2, 1, 2, 1, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(203);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let f = Tensor::rand_uniform(&[1, 2, 1, 1], -1.0, 1.0, &mut rng);
        let got = xa_write_memory(&f, &params, &cfg).unwrap().s;

        let tape = Tape::new();
        let vars = params.lift(&tape);
        let vt = vars.lin_in.apply(&tape.constant(f.reshaped(&[1, 2, 1]).unwrap())).unwrap();
        let v = vars.dwconv.apply(&vt).unwrap().silu().unwrap();
        let proj = vars.lin_v.apply(&v).unwrap();
        let k = proj.slice_axis(1, 1, 2).unwrap().value().at(&[0, 0, 0]);
        // One step from a zero state: S_1 = v_1 k_1, whatever the gate.
        let state = Tensor::from_fn(&[1, 3, 1], |i| v.value().at(&[0, i[1], 0]) * k);
        let want = vars
            .ln_write
            .apply(&tape.constant(state).add(&v).unwrap().permute(&[0, 2, 1]).unwrap())
            .unwrap()
            .permute(&[0, 2, 1])
            .unwrap()
            .value();
        assert_eq!(got.data(), want.reshaped(&[1, 3, 1, 1]).unwrap().data());
    }

    #[test]
    fn zero_features_write_finite_states() {
        let cfg = XAConfig::new(4, 3, 2, 2, 2, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(205);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let mem = xa_write_memory(&Tensor::zeros(&[2, 3, 2, 2]), &params, &cfg).unwrap();
        assert!(mem.s.all_finite());
    }

    #[test]
    fn identity_read_at_init_returns_the_hit_pixel_state() {
        // One integer-pixel hit per query, zero offsets, uniform weights over
        // two offsets: the fused sample must equal the pixel state bitwise.
        let mut rng = ChaCha12Rng::seed_from_u64(207);
        let s_val = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut uv = Tensor::zeros(&[2, 1, 1, 2]);
        uv.set(&[0, 0, 0, 0], 2.0);
        uv.set(&[0, 0, 0, 1], 1.0);
        uv.set(&[1, 0, 0, 0], 0.0);
        uv.set(&[1, 0, 0, 1], 3.0);
        let hits = ReferenceHits { uv, hit: vec![true, true] };

        let tape = Tape::new();
        let s = tape.constant(s_val.clone());
        let offsets = tape.constant(Tensor::zeros(&[1, 2, 1, 2, 2]));
        let w = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
        let s_b = sample_memory(&s, &offsets, &w, &hits).unwrap().value();
        for c in 0..3 {
            assert_eq!(s_b.at(&[0, c, 0]), s_val.at(&[0, c, 1, 2]));
            assert_eq!(s_b.at(&[0, c, 1]), s_val.at(&[0, c, 3, 0]));
        }
    }

    #[test]
    fn sample_memory_matches_a_nested_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(209);
        let (b, p_cnt, fc, c) = (2, 2, 2, 3);
        let s_val = Tensor::rand_uniform(&[1, c, 4, 4], -1.0, 1.0, &mut rng);
        let mut uv = Tensor::zeros(&[p_cnt, 1, 1, 2]);
        uv.set(&[0, 0, 0, 0], 1.3);
        uv.set(&[0, 0, 0, 1], 2.6);
        uv.set(&[1, 0, 0, 0], 3.4);
        uv.set(&[1, 0, 0, 1], 0.2);
        let hits = ReferenceHits { uv: uv.clone(), hit: vec![true, true] };
        let off_val = Tensor::rand_uniform(&[b, p_cnt, 1, fc, 2], -1.5, 1.5, &mut rng);
        let w_val = Tensor::rand_uniform(&[b, p_cnt, fc], 0.0, 1.0, &mut rng);

        let tape = Tape::new();
        let got = sample_memory(
            &tape.constant(s_val.clone()),
            &tape.constant(off_val.clone()),
            &tape.constant(w_val.clone()),
            &hits,
        )
        .unwrap()
        .value();

        let sample = |cc: usize, px: f64, py: f64| -> f64 {
            let (x0, y0) = (px.floor() as isize, py.floor() as isize);
            let (fx, fy) = (px - px.floor(), py - py.floor());
            let mut acc = 0.0;
            for (dx, dy, wgt) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let (xx, yy) = (x0 + dx, y0 + dy);
                if xx >= 0 && xx < 4 && yy >= 0 && yy < 4 {
                    acc += wgt * s_val.at(&[0, cc, yy as usize, xx as usize]);
                }
            }
            acc
        };
        for ib in 0..b {
            for p in 0..p_cnt {
                for cc in 0..c {
                    let mut want = 0.0;
                    for f in 0..fc {
                        let px = uv.at(&[p, 0, 0, 0]) + off_val.at(&[ib, p, 0, f, 0]);
                        let py = uv.at(&[p, 0, 0, 1]) + off_val.at(&[ib, p, 0, f, 1]);
                        want += w_val.at(&[ib, p, f]) * sample(cc, px, py);
                    }
                    let diff = (got.at(&[ib, cc, p]) - want).abs();
                    assert!(diff <= 1e-12, "query {} channel {}: {}", p, cc, diff);
                }
            }
        }
    }

    #[test]
    fn empty_hit_read_reduces_to_the_skip_path() {
        let cfg = XAConfig::new(4, 3, 2, 2, 1, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(211);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let mem = XAStateMemory { s: Tensor::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng) };
        let m = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
        let hits =
            ReferenceHits { uv: Tensor::zeros(&[3, 1, 2, 2]), hit: vec![false; 6] };
        let got = xa_read_queries(&mem, &m, &hits, &params, &cfg).unwrap();

        let tape = Tape::new();
        let vars = params.lift(&tape);
        let qz = vars.lin_m.apply(&tape.constant(m.clone())).unwrap();
        let qt = qz.slice_axis(1, 0, 1).unwrap();
        let zg = qz.slice_axis(1, 1, 5).unwrap();
        let skip = vars.d.reshape(&[4, 1]).unwrap().matmul(&qt).unwrap();
        let gated = skip.mul(&zg).unwrap();
        let want = vars
            .lin_out
            .apply(
                &vars
                    .ln_read
                    .apply(&gated.permute(&[0, 2, 1]).unwrap())
                    .unwrap()
                    .permute(&[0, 2, 1])
                    .unwrap(),
            )
            .unwrap()
            .value();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn repeated_reads_of_one_memory_are_bit_identical() {
        let cfg = XAConfig::new(4, 3, 2, 2, 1, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(213);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let grid = BEVGrid {
            hb: 2,
            wb: 2,
            x_min: 0.0,
            x_max: 4.0,
            y_min: 0.0,
            y_max: 4.0,
            z_heights: vec![0.8],
        };
        let hits = lift_and_project(&grid, &toy_rig()).unwrap();
        assert!(hits.total_hits() > 0);
        let f = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let m = Tensor::rand_uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
        let mem = xa_write_memory(&f, &params, &cfg).unwrap();
        let o1 = xa_read_queries(&mem, &m, &hits, &params, &cfg).unwrap();
        let o2 = xa_read_queries(&mem, &m, &hits, &params, &cfg).unwrap();
        assert_eq!(o1.data(), o2.data());
    }

    #[test]
    fn memoryless_write_ignores_unsampled_distant_pixels() {
        // a_log = 40 underflows every gate to exactly zero, so states carry
        // no history; with the sole query sampling around (1.3, 0.6) and the
        // value conv reaching one flat position either way, the far corner
        // pixel (3, 3) can touch nothing the query reads.
        let cfg = XAConfig::new(4, 3, 2, 2, 1, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(217);
        let mut params = XAParams::init(&cfg, &mut rng).unwrap();
        params.decay.a_log = Tensor::full(&[4, 1], 40.0);
        params.decay.dt_proj = LinearLayer::zeros(4, 2, true);

        let mut uv = Tensor::zeros(&[1, 1, 1, 2]);
        uv.set(&[0, 0, 0, 0], 1.3);
        uv.set(&[0, 0, 0, 1], 0.6);
        let hits = ReferenceHits { uv, hit: vec![true] };
        let m = Tensor::rand_uniform(&[1, 4, 1], -1.0, 1.0, &mut rng);
        let f = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);

        let read = |feat: &Tensor| {
            let mem = xa_write_memory(feat, &params, &cfg).unwrap();
            xa_read_queries(&mem, &m, &hits, &params, &cfg).unwrap()
        };
        let base = read(&f);
        let mut far = f.clone();
        far.set(&[0, 1, 3, 3], 7.0);
        assert_eq!(base.data(), read(&far).data());
        let mut near = f.clone();
        near.set(&[0, 1, 0, 1], 7.0);
        assert_ne!(base.data(), read(&near).data());
    }

    #[test]
    fn instrumented_sample_count_is_hits_times_offsets() {
        let cfg = XAConfig::new(4, 3, 2, 3, 2, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(219);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let rig = CameraRig {
            num_cams: 2,
            lidar2img: vec![toy_matrix(), toy_matrix()],
            h_img: 4,
            w_img: 4,
        };
        let grid = BEVGrid {
            hb: 2,
            wb: 3,
            x_min: 0.0,
            x_max: 6.0,
            y_min: -2.0,
            y_max: 2.0,
            z_heights: vec![0.3, 1.1],
        };
        let hits = lift_and_project(&grid, &rig).unwrap();
        let per_query: usize = (0..grid.num_queries()).map(|p| hits.hit_count(p) * cfg.f).sum();
        assert!(per_query > 0);

        let f = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let m = Tensor::rand_uniform(&[1, 4, 6], -1.0, 1.0, &mut rng);
        let mem = xa_write_memory(&f, &params, &cfg).unwrap();
        let (_, counts) =
            with_counting(|| xa_read_queries(&mem, &m, &hits, &params, &cfg).unwrap());
        assert_eq!(counts.bilinear_samples, per_query as u64);
    }

    #[test]
    fn zero_hit_queries_stay_finite_next_to_hit_queries() {
        let cfg = XAConfig::new(4, 3, 2, 2, 1, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(223);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let mut uv = Tensor::zeros(&[2, 1, 1, 2]);
        uv.set(&[0, 0, 0, 0], 2.4);
        uv.set(&[0, 0, 0, 1], 1.7);
        let hits = ReferenceHits { uv, hit: vec![true, false] };
        let mem = XAStateMemory { s: Tensor::rand_uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng) };
        let m = Tensor::rand_uniform(&[1, 4, 2], -1.0, 1.0, &mut rng);
        let out = xa_read_queries(&mem, &m, &hits, &params, &cfg).unwrap();
        assert_eq!(out.shape(), &[1, 4, 2]);
        assert!(out.all_finite());
    }

    #[test]
    fn block_validates_extent_agreement() {
        let cfg = XAConfig::new(4, 3, 2, 2, 1, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(227);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let grid = one_cell_grid(2.0, 1.0, 0.5);
        let f_bad = Tensor::zeros(&[1, 3, 5, 4]);
        let m = Tensor::zeros(&[1, 4, 1]);
        assert!(xa_block(&f_bad, &m, &grid, &toy_rig(), &params, &cfg).is_err());
        let f = Tensor::zeros(&[1, 3, 4, 4]);
        let m_bad = Tensor::zeros(&[1, 4, 3]);
        assert!(xa_block(&f, &m_bad, &grid, &toy_rig(), &params, &cfg).is_err());
        assert!(xa_block(&f, &m, &grid, &toy_rig(), &params, &cfg).is_ok());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = XAConfig::new(6, 4, 3, 2, 2, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(229);
        let params = XAParams::init(&cfg, &mut rng).unwrap();
        let mut ts = Vec::new();
        params.collect(&mut ts);
        assert_eq!(params.num_params(), ts.iter().map(|t| t.len()).sum::<usize>());
        // lin_off covers every reference slot: (E * F * 2 + F) weights + biases.
        assert_eq!(params.lin_off.weight.shape(), &[2 * 4 * 2 * 2 + 2, 1]);
    }
}
