//! Runnable verification suites behind the CLI: configuration schema,
//! oracle checks, gradient checks, the forward shape trace, the cost table,
//! and report assembly.
//!
//! Every suite is deterministic given its seed: checks derive their RNG from
//! `seed` plus a fixed per-check offset, reports carry no timestamps, and
//! check lists are sorted by name so parallel execution cannot reorder them.
//! `DEFORMBA_THREADS` caps the worker count (default 1).

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    deformba_block_forward, BackboneConfig, BackboneParams, BlockConfig, BlockParams, ConvType,
};
use crate::casf::{casf_read, fuse, predict_offsets_weights, OffsetNet};
use crate::complexity::{deformba_xa_cost, table5_report, Table5Report, WorkloadShape};
use crate::scan::{
    decay_from_dt, masked_attention_reference, readout_per_step, scan_chunked, scan_parallel,
    scan_sequential, DecayParams, ScanInputs,
};
use crate::tensor::{
    read_dtsr, vjp_check, with_counting, LinearLayer, ScanAlgo, Tape, VjpCheckConfig,
};
use crate::xa::{
    lift_and_project, xa_block_vars, xa_read_queries, xa_write_memory, BEVGrid, CameraRig,
    XAConfig, XAParams, DEPTH_EPS,
};
use crate::{Tensor, VERSION};

/// Harness failures split by exit code: configuration and usage problems
/// exit 2, runtime check failures exit 1.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Check(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Check(_) => 1,
        }
    }
}

impl From<crate::TensorError> for HarnessError {
    fn from(e: crate::TensorError) -> Self {
        HarnessError::Check(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Gradcheck,
    Forward,
    Flops,
    Bench,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Gradcheck => "gradcheck",
            Command::Forward => "forward",
            Command::Flops => "flops",
            Command::Bench => "bench",
        }
    }
}

/// Per-suite tolerance overrides; the defaults are the pinned acceptance
/// values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub scan_equivalence: f64,
    pub attention_oracle: f64,
    pub sampling_oracle: f64,
    pub grad_primitive: f64,
    pub grad_block: f64,
    pub grad_xa: f64,
    pub ratio: f64,
    pub params: f64,
    pub macs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            scan_equivalence: 1e-10,
            attention_oracle: 1e-12,
            sampling_oracle: 1e-12,
            grad_primitive: 1e-5,
            grad_block: 1e-5,
            grad_xa: 1e-4,
            ratio: 0.15,
            params: 0.05,
            macs: 0.05,
        }
    }
}

/// One JSON config drives every subcommand; unknown keys are rejected. The
/// optional `command` pins the config to one subcommand and must then match
/// the one invoked.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub seed: u64,
    pub block: Option<BlockConfig>,
    pub backbone: Option<BackboneConfig>,
    pub xa: Option<XAConfig>,
    pub grid: Option<BEVGrid>,
    pub rig: Option<CameraRig>,
    pub tolerances: Tolerances,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let chk = |r: crate::tensor::Result<()>| r.map_err(|e| HarnessError::Config(e.to_string()));
        if let Some(b) = &self.block {
            chk(b.validate())?;
        }
        if let Some(b) = &self.backbone {
            chk(b.validate())?;
        }
        if let Some(x) = &self.xa {
            chk(x.validate())?;
        }
        if let Some(g) = &self.grid {
            chk(g.validate())?;
        }
        if let Some(r) = &self.rig {
            chk(r.validate())?;
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, HarnessError> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {}", path.display(), e)))?;
    parse_config(&text)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: String,
    pub measured: f64,
    /// None marks an informational entry with no pass threshold.
    pub tolerance: Option<f64>,
}

impl Check {
    /// Passes when `measured <= tolerance` (and is finite).
    pub fn le(name: &str, measured: f64, tolerance: f64) -> Check {
        let ok = measured.is_finite() && measured <= tolerance;
        Check {
            name: name.to_string(),
            status: if ok { "pass" } else { "fail" }.to_string(),
            measured,
            tolerance: Some(tolerance),
        }
    }

    /// Passes when `measured >= bound` (and is finite); `tolerance` records
    /// the bound.
    pub fn ge(name: &str, measured: f64, bound: f64) -> Check {
        let ok = measured.is_finite() && measured >= bound;
        Check {
            name: name.to_string(),
            status: if ok { "pass" } else { "fail" }.to_string(),
            measured,
            tolerance: Some(bound),
        }
    }

    pub fn info(name: &str, measured: f64) -> Check {
        Check { name: name.to_string(), status: "pass".to_string(), measured, tolerance: None }
    }

    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub version: String,
    pub seed: u64,
    pub status: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn assemble(suite: &str, seed: u64, mut checks: Vec<Check>) -> Report {
        checks.sort_by(|a, b| a.name.cmp(&b.name));
        let all = checks.iter().all(Check::passed);
        Report {
            suite: suite.to_string(),
            version: VERSION.to_string(),
            seed,
            status: if all { "pass" } else { "fail" }.to_string(),
            checks,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == "pass"
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One human line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tol = match c.tolerance {
                Some(t) => format!("{:e}", t),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{} {} measured={:e} tolerance={}\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                tol
            ));
        }
        out.push_str(&format!("{}: {}\n", self.suite, self.status));
        out
    }
}

fn parse_thread_cap(raw: Option<&str>) -> usize {
    raw.and_then(|s| s.trim().parse::<usize>().ok()).filter(|n| *n >= 1).unwrap_or(1)
}

/// Worker cap from `DEFORMBA_THREADS`; unset, unparsable, or zero means 1.
pub fn thread_cap() -> usize {
    parse_thread_cap(std::env::var("DEFORMBA_THREADS").ok().as_deref())
}

type Job = Box<dyn FnOnce() -> Check + Send>;

/// Run independent checks on up to `cap` workers. Results keep submission
/// order regardless of completion order; op counters are thread-local, so
/// instrumented checks stay isolated.
fn run_jobs(jobs: Vec<Job>, cap: usize) -> Vec<Check> {
    if cap <= 1 || jobs.len() <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let n = jobs.len();
    let queue: Mutex<VecDeque<(usize, Job)>> = Mutex::new(jobs.into_iter().enumerate().collect());
    let done: Mutex<Vec<(usize, Check)>> = Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|s| {
        for _ in 0..cap.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().unwrap().pop_front();
                match next {
                    Some((i, job)) => {
                        let check = job();
                        done.lock().unwrap().push((i, check));
                    }
                    None => break,
                }
            });
        }
    });
    let mut out = done.into_inner().unwrap();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, c)| c).collect()
}

/// Error sentinel for a check whose setup failed: forces a fail entry.
const SETUP_FAILED: f64 = f64::MAX;

macro_rules! try_or_fail {
    ($name:expr, $tol:expr, $e:expr) => {
        match $e {
            Ok(x) => x,
            Err(_) => return Check::le($name, SETUP_FAILED, $tol),
        }
    };
}

fn check_scan_equivalence(seed: u64, tol: f64) -> Check {
    let name = "scan.equivalence";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA1));
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let b = rng.gen_range(1..=4usize);
        let c = rng.gen_range(1..=16usize);
        let n = rng.gen_range(1..=4usize);
        let l = rng.gen_range(1..=256usize);
        let v = Tensor::rand_uniform(&[b, c, l], -1.0, 1.0, &mut rng);
        let k = Tensor::rand_uniform(&[b, n, l], -1.0, 1.0, &mut rng);
        let a = Tensor::rand_uniform(&[b, c, n, l], -1.0, 1.0, &mut rng);
        let inputs = try_or_fail!(name, tol, ScanInputs::new(v, k, a));
        let seq = try_or_fail!(name, tol, scan_sequential(&inputs)).s;
        let par = try_or_fail!(name, tol, scan_parallel(&inputs)).s;
        worst = worst.max(seq.max_abs_diff(&par));
        for q in [1, 4, 8, 16, l] {
            let ch = try_or_fail!(name, tol, scan_chunked(&inputs, q)).s;
            worst = worst.max(seq.max_abs_diff(&ch));
        }
    }
    Check::le(name, worst, tol)
}

fn check_linear_attention(seed: u64, tol: f64) -> Check {
    let name = "scan.linear_attention";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA2));
    let (b, c, n, l) = (2, 3, 2, 64);
    let v = Tensor::rand_uniform(&[b, c, l], -1.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(&[b, n, l], -1.0, 1.0, &mut rng);
    let q = Tensor::rand_uniform(&[b, n, l], -1.0, 1.0, &mut rng);
    let ones = Tensor::ones(&[b, c, n, l]);
    let inputs = try_or_fail!(name, tol, ScanInputs::new(v.clone(), k.clone(), ones));
    let states = try_or_fail!(name, tol, scan_sequential(&inputs));
    let per_step = try_or_fail!(name, tol, readout_per_step(&states, &q));
    let masked = masked_attention_reference(&v, &k, &q);
    Check::le(name, per_step.max_abs_diff(&masked), tol)
}

fn check_decay_range(seed: u64) -> Check {
    let name = "decay.range";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA3));
    let (c, n, r) = (4, 2, 3);
    let params = DecayParams::init(c, n, r, &mut rng);
    // 5 * 4 * 2 * 2500 = 100_000 gate samples.
    let dt = Tensor::rand_uniform(&[5, r, 2500], -15.0, 15.0, &mut rng);
    let alpha = try_or_fail!(name, 0.0, decay_from_dt(&dt, &params));
    let violations = alpha.data().iter().filter(|a| !(**a > 0.0 && **a < 1.0)).count();
    Check::le(name, violations as f64, 0.0)
}

fn check_casf_identity_init(seed: u64) -> Check {
    let name = "casf.identity_init";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA4));
    let mut worst: f64 = 0.0;
    for (h, w) in [(2usize, 3usize), (5, 5), (8, 8)] {
        let net = OffsetNet::init(8, 4, &mut rng);
        let s2d = Tensor::rand_uniform(&[2, 8, h, w], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let out = try_or_fail!(name, 0.0, casf_read(&tape.constant(s2d.clone()), &net.lift(&tape)));
        worst = worst.max(out.value().max_abs_diff(&s2d));
    }
    Check::le(name, worst, 0.0)
}

fn loop_bilinear(map: &Tensor, x: f64, y: f64, c: usize) -> f64 {
    let (h, w) = (map.shape()[2] as isize, map.shape()[3] as isize);
    let (x0, y0) = (x.floor() as isize, y.floor() as isize);
    let (fx, fy) = (x - x.floor(), y - y.floor());
    let mut acc = 0.0;
    for (dx, dy, wgt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (xx, yy) = (x0 + dx, y0 + dy);
        if xx >= 0 && xx < w && yy >= 0 && yy < h {
            acc += wgt * map.at(&[0, c, yy as usize, xx as usize]);
        }
    }
    acc
}

fn check_bilinear_oracle(seed: u64, tol: f64) -> Check {
    let name = "casf.bilinear_oracle";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA5));
    let map = Tensor::rand_uniform(&[1, 3, 5, 4], -1.0, 1.0, &mut rng);
    let pos = Tensor::rand_uniform(&[1, 9, 2], -1.0, 5.0, &mut rng);
    let tape = Tape::new();
    let out = try_or_fail!(
        name,
        tol,
        tape.constant(map.clone()).bilinear_sample(&tape.constant(pos.clone()))
    )
    .value();
    let mut worst: f64 = 0.0;
    for m in 0..9 {
        let (x, y) = (pos.at(&[0, m, 0]), pos.at(&[0, m, 1]));
        for c in 0..3 {
            worst = worst.max((out.at(&[0, m, c]) - loop_bilinear(&map, x, y, c)).abs());
        }
    }
    Check::le(name, worst, tol)
}

fn check_fuse_oracle(seed: u64, tol: f64) -> Check {
    let name = "casf.fuse_oracle";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA6));
    let samples = Tensor::rand_uniform(&[2, 3, 4, 4, 3], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(&[2, 3, 4, 4], 0.0, 1.0, &mut rng);
    let tape = Tape::new();
    let out =
        try_or_fail!(name, tol, fuse(&tape.constant(samples.clone()), &tape.constant(w.clone())))
            .value();
    let mut worst: f64 = 0.0;
    for b in 0..2 {
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..4 {
                    let want: f64 = (0..4)
                        .map(|g| w.at(&[b, i, j, g]) * samples.at(&[b, i, j, g, c]))
                        .sum();
                    worst = worst.max((out.at(&[b, c, i, j]) - want).abs());
                }
            }
        }
    }
    Check::le(name, worst, tol)
}

fn check_sampling_linearity(seed: u64, tol: f64) -> Check {
    let name = "casf.sampling_linearity";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA7));
    let s1 = Tensor::rand_uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
    let s2 = Tensor::rand_uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
    let pos = Tensor::rand_uniform(&[1, 11, 2], -1.0, 6.0, &mut rng);
    let (a, b) = (0.7, -1.3);
    let mixed = Tensor::from_fn(s1.shape(), |i| a * s1.at(i) + b * s2.at(i));
    let tape = Tape::new();
    let sample = |m: &Tensor| -> crate::tensor::Result<Tensor> {
        Ok(tape.constant(m.clone()).bilinear_sample(&tape.constant(pos.clone()))?.value())
    };
    let lhs = try_or_fail!(name, tol, sample(&mixed));
    let r1 = try_or_fail!(name, tol, sample(&s1));
    let r2 = try_or_fail!(name, tol, sample(&s2));
    let rhs = Tensor::from_fn(lhs.shape(), |i| a * r1.at(i) + b * r2.at(i));
    Check::le(name, lhs.max_abs_diff(&rhs), tol)
}

fn check_weight_simplex(seed: u64, tol: f64) -> Check {
    let name = "casf.weight_simplex";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA8));
    // Non-dyadic group count and a randomized weight head: the simplex must
    // hold away from the exact-uniform init case.
    let mut net = OffsetNet::init(8, 3, &mut rng);
    net.head_weights = LinearLayer::init(3, 8, true, &mut rng);
    let s2d = Tensor::rand_uniform(&[2, 8, 5, 5], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let (_, w) =
        try_or_fail!(name, tol, predict_offsets_weights(&tape.constant(s2d), &net.lift(&tape)));
    let w = w.value();
    let mut worst: f64 = 0.0;
    for b in 0..2 {
        for i in 0..5 {
            for j in 0..5 {
                let mut sum = 0.0;
                for g in 0..3 {
                    let wv = w.at(&[b, i, j, g]);
                    worst = worst.max((-wv).max(0.0));
                    sum += wv;
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    Check::le(name, worst, tol)
}

/// Deterministic rig/grid fixtures shared by the XA verify checks.
fn random_rig(rng: &mut ChaCha12Rng) -> (CameraRig, BEVGrid) {
    let num_cams = rng.gen_range(1..=3usize);
    let mut mats = Vec::new();
    for _ in 0..num_cams {
        let t = Tensor::rand_uniform(&[16], -2.0, 2.0, rng);
        let mut m = [0.0; 16];
        m.copy_from_slice(t.data());
        mats.push(m);
    }
    let rig = CameraRig {
        num_cams,
        lidar2img: mats,
        h_img: rng.gen_range(3..=6usize),
        w_img: rng.gen_range(3..=6usize),
    };
    let z_count = rng.gen_range(1..=3usize);
    let mut z_heights = Vec::new();
    let mut z = -1.5 + rng.gen_range(0.0..0.5);
    for _ in 0..z_count {
        z_heights.push(z);
        z += 0.4 + rng.gen_range(0.0..0.8);
    }
    let grid = BEVGrid {
        hb: rng.gen_range(2..=3usize),
        wb: rng.gen_range(2..=3usize),
        x_min: -4.0,
        x_max: 4.0,
        y_min: -3.0,
        y_max: 3.0,
        z_heights,
    };
    (rig, grid)
}

fn check_hit_soundness(seed: u64) -> Check {
    let name = "xa.hit_soundness";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA9));
    let mut violations = 0usize;
    for _ in 0..20 {
        let (rig, grid) = random_rig(&mut rng);
        let hits = try_or_fail!(name, 0.0, lift_and_project(&grid, &rig));
        for p in 0..grid.num_queries() {
            let (x, y) = grid.cell_center(p);
            for cam in 0..rig.num_cams {
                let m = &rig.lidar2img[cam];
                for (zi, &z) in grid.z_heights.iter().enumerate() {
                    let hom = [x, y, z, 1.0];
                    let pr: Vec<f64> = (0..3)
                        .map(|row| (0..4).map(|col| m[row * 4 + col] * hom[col]).sum())
                        .collect();
                    let expect = pr[2] > DEPTH_EPS && {
                        let (u, v) = (pr[0] / pr[2], pr[1] / pr[2]);
                        u >= 0.0 && u < rig.w_img as f64 && v >= 0.0 && v < rig.h_img as f64
                    };
                    if hits.is_hit(p, cam, zi) != expect {
                        violations += 1;
                    }
                    let (su, sv) = (hits.uv.at(&[p, cam, zi, 0]), hits.uv.at(&[p, cam, zi, 1]));
                    if expect {
                        if su != pr[0] / pr[2] || sv != pr[1] / pr[2] {
                            violations += 1;
                        }
                    } else if su != 0.0 || sv != 0.0 {
                        violations += 1;
                    }
                }
            }
        }
    }
    Check::le(name, violations as f64, 0.0)
}

fn check_sample_accounting(seed: u64) -> Check {
    let name = "xa.sample_accounting";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xA9));
    let mut violations = 0u64;
    for _ in 0..20 {
        let (rig, grid) = random_rig(&mut rng);
        let cfg = XAConfig {
            c: 4,
            c_in: 3,
            r: 2,
            f: 2,
            num_cams: rig.num_cams,
            z: grid.z_heights.len(),
            scan: ScanAlgo::Sequential,
        };
        let params = try_or_fail!(name, 0.0, XAParams::init(&cfg, &mut rng));
        let hits = try_or_fail!(name, 0.0, lift_and_project(&grid, &rig));
        let f =
            Tensor::rand_uniform(&[rig.num_cams, 3, rig.h_img, rig.w_img], -1.0, 1.0, &mut rng);
        let m = Tensor::rand_uniform(&[1, 4, grid.num_queries()], -1.0, 1.0, &mut rng);
        let mem = try_or_fail!(name, 0.0, xa_write_memory(&f, &params, &cfg));
        let (out, counters) =
            with_counting(|| xa_read_queries(&mem, &m, &hits, &params, &cfg));
        let out = try_or_fail!(name, 0.0, out);
        if !out.all_finite() {
            violations += 1;
        }
        let expect: u64 =
            (0..grid.num_queries()).map(|p| (hits.hit_count(p) * cfg.f) as u64).sum();
        violations += counters.bilinear_samples.abs_diff(expect);
    }
    Check::le(name, violations as f64, 0.0)
}

fn check_zero_hit_finite(seed: u64) -> Check {
    let name = "xa.zero_hit_finite";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xAA));
    // Depth row is -x: every pillar point of this grid sits behind the camera.
    let mat = [
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];
    let rig = CameraRig { num_cams: 1, lidar2img: vec![mat], h_img: 4, w_img: 4 };
    let grid = BEVGrid {
        hb: 2,
        wb: 2,
        x_min: 1.0,
        x_max: 5.0,
        y_min: -2.0,
        y_max: 2.0,
        z_heights: vec![0.0, 1.0],
    };
    let hits = try_or_fail!(name, 0.0, lift_and_project(&grid, &rig));
    let mut violations = (hits.total_hits() != 0) as u64;
    let cfg = XAConfig {
        c: 4,
        c_in: 3,
        r: 2,
        f: 2,
        num_cams: 1,
        z: 2,
        scan: ScanAlgo::Sequential,
    };
    let params = try_or_fail!(name, 0.0, XAParams::init(&cfg, &mut rng));
    let f = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let m = Tensor::rand_uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
    let mem = try_or_fail!(name, 0.0, xa_write_memory(&f, &params, &cfg));
    let out = try_or_fail!(name, 0.0, xa_read_queries(&mem, &m, &hits, &params, &cfg));
    if !out.all_finite() {
        violations += 1;
    }
    Check::le(name, violations as f64, 0.0)
}

/// Gradient of one output entry against the full input, through a block.
fn block_input_gradient(
    cfg: &BlockConfig,
    params: &BlockParams,
    x: &Tensor,
    pick_idx: &[usize],
) -> crate::tensor::Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = deformba_block_forward(&xv, &params.lift(&tape), cfg)?;
    let mut pick = Tensor::zeros(&out.shape());
    pick.set(pick_idx, 1.0);
    let root = out.weighted_sum(&pick)?;
    let grads = tape.backward(&root)?;
    Ok(grads.wrt(&xv))
}

fn check_reachability_forward(seed: u64) -> Check {
    let name = "block.reachability_forward";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xAB));
    let mut cfg = try_or_fail!(name, 0.0, BlockConfig::new(4, 1, 2, 2));
    cfg.conv_type = ConvType::None;
    let mut params = try_or_fail!(name, 0.0, BlockParams::init(&cfg, &mut rng));
    if let Some(b) = &mut params.offset_net.head_offsets.bias {
        b.set(&[0], 2.0);
    }
    let x = Tensor::rand_uniform(&[1, 4, 2, 4], -1.0, 1.0, &mut rng);
    // Output position flat 4; flat 6 sits two ahead, where group 0 samples.
    let g = try_or_fail!(name, 0.0, block_input_gradient(&cfg, &params, &x, &[0, 0, 1, 0]));
    let ahead = (0..4).map(|c| g.at(&[0, c, 1, 2]).abs()).fold(0.0, f64::max);
    Check::ge(name, ahead, 1e-8)
}

fn check_locality_causal(seed: u64) -> Check {
    let name = "block.locality_causal";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xAC));
    let mut cfg = try_or_fail!(name, 0.0, BlockConfig::new(4, 1, 2, 2));
    cfg.conv_type = ConvType::None;
    cfg.use_casf = false;
    let params = try_or_fail!(name, 0.0, BlockParams::init(&cfg, &mut rng));
    let x = Tensor::rand_uniform(&[1, 4, 2, 4], -1.0, 1.0, &mut rng);
    // Root at flat position 3; every flat position after it must carry an
    // exactly zero gradient.
    let g = try_or_fail!(name, 0.0, block_input_gradient(&cfg, &params, &x, &[0, 1, 0, 3]));
    let mut worst: f64 = 0.0;
    for c in 0..4 {
        for flat in 4..8 {
            worst = worst.max(g.at(&[0, c, flat / 4, flat % 4]).abs());
        }
    }
    Check::le(name, worst, 0.0)
}

/// Oracle and invariant suite over every module.
pub fn run_verify(cfg: &RunConfig) -> Result<Report, HarnessError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let t = cfg.tolerances;
    let jobs: Vec<Job> = vec![
        Box::new(move || check_scan_equivalence(seed, t.scan_equivalence)),
        Box::new(move || check_linear_attention(seed, t.attention_oracle)),
        Box::new(move || check_decay_range(seed)),
        Box::new(move || check_casf_identity_init(seed)),
        Box::new(move || check_bilinear_oracle(seed, t.sampling_oracle)),
        Box::new(move || check_fuse_oracle(seed, t.sampling_oracle)),
        Box::new(move || check_sampling_linearity(seed, t.sampling_oracle)),
        Box::new(move || check_weight_simplex(seed, t.sampling_oracle)),
        Box::new(move || check_hit_soundness(seed)),
        Box::new(move || check_sample_accounting(seed)),
        Box::new(move || check_zero_hit_finite(seed)),
        Box::new(move || check_reachability_forward(seed)),
        Box::new(move || check_locality_causal(seed)),
    ];
    let checks = run_jobs(jobs, thread_cap());
    Ok(Report::assemble("verify", seed, checks))
}

fn vjp_config(seed: u64) -> VjpCheckConfig {
    VjpCheckConfig { seed: seed.wrapping_add(0xF0), ..VjpCheckConfig::default() }
}

fn grad_fuse(seed: u64, tol: f64) -> Check {
    let name = "grad.primitive.fuse";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xB1));
    let samples = Tensor::rand_uniform(&[1, 2, 3, 4, 3], -1.0, 1.0, &mut rng);
    let w = Tensor::rand_uniform(&[1, 2, 3, 4], 0.1, 1.0, &mut rng);
    let err = try_or_fail!(
        name,
        tol,
        vjp_check(
            |_, vars| Ok(vec![fuse(&vars[0], &vars[1])?]),
            &[samples, w],
            &vjp_config(seed),
        )
    );
    Check::le(name, err, tol)
}

fn grad_scan(seed: u64, tol: f64) -> Check {
    let name = "grad.primitive.scan";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xB2));
    let alpha = Tensor::rand_uniform(&[1, 3, 2, 5], 0.1, 0.9, &mut rng);
    let u = Tensor::rand_uniform(&[1, 3, 2, 5], -1.0, 1.0, &mut rng);
    let err = try_or_fail!(
        name,
        tol,
        vjp_check(
            |_, vars| Ok(vec![crate::tensor::scan_states(&vars[0], &vars[1], ScanAlgo::Sequential)?]),
            &[alpha, u],
            &vjp_config(seed),
        )
    );
    Check::le(name, err, tol)
}

fn grad_bilinear(seed: u64, tol: f64) -> Check {
    let name = "grad.primitive.bilinear";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xB3));
    let map = Tensor::rand_uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng);
    // Positions pinned a safe distance from the interpolation kinks.
    let pos = Tensor::from_fn(&[1, 6, 2], |i| {
        0.3 + 0.67 * ((i[1] * 2 + i[2] + 1) as f64)
    });
    let err = try_or_fail!(
        name,
        tol,
        vjp_check(
            |_, vars| Ok(vec![vars[0].bilinear_sample(&vars[1])?]),
            &[map, pos],
            &vjp_config(seed),
        )
    );
    Check::le(name, err, tol)
}

fn grad_block_full(seed: u64, tol: f64) -> Check {
    let name = "grad.block.full";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xB4));
    let cfg = try_or_fail!(name, tol, BlockConfig::new(4, 1, 2, 2));
    let mut params = try_or_fail!(name, tol, BlockParams::init(&cfg, &mut rng));
    // Pin sampling positions off the bilinear kinks; the weight matrices
    // stay zero so probes cannot move them.
    if let Some(b) = &mut params.offset_net.head_offsets.bias {
        for (i, v) in [0.31, -0.27, 0.43, 0.19].into_iter().enumerate() {
            b.set(&[i], v);
        }
    }
    if let Some(b) = &mut params.offset_net.head_weights.bias {
        b.set(&[0], 0.2);
        b.set(&[1], -0.1);
    }
    let img = Tensor::rand_uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng);
    let mut leaves = vec![img];
    let mut ts = Vec::new();
    params.collect(&mut ts);
    leaves.extend(ts.into_iter().cloned());
    let err = try_or_fail!(
        name,
        tol,
        vjp_check(
            |_, vars| {
                let mut it = vars[1..].iter().cloned();
                let bv = params.lift_from(&mut it);
                Ok(vec![deformba_block_forward(&vars[0], &bv, &cfg)?])
            },
            &leaves,
            &vjp_config(seed),
        )
    );
    Check::le(name, err, tol)
}

fn grad_xa_toy_rig(seed: u64, tol: f64) -> Check {
    let name = "grad.xa.toy_rig";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xB5));
    let cfg = try_or_fail!(name, tol, XAConfig::new(4, 3, 2, 2, 1, 2));
    let params = try_or_fail!(name, tol, XAParams::init(&cfg, &mut rng));
    // u = 0.37 + y/x, v = 0.61 + z/x: all reference points hit at least
    // 0.12 from integer pixel coordinates.
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
    let hits = try_or_fail!(name, tol, lift_and_project(&grid, &rig));
    let f = Tensor::rand_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let m = Tensor::rand_uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
    let mut leaves = vec![f, m];
    let mut ts = Vec::new();
    params.collect(&mut ts);
    leaves.extend(ts.into_iter().cloned());
    let err = try_or_fail!(
        name,
        tol,
        vjp_check(
            |_, vars| {
                let mut it = vars[2..].iter().cloned();
                let xv = params.lift_from(&mut it);
                Ok(vec![xa_block_vars(&vars[0], &vars[1], &hits, &xv, &cfg)?])
            },
            &leaves,
            &vjp_config(seed),
        )
    );
    Check::le(name, err, tol)
}

/// Finite-difference suite over the fusion primitive, the scan, bilinear
/// sampling, the full block, and the full cross-attention block.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<Report, HarnessError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let t = cfg.tolerances;
    let jobs: Vec<Job> = vec![
        Box::new(move || grad_fuse(seed, t.grad_primitive)),
        Box::new(move || grad_scan(seed, t.grad_primitive)),
        Box::new(move || grad_bilinear(seed, t.grad_primitive)),
        Box::new(move || grad_block_full(seed, t.grad_block)),
        Box::new(move || grad_xa_toy_rig(seed, t.grad_xa)),
    ];
    let checks = run_jobs(jobs, thread_cap());
    Ok(Report::assemble("gradcheck", seed, checks))
}

pub struct ForwardOutput {
    pub stages: Vec<Tensor>,
    pub trace: Vec<String>,
}

/// Push an image through the seeded default backbone; errors (including
/// indivisible extents) surface as check failures, exit 1.
pub fn run_forward(cfg: &RunConfig, input: &Tensor) -> Result<(Report, ForwardOutput), HarnessError> {
    cfg.validate()?;
    let bb = cfg.backbone.clone().unwrap_or_default();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let params = BackboneParams::init(&bb, &mut rng)?;
    let stages = crate::block::backbone_forward_tensor(input, &params)?;
    let widths = bb.stage_channels();
    let (b, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let mut checks = Vec::new();
    let mut trace = Vec::new();
    for (s, out) in stages.iter().enumerate() {
        let stride = 4usize << s;
        let want = vec![b, widths[s], h / stride, w / stride];
        trace.push(format!("stage{}: {:?} (stride {})", s, out.shape(), stride));
        let mismatch = (out.shape() != want.as_slice()) as u64;
        checks.push(Check::le(&format!("forward.stage{}.shape", s), mismatch as f64, 0.0));
    }
    Ok((Report::assemble("forward", cfg.seed, checks), ForwardOutput { stages, trace }))
}

/// Load a DTSR input for the forward suite; unreadable or malformed files
/// are runtime failures (exit 1), not config errors.
pub fn load_forward_input(path: &Path) -> Result<Tensor, HarnessError> {
    read_dtsr(path).map_err(|e| HarnessError::Check(format!("{}: {}", path.display(), e)))
}

/// Cost table plus the scaling-ratio and calibration gates as checks.
pub fn run_flops(cfg: &RunConfig) -> Result<(Report, Table5Report), HarnessError> {
    cfg.validate()?;
    let t = cfg.tolerances;
    let table = table5_report(&[])?;
    let deformba: Vec<&crate::complexity::Table5Entry> =
        table.entries.iter().filter(|e| e.module == "Deformba").collect();
    let dot: Vec<&crate::complexity::Table5Entry> =
        table.entries.iter().filter(|e| e.module == "Dot Product").collect();
    let mut checks = Vec::new();

    let ratio_dev = |num: f64, den: f64, published: f64| (num / den / published - 1.0).abs();
    checks.push(Check::le(
        "flops.ratio.deformba",
        ratio_dev(deformba[2].gflops, deformba[1].gflops, 26.0 / 7.6),
        t.ratio,
    ));
    checks.push(Check::le(
        "flops.ratio.dot_product",
        ratio_dev(dot[2].gflops, dot[1].gflops, 1432.5 / 228.8),
        t.ratio,
    ));
    let spread = deformba.iter().map(|e| e.params).max().unwrap()
        - deformba.iter().map(|e| e.params).min().unwrap();
    checks.push(Check::le("flops.params.shape_independent", spread as f64, 0.0));
    checks.push(Check::le(
        "flops.params.deformba",
        (deformba[0].params as f64 - 176_000.0).abs() / 176_000.0,
        t.params,
    ));
    checks.push(check_instrumented_macs(cfg.seed, t.macs));
    Ok((Report::assemble("flops", cfg.seed, checks), table))
}

/// Instrumented desk-scale run against the closed form, on an all-hit rig.
fn check_instrumented_macs(seed: u64, tol: f64) -> Check {
    let name = "flops.macs.instrumented";
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xC1));
    let cfg = try_or_fail!(name, tol, XAConfig::new(8, 5, 2, 2, 2, 2));
    let params = try_or_fail!(name, tol, XAParams::init(&cfg, &mut rng));
    let mat = [
        0.37, 1.0, 0.0, 0.0, 0.61, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
    ];
    let rig = CameraRig { num_cams: 2, lidar2img: vec![mat, mat], h_img: 6, w_img: 6 };
    let grid = BEVGrid {
        hb: 2,
        wb: 2,
        x_min: 2.0,
        x_max: 4.0,
        y_min: 0.0,
        y_max: 2.0,
        z_heights: vec![0.4, 1.0],
    };
    let hits = try_or_fail!(name, tol, lift_and_project(&grid, &rig));
    let shape = WorkloadShape { hb: 2, wb: 2, num_cams: 2, h: 6, w: 6 };
    let analytic = try_or_fail!(name, tol, deformba_xa_cost(&cfg, &shape));
    let f = Tensor::rand_uniform(&[2, 5, 6, 6], -1.0, 1.0, &mut rng);
    let m = Tensor::rand_uniform(&[1, 8, 4], -1.0, 1.0, &mut rng);
    let (out, counters) = with_counting(|| {
        let mem = xa_write_memory(&f, &params, &cfg)?;
        xa_read_queries(&mem, &m, &hits, &params, &cfg)
    });
    try_or_fail!(name, tol, out);
    let rel = (counters.flops as f64 - analytic.flops as f64).abs() / analytic.flops as f64;
    Check::le(name, rel, tol)
}

/// Wall-clock of the three scan algorithms; informational entries only.
pub fn run_bench(cfg: &RunConfig) -> Result<Report, HarnessError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0xD1));
    let (b, c, n, l) = (2, 8, 2, 4096);
    let v = Tensor::rand_uniform(&[b, c, l], -1.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(&[b, n, l], -1.0, 1.0, &mut rng);
    let a = Tensor::rand_uniform(&[b, c, n, l], 0.1, 0.9, &mut rng);
    let inputs = ScanInputs::new(v, k, a)?;
    let time_ms = |f: &dyn Fn() -> crate::tensor::Result<crate::scan::StateSequence>| {
        let start = Instant::now();
        let r = f();
        (r, start.elapsed().as_secs_f64() * 1e3)
    };
    let mut checks = Vec::new();
    let (r, ms) = time_ms(&|| scan_sequential(&inputs));
    r?;
    checks.push(Check::info("bench.scan_sequential_ms", ms));
    let (r, ms) = time_ms(&|| scan_parallel(&inputs));
    r?;
    checks.push(Check::info("bench.scan_parallel_ms", ms));
    let (r, ms) = time_ms(&|| scan_chunked(&inputs, 64));
    r?;
    checks.push(Check::info("bench.scan_chunked_ms", ms));
    Ok(Report::assemble("bench", cfg.seed, checks))
}

/// Write text atomically: a temp file in the same directory, then rename.
pub fn write_text_atomic(path: &Path, text: &str) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| HarnessError::Check(format!("{}: {}", path.display(), e));
    std::fs::write(&tmp, text).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// Report file path inside an output directory: `<suite>_report.json`.
pub fn report_path(out_dir: &Path, suite: &str) -> PathBuf {
    out_dir.join(format!("{}_report.json", suite))
}

pub fn write_report(out_dir: &Path, report: &Report) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Check(format!("{}: {}", out_dir.display(), e)))?;
    let path = report_path(out_dir, &report.suite);
    write_text_atomic(&path, &report.to_json())?;
    Ok(path)
}

pub fn write_forward_outputs(
    out_dir: &Path,
    stages: &[Tensor],
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Check(format!("{}: {}", out_dir.display(), e)))?;
    let mut paths = Vec::new();
    for (i, s) in stages.iter().enumerate() {
        let path = out_dir.join(format!("stage{}.dtsr", i));
        crate::tensor::write_dtsr_atomic(&path, s)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_flops_outputs(out_dir: &Path, table: &Table5Report) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Check(format!("{}: {}", out_dir.display(), e)))?;
    let json = out_dir.join("table5.json");
    write_text_atomic(&json, &table.to_json())?;
    let txt = out_dir.join("table5.txt");
    write_text_atomic(&txt, &table.to_text())?;
    Ok(vec![json, txt])
}
