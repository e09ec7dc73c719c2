//! Operation counters for the empirical cost model.
//!
//! Counting convention (mirrored exactly by the analytic model in
//! `complexity`): a multiply-accumulate is 2 FLOPs, a bare multiply is 1.
//! Counted primitives: matmul, conv2d, depthwise conv2d/1d, channel conv1d,
//! the v*k outer product, the linear scan (charged 2 MACs per state element
//! per step regardless of scan algorithm), the n-contraction, bilinear
//! sampling (4 MACs per channel per sample) and fusion row scaling (1 multiply
//! per channel per row). Activations, normalizations, softmax, elementwise
//! add/mul, gathers and segment sums are not counted. Backward passes are
//! never counted.
//!
//! Counters are thread-local and always on; they only observe, they never
//! change a computed value.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
    static SAMPLES: Cell<u64> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Floating point operations, MAC = 2.
    pub flops: u64,
    /// Bilinear samples executed (one per queried position).
    pub bilinear_samples: u64,
}

/// Opaque marker of counter state at some instant.
#[derive(Clone, Copy, Debug)]
pub struct CounterSnapshot {
    flops: u64,
    samples: u64,
}

/// Current counter handle.
pub fn counters() -> Counters {
    Counters
}

pub struct Counters;

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot { flops: FLOPS.with(|c| c.get()), samples: SAMPLES.with(|c| c.get()) }
    }

    /// Counts accumulated since `snap` on this thread.
    pub fn since(&self, snap: CounterSnapshot) -> OpCounters {
        OpCounters {
            flops: FLOPS.with(|c| c.get()) - snap.flops,
            bilinear_samples: SAMPLES.with(|c| c.get()) - snap.samples,
        }
    }
}

pub(crate) fn add_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get().wrapping_add(n)));
}

pub(crate) fn add_samples(n: u64) {
    SAMPLES.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Runs `f` and returns its result together with the ops it executed.
pub fn with_counting<T>(f: impl FnOnce() -> T) -> (T, OpCounters) {
    let snap = counters().snapshot();
    let out = f();
    (out, counters().since(snap))
}
