//! Finite-difference validation of reverse-mode gradients.
//!
//! The function under test maps leaf `Var`s to output `Var`s. A fixed random
//! probe projects the outputs to one scalar; its analytic gradient from the
//! tape is compared entry-by-entry against central differences of the same
//! scalar. Everything is seeded, so a failure reproduces exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct VjpCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Entries probed per input; inputs at most this long are probed fully,
    /// larger ones get a seeded subset.
    pub max_probes: usize,
    /// Seed for both the output projection weights and the probe subset.
    pub seed: u64,
}

impl Default for VjpCheckConfig {
    fn default() -> Self {
        VjpCheckConfig { h: 1e-5, max_probes: 48, seed: 0x5eed }
    }
}

fn projection_weights(shapes: &[Vec<usize>], seed: u64) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Tensor::rand_uniform(s, -1.0, 1.0, &mut rng)
        })
        .collect()
}

fn loss_value<F>(f: &F, inputs: &[Tensor], weights: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Vec<Var>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = f(&tape, &vars)?;
    if outs.len() != weights.len() {
        return Err(TensorError::arg("vjp_check", "output arity changed between evaluations"));
    }
    let mut acc = 0.0;
    for (o, w) in outs.iter().zip(weights) {
        let ov = o.value_rc();
        if ov.shape() != w.shape() {
            return Err(TensorError::arg("vjp_check", "output shape changed between evaluations"));
        }
        for (x, ww) in ov.data().iter().zip(w.data()) {
            acc += x * ww;
        }
    }
    Ok(acc)
}

/// Checks the tape gradient of `f` at `inputs` and returns the worst relative
/// error `|analytic - numeric| / max(1, |numeric|)` over all probed entries.
/// Fails outright if any analytic gradient is non-finite.
pub fn vjp_check<F>(f: F, inputs: &[Tensor], cfg: &VjpCheckConfig) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Vec<Var>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let outs = f(&tape, &vars)?;
    if outs.is_empty() {
        return Err(TensorError::arg("vjp_check", "function produced no outputs"));
    }
    let shapes: Vec<Vec<usize>> = outs.iter().map(|o| o.shape()).collect();
    let weights = projection_weights(&shapes, cfg.seed);
    let mut loss: Option<Var> = None;
    for (o, w) in outs.iter().zip(&weights) {
        let term = o.weighted_sum(w)?;
        loss = Some(match loss {
            None => term,
            Some(l) => l.add(&term)?,
        });
    }
    let grads = tape.backward(&loss.expect("at least one output"))?;

    let mut worst = 0.0f64;
    let mut scratch: Vec<Tensor> = inputs.to_vec();
    for (j, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&vars[j]);
        let n = input.len();
        let probes: Vec<usize> = if n <= cfg.max_probes {
            (0..n).collect()
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(
                cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(j as u64),
            );
            let mut picked = rand::seq::index::sample(&mut rng, n, cfg.max_probes).into_vec();
            picked.sort_unstable();
            picked
        };
        for &e in &probes {
            let x0 = input.data()[e];
            scratch[j].data_mut()[e] = x0 + cfg.h;
            let up = loss_value(&f, &scratch, &weights)?;
            scratch[j].data_mut()[e] = x0 - cfg.h;
            let down = loss_value(&f, &scratch, &weights)?;
            scratch[j].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic.data()[e];
            if !a.is_finite() {
                return Err(TensorError::NonFinite { op: "vjp_check" });
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_to_fd_accuracy() {
        // d/dx sum((x*x) . w) has a clean closed form; fd should agree ~1e-10.
        let x = Tensor::new(&[2, 3], vec![0.5, -1.2, 2.0, 0.1, -0.7, 1.4]).unwrap();
        let err = vjp_check(
            |_t, vs| Ok(vec![vs[0].mul(&vs[0])?]),
            &[x],
            &VjpCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {}", err);
    }

    #[test]
    fn broken_gradient_is_caught() {
        // f(x) = x^3, but one factor is detached as a fresh leaf, so the tape
        // reports the gradient of x^2 * const. The mismatch must surface.
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = vjp_check(
            |t, vs| {
                let detached = t.leaf(vs[0].value());
                Ok(vec![vs[0].mul(&vs[0])?.mul(&detached)?])
            },
            &[x],
            &VjpCheckConfig::default(),
        )
        .unwrap();
        assert!(err > 1e-3, "detached factor must show up as a large error, got {}", err);
    }

    #[test]
    fn probe_subset_is_deterministic() {
        let x = Tensor::rand_uniform(&[40, 40], -1.0, 1.0, &mut ChaCha12Rng::seed_from_u64(3));
        let cfg = VjpCheckConfig { max_probes: 16, ..Default::default() };
        let f = |_t: &Tape, vs: &[Var]| Ok(vec![vs[0].silu()?]);
        let e1 = vjp_check(f, std::slice::from_ref(&x), &cfg).unwrap();
        let e2 = vjp_check(f, std::slice::from_ref(&x), &cfg).unwrap();
        assert_eq!(e1, e2);
        assert!(e1 < 1e-7);
    }
}
