//! Central finite-difference verification of tape gradients.
//!
//! Non-scalar outputs are reduced to a scalar by a dot product with a fixed
//! random weight tensor so every output element contributes to the check.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over checked coordinates.
    pub rel_error: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

fn project(out: &Tensor<f64>, weights: &Option<Vec<f64>>) -> f64 {
    match weights {
        None => out.item(),
        Some(w) => {
            let mut acc = 0.0;
            for (a, b) in out.data().iter().zip(w) {
                acc += a * b;
            }
            acc
        }
    }
}

pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_val = tape.value(out).clone();
    let weights = (out_val.numel() != 1).then(|| {
        (0..out_val.numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    });
    let loss = match &weights {
        None => out,
        Some(w) => {
            let r = tape.constant(Tensor::new(out_val.shape().to_vec(), w.clone())?);
            let prod = tape.mul(out, r)?;
            tape.sum(prod)?
        }
    };
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("input requires grad"))
        .collect();
    drop(tape);

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(project(t.value(o), &weights))
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
            checked += 1;
        }
    }
    let scale = an2.sqrt().max(nu2.sqrt());
    let rel_error = if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 };
    Ok(GradReport {
        rel_error,
        checked,
        analytic_norm: an2.sqrt(),
    })
}
