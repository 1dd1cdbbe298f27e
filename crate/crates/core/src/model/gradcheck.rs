//! Central-difference check of the analytic gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::batch_gradients;
use super::{ModelConfig, ModelError, ModelParams};
use crate::packing::PackedSequence;

/// Relative errors use `max(|a|, |n|, REL_FLOOR)` as the denominator so
/// coordinates with vanishing gradient are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn tensors_covered(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.checks.iter().map(|c| c.tensor.as_str()).collect();
        names.dedup();
        names
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn loss_of(params: &ModelParams, cfg: &ModelConfig, seq: &PackedSequence) -> Result<f64, ModelError> {
    Ok(batch_gradients(params, cfg, &[seq])?.0.mean())
}

/// Checks `per_tensor` coordinates of every tensor: half drawn uniformly,
/// half from coordinates whose analytic gradient is nonzero.
pub fn grad_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    seq: &PackedSequence,
    epsilon: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = batch_gradients(params, cfg, &[seq])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut checks = Vec::new();
    let grad_tensors = grads.tensors();
    for (ti, g) in grad_tensors.iter().enumerate() {
        let n = g.data.len();
        let mut picks: Vec<usize> = (0..per_tensor / 2).map(|_| rng.gen_range(0..n)).collect();
        let nonzero: Vec<usize> = (0..n).filter(|&i| g.data[i] != 0.0).collect();
        let want = per_tensor - picks.len();
        if nonzero.is_empty() {
            picks.extend((0..want).map(|_| rng.gen_range(0..n)));
        } else {
            picks.extend((0..want).map(|_| *nonzero.choose(&mut rng).unwrap()));
        }
        for idx in picks {
            let orig = probe.tensors()[ti].data[idx];
            probe.tensors_mut()[ti].data[idx] = orig + epsilon;
            let up = loss_of(&probe, cfg, seq)?;
            probe.tensors_mut()[ti].data[idx] = orig - epsilon;
            let down = loss_of(&probe, cfg, seq)?;
            probe.tensors_mut()[ti].data[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = g.data[idx];
            checks.push(CoordCheck {
                tensor: g.name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: rel_error(analytic, numeric),
            });
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { checks, max_rel_error })
}
