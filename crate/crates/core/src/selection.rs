//! Selective segment training: which turns of a trajectory enter the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Per-turn uniform draws for one trajectory.
///
/// The draws depend only on the seed, so configurations that differ only in
/// `p_drop` select nested turn sets.
pub fn selection_draws(turns: usize, rng_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..turns).map(|_| rng.gen::<f64>()).collect()
}

/// Includes each turn independently with probability `1 − p_drop`; if nothing
/// is selected the final turn is added.
///
/// With `bias_late_turns`, turn t of n keeps probability `(1 − p_drop)·2(t+1)/(n+1)`
/// clipped to 1, which preserves the expected count while favouring later turns.
pub fn select_training_turns(traj: &Trajectory, p_drop: f64, rng_seed: u64, bias_late_turns: bool) -> Result<Vec<usize>> {
    if traj.turns.is_empty() {
        return Err(Error::Precondition("cannot select turns from an empty trajectory".into()));
    }
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Precondition(format!("p_drop {p_drop} outside [0, 1)")));
    }
    let n = traj.turns.len();
    let keep = 1.0 - p_drop;
    let draws = selection_draws(n, rng_seed);
    let mut out: Vec<usize> = (0..n)
        .filter(|&t| {
            let p = if bias_late_turns { (keep * 2.0 * (t + 1) as f64 / (n + 1) as f64).min(1.0) } else { keep };
            draws[t] < p
        })
        .collect();
    if out.is_empty() {
        out.push(n - 1);
    }
    Ok(out)
}
