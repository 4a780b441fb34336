use crate::policy::{Arch, Policy};

pub fn small_arch() -> Arch {
    Arch { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, window: 12 }
}

/// `|a - n| / max(|a|, |n|, 1e-5)`; the floor keeps near-zero coordinates
/// from amplifying finite-difference noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Central finite differences of `f` with respect to every parameter.
pub fn central_difference(p: &Policy, step: f64, f: impl Fn(&Policy) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.num_params())
        .map(|i| {
            let x = q.params()[i];
            q.params_mut()[i] = x + step;
            let up = f(&q);
            q.params_mut()[i] = x - step;
            let down = f(&q);
            q.params_mut()[i] = x;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Smallest policy that still hosts the environment; about 1,700 parameters.
pub fn grad_arch() -> Arch {
    Arch { vocab_size: 24, d_model: 6, n_layers: 2, n_heads: 2, window: 64 }
}
