use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of sampled tokens: max(1, floor(ρ·N)).
///
/// A 1e-9 slack absorbs products such as 0.29·100 = 28.999999999999996 that
/// sit just below the intended integer.
pub fn sample_count(n_tokens: usize, rho: f64) -> usize {
    ((rho * n_tokens as f64 + 1e-9).floor() as usize).clamp(1, n_tokens.max(1))
}

/// Sorted, distinct token indices drawn uniformly without replacement.
pub fn sample_token_indices(n_tokens: usize, rho: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::Degenerate(
            "cannot sample tokens from an empty feature map".into(),
        ));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Contract(format!("rho {rho} outside (0,1]")));
    }
    let n = sample_count(n_tokens, rho);
    if n == n_tokens {
        return Ok((0..n_tokens).collect());
    }
    let mut idx = index::sample(rng, n_tokens, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}
