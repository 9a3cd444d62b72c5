//! Two estimates averaged into one prediction.
//!
//! Minimizing `|mean(a_hat) - a|` moves both estimates the same way, so
//! when they straddle `a` one of them is pushed away from it.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingResult {
    pub grads: [f64; 2],
    /// Whether a small negative-gradient step reduces `|a_hat_i - a|`.
    pub correct: [bool; 2],
}

pub fn averaging_demo(a_hats: [f64; 2], a: f64) -> AveragingResult {
    let mean = 0.5 * (a_hats[0] + a_hats[1]);
    let g = match mean - a {
        d if d > 0.0 => 0.5,
        d if d < 0.0 => -0.5,
        _ => 0.0,
    };
    let correct = a_hats.map(|ai| g == 0.0 || g * (ai - a) > 0.0);
    AveragingResult { grads: [g, g], correct }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn examples() {
        let r = averaging_demo([0.4, 0.8], 0.5);
        assert_eq!(r.grads, [0.5, 0.5]);
        assert_eq!(r.correct, [false, true]);
        assert_eq!(averaging_demo([0.7, 0.9], 0.5).correct, [true, true]);
        let r = averaging_demo([0.3, 0.7], 0.5);
        assert_eq!(r.grads, [0.0, 0.0]);
        assert_eq!(r.correct, [true, true]);
    }

    #[test]
    fn flags_match_a_small_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let a_hats = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = rng.random_range(-1.0..1.0);
            let r = averaging_demo(a_hats, a);
            for (i, &a_hat) in a_hats.iter().enumerate() {
                let moved = a_hat - 1e-6 * r.grads[i];
                let shrinks = (moved - a).abs() < (a_hat - a).abs();
                assert_eq!(r.correct[i], shrinks || r.grads[i] == 0.0);
            }
        }
    }
}
