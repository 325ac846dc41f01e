//! Synthetic preference games used by tests, the acceptance suite and the CLI.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::preference::{GameSpec, PreferenceOracle};
use crate::rng::seeded;

/// Rock (0), paper (1), scissors (2) with deterministic cyclic preferences.
pub fn rock_paper_scissors() -> PreferenceOracle {
    PreferenceOracle::general_matrix(vec![vec![
        vec![0.5, 0.0, 1.0],
        vec![1.0, 0.5, 0.0],
        vec![0.0, 1.0, 0.5],
    ]])
    .expect("rock-paper-scissors is a valid matrix")
}

/// Every pair ties: `P ≡ 1/2`.
pub fn all_tie(counts: &[usize]) -> PreferenceOracle {
    PreferenceOracle::general_matrix(counts.iter().map(|&n| vec![vec![0.5; n]; n]).collect())
        .expect("constant 1/2 matrix is valid")
}

/// Uniform random upper triangle mirrored into a consistent matrix. Such
/// games are intransitive with high probability.
pub fn random_matrix_game(prompts: usize, responses: usize, seed: u64) -> GameSpec {
    let mut rng = seeded(seed);
    let matrices = (0..prompts)
        .map(|_| {
            let mut m = vec![vec![0.5; responses]; responses];
            for i in 0..responses {
                for j in (i + 1)..responses {
                    let p: f64 = rng.random();
                    m[i][j] = p;
                    m[j][i] = 1.0 - p;
                }
            }
            m
        })
        .collect();
    GameSpec::new(PreferenceOracle::general_matrix(matrices).expect("mirrored matrix is valid"))
}

/// Bradley–Terry game with i.i.d. `N(0, scale²)` rewards.
pub fn random_bt_game(prompts: usize, responses: usize, scale: f64, seed: u64) -> GameSpec {
    let mut rng = seeded(seed);
    let rewards = (0..prompts)
        .map(|_| {
            (0..responses)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    GameSpec::new(PreferenceOracle::bradley_terry(rewards).expect("finite rewards"))
}
