//! Trains both learners on demos covering only part of the commitment
//! tuples and scores them on the unseen tuples.
//!
//! cargo run --release --example compositional_split -- [train_fraction] [seeds]

use istarkit::sim::{compositional_split_eval, SimConfig};

fn main() -> istarkit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let fraction: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.6);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let config = SimConfig {
        k: 3,
        attr_sizes: vec![4, 4, 4],
        action_space: 64,
        horizon: 8,
        obs_dim: 16,
        obs_noise: 0.5,
        demos: 200,
        seed: 0,
        complexity_model: Default::default(),
        learner: Default::default(),
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let outcomes = compositional_split_eval(&config, fraction, &seeds, 200)?;
    let mut wins = 0;
    for o in &outcomes {
        wins += usize::from(o.structured_success > o.e2e_success);
        println!(
            "seed {:>2}: structured {:.3}  e2e {:.3}  ({} train / {} held-out tuples, {} resamples)",
            o.seed, o.structured_success, o.e2e_success, o.train_tuples, o.held_out_tuples, o.resamples
        );
    }
    println!("structured ahead on {wins}/{} seeds", outcomes.len());
    Ok(())
}
