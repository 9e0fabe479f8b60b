//! Structured versus end-to-end excess cost across horizons at a fixed
//! demonstration budget.
//!
//! cargo run --release --example horizon_sweep -- [obs_noise] [seeds] [trials]

use std::time::Instant;

use istarkit::sim::{horizon_sweep, ComplexityModel, LearnerConfig, SimConfig};

fn main() -> istarkit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let obs_noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let trials: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let base = SimConfig {
        k: 3,
        attr_sizes: vec![4, 4, 4],
        action_space: 64,
        horizon: 8,
        obs_dim: 16,
        obs_noise,
        demos: 200,
        seed: 2024,
        complexity_model: ComplexityModel::Additive,
        learner: LearnerConfig::default(),
    };
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let start = Instant::now();
    let result = horizon_sweep(&base, &[2, 4, 8, 16, 32], &seeds, trials)?;
    println!("{:>4} {:>12} {:>12}", "T", "structured", "e2e");
    for (t, s, e) in &result.means {
        println!("{t:>4} {s:>12.4} {e:>12.4}");
    }
    let worst = result
        .cells
        .iter()
        .map(|c| c.decomposition.step_error - (c.decomposition.eps_g + c.decomposition.eps_r + c.decomposition.eps_a))
        .fold(f64::NEG_INFINITY, f64::max);
    for c in result.cells.iter().filter(|c| c.seed == 0) {
        let d = &c.decomposition;
        println!("T={} eps_G={:.4} eps_a={:.4} step={:.4}", c.horizon, d.eps_g, d.eps_a, d.step_error);
    }
    let cell = &result.cells[0];
    println!(
        "T0 = {:?}; slope sign test {}/{} positive, p = {:.4}",
        result.t0, result.sign_test.positive, result.sign_test.total, result.sign_test.p_value
    );
    println!("largest step error minus eps_G + eps_r + eps_a: {worst:.4}");
    println!(
        "parameters: structured {}, e2e {}; {:.1}s",
        cell.structured_params,
        cell.e2e_params,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
