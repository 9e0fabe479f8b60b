//! Monte Carlo estimators: excess cost, its per-step decomposition, the
//! horizon sweep and the compositional split.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::learn::{train_e2e, train_structured, Policy, StructuredPolicy};
use super::{dataset_hash, generate_restricted, make_environment, realize, Environment, SemanticCommitment, SimConfig, StepRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::{derive_seed, rng_for, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapEstimate {
    /// Mean cumulative 0/1 cost per episode.
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn evaluation_episodes(env: &Environment, trials: usize, seed: u64, allowed: Option<&[bool]>) -> Result<Vec<Vec<StepRecord>>> {
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    Ok(generate_restricted(env, trials, seed, allowed)?
        .into_iter()
        .map(|e| e.steps)
        .collect())
}

fn flat(episodes: &[Vec<StepRecord>]) -> Vec<StepRecord> {
    episodes.iter().flatten().cloned().collect()
}

/// Per-episode sums of `errors`, which is laid out episode by episode.
fn episode_sums(errors: &[bool], horizon: usize) -> Vec<f64> {
    errors
        .chunks(horizon)
        .map(|c| c.iter().filter(|&&e| e).count() as f64)
        .collect()
}

/// Excess cost of `policy` over `trials` fresh episodes. The expert has
/// zero cost, so this is the policy's own expected cumulative cost.
pub fn evaluate_gap(policy: &dyn Policy, env: &Environment, trials: usize, seed: u64) -> Result<GapEstimate> {
    let episodes = evaluation_episodes(env, trials, seed, None)?;
    let steps = flat(&episodes);
    let actions = policy.act(&steps, &mut rng_for(seed, &[tag("act")]))?;
    let errors: Vec<bool> = actions.iter().zip(&steps).map(|(a, s)| *a != s.action).collect();
    let (mean, stderr) = mean_stderr(&episode_sums(&errors, env.config.horizon));
    Ok(GapEstimate { mean, stderr, trials })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    /// Rate of `g(obs) != c*`.
    pub eps_g: f64,
    /// Rate of `r(g(obs)) != p*` among steps where `g(obs) == c*`.
    pub eps_r: f64,
    /// Rate of `h(obs, p*) != a*`.
    pub eps_a: f64,
    /// Rate of wrong actions for the composed policy.
    pub step_error: f64,
    /// Standard error of `step_error` over episodes.
    pub step_stderr: f64,
    pub steps: usize,
}

impl Decomposition {
    /// `step_error <= eps_g + eps_r + eps_a + slack * step_stderr`.
    pub fn union_bound_holds(&self, slack: f64) -> bool {
        self.step_error <= self.eps_g + self.eps_r + self.eps_a + slack * self.step_stderr
    }
}

/// Measures every term on the same evaluation steps.
pub fn decompose_error(policy: &StructuredPolicy, env: &Environment, trials: usize, seed: u64) -> Result<Decomposition> {
    let episodes = evaluation_episodes(env, trials, seed, None)?;
    let steps = flat(&episodes);
    let rows: Vec<Vec<f64>> = steps.iter().map(|s| s.observation.clone()).collect();
    let obs = Tensor::from_rows(&rows)?;
    let predicted = policy.predict_commitments(&obs)?;
    let realized: Vec<Vec<String>> = predicted.iter().map(|c| realize(c).tokens).collect();
    let expert_prompts: Vec<Vec<String>> = steps.iter().map(|s| s.subprompt.tokens.clone()).collect();
    let composed = policy.actions_given_subprompts(&obs, &realized)?;
    let oracle_prompted = policy.actions_given_subprompts(&obs, &expert_prompts)?;

    let n = steps.len() as f64;
    let g_wrong = predicted.iter().zip(&steps).filter(|(c, s)| **c != s.commitment).count();
    let g_right = steps.len() - g_wrong;
    let r_wrong = predicted
        .iter()
        .zip(&realized)
        .zip(&steps)
        .filter(|((c, p), s)| **c == s.commitment && **p != s.subprompt.tokens)
        .count();
    let a_wrong = oracle_prompted.iter().zip(&steps).filter(|(a, s)| **a != s.action).count();
    let errors: Vec<bool> = composed.iter().zip(&steps).map(|(a, s)| *a != s.action).collect();
    let horizon = env.config.horizon as f64;
    let per_episode: Vec<f64> = episode_sums(&errors, env.config.horizon)
        .into_iter()
        .map(|e| e / horizon)
        .collect();
    let (step_error, step_stderr) = mean_stderr(&per_episode);
    Ok(Decomposition {
        eps_g: g_wrong as f64 / n,
        eps_r: if g_right == 0 { 0.0 } else { r_wrong as f64 / g_right as f64 },
        eps_a: a_wrong as f64 / n,
        step_error,
        step_stderr,
        steps: steps.len(),
    })
}

/// One output line of a sweep. Error components are only filled for the
/// structured policy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub policy: String,
    pub excess_cost: f64,
    pub stderr: f64,
    #[serde(rename = "eps_G")]
    pub eps_g: Option<f64>,
    pub eps_r: Option<f64>,
    pub eps_a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub horizon: usize,
    pub seed: u64,
    pub structured: GapEstimate,
    pub e2e: GapEstimate,
    pub decomposition: Decomposition,
    pub dataset_hash: String,
    pub structured_params: usize,
    pub e2e_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SignTest {
    /// Seeds whose least-squares slope of `e2e - structured` against `T`
    /// is positive.
    pub positive: usize,
    /// Seeds with a non-zero slope.
    pub total: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
    /// `(T, mean structured excess cost, mean e2e excess cost)`.
    pub means: Vec<(usize, f64, f64)>,
    pub t0: Option<usize>,
    pub sign_test: SignTest,
}

pub const SWEEP_CSV_HEADER: &str = "T,seed,policy,excess_cost,stderr,eps_G,eps_r,eps_a";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.horizon,
                r.seed,
                r.policy,
                r.excess_cost,
                r.stderr,
                opt(r.eps_g),
                opt(r.eps_r),
                opt(r.eps_a)
            ));
        }
        out
    }
}

/// One-sided binomial tail `P(X >= k)` for `X ~ Bin(n, 1/2)`.
pub fn sign_test_p_value(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut tail = 0.0;
    let mut coef = 1.0f64;
    for i in 0..=n {
        if i > 0 {
            coef = coef * (n - i + 1) as f64 / i as f64;
        }
        if i >= k {
            tail += coef;
        }
    }
    tail / 2f64.powi(n as i32)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn sweep_cell(base: &SimConfig, horizon: usize, seed: u64, trials: usize) -> Result<SweepCell> {
    let mut config = base.clone();
    config.horizon = horizon;
    config.seed = derive_seed(base.seed, &[seed]);
    let env = make_environment(&config)?;
    let demos_seed = derive_seed(base.seed, &[tag("demos"), horizon as u64, seed]);
    let eval_seed = derive_seed(base.seed, &[tag("eval"), horizon as u64, seed]);
    let data = generate_restricted(&env, base.demos, demos_seed, None)?;
    let structured = train_structured(&data, &config)?;
    let e2e = train_e2e(&data, &config)?;
    if structured.dataset_hash != e2e.dataset_hash {
        return Err(Error::Contract("learners saw different datasets".into()));
    }
    Ok(SweepCell {
        horizon,
        seed,
        structured: evaluate_gap(&structured, &env, trials, eval_seed)?,
        e2e: evaluate_gap(&e2e, &env, trials, eval_seed)?,
        decomposition: decompose_error(&structured, &env, trials, eval_seed)?,
        dataset_hash: dataset_hash(&data)?,
        structured_params: structured.param_count(),
        e2e_params: e2e.param_count(),
    })
}

/// Trains both learners on the same demonstrations for every `(T, seed)`
/// cell and compares their excess cost. `T0` is the smallest tested
/// horizon from which the structured mean stays strictly below the e2e
/// mean for every larger tested horizon.
pub fn horizon_sweep(base: &SimConfig, horizons: &[usize], seeds: &[u64], trials: usize) -> Result<SweepResult> {
    base.validate()?;
    if horizons.len() < 2 || seeds.len() < 5 {
        return Err(Error::Config("sweep needs at least two horizons and five seeds".into()));
    }
    let mut horizons = horizons.to_vec();
    horizons.sort_unstable();
    horizons.dedup();
    let grid: Vec<(usize, u64)> = horizons
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(t, s)| sweep_cell(base, t, s, trials))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(3 * cells.len());
    for c in &cells {
        let d = &c.decomposition;
        rows.push(SweepRow {
            horizon: c.horizon,
            seed: c.seed,
            policy: "structured".into(),
            excess_cost: c.structured.mean,
            stderr: c.structured.stderr,
            eps_g: Some(d.eps_g),
            eps_r: Some(d.eps_r),
            eps_a: Some(d.eps_a),
        });
        for (policy, mean, stderr) in [("e2e", c.e2e.mean, c.e2e.stderr), ("expert", 0.0, 0.0)] {
            rows.push(SweepRow {
                horizon: c.horizon,
                seed: c.seed,
                policy: policy.into(),
                excess_cost: mean,
                stderr,
                eps_g: None,
                eps_r: None,
                eps_a: None,
            });
        }
    }

    let means: Vec<(usize, f64, f64)> = horizons
        .iter()
        .map(|&t| {
            let at_t: Vec<&SweepCell> = cells.iter().filter(|c| c.horizon == t).collect();
            let n = at_t.len() as f64;
            (
                t,
                at_t.iter().map(|c| c.structured.mean).sum::<f64>() / n,
                at_t.iter().map(|c| c.e2e.mean).sum::<f64>() / n,
            )
        })
        .collect();
    let mut t0 = None;
    for &(t, s, e) in means.iter().rev() {
        if s < e {
            t0 = Some(t);
        } else {
            break;
        }
    }

    let xs: Vec<f64> = horizons.iter().map(|&t| t as f64).collect();
    let mut positive = 0;
    let mut total = 0;
    for &seed in seeds {
        let ys: Vec<f64> = horizons
            .iter()
            .map(|&t| {
                let c = cells.iter().find(|c| c.horizon == t && c.seed == seed).expect("cell exists");
                c.e2e.mean - c.structured.mean
            })
            .collect();
        let m = slope(&xs, &ys);
        if m != 0.0 {
            total += 1;
            if m > 0.0 {
                positive += 1;
            }
        }
    }
    Ok(SweepResult {
        rows,
        cells,
        means,
        t0,
        sign_test: SignTest {
            positive,
            total,
            p_value: sign_test_p_value(positive, total),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitOutcome {
    pub seed: u64,
    /// Fraction of held-out steps where the action matches the expert.
    pub structured_success: f64,
    pub e2e_success: f64,
    /// Splits discarded because some attribute value went unobserved.
    pub resamples: usize,
    pub train_tuples: usize,
    pub held_out_tuples: usize,
}

const MAX_SPLIT_ATTEMPTS: usize = 100;

fn covers_every_value<'a>(tuples: impl Iterator<Item = &'a SemanticCommitment>, sizes: &[usize]) -> bool {
    let mut seen: Vec<Vec<bool>> = sizes.iter().map(|&s| vec![false; s]).collect();
    for c in tuples {
        for (k, &v) in c.values.iter().enumerate() {
            seen[k][v] = true;
        }
    }
    seen.iter().all(|s| s.iter().all(|&b| b))
}

fn split_outcome(config: &SimConfig, train_fraction: f64, seed: u64, trials: usize) -> Result<SplitOutcome> {
    let mut env_config = config.clone();
    env_config.seed = derive_seed(config.seed, &[seed]);
    let env = make_environment(&env_config)?;
    let sizes = &config.attr_sizes;
    let tuples = config.tuple_count();
    let n_train = ((train_fraction * tuples as f64).round() as usize).clamp(1, tuples);
    let all: Vec<SemanticCommitment> = (0..tuples).map(|c| SemanticCommitment::from_code(c, sizes)).collect();

    for attempt in 0..MAX_SPLIT_ATTEMPTS {
        let mut order: Vec<usize> = (0..tuples).collect();
        order.shuffle(&mut rng_for(config.seed, &[tag("split"), seed, attempt as u64]));
        let mut allowed = vec![false; tuples];
        for &c in &order[..n_train] {
            allowed[c] = true;
        }
        if !covers_every_value(all.iter().filter(|c| allowed[c.code(sizes)]), sizes) {
            continue;
        }
        let demos_seed = derive_seed(config.seed, &[tag("split-demos"), seed, attempt as u64]);
        let data = generate_restricted(&env, config.demos, demos_seed, Some(&allowed))?;
        if !covers_every_value(data.iter().flat_map(|e| e.steps.iter().map(|s| &s.commitment)), sizes) {
            continue;
        }
        let structured = train_structured(&data, &env_config)?;
        let e2e = train_e2e(&data, &env_config)?;
        // With every tuple in training there is nothing held out, so both
        // are scored in distribution.
        let held_out: Vec<bool> = if n_train == tuples { allowed.clone() } else { allowed.iter().map(|a| !a).collect() };
        let eval_seed = derive_seed(config.seed, &[tag("split-eval"), seed]);
        let steps = flat(&evaluation_episodes(&env, trials, eval_seed, Some(&held_out))?);
        let success = |p: &dyn Policy| -> Result<f64> {
            let actions = p.act(&steps, &mut rng_for(eval_seed, &[tag("act")]))?;
            let hits = actions.iter().zip(&steps).filter(|(a, s)| **a == s.action).count();
            Ok(hits as f64 / steps.len() as f64)
        };
        return Ok(SplitOutcome {
            seed,
            structured_success: success(&structured)?,
            e2e_success: success(&e2e)?,
            resamples: attempt,
            train_tuples: n_train,
            held_out_tuples: held_out.iter().filter(|&&h| h).count(),
        });
    }
    Err(Error::Contract(format!(
        "no fair split with fraction {train_fraction} after {MAX_SPLIT_ATTEMPTS} attempts"
    )))
}

/// Trains on demonstrations that only use a random `train_fraction` of the
/// commitment tuples and scores both policies on the remaining tuples.
/// Splits that leave an attribute value unobserved are drawn again.
pub fn compositional_split_eval(
    config: &SimConfig,
    train_fraction: f64,
    seeds: &[u64],
    trials: usize,
) -> Result<Vec<SplitOutcome>> {
    config.validate()?;
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train_fraction must be in (0, 1], got {train_fraction}")));
    }
    seeds
        .par_iter()
        .map(|&s| split_outcome(config, train_fraction, s, trials))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tail_matches_known_values() {
        assert!((sign_test_p_value(15, 20) - 0.020694732666015625).abs() < 1e-15);
        assert_eq!(sign_test_p_value(0, 20), 1.0);
        assert!((sign_test_p_value(20, 20) - 0.5f64.powi(20)).abs() < 1e-20);
    }

    #[test]
    fn slope_of_a_line() {
        assert!((slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-12);
    }
}
