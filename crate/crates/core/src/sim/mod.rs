//! Synthetic long-horizon task with a factored latent commitment, matched
//! budget learners for a structured and an end-to-end policy, and the
//! Monte Carlo estimators used to compare them.
//!
//! Each step has a hidden state `(phase, c)` where `phase` is one of four
//! progress bins and `c = (c_1..c_K)` is drawn from phase-dependent
//! categorical distributions. The observation is
//! `sum_k E_k[c_k] + F[phase] + noise`, with each term confined to its own
//! block of coordinates. The expert realizes `c` through a
//! fixed template grammar and reads the action off the resulting subprompt.

mod eval;
mod learn;

pub use eval::{
    compositional_split_eval, decompose_error, evaluate_gap, horizon_sweep, sign_test_p_value, Decomposition,
    GapEstimate, SignTest, SplitOutcome, SweepCell, SweepResult, SweepRow, SWEEP_CSV_HEADER,
};
pub use learn::{
    train_e2e, train_structured, E2EPolicy, ExpertPolicy, LearnerConfig, LogisticClassifier, Policy, RandomPolicy,
    StructuredPolicy,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};

pub const PHASES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityModel {
    /// One classifier per attribute.
    #[default]
    Additive,
    /// One classifier over the whole tuple space.
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub attr_sizes: Vec<usize>,
    pub action_space: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub obs_noise: f64,
    pub demos: usize,
    pub seed: u64,
    #[serde(default)]
    pub complexity_model: ComplexityModel,
    #[serde(default)]
    pub learner: LearnerConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.attr_sizes.len() != self.k {
            return Err(Error::Config(format!(
                "K = {} but {} attribute sizes given",
                self.k,
                self.attr_sizes.len()
            )));
        }
        if self.attr_sizes.contains(&0) || self.action_space == 0 || self.horizon == 0 || self.obs_dim == 0 {
            return Err(Error::Config("all sizes must be at least 1".into()));
        }
        if self.obs_dim < self.k + 1 {
            return Err(Error::Config(format!(
                "obs_dim must be at least K + 1 = {}",
                self.k + 1
            )));
        }
        if !(self.obs_noise >= 0.0) || !self.obs_noise.is_finite() {
            return Err(Error::Config("obs_noise must be a finite non-negative number".into()));
        }
        self.learner.validate()
    }

    /// Number of commitment tuples, the product of the attribute sizes.
    pub fn tuple_count(&self) -> usize {
        self.attr_sizes.iter().product()
    }

    /// Digits the expert's action is composed of. When the action space
    /// holds every tuple, the attribute digits come first, followed by a
    /// phase digit if there is room for one. Otherwise the action is a
    /// single digit equal to the tuple code reduced modulo `|A|`.
    pub fn action_radices(&self) -> Vec<usize> {
        let tuples = self.tuple_count();
        if self.action_space >= tuples {
            let mut r = self.attr_sizes.clone();
            let extra = self.action_space / tuples;
            if extra > 1 {
                r.push(extra.min(PHASES));
            }
            r
        } else {
            vec![self.action_space]
        }
    }
}

/// A full assignment of attribute values.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticCommitment {
    pub values: Vec<usize>,
}

impl SemanticCommitment {
    /// Mixed-radix code with the first attribute least significant.
    pub fn code(&self, sizes: &[usize]) -> usize {
        let mut code = 0;
        let mut stride = 1;
        for (v, s) in self.values.iter().zip(sizes) {
            code += v * stride;
            stride *= s;
        }
        code
    }

    pub fn from_code(mut code: usize, sizes: &[usize]) -> Self {
        let values = sizes
            .iter()
            .map(|&s| {
                let v = code % s;
                code /= s;
                v
            })
            .collect();
        SemanticCommitment { values }
    }
}

/// A subprompt produced by the template grammar.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subprompt {
    pub tokens: Vec<String>,
    pub commitment: SemanticCommitment,
}

pub const TEMPLATE_ID: &str = "do-attrs";

/// The realization grammar shared by the expert and the structured
/// policy: a verb followed by one `a{k}v{value}` token per attribute.
pub fn realize(c: &SemanticCommitment) -> Subprompt {
    let mut tokens = Vec::with_capacity(c.values.len() + 1);
    tokens.push("do".to_string());
    tokens.extend(c.values.iter().enumerate().map(|(k, v)| format!("a{k}v{v}")));
    Subprompt {
        tokens,
        commitment: c.clone(),
    }
}

/// Reads the commitment back out of a realized subprompt.
pub fn parse_subprompt(tokens: &[String], sizes: &[usize]) -> Result<SemanticCommitment> {
    if tokens.len() != sizes.len() + 1 || tokens[0] != "do" {
        return Err(Error::Contract(format!("not a template subprompt: {tokens:?}")));
    }
    let mut values = Vec::with_capacity(sizes.len());
    for (k, (tok, &size)) in tokens[1..].iter().zip(sizes).enumerate() {
        let v = tok
            .strip_prefix(&format!("a{k}v"))
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v < size)
            .ok_or_else(|| Error::Contract(format!("bad attribute token {tok:?}")))?;
        values.push(v);
    }
    Ok(SemanticCommitment { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub observation: Vec<f64>,
    pub phase: usize,
    pub commitment: SemanticCommitment,
    pub subprompt: Subprompt,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    /// Cumulative 0/1 cost of the recorded actions; zero for the expert.
    pub cost: f64,
}

#[derive(Clone, Debug)]
pub struct Environment {
    pub config: SimConfig,
    /// `[phase][attribute]` categorical distributions.
    pub phase_probs: Vec<Vec<Vec<f64>>>,
    attr_embeddings: Vec<Vec<Vec<f64>>>,
    phase_embeddings: Vec<Vec<f64>>,
}

pub fn make_environment(config: &SimConfig) -> Result<Environment> {
    config.validate()?;
    let mut rng = rng_for(config.seed, &[tag("environment")]);
    let shape = Gamma::new(1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let phase_probs = (0..PHASES)
        .map(|_| {
            config
                .attr_sizes
                .iter()
                .map(|&s| {
                    let draws: Vec<f64> = (0..s).map(|_| shape.sample(&mut rng)).collect();
                    let total: f64 = draws.iter().sum();
                    // Half uniform keeps every value reachable in every phase.
                    draws.iter().map(|g| 0.5 / s as f64 + 0.5 * g / total).collect()
                })
                .collect()
        })
        .collect();
    // Each attribute, and the phase, writes into its own block of
    // coordinates so the tuple posterior factorizes given the observation.
    let width = config.obs_dim / (config.k + 1);
    let mut block = |b: usize| -> Vec<f64> {
        let mut v = vec![0.0; config.obs_dim];
        let end = if b == config.k { config.obs_dim } else { (b + 1) * width };
        for x in &mut v[b * width..end] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = z;
        }
        v
    };
    let attr_embeddings = config
        .attr_sizes
        .iter()
        .enumerate()
        .map(|(k, &s)| (0..s).map(|_| block(k)).collect())
        .collect();
    let phase_embeddings = (0..PHASES).map(|_| block(config.k)).collect();
    Ok(Environment {
        config: config.clone(),
        phase_probs,
        attr_embeddings,
        phase_embeddings,
    })
}

fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl Environment {
    pub fn phase_of(&self, t: usize) -> usize {
        t * PHASES / self.config.horizon
    }

    /// Expert action for a commitment at a phase.
    pub fn expert_action(&self, c: &SemanticCommitment, phase: usize) -> usize {
        let tuples = self.config.tuple_count();
        let code = c.code(&self.config.attr_sizes);
        if self.config.action_space >= tuples {
            let extra = self.config.action_space / tuples;
            if extra > 1 {
                code + tuples * (phase % extra.min(PHASES))
            } else {
                code
            }
        } else {
            code % self.config.action_space
        }
    }

    /// Noise-free observation of a hidden state.
    pub fn clean_observation(&self, c: &SemanticCommitment, phase: usize) -> Vec<f64> {
        let mut obs = self.phase_embeddings[phase].clone();
        for (k, &v) in c.values.iter().enumerate() {
            for (o, e) in obs.iter_mut().zip(&self.attr_embeddings[k][v]) {
                *o += e;
            }
        }
        obs
    }

    pub fn sample_commitment(&self, phase: usize, rng: &mut impl Rng) -> SemanticCommitment {
        SemanticCommitment {
            values: self.phase_probs[phase].iter().map(|p| categorical(p, rng)).collect(),
        }
    }

    /// Probability of a full tuple at a phase.
    pub fn tuple_probability(&self, c: &SemanticCommitment, phase: usize) -> f64 {
        c.values
            .iter()
            .zip(&self.phase_probs[phase])
            .map(|(&v, p)| p[v])
            .product()
    }

    fn step(&self, t: usize, allowed: Option<&[bool]>, rng: &mut impl Rng) -> Result<StepRecord> {
        let phase = self.phase_of(t);
        let commitment = match allowed {
            None => self.sample_commitment(phase, rng),
            Some(mask) => {
                let sizes = &self.config.attr_sizes;
                let weights: Vec<f64> = (0..mask.len())
                    .map(|code| {
                        if mask[code] {
                            self.tuple_probability(&SemanticCommitment::from_code(code, sizes), phase)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::Contract("no tuple is allowed".into()));
                }
                let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                SemanticCommitment::from_code(categorical(&probs, rng), sizes)
            }
        };
        let mut observation = self.clean_observation(&commitment, phase);
        if self.config.obs_noise > 0.0 {
            for o in observation.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *o += self.config.obs_noise * z;
            }
        }
        let subprompt = realize(&commitment);
        let action = self.expert_action(&subprompt.commitment, phase);
        Ok(StepRecord {
            observation,
            phase,
            commitment,
            subprompt,
            action,
        })
    }

    /// One expert episode. `allowed`, indexed by tuple code, restricts
    /// which commitments can occur.
    pub fn episode(&self, allowed: Option<&[bool]>, rng: &mut ChaCha8Rng) -> Result<EpisodeRecord> {
        let steps = (0..self.config.horizon)
            .map(|t| self.step(t, allowed, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodeRecord { steps, cost: 0.0 })
    }
}

/// `n` independent expert episodes; episode `i` uses its own stream
/// derived from `(seed, i)`.
pub fn generate_demonstrations(env: &Environment, n: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    generate_restricted(env, n, seed, None)
}

pub fn generate_restricted(
    env: &Environment,
    n: usize,
    seed: u64,
    allowed: Option<&[bool]>,
) -> Result<Vec<EpisodeRecord>> {
    if n == 0 {
        return Err(Error::Config("need at least one demonstration".into()));
    }
    (0..n as u64)
        .map(|i| env.episode(allowed, &mut rng_for(seed, &[i])))
        .collect()
}

/// SHA-256 of the canonical JSON encoding of a dataset.
pub fn dataset_hash(data: &[EpisodeRecord]) -> Result<String> {
    Ok(crate::io::sha256_hex(&serde_json::to_vec(data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config() -> SimConfig {
        SimConfig {
            k: 3,
            attr_sizes: vec![4, 4, 4],
            action_space: 64,
            horizon: 10,
            obs_dim: 16,
            obs_noise: 0.5,
            demos: 50,
            seed: 7,
            complexity_model: ComplexityModel::Additive,
            learner: LearnerConfig::default(),
        }
    }

    #[test]
    fn environment_echoes_config() {
        let env = make_environment(&config()).unwrap();
        assert_eq!(env.config, config());
        assert_eq!(env.config.tuple_count(), 64);
    }

    #[test]
    fn codes_round_trip() {
        let sizes = [4, 3, 2];
        for code in 0..24 {
            assert_eq!(SemanticCommitment::from_code(code, &sizes).code(&sizes), code);
        }
    }

    #[test]
    fn grammar_is_injective_and_parses_back() {
        let sizes = [4, 4, 4];
        let mut seen = std::collections::HashSet::new();
        for code in 0..64 {
            let c = SemanticCommitment::from_code(code, &sizes);
            let p = realize(&c);
            assert_eq!(parse_subprompt(&p.tokens, &sizes).unwrap(), c);
            assert!(seen.insert(p.tokens));
        }
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut c = config();
        c.attr_sizes = vec![4, 4];
        assert!(matches!(make_environment(&c), Err(Error::Config(_))));
    }

    #[test]
    fn demonstrations_have_the_requested_shape() {
        let mut c = config();
        c.horizon = 4;
        let env = make_environment(&c).unwrap();
        let demos = generate_demonstrations(&env, 5, 3).unwrap();
        assert_eq!(demos.len(), 5);
        assert!(demos.iter().all(|d| d.steps.len() == 4 && d.cost == 0.0));
        assert_eq!(demos, generate_demonstrations(&env, 5, 3).unwrap());
    }
}
