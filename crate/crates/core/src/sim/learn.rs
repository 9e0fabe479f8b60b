//! Multinomial logistic learners and the policies built from them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dataset_hash, parse_subprompt, realize, ComplexityModel, EpisodeRecord, SemanticCommitment, SimConfig, StepRecord};
use crate::error::{Error, Result};
use crate::numerics::{Adam, ParamSet, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            steps: 150,
            learning_rate: 0.1,
            weight_decay: 1e-3,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learner needs lr > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Softmax regression `argmax(xW + b)`, optionally backed by an exact
/// lookup table for inputs seen during training.
#[derive(Clone, Debug)]
pub struct LogisticClassifier {
    pub w: Tensor,
    pub b: Tensor,
    table: Option<BTreeMap<Vec<u64>, usize>>,
}

/// Index of the largest count, the smallest index on ties.
fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|x| x.to_bits()).collect()
}

impl LogisticClassifier {
    /// Full-batch Adam from zero weights on the L2-penalized mean negative
    /// log-likelihood. With `tabular`, rows seen in training are answered
    /// by majority vote over their labels (ties to the smaller label).
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, config: &LearnerConfig, tabular: bool) -> Result<Self> {
        let (n, f) = x.dims2();
        if n == 0 || n != y.len() {
            return Err(Error::Contract(format!("{n} rows but {} labels", y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
        }
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[f, classes]));
        params.insert("b", Tensor::zeros(&[classes]));
        let mut opt = Adam::new(config.learning_rate);
        for _ in 0..config.steps {
            let mut tape = Tape::new();
            let bind = tape.bind(&params)?;
            let (w, b) = (bind.get("w")?, bind.get("b")?);
            let xv = tape.constant(x.clone());
            let xw = tape.matmul(xv, w)?;
            let logits = tape.add_row_bias(xw, b)?;
            let lsm = tape.log_softmax_rows(logits);
            let picked = tape.pick(lsm, y)?;
            let mean_ll = tape.mean(picked);
            let nll = tape.scale(mean_ll, -1.0);
            let loss = if config.weight_decay > 0.0 {
                let sq = tape.mul(w, w)?;
                let total = tape.sum(sq);
                let pen = tape.scale(total, 0.5 * config.weight_decay);
                tape.add(nll, pen)?
            } else {
                nll
            };
            let grads = tape.backward(loss)?;
            opt.step(&mut params, &grads)?;
        }
        let table = tabular.then(|| {
            let mut counts: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
            for (i, &label) in y.iter().enumerate() {
                counts.entry(row_key(x.row_slice(i))).or_insert_with(|| vec![0; classes])[label] += 1;
            }
            counts
                .into_iter()
                .map(|(k, c)| (k, majority(&c)))
                .collect()
        });
        Ok(LogisticClassifier {
            w: params.get("w")?.clone(),
            b: params.get("b")?.clone(),
            table,
        })
    }

    pub fn classes(&self) -> usize {
        self.b.numel()
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = x.matmul(&self.w)?;
        let c = self.classes();
        Ok((0..x.rows())
            .map(|i| {
                let row = x.row_slice(i);
                if let Some(&hit) = self.table.as_ref().and_then(|t| t.get(&row_key(row))) {
                    return hit;
                }
                let scores: Vec<f64> = logits.row_slice(i).iter().zip(self.b.data()).map(|(l, b)| l + b).collect();
                debug_assert_eq!(scores.len(), c);
                crate::numerics::tensor::argmax(&scores)
            })
            .collect())
    }
}

/// Something that picks one action per step. Learned policies only read
/// `observation`; the expert reads the recorded action.
pub trait Policy: Sync {
    fn name(&self) -> &'static str;
    fn act(&self, steps: &[StepRecord], rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn name(&self) -> &'static str {
        "expert"
    }

    fn act(&self, steps: &[StepRecord], _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(steps.iter().map(|s| s.action).collect())
    }
}

pub struct RandomPolicy {
    pub action_space: usize,
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn act(&self, steps: &[StepRecord], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(steps.iter().map(|_| rng.random_range(0..self.action_space)).collect())
    }
}

fn observations(steps: &[StepRecord]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = steps.iter().map(|s| s.observation.clone()).collect();
    Tensor::from_rows(&rows)
}

fn all_steps(data: &[EpisodeRecord]) -> Result<Vec<StepRecord>> {
    let steps: Vec<StepRecord> = data.iter().flat_map(|e| e.steps.iter().cloned()).collect();
    if steps.is_empty() {
        return Err(Error::Contract("training needs at least one step".into()));
    }
    Ok(steps)
}

fn digits(mut value: usize, radices: &[usize]) -> Vec<usize> {
    radices
        .iter()
        .map(|&r| {
            let d = value % r;
            value /= r;
            d
        })
        .collect()
}

fn compose(ds: &[usize], radices: &[usize]) -> usize {
    ds.iter().zip(radices).rev().fold(0, |acc, (&d, &r)| acc * r + d)
}

/// `g`: observation to commitment, `r`: the template grammar, `h`:
/// observation plus subprompt to action.
#[derive(Clone, Debug)]
pub struct StructuredPolicy {
    pub attr_sizes: Vec<usize>,
    pub action_radices: Vec<usize>,
    pub model: ComplexityModel,
    pub g_heads: Vec<LogisticClassifier>,
    pub h_heads: Vec<LogisticClassifier>,
    pub dataset_hash: String,
}

impl StructuredPolicy {
    pub fn param_count(&self) -> usize {
        self.g_heads.iter().chain(&self.h_heads).map(LogisticClassifier::param_count).sum()
    }

    /// `g`: predicted commitment for each observation row.
    pub fn predict_commitments(&self, obs: &Tensor) -> Result<Vec<SemanticCommitment>> {
        match self.model {
            ComplexityModel::Additive => {
                let per_attr = self
                    .g_heads
                    .iter()
                    .map(|h| h.predict(obs))
                    .collect::<Result<Vec<_>>>()?;
                Ok((0..obs.rows())
                    .map(|i| SemanticCommitment {
                        values: per_attr.iter().map(|p| p[i]).collect(),
                    })
                    .collect())
            }
            ComplexityModel::Multiplicative => Ok(self.g_heads[0]
                .predict(obs)?
                .into_iter()
                .map(|code| SemanticCommitment::from_code(code, &self.attr_sizes))
                .collect()),
        }
    }

    /// `h`: action for each observation given the subprompt tokens for
    /// that step.
    pub fn actions_given_subprompts(&self, obs: &Tensor, subprompts: &[Vec<String>]) -> Result<Vec<usize>> {
        let feats = h_features(obs, subprompts, &self.attr_sizes)?;
        let per_digit = self
            .h_heads
            .iter()
            .map(|h| h.predict(&feats))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..obs.rows())
            .map(|i| {
                let ds: Vec<usize> = per_digit.iter().map(|p| p[i]).collect();
                compose(&ds, &self.action_radices)
            })
            .collect())
    }
}

/// Observation followed by a one-hot encoding of the parsed subprompt.
fn h_features(obs: &Tensor, subprompts: &[Vec<String>], sizes: &[usize]) -> Result<Tensor> {
    let width: usize = sizes.iter().sum();
    let mut rows = Vec::with_capacity(obs.rows());
    for (i, tokens) in subprompts.iter().enumerate() {
        let c = parse_subprompt(tokens, sizes)?;
        let mut row = obs.row_slice(i).to_vec();
        let mut onehot = vec![0.0; width];
        let mut offset = 0;
        for (&v, &s) in c.values.iter().zip(sizes) {
            onehot[offset + v] = 1.0;
            offset += s;
        }
        row.extend(onehot);
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

impl Policy for StructuredPolicy {
    fn name(&self) -> &'static str {
        "structured"
    }

    fn act(&self, steps: &[StepRecord], _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let obs = observations(steps)?;
        let subprompts: Vec<Vec<String>> = self
            .predict_commitments(&obs)?
            .iter()
            .map(|c| realize(c).tokens)
            .collect();
        self.actions_given_subprompts(&obs, &subprompts)
    }
}

pub fn train_structured(data: &[EpisodeRecord], config: &SimConfig) -> Result<StructuredPolicy> {
    config.validate()?;
    let steps = all_steps(data)?;
    let tabular = config.obs_noise == 0.0;
    let obs = observations(&steps)?;
    let sizes = &config.attr_sizes;
    let g_heads = match config.complexity_model {
        ComplexityModel::Additive => (0..config.k)
            .map(|k| {
                let y: Vec<usize> = steps.iter().map(|s| s.commitment.values[k]).collect();
                LogisticClassifier::fit(&obs, &y, sizes[k], &config.learner, tabular)
            })
            .collect::<Result<Vec<_>>>()?,
        ComplexityModel::Multiplicative => {
            let y: Vec<usize> = steps.iter().map(|s| s.commitment.code(sizes)).collect();
            vec![LogisticClassifier::fit(&obs, &y, config.tuple_count(), &config.learner, tabular)?]
        }
    };
    let radices = config.action_radices();
    let subprompts: Vec<Vec<String>> = steps.iter().map(|s| s.subprompt.tokens.clone()).collect();
    let feats = h_features(&obs, &subprompts, sizes)?;
    let action_digits: Vec<Vec<usize>> = steps.iter().map(|s| digits(s.action, &radices)).collect();
    let h_heads = radices
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let y: Vec<usize> = action_digits.iter().map(|d| d[i]).collect();
            LogisticClassifier::fit(&feats, &y, r, &config.learner, tabular)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StructuredPolicy {
        attr_sizes: sizes.clone(),
        action_radices: radices,
        model: config.complexity_model,
        g_heads,
        h_heads,
        dataset_hash: dataset_hash(data)?,
    })
}

/// One softmax regression from observation straight to the action.
#[derive(Clone, Debug)]
pub struct E2EPolicy {
    pub head: LogisticClassifier,
    pub dataset_hash: String,
}

impl E2EPolicy {
    pub fn param_count(&self) -> usize {
        self.head.param_count()
    }
}

impl Policy for E2EPolicy {
    fn name(&self) -> &'static str {
        "e2e"
    }

    fn act(&self, steps: &[StepRecord], _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        self.head.predict(&observations(steps)?)
    }
}

pub fn train_e2e(data: &[EpisodeRecord], config: &SimConfig) -> Result<E2EPolicy> {
    config.validate()?;
    let steps = all_steps(data)?;
    let obs = observations(&steps)?;
    let y: Vec<usize> = steps.iter().map(|s| s.action).collect();
    let head = LogisticClassifier::fit(&obs, &y, config.action_space, &config.learner, config.obs_noise == 0.0)?;
    Ok(E2EPolicy {
        head,
        dataset_hash: dataset_hash(data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_round_trip() {
        let r = [4, 4, 4, 2];
        for v in 0..128 {
            assert_eq!(compose(&digits(v, &r), &r), v);
        }
    }

    #[test]
    fn classifier_learns_a_separable_problem() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap();
        let y = [0, 1, 0, 1];
        let clf = LogisticClassifier::fit(&x, &y, 2, &LearnerConfig::default(), false).unwrap();
        assert_eq!(clf.predict(&x).unwrap(), y);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(LogisticClassifier::fit(&x, &[0, 3], 2, &LearnerConfig::default(), false).is_err());
        assert!(LogisticClassifier::fit(&x, &[0], 2, &LearnerConfig::default(), false).is_err());
    }
}
