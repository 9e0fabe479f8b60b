//! Toy concept encoder: turns an instruction, the current observation and
//! the previous action concept into one object-centric and one
//! action-centric embedding per step, and rolls that out over a horizon
//! with the action concept fed back as the next step's previous action.
//!
//! Internals: mean-pool the instruction tokens, concatenate with the
//! observation and previous action, one `tanh` hidden layer, two linear
//! heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{glorot, linear};
use crate::numerics::{Bindings, ParamSet, Tape, Tensor, Var};

pub const PREFIX: &str = "enc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Object,
    Action,
}

/// Stable identity of a node across decoding steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptNode {
    pub embedding: Tensor,
    pub kind: ConceptKind,
    /// 1-based step index.
    pub timestep: usize,
}

impl ConceptNode {
    pub fn key(&self) -> NodeKey {
        let k = match self.kind {
            ConceptKind::Object => 0,
            ConceptKind::Action => 1,
        };
        NodeKey(2 * (self.timestep - 1) + k)
    }
}

/// The node set of a rollout: object and action concepts for each step, in
/// step order with the object node first.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    pub nodes: Vec<ConceptNode>,
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node embeddings stacked as an `N x d` matrix.
    pub fn matrix(&self) -> Result<Tensor> {
        let rows: Vec<Tensor> = self.nodes.iter().map(|n| n.embedding.clone()).collect();
        Tensor::stack(&rows)
    }

    pub fn keys(&self) -> Vec<NodeKey> {
        self.nodes.iter().map(ConceptNode::key).collect()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderInputs {
    /// `m x d` pre-embedded instruction tokens.
    pub instruction_embedding: Tensor,
    pub observation_embedding: Tensor,
    /// Zero at the first step.
    pub prev_action_embedding: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct ConceptEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// Tape handles for the encoder weights.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    w_hidden: Var,
    b_hidden: Var,
    w_obj: Var,
    b_obj: Var,
    w_act: Var,
    b_act: Var,
}

impl EncoderVars {
    pub fn bind(b: &Bindings) -> Result<Self> {
        let g = |n: &str| b.get(&format!("{PREFIX}.{n}"));
        Ok(EncoderVars {
            w_hidden: g("w_hidden")?,
            b_hidden: g("b_hidden")?,
            w_obj: g("w_obj")?,
            b_obj: g("b_obj")?,
            w_act: g("w_act")?,
            b_act: g("b_act")?,
        })
    }
}

pub fn init_params(config: EncoderConfig, rng: &mut impl Rng) -> ParamSet {
    let EncoderConfig { d, hidden } = config;
    let mut p = ParamSet::new();
    p.insert(format!("{PREFIX}.w_hidden"), glorot(3 * d, hidden, rng));
    p.insert(format!("{PREFIX}.b_hidden"), Tensor::zeros(&[hidden]));
    p.insert(format!("{PREFIX}.w_obj"), glorot(hidden, d, rng));
    p.insert(format!("{PREFIX}.b_obj"), Tensor::zeros(&[d]));
    p.insert(format!("{PREFIX}.w_act"), glorot(hidden, d, rng));
    p.insert(format!("{PREFIX}.b_act"), Tensor::zeros(&[d]));
    p
}

/// One encoder step on the tape. `instruction` is `m x d`; `observation`
/// and `prev_action` are `1 x d`. Returns `(v_obj, v_act)`, each `1 x d`.
pub fn encode_step_on(
    tape: &mut Tape,
    vars: &EncoderVars,
    instruction: Var,
    observation: Var,
    prev_action: Var,
) -> Result<(Var, Var)> {
    let d = tape.value(instruction).cols();
    for v in [observation, prev_action] {
        if tape.value(v).dims2() != (1, d) {
            return Err(Error::dim("encode_step", tape.shape(instruction), tape.shape(v)));
        }
    }
    if tape.value(vars.w_hidden).rows() != 3 * d {
        return Err(Error::dim("encode_step", &[3 * d], tape.shape(vars.w_hidden)));
    }
    let pooled = tape.mean_rows(instruction);
    let joint = tape.concat_cols(&[pooled, observation, prev_action])?;
    let pre = linear(tape, joint, vars.w_hidden, Some(vars.b_hidden))?;
    let hidden = tape.tanh(pre);
    let v_obj = linear(tape, hidden, vars.w_obj, Some(vars.b_obj))?;
    let v_act = linear(tape, hidden, vars.w_act, Some(vars.b_act))?;
    Ok((v_obj, v_act))
}

/// Autoregressive rollout on the tape: the action concept of step `t` is
/// the previous-action input of step `t + 1`, zero at the first step.
pub fn rollout_on(
    tape: &mut Tape,
    vars: &EncoderVars,
    instruction: Var,
    observations: &[Var],
) -> Result<Vec<(Var, Var)>> {
    if observations.is_empty() {
        return Err(Error::Contract("rollout needs at least one observation".into()));
    }
    let d = tape.value(instruction).cols();
    let mut prev = tape.constant(Tensor::zeros(&[1, d]));
    let mut out = Vec::with_capacity(observations.len());
    for &obs in observations {
        let (v_obj, v_act) = encode_step_on(tape, vars, instruction, obs, prev)?;
        out.push((v_obj, v_act));
        prev = v_act;
    }
    Ok(out)
}

impl ConceptEncoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        ConceptEncoder {
            config,
            params: init_params(config, rng),
        }
    }

    fn check_inputs(&self, instruction: &Tensor) -> Result<()> {
        if instruction.shape().len() != 2 || instruction.cols() != self.config.d {
            return Err(Error::dim("encode_step", &[0, self.config.d], instruction.shape()));
        }
        Ok(())
    }

    pub fn encode_step(&self, inputs: &EncoderInputs) -> Result<(Tensor, Tensor)> {
        self.check_inputs(&inputs.instruction_embedding)?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.params)?;
        let vars = EncoderVars::bind(&b)?;
        let instr = tape.constant(inputs.instruction_embedding.clone());
        let obs = tape.constant(inputs.observation_embedding.as_row());
        let prev = tape.constant(inputs.prev_action_embedding.as_row());
        let (o, a) = encode_step_on(&mut tape, &vars, instr, obs, prev)?;
        Ok((tape.value(o).flatten(), tape.value(a).flatten()))
    }

    /// `2T` concept nodes for `T` observations.
    pub fn rollout_concepts(&self, instruction: &Tensor, observations: &[Tensor]) -> Result<ConceptSet> {
        self.check_inputs(instruction)?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.params)?;
        let vars = EncoderVars::bind(&b)?;
        let instr = tape.constant(instruction.clone());
        let obs: Vec<Var> = observations.iter().map(|o| tape.constant(o.as_row())).collect();
        let steps = rollout_on(&mut tape, &vars, instr, &obs)?;
        let mut nodes = Vec::with_capacity(2 * steps.len());
        for (t, (o, a)) in steps.into_iter().enumerate() {
            nodes.push(ConceptNode {
                embedding: tape.value(o).flatten(),
                kind: ConceptKind::Object,
                timestep: t + 1,
            });
            nodes.push(ConceptNode {
                embedding: tape.value(a).flatten(),
                kind: ConceptKind::Action,
                timestep: t + 1,
            });
        }
        Ok(ConceptSet { nodes })
    }
}
