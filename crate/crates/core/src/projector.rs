//! Subtask prompt projector: maps fused concept nodes to subtask prompt
//! embeddings, either all slots at once (`Enc`) or one slot at a time
//! conditioned on the embeddings already produced (`EncDec`), plus the
//! squared-error distillation loss against teacher embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{glorot, gru_cell, gru_init, linear, GruVars};
use crate::numerics::{Adam, Bindings, GradientMap, ParamSet, Tape, Tensor, Var};

pub const PREFIX: &str = "proj";

#[derive(Clone, Debug, PartialEq)]
pub struct SubtaskPrompt {
    pub embedding: Tensor,
    pub slot_index: usize,
    pub template_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorVariant {
    Enc,
    EncDec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    /// Width of the fused concept nodes.
    pub d: usize,
    /// Width of the prompt embeddings.
    pub d_p: usize,
    pub hidden: usize,
    /// Number of independent heads in the one-shot variant.
    pub max_slots: usize,
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_p == 0 || self.hidden == 0 {
            return Err(Error::Config("projector widths must be positive".into()));
        }
        if self.max_slots == 0 {
            return Err(Error::Config("projector needs at least one slot".into()));
        }
        Ok(())
    }
}

fn name(part: &str) -> String {
    format!("{PREFIX}.{part}")
}

fn head_name(s: usize, part: &str) -> String {
    format!("{PREFIX}.enc.head{s}.{part}")
}

pub fn init_params(config: &ProjectorConfig, rng: &mut impl Rng) -> ParamSet {
    let ProjectorConfig { d, d_p, hidden, max_slots } = *config;
    let mut p = ParamSet::new();
    p.insert(name("enc.w_hidden"), glorot(d, hidden, rng));
    p.insert(name("enc.b_hidden"), Tensor::zeros(&[hidden]));
    for s in 0..max_slots {
        p.insert(head_name(s, "w"), glorot(hidden, d_p, rng));
        p.insert(head_name(s, "b"), Tensor::zeros(&[d_p]));
    }
    p.extend(gru_init(&name("dec.gru"), d_p, hidden, rng));
    p.insert(name("dec.w_hidden"), glorot(d + hidden, hidden, rng));
    p.insert(name("dec.b_hidden"), Tensor::zeros(&[hidden]));
    p.insert(name("dec.w_out"), glorot(hidden, d_p, rng));
    p.insert(name("dec.b_out"), Tensor::zeros(&[d_p]));
    p
}

#[derive(Clone, Debug)]
pub struct ProjectorVars {
    enc_w_hidden: Var,
    enc_b_hidden: Var,
    heads: Vec<(Var, Var)>,
    gru: GruVars,
    dec_w_hidden: Var,
    dec_b_hidden: Var,
    dec_w_out: Var,
    dec_b_out: Var,
}

impl ProjectorVars {
    pub fn bind(b: &Bindings, config: &ProjectorConfig) -> Result<Self> {
        let heads = (0..config.max_slots)
            .map(|s| Ok((b.get(&head_name(s, "w"))?, b.get(&head_name(s, "b"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProjectorVars {
            enc_w_hidden: b.get(&name("enc.w_hidden"))?,
            enc_b_hidden: b.get(&name("enc.b_hidden"))?,
            heads,
            gru: GruVars::bind(b, &name("dec.gru"))?,
            dec_w_hidden: b.get(&name("dec.w_hidden"))?,
            dec_b_hidden: b.get(&name("dec.b_hidden"))?,
            dec_w_out: b.get(&name("dec.w_out"))?,
            dec_b_out: b.get(&name("dec.b_out"))?,
        })
    }
}

fn check_nodes(tape: &Tape, nodes: Var, d: usize) -> Result<()> {
    let shape = tape.shape(nodes);
    if shape.len() != 2 || shape[0] == 0 || shape[1] != d {
        return Err(Error::dim("project", &[0, d], shape));
    }
    Ok(())
}

/// One-shot projection on the tape: `S` rows of `1 x d_p`.
pub fn project_enc_on(tape: &mut Tape, vars: &ProjectorVars, nodes: Var, num_slots: usize) -> Result<Vec<Var>> {
    if num_slots < 1 || num_slots > vars.heads.len() {
        return Err(Error::Config(format!(
            "num_slots must be in 1..={}, got {num_slots}",
            vars.heads.len()
        )));
    }
    check_nodes(tape, nodes, tape.value(vars.enc_w_hidden).rows())?;
    let pooled = tape.mean_rows(nodes);
    let pre = linear(tape, pooled, vars.enc_w_hidden, Some(vars.enc_b_hidden))?;
    let hidden = tape.tanh(pre);
    vars.heads[..num_slots]
        .iter()
        .map(|&(w, b)| linear(tape, hidden, w, Some(b)))
        .collect()
}

/// Next-slot projection on the tape given the previous prompt embeddings
/// (each `1 x d_p`).
pub fn project_encdec_on(tape: &mut Tape, vars: &ProjectorVars, nodes: Var, previous: &[Var]) -> Result<Var> {
    let hidden_width = tape.value(vars.gru.u_z).rows();
    check_nodes(tape, nodes, tape.value(vars.dec_w_hidden).rows() - hidden_width)?;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden_width]));
    for &prev in previous {
        h = gru_cell(tape, h, prev, &vars.gru)?;
    }
    let pooled = tape.mean_rows(nodes);
    let joint = tape.concat_cols(&[pooled, h])?;
    let pre = linear(tape, joint, vars.dec_w_hidden, Some(vars.dec_b_hidden))?;
    let hidden = tape.tanh(pre);
    linear(tape, hidden, vars.dec_w_out, Some(vars.dec_b_out))
}

/// Mean squared error between two equally shaped values.
pub fn distill_loss_on(tape: &mut Tape, predicted: Var, teacher: Var) -> Result<Var> {
    if tape.value(predicted).numel() != tape.value(teacher).numel() {
        return Err(Error::dim("distill_loss", tape.shape(predicted), tape.shape(teacher)));
    }
    let diff = tape.sub(predicted, teacher)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn distill_loss(predicted: &Tensor, teacher: &Tensor) -> Result<f64> {
    if predicted.numel() != teacher.numel() {
        return Err(Error::dim("distill_loss", predicted.shape(), teacher.shape()));
    }
    let n = predicted.numel() as f64;
    Ok(predicted
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug)]
pub struct SubpromptProjector {
    pub config: ProjectorConfig,
    pub params: ParamSet,
}

impl SubpromptProjector {
    pub fn new(config: ProjectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(SubpromptProjector {
            config,
            params: init_params(&config, rng),
        })
    }

    pub fn from_params(config: ProjectorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let p = SubpromptProjector { config, params };
        let mut tape = Tape::new();
        let b = tape.bind(&p.params)?;
        ProjectorVars::bind(&b, &config)?;
        Ok(p)
    }

    /// Sets every one-shot head to zero.
    pub fn zero_heads(&mut self) {
        for s in 0..self.config.max_slots {
            for part in ["w", "b"] {
                if let Ok(t) = self.params.get_mut(&head_name(s, part)) {
                    t.data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }

    fn check(&self, nodes: &Tensor) -> Result<()> {
        if nodes.shape().len() != 2 || nodes.rows() == 0 || nodes.cols() != self.config.d {
            return Err(Error::dim("project", &[0, self.config.d], nodes.shape()));
        }
        Ok(())
    }

    pub fn project_enc(&self, nodes: &Tensor, num_slots: usize) -> Result<Vec<SubtaskPrompt>> {
        self.check(nodes)?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.params)?;
        let vars = ProjectorVars::bind(&b, &self.config)?;
        let v = tape.constant(nodes.clone());
        let outs = project_enc_on(&mut tape, &vars, v, num_slots)?;
        Ok(outs
            .into_iter()
            .enumerate()
            .map(|(s, o)| SubtaskPrompt {
                embedding: tape.value(o).flatten(),
                slot_index: s,
                template_id: None,
            })
            .collect())
    }

    pub fn project_encdec(&self, nodes: &Tensor, previous: &[SubtaskPrompt]) -> Result<SubtaskPrompt> {
        self.check(nodes)?;
        for p in previous {
            if p.embedding.numel() != self.config.d_p {
                return Err(Error::dim("project_encdec", &[self.config.d_p], p.embedding.shape()));
            }
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.params)?;
        let vars = ProjectorVars::bind(&b, &self.config)?;
        let v = tape.constant(nodes.clone());
        let prev: Vec<Var> = previous.iter().map(|p| tape.constant(p.embedding.as_row())).collect();
        let out = project_encdec_on(&mut tape, &vars, v, &prev)?;
        Ok(SubtaskPrompt {
            embedding: tape.value(out).flatten(),
            slot_index: previous.len(),
            template_id: None,
        })
    }

    /// Runs the autoregressive variant for `num_slots` steps.
    pub fn generate(&self, nodes: &Tensor, num_slots: usize) -> Result<Vec<SubtaskPrompt>> {
        let mut out = Vec::with_capacity(num_slots);
        for _ in 0..num_slots {
            let next = self.project_encdec(nodes, &out)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// One line of a teacher supervision file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub demo_id: String,
    pub slot_index: usize,
    pub teacher_embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Averaged teacher embedding for one slot and how many records went in.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    pub embedding: Tensor,
    pub count: usize,
}

/// Groups teacher records by `(demo_id, slot_index)` and averages each
/// group.
pub fn aggregate_teachers(records: &[TeacherRecord], d_p: usize) -> Result<BTreeMap<(String, usize), TeacherTarget>> {
    let mut sums: BTreeMap<(String, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        if r.teacher_embedding.len() != d_p {
            return Err(Error::dim("teacher_embedding", &[d_p], &[r.teacher_embedding.len()]));
        }
        let entry = sums
            .entry((r.demo_id.clone(), r.slot_index))
            .or_insert_with(|| (vec![0.0; d_p], 0));
        for (acc, x) in entry.0.iter_mut().zip(&r.teacher_embedding) {
            *acc += x;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (sum, count))| {
            let mean = sum.into_iter().map(|x| x / count as f64).collect();
            (
                k,
                TeacherTarget {
                    embedding: Tensor::vector(mean),
                    count,
                },
            )
        })
        .collect())
}

pub fn read_teachers(path: &Path, d_p: usize) -> Result<BTreeMap<(String, usize), TeacherTarget>> {
    let records: Vec<TeacherRecord> = crate::io::read_jsonl(path)?;
    aggregate_teachers(&records, d_p)
}

/// Fused nodes of one demonstration with its per-slot teacher targets.
#[derive(Clone, Debug)]
pub struct DistillExample {
    pub nodes: Tensor,
    pub teachers: Vec<Tensor>,
}

/// Mean distillation loss over every slot of every example.
pub fn distill_batch_loss_on(
    tape: &mut Tape,
    vars: &ProjectorVars,
    variant: ProjectorVariant,
    batch: &[DistillExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty distillation batch".into()));
    }
    let mut losses = Vec::new();
    for ex in batch {
        let v = tape.constant(ex.nodes.clone());
        let teachers: Vec<Var> = ex.teachers.iter().map(|t| tape.constant(t.as_row())).collect();
        let preds = match variant {
            ProjectorVariant::Enc => project_enc_on(tape, vars, v, teachers.len())?,
            ProjectorVariant::EncDec => {
                // Teacher forcing: each slot sees the teacher embeddings
                // before it.
                let mut preds = Vec::with_capacity(teachers.len());
                for s in 0..teachers.len() {
                    preds.push(project_encdec_on(tape, vars, v, &teachers[..s])?);
                }
                preds
            }
        };
        for (p, t) in preds.into_iter().zip(teachers) {
            losses.push(distill_loss_on(tape, p, t)?);
        }
    }
    let col = tape.concat_rows(&losses)?;
    Ok(tape.mean(col))
}

pub fn distill_loss_and_grad(
    projector: &SubpromptProjector,
    variant: ProjectorVariant,
    batch: &[DistillExample],
) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new();
    let b = tape.bind(&projector.params)?;
    let vars = ProjectorVars::bind(&b, &projector.config)?;
    let loss = distill_batch_loss_on(&mut tape, &vars, variant, batch)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads))
}

/// Full-batch Adam on the distillation loss; returns the loss before each
/// step and after the last.
pub fn train_projector(
    projector: &mut SubpromptProjector,
    variant: ProjectorVariant,
    batch: &[DistillExample],
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(learning_rate);
    let mut curve = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = distill_loss_and_grad(projector, variant, batch)?;
        curve.push(loss);
        opt.step(&mut projector.params, &grads)?;
    }
    curve.push(distill_loss_and_grad(projector, variant, batch)?.0);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn config() -> ProjectorConfig {
        ProjectorConfig {
            d: 8,
            d_p: 4,
            hidden: 6,
            max_slots: 3,
        }
    }

    fn projector(seed: u64) -> SubpromptProjector {
        SubpromptProjector::new(config(), &mut rng_for(seed, &[])).unwrap()
    }

    #[test]
    fn zero_heads_give_zero_embeddings() {
        let mut p = projector(1);
        p.zero_heads();
        let v = Tensor::randn(&[4, 8], 1.0, &mut rng_for(2, &[]));
        for (s, out) in p.project_enc(&v, 3).unwrap().iter().enumerate() {
            assert_eq!(out.slot_index, s);
            assert!(out.embedding.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn slot_count_is_validated() {
        let p = projector(1);
        let v = Tensor::zeros(&[2, 8]);
        assert!(matches!(p.project_enc(&v, 0), Err(Error::Config(_))));
        assert!(matches!(p.project_enc(&v, 4), Err(Error::Config(_))));
    }

    #[test]
    fn encdec_slot_index_counts_history() {
        let p = projector(3);
        let v = Tensor::randn(&[3, 8], 1.0, &mut rng_for(4, &[]));
        let out = p.generate(&v, 3).unwrap();
        assert_eq!(out.iter().map(|o| o.slot_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn loss_of_constant_offset_is_its_square() {
        let t = Tensor::vector(vec![0.3, -1.0, 2.0, 0.0]);
        let p = t.map(|x| x + 0.5);
        assert!((distill_loss(&p, &t).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(distill_loss(&t, &t).unwrap(), 0.0);
        assert!(matches!(
            distill_loss(&t, &Tensor::zeros(&[3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn teachers_are_averaged_per_slot() {
        let rec = |demo: &str, s, e: Vec<f64>| TeacherRecord {
            demo_id: demo.into(),
            slot_index: s,
            teacher_embedding: e,
            text: None,
        };
        let records = vec![
            rec("a", 0, vec![1.0, 2.0]),
            rec("a", 0, vec![3.0, 4.0]),
            rec("a", 1, vec![0.0, 1.0]),
        ];
        let agg = aggregate_teachers(&records, 2).unwrap();
        let t = &agg[&("a".to_string(), 0)];
        assert_eq!(t.count, 2);
        assert_eq!(t.embedding.data(), &[2.0, 3.0]);
        assert_eq!(agg[&("a".to_string(), 1)].count, 1);
    }
}
