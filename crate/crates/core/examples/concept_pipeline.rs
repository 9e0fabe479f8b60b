//! Rolls the concept encoder over a short episode, runs the concept graph
//! step by step with persistent recurrent state, and decodes subtask
//! prompts from the fused nodes.

use istarkit::encoder::{ConceptEncoder, EncoderConfig};
use istarkit::graph::{ConceptGraph, EntropyScope, GraphConfig, HistoryAgg, RecurrentState};
use istarkit::numerics::Tensor;
use istarkit::projector::{ProjectorConfig, SubpromptProjector};
use istarkit::seed::rng_for;

fn main() -> istarkit::Result<()> {
    let d = 8;
    let mut rng = rng_for(3, &[]);
    let encoder = ConceptEncoder::new(EncoderConfig { d, hidden: 16 }, &mut rng);
    let graph = ConceptGraph::new(
        GraphConfig {
            d,
            heads: 2,
            lambda: 0.1,
            entropy_scope: EntropyScope::TargetNode,
            history_agg: HistoryAgg::Mean,
        },
        &mut rng,
    )?;
    let projector = SubpromptProjector::new(
        ProjectorConfig {
            d,
            d_p: 4,
            hidden: 8,
            max_slots: 3,
        },
        &mut rng,
    )?;

    let instruction = Tensor::randn(&[5, d], 1.0, &mut rng);
    let observations: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[1, d], 1.0, &mut rng)).collect();
    let concepts = encoder.rollout_concepts(&instruction, &observations)?;
    println!("{} concept nodes from {} steps", concepts.len(), observations.len());

    let keys = concepts.keys();
    let v = concepts.matrix()?;
    let mut state = RecurrentState::fresh();
    for step in 0..3 {
        let (next, out) = graph.forward(&v, &keys, &state, None)?;
        let gate_mean = out.order_gate.data().iter().sum::<f64>() / out.order_gate.numel() as f64;
        println!("graph step {step}: mean order gate {gate_mean:.3}");
        state = next;
        if step == 2 {
            for p in projector.generate(&out.fused, 3)? {
                println!("  slot {}: {:?}", p.slot_index, p.embedding.data());
            }
        }
    }
    Ok(())
}
