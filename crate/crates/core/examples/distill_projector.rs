//! Distils per-slot teacher prompt embeddings into both projector
//! variants and compares their final losses.

use istarkit::numerics::Tensor;
use istarkit::projector::{train_projector, DistillExample, ProjectorConfig, ProjectorVariant, SubpromptProjector};
use istarkit::seed::rng_for;

fn main() -> istarkit::Result<()> {
    let config = ProjectorConfig {
        d: 8,
        d_p: 4,
        hidden: 16,
        max_slots: 3,
    };
    let mut rng = rng_for(11, &[]);
    // Teachers are a fixed map of the pooled nodes, different per slot.
    let maps: Vec<Tensor> = (0..config.max_slots)
        .map(|_| Tensor::randn(&[config.d, config.d_p], 0.5, &mut rng))
        .collect();
    let batch: Vec<DistillExample> = (0..32)
        .map(|_| {
            let nodes = Tensor::randn(&[5, config.d], 1.0, &mut rng);
            let pooled = nodes.mean_rows();
            let teachers = maps.iter().map(|m| pooled.matmul(m).unwrap().flatten()).collect();
            DistillExample { nodes, teachers }
        })
        .collect();

    for variant in [ProjectorVariant::Enc, ProjectorVariant::EncDec] {
        let mut projector = SubpromptProjector::new(config, &mut rng_for(12, &[]))?;
        let curve = train_projector(&mut projector, variant, &batch, 300, 0.02)?;
        println!(
            "{variant:?}: distillation loss {:.4} -> {:.4}",
            curve[0],
            curve.last().unwrap()
        );
    }
    Ok(())
}
