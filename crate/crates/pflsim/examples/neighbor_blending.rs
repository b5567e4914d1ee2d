//! Personalizes by interpolating the global model's predictions with a
//! nearest-neighbor estimate over each client's own examples, embedded in
//! the global model's representation space. Sweeps the mixing coefficient
//! from "pure global" to "pure neighbors".

use pflsim::data::{generate_synthetic, split_cross_silo, SplitSpec, SynthKind, SynthSpec};
use pflsim::engine::{run_fedavg, EngineConfig};
use pflsim::eval::summarize;
use pflsim::models::ArchDescriptor;
use pflsim::optim::ServerOptSpec;
use pflsim::personalize::knn::{knn_evaluate, KnnConfig};

fn main() -> pflsim::Result<()> {
    let spec = SynthSpec {
        kind: SynthKind::PlantedClusters,
        num_clients: 24,
        examples_per_client: (80, 20),
        feature_dim: 10,
        num_classes: 4,
        num_planted_clusters: 3,
        heterogeneity: 4.0,
        seed: 31,
    };
    let raw = generate_synthetic(&spec)?.dataset;
    let ds = split_cross_silo(&raw, &SplitSpec::cross_silo((0.7, 0.15, 0.15), 31))?;

    let arch = ArchDescriptor::mlp_classifier(ds.feature_dim, 16, ds.num_classes, 1e-4);
    let engine = EngineConfig::new(50, 24, 0.1, ServerOptSpec::fedavgm(0.9), 31);
    let global = run_fedavg(&ds, &arch, &engine)?;

    println!("mixing coefficient sweep (test accuracy):");
    for coef in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0] {
        let metrics = knn_evaluate(&ds, &global.params, &KnnConfig { k: 10, coef })?;
        let s = summarize(&metrics)?;
        let note = if coef == 0.0 { "  (identical to the global model)" } else { "" };
        println!("  coef {coef:.2}  {:.4}{note}", s.mean_after);
    }
    Ok(())
}
