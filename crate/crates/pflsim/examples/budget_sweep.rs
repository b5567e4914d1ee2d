//! Two tuning tools side by side: a server-side grid search over fine-tuning
//! hyperparameters, and a sweep that thins every client's personalization
//! set to measure how each strategy degrades when local data gets scarce.

use pflsim::data::{generate_synthetic, split_cross_device, SplitSpec, SynthKind, SynthSpec};
use pflsim::engine::{run_fedavg, EngineConfig};
use pflsim::eval::personalization_set_sweep;
use pflsim::models::ArchDescriptor;
use pflsim::optim::ServerOptSpec;
use pflsim::personalize::finetune::{finetune_evaluate, FinetuneConfig, FinetuneScope};
use pflsim::personalize::knn::{knn_evaluate, KnnConfig};
use pflsim::tuning::{grid_search, GridAxis, GridValue};

fn main() -> pflsim::Result<()> {
    let spec = SynthSpec {
        kind: SynthKind::PlantedClusters,
        num_clients: 80,
        examples_per_client: (40, 10),
        feature_dim: 8,
        num_classes: 3,
        num_planted_clusters: 3,
        heterogeneity: 4.0,
        seed: 61,
    };
    let raw = generate_synthetic(&spec)?.dataset;
    let ds = split_cross_device(&raw, &SplitSpec::cross_device((0.6, 0.2, 0.2), 61))?;

    let arch = ArchDescriptor::softmax(ds.feature_dim, ds.num_classes, 1e-4);
    let engine = EngineConfig::new(50, 12, 0.1, ServerOptSpec::adam(0.05), 61);
    let global = run_fedavg(&ds, &arch, &engine)?;

    // grid search scores each (lr, epochs) pair on the validation clients
    let axes = vec![
        GridAxis {
            name: "lr".into(),
            values: [0.001, 0.005, 0.01, 0.05].iter().map(|&v| GridValue::Float(v)).collect(),
        },
        GridAxis {
            name: "epochs".into(),
            values: [1i64, 3, 5, 10].iter().map(|&v| GridValue::Int(v)).collect(),
        },
    ];
    let outcome = grid_search(&axes, arch.metric_kind(), |point| {
        let cfg = FinetuneConfig {
            lr: point["lr"].as_f64()?,
            max_epochs: point["epochs"].as_usize()?,
            scope: FinetuneScope::AllLayers,
            batch_size: None,
        };
        let out = finetune_evaluate(&ds, &global.params, &cfg, 61)?;
        Ok(*out.epoch_curve.last().unwrap())
    })?;
    println!(
        "grid search winner: lr {} for {} epochs (validation accuracy {:.4})",
        outcome.best_point["lr"].as_f64()?,
        outcome.best_point["epochs"].as_usize()?,
        outcome.best_score
    );

    // thin the personalization sets and watch both strategies degrade;
    // the neighbor method leans on local data harder than fine-tuning does
    let best_ft = FinetuneConfig {
        lr: outcome.best_point["lr"].as_f64()?,
        max_epochs: outcome.best_point["epochs"].as_usize()?,
        scope: FinetuneScope::AllLayers,
        batch_size: None,
    };
    let fractions = [1.0, 0.5, 0.25, 0.1];

    println!("\nbudget     finetune     neighbors");
    let ft_sweep = personalization_set_sweep(&ds, &fractions, 61, |thinned| {
        Ok(finetune_evaluate(thinned, &global.params, &best_ft, 61)?.per_client)
    })?;
    let knn_sweep = personalization_set_sweep(&ds, &fractions, 61, |thinned| {
        knn_evaluate(thinned, &global.params, &KnnConfig { k: 10, coef: 0.9 })
    })?;
    for (ft, knn) in ft_sweep.iter().zip(&knn_sweep) {
        println!(
            "{:>5.0}%     {:.4}       {:.4}",
            ft.fraction * 100.0,
            ft.summary.mean_after,
            knn.summary.mean_after,
        );
    }
    Ok(())
}
