//! A small adapters × copula × rank grid run through cross-validation and
//! tabulated the same way as the `report` command.

use bicopula::cli::build_report;
use bicopula::nn::ModelConfig;
use bicopula::pipeline::{run_crossval, DataSource, ExperimentConfig, LossMode};
use bicopula::synthdata::{Dataset, SynthConfig};

fn main() -> bicopula::Result<()> {
    let synth = SynthConfig { n_patients: 400, seed: 11, ..Default::default() };
    let ds = Dataset::generate(&synth)?;
    let root = std::env::temp_dir().join("bicopula-ablation");
    let mut runs = Vec::new();
    for rank in [4, 8, 16] {
        for (adapters, loss) in [
            (false, LossMode::Empirical),
            (true, LossMode::Empirical),
            (false, LossMode::Copula),
            (true, LossMode::Copula),
        ] {
            let cfg = ExperimentConfig {
                model: ModelConfig {
                    patch_size: 8,
                    embed_dim: 32,
                    depth: 2,
                    lora_rank: rank,
                    adapters_enabled: adapters,
                    ..Default::default()
                },
                data: DataSource::Synth(synth.clone()),
                epochs_warmup: 3,
                epochs_copula: 2,
                lr: 1e-3,
                loss_mode: loss,
                folds: 2,
                seed: 11,
                ..Default::default()
            };
            let dir = root.join(format!("{}-{}-r{rank}", loss.tag(), if adapters { "ad" } else { "noad" }));
            run_crossval(&cfg, &ds, Some(&dir), 2)?;
            runs.push(dir);
        }
    }
    let report = build_report(&runs, false)?;
    print!("{}", report.table());
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}
