//! One fold of the three-module procedure: warm-up under the empirical loss,
//! copula estimation from the training split, then copula-loss training.

use bicopula::nn::ModelConfig;
use bicopula::pipeline::{
    evaluate, fold_splits, run_copula_estimation, run_copula_training, run_warmup, DataSource, EpochLog,
    ExperimentConfig,
};
use bicopula::synthdata::SynthConfig;

fn show(l: EpochLog) {
    println!(
        "{:<8} epoch {:>2}  lr {:.0e}  loss {:>9.4}  val MSE {:.4}  val CE {:.4}  grad ratio {:.2}  floors {}",
        l.module,
        l.epoch,
        l.lr,
        l.train_loss,
        l.val_mse_al_ou.unwrap_or(f64::NAN),
        l.val_ce_hm_ou.unwrap_or(f64::NAN),
        l.grad_norm_ratio,
        l.floor_events
    );
}

fn main() -> bicopula::Result<()> {
    let cfg = ExperimentConfig {
        model: ModelConfig { patch_size: 8, embed_dim: 32, depth: 2, ..Default::default() },
        data: DataSource::Synth(SynthConfig { n_patients: 1000, seed: 3, ..Default::default() }),
        epochs_warmup: 6,
        epochs_copula: 4,
        lr: 1e-3,
        lr_drop_epoch: 5,
        lr_after: 1e-4,
        seed: 3,
        ..Default::default()
    };
    let ds = cfg.data.load()?;
    let split = fold_splits(ds.len(), &cfg)?.remove(0);
    println!("train {} / val {} / test {} patients", split.train.len(), split.val.len(), split.test.len());

    let warm = run_warmup(&cfg, &ds, &split, &mut show)?;
    let labels: Vec<_> = split.train.iter().map(|&p| ds.labels[p]).collect();
    let copula = run_copula_estimation(&warm.train_predictions, &labels, "fold0", &cfg.digest())?;
    let p = copula.params();
    println!(
        "estimated sigma ({:.3}, {:.3}), gamma12 {:.3}, gamma34 {:.3}",
        p.sigma1,
        p.sigma2,
        p.gamma.get(0, 1),
        p.gamma.get(2, 3)
    );

    let before = evaluate(&warm.model, &ds, &split.test)?;
    let out = run_copula_training(&cfg, &ds, &split, warm.model, &copula, &mut show)?;
    let after = evaluate(&out.model, &ds, &split.test)?;
    println!("\ntest        MSE-AL-OU  CE-HM-OU  AUC-HM-OU");
    println!("warm-up     {:>9.4} {:>9.4} {:>10.4}", before.mse_al_ou, before.ce_hm_ou, before.auc_hm_ou);
    println!("copula      {:>9.4} {:>9.4} {:>10.4}", after.mse_al_ou, after.ce_hm_ou, after.auc_hm_ou);
    Ok(())
}
