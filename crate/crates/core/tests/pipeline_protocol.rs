use std::fs;

use bicopula::copula::{CopulaParams, MarginalPrediction};
use bicopula::nn::ModelConfig;
use bicopula::pipeline::{
    auc_midrank, batch_loss, fold_splits, init_model, metrics_from, predict_patients, run_crossval, run_warmup,
    summarize, DataSource, EstimatedCopula, ExperimentConfig, LossMode, Objective, METRIC_NAMES,
};
use bicopula::synthdata::{Dataset, SynthConfig};
use bicopula::Error;
use proptest::prelude::*;

fn compact() -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        ..Default::default()
    }
}

fn tiny(n: usize, seed: u64) -> (ExperimentConfig, Dataset) {
    let sc = SynthConfig {
        n_patients: n,
        seed,
        ..Default::default()
    };
    let ds = Dataset::generate(&sc).unwrap();
    let cfg = ExperimentConfig {
        model: compact(),
        data: DataSource::Synth(sc),
        epochs_warmup: 1,
        epochs_copula: 1,
        lr: 1e-3,
        seed,
        ..Default::default()
    };
    (cfg, ds)
}

#[test]
fn first_epoch_lowers_training_loss_on_five_seeds() {
    for seed in 0..5 {
        let sc = SynthConfig {
            seed,
            ..Default::default()
        };
        let ds = Dataset::generate(&sc).unwrap();
        let cfg = ExperimentConfig {
            model: compact(),
            data: DataSource::Synth(sc),
            epochs_warmup: 1,
            lr: 1e-3,
            eval_every: 0,
            seed,
            ..Default::default()
        };
        let split = &fold_splits(ds.len(), &cfg).unwrap()[0];
        let labels: Vec<_> = split.train.iter().map(|&p| ds.labels[p]).collect();
        let obj = Objective::Empirical {
            reg_weight: 1.0,
            cls_weight: 1.0,
        };
        let m0 = init_model(&cfg, &ds, split).unwrap();
        let l0 = batch_loss(&obj, &predict_patients(&m0, &ds, &split.train).unwrap(), &labels).unwrap().loss;
        let out = run_warmup(&cfg, &ds, split, &mut |_| {}).unwrap();
        let l1 = batch_loss(&obj, &out.train_predictions, &labels).unwrap().loss;
        assert!(l1 < l0, "seed {seed}: {l0} -> {l1}");
    }
}

#[test]
fn crossval_is_byte_reproducible_and_independent_of_jobs() {
    let (cfg, ds) = tiny(60, 2);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run_crossval(&cfg, &ds, Some(&a), 1).unwrap();
    run_crossval(&cfg, &ds, Some(&b), 3).unwrap();
    for f in ["metrics.csv", "summary.json", "log.jsonl", "config.json", "fold2/copula_params.json", "fold4/final.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    for (name, ms) in &ra.summary.metrics {
        let mean = ra.records.iter().map(|r| r.metric(name).unwrap()).sum::<f64>() / 5.0;
        assert!((ms.mean - mean).abs() <= 1e-12);
    }
    for r in &ra.records {
        assert_eq!(r.config_digest, cfg.digest());
    }
}

#[test]
fn rerun_replaces_the_run_directory_whole() {
    let (cfg, ds) = tiny(40, 3);
    let cfg = ExperimentConfig { folds: 1, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    fs::create_dir_all(out.join("stale")).unwrap();
    run_crossval(&cfg, &ds, Some(&out), 1).unwrap();
    assert!(!out.join("stale").exists());
    assert!(out.join("fold0/warmup.ckpt").exists());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("run")]);
}

#[test]
fn folds_split_patients_not_eyes() {
    let (cfg, ds) = tiny(97, 9);
    let splits = fold_splits(ds.len(), &cfg).unwrap();
    let mut seen = vec![0; ds.len()];
    for s in &splits {
        for &p in &s.test {
            seen[p] += 1;
        }
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), ds.len());
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.len());
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn copula_params_carry_training_provenance() {
    let (cfg, ds) = tiny(40, 4);
    let cfg = ExperimentConfig { folds: 1, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_crossval(&cfg, &ds, Some(&out), 1).unwrap();
    let split = &fold_splits(ds.len(), &cfg).unwrap()[0];
    let est = EstimatedCopula::read(&out.join("fold0/copula_params.json")).unwrap();
    let meta = &est.params().meta;
    assert_eq!(meta.split, "train");
    assert_eq!(meta.sample_count, split.train.len());
    assert_eq!(meta.config_digest, cfg.digest());
    assert_eq!(meta.source_run, "fold0");

    // a document without training provenance cannot feed module 3
    let foreign = dir.path().join("foreign.json");
    fs::write(&foreign, CopulaParams::independent().to_json().unwrap()).unwrap();
    assert!(matches!(EstimatedCopula::read(&foreign), Err(Error::Protocol(_))));
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let (cfg, mut ds) = tiny(30, 6);
    let split = fold_splits(ds.len(), &cfg).unwrap().remove(0);
    ds.labels[split.train[0]].y1 = f64::NAN;
    let err = run_warmup(&cfg, &ds, &split, &mut |_| {}).err().unwrap();
    match err {
        Error::NonFiniteLoss { epoch, detail, .. } => {
            assert_eq!(epoch, 0);
            assert!(detail.contains("warmup"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn summary_std_is_sample_std() {
    let (cfg, _) = tiny(10, 0);
    let mut recs = Vec::new();
    for v in [1.0, 2.0, 4.0] {
        let mut r = metrics_from(
            &[MarginalPrediction {
                mu1: v,
                mu2: v,
                logit3: 0.0,
                logit4: 0.0,
            }],
            &[bicopula::copula::LabelVector {
                y1: 0.0,
                y2: 0.0,
                y3: true,
                y4: false,
            }],
        );
        r.loss_mode = LossMode::Copula;
        recs.push(r);
    }
    let s = summarize(&cfg, "id", &recs);
    let m = &s.metrics["mse_al_ou"];
    assert!((m.mean - 7.0).abs() < 1e-12);
    assert!((m.std - 63f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.metrics.len(), METRIC_NAMES.len());
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in 0u64..1000) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 10)) & 1 == 1 || i == 0).collect();
        prop_assume!(labels.iter().any(|y| !y));
        let a = auc_midrank(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp()).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, auc_midrank(&mapped, &labels).unwrap());
        let flipped: Vec<bool> = labels.iter().map(|y| !y).collect();
        prop_assert!((a + auc_midrank(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ou_metrics_are_eye_means(raw in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -6.0f64..6.0, -6.0f64..6.0, any::<bool>(), any::<bool>()), 2..30)) {
        let preds: Vec<_> = raw.iter().map(|r| MarginalPrediction { mu1: r.0, mu2: r.1, logit3: r.2, logit4: r.3 }).collect();
        let labels: Vec<_> = raw.iter().map(|r| bicopula::copula::LabelVector { y1: r.1, y2: r.0, y3: r.4, y4: r.5 }).collect();
        let m = metrics_from(&preds, &labels);
        prop_assert_eq!(m.mse_al_ou, 0.5 * (m.mse_al_os + m.mse_al_od));
        prop_assert_eq!(m.ce_hm_ou, 0.5 * (m.ce_hm_os + m.ce_hm_od));
        prop_assert!(m.ce_hm_os >= 0.0 && m.mse_al_od >= 0.0);
        if !m.auc_undefined {
            prop_assert_eq!(m.auc_hm_ou, 0.5 * (m.auc_hm_os + m.auc_hm_od));
        }
    }
}
