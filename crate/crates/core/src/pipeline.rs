//! The three-module training procedure, evaluation metrics and
//! cross-validation.
//!
//! Module 1 warms the model up under the empirical loss, module 2 estimates
//! copula parameters from its training-split predictions, and module 3
//! continues training under the copula loss (or, for the baseline arm, under
//! the empirical loss again).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::copula::{
    binary_threshold, copula_loss, estimate_gamma, estimate_sigmas, gaussian_score_continuous, sigmoid, CopulaMeta,
    CopulaParams, LabelVector, MarginalPrediction,
};
use crate::error::{Error, Result};
use crate::io_util::{build_dir_atomic, write_atomic};
use crate::nn::{checkpoint, Adam, BiChannelModel, Eye, ForwardMode, Graph, ModelConfig, ParamStore, Tensor};
use crate::numcore::EPS_P;
use crate::synthdata::{Dataset, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Empirical,
    Copula,
}

impl LossMode {
    pub fn tag(self) -> &'static str {
        match self {
            LossMode::Empirical => "empirical",
            LossMode::Copula => "copula",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth(c) => Dataset::generate(c),
            DataSource::Path(p) => Dataset::read(p),
        }
    }
}

/// How the frozen trunk is initialized before module 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkInit {
    Random,
    /// Patch reconstruction with the trunk temporarily trainable.
    Pretext { epochs: usize, lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub epochs_warmup: usize,
    pub epochs_copula: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_after: f64,
    pub loss_mode: LossMode,
    /// Number of folds actually run, at most the number of chunks implied by
    /// `split`.
    pub folds: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub reg_weight: f64,
    pub cls_weight: f64,
    pub reestimate_each_epoch: bool,
    /// Validation metrics every this many epochs; 0 disables them.
    pub eval_every: usize,
    pub trunk_init: TrunkInit,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            data: DataSource::default(),
            epochs_warmup: 20,
            epochs_copula: 15,
            batch_size: 32,
            lr: 1e-4,
            lr_drop_epoch: 10,
            lr_after: 1e-5,
            loss_mode: LossMode::Copula,
            folds: 5,
            split: [0.6, 0.2, 0.2],
            seed: 0,
            reg_weight: 1.0,
            cls_weight: 1.0,
            reestimate_each_epoch: false,
            eval_every: 1,
            trunk_init: TrunkInit::Random,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
            if s.image_size != self.model.image_size || s.channels != self.model.channels {
                return fail("data image size/channels disagree with model config".into());
            }
        }
        if self.epochs_warmup == 0 || self.epochs_copula == 0 {
            return fail("epochs_warmup and epochs_copula must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr_after > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.reg_weight >= 0.0 && self.cls_weight >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if let TrunkInit::Pretext { epochs, lr } = self.trunk_init {
            if epochs == 0 || lr <= 0.0 {
                return fail("pretext needs epochs >= 1 and lr > 0".into());
            }
        }
        let (k, _) = self.chunks()?;
        if self.folds == 0 || self.folds > k {
            return fail(format!("folds must lie in 1..={k}, got {}", self.folds));
        }
        Ok(())
    }

    /// Number of equal patient chunks and how many of them form the
    /// validation split.
    fn chunks(&self) -> Result<(usize, usize)> {
        let [tr, va, te] = self.split;
        if [tr, va, te].iter().any(|f| !(*f > 0.0)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {:?}", self.split)));
        }
        let k = (1.0 / te).round();
        let v = (va * k).round();
        if (k * te - 1.0).abs() > 1e-9 || (v - va * k).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split {:?} must be whole multiples of the test fraction",
                self.split
            )));
        }
        Ok((k as usize, v as usize))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr
        } else {
            self.lr_after
        }
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent seed for a tagged sub-task.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patient-level folds: patients are shuffled once with the seed and cut into
/// equal chunks; fold `f` tests on chunk `f`, validates on the next chunks
/// and trains on the rest.
pub fn fold_splits(n_patients: usize, cfg: &ExperimentConfig) -> Result<Vec<FoldSplit>> {
    let (k, nv) = cfg.chunks()?;
    if n_patients < k {
        return Err(Error::Config(format!("{n_patients} patients cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n_patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xf01d])));
    let bounds: Vec<usize> = (0..=k).map(|i| i * n_patients / k).collect();
    let chunk = |c: usize| &order[bounds[c]..bounds[c + 1]];
    Ok((0..k)
        .map(|f| {
            let test = chunk(f).to_vec();
            let val_chunks: Vec<usize> = (1..=nv).map(|j| (f + j) % k).collect();
            let val = val_chunks.iter().flat_map(|&c| chunk(c).iter().copied()).collect();
            let train = (0..k)
                .filter(|c| *c != f && !val_chunks.contains(c))
                .flat_map(|c| chunk(c).iter().copied())
                .collect();
            FoldSplit { fold: f, train, val, test }
        })
        .collect())
}

/// Metrics on one split. Undefined AUCs (single-class split) are reported as
/// [`AUC_UNDEFINED`] with `auc_undefined` set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fold: usize,
    pub loss_mode: LossMode,
    pub auc_hm_os: f64,
    pub auc_hm_od: f64,
    pub auc_hm_ou: f64,
    pub ce_hm_os: f64,
    pub ce_hm_od: f64,
    pub ce_hm_ou: f64,
    pub mse_al_os: f64,
    pub mse_al_od: f64,
    pub mse_al_ou: f64,
    pub floor_events: usize,
    pub auc_undefined: bool,
    pub config_digest: String,
}

pub const AUC_UNDEFINED: f64 = -1.0;

pub const METRIC_NAMES: [&str; 9] = [
    "auc_hm_os",
    "auc_hm_od",
    "auc_hm_ou",
    "ce_hm_os",
    "ce_hm_od",
    "ce_hm_ou",
    "mse_al_os",
    "mse_al_od",
    "mse_al_ou",
];

impl MetricsRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "auc_hm_os" => self.auc_hm_os,
            "auc_hm_od" => self.auc_hm_od,
            "auc_hm_ou" => self.auc_hm_ou,
            "ce_hm_os" => self.ce_hm_os,
            "ce_hm_od" => self.ce_hm_od,
            "ce_hm_ou" => self.ce_hm_ou,
            "mse_al_os" => self.mse_al_os,
            "mse_al_od" => self.mse_al_od,
            "mse_al_ou" => self.mse_al_ou,
            _ => return None,
        })
    }

    pub const CSV_HEADER: &'static str = "fold,loss_mode,auc_hm_os,auc_hm_od,auc_hm_ou,ce_hm_os,ce_hm_od,ce_hm_ou,\
mse_al_os,mse_al_od,mse_al_ou,floor_events,auc_undefined,config_digest";

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.fold, self.loss_mode.tag());
        for name in METRIC_NAMES {
            write!(s, ",{}", self.metric(name).expect("known metric")).expect("string write");
        }
        write!(s, ",{},{},{}", self.floor_events, u8::from(self.auc_undefined), self.config_digest)
            .expect("string write");
        s
    }
}

/// Rank-sum AUC with midranks for ties; `None` when one class is absent.
pub fn auc_midrank(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean binary cross-entropy with probabilities clamped to `[EPS_P, 1 - EPS_P]`.
pub fn mean_bce(logits: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| {
            let p = sigmoid(l).clamp(EPS_P, 1.0 - EPS_P);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / logits.len() as f64
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64
}

/// Predictions for both eyes of the listed patients.
pub fn predict_patients(model: &BiChannelModel, ds: &Dataset, patients: &[usize]) -> Result<Vec<MarginalPrediction>> {
    let os = model.predict(&ds.gather(patients, Eye::Os), patients.len(), Eye::Os, ForwardMode::Full)?;
    let od = model.predict(&ds.gather(patients, Eye::Od), patients.len(), Eye::Od, ForwardMode::Full)?;
    Ok(os
        .iter()
        .zip(&od)
        .map(|(a, b)| MarginalPrediction {
            mu1: a.0,
            mu2: b.0,
            logit3: a.1,
            logit4: b.1,
        })
        .collect())
}

/// Metrics from predictions and labels. `fold`, `loss_mode`, `floor_events`
/// and `config_digest` are left for the caller.
pub fn metrics_from(preds: &[MarginalPrediction], labels: &[LabelVector]) -> MetricsRecord {
    let col = |f: fn(&MarginalPrediction) -> f64| preds.iter().map(f).collect::<Vec<_>>();
    let lab = |f: fn(&LabelVector) -> f64| labels.iter().map(f).collect::<Vec<_>>();
    let hm = |f: fn(&LabelVector) -> bool| labels.iter().map(f).collect::<Vec<_>>();
    let (l3, l4) = (col(|p| p.logit3), col(|p| p.logit4));
    let (h3, h4) = (hm(|l| l.y3), hm(|l| l.y4));
    let auc_os = auc_midrank(&l3, &h3);
    let auc_od = auc_midrank(&l4, &h4);
    let undefined = auc_os.is_none() || auc_od.is_none();
    let (ce_os, ce_od) = (mean_bce(&l3, &h3), mean_bce(&l4, &h4));
    let mse_os = mse(&col(|p| p.mu1), &lab(|l| l.y1));
    let mse_od = mse(&col(|p| p.mu2), &lab(|l| l.y2));
    let auc_os = auc_os.unwrap_or(AUC_UNDEFINED);
    let auc_od = auc_od.unwrap_or(AUC_UNDEFINED);
    MetricsRecord {
        fold: 0,
        loss_mode: LossMode::Empirical,
        auc_hm_os: auc_os,
        auc_hm_od: auc_od,
        auc_hm_ou: if undefined { AUC_UNDEFINED } else { 0.5 * (auc_os + auc_od) },
        ce_hm_os: ce_os,
        ce_hm_od: ce_od,
        ce_hm_ou: 0.5 * (ce_os + ce_od),
        mse_al_os: mse_os,
        mse_al_od: mse_od,
        mse_al_ou: 0.5 * (mse_os + mse_od),
        floor_events: 0,
        auc_undefined: undefined,
        config_digest: String::new(),
    }
}

pub fn evaluate(model: &BiChannelModel, ds: &Dataset, patients: &[usize]) -> Result<MetricsRecord> {
    if patients.is_empty() {
        return Err(Error::DegenerateInput("cannot evaluate an empty split".into()));
    }
    let preds = predict_patients(model, ds, patients)?;
    let labels: Vec<LabelVector> = patients.iter().map(|&p| ds.labels[p]).collect();
    Ok(metrics_from(&preds, &labels))
}

/// Training objective for one batch.
#[derive(Clone, Debug)]
pub enum Objective {
    /// `reg_weight·(y - mu)² + cls_weight·BCE` per eye.
    Empirical { reg_weight: f64, cls_weight: f64 },
    Copula(CopulaParams),
}

/// Loss and output cotangents for one batch, averaged over patients.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    /// Per patient `[d_mu_os, d_mu_od, d_logit_os, d_logit_od]`.
    pub seeds: Vec<[f64; 4]>,
    pub floor_events: usize,
}

pub fn batch_loss(objective: &Objective, preds: &[MarginalPrediction], labels: &[LabelVector]) -> Result<BatchLoss> {
    let n = preds.len() as f64;
    match objective {
        Objective::Empirical { reg_weight, cls_weight } => {
            let mut loss = 0.0;
            let mut seeds = Vec::with_capacity(preds.len());
            for (p, l) in preds.iter().zip(labels) {
                let (r1, r2) = (p.mu1 - l.y1, p.mu2 - l.y2);
                let bce = |logit: f64, y: bool| if y { -sigmoid(logit).ln() } else { -sigmoid(-logit).ln() };
                loss += reg_weight * (r1 * r1 + r2 * r2) + cls_weight * (bce(p.logit3, l.y3) + bce(p.logit4, l.y4));
                let ind = |y: bool| f64::from(u8::from(y));
                seeds.push([
                    2.0 * reg_weight * r1 / n,
                    2.0 * reg_weight * r2 / n,
                    cls_weight * (sigmoid(p.logit3) - ind(l.y3)) / n,
                    cls_weight * (sigmoid(p.logit4) - ind(l.y4)) / n,
                ]);
            }
            Ok(BatchLoss {
                loss: loss / n,
                seeds,
                floor_events: 0,
            })
        }
        Objective::Copula(params) => {
            let out = copula_loss(labels, preds, params)?;
            Ok(BatchLoss {
                loss: out.loss / n,
                seeds: out
                    .grads
                    .iter()
                    .map(|g| [g.d_mu1 / n, g.d_mu2 / n, g.d_logit3 / n, g.d_logit4 / n])
                    .collect(),
                floor_events: out.floor_events,
            })
        }
    }
}

/// Result of one forward/backward pass over a batch of patients.
pub struct StepResult {
    pub loss: BatchLoss,
    pub preds: Vec<MarginalPrediction>,
    pub grads: crate::nn::Gradients,
    /// Gradient norm over trainable parameters from the regression outputs
    /// alone, divided by that from the classification outputs; only when
    /// requested.
    pub grad_norm_ratio: Option<f64>,
}

/// Forwards both eyes of each patient through their own routes, evaluates
/// the objective and backpropagates it.
pub fn batch_step(
    model: &BiChannelModel,
    ds: &Dataset,
    patients: &[usize],
    objective: &Objective,
    with_ratio: bool,
) -> Result<StepResult> {
    let b = patients.len();
    let mut g = Graph::new(model.store());
    let os = model.forward(&mut g, &ds.gather(patients, Eye::Os), b, Eye::Os, ForwardMode::Full)?;
    let od = model.forward(&mut g, &ds.gather(patients, Eye::Od), b, Eye::Od, ForwardMode::Full)?;
    let preds: Vec<MarginalPrediction> = (0..b)
        .map(|i| MarginalPrediction {
            mu1: g.value(os.mu)[i],
            mu2: g.value(od.mu)[i],
            logit3: g.value(os.logit)[i],
            logit4: g.value(od.logit)[i],
        })
        .collect();
    let labels: Vec<LabelVector> = patients.iter().map(|&p| ds.labels[p]).collect();
    let loss = batch_loss(objective, &preds, &labels)?;
    let col = |k: usize| loss.seeds.iter().map(|s| s[k]).collect::<Vec<f64>>();
    let (s0, s1, s2, s3) = (col(0), col(1), col(2), col(3));
    let grads = g.backward(&[(os.mu, &s0), (od.mu, &s1), (os.logit, &s2), (od.logit, &s3)])?;
    let grad_norm_ratio = if with_ratio {
        let ids = model.store().trainable_ids();
        let reg = g.backward(&[(os.mu, &s0), (od.mu, &s1)])?.norm_over(&ids);
        let cls = g.backward(&[(os.logit, &s2), (od.logit, &s3)])?.norm_over(&ids);
        Some(if cls > 0.0 { reg / cls } else { f64::INFINITY })
    } else {
        None
    };
    Ok(StepResult {
        loss,
        preds,
        grads,
        grad_norm_ratio,
    })
}

/// One line of `log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    pub module: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub floor_events: usize,
    pub grad_norm_ratio: f64,
    pub val_mse_al_ou: Option<f64>,
    pub val_ce_hm_ou: Option<f64>,
    pub val_auc_hm_ou: Option<f64>,
    pub frozen_checksum: String,
    pub config_digest: String,
}

struct Phase<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a Dataset,
    split: &'a FoldSplit,
    module: &'static str,
    tag: u64,
}

impl Phase<'_> {
    /// Runs `epochs` epochs; `objective_for` supplies the objective at the
    /// start of each epoch.
    fn train(
        &self,
        model: &mut BiChannelModel,
        epochs: usize,
        mut objective_for: impl FnMut(&BiChannelModel, usize) -> Result<Objective>,
        log: &mut dyn FnMut(EpochLog),
    ) -> Result<usize> {
        let cfg = self.cfg;
        let mut adam = Adam::new();
        let mut floor_total = 0;
        let mut order = self.split.train.clone();
        for epoch in 0..epochs {
            let objective = objective_for(model, epoch)?;
            let lr = cfg.lr_at(epoch);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[self.tag, self.split.fold as u64, epoch as u64]));
            order.shuffle(&mut rng);
            let (mut loss_sum, mut floor, mut ratio) = (0.0, 0, f64::NAN);
            let mut steps = 0;
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                let r = batch_step(model, self.ds, batch, &objective, step == 0)?;
                if !r.loss.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!(
                            "{} loss {}; patients {:?}; predictions {:?}",
                            self.module, r.loss.loss, batch, r.preds
                        ),
                    });
                }
                if let Some(v) = r.grad_norm_ratio {
                    ratio = v;
                }
                loss_sum += r.loss.loss;
                floor += r.loss.floor_events;
                steps += 1;
                model.store_mut().accumulate(&r.grads)?;
                adam.step(model.store_mut(), lr);
            }
            floor_total += floor;
            let val = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !self.split.val.is_empty() {
                Some(evaluate(model, self.ds, &self.split.val)?)
            } else {
                None
            };
            log(EpochLog {
                fold: self.split.fold,
                module: self.module.into(),
                epoch,
                lr,
                train_loss: loss_sum / steps as f64,
                floor_events: floor,
                grad_norm_ratio: ratio,
                val_mse_al_ou: val.as_ref().map(|m| m.mse_al_ou),
                val_ce_hm_ou: val.as_ref().map(|m| m.ce_hm_ou),
                val_auc_hm_ou: val.as_ref().map(|m| m.auc_hm_ou),
                frozen_checksum: model.store().frozen_checksum(),
                config_digest: cfg.digest(),
            });
        }
        Ok(floor_total)
    }
}

/// A freshly initialized model for a fold, with head biases set from the
/// training split and the trunk optionally pretrained.
pub fn init_model(cfg: &ExperimentConfig, ds: &Dataset, split: &FoldSplit) -> Result<BiChannelModel> {
    let mut model = BiChannelModel::new(cfg.model.clone(), derive_seed(cfg.seed, &[0x30de1, split.fold as u64]))?;
    if let TrunkInit::Pretext { epochs, lr } = cfg.trunk_init {
        pretext_reconstruction(&mut model, ds, &split.train, epochs, lr, derive_seed(cfg.seed, &[0x9e7, split.fold as u64]))?;
    }
    let train = &split.train;
    if train.is_empty() {
        return Err(Error::DegenerateInput("empty training split".into()));
    }
    let n = train.len() as f64;
    let al: f64 = train.iter().map(|&p| ds.labels[p].y1 + ds.labels[p].y2).sum::<f64>() / (2.0 * n);
    let pos = train.iter().map(|&p| usize::from(ds.labels[p].y3) + usize::from(ds.labels[p].y4)).sum::<usize>() as f64;
    let rate = ((pos + 0.5) / (2.0 * n + 1.0)).clamp(1e-3, 1.0 - 1e-3);
    model.set_head_biases(al, (rate / (1.0 - rate)).ln());
    Ok(model)
}

/// Trains the trunk to reconstruct its input patches through a linear
/// decoder, then refreezes it. LoRA and adapters take no part.
pub fn pretext_reconstruction(
    model: &mut BiChannelModel,
    ds: &Dataset,
    patients: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    let c = model.config().clone();
    let (pd, d) = (c.patch_dim(), c.embed_dim);
    let mut dec = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_id = dec.add(
        "decoder.weight",
        Tensor::from_fn(vec![pd, d], |_| {
            let z: f64 = rng.sample(StandardNormal);
            z / (d as f64).sqrt()
        }),
        true,
    );
    let b_id = dec.add("decoder.bias", Tensor::zeros(vec![pd]), true);
    let mut adam = Adam::new();
    let mut dec_adam = Adam::new();
    model.set_trunk_trainable(true);
    let mut order = patients.to_vec();
    let result = (|| -> Result<()> {
        for epoch in 0..epochs {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
            for batch in order.chunks(32) {
                for eye in Eye::BOTH {
                    let imgs = ds.gather(batch, eye);
                    let target = model.patchify(&imgs, batch.len())?;
                    let mut g = Graph::new(model.store());
                    let tok = model.encode_tokens(&mut g, &imgs, batch.len(), eye, ForwardMode::FrozenTrunk)?;
                    let t = g.value(tok);
                    let rows = t.len() / d;
                    let (w, bias) = (dec.get(w_id).data(), dec.get(b_id).data());
                    let scale = 2.0 / (rows * pd) as f64;
                    let mut dt = vec![0.0; rows * d];
                    let mut dw = vec![0.0; pd * d];
                    let mut db = vec![0.0; pd];
                    for r in 0..rows {
                        let tr = &t[r * d..][..d];
                        for o in 0..pd {
                            let wrow = &w[o * d..][..d];
                            let y = bias[o] + wrow.iter().zip(tr).map(|(a, b)| a * b).sum::<f64>();
                            let e = scale * (y - target[r * pd + o]);
                            db[o] += e;
                            for j in 0..d {
                                dw[o * d + j] += e * tr[j];
                                dt[r * d + j] += e * wrow[j];
                            }
                        }
                    }
                    let grads = g.backward(&[(tok, &dt)])?;
                    drop(g);
                    model.store_mut().accumulate(&grads)?;
                    adam.step(model.store_mut(), lr);
                    dec.get_mut(w_id).accumulate_grad(&dw)?;
                    dec.get_mut(b_id).accumulate_grad(&db)?;
                    dec_adam.step(&mut dec, lr);
                }
            }
        }
        Ok(())
    })();
    model.set_trunk_trainable(false);
    result
}

pub struct WarmupOutput {
    pub model: BiChannelModel,
    pub train_predictions: Vec<MarginalPrediction>,
}

/// Module 1: empirical-loss training of the trainable set.
pub fn run_warmup(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &FoldSplit,
    log: &mut dyn FnMut(EpochLog),
) -> Result<WarmupOutput> {
    cfg.validate()?;
    let mut model = init_model(cfg, ds, split)?;
    let phase = Phase {
        cfg,
        ds,
        split,
        module: "warmup",
        tag: 1,
    };
    let objective = Objective::Empirical {
        reg_weight: cfg.reg_weight,
        cls_weight: cfg.cls_weight,
    };
    phase.train(&mut model, cfg.epochs_warmup, |_, _| Ok(objective.clone()), log)?;
    let train_predictions = predict_patients(&model, ds, &split.train)?;
    Ok(WarmupOutput {
        model,
        train_predictions,
    })
}

/// Copula parameters produced by module 2. Module 3 accepts only this type.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatedCopula {
    params: CopulaParams,
}

impl EstimatedCopula {
    pub fn params(&self) -> &CopulaParams {
        &self.params
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.params.to_json()?.as_bytes())
    }

    /// Loads an artifact written by [`EstimatedCopula::write`]; refuses
    /// parameters whose provenance is not a training split.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params = CopulaParams::from_json(&text)?;
        if params.meta.split != "train" || params.meta.sample_count == 0 {
            return Err(Error::Protocol(format!(
                "{} is not a module-2 artifact estimated on a training split",
                path.display()
            )));
        }
        Ok(EstimatedCopula { params })
    }
}

/// Module 2: scales from residual standard deviations, correlations from
/// Gaussian scores (standardized residuals and fitted-probability scores).
pub fn run_copula_estimation(
    preds: &[MarginalPrediction],
    labels: &[LabelVector],
    source_run: &str,
    config_digest: &str,
) -> Result<EstimatedCopula> {
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.len()],
            got: vec![preds.len()],
        });
    }
    let ctx = |e: Error| match e {
        Error::DegenerateInput(m) => Error::DegenerateInput(format!("copula estimation for {source_run}: {m}")),
        other => other,
    };
    let r1: Vec<f64> = labels.iter().zip(preds).map(|(l, p)| l.y1 - p.mu1).collect();
    let r2: Vec<f64> = labels.iter().zip(preds).map(|(l, p)| l.y2 - p.mu2).collect();
    let (s1, s2) = estimate_sigmas(&r1, &r2).map_err(ctx)?;
    let z1: Vec<f64> = labels
        .iter()
        .zip(preds)
        .map(|(l, p)| gaussian_score_continuous(l.y1, p.mu1, s1))
        .collect::<Result<_>>()?;
    let z2: Vec<f64> = labels
        .iter()
        .zip(preds)
        .map(|(l, p)| gaussian_score_continuous(l.y2, p.mu2, s2))
        .collect::<Result<_>>()?;
    let t3: Vec<f64> = preds.iter().map(|p| binary_threshold(p.logit3)).collect();
    let t4: Vec<f64> = preds.iter().map(|p| binary_threshold(p.logit4)).collect();
    let gamma = estimate_gamma(&z1, &z2, &t3, &t4).map_err(ctx)?;
    let mut params = CopulaParams::new(gamma, s1, s2)?;
    params.meta = CopulaMeta {
        source_run: source_run.into(),
        sample_count: preds.len(),
        split: "train".into(),
        config_digest: config_digest.into(),
    };
    Ok(EstimatedCopula { params })
}

pub struct TrainOutput {
    pub model: BiChannelModel,
    pub floor_events: usize,
    /// Parameters in force at the end of training; differs from the input
    /// only when re-estimation is enabled.
    pub copula: EstimatedCopula,
}

/// Module 3: continues from the warm-up model under the configured loss.
/// Under `LossMode::Copula` the parameters stay fixed unless
/// `reestimate_each_epoch` is set.
pub fn run_copula_training(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    split: &FoldSplit,
    mut model: BiChannelModel,
    copula: &EstimatedCopula,
    log: &mut dyn FnMut(EpochLog),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let phase = Phase {
        cfg,
        ds,
        split,
        module: match cfg.loss_mode {
            LossMode::Copula => "copula",
            LossMode::Empirical => "empirical",
        },
        tag: 3,
    };
    let mut current = copula.clone();
    let digest = cfg.digest();
    let source = format!("fold{}", split.fold);
    let labels: Vec<LabelVector> = split.train.iter().map(|&p| ds.labels[p]).collect();
    let floor_events = phase.train(
        &mut model,
        cfg.epochs_copula,
        |m, epoch| match cfg.loss_mode {
            LossMode::Empirical => Ok(Objective::Empirical {
                reg_weight: cfg.reg_weight,
                cls_weight: cfg.cls_weight,
            }),
            LossMode::Copula => {
                if cfg.reestimate_each_epoch && epoch > 0 {
                    let preds = predict_patients(m, ds, &split.train)?;
                    current = run_copula_estimation(&preds, &labels, &source, &digest)?;
                }
                Ok(Objective::Copula(current.params.clone()))
            }
        },
        log,
    )?;
    Ok(TrainOutput {
        model,
        floor_events,
        copula: current,
    })
}

/// Everything one fold produces.
pub struct FoldResult {
    pub record: MetricsRecord,
    pub copula: EstimatedCopula,
    pub logs: Vec<EpochLog>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
    pub warmup: BiChannelModel,
    pub model: BiChannelModel,
}

/// Modules 1–3 on one fold, then test-split evaluation.
pub fn run_fold(cfg: &ExperimentConfig, ds: &Dataset, split: &FoldSplit) -> Result<FoldResult> {
    let mut logs = Vec::new();
    let wrap = |e: Error| Error::Fold {
        fold: split.fold,
        source: Box::new(e),
    };
    let warm = run_warmup(cfg, ds, split, &mut |l| logs.push(l)).map_err(wrap)?;
    let before = init_model(cfg, ds, split).map_err(wrap)?.store().frozen_checksum();
    let labels: Vec<LabelVector> = split.train.iter().map(|&p| ds.labels[p]).collect();
    let copula = run_copula_estimation(&warm.train_predictions, &labels, &format!("fold{}", split.fold), &cfg.digest())
        .map_err(wrap)?;
    let warmup = warm.model.clone();
    let out = run_copula_training(cfg, ds, split, warm.model, &copula, &mut |l| logs.push(l)).map_err(wrap)?;
    let mut record = evaluate(&out.model, ds, &split.test).map_err(wrap)?;
    record.fold = split.fold;
    record.loss_mode = cfg.loss_mode;
    record.floor_events = out.floor_events;
    record.config_digest = cfg.digest();
    Ok(FoldResult {
        record,
        copula: out.copula,
        logs,
        frozen_checksum_before: before,
        frozen_checksum_after: out.model.store().frozen_checksum(),
        warmup,
        model: out.model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// `summary.json`: mean and sample standard deviation of each metric over
/// folds, plus what identifies the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub loss_mode: LossMode,
    pub adapters_enabled: bool,
    pub lora_rank: usize,
    pub adapter_position: crate::nn::AdapterPosition,
    pub n_folds: usize,
    pub seed: u64,
    pub dataset_id: String,
    pub config_digest: String,
    pub floor_events: usize,
    pub metrics: std::collections::BTreeMap<String, MeanStd>,
}

pub fn summarize(cfg: &ExperimentConfig, dataset_id: &str, records: &[MetricsRecord]) -> Summary {
    let n = records.len() as f64;
    let metrics = METRIC_NAMES
        .iter()
        .map(|&name| {
            let v: Vec<f64> = records.iter().map(|r| r.metric(name).expect("known metric")).collect();
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (name.to_string(), MeanStd { mean, std })
        })
        .collect();
    Summary {
        loss_mode: cfg.loss_mode,
        adapters_enabled: cfg.model.adapters_enabled,
        lora_rank: cfg.model.lora_rank,
        adapter_position: cfg.model.adapter_position,
        n_folds: records.len(),
        seed: cfg.seed,
        dataset_id: dataset_id.into(),
        config_digest: cfg.digest(),
        floor_events: records.iter().map(|r| r.floor_events).sum(),
        metrics,
    }
}

pub struct CrossvalResult {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
}

/// Runs the configured folds, at most `jobs` at a time, and writes the run
/// directory when `out` is given. Results are assembled in fold order, so the
/// outputs do not depend on `jobs`.
pub fn run_crossval(cfg: &ExperimentConfig, ds: &Dataset, out: Option<&Path>, jobs: usize) -> Result<CrossvalResult> {
    cfg.validate()?;
    let splits = fold_splits(ds.len(), cfg)?;
    let splits = &splits[..cfg.folds];
    let jobs = jobs.clamp(1, splits.len());
    let mut results: Vec<Option<Result<FoldResult>>> = (0..splits.len()).map(|_| None).collect();
    for wave in splits.chunks(jobs) {
        let done: Vec<Result<FoldResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave.iter().map(|sp| s.spawn(move || run_fold(cfg, ds, sp))).collect();
            handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
        });
        for (sp, r) in wave.iter().zip(done) {
            results[sp.fold] = Some(r);
        }
    }
    let folds: Vec<FoldResult> = results.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<_>>()?;
    let records: Vec<MetricsRecord> = folds.iter().map(|f| f.record.clone()).collect();
    let summary = summarize(cfg, &ds.dataset_id(), &records);
    if let Some(dir) = out {
        write_run_dir(dir, cfg, &folds, &summary)?;
    }
    Ok(CrossvalResult { records, summary })
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(MetricsRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, folds: &[FoldResult], summary: &Summary) -> Result<()> {
    build_dir_atomic(dir, |tmp| {
        let put = |name: &str, text: String| {
            let p = tmp.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("config.json", serde_json::to_string_pretty(cfg)?)?;
        let records: Vec<MetricsRecord> = folds.iter().map(|f| f.record.clone()).collect();
        put("metrics.csv", metrics_csv(&records))?;
        put("summary.json", serde_json::to_string_pretty(summary)?)?;
        let mut log = String::new();
        for f in folds {
            for l in &f.logs {
                log.push_str(&serde_json::to_string(l)?);
                log.push('\n');
            }
        }
        put("log.jsonl", log)?;
        for f in folds {
            let sub = tmp.join(format!("fold{}", f.record.fold));
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            f.copula.write(&sub.join("copula_params.json"))?;
            checkpoint::save_with_digest(&f.warmup, &sub.join("warmup.ckpt"), &cfg.digest())?;
            checkpoint::save_with_digest(&f.model, &sub.join("final.ckpt"), &cfg.digest())?;
        }
        Ok(())
    })
}
