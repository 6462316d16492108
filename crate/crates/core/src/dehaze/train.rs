//! Mini-batch training for the K-estimator and the attention head.
//!
//! Phase one fits the K-estimator on the reconstruction loss. If the
//! training set carries ROI masks, phase two freezes K and fits the
//! attention head on the gaze objective (see [`super::sample_loss`]).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    init_dehazer, sample_loss, sample_loss_and_grad, DehazerGrads, DehazerParams, RoiMask,
    Variant, K_LAYERS, LAYER_NAMES,
};
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs for the K-estimator phase.
    pub epochs: usize,
    /// Epochs for the attention phase; skipped when no sample has an ROI.
    pub attention_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub attention_learning_rate: f64,
    pub seed: u64,
    /// Only `"mse"` is supported.
    pub loss: String,
    /// Attention floor used while fitting the head. Zero lets the head learn
    /// the full on/off contrast; the pipeline applies its own floor.
    pub lambda_min: f64,
    /// Probability of swapping a training pair for `(clear, clear)` in the
    /// K phase, so the model also sees fog-free inputs.
    pub clear_mix: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            attention_epochs: 20,
            batch_size: 8,
            learning_rate: 0.01,
            attention_learning_rate: 0.01,
            seed: 7,
            loss: "mse".into(),
            lambda_min: 0.0,
            clear_mix: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("attention_learning_rate", self.attention_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_min) {
            return Err(Error::Config("train.lambda_min must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.clear_mix) {
            return Err(Error::Config("train.clear_mix must lie in [0, 1]".into()));
        }
        if self.loss != "mse" {
            return Err(Error::Config(format!("unsupported loss {:?}", self.loss)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub foggy: Image,
    pub clear: Image,
    pub roi: Option<RoiMask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Init,
    KEstimator,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: TrainPhase,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn initial_val_loss(&self) -> Option<f64> {
        self.epochs.first().and_then(|r| r.val_loss)
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .rev()
            .find(|r| r.phase != TrainPhase::Attention)
            .and_then(|r| r.val_loss)
    }
}

struct Adam {
    m: DehazerGrads,
    v: DehazerGrads,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &DehazerParams, lr: f64) -> Self {
        Self {
            m: DehazerGrads::zeros(params),
            v: DehazerGrads::zeros(params),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut DehazerParams, g: &DehazerGrads, layers: std::ops::Range<usize>) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for li in layers {
            let layer = params.layer_mut(li);
            let (m, v, g) = (&mut self.m.layers[li], &mut self.v.layers[li], &g.layers[li]);
            let groups = [
                (&mut layer.weight, &mut m.weight, &mut v.weight, &g.weight),
                (&mut layer.bias, &mut m.bias, &mut v.bias, &g.bias),
            ];
            for (p, m, v, g) in groups {
                for i in 0..p.len() {
                    m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                    v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                    p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

fn mean_loss(params: &DehazerParams, set: &[TrainSample], variant: Variant) -> Result<f64> {
    let losses = set
        .par_iter()
        .map(|s| sample_loss(params, s, variant))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / set.len() as f64)
}

fn check_pairs(set: &[TrainSample]) -> Result<()> {
    for s in set {
        s.foggy.ensure_same_shape(&s.clear, "training pair")?;
        if let Some(r) = &s.roi {
            if (r.height(), r.width()) != (s.foggy.height(), s.foggy.width()) {
                return Err(Error::shape("roi does not match training pair"));
            }
        }
    }
    Ok(())
}

fn finite_or_diverged(loss: f64, epoch: usize, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged {
            epoch,
            reason: format!("{what} loss is {loss}"),
        })
    }
}

/// One pass over `order` in mini-batches. Per-sample gradients are computed
/// in parallel and summed in batch order, so results do not depend on the
/// thread count.
fn run_epoch(
    params: &mut DehazerParams,
    adam: &mut Adam,
    batches: &[Vec<TrainSample>],
    variant: Variant,
    layers: std::ops::Range<usize>,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let per_sample = batch
            .par_iter()
            .map(|s| sample_loss_and_grad(params, s, variant))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = DehazerGrads::zeros(params);
        for (loss, g) in &per_sample {
            finite_or_diverged(*loss, epoch, "training")?;
            total += loss;
            acc.add_assign(g);
        }
        acc.scale(1.0 / batch.len() as f64);
        count += batch.len();
        adam.step(params, &acc, layers.clone());
        if !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "weights became non-finite".into(),
            });
        }
    }
    Ok(total / count as f64)
}

/// Trains a fresh dehazer seeded by `cfg.seed`. Returns the parameters and
/// per-epoch losses; the first history entry holds the losses at init.
pub fn train_dehazer(
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<(DehazerParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    check_pairs(train)?;
    check_pairs(val)?;

    let mut params = init_dehazer(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut history = TrainHistory::default();
    let val_loss = |p: &DehazerParams, v: Variant| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            mean_loss(p, val, v).map(Some)
        }
    };

    let init_train = finite_or_diverged(mean_loss(&params, train, Variant::Aod)?, 0, "initial")?;
    history.epochs.push(EpochRecord {
        epoch: 0,
        phase: TrainPhase::Init,
        train_loss: init_train,
        val_loss: val_loss(&params, Variant::Aod)?,
    });

    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<Vec<TrainSample>> = order
            .chunks(cfg.batch_size)
            .map(|idx| {
                idx.iter()
                    .map(|&i| {
                        let s = &train[i];
                        if cfg.clear_mix > 0.0 && rng.gen_bool(cfg.clear_mix) {
                            TrainSample {
                                foggy: s.clear.clone(),
                                clear: s.clear.clone(),
                                roi: None,
                            }
                        } else {
                            s.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let train_loss = run_epoch(&mut params, &mut adam, &batches, Variant::Aod, 0..K_LAYERS, epoch)?;
        let v = val_loss(&params, Variant::Aod)?;
        if let Some(v) = v {
            finite_or_diverged(v, epoch, "validation")?;
        }
        history.epochs.push(EpochRecord {
            epoch,
            phase: TrainPhase::KEstimator,
            train_loss,
            val_loss: v,
        });
    }

    let with_roi: Vec<TrainSample> = train.iter().filter(|s| s.roi.is_some()).cloned().collect();
    if cfg.attention_epochs > 0 && !with_roi.is_empty() {
        let variant = Variant::Aodx {
            lambda_min: cfg.lambda_min,
        };
        let val_roi: Vec<TrainSample> = val.iter().filter(|s| s.roi.is_some()).cloned().collect();
        let mut adam = Adam::new(&params, cfg.attention_learning_rate);
        let mut order: Vec<usize> = (0..with_roi.len()).collect();
        for e in 1..=cfg.attention_epochs {
            let epoch = cfg.epochs + e;
            order.shuffle(&mut rng);
            let batches: Vec<Vec<TrainSample>> = order
                .chunks(cfg.batch_size)
                .map(|idx| idx.iter().map(|&i| with_roi[i].clone()).collect())
                .collect();
            let train_loss = run_epoch(
                &mut params,
                &mut adam,
                &batches,
                variant,
                K_LAYERS..LAYER_NAMES.len(),
                epoch,
            )?;
            let v = if val_roi.is_empty() {
                None
            } else {
                Some(finite_or_diverged(mean_loss(&params, &val_roi, variant)?, epoch, "validation")?)
            };
            history.epochs.push(EpochRecord {
                epoch,
                phase: TrainPhase::Attention,
                train_loss,
                val_loss: v,
            });
        }
    }
    Ok((params, history))
}
