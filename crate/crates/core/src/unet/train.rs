use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{soft_dice, LossWeights};
use super::net::{check_resolution, loss_and_gradients, padded_dims, preprocess, run};
use super::{Real, Tensor, UNetConfig, UNetError, UNetParams};
use crate::raster::{BinaryMask, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD; with `nesterov` the look-ahead variant.
    Sgd { momentum: f64, nesterov: bool },
    /// Adam with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub flips: bool,
    /// Quarter turns on square inputs, half turns otherwise.
    pub rot90: bool,
    /// Per-channel gain and offset drawn from `[-j, j]` on normalized input.
    pub intensity_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `lr_e = lr * (1 - e / epochs)^poly_exponent`.
    pub poly_exponent: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub augmentation: Augmentation,
    pub loss: LossWeights,
    pub seed: u64,
    pub folds: usize,
}

impl TrainConfig {
    /// Settings used for the desk-scale experiment.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            learning_rate: 0.01,
            poly_exponent: 0.9,
            optimizer: Optimizer::Sgd {
                momentum: 0.99,
                nesterov: true,
            },
            weight_decay: 3e-5,
            augmentation: Augmentation {
                flips: true,
                rot90: true,
                intensity_jitter: 0.1,
            },
            loss: LossWeights::default(),
            seed: 0,
            folds: 1,
        }
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let bad = |m: &str| Err(UNetError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return bad("epochs, batch_size and folds must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.poly_exponent >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive; poly_exponent and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.augmentation.intensity_jitter) {
            return bad("intensity_jitter must be in [0, 1)");
        }
        match self.optimizer {
            Optimizer::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => bad("momentum must be in [0, 1)"),
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad("adam betas must be in [0, 1) and eps positive")
            }
            _ => Ok(()),
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - epoch as f64 / self.epochs as f64).powf(self.poly_exponent)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: RasterImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_soft_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation soft Dice.
    pub params: UNetParams<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Prepared<T> {
    x: Tensor<T>,
    target: Vec<bool>,
}

fn prepare<T: Real>(set: &[TrainSample], ucfg: &UNetConfig, what: &str) -> Result<Vec<Prepared<T>>, UNetError> {
    if set.is_empty() {
        return Err(UNetError::EmptyDataset(format!("{what} set is empty")));
    }
    set.iter()
        .map(|s| {
            check_resolution(ucfg, &s.image)?;
            if s.image.channels() != ucfg.in_channels || s.mask.dims() != (s.image.height(), s.image.width()) {
                return Err(UNetError::ShapeMismatch(format!(
                    "{what} sample image {:?} x{} vs mask {:?}",
                    s.image.dims(),
                    s.image.channels(),
                    s.mask.dims()
                )));
            }
            Ok(Prepared {
                x: preprocess(&s.image),
                target: s.mask.bits().to_vec(),
            })
        })
        .collect()
}

/// Random flips, rotations and intensity jitter applied to one sample.
fn augment<T: Real>(p: &Prepared<T>, aug: &Augmentation, rng: &mut ChaCha8Rng) -> (Tensor<T>, Vec<bool>) {
    let (h, w) = (p.x.h, p.x.w);
    let flip_r = aug.flips && rng.random_bool(0.5);
    let flip_c = aug.flips && rng.random_bool(0.5);
    let turns = match (aug.rot90, h == w) {
        (false, _) => 0,
        (true, true) => rng.random_range(0..4),
        (true, false) => 2 * rng.random_range(0..2),
    };
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let source = |r: usize, c: usize| -> usize {
        let r = if flip_r { oh - 1 - r } else { r };
        let c = if flip_c { ow - 1 - c } else { c };
        let (sr, sc) = match turns {
            0 => (r, c),
            1 => (c, w - 1 - r),
            2 => (h - 1 - r, w - 1 - c),
            _ => (h - 1 - c, r),
        };
        sr * w + sc
    };
    let mut x = Tensor::zeros(p.x.c, oh, ow);
    let mut t = vec![false; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let s = source(r, c);
            t[r * ow + c] = p.target[s];
            for ch in 0..p.x.c {
                x.data[(ch * oh + r) * ow + c] = p.x.data[ch * h * w + s];
            }
        }
    }
    let j = aug.intensity_jitter;
    if j > 0.0 {
        for ch in 0..x.c {
            let gain = T::of(1.0 + rng.random_range(-j..=j));
            let offset = T::of(rng.random_range(-j..=j));
            for v in &mut x.data[ch * oh * ow..(ch + 1) * oh * ow] {
                *v = *v * gain + offset;
            }
        }
    }
    (x, t)
}

enum OptState<T> {
    Sgd { velocity: Vec<Vec<T>> },
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: i32 },
}

impl<T: Real> OptState<T> {
    fn new(opt: &Optimizer, params: &UNetParams<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        match opt {
            Optimizer::Sgd { .. } => OptState::Sgd { velocity: zeros() },
            Optimizer::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, opt: &Optimizer, params: &mut UNetParams<T>, grads: &UNetParams<T>, lr: f64, wd: f64) {
        match (self, *opt) {
            (OptState::Sgd { velocity }, Optimizer::Sgd { momentum, nesterov }) => {
                let (mu, lr, wd) = (T::of(momentum), T::of(lr), T::of(wd));
                for ((p, g), vel) in params.tensors.iter_mut().zip(&grads.tensors).zip(velocity) {
                    for ((w, &gv), v) in p.data.iter_mut().zip(&g.data).zip(vel.iter_mut()) {
                        let grad = gv + wd * *w;
                        *v = mu * *v + grad;
                        let step = if nesterov { grad + mu * *v } else { *v };
                        *w -= lr * step;
                    }
                }
            }
            (OptState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let (one, lr_t, eps_t, decay) = (T::one(), T::of(lr), T::of(eps), T::of(lr * wd));
                let (c1, c2) = (T::of(c1), T::of(c2));
                for (((p, g), ms), vs) in params.tensors.iter_mut().zip(&grads.tensors).zip(m).zip(v) {
                    for (((w, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(ms.iter_mut()).zip(vs.iter_mut()) {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        let update = (*mv / c1) / ((*vv / c2).sqrt() + eps_t);
                        *w -= lr_t * update + decay * *w;
                    }
                }
            }
            _ => unreachable!("optimizer state matches its config"),
        }
    }
}

/// Mean soft Dice of the foreground probability over a prepared set.
fn mean_soft_dice<T: Real>(params: &UNetParams<T>, set: &[Prepared<T>]) -> Result<f64, UNetError> {
    let mut total = 0.0;
    for s in set {
        let (ph, pw) = padded_dims(&params.config, s.x.h, s.x.w);
        let (logits, _) = run(params, &s.x.pad_to(ph, pw), false)?;
        let logits = logits.crop(s.x.h, s.x.w);
        let n = s.x.h * s.x.w;
        let prob: Vec<f64> = (0..n)
            .map(|i| 1.0 / (1.0 + (logits.data[i].f64() - logits.data[n + i].f64()).exp()))
            .collect();
        total += soft_dice(&prob, &s.target);
    }
    Ok(total / set.len() as f64)
}

/// Seeded training run. Initialization, data order and augmentation all
/// derive from `cfg.seed`, so a 64-bit run is reproducible bit for bit.
pub fn train<T: Real>(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    ucfg: &UNetConfig,
) -> Result<TrainOutcome<T>, UNetError> {
    cfg.validate()?;
    ucfg.validate()?;
    let train_data = prepare::<T>(train_set, ucfg, "training")?;
    let val_data = prepare::<T>(val_set, ucfg, "validation")?;

    let mut params = UNetParams::<T>::init(ucfg, cfg.seed)?;
    let mut state = OptState::new(&cfg.optimizer, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let (x, t) = augment(&train_data[i], &cfg.augmentation, &mut aug_rng);
                let (terms, g) = loss_and_gradients(&params, &x, &t, cfg.loss)?;
                loss_sum += terms.total;
                for (acc, gi) in grads.tensors.iter_mut().zip(&g.tensors) {
                    for (a, &b) in acc.data.iter_mut().zip(&gi.data) {
                        *a += b;
                    }
                }
            }
            let scale = T::of(1.0 / batch.len() as f64);
            for t in &mut grads.tensors {
                for v in &mut t.data {
                    *v *= scale;
                }
            }
            state.step(&cfg.optimizer, &mut params, &grads, lr, cfg.weight_decay);
            steps += batch.len();
        }
        let val = mean_soft_dice(&params, &val_data)?;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / steps as f64,
            val_soft_dice: val,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.5} train loss {:.5} val soft dice {val:.5}",
            record.train_loss
        );
        history.push(record);
        if val > best.0 {
            best = (val, epoch, params.clone());
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        history,
        best_epoch: best.1,
    })
}

/// Seeded partition of `0..n` into `k` folds of near-equal size.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    (0..k)
        .map(|f| {
            let mut fold = idx[f * n / k..(f + 1) * n / k].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect()
}

/// One run per fold, validating on the held-out fold. Fold `f` uses seed
/// `cfg.seed + f`.
pub fn cross_validate<T: Real>(
    samples: &[TrainSample],
    cfg: &TrainConfig,
    ucfg: &UNetConfig,
) -> Result<Vec<TrainOutcome<T>>, UNetError> {
    if samples.is_empty() {
        return Err(UNetError::EmptyDataset("no samples".into()));
    }
    if cfg.folds < 2 || cfg.folds > samples.len() {
        return Err(UNetError::InvalidConfig(format!(
            "{} folds for {} samples",
            cfg.folds,
            samples.len()
        )));
    }
    let folds = kfold_split(samples.len(), cfg.folds, cfg.seed);
    folds
        .iter()
        .enumerate()
        .map(|(f, held_out)| {
            let val: Vec<TrainSample> = held_out.iter().map(|&i| samples[i].clone()).collect();
            let trn: Vec<TrainSample> = (0..samples.len())
                .filter(|i| held_out.binary_search(i).is_err())
                .map(|i| samples[i].clone())
                .collect();
            let fold_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(f as u64),
                ..cfg.clone()
            };
            log::info!("fold {f}: {} train / {} val", trn.len(), val.len());
            train(&trn, &val, &fold_cfg, ucfg)
        })
        .collect()
}
