use serde::{Deserialize, Serialize};

use super::{Real, Tensor, UNetError};

/// Smoothing constant of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dice: 1.0, ce: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Pixel-mean cross-entropy.
    pub ce: f64,
    /// Soft Dice of the foreground probability, in `[0, 1]`.
    pub soft_dice: f64,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(2 sum(p t) + s) / (sum p + sum t + s)` with `s = 1`.
pub fn soft_dice(prob: &[f64], target: &[bool]) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in prob.iter().zip(target) {
        sp += p;
        if t {
            inter += p;
            st += 1.0;
        }
    }
    (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH)
}

/// `ce * CE + dice * (1 - softDice)` for two-class logits, with its gradient
/// with respect to the logits.
pub fn loss_dice_ce<T: Real>(
    logits: &Tensor<T>,
    target: &[bool],
    weights: LossWeights,
) -> Result<(LossTerms, Tensor<T>), UNetError> {
    let n = logits.h * logits.w;
    if logits.c != 2 || target.len() != n {
        return Err(UNetError::ShapeMismatch(format!(
            "logits {}x{}x{} vs {} targets",
            logits.c,
            logits.h,
            logits.w,
            target.len()
        )));
    }
    let (z0, z1) = logits.data.split_at(n);
    let margin: Vec<f64> = z1.iter().zip(z0).map(|(a, b)| a.f64() - b.f64()).collect();
    let prob: Vec<f64> = margin.iter().map(|&m| sigmoid(m)).collect();

    let ce = margin
        .iter()
        .zip(target)
        .map(|(&m, &t)| if t { softplus(-m) } else { softplus(m) })
        .sum::<f64>()
        / n as f64;

    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in prob.iter().zip(target) {
        sp += p;
        if t {
            inter += p;
            st += 1.0;
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + st + DICE_SMOOTH;
    let dice = num / den;

    let mut grad = Tensor::zeros(2, logits.h, logits.w);
    for i in 0..n {
        let (p, t) = (prob[i], if target[i] { 1.0 } else { 0.0 });
        // d dice / d p_i, then through p = sigmoid(z1 - z0).
        let ddice = (2.0 * t * den - num) / (den * den);
        let d_margin = -weights.dice * ddice * p * (1.0 - p) + weights.ce * (p - t) / n as f64;
        grad.data[n + i] = T::of(d_margin);
        grad.data[i] = T::of(-d_margin);
    }
    Ok((
        LossTerms {
            total: weights.ce * ce + weights.dice * (1.0 - dice),
            ce,
            soft_dice: dice,
        },
        grad,
    ))
}
