//! Seeded experiment setups shared by the unit-level tests and the
//! acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use slabseg::geometry::{Homography, PointCorrespondence};
use slabseg::raster::BinaryMask;
use slabseg::synth::{generate_label_map, render_photo, SynthConfig};
use slabseg::unet::{
    forward_tensor, loss_and_gradients, loss_dice_ce, predict, train, Augmentation, LossWeights, Optimizer, Tensor,
    TrainConfig, TrainSample, UNetConfig, UNetParams,
};

/// Random well-conditioned homography with a mild perspective component.
pub fn random_h(rng: &mut ChaCha8Rng, scale: f64) -> Homography {
    let theta: f64 = rng.random_range(-0.3..0.3);
    let s = scale * rng.random_range(0.8..1.25);
    let rows = [
        [
            s * theta.cos() + rng.random_range(-0.05..0.05) * scale,
            -s * theta.sin(),
            rng.random_range(-20.0..20.0),
        ],
        [
            s * theta.sin(),
            s * theta.cos() + rng.random_range(-0.05..0.05) * scale,
            rng.random_range(-20.0..20.0),
        ],
        [rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4), 1.0],
    ];
    Homography::from_rows(rows).unwrap()
}

pub fn project(h: &Homography, p: (f64, f64)) -> (f64, f64) {
    h.apply(p.0, p.1).unwrap()
}

/// Eight inliers with σ = 0.5 px noise followed by eight uniform outliers,
/// plus the noiseless inlier destinations.
pub fn contaminated(rng: &mut ChaCha8Rng, h: &Homography) -> (Vec<PointCorrespondence>, Vec<(f64, f64)>) {
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut corrs = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..8 {
        let s = (rng.random_range(0.0..1000.0), rng.random_range(0.0..800.0));
        let d = project(h, s);
        truth.push(d);
        let noisy = (d.0 + noise.sample(rng), d.1 + noise.sample(rng));
        corrs.push(PointCorrespondence::new(s, noisy, 1.0).unwrap());
    }
    for _ in 0..8 {
        let s = (rng.random_range(0.0..1000.0), rng.random_range(0.0..800.0));
        let d = (rng.random_range(-50.0..1050.0), rng.random_range(-50.0..850.0));
        corrs.push(PointCorrespondence::new(s, d, 1.0).unwrap());
    }
    (corrs, truth)
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor<f64> {
    let data = (0..c * h * w)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect::<Vec<f64>>();
    Tensor::from_vec(c, h, w, data).unwrap()
}

/// Off-centre disk, roughly a third of the pixels.
pub fn disk_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let (cy, cx) = (
        rng.random_range(0.35..0.65) * h as f64,
        rng.random_range(0.35..0.65) * w as f64,
    );
    let r = 0.33 * h.min(w) as f64;
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (y - cy).powi(2) + (x - cx).powi(2) <= r * r
        })
        .collect()
}

/// Fourth-order central difference `(f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h`.
pub fn five_point(f: [f64; 4], h: f64) -> f64 {
    (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h)
}

pub const STENCIL: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

fn loss_only(p: &UNetParams<f64>, x: &Tensor<f64>, t: &[bool], w: LossWeights) -> (f64, Vec<bool>) {
    let (logits, cache) = forward_tensor(p, x, true).unwrap();
    let (terms, _) = loss_dice_ce(&logits, t, w).unwrap();
    (terms.total, cache.unwrap().activation_signs())
}

pub struct GradientCheck {
    pub parameters: usize,
    pub max_rel_err: f64,
    /// Name and index of the worst parameter.
    pub worst: (String, usize),
    pub step_reductions: usize,
}

/// Every parameter of the tiny network on a 16×16 input against
/// finite differences, in 64-bit.
pub fn check_all_parameters(seed: u64) -> GradientCheck {
    let cfg = UNetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = UNetParams::<f64>::init(&cfg, seed).unwrap();
    // Move norm affine terms and biases off their initial values so every
    // parameter role carries a generic gradient.
    for t in &mut p.tensors {
        if !t.name.ends_with(".weight") {
            for v in &mut t.data {
                let s: f64 = StandardNormal.sample(&mut rng);
                *v += 0.2 * s;
            }
        }
    }
    let x = normal_tensor(&mut rng, 3, 16, 16, 1.0);
    let target = disk_target(&mut rng, 16, 16);
    let w = LossWeights::default();
    let (_, grads) = loss_and_gradients(&p, &x, &target, w).unwrap();

    let mut out = GradientCheck {
        parameters: p.parameter_count(),
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        step_reductions: 0,
    };
    for ti in 0..p.tensors.len() {
        for j in 0..p.tensors[ti].data.len() {
            let analytic = grads.tensors[ti].data[j];
            let base = p.tensors[ti].data[j];
            let mut h = 1e-4;
            let numeric = loop {
                let mut f = [0.0; 4];
                let mut signs = Vec::with_capacity(4);
                for (k, fk) in STENCIL.iter().zip(&mut f) {
                    p.tensors[ti].data[j] = base + k * h;
                    let (l, s) = loss_only(&p, &x, &target, w);
                    *fk = l;
                    signs.push(s);
                }
                p.tensors[ti].data[j] = base;
                // A leaky-ReLU input changing sign inside the stencil puts a
                // kink between the samples; shrink the step.
                if signs.windows(2).all(|s| s[0] == s[1]) || h < 1e-8 {
                    break five_point(f, h);
                }
                out.step_reductions += 1;
                h /= 10.0;
            };
            let e = rel_err(analytic, numeric);
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = (p.tensors[ti].name.clone(), j);
            }
        }
    }
    out
}

/// Hard Dice computed directly from the bit vectors.
pub fn hard_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count() as f64;
    let total = (a.count() + b.count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Default appearance on a small square canvas, slab sizes scaled to fit.
pub fn synth_samples(seed: u64, n: u64, size: usize) -> Vec<TrainSample> {
    let side_mm = size as f64 * 0.5;
    let cfg = SynthConfig {
        seed,
        height: size,
        width: size,
        slabs_per_image: [1, 1],
        slab_size_mm: [0.25 * side_mm, 0.4 * side_mm],
        ..SynthConfig::default()
    };
    (0..n)
        .map(|i| {
            let lm = generate_label_map(&cfg, i).unwrap();
            let (image, mask) = render_photo(&lm, &cfg, i);
            TrainSample { image, mask }
        })
        .collect()
}

pub struct OverfitResult {
    pub steps: usize,
    pub dices: Vec<f64>,
    pub mean: f64,
}

/// Tiny U-Net on four 64×64 synthetic images, full batch, no augmentation,
/// 125 Adam steps; scored on the training images themselves.
pub fn overfit_four_images() -> OverfitResult {
    let samples = synth_samples(2024, 4, 64);
    let cfg = TrainConfig {
        epochs: 125,
        batch_size: 4,
        learning_rate: 0.01,
        poly_exponent: 0.9,
        optimizer: Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        weight_decay: 0.0,
        augmentation: Augmentation {
            flips: false,
            rot90: false,
            intensity_jitter: 0.0,
        },
        loss: LossWeights::default(),
        seed: 3,
        folds: 1,
    };
    let out = train::<f32>(&samples, &samples, &cfg, &UNetConfig::tiny()).unwrap();
    let dices: Vec<f64> = samples
        .iter()
        .map(|s| hard_dice(&predict(&out.params, &s.image).unwrap(), &s.mask))
        .collect();
    let mean = dices.iter().sum::<f64>() / dices.len() as f64;
    OverfitResult {
        steps: cfg.epochs * samples.len().div_ceil(cfg.batch_size),
        dices,
        mean,
    }
}
