use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::loss::{loss_dice_ce, LossTerms, LossWeights};
use super::ops::{
    concat, conv_backward, conv_forward, instance_norm_backward, instance_norm_forward, leaky_relu,
    leaky_relu_backward, split, upsample2, upsample2_backward,
};
use super::{Real, Tensor, UNetConfig, UNetError};
use crate::raster::{BinaryMask, RasterImage};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    cout: usize,
    k: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    gamma: usize,
    beta: usize,
}

/// Parameter indices of every layer, derived from the config.
#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<[Block; 2]>,
    up: Vec<Conv>,
    dec: Vec<[Block; 2]>,
    head: Conv,
}

struct Builder {
    specs: Vec<(String, Vec<usize>)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.specs.push((name, shape));
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, k, k]);
        let bias = bias.then(|| self.push(format!("{name}.bias"), vec![cout]));
        Conv {
            weight,
            bias,
            cout,
            k,
            stride,
        }
    }

    fn block(&mut self, name: &str, i: usize, cin: usize, cout: usize, stride: usize) -> Block {
        let conv = self.conv(&format!("{name}.conv{i}"), cin, cout, 3, stride, false);
        let gamma = self.push(format!("{name}.norm{i}.gamma"), vec![cout]);
        let beta = self.push(format!("{name}.norm{i}.beta"), vec![cout]);
        Block { conv, gamma, beta }
    }
}

fn layout(cfg: &UNetConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
    let mut b = Builder { specs: Vec::new() };
    let ch = &cfg.channels;
    let mut enc = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let cin = if s == 0 { cfg.in_channels } else { ch[s - 1] };
        let stride = if s == 0 { 1 } else { 2 };
        let name = format!("enc{s}");
        enc.push([
            b.block(&name, 0, cin, ch[s], stride),
            b.block(&name, 1, ch[s], ch[s], 1),
        ]);
    }
    let mut up = Vec::new();
    let mut dec = Vec::new();
    for s in 0..cfg.stages - 1 {
        up.push(b.conv(&format!("up{s}.conv"), ch[s + 1], ch[s], 3, 1, true));
        let name = format!("dec{s}");
        dec.push([
            b.block(&name, 0, 2 * ch[s], ch[s], 1),
            b.block(&name, 1, ch[s], ch[s], 1),
        ]);
    }
    let head = b.conv("head", ch[0], cfg.classes, 1, 1, true);
    (Layout { enc, up, dec, head }, b.specs)
}

/// Network weights plus the config they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    pub config: UNetConfig,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> UNetParams<T> {
    /// He-normal conv weights (gain for the leaky slope), zero biases, unit
    /// norm scales, all drawn from a generator seeded with `seed`.
    pub fn init(config: &UNetConfig, seed: u64) -> Result<Self, UNetError> {
        config.validate()?;
        let (_, specs) = layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.negative_slope;
        let tensors = specs
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let data = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..len).map(|_| T::of(normal.sample(&mut rng))).collect()
                } else if name.ends_with(".gamma") {
                    vec![T::one(); len]
                } else {
                    vec![T::zero(); len]
                };
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Checks names and shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<(), UNetError> {
        self.config.validate()?;
        let (_, specs) = layout(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(UNetError::ConfigShapeMismatch(format!(
                "{} tensors, config needs {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(UNetError::ConfigShapeMismatch(format!(
                    "tensor {} {:?}",
                    t.name, t.shape
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(UNetError::ConfigShapeMismatch(format!(
                    "tensor {} has non-finite values",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        UNetParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Parameter count of a config without allocating weights.
pub fn parameter_count(config: &UNetConfig) -> usize {
    layout(config).1.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

struct BlockCache<T> {
    input: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Activation input.
    pre: Vec<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    enc: Vec<[BlockCache<T>; 2]>,
    up_in: Vec<Tensor<T>>,
    dec: Vec<[BlockCache<T>; 2]>,
    head_in: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Sign pattern of every activation input. Finite-difference checks use it
    /// to detect steps that cross a kink of the leaky ReLU.
    pub fn activation_signs(&self) -> Vec<bool> {
        self.enc
            .iter()
            .chain(&self.dec)
            .flat_map(|b| b.iter())
            .flat_map(|c| c.pre.iter().map(|v| *v < T::zero()))
            .collect()
    }
}

fn block_forward<T: Real>(p: &UNetParams<T>, cfg: &UNetConfig, b: &Block, x: Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
    let conv = conv_forward(
        &x,
        &p.tensors[b.conv.weight].data,
        None,
        b.conv.cout,
        b.conv.k,
        b.conv.stride,
    );
    let (mut y, xhat, inv_std) =
        instance_norm_forward(&conv, &p.tensors[b.gamma].data, &p.tensors[b.beta].data, cfg.norm_eps);
    let pre = y.data.clone();
    leaky_relu(&mut y.data, T::of(cfg.negative_slope));
    (
        y,
        BlockCache {
            input: x,
            xhat,
            inv_std,
            pre,
        },
    )
}

fn block_backward<T: Real>(
    p: &UNetParams<T>,
    g: &mut UNetParams<T>,
    cfg: &UNetConfig,
    b: &Block,
    cache: &BlockCache<T>,
    mut dy: Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    leaky_relu_backward(&mut dy.data, &cache.pre, T::of(cfg.negative_slope));
    let (dgamma, dbeta) = two_mut(&mut g.tensors, b.gamma, b.beta);
    let dconv = instance_norm_backward(
        &dy,
        &cache.xhat,
        &cache.inv_std,
        &p.tensors[b.gamma].data,
        dgamma,
        dbeta,
    );
    conv_backward(
        &cache.input,
        &p.tensors[b.conv.weight].data,
        &dconv,
        b.conv.k,
        b.conv.stride,
        &mut g.tensors[b.conv.weight].data,
        None,
        need_dx,
    )
}

fn two_mut<T>(v: &mut [ParamTensor<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (a, b) = v.split_at_mut(j);
    (&mut a[i].data, &mut b[0].data)
}

fn conv_grads<'a, T>(g: &'a mut UNetParams<T>, c: &Conv) -> (&'a mut [T], Option<&'a mut [T]>) {
    match c.bias {
        Some(bi) => {
            let (w, b) = two_mut(&mut g.tensors, c.weight, bi);
            (w, Some(b))
        }
        None => (&mut g.tensors[c.weight].data, None),
    }
}

fn check_input<T: Real>(p: &UNetParams<T>, x: &Tensor<T>) -> Result<(), UNetError> {
    let d = p.config.divisor();
    if x.c != p.config.in_channels || x.h == 0 || x.w == 0 || !x.h.is_multiple_of(d) || !x.w.is_multiple_of(d) {
        return Err(UNetError::ConfigShapeMismatch(format!(
            "input {}x{}x{} for {} input channels and side divisor {d}",
            x.c, x.h, x.w, p.config.in_channels
        )));
    }
    Ok(())
}

pub(crate) fn run<T: Real>(
    p: &UNetParams<T>,
    x: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Option<ForwardCache<T>>), UNetError> {
    check_input(p, x)?;
    let cfg = &p.config;
    let (lay, _) = layout(cfg);
    let mut enc_caches = Vec::new();
    let mut skips = Vec::with_capacity(cfg.stages);
    let mut cur = x.clone();
    for blocks in &lay.enc {
        let (a, c0) = block_forward(p, cfg, &blocks[0], cur);
        let (b, c1) = block_forward(p, cfg, &blocks[1], a.clone());
        if keep {
            enc_caches.push([c0, c1]);
        }
        skips.push(b.clone());
        cur = b;
    }
    skips.pop();

    let levels = cfg.stages - 1;
    let mut up_in: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
    let mut dec_caches: Vec<Option<[BlockCache<T>; 2]>> = (0..levels).map(|_| None).collect();
    for s in (0..levels).rev() {
        let u = upsample2(&cur);
        let c = &lay.up[s];
        let bias = c.bias.map(|i| p.tensors[i].data.as_slice());
        let v = conv_forward(&u, &p.tensors[c.weight].data, bias, c.cout, c.k, c.stride);
        let cat = concat(&skips[s], &v);
        let (a, c0) = block_forward(p, cfg, &lay.dec[s][0], cat);
        let (b, c1) = block_forward(p, cfg, &lay.dec[s][1], a.clone());
        if keep {
            up_in[s] = Some(u);
            dec_caches[s] = Some([c0, c1]);
        }
        cur = b;
    }
    let h = &lay.head;
    let bias = h.bias.map(|i| p.tensors[i].data.as_slice());
    let logits = conv_forward(&cur, &p.tensors[h.weight].data, bias, h.cout, h.k, h.stride);
    let cache = keep.then(|| ForwardCache {
        enc: enc_caches,
        up_in: up_in.into_iter().map(|u| u.expect("cached")).collect(),
        dec: dec_caches.into_iter().map(|d| d.expect("cached")).collect(),
        head_in: cur,
    });
    Ok((logits, cache))
}

/// Logits for an already normalized input whose sides are multiples of
/// `config.divisor()`. With `keep`, also returns the backward cache.
pub fn forward_tensor<T: Real>(
    p: &UNetParams<T>,
    x: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Option<ForwardCache<T>>), UNetError> {
    run(p, x, keep)
}

/// Reverse pass from logit gradients to parameter gradients.
pub fn backward<T: Real>(p: &UNetParams<T>, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> UNetParams<T> {
    let cfg = &p.config;
    let (lay, _) = layout(cfg);
    let mut g = p.zeros_like();
    let h = &lay.head;
    let (dw, db) = conv_grads(&mut g, h);
    let mut d = conv_backward(
        &cache.head_in,
        &p.tensors[h.weight].data,
        dlogits,
        h.k,
        h.stride,
        dw,
        db,
        true,
    )
    .expect("dx requested");

    let levels = cfg.stages - 1;
    let mut dskips = Vec::with_capacity(levels);
    for s in 0..levels {
        let blocks = &lay.dec[s];
        let d1 = block_backward(p, &mut g, cfg, &blocks[1], &cache.dec[s][1], d, true).expect("dx requested");
        let dcat = block_backward(p, &mut g, cfg, &blocks[0], &cache.dec[s][0], d1, true).expect("dx requested");
        let (dskip, dv) = split(dcat, cfg.channels[s]);
        dskips.push(dskip);
        let c = &lay.up[s];
        let (dw, db) = conv_grads(&mut g, c);
        let du = conv_backward(
            &cache.up_in[s],
            &p.tensors[c.weight].data,
            &dv,
            c.k,
            c.stride,
            dw,
            db,
            true,
        )
        .expect("dx requested");
        d = upsample2_backward(&du);
    }

    for s in (0..cfg.stages).rev() {
        if s < levels {
            for (a, b) in d.data.iter_mut().zip(&dskips[s].data) {
                *a += *b;
            }
        }
        let blocks = &lay.enc[s];
        let d1 = block_backward(p, &mut g, cfg, &blocks[1], &cache.enc[s][1], d, true).expect("dx requested");
        match block_backward(p, &mut g, cfg, &blocks[0], &cache.enc[s][0], d1, s > 0) {
            Some(next) => d = next,
            None => break,
        }
    }
    g
}

/// Per-channel z-scoring of an image into a network input tensor.
pub fn preprocess<T: Real>(img: &RasterImage) -> Tensor<T> {
    let n = img.height() * img.width();
    let mut data = Vec::with_capacity(img.channels() * n);
    for ch in 0..img.channels() {
        let plane = img.plane(ch);
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / var.sqrt().max(1e-8);
        data.extend(plane.iter().map(|v| T::of((v - mean) * inv)));
    }
    Tensor {
        c: img.channels(),
        h: img.height(),
        w: img.width(),
        data,
    }
}

pub(crate) fn check_resolution(cfg: &UNetConfig, img: &RasterImage) -> Result<(), UNetError> {
    match img.spacing() {
        Some(s) if (s - cfg.spacing_mm).abs() <= 1e-6 * cfg.spacing_mm => Ok(()),
        got => Err(UNetError::ResolutionMismatch {
            got,
            expected: cfg.spacing_mm,
        }),
    }
}

pub(crate) fn padded_dims(cfg: &UNetConfig, h: usize, w: usize) -> (usize, usize) {
    let d = cfg.divisor();
    (h.div_ceil(d) * d, w.div_ceil(d) * d)
}

/// Class logits `[classes, H, W]` for an image at the model resolution.
/// The input is normalized, zero-padded to the divisor and cropped back.
pub fn unet_forward<T: Real>(p: &UNetParams<T>, img: &RasterImage) -> Result<Tensor<T>, UNetError> {
    check_resolution(&p.config, img)?;
    if img.channels() != p.config.in_channels {
        return Err(UNetError::ConfigShapeMismatch(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            p.config.in_channels
        )));
    }
    let x = preprocess::<T>(img);
    let (ph, pw) = padded_dims(&p.config, x.h, x.w);
    let (logits, _) = run(p, &x.pad_to(ph, pw), false)?;
    Ok(logits.crop(img.height(), img.width()))
}

/// Loss and parameter gradients for one normalized input of any size.
/// Padding pixels are excluded from the loss.
pub fn loss_and_gradients<T: Real>(
    p: &UNetParams<T>,
    x: &Tensor<T>,
    target: &[bool],
    weights: LossWeights,
) -> Result<(LossTerms, UNetParams<T>), UNetError> {
    let (ph, pw) = padded_dims(&p.config, x.h, x.w);
    let (logits, cache) = run(p, &x.pad_to(ph, pw), true)?;
    let (terms, dl) = loss_dice_ce(&logits.crop(x.h, x.w), target, weights)?;
    let grads = backward(p, &cache.expect("cache kept"), &dl.pad_to(ph, pw));
    Ok((terms, grads))
}

/// Image-level entry point: resolution guard, normalization, loss and gradients.
pub fn image_gradients<T: Real>(
    p: &UNetParams<T>,
    img: &RasterImage,
    target: &BinaryMask,
    weights: LossWeights,
) -> Result<(LossTerms, UNetParams<T>), UNetError> {
    check_resolution(&p.config, img)?;
    if target.dims() != (img.height(), img.width()) {
        return Err(UNetError::ShapeMismatch(format!(
            "mask {:?} vs image {:?}",
            target.dims(),
            img.dims()
        )));
    }
    loss_and_gradients(p, &preprocess(img), target.bits(), weights)
}
