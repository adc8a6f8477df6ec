//! Tiny convolutional predictor for kernel parameter maps.
//!
//! Forward, backward and Adam are implemented from scratch on planar f64
//! tensors. Weights are stored as f32 (the checkpoint precision) while all
//! arithmetic runs in f64, which makes save/load round trips bit-exact
//! without giving up gradient-check accuracy.
//!
//! The fixed architecture takes two input planes (signal and per-pixel noise
//! standard deviation), downsamples once with a stride-2 convolution and
//! emits one raw value per kernel parameter through a 1x1 head, bounded by
//! the same sigmoid remap the oracle uses. Output maps are half resolution.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apply::ParamMap;
use crate::error::{Error, Result};
use crate::image::{add_awgn, reflect, Image, NoiseModel};
use crate::io::load_image;
use crate::kernel::{remap_sigmoid, remap_sigmoid_deriv, KernelFamily, KernelSpec};
use crate::oracle::{ChainEvaluator, GradReport};

/// Minimum spatial input size the predictor accepts.
pub const MIN_INPUT: usize = 8;

/// Planar channel-major activation tensor.
#[derive(Debug, Clone)]
pub(crate) struct Tensor {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn new(ch: usize, h: usize, w: usize) -> Self {
        Tensor {
            ch,
            h,
            w,
            data: vec![0.0; ch * h * w],
        }
    }

    #[inline]
    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// One convolution layer; 3x3 or 1x1, mirror padding, optional rectifier.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub relu: bool,
    /// `[out][in][ky][kx]`, stored at checkpoint precision.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn new(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, relu: bool) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            ksize,
            stride,
            relu,
            weights: vec![0.0; out_ch * in_ch * ksize * ksize],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn forward(&self, input: &Tensor) -> Tensor {
        let (oh, ow) = self.out_dims(input.h, input.w);
        let mut out = Tensor::new(self.out_ch, oh, ow);
        let k = self.ksize;
        let pad = (k / 2) as isize;
        let kk = k * k;
        for oc in 0..self.out_ch {
            let wslab = &self.weights[oc * self.in_ch * kk..(oc + 1) * self.in_ch * kk];
            let dst = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc] as f64;
                    for ic in 0..self.in_ch {
                        let src = input.plane(ic);
                        let wk = &wslab[ic * kk..(ic + 1) * kk];
                        for ky in 0..k {
                            let iy = reflect((oy * self.stride) as isize + ky as isize - pad, input.h);
                            for kx in 0..k {
                                let ix = reflect((ox * self.stride) as isize + kx as isize - pad, input.w);
                                acc += wk[ky * k + kx] as f64 * src[iy * input.w + ix];
                            }
                        }
                    }
                    if self.relu && acc < 0.0 {
                        acc = 0.0;
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias/input gradients for this layer.
    /// `d_out` must already include the rectifier mask.
    fn backward(
        &self,
        input: &Tensor,
        d_out: &Tensor,
        d_w: &mut [f64],
        d_b: &mut [f64],
        d_in: &mut Tensor,
    ) {
        let (oh, ow) = (d_out.h, d_out.w);
        let k = self.ksize;
        let pad = (k / 2) as isize;
        let kk = k * k;
        for oc in 0..self.out_ch {
            let wslab = &self.weights[oc * self.in_ch * kk..(oc + 1) * self.in_ch * kk];
            let gslab = &mut d_w[oc * self.in_ch * kk..(oc + 1) * self.in_ch * kk];
            let gout = d_out.plane(oc);
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gout[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    d_b[oc] += g;
                    for ic in 0..self.in_ch {
                        let src = input.plane(ic);
                        let base = ic * input.h * input.w;
                        for ky in 0..k {
                            let iy = reflect((oy * self.stride) as isize + ky as isize - pad, input.h);
                            for kx in 0..k {
                                let ix = reflect((ox * self.stride) as isize + kx as isize - pad, input.w);
                                let idx = ky * k + kx;
                                gslab[ic * kk + idx] += g * src[iy * input.w + ix];
                                d_in.data[base + iy * input.w + ix] +=
                                    g * wslab[ic * kk + idx] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// The parameter-map predictor: a fixed stack of small convolutions ending
/// in a per-channel sigmoid remap defined by the kernel spec.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<ConvLayer>,
    pub spec: KernelSpec,
}

/// Widths of the convolution body.
const BODY: [usize; 4] = [16, 24, 24, 16];

/// Builds the predictor for a kernel family: conv3x3(2->16) stride 2, three
/// 3x3 convs (16->24->24->16), all rectified, then a linear 1x1 head with
/// one output channel per kernel parameter. Weight init is He-uniform from
/// a fixed internal seed, so construction is deterministic.
pub fn build_network(spec: &KernelSpec) -> Network {
    build_network_seeded(spec, 0)
}

/// As [`build_network`] with an explicit init seed.
pub fn build_network_seeded(spec: &KernelSpec, init_seed: u64) -> Network {
    let pc = spec.param_channels();
    let mut layers = vec![
        ConvLayer::new(2, BODY[0], 3, 2, true),
        ConvLayer::new(BODY[0], BODY[1], 3, 1, true),
        ConvLayer::new(BODY[1], BODY[2], 3, 1, true),
        ConvLayer::new(BODY[2], BODY[3], 3, 1, true),
        ConvLayer::new(BODY[3], pc, 1, 1, false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x6b65726e656c6669);
    for layer in layers.iter_mut() {
        let fan_in = (layer.in_ch * layer.ksize * layer.ksize) as f64;
        let limit = (6.0 / fan_in).sqrt();
        for w in layer.weights.iter_mut() {
            *w = rng.gen_range(-limit..limit) as f32;
        }
        // biases start at zero
    }
    Network {
        layers,
        spec: spec.clone(),
    }
}

impl Network {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub fn param_channels(&self) -> usize {
        self.spec.param_channels()
    }

    /// Output map dimensions for a given input size.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(2), height.div_ceil(2))
    }
}

/// Activations of one forward pass, kept for backpropagation.
pub struct ForwardCache {
    /// `acts[0]` is the input tensor, `acts[i]` the output of layer `i-1`;
    /// the last entry holds the raw (pre-sigmoid) head output.
    acts: Vec<Tensor>,
}

impl ForwardCache {
    fn raw_out(&self) -> &Tensor {
        self.acts.last().expect("cache holds at least the input")
    }
}

fn check_forward_input(img: &Image, noise: &Image) -> Result<()> {
    if img.channels != 1 || noise.channels != 1 {
        return Err(Error::InvalidParameter(
            "predictor input must be single-channel".into(),
        ));
    }
    if img.width != noise.width || img.height != noise.height {
        return Err(Error::DimensionMismatch(
            img.width,
            img.height,
            img.channels,
            noise.width,
            noise.height,
            noise.channels,
        ));
    }
    if img.width < MIN_INPUT || img.height < MIN_INPUT {
        return Err(Error::InvalidGeometry(format!(
            "predictor input {}x{} is smaller than {MIN_INPUT}x{MIN_INPUT}",
            img.width, img.height
        )));
    }
    if !img.is_finite() || !noise.is_finite() {
        return Err(Error::NonFinite("predictor input"));
    }
    Ok(())
}

/// Runs inference with a constant noise plane and returns the bounded map.
pub fn forward(net: &Network, img_channel: &Image, noise_sigma: f64) -> Result<ParamMap> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }
    let plane = Image::constant(img_channel.width, img_channel.height, 1, noise_sigma);
    forward_with_noise_map(net, img_channel, &plane)
}

/// Runs inference with a full per-pixel noise standard deviation plane.
pub fn forward_with_noise_map(net: &Network, img_channel: &Image, noise: &Image) -> Result<ParamMap> {
    let (map, _) = forward_cached(net, img_channel, noise)?;
    Ok(map)
}

/// Forward pass that also returns activations for [`backward`].
pub fn forward_cached(
    net: &Network,
    img_channel: &Image,
    noise: &Image,
) -> Result<(ParamMap, ForwardCache)> {
    check_forward_input(img_channel, noise)?;
    let (h, w) = (img_channel.height, img_channel.width);
    let mut input = Tensor::new(2, h, w);
    input.data[..h * w].copy_from_slice(&img_channel.data);
    input.data[h * w..].copy_from_slice(&noise.data);

    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    acts.push(input);
    for layer in &net.layers {
        let next = layer.forward(acts.last().expect("non-empty"));
        acts.push(next);
    }
    let raw = acts.last().expect("head output");
    let grid = raw.h * raw.w;
    let mut data = vec![0.0; raw.data.len()];
    for (c, &(lo, hi)) in net.spec.remap_ranges.iter().enumerate() {
        for g in 0..grid {
            data[c * grid + g] = remap_sigmoid(raw.data[c * grid + g], lo, hi);
        }
    }
    let map = ParamMap {
        width: raw.w,
        height: raw.h,
        channels: net.param_channels(),
        data,
        scale_hint: 2.0,
    };
    Ok((map, ForwardCache { acts }))
}

/// Per-layer weight and bias gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetGradients {
    pub fn zeros(net: &Network) -> Self {
        NetGradients {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v *= s);
        }
        for b in self.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &NetGradients) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }
}

/// Backpropagates d(loss)/d(map values) through the sigmoid head and every
/// convolution, accumulating into `grads`.
pub fn backward(net: &Network, cache: &ForwardCache, d_map_values: &[f64], grads: &mut NetGradients) {
    let raw = cache.raw_out();
    let grid = raw.h * raw.w;
    assert_eq!(
        d_map_values.len(),
        raw.data.len(),
        "upstream gradient does not match the head output"
    );
    // head sigmoid
    let mut d_cur = Tensor::new(raw.ch, raw.h, raw.w);
    for (c, &(lo, hi)) in net.spec.remap_ranges.iter().enumerate() {
        for g in 0..grid {
            let j = c * grid + g;
            d_cur.data[j] = d_map_values[j] * remap_sigmoid_deriv(raw.data[j], lo, hi);
        }
    }
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let input = &cache.acts[l];
        let output = &cache.acts[l + 1];
        if layer.relu {
            for (g, &o) in d_cur.data.iter_mut().zip(output.data.iter()) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut d_in = Tensor::new(input.ch, input.h, input.w);
        layer.backward(input, &d_cur, &mut grads.weights[l], &mut grads.biases[l], &mut d_in);
        d_cur = d_in;
    }
}

/// Training settings; defaults follow the small-net conventions used across
/// the crate (Adam 1e-3, batch 8, 128px crops, sigma in [0.05, 0.1]).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset_dir: std::path::PathBuf,
    pub epochs: usize,
    pub crops_per_epoch: usize,
    pub crop_size: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub noise_low: f64,
    pub noise_high: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_dir: std::path::PathBuf::from("."),
            epochs: 8,
            crops_per_epoch: 128,
            crop_size: 128,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            noise_low: 0.05,
            noise_high: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.crops_per_epoch == 0 || self.batch == 0 {
            return Err(Error::Config("epochs, crops_per_epoch and batch must be >= 1".into()));
        }
        if self.crop_size < MIN_INPUT {
            return Err(Error::Config(format!("crop_size must be >= {MIN_INPUT}")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0 <= self.noise_low && self.noise_low <= self.noise_high) {
            return Err(Error::Config(
                "need 0 <= noise_low <= noise_high".into(),
            ));
        }
        Ok(())
    }
}

/// A trained (or loadable) network plus its training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
    pub epochs: usize,
    /// Running (exponential moving average) loss per optimizer update.
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    /// Errors when the checkpoint's parameter layout cannot serve `spec`.
    pub fn ensure_compatible(&self, spec: &KernelSpec) -> Result<()> {
        if self.network.spec.param_channels() != spec.param_channels()
            || self.network.spec.family != spec.family
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for {} ({} channels), requested {} ({} channels)",
                self.network.spec.family.name(),
                self.network.spec.param_channels(),
                spec.family.name(),
                spec.param_channels()
            )));
        }
        Ok(())
    }
}

/// Everything one training run produced.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per optimizer update.
    pub step_losses: Vec<f64>,
    /// Exponential moving average of `step_losses` (decay 0.9).
    pub running_losses: Vec<f64>,
}

pub(crate) fn list_dataset(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm" | "pfm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(paths)
}

/// Trains the network end to end through its kernel family: sample a crop,
/// corrupt it with a random-sigma AWGN, predict a map, apply the kernel,
/// take the L2 loss against the clean crop and run Adam on the weights.
pub fn train(net: &mut Network, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let paths = list_dataset(&cfg.dataset_dir)?;
    let images: Result<Vec<Image>> = paths.iter().map(|p| load_image(p)).collect();
    let images = images?;
    for (img, path) in images.iter().zip(paths.iter()) {
        if img.width < MIN_INPUT || img.height < MIN_INPUT {
            return Err(Error::InvalidGeometry(format!(
                "dataset image {} is smaller than {MIN_INPUT}x{MIN_INPUT}",
                path.display()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_m = NetGradients::zeros(net);
    let mut adam_v = NetGradients::zeros(net);
    let updates_per_epoch = cfg.crops_per_epoch.div_ceil(cfg.batch).max(1);
    let mut step_losses = Vec::new();
    let mut running_losses = Vec::new();
    let mut running = f64::NAN;
    let mut t = 0i32;

    for _epoch in 0..cfg.epochs {
        for _update in 0..updates_per_epoch {
            let mut grads = NetGradients::zeros(net);
            let mut batch_loss = 0.0;
            for _item in 0..cfg.batch {
                // all randomness drawn from the master rng, in order
                let img = &images[rng.gen_range(0..images.len())];
                let cw = cfg.crop_size.min(img.width);
                let chh = cfg.crop_size.min(img.height);
                let x0 = rng.gen_range(0..=img.width - cw);
                let y0 = rng.gen_range(0..=img.height - chh);
                let channel = rng.gen_range(0..img.channels);
                let sigma = if cfg.noise_high > cfg.noise_low {
                    rng.gen_range(cfg.noise_low..cfg.noise_high)
                } else {
                    cfg.noise_low
                };
                let noise_seed: u64 = rng.gen();

                let mut clean = Image::new(cw, chh, 1);
                for y in 0..chh {
                    for x in 0..cw {
                        clean.set(x, y, 0, img.at(x0 + x, y0 + y, channel));
                    }
                }
                let noisy = add_awgn(&clean, &NoiseModel::new(sigma, noise_seed));

                let (map, cache) = forward_cached(
                    net,
                    &noisy,
                    &Image::constant(cw, chh, 1, sigma),
                )?;
                let eval = ChainEvaluator::new(&noisy, &clean, &net.spec, sigma, map.width, map.height)?;
                let mut gvals = vec![0.0; map.data.len()];
                let loss = eval.loss_and_grad_values(&map.data, &mut gvals);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        iteration: step_losses.len(),
                    });
                }
                batch_loss += loss;
                backward(net, &cache, &gvals, &mut grads);
            }
            batch_loss /= cfg.batch as f64;
            grads.scale(1.0 / cfg.batch as f64);

            t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (l, layer) in net.layers.iter_mut().enumerate() {
                for (j, w) in layer.weights.iter_mut().enumerate() {
                    let g = grads.weights[l][j];
                    adam_m.weights[l][j] = cfg.beta1 * adam_m.weights[l][j] + (1.0 - cfg.beta1) * g;
                    adam_v.weights[l][j] =
                        cfg.beta2 * adam_v.weights[l][j] + (1.0 - cfg.beta2) * g * g;
                    let mhat = adam_m.weights[l][j] / bc1;
                    let vhat = adam_v.weights[l][j] / bc2;
                    *w = (*w as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
                }
                for (j, b) in layer.bias.iter_mut().enumerate() {
                    let g = grads.biases[l][j];
                    adam_m.biases[l][j] = cfg.beta1 * adam_m.biases[l][j] + (1.0 - cfg.beta1) * g;
                    adam_v.biases[l][j] =
                        cfg.beta2 * adam_v.biases[l][j] + (1.0 - cfg.beta2) * g * g;
                    let mhat = adam_m.biases[l][j] / bc1;
                    let vhat = adam_v.biases[l][j] / bc2;
                    *b = (*b as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
                }
            }

            running = if running.is_nan() {
                batch_loss
            } else {
                0.9 * running + 0.1 * batch_loss
            };
            step_losses.push(batch_loss);
            running_losses.push(running);
        }
    }

    Ok(TrainRun {
        checkpoint: Checkpoint {
            network: net.clone(),
            seed: cfg.seed,
            epochs: cfg.epochs,
            loss_history: running_losses.clone(),
        },
        step_losses,
        running_losses,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint file format: magic, version, kernel spec, architecture
// descriptor, little-endian f32 weights, training metadata.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"KFNETCKP";
const CKPT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Serializes the checkpoint; the format is versioned and self-describing.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());

    let spec = &ckpt.network.spec;
    let fam = spec.family.name().as_bytes();
    buf.extend_from_slice(&(fam.len() as u32).to_le_bytes());
    buf.extend_from_slice(fam);
    buf.extend_from_slice(&(spec.window_radius as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.patch_radius as u32).to_le_bytes());
    buf.extend_from_slice(&spec.spatial_sigma.to_le_bytes());
    buf.extend_from_slice(&spec.base_blur_sigma.to_le_bytes());
    buf.extend_from_slice(&(spec.remap_ranges.len() as u32).to_le_bytes());
    for &(lo, hi) in &spec.remap_ranges {
        buf.extend_from_slice(&lo.to_le_bytes());
        buf.extend_from_slice(&hi.to_le_bytes());
    }

    buf.extend_from_slice(&(ckpt.network.layers.len() as u32).to_le_bytes());
    for layer in &ckpt.network.layers {
        buf.extend_from_slice(&(layer.in_ch as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_ch as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.ksize as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.stride as u32).to_le_bytes());
        buf.push(layer.relu as u8);
    }
    for layer in &ckpt.network.layers {
        for w in &layer.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for b in &layer.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }

    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&(ckpt.epochs as u64).to_le_bytes());
    buf.extend_from_slice(&(ckpt.loss_history.len() as u32).to_le_bytes());
    for l in &ckpt.loss_history {
        buf.extend_from_slice(&l.to_le_bytes());
    }

    let mut f = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&buf).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads a checkpoint; errors on bad magic, unknown version or any
/// structural inconsistency.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {CKPT_VERSION})",
            path.display()
        )));
    }

    let fam_len = cur.u32()? as usize;
    if fam_len > 32 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible family name length {fam_len}",
            path.display()
        )));
    }
    let fam = String::from_utf8(cur.take(fam_len)?.to_vec())
        .map_err(|_| Error::Checkpoint(format!("{}: bad family name", path.display())))?;
    let family = KernelFamily::parse(&fam)?;
    let window_radius = cur.u32()? as usize;
    let patch_radius = cur.u32()? as usize;
    let spatial_sigma = cur.f64()?;
    let base_blur_sigma = cur.f64()?;
    let n_ranges = cur.u32()? as usize;
    if n_ranges > 3 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible range count {n_ranges}",
            path.display()
        )));
    }
    let mut remap_ranges = Vec::with_capacity(n_ranges);
    for _ in 0..n_ranges {
        let lo = cur.f64()?;
        let hi = cur.f64()?;
        remap_ranges.push((lo, hi));
    }
    let spec = KernelSpec {
        family,
        window_radius,
        patch_radius,
        spatial_sigma,
        base_blur_sigma,
        remap_ranges,
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(format!("{}: inconsistent spec: {e}", path.display())))?;

    let n_layers = cur.u32()? as usize;
    if n_layers > 64 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible layer count {n_layers}",
            path.display()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_ch = cur.u32()? as usize;
        let out_ch = cur.u32()? as usize;
        let ksize = cur.u32()? as usize;
        let stride = cur.u32()? as usize;
        let relu = cur.take(1)?[0] != 0;
        if in_ch == 0 || out_ch == 0 || !(ksize == 1 || ksize == 3) || stride == 0 {
            return Err(Error::Checkpoint(format!(
                "{}: bad layer descriptor {in_ch}->{out_ch} k{ksize} s{stride}",
                path.display()
            )));
        }
        layers.push(ConvLayer::new(in_ch, out_ch, ksize, stride, relu));
    }
    for layer in layers.iter_mut() {
        for w in layer.weights.iter_mut() {
            *w = cur.f32()?;
        }
        for b in layer.bias.iter_mut() {
            *b = cur.f32()?;
        }
    }

    let seed = cur.u64()?;
    let epochs = cur.u64()? as usize;
    let n_hist = cur.u32()? as usize;
    let mut loss_history = Vec::with_capacity(n_hist.min(1 << 20));
    for _ in 0..n_hist {
        loss_history.push(cur.f64()?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - cur.pos
        )));
    }

    let net = Network { layers, spec };
    if net.spec.param_channels() != net.layers.last().map(|l| l.out_ch).unwrap_or(0) {
        return Err(Error::Checkpoint(format!(
            "{}: head emits {} channels but the spec needs {}",
            path.display(),
            net.layers.last().map(|l| l.out_ch).unwrap_or(0),
            net.spec.param_channels()
        )));
    }
    Ok(Checkpoint {
        network: net,
        seed,
        epochs,
        loss_history,
    })
}

/// Finite-difference check of d(loss)/d(weights) through the full pipeline
/// (network -> map -> kernel -> L2 loss). Samples `probes` weights per trial.
pub fn net_grad_check(spec: &KernelSpec, trials: usize, seed: u64) -> Result<GradReport> {
    net_grad_check_scaled(spec, trials, seed, 1.0)
}

/// Negative control: analytic gradients deliberately scaled so the report
/// must fail.
pub fn net_grad_check_corrupted(spec: &KernelSpec, trials: usize, seed: u64) -> Result<GradReport> {
    net_grad_check_scaled(spec, trials, seed, 1.05)
}

fn relu_masks_differ(net: &Network, a: &ForwardCache, b: &ForwardCache) -> bool {
    for (l, layer) in net.layers.iter().enumerate() {
        if !layer.relu {
            continue;
        }
        let (xa, xb) = (&a.acts[l + 1], &b.acts[l + 1]);
        for (va, vb) in xa.data.iter().zip(xb.data.iter()) {
            if (*va > 0.0) != (*vb > 0.0) {
                return true;
            }
        }
    }
    false
}

fn net_grad_check_scaled(
    spec: &KernelSpec,
    trials: usize,
    seed: u64,
    gradient_scale: f64,
) -> Result<GradReport> {
    if trials == 0 {
        return Err(Error::Config("gradient check needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8usize, 8usize);
    let probes = 12usize;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for trial in 0..trials {
        let net = build_network_seeded(spec, seed.wrapping_add(trial as u64).wrapping_mul(2654435761));
        let mut clean = Image::new(w, h, 1);
        for v in clean.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let sigma = rng.gen_range(0.05..0.1);
        let noisy = add_awgn(&clean, &NoiseModel::new(sigma, rng.gen()));
        let noise_plane = Image::constant(w, h, 1, sigma);
        let eval = ChainEvaluator::new(&noisy, &clean, spec, sigma, w.div_ceil(2), h.div_ceil(2))?;

        let (map, cache) = forward_cached(&net, &noisy, &noise_plane)?;
        let mut gvals = vec![0.0; map.data.len()];
        eval.loss_and_grad_values(&map.data, &mut gvals);
        let mut grads = NetGradients::zeros(&net);
        backward(&net, &cache, &gvals, &mut grads);

        for _ in 0..probes {
            let l = rng.gen_range(0..net.layers.len());
            let j = rng.gen_range(0..net.layers[l].weights.len());
            let orig = net.layers[l].weights[j];
            // perturbed points snapped to f32; the true offset is recovered
            // from their exact f64 values so representation error cancels
            let wp = (orig as f64 + 1e-4) as f32;
            let wm = (orig as f64 - 1e-4) as f32;
            let mut netp = net.clone();
            netp.layers[l].weights[j] = wp;
            let (map_p, cache_p) = forward_cached(&netp, &noisy, &noise_plane)?;
            let lp = eval.loss_from_values(&map_p.data);
            netp.layers[l].weights[j] = wm;
            let (map_m, cache_m) = forward_cached(&netp, &noisy, &noise_plane)?;
            let lm = eval.loss_from_values(&map_m.data);
            // a rectifier flipping between the two perturbed points makes
            // the loss non-differentiable across the interval; the central
            // difference is meaningless there, so skip such probes
            if relu_masks_differ(&netp, &cache_p, &cache_m) {
                continue;
            }
            let fd = (lp - lm) / (wp as f64 - wm as f64);
            let analytic = grads.weights[l][j] * gradient_scale;
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        family: spec.family,
        trials,
        entries_checked: checked,
        max_rel_err: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apply::sample_map_full;
    use crate::synth::write_dataset;

    #[test]
    fn parameter_counts_are_frozen_and_under_the_bound() {
        let n1 = build_network(&KernelSpec::nlm());
        assert_eq!(n1.param_count(), 12_481);
        let n3 = build_network(&KernelSpec::aniso_gaussian());
        assert_eq!(n3.param_count(), 12_515);
        let np = build_network(&KernelSpec::polyblur());
        assert_eq!(np.param_count(), 12_515);
        for n in [n1, n3, np] {
            assert!(n.param_count() < 20_000);
        }
    }

    #[test]
    fn layer_param_count_arithmetic() {
        // spot-check one layer against the k*k*in*out + out formula
        let l = ConvLayer::new(16, 24, 3, 1, true);
        assert_eq!(l.param_count(), 9 * 16 * 24 + 24);
    }

    #[test]
    fn output_dims_halve_and_round_up() {
        let net = build_network(&KernelSpec::nlm());
        assert_eq!(net.output_dims(128, 128), (64, 64));
        assert_eq!(net.output_dims(9, 15), (5, 8));
        let img = Image::constant(9, 15, 1, 0.5);
        let map = forward(&net, &img, 0.07).unwrap();
        assert_eq!((map.width, map.height), (5, 8));
    }

    #[test]
    fn zero_weights_emit_midpoint_maps() {
        let mut net = build_network(&KernelSpec::nlm());
        for layer in net.layers.iter_mut() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let img = crate::synth::synth_scene(16, 16, 1, 3);
        let map = forward(&net, &img, 0.08).unwrap();
        for v in &map.data {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_stay_in_range_and_inference_is_pure() {
        let net = build_network(&KernelSpec::aniso_gaussian());
        let img = crate::synth::synth_scene(20, 12, 1, 5);
        let a = forward(&net, &img, 0.09).unwrap();
        let b = forward(&net, &img, 0.09).unwrap();
        assert_eq!(a.data, b.data);
        let grid = a.width * a.height;
        for (c, &(lo, hi)) in net.spec.remap_ranges.iter().enumerate() {
            for g in 0..grid {
                let v = a.data[c * grid + g];
                assert!(v > lo && v < hi);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = build_network(&KernelSpec::nlm());
        let small = Image::constant(7, 12, 1, 0.5);
        assert!(forward(&net, &small, 0.1).is_err());
        let rgb = Image::constant(16, 16, 3, 0.5);
        assert!(forward(&net, &rgb, 0.1).is_err());
        let ok = Image::constant(16, 16, 1, 0.5);
        assert!(forward(&net, &ok, -0.1).is_err());
        assert!(forward(&net, &ok, f64::NAN).is_err());
    }

    #[test]
    fn upsampled_maps_have_bounded_slope() {
        let net = build_network_seeded(&KernelSpec::nlm(), 9);
        let img = crate::synth::synth_scene(32, 32, 1, 8);
        let map = forward(&net, &img, 0.07).unwrap();
        let full = sample_map_full(&map, 32, 32);
        let (lo, hi) = net.spec.remap_ranges[0];
        let bound = (hi - lo) * map.width as f64 / 32.0 + 1e-9;
        for y in 0..32 {
            for x in 0..31 {
                let d = (full[y * 32 + x + 1] - full[y * 32 + x]).abs();
                assert!(d <= bound, "horizontal slope {d} at ({x},{y})");
            }
        }
        for y in 0..31 {
            for x in 0..32 {
                let d = (full[(y + 1) * 32 + x] - full[y * 32 + x]).abs();
                assert!(d <= bound, "vertical slope {d} at ({x},{y})");
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_weight_gradients() {
        let net = build_network(&KernelSpec::nlm());
        let img = crate::synth::synth_scene(12, 12, 1, 2);
        let noise = Image::constant(12, 12, 1, 0.07);
        let (map, cache) = forward_cached(&net, &img, &noise).unwrap();
        let mut grads = NetGradients::zeros(&net);
        backward(&net, &cache, &vec![0.0; map.data.len()], &mut grads);
        for w in &grads.weights {
            assert!(w.iter().all(|&v| v == 0.0));
        }
        for b in &grads.biases {
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stride2_weight_grads_match_im2col_matrix_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut layer = ConvLayer::new(2, 3, 3, 2, false);
        for w in layer.weights.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        for b in layer.bias.iter_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
        let mut input = Tensor::new(2, 8, 8);
        for v in input.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let out = layer.forward(&input);
        assert_eq!((out.h, out.w), (4, 4));
        let mut d_out = Tensor::new(3, 4, 4);
        for v in d_out.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        // im2col oracle: rows = output positions, cols = (ic, ky, kx)
        let cols = 2 * 9;
        let mut m = vec![vec![0.0f64; cols]; 16];
        for oy in 0..4 {
            for ox in 0..4 {
                for ic in 0..2 {
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let iy = reflect((oy * 2) as isize + ky as isize - 1, 8);
                            let ix = reflect((ox * 2) as isize + kx as isize - 1, 8);
                            m[oy * 4 + ox][ic * 9 + (ky * 3 + kx) as usize] =
                                input.plane(ic)[iy * 8 + ix];
                        }
                    }
                }
            }
        }
        // forward check: out_oc = M w_oc + b_oc
        for oc in 0..3 {
            for (row, mrow) in m.iter().enumerate() {
                let mut acc = layer.bias[oc] as f64;
                for (c, mv) in mrow.iter().enumerate() {
                    acc += mv * layer.weights[oc * cols + c] as f64;
                }
                assert!((acc - out.plane(oc)[row]).abs() < 1e-12);
            }
        }
        // gradient check: dW_oc = M^T dOut_oc
        let mut d_w = vec![0.0; layer.weights.len()];
        let mut d_b = vec![0.0; 3];
        let mut d_in = Tensor::new(2, 8, 8);
        layer.backward(&input, &d_out, &mut d_w, &mut d_b, &mut d_in);
        for oc in 0..3 {
            for c in 0..cols {
                let mut expect = 0.0;
                for (row, mrow) in m.iter().enumerate() {
                    expect += mrow[c] * d_out.plane(oc)[row];
                }
                assert!(
                    (expect - d_w[oc * cols + c]).abs() < 1e-12,
                    "oc {oc} col {c}: {expect} vs {}",
                    d_w[oc * cols + c]
                );
            }
            let expect_b: f64 = d_out.plane(oc).iter().sum();
            assert!((expect_b - d_b[oc]).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        for spec in [KernelSpec::nlm(), KernelSpec::polyblur()] {
            let report = net_grad_check(&spec, 3, 23).unwrap();
            assert!(
                report.passed(),
                "{}: max rel err {}",
                spec.family.name(),
                report.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_net_gradients_fail_the_check() {
        let report = net_grad_check_corrupted(&KernelSpec::nlm(), 2, 3).unwrap();
        assert!(!report.passed());
    }

    fn tiny_train_cfg(dir: &Path, steps: usize) -> TrainConfig {
        TrainConfig {
            dataset_dir: dir.to_path_buf(),
            epochs: 1,
            crops_per_epoch: steps * 2,
            crop_size: 24,
            batch: 2,
            lr: 2e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_descends_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 6, 48, 40, 1, 77).unwrap();
        let spec = KernelSpec::nlm();
        let cfg = tiny_train_cfg(dir.path(), 40);
        let mut net_a = build_network(&spec);
        let run_a = train(&mut net_a, &cfg).unwrap();
        assert!(
            *run_a.running_losses.last().unwrap() < run_a.running_losses[0],
            "running loss did not drop: {} -> {}",
            run_a.running_losses[0],
            run_a.running_losses.last().unwrap()
        );
        let mut net_b = build_network(&spec);
        let run_b = train(&mut net_b, &cfg).unwrap();
        assert_eq!(run_a.step_losses, run_b.step_losses);
        for (la, lb) in net_a.layers.iter().zip(net_b.layers.iter()) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!(la.bias, lb.bias);
        }
    }

    #[test]
    fn training_on_clean_data_keeps_identity_loss_at_zero() {
        // with zero noise the NLM chain degenerates to near-identity
        // filtering, so the loss stays at (numerical) zero throughout
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 3, 32, 32, 1, 31).unwrap();
        let mut cfg = tiny_train_cfg(dir.path(), 6);
        cfg.noise_low = 0.0;
        cfg.noise_high = 0.0;
        let mut net = build_network(&KernelSpec::nlm());
        let run = train(&mut net, &cfg).unwrap();
        for l in &run.step_losses {
            assert!(*l < 1e-12, "loss {l}");
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = build_network(&KernelSpec::nlm());
        let cfg = tiny_train_cfg(dir.path(), 5);
        match train(&mut net, &cfg) {
            Err(Error::EmptyDataset(_)) => {}
            other => panic!("expected EmptyDataset, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 3, 32, 32, 1, 13).unwrap();
        let spec = KernelSpec::aniso_gaussian();
        let mut net = build_network(&spec);
        let run = train(&mut net, &tiny_train_cfg(dir.path(), 4)).unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&run.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, 5);
        assert_eq!(loaded.epochs, 1);
        assert_eq!(loaded.loss_history, run.checkpoint.loss_history);

        let img = crate::synth::synth_scene(20, 20, 1, 3);
        let before = forward(&net, &img, 0.06).unwrap();
        let after = forward(&loaded.network, &img, 0.06).unwrap();
        for (a, b) in before.data.iter().zip(after.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption_and_family_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_network(&KernelSpec::nlm());
        let ckpt = Checkpoint {
            network: net,
            seed: 1,
            epochs: 0,
            loss_history: vec![],
        };
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &bytes).unwrap();
        assert!(load_checkpoint(&bad).is_err());

        let mut truncated = fs::read(&path).unwrap();
        truncated.truncate(truncated.len() - 7);
        fs::write(&bad, &truncated).unwrap();
        assert!(load_checkpoint(&bad).is_err());

        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.ensure_compatible(&KernelSpec::nlm()).is_ok());
        assert!(loaded.ensure_compatible(&KernelSpec::polyblur()).is_err());
    }
}
