//! Oracle parameter search against a clean reference.
//!
//! Two search modes bracket what a predictor can achieve: a golden-section
//! scan for the best single global parameter, and Adam on an unbounded raw
//! parameter map (half resolution by default) whose gradient is chained
//! analytically through sigmoid remapping, bilinear map sampling and the
//! kernel weights. The same machinery drives network training and the
//! finite-difference gradient checker.

use rayon::prelude::*;

use crate::apply::{apply_with_context, sample_map_full, ParamMap, VaryingContext};
use crate::error::{Error, Result};
use crate::image::{lerp_coeffs, mean_squared_error, src_coord, Image, PSNR_CAP};
use crate::kernel::{
    self, polyblur_stack, remap_sigmoid, remap_sigmoid_deriv, KernelFamily, KernelSpec,
};

/// Settings for the local (oracle) optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Initial pre-sigmoid value of every map entry; 0 starts mid-range.
    pub init_raw: f64,
    /// Parameter map resolution divisor (2 gives half-resolution maps).
    pub map_scale: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 300,
            learning_rate: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_raw: 0.0,
            map_scale: 2,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.map_scale == 0 {
            return Err(Error::Config("map_scale must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error over all samples; the optimization objective.
pub fn loss_l2(a: &Image, b: &Image) -> Result<f64> {
    mean_squared_error(a, b)
}

fn psnr_of_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Bracket searched for global scalar parameters.
pub const GLOBAL_BRACKET: (f64, f64) = (1e-3, 4.0);

/// Golden-section search for the best single parameter of a one-parameter
/// family, minimizing L2 loss against `clean` over the whole image.
///
/// The bracket (1e-3, 4) is refined to width < 1e-3; every probed point
/// (including both bracket endpoints) competes for the returned optimum, so
/// the result never loses to an endpoint even if the loss is not unimodal.
/// Returns the multiplier (NLM) or sigma (isotropic) and the achieved PSNR.
pub fn optimize_global_param(
    noisy: &Image,
    clean: &Image,
    spec: &KernelSpec,
    noise_sigma: f64,
) -> Result<(f64, f64)> {
    spec.validate()?;
    if spec.param_channels() != 1 {
        return Err(Error::InvalidSpec(format!(
            "global scalar search needs a one-parameter family, got {}",
            spec.family.name()
        )));
    }
    if !noisy.same_shape(clean) {
        return Err(Error::DimensionMismatch(
            noisy.width,
            noisy.height,
            noisy.channels,
            clean.width,
            clean.height,
            clean.channels,
        ));
    }
    let ctx = VaryingContext::new(noisy, spec, noise_sigma)?;
    let n = noisy.width * noisy.height;
    let mut params = vec![0.0; n];
    let mut eval = |m: f64| -> f64 {
        params.iter_mut().for_each(|p| *p = m);
        let out = apply_with_context(&ctx, &params);
        mean_squared_error(&out, clean).expect("shapes checked above")
    };

    let (mut a, mut b) = GLOBAL_BRACKET;
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut best = (eval(a), a);
    let fb = eval(b);
    if fb < best.0 {
        best = (fb, b);
    }
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    while b - a > 1e-3 {
        if fc < best.0 {
            best = (fc, c);
        }
        if fd < best.0 {
            best = (fd, d);
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d);
        }
    }
    for (f, x) in [(fc, c), (fd, d)] {
        if f < best.0 {
            best = (f, x);
        }
    }
    Ok((best.1, psnr_of_mse(best.0)))
}

/// Everything a local optimization run produced.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub map: ParamMap,
    pub psnr: f64,
    /// Loss before each Adam step plus the final loss (`steps + 1` entries).
    pub loss_history: Vec<f64>,
}

/// Gradient-descent oracle: optimizes a reduced-resolution parameter map
/// against the clean reference and returns the remapped map plus PSNR.
pub fn optimize_local_params(
    noisy: &Image,
    clean: &Image,
    spec: &KernelSpec,
    noise_sigma: f64,
    cfg: &OptimConfig,
) -> Result<(ParamMap, f64)> {
    let run = optimize_local_params_traced(noisy, clean, spec, noise_sigma, cfg)?;
    Ok((run.map, run.psnr))
}

/// As [`optimize_local_params`] but also returns the per-iteration loss.
pub fn optimize_local_params_traced(
    noisy: &Image,
    clean: &Image,
    spec: &KernelSpec,
    noise_sigma: f64,
    cfg: &OptimConfig,
) -> Result<OracleRun> {
    cfg.validate()?;
    let mw = noisy.width.div_ceil(cfg.map_scale);
    let mh = noisy.height.div_ceil(cfg.map_scale);
    let m = mw * mh * spec.param_channels();
    optimize_local_params_init(noisy, clean, spec, noise_sigma, cfg, &vec![cfg.init_raw; m])
}

/// As [`optimize_local_params_traced`] with an explicit initial raw map,
/// so callers can warm-start from a known-good candidate (the per-image
/// global optimum, or a network prediction). The returned map is the best
/// iterate seen, never worse than the starting point.
pub fn optimize_local_params_init(
    noisy: &Image,
    clean: &Image,
    spec: &KernelSpec,
    noise_sigma: f64,
    cfg: &OptimConfig,
    init_raw: &[f64],
) -> Result<OracleRun> {
    cfg.validate()?;
    let mw = noisy.width.div_ceil(cfg.map_scale);
    let mh = noisy.height.div_ceil(cfg.map_scale);
    let eval = ChainEvaluator::new(noisy, clean, spec, noise_sigma, mw, mh)?;
    let m = mw * mh * spec.param_channels();
    if init_raw.len() != m {
        return Err(Error::InvalidParameter(format!(
            "initial raw map has {} entries, the {}x{}x{} grid needs {m}",
            init_raw.len(),
            mw,
            mh,
            spec.param_channels()
        )));
    }
    let mut raw = init_raw.to_vec();
    let mut grad = vec![0.0; m];
    let mut adam_m = vec![0.0; m];
    let mut adam_v = vec![0.0; m];
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best_loss = f64::INFINITY;
    let mut best_raw = raw.clone();
    for step in 0..cfg.steps {
        let loss = eval.loss_and_grad(&raw, &mut grad);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step });
        }
        if loss < best_loss {
            best_loss = loss;
            best_raw.copy_from_slice(&raw);
        }
        history.push(loss);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        for j in 0..m {
            adam_m[j] = cfg.adam_beta1 * adam_m[j] + (1.0 - cfg.adam_beta1) * grad[j];
            adam_v[j] = cfg.adam_beta2 * adam_v[j] + (1.0 - cfg.adam_beta2) * grad[j] * grad[j];
            let mhat = adam_m[j] / bc1;
            let vhat = adam_v[j] / bc2;
            raw[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    let final_loss = eval.loss(&raw);
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: cfg.steps });
    }
    if final_loss < best_loss {
        best_loss = final_loss;
        best_raw.copy_from_slice(&raw);
    }
    history.push(final_loss);
    let map = eval.remapped_map(&best_raw, cfg.map_scale as f64);
    Ok(OracleRun {
        map,
        psnr: psnr_of_mse(best_loss),
        loss_history: history,
    })
}

/// Forward/backward evaluator for the full chain
/// raw map -> sigmoid remap -> bilinear upsample -> kernel -> L2 loss.
pub(crate) struct ChainEvaluator {
    spec: KernelSpec,
    clean: Image,
    ctx: Option<VaryingContext>,
    stack: Option<[Image; 4]>,
    width: usize,
    height: usize,
    channels: usize,
    mw: usize,
    mh: usize,
}

impl ChainEvaluator {
    pub fn new(
        noisy: &Image,
        clean: &Image,
        spec: &KernelSpec,
        noise_sigma: f64,
        map_w: usize,
        map_h: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if !noisy.same_shape(clean) {
            return Err(Error::DimensionMismatch(
                noisy.width,
                noisy.height,
                noisy.channels,
                clean.width,
                clean.height,
                clean.channels,
            ));
        }
        if !clean.is_finite() {
            return Err(Error::NonFinite("clean reference"));
        }
        let (ctx, stack) = if spec.family == KernelFamily::Polyblur {
            if !noisy.is_finite() {
                return Err(Error::NonFinite("input image"));
            }
            (None, Some(polyblur_stack(noisy, spec.base_blur_sigma)))
        } else {
            (Some(VaryingContext::new(noisy, spec, noise_sigma)?), None)
        };
        Ok(ChainEvaluator {
            spec: spec.clone(),
            clean: clean.clone(),
            ctx,
            stack,
            width: noisy.width,
            height: noisy.height,
            channels: noisy.channels,
            mw: map_w,
            mh: map_h,
        })
    }

    pub fn map_len(&self) -> usize {
        self.mw * self.mh * self.spec.param_channels()
    }

    /// Raw entries -> bounded map values.
    fn remap(&self, raw: &[f64]) -> Vec<f64> {
        let grid = self.mw * self.mh;
        let mut vals = vec![0.0; raw.len()];
        for (c, &(lo, hi)) in self.spec.remap_ranges.iter().enumerate() {
            for g in 0..grid {
                vals[c * grid + g] = remap_sigmoid(raw[c * grid + g], lo, hi);
            }
        }
        vals
    }

    pub fn remapped_map(&self, raw: &[f64], scale_hint: f64) -> ParamMap {
        ParamMap {
            width: self.mw,
            height: self.mh,
            channels: self.spec.param_channels(),
            data: self.remap(raw),
            scale_hint,
        }
    }

    /// Bounded map values -> full-resolution per-pixel parameters.
    fn upsample_params(&self, vals: Vec<f64>) -> Vec<f64> {
        let map = ParamMap {
            width: self.mw,
            height: self.mh,
            channels: self.spec.param_channels(),
            data: vals,
            scale_hint: 1.0,
        };
        sample_map_full(&map, self.width, self.height)
    }

    fn forward_from_params(&self, full: &[f64]) -> Image {
        if let Some(ctx) = &self.ctx {
            apply_with_context(ctx, full)
        } else {
            let stack = self.stack.as_ref().expect("polyblur stack");
            let n = self.width * self.height;
            let mut out = Image::new(self.width, self.height, self.channels);
            for c in 0..self.channels {
                let planes = [
                    stack[0].plane(c),
                    stack[1].plane(c),
                    stack[2].plane(c),
                    stack[3].plane(c),
                ];
                let dst = out.plane_mut(c);
                for i in 0..n {
                    let b = full[i];
                    let cc = full[n + i];
                    let d = full[2 * n + i];
                    dst[i] = planes[0][i]
                        + b * (planes[1][i] - planes[0][i])
                        + cc * (planes[2][i] - planes[0][i])
                        + d * (planes[3][i] - planes[0][i]);
                }
            }
            out
        }
    }

    pub fn loss(&self, raw: &[f64]) -> f64 {
        self.loss_from_values(&self.remap(raw))
    }

    /// Loss for already bounded map values (the network head's output).
    pub fn loss_from_values(&self, vals: &[f64]) -> f64 {
        let full = self.upsample_params(vals.to_vec());
        let out = self.forward_from_params(&full);
        mean_squared_error(&out, &self.clean).expect("shapes fixed at construction")
    }

    /// Loss plus d(loss)/d(raw map entries), chained analytically.
    pub fn loss_and_grad(&self, raw: &[f64], grad: &mut [f64]) -> f64 {
        let vals = self.remap(raw);
        let loss = self.loss_and_grad_values(&vals, grad);
        let grid = self.mw * self.mh;
        for (c, &(lo, hi)) in self.spec.remap_ranges.iter().enumerate() {
            for g in 0..grid {
                let j = c * grid + g;
                grad[j] *= remap_sigmoid_deriv(raw[j], lo, hi);
            }
        }
        loss
    }

    /// Loss plus d(loss)/d(bounded map values); the sigmoid is left to the
    /// caller (the oracle chains its own remap, the network its head).
    pub fn loss_and_grad_values(&self, vals: &[f64], grad: &mut [f64]) -> f64 {
        let pc = self.spec.param_channels();
        let (w, h, ch) = (self.width, self.height, self.channels);
        let n = w * h;
        let n_total = (n * ch) as f64;
        let full = self.upsample_params(vals.to_vec());
        let out = self.forward_from_params(&full);
        let loss = mean_squared_error(&out, &self.clean).expect("shapes fixed at construction");

        // d(loss)/d(per-pixel parameter), one plane per parameter channel
        let mut gp = vec![0.0; pc * n];
        if let Some(ctx) = &self.ctx {
            let nk = ctx.geom.offsets.len();
            let family = self.spec.family;
            let noise_sigma = ctx.noise_sigma;
            // rows are independent; planes are channel-major, so collect
            // per-row slices and copy them out afterwards
            let gp_rows: Vec<Vec<f64>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    let mut row = vec![0.0; pc * w];
                    let mut wbuf = vec![0.0; nk];
                    let mut xbuf = vec![0.0; nk];
                    let mut pdbuf = vec![0.0; nk];
                    let mut dwbufs = [vec![0.0; nk], vec![0.0; nk], vec![0.0; nk]];
                    for x in 0..w {
                        let i = y * w + x;
                        match family {
                            KernelFamily::Nlm => {
                                let mult = full[i];
                                for c in 0..ch {
                                    let pd = &ctx.patch_d[c];
                                    for k in 0..nk {
                                        pdbuf[k] = pd[k * n + i];
                                    }
                                    kernel::nlm_weights_grad_core(
                                        &ctx.geom.spatial,
                                        &pdbuf,
                                        mult,
                                        noise_sigma,
                                        &mut wbuf,
                                        &mut dwbufs[0],
                                    );
                                    ctx.window_values(c, x, y, &mut xbuf);
                                    let g = 2.0 * (out.plane(c)[i] - self.clean.plane(c)[i]) / n_total;
                                    let mut acc = 0.0;
                                    for k in 0..nk {
                                        acc += dwbufs[0][k] * xbuf[k];
                                    }
                                    row[x] += g * acc;
                                }
                            }
                            KernelFamily::IsoGaussian => {
                                kernel::iso_weights_grad_core(
                                    &ctx.geom.dist2,
                                    full[i],
                                    &mut wbuf,
                                    &mut dwbufs[0],
                                );
                                for c in 0..ch {
                                    ctx.window_values(c, x, y, &mut xbuf);
                                    let g = 2.0 * (out.plane(c)[i] - self.clean.plane(c)[i]) / n_total;
                                    let mut acc = 0.0;
                                    for k in 0..nk {
                                        acc += dwbufs[0][k] * xbuf[k];
                                    }
                                    row[x] += g * acc;
                                }
                            }
                            KernelFamily::AnisoGaussian => {
                                kernel::aniso_weights_grad_core(
                                    &ctx.geom,
                                    full[i],
                                    full[n + i],
                                    full[2 * n + i],
                                    &mut wbuf,
                                    &mut dwbufs,
                                );
                                for c in 0..ch {
                                    ctx.window_values(c, x, y, &mut xbuf);
                                    let g = 2.0 * (out.plane(c)[i] - self.clean.plane(c)[i]) / n_total;
                                    for (j, dw) in dwbufs.iter().enumerate() {
                                        let mut acc = 0.0;
                                        for k in 0..nk {
                                            acc += dw[k] * xbuf[k];
                                        }
                                        row[j * w + x] += g * acc;
                                    }
                                }
                            }
                            KernelFamily::Polyblur => unreachable!(),
                        }
                    }
                    row
                })
                .collect();
            for (y, row) in gp_rows.iter().enumerate() {
                for j in 0..pc {
                    gp[j * n + y * w..j * n + (y + 1) * w].copy_from_slice(&row[j * w..(j + 1) * w]);
                }
            }
        } else {
            let stack = self.stack.as_ref().expect("polyblur stack");
            for c in 0..ch {
                let base = stack[0].plane(c);
                let planes = [stack[1].plane(c), stack[2].plane(c), stack[3].plane(c)];
                let op = out.plane(c);
                let cp = self.clean.plane(c);
                for i in 0..n {
                    let g = 2.0 * (op[i] - cp[i]) / n_total;
                    for j in 0..3 {
                        gp[j * n + i] += g * (planes[j][i] - base[i]);
                    }
                }
            }
        }

        // transpose of the bilinear map sampling: scatter pixel gradients
        // into the map grid (sequential for a deterministic sum order)
        let grid = self.mw * self.mh;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let xc: Vec<(usize, usize, f64)> = (0..w)
            .map(|x| lerp_coeffs(src_coord(x, self.mw, w), self.mw))
            .collect();
        let yc: Vec<(usize, usize, f64)> = (0..h)
            .map(|y| lerp_coeffs(src_coord(y, self.mh, h), self.mh))
            .collect();
        for y in 0..h {
            let (y0, y1, fy) = yc[y];
            for x in 0..w {
                let (x0, x1, fx) = xc[x];
                let i = y * w + x;
                for j in 0..pc {
                    let g = gp[j * n + i];
                    let base = j * grid;
                    grad[base + y0 * self.mw + x0] += g * (1.0 - fx) * (1.0 - fy);
                    grad[base + y0 * self.mw + x1] += g * fx * (1.0 - fy);
                    grad[base + y1 * self.mw + x0] += g * (1.0 - fx) * fy;
                    grad[base + y1 * self.mw + x1] += g * fx * fy;
                }
            }
        }
        loss
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub family: KernelFamily,
    pub trials: usize,
    pub entries_checked: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    /// The acceptance threshold on the relative error.
    pub const TOLERANCE: f64 = 1e-3;

    pub fn passed(&self) -> bool {
        self.max_rel_err < Self::TOLERANCE
    }
}

/// Full-chain gradient check: on random 8x8 images and random raw maps, the
/// analytic d(loss)/d(raw entry) is compared against central finite
/// differences for every map entry.
pub fn grad_check(spec: &KernelSpec, trials: usize, seed: u64) -> Result<GradReport> {
    grad_check_scaled(spec, trials, seed, 1.0)
}

/// Negative control for the harness: same check with the analytic gradient
/// deliberately scaled, so the report must fail.
pub fn grad_check_corrupted(spec: &KernelSpec, trials: usize, seed: u64) -> Result<GradReport> {
    grad_check_scaled(spec, trials, seed, 1.05)
}

fn grad_check_scaled(
    spec: &KernelSpec,
    trials: usize,
    seed: u64,
    gradient_scale: f64,
) -> Result<GradReport> {
    use rand::Rng;
    use rand::SeedableRng;
    if trials == 0 {
        return Err(Error::Config("gradient check needs at least one trial".into()));
    }
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8usize, 8usize);
    let (mw, mh) = (4usize, 4usize);
    let hstep = 1e-4;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..trials {
        let mut clean = Image::new(w, h, 1);
        for v in clean.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let noise_sigma = rng.gen_range(0.05..0.2);
        let mut noisy = clean.clone();
        for v in noisy.data.iter_mut() {
            *v += rng.gen_range(-1.5 * noise_sigma..1.5 * noise_sigma);
        }
        let eval = ChainEvaluator::new(&noisy, &clean, spec, noise_sigma, mw, mh)?;
        let m = eval.map_len();
        let mut raw: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut grad = vec![0.0; m];
        eval.loss_and_grad(&raw, &mut grad);
        for j in 0..m {
            let saved = raw[j];
            raw[j] = saved + hstep;
            let lp = eval.loss(&raw);
            raw[j] = saved - hstep;
            let lm = eval.loss(&raw);
            raw[j] = saved;
            let fd = (lp - lm) / (2.0 * hstep);
            let analytic = grad[j] * gradient_scale;
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
