//! Procedural kernel weight generators.
//!
//! Every family maps a small parameter vector to a normalized filter window:
//!
//! * `Nlm` — patchwise similarity weights with a Gaussian spatial falloff;
//!   the single parameter is a multiplier on the noise standard deviation
//!   (a 1x1 patch gives the classic bilateral kernel).
//! * `IsoGaussian` — isotropic spatial Gaussian, one sigma in pixels.
//! * `AnisoGaussian` — anisotropic Gaussian parameterized by
//!   `(sigma1, sigma2, rho)` so the covariance stays positive definite.
//! * `Polyblur` — per-pixel linear combination of repeated base blurs
//!   approximating deconvolution; coefficients sum to one.
//!
//! Weight generators come with analytic derivatives with respect to their
//! parameters so parameter maps can be optimized by gradient descent.

use crate::apply::ParamMap;
use crate::error::{Error, Result};
use crate::image::Image;

/// Lower clamp for any Gaussian falloff sigma; realizes the delta-kernel
/// limit without dividing by zero.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Correlation is kept strictly inside (-1, 1); the covariance matrix is
/// singular at the endpoints.
pub const RHO_LIMIT: f64 = 1.0 - 1e-6;

/// Kernel family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Nlm,
    IsoGaussian,
    AnisoGaussian,
    Polyblur,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Nlm => "nlm",
            KernelFamily::IsoGaussian => "iso",
            KernelFamily::AnisoGaussian => "aniso",
            KernelFamily::Polyblur => "polyblur",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nlm" => Ok(KernelFamily::Nlm),
            "iso" => Ok(KernelFamily::IsoGaussian),
            "aniso" => Ok(KernelFamily::AnisoGaussian),
            "polyblur" => Ok(KernelFamily::Polyblur),
            other => Err(Error::InvalidSpec(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// Kernel family plus its fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Search window radius; 2 gives the 5x5 window.
    pub window_radius: usize,
    /// Patch radius for NLM similarity; 1 gives 3x3 patches, 0 the bilateral kernel.
    pub patch_radius: usize,
    /// Spatial Gaussian falloff of the NLM window, in pixels.
    pub spatial_sigma: f64,
    /// Sigma of the base blur `B` used by the polynomial reblur kernel.
    pub base_blur_sigma: f64,
    /// Per-channel (low, high) sigmoid output bounds.
    pub remap_ranges: Vec<(f64, f64)>,
}

impl KernelSpec {
    pub fn nlm() -> Self {
        KernelSpec {
            family: KernelFamily::Nlm,
            window_radius: 2,
            patch_radius: 1,
            spatial_sigma: 1.5,
            base_blur_sigma: 1.0,
            remap_ranges: vec![(0.0, 4.0)],
        }
    }

    pub fn iso_gaussian() -> Self {
        KernelSpec {
            family: KernelFamily::IsoGaussian,
            remap_ranges: vec![(0.0, 4.0)],
            ..KernelSpec::nlm()
        }
    }

    pub fn aniso_gaussian() -> Self {
        KernelSpec {
            family: KernelFamily::AnisoGaussian,
            remap_ranges: vec![(0.0, 4.0), (0.0, 4.0), (-1.0, 1.0)],
            ..KernelSpec::nlm()
        }
    }

    pub fn polyblur() -> Self {
        KernelSpec {
            family: KernelFamily::Polyblur,
            remap_ranges: vec![(-4.0, 4.0), (-4.0, 4.0), (-4.0, 4.0)],
            ..KernelSpec::nlm()
        }
    }

    pub fn for_family(family: KernelFamily) -> Self {
        match family {
            KernelFamily::Nlm => KernelSpec::nlm(),
            KernelFamily::IsoGaussian => KernelSpec::iso_gaussian(),
            KernelFamily::AnisoGaussian => KernelSpec::aniso_gaussian(),
            KernelFamily::Polyblur => KernelSpec::polyblur(),
        }
    }

    /// Number of per-pixel parameters this family consumes.
    pub fn param_channels(&self) -> usize {
        match self.family {
            KernelFamily::Nlm | KernelFamily::IsoGaussian => 1,
            KernelFamily::AnisoGaussian | KernelFamily::Polyblur => 3,
        }
    }

    /// Window side length.
    pub fn window_diameter(&self) -> usize {
        2 * self.window_radius + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_radius == 0 {
            return Err(Error::InvalidSpec("window_radius must be >= 1".into()));
        }
        if self.spatial_sigma <= 0.0 {
            return Err(Error::InvalidSpec("spatial_sigma must be > 0".into()));
        }
        if self.family == KernelFamily::Polyblur && self.base_blur_sigma <= 0.0 {
            return Err(Error::InvalidSpec("base_blur_sigma must be > 0".into()));
        }
        if self.remap_ranges.len() != self.param_channels() {
            return Err(Error::InvalidSpec(format!(
                "remap_ranges has {} entries, family needs {}",
                self.remap_ranges.len(),
                self.param_channels()
            )));
        }
        for &(lo, hi) in &self.remap_ranges {
            if !(lo < hi) {
                return Err(Error::InvalidSpec(format!("bad remap range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Parameter vector already remapped into its bounded ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub values: Vec<f64>,
}

impl KernelParams {
    pub fn scalar(v: f64) -> Self {
        KernelParams { values: vec![v] }
    }

    pub fn aniso(sigma1: f64, sigma2: f64, rho: f64) -> Self {
        KernelParams {
            values: vec![sigma1, sigma2, rho],
        }
    }
}

/// Normalized weights over one filter window.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    /// Row-major over the window, `(2*window_radius + 1)^2` entries summing to 1.
    pub weights: Vec<f64>,
    pub center_index: usize,
}

/// Window offsets, squared spatial distances and the NLM spatial falloff
/// table, shared by the apply paths and the optimizers.
#[derive(Debug, Clone)]
pub(crate) struct WindowGeom {
    /// (dx, dy) row-major over the window.
    pub offsets: Vec<(i32, i32)>,
    /// Unnormalized spatial Gaussian per offset.
    pub spatial: Vec<f64>,
    /// Squared Euclidean distance per offset.
    pub dist2: Vec<f64>,
    pub center: usize,
}

impl WindowGeom {
    pub fn new(radius: usize, spatial_sigma: f64) -> Self {
        let r = radius as i32;
        let mut offsets = Vec::new();
        let mut spatial = Vec::new();
        let mut dist2 = Vec::new();
        let inv = 1.0 / (2.0 * spatial_sigma * spatial_sigma);
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as f64;
                offsets.push((dx, dy));
                dist2.push(d2);
                spatial.push((-d2 * inv).exp());
            }
        }
        let center = offsets.len() / 2;
        WindowGeom {
            offsets,
            spatial,
            dist2,
            center,
        }
    }
}

/// `low + (high - low) * logistic(raw)`; monotone map of the real line
/// onto (low, high).
#[inline]
pub fn remap_sigmoid(raw: f64, low: f64, high: f64) -> f64 {
    low + (high - low) * logistic(raw)
}

/// Derivative of [`remap_sigmoid`] with respect to `raw`.
#[inline]
pub fn remap_sigmoid_deriv(raw: f64, low: f64, high: f64) -> f64 {
    let s = logistic(raw);
    (high - low) * s * (1.0 - s)
}

/// Inverse of [`remap_sigmoid`]: the raw value that maps to `value`.
/// Values at (or outside) the bounds are nudged inward so the logit stays
/// finite; round-tripping through the sigmoid recovers `value` to within
/// the saturation of the bound.
pub fn raw_from_value(value: f64, low: f64, high: f64) -> f64 {
    let p = ((value - low) / (high - low)).clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_sigma(sigma: f64) -> (f64, f64) {
    if sigma < SIGMA_FLOOR {
        (SIGMA_FLOOR, 0.0) // derivative vanishes on the clamped branch
    } else {
        (sigma, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Core weight math shared by the public ops and the fast apply paths.
// The unnormalized center score is always 1, so the normalizer is >= 1 and
// never degenerates.
// ---------------------------------------------------------------------------

/// NLM weights from precomputed patch distances. `sigma_sig` is the already
/// clamped signal sigma.
pub(crate) fn nlm_weights_core(spatial: &[f64], patch_d: &[f64], sigma_sig: f64, w: &mut [f64]) {
    let inv = 1.0 / (2.0 * sigma_sig * sigma_sig);
    let mut sum = 0.0;
    for k in 0..w.len() {
        let s = spatial[k] * (-patch_d[k] * inv).exp();
        w[k] = s;
        sum += s;
    }
    let norm = 1.0 / sum;
    for v in w.iter_mut() {
        *v *= norm;
    }
}

/// NLM weights plus `dw/dm` for multiplier `m` (signal sigma `m * noise_sigma`).
pub(crate) fn nlm_weights_grad_core(
    spatial: &[f64],
    patch_d: &[f64],
    multiplier: f64,
    noise_sigma: f64,
    w: &mut [f64],
    dw: &mut [f64],
) {
    let (sig, din) = clamp_sigma(multiplier * noise_sigma);
    nlm_weights_core(spatial, patch_d, sig, w);
    // d(ln s_k)/dm = patch_d[k] * noise_sigma / sigma^3 on the live branch
    let c = din * noise_sigma / (sig * sig * sig);
    let mut t_mean = 0.0;
    for k in 0..w.len() {
        dw[k] = patch_d[k] * c;
        t_mean += w[k] * dw[k];
    }
    for k in 0..w.len() {
        dw[k] = w[k] * (dw[k] - t_mean);
    }
}

/// Isotropic Gaussian weights; `sigma` already clamped.
pub(crate) fn iso_weights_core(dist2: &[f64], sigma: f64, w: &mut [f64]) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut sum = 0.0;
    for k in 0..w.len() {
        let s = (-dist2[k] * inv).exp();
        w[k] = s;
        sum += s;
    }
    let norm = 1.0 / sum;
    for v in w.iter_mut() {
        *v *= norm;
    }
}

/// Isotropic weights plus `dw/dsigma`.
pub(crate) fn iso_weights_grad_core(dist2: &[f64], sigma_raw: f64, w: &mut [f64], dw: &mut [f64]) {
    let (sig, din) = clamp_sigma(sigma_raw);
    iso_weights_core(dist2, sig, w);
    let c = din / (sig * sig * sig);
    let mut t_mean = 0.0;
    for k in 0..w.len() {
        dw[k] = dist2[k] * c;
        t_mean += w[k] * dw[k];
    }
    for k in 0..w.len() {
        dw[k] = w[k] * (dw[k] - t_mean);
    }
}

/// Clamped anisotropic parameters plus indicators for the live branches.
#[inline]
fn clamp_aniso(sigma1: f64, sigma2: f64, rho: f64) -> (f64, f64, f64, f64, f64, f64) {
    let (s1, d1) = clamp_sigma(sigma1);
    let (s2, d2) = clamp_sigma(sigma2);
    let (r, dr) = if rho.abs() > RHO_LIMIT {
        (rho.signum() * RHO_LIMIT, 0.0)
    } else {
        (rho, 1.0)
    };
    (s1, s2, r, d1, d2, dr)
}

/// Entries (p11, p12, p22) of the 2x2 precision matrix (inverse covariance)
/// for `(sigma1, sigma2, rho)`, clamped away from the singular boundary.
pub(crate) fn precision_entries(sigma1: f64, sigma2: f64, rho: f64) -> (f64, f64, f64) {
    let (s1, s2, r, ..) = clamp_aniso(sigma1, sigma2, rho);
    let q = 1.0 / (1.0 - r * r);
    (
        q / (s1 * s1),
        -r * q / (s1 * s2),
        q / (s2 * s2),
    )
}

/// Anisotropic Gaussian weights at integer window offsets.
pub(crate) fn aniso_weights_core(geom: &WindowGeom, sigma1: f64, sigma2: f64, rho: f64, w: &mut [f64]) {
    let (s1, s2, r, ..) = clamp_aniso(sigma1, sigma2, rho);
    let q = 1.0 / (2.0 * (1.0 - r * r));
    let mut sum = 0.0;
    for (k, &(dx, dy)) in geom.offsets.iter().enumerate() {
        let (dx, dy) = (dx as f64, dy as f64);
        // quadratic form of the closed-form 2x2 precision matrix
        let a = dx * dx / (s1 * s1) - 2.0 * r * dx * dy / (s1 * s2) + dy * dy / (s2 * s2);
        let s = (-a * q).exp();
        w[k] = s;
        sum += s;
    }
    let norm = 1.0 / sum;
    for v in w.iter_mut() {
        *v *= norm;
    }
}

/// Anisotropic weights plus `dw/d(sigma1, sigma2, rho)`.
pub(crate) fn aniso_weights_grad_core(
    geom: &WindowGeom,
    sigma1: f64,
    sigma2: f64,
    rho: f64,
    w: &mut [f64],
    dws: &mut [Vec<f64>; 3],
) {
    let (s1, s2, r, d1, d2, dr) = clamp_aniso(sigma1, sigma2, rho);
    aniso_weights_core(geom, sigma1, sigma2, rho, w);
    let one_m = 1.0 - r * r;
    let mut means = [0.0; 3];
    for (k, &(dx, dy)) in geom.offsets.iter().enumerate() {
        let (dx, dy) = (dx as f64, dy as f64);
        let u = dx * dy / (s1 * s2);
        // t = d(ln s)/dtheta = -dQ/dtheta, Q the exponent's quadratic form
        let t1 = d1 * (dx * dx / (s1 * s1 * s1) - r * u / s1) / one_m;
        let t2 = d2 * (dy * dy / (s2 * s2 * s2) - r * u / s2) / one_m;
        let trho = dr * ((1.0 + r * r) * u - r * (dx * dx / (s1 * s1) + dy * dy / (s2 * s2)))
            / (one_m * one_m);
        dws[0][k] = t1;
        dws[1][k] = t2;
        dws[2][k] = trho;
        means[0] += w[k] * t1;
        means[1] += w[k] * t2;
        means[2] += w[k] * trho;
    }
    for k in 0..w.len() {
        for (j, mean) in means.iter().enumerate() {
            dws[j][k] = w[k] * (dws[j][k] - mean);
        }
    }
}

// ---------------------------------------------------------------------------
// Public per-window ops.
// ---------------------------------------------------------------------------

fn check_window(window: &Image, side: usize) -> Result<()> {
    if window.channels != 1 || window.width != side || window.height != side {
        return Err(Error::InvalidParameter(format!(
            "window must be a single-channel {side}x{side} image, got {}x{}x{}",
            window.width, window.height, window.channels
        )));
    }
    if !window.is_finite() {
        return Err(Error::NonFinite("kernel window"));
    }
    Ok(())
}

/// Mean squared patch difference between the window center and every window
/// offset. `window` spans the search window plus the patch margin.
pub(crate) fn patch_distances(window: &Image, spec: &KernelSpec) -> Vec<f64> {
    let wr = spec.window_radius as i32;
    let pr = spec.patch_radius as i32;
    let c = wr + pr; // window center coordinate
    let patch_n = ((2 * pr + 1) * (2 * pr + 1)) as f64;
    let mut out = Vec::with_capacity(((2 * wr + 1) * (2 * wr + 1)) as usize);
    for dy in -wr..=wr {
        for dx in -wr..=wr {
            let mut acc = 0.0;
            for py in -pr..=pr {
                for px in -pr..=pr {
                    let a = window.at((c + px) as usize, (c + py) as usize, 0);
                    let b = window.at((c + dx + px) as usize, (c + dy + py) as usize, 0);
                    acc += (a - b) * (a - b);
                }
            }
            out.push(acc / patch_n);
        }
    }
    debug_assert_eq!(out[out.len() / 2], 0.0);
    out
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
    }
    Ok(())
}

/// Non-local means weights for one output pixel.
///
/// `window` must cover `window_radius + patch_radius` on each side of the
/// center; `params` holds the sigma multiplier, and the effective signal
/// sigma is `multiplier * noise_sigma` (floored at [`SIGMA_FLOOR`]).
pub fn nlm_weights(
    window: &Image,
    params: &KernelParams,
    noise_sigma: f64,
    spec: &KernelSpec,
) -> Result<KernelWeights> {
    check_window(window, 2 * (spec.window_radius + spec.patch_radius) + 1)?;
    require_positive("sigma multiplier", params.values[0])?;
    let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
    let pd = patch_distances(window, spec);
    let (sig, _) = clamp_sigma(params.values[0] * noise_sigma);
    let mut w = vec![0.0; geom.offsets.len()];
    nlm_weights_core(&geom.spatial, &pd, sig, &mut w);
    Ok(KernelWeights {
        weights: w,
        center_index: geom.center,
    })
}

/// NLM weights plus the derivative of every weight with respect to the
/// sigma multiplier. The analytic form goes through the normalization by
/// the quotient rule and matches central finite differences.
pub fn nlm_weight_grad(
    window: &Image,
    params: &KernelParams,
    noise_sigma: f64,
    spec: &KernelSpec,
) -> Result<(KernelWeights, Vec<f64>)> {
    check_window(window, 2 * (spec.window_radius + spec.patch_radius) + 1)?;
    require_positive("sigma multiplier", params.values[0])?;
    let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
    let pd = patch_distances(window, spec);
    let mut w = vec![0.0; geom.offsets.len()];
    let mut dw = vec![0.0; geom.offsets.len()];
    nlm_weights_grad_core(&geom.spatial, &pd, params.values[0], noise_sigma, &mut w, &mut dw);
    Ok((
        KernelWeights {
            weights: w,
            center_index: geom.center,
        },
        dw,
    ))
}

/// Signal-independent isotropic Gaussian weights.
pub fn iso_gaussian_weights(params: &KernelParams, spec: &KernelSpec) -> Result<KernelWeights> {
    require_positive("sigma", params.values[0])?;
    let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
    let (sig, _) = clamp_sigma(params.values[0]);
    let mut w = vec![0.0; geom.offsets.len()];
    iso_weights_core(&geom.dist2, sig, &mut w);
    Ok(KernelWeights {
        weights: w,
        center_index: geom.center,
    })
}

/// Isotropic weights plus `dw/dsigma`.
pub fn iso_gaussian_weight_grad(
    params: &KernelParams,
    spec: &KernelSpec,
) -> Result<(KernelWeights, Vec<f64>)> {
    require_positive("sigma", params.values[0])?;
    let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
    let mut w = vec![0.0; geom.offsets.len()];
    let mut dw = vec![0.0; geom.offsets.len()];
    iso_weights_grad_core(&geom.dist2, params.values[0], &mut w, &mut dw);
    Ok((
        KernelWeights {
            weights: w,
            center_index: geom.center,
        },
        dw,
    ))
}

fn check_aniso_params(params: &KernelParams) -> Result<()> {
    if params.values.len() != 3 {
        return Err(Error::InvalidParameter(
            "anisotropic kernel needs (sigma1, sigma2, rho)".into(),
        ));
    }
    require_positive("sigma1", params.values[0])?;
    require_positive("sigma2", params.values[1])?;
    let rho = params.values[2];
    if !rho.is_finite() || rho.abs() > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "correlation must lie in [-1, 1], got {rho}"
        )));
    }
    Ok(())
}

/// Anisotropic Gaussian weights from the covariance parameterization
/// `(sigma1, sigma2, rho)`; the 2x2 covariance is inverted in closed form.
pub fn aniso_gaussian_weights(params: &KernelParams, spec: &KernelSpec) -> Result<KernelWeights> {
    check_aniso_params(params)?;
    let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
    let mut w = vec![0.0; geom.offsets.len()];
    aniso_weights_core(&geom, params.values[0], params.values[1], params.values[2], &mut w);
    Ok(KernelWeights {
        weights: w,
        center_index: geom.center,
    })
}

/// Anisotropic weights plus gradients with respect to `(sigma1, sigma2, rho)`.
pub fn aniso_gaussian_weight_grad(
    params: &KernelParams,
    spec: &KernelSpec,
) -> Result<(KernelWeights, [Vec<f64>; 3])> {
    check_aniso_params(params)?;
    let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
    let n = geom.offsets.len();
    let mut w = vec![0.0; n];
    let mut dws = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    aniso_weights_grad_core(
        &geom,
        params.values[0],
        params.values[1],
        params.values[2],
        &mut w,
        &mut dws,
    );
    Ok((
        KernelWeights {
            weights: w,
            center_index: geom.center,
        },
        dws,
    ))
}

// ---------------------------------------------------------------------------
// Polynomial reblur kernel.
// ---------------------------------------------------------------------------

/// Reflects with repeated folding so it stays valid for any offset.
#[inline]
fn reflect_any(mut i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur, truncated at 3 sigma and renormalized so
/// constants are preserved exactly; mirror boundary.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    assert!(sigma > 0.0, "blur sigma must be > 0");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in -(radius as isize)..=(radius as isize) {
        taps.push((-(i * i) as f64 * inv).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }

    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    let mut tmp = vec![0.0; w * h];
    for c in 0..img.channels {
        let src = img.plane(c);
        // horizontal
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, t) in taps.iter().enumerate() {
                    let sx = reflect_any(x as isize + ti as isize - radius as isize, w as isize);
                    acc += t * row[sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ti, t) in taps.iter().enumerate() {
                    let sy = reflect_any(y as isize + ti as isize - radius as isize, h as isize);
                    acc += t * tmp[sy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// The base blur stack `[I, B I, B^2 I, B^3 I]` the polynomial combines.
pub(crate) fn polyblur_stack(img: &Image, base_sigma: f64) -> [Image; 4] {
    let i1 = gaussian_blur(img, base_sigma);
    let i2 = gaussian_blur(&i1, base_sigma);
    let i3 = gaussian_blur(&i2, base_sigma);
    [img.clone(), i1, i2, i3]
}

/// Applies the polynomial reblurring kernel
/// `a I + b B + c B^2 + d B^3` with `a = 1 - (b + c + d)` per pixel.
///
/// `coeff_map` holds `(b, c, d)` at image resolution. The combination acts
/// pointwise on the pre-blurred images rather than materializing kernels.
pub fn polyblur_apply(img: &Image, coeff_map: &ParamMap, spec: &KernelSpec) -> Result<Image> {
    if coeff_map.channels != 3 {
        return Err(Error::MapMismatch(format!(
            "polyblur needs a 3-channel coefficient map, got {}",
            coeff_map.channels
        )));
    }
    if coeff_map.width != img.width || coeff_map.height != img.height {
        return Err(Error::MapMismatch(format!(
            "coefficient map {}x{} does not match image {}x{}",
            coeff_map.width, coeff_map.height, img.width, img.height
        )));
    }
    if !coeff_map.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("polyblur coefficients"));
    }
    let stack = polyblur_stack(img, spec.base_blur_sigma);
    let n = img.width * img.height;
    let mut out = Image::new(img.width, img.height, img.channels);
    for c in 0..img.channels {
        let planes = [
            stack[0].plane(c),
            stack[1].plane(c),
            stack[2].plane(c),
            stack[3].plane(c),
        ];
        let dst = out.plane_mut(c);
        for i in 0..n {
            let b = coeff_map.data[i];
            let cc = coeff_map.data[n + i];
            let d = coeff_map.data[2 * n + i];
            let a = 1.0 - (b + cc + d);
            dst[i] = a * planes[0][i] + b * planes[1][i] + cc * planes[2][i] + d * planes[3][i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{add_awgn, NoiseModel};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn window_image(side: usize, seed: u64) -> Image {
        add_awgn(&Image::constant(side, side, 1, 0.5), &NoiseModel::new(0.1, seed))
    }

    #[test]
    fn spec_defaults_validate() {
        for family in [
            KernelFamily::Nlm,
            KernelFamily::IsoGaussian,
            KernelFamily::AnisoGaussian,
            KernelFamily::Polyblur,
        ] {
            KernelSpec::for_family(family).validate().unwrap();
        }
    }

    #[test]
    fn remap_sigmoid_midpoint_and_asymptotes() {
        assert!((remap_sigmoid(0.0, 0.0, 4.0) - 2.0).abs() < 1e-12);
        assert!((remap_sigmoid(100.0, -1.0, 1.0) - 1.0).abs() < 1e-9);
        assert!((remap_sigmoid(-100.0, -1.0, 1.0) + 1.0).abs() < 1e-9);
        assert!((remap_sigmoid_deriv(0.0, 0.0, 4.0) - 1.0).abs() < 1e-12);
        // derivative matches finite differences
        let h = 1e-5;
        for raw in [-3.0, -0.7, 0.3, 2.2] {
            let fd = (remap_sigmoid(raw + h, 0.0, 4.0) - remap_sigmoid(raw - h, 0.0, 4.0)) / (2.0 * h);
            assert!(rel_err(fd, remap_sigmoid_deriv(raw, 0.0, 4.0)) < 1e-6);
        }
    }

    #[test]
    fn raw_from_value_inverts_the_remap() {
        for &(lo, hi) in &[(0.0, 4.0), (-1.0, 1.0), (-4.0, 4.0)] {
            for v in [lo + 1e-3, lo + 0.3 * (hi - lo), 0.5 * (lo + hi), hi - 1e-3] {
                let raw = raw_from_value(v, lo, hi);
                assert!((remap_sigmoid(raw, lo, hi) - v).abs() < 1e-9, "({lo},{hi}) v={v}");
            }
            // saturated inputs stay finite and land on the nudged bound
            assert!(raw_from_value(lo, lo, hi).is_finite());
            assert!(raw_from_value(hi + 1.0, lo, hi).is_finite());
        }
    }

    #[test]
    fn nlm_constant_window_equals_spatial_gaussian() {
        let spec = KernelSpec::nlm();
        let side = 2 * (spec.window_radius + spec.patch_radius) + 1;
        let win = Image::constant(side, side, 1, 0.42);
        let w = nlm_weights(&win, &KernelParams::scalar(1.0), 0.1, &spec).unwrap();
        let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
        let sum: f64 = geom.spatial.iter().sum();
        for (a, b) in w.weights.iter().zip(geom.spatial.iter()) {
            assert!((a - b / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn nlm_huge_signal_sigma_degenerates_to_spatial() {
        let spec = KernelSpec::nlm();
        let win = window_image(7, 3);
        let w = nlm_weights(&win, &KernelParams::scalar(4.0), 1e6, &spec).unwrap();
        let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
        let sum: f64 = geom.spatial.iter().sum();
        for (a, b) in w.weights.iter().zip(geom.spatial.iter()) {
            assert!((a - b / sum).abs() < 1e-9);
        }
    }

    #[test]
    fn nlm_outlier_weighs_less_than_matching_neighbor() {
        let spec = KernelSpec::nlm();
        let mut win = Image::constant(7, 7, 1, 0.5);
        win.set(4, 3, 0, 1.0); // bright outlier at offset (+1, 0)
        let w = nlm_weights(&win, &KernelParams::scalar(1.0), 0.1, &spec).unwrap();
        let k_out = 2 * 5 + 3; // offset (+1, 0)
        let k_match = 2 * 5 + 1; // offset (-1, 0), same intensity as center
        assert!(w.weights[k_out] < w.weights[k_match]);
    }

    #[test]
    fn nlm_grad_constant_window_is_zero() {
        let spec = KernelSpec::nlm();
        let win = Image::constant(7, 7, 1, 0.3);
        let (_, dw) = nlm_weight_grad(&win, &KernelParams::scalar(1.5), 0.1, &spec).unwrap();
        assert!(dw.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nlm_grad_matches_finite_differences_and_sums_to_zero() {
        let spec = KernelSpec::nlm();
        let h = 1e-4;
        for seed in 0..20 {
            let win = window_image(7, seed);
            let m = 0.3 + 0.17 * seed as f64 % 3.5;
            let (_, dw) = nlm_weight_grad(&win, &KernelParams::scalar(m), 0.1, &spec).unwrap();
            assert!(dw.iter().sum::<f64>().abs() < 1e-9);
            let wp = nlm_weights(&win, &KernelParams::scalar(m + h), 0.1, &spec).unwrap();
            let wm = nlm_weights(&win, &KernelParams::scalar(m - h), 0.1, &spec).unwrap();
            for k in 0..dw.len() {
                let fd = (wp.weights[k] - wm.weights[k]) / (2.0 * h);
                assert!(rel_err(fd, dw[k]) < 1e-3, "seed {seed} k {k}: {fd} vs {}", dw[k]);
            }
        }
    }

    #[test]
    fn iso_delta_and_flat_limits() {
        let spec = KernelSpec::iso_gaussian();
        let w = iso_gaussian_weights(&KernelParams::scalar(1e-9), &spec).unwrap();
        assert!((w.weights[w.center_index] - 1.0).abs() < 1e-9);
        let w = iso_gaussian_weights(&KernelParams::scalar(1e6), &spec).unwrap();
        for v in &w.weights {
            assert!((v - 1.0 / 25.0).abs() < 1e-9);
        }
    }

    #[test]
    fn iso_weight_ratios_on_3x3() {
        let spec = KernelSpec {
            window_radius: 1,
            ..KernelSpec::iso_gaussian()
        };
        let w = iso_gaussian_weights(&KernelParams::scalar(1.0), &spec).unwrap();
        let center = w.weights[4];
        let edge = w.weights[1];
        let corner = w.weights[0];
        assert!((center / edge - 0.5f64.exp()).abs() < 1e-12);
        assert!((center / corner - 1.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn aniso_reduces_to_iso() {
        let spec = KernelSpec::aniso_gaussian();
        for sigma in [0.4, 1.0, 2.7] {
            let a = aniso_gaussian_weights(&KernelParams::aniso(sigma, sigma, 0.0), &spec).unwrap();
            let i = iso_gaussian_weights(&KernelParams::scalar(sigma), &spec).unwrap();
            for (x, y) in a.weights.iter().zip(i.weights.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aniso_matches_closed_form_precision_matrix() {
        // sigma1=1, sigma2=2, rho=0.5 -> Sigma = [[1,1],[1,4]],
        // inverse = (1/3) [[4,-1],[-1,1]]
        let spec = KernelSpec::aniso_gaussian();
        let w = aniso_gaussian_weights(&KernelParams::aniso(1.0, 2.0, 0.5), &spec).unwrap();
        let p = [4.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]; // p11, p12, p22
        let (p11, p12, p22) = precision_entries(1.0, 2.0, 0.5);
        assert!((p11 - p[0]).abs() < 1e-12);
        assert!((p12 - p[1]).abs() < 1e-12);
        assert!((p22 - p[2]).abs() < 1e-12);
        let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
        let q = |dx: f64, dy: f64| 0.5 * (p[0] * dx * dx + 2.0 * p[1] * dx * dy + p[2] * dy * dy);
        let center = w.weights[w.center_index];
        for (k, &(dx, dy)) in geom.offsets.iter().enumerate() {
            let expect = (-q(dx as f64, dy as f64)).exp();
            assert!((w.weights[k] / center - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn aniso_swap_symmetry() {
        let spec = KernelSpec::aniso_gaussian();
        let a = aniso_gaussian_weights(&KernelParams::aniso(0.8, 2.1, 0.3), &spec).unwrap();
        let b = aniso_gaussian_weights(&KernelParams::aniso(2.1, 0.8, 0.3), &spec).unwrap();
        let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
        let idx = |dx: i32, dy: i32| ((dy + 2) * 5 + dx + 2) as usize;
        for &(dx, dy) in &geom.offsets {
            assert!((a.weights[idx(dx, dy)] - b.weights[idx(dy, dx)]).abs() < 1e-12);
        }
    }

    #[test]
    fn aniso_grads_match_finite_differences_and_sum_to_zero() {
        let spec = KernelSpec::aniso_gaussian();
        let h = 1e-4;
        let cases = [
            (0.7, 1.9, 0.35),
            (2.4, 0.5, -0.6),
            (1.0, 1.0, 0.0),
            (3.3, 2.1, 0.85),
        ];
        for &(s1, s2, r) in &cases {
            let (_, dws) = aniso_gaussian_weight_grad(&KernelParams::aniso(s1, s2, r), &spec).unwrap();
            for dw in &dws {
                assert!(dw.iter().sum::<f64>().abs() < 1e-9);
            }
            for (j, delta) in [(0, [h, 0.0, 0.0]), (1, [0.0, h, 0.0]), (2, [0.0, 0.0, h])] {
                let wp = aniso_gaussian_weights(
                    &KernelParams::aniso(s1 + delta[0], s2 + delta[1], r + delta[2]),
                    &spec,
                )
                .unwrap();
                let wm = aniso_gaussian_weights(
                    &KernelParams::aniso(s1 - delta[0], s2 - delta[1], r - delta[2]),
                    &spec,
                )
                .unwrap();
                for k in 0..25 {
                    let fd = (wp.weights[k] - wm.weights[k]) / (2.0 * h);
                    assert!(
                        rel_err(fd, dws[j][k]) < 1e-3,
                        "params ({s1},{s2},{r}) channel {j} k {k}: {fd} vs {}",
                        dws[j][k]
                    );
                }
            }
        }
    }

    #[test]
    fn aniso_rho_grad_antisymmetric_at_identity() {
        // at sigma1 = sigma2, rho = 0 the rho derivative is proportional to
        // dx*dy, so flipping one axis flips its sign
        let spec = KernelSpec::aniso_gaussian();
        let (_, dws) = aniso_gaussian_weight_grad(&KernelParams::aniso(1.3, 1.3, 0.0), &spec).unwrap();
        let idx = |dx: i32, dy: i32| ((dy + 2) * 5 + dx + 2) as usize;
        for dy in -2..=2 {
            for dx in -2..=2 {
                let a = dws[2][idx(dx, dy)];
                let b = dws[2][idx(-dx, dy)];
                assert!((a + b).abs() < 1e-12, "({dx},{dy}): {a} vs {b}");
                let c = dws[2][idx(dy, dx)];
                assert!((a - c).abs() < 1e-12, "({dx},{dy}): {a} vs {c}");
            }
        }
        assert!(dws[2][idx(1, 1)].abs() > 1e-6);
    }

    #[test]
    fn aniso_rejects_out_of_range_rho() {
        let spec = KernelSpec::aniso_gaussian();
        assert!(aniso_gaussian_weights(&KernelParams::aniso(1.0, 1.0, 1.5), &spec).is_err());
        assert!(aniso_gaussian_weights(&KernelParams::aniso(-1.0, 1.0, 0.0), &spec).is_err());
    }

    #[test]
    fn weights_sum_to_one_and_stay_non_negative() {
        let spec_nlm = KernelSpec::nlm();
        let spec_aniso = KernelSpec::aniso_gaussian();
        for seed in 0..30u64 {
            let win = window_image(7, seed);
            let m = 0.05 + (seed as f64 * 0.131) % 3.9;
            let w = nlm_weights(&win, &KernelParams::scalar(m), 0.1, &spec_nlm).unwrap();
            assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.weights.iter().all(|&v| v >= 0.0));

            let s1 = 0.1 + (seed as f64 * 0.173) % 3.8;
            let s2 = 0.1 + (seed as f64 * 0.251) % 3.8;
            let r = ((seed as f64 * 0.377) % 1.9) - 0.95;
            let w = aniso_gaussian_weights(&KernelParams::aniso(s1, s2, r), &spec_aniso).unwrap();
            assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.weights.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn polyblur_zero_coefficients_is_identity() {
        let img = window_image(12, 5);
        let spec = KernelSpec::polyblur();
        let map = ParamMap::constant(12, 12, 3, 0.0, 1.0);
        let out = polyblur_apply(&img, &map, &spec).unwrap();
        for (a, b) in img.data.iter().zip(out.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn polyblur_b_one_is_single_blur_pass() {
        let img = window_image(12, 6);
        let spec = KernelSpec::polyblur();
        let mut map = ParamMap::constant(12, 12, 3, 0.0, 1.0);
        for v in map.data[0..144].iter_mut() {
            *v = 1.0;
        }
        let out = polyblur_apply(&img, &map, &spec).unwrap();
        let blur = gaussian_blur(&img, spec.base_blur_sigma);
        for (a, b) in blur.data.iter().zip(out.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn polyblur_preserves_constants_for_any_map() {
        let img = Image::constant(10, 8, 2, 0.37);
        let spec = KernelSpec::polyblur();
        let mut map = ParamMap::constant(10, 8, 3, 0.0, 1.0);
        for (i, v) in map.data.iter_mut().enumerate() {
            *v = ((i as f64 * 0.717).sin() * 3.9).clamp(-3.99, 3.99);
        }
        let out = polyblur_apply(&img, &map, &spec).unwrap();
        for v in &out.data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn polyblur_rejects_non_finite_coefficients() {
        let img = Image::constant(8, 8, 1, 0.5);
        let spec = KernelSpec::polyblur();
        let mut map = ParamMap::constant(8, 8, 3, 0.0, 1.0);
        map.data[10] = f64::NAN;
        assert!(polyblur_apply(&img, &map, &spec).is_err());
    }

    #[test]
    fn nlm_rejects_non_finite_window() {
        let spec = KernelSpec::nlm();
        let mut win = Image::constant(7, 7, 1, 0.5);
        win.set(3, 3, 0, f64::INFINITY);
        assert!(nlm_weights(&win, &KernelParams::scalar(1.0), 0.1, &spec).is_err());
    }
}
