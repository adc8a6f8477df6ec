//! Spatially varying kernel application.
//!
//! A [`ParamMap`] stores per-pixel kernel parameters at a reduced resolution;
//! the apply paths bilinearly sample it per output pixel, generate the local
//! kernel and take the weighted sum. Continuous-position evaluation of the
//! anisotropic family gives fractional upsampling.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{bilinear_resize, lerp_coeffs, pad_mirror, src_coord, Image};
use crate::io::{load_pfm, save_pfm};
use crate::kernel::{
    self, KernelFamily, KernelSpec, WindowGeom, SIGMA_FLOOR,
};

/// Per-pixel kernel parameters at a (possibly reduced) resolution, values
/// already remapped into their bounded ranges. Layout matches [`Image`]:
/// planar, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Ratio of image resolution to map resolution (2.0 for half-res maps);
    /// informational, sampling works for any ratio.
    pub scale_hint: f64,
}

impl ParamMap {
    pub fn new(width: usize, height: usize, channels: usize, scale_hint: f64) -> Self {
        ParamMap::constant(width, height, channels, 0.0, scale_hint)
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64, scale_hint: f64) -> Self {
        assert!(width > 0 && height > 0, "empty parameter map");
        assert!((1..=3).contains(&channels), "1 to 3 parameter channels");
        ParamMap {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            scale_hint,
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
        scale_hint: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || !(1..=3).contains(&channels) {
            return Err(Error::InvalidGeometry(format!(
                "bad parameter map shape {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidGeometry(format!(
                "parameter map data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ParamMap {
            width,
            height,
            channels,
            data,
            scale_hint,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View as an image so resampling and PFM plumbing can be shared.
    pub(crate) fn as_image(&self) -> Image {
        Image::from_data(self.width, self.height, self.channels, self.data.clone())
            .expect("map shape is validated on construction")
    }

    /// Bilinearly resample the map itself to a new grid.
    pub fn resampled(&self, width: usize, height: usize) -> ParamMap {
        let img = bilinear_resize(&self.as_image(), width, height);
        ParamMap {
            width,
            height,
            channels: self.channels,
            data: img.data,
            scale_hint: 1.0,
        }
    }
}

fn check_map_fits(pmap: &ParamMap, img: &Image) -> Result<()> {
    if pmap.width > img.width || pmap.height > img.height {
        return Err(Error::MapMismatch(format!(
            "parameter map {}x{} exceeds image {}x{}",
            pmap.width, pmap.height, img.width, img.height
        )));
    }
    if !pmap.is_finite() {
        return Err(Error::NonFinite("parameter map"));
    }
    Ok(())
}

/// Precomputed state for applying (and differentiating) a spatially varying
/// kernel over one image: padded planes, window geometry and, for NLM, the
/// per-offset patch distance planes.
pub(crate) struct VaryingContext {
    pub family: KernelFamily,
    pub geom: WindowGeom,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pad: usize,
    pub padded: Image,
    /// NLM only: `patch_d[c][k * n + i]` is the mean squared patch difference
    /// between pixel `i` and its window offset `k` in channel `c`.
    pub patch_d: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl VaryingContext {
    pub fn new(img: &Image, spec: &KernelSpec, noise_sigma: f64) -> Result<Self> {
        spec.validate()?;
        if !img.is_finite() {
            return Err(Error::NonFinite("input image"));
        }
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be finite and >= 0, got {noise_sigma}"
            )));
        }
        let is_nlm = spec.family == KernelFamily::Nlm;
        let pad = spec.window_radius + if is_nlm { spec.patch_radius } else { 0 };
        let padded = pad_mirror(img, pad)?;
        let geom = WindowGeom::new(spec.window_radius, spec.spatial_sigma);
        let mut ctx = VaryingContext {
            family: spec.family,
            geom,
            width: img.width,
            height: img.height,
            channels: img.channels,
            pad,
            padded,
            patch_d: Vec::new(),
            noise_sigma,
        };
        if is_nlm {
            ctx.compute_patch_planes(spec);
        }
        Ok(ctx)
    }

    fn compute_patch_planes(&mut self, spec: &KernelSpec) {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let pw = self.padded.width;
        let pr = spec.patch_radius as i32;
        let pad = self.pad as i32;
        let patch_n = ((2 * pr + 1) * (2 * pr + 1)) as f64;
        let nk = self.geom.offsets.len();
        self.patch_d = (0..self.channels)
            .map(|c| {
                let plane = self.padded.plane(c);
                let mut out = vec![0.0; nk * n];
                out.par_chunks_mut(n).enumerate().for_each(|(k, chunk)| {
                    let (dx, dy) = self.geom.offsets[k];
                    for y in 0..h as i32 {
                        for x in 0..w as i32 {
                            let mut acc = 0.0;
                            for py in -pr..=pr {
                                for px in -pr..=pr {
                                    let ax = (x + pad + px) as usize;
                                    let ay = (y + pad + py) as usize;
                                    let bx = (x + pad + dx + px) as usize;
                                    let by = (y + pad + dy + py) as usize;
                                    let d = plane[ay * pw + ax] - plane[by * pw + bx];
                                    acc += d * d;
                                }
                            }
                            chunk[(y * w as i32 + x) as usize] = acc / patch_n;
                        }
                    }
                });
                out
            })
            .collect();
    }

    /// Normalized kernel weights for output pixel (x, y) of channel `c`.
    /// Weights of the Gaussian families do not depend on the channel.
    pub fn weights_at(&self, c: usize, x: usize, y: usize, params: &[f64], w: &mut [f64]) {
        match self.family {
            KernelFamily::Nlm => {
                let n = self.width * self.height;
                let i = y * self.width + x;
                let pd = &self.patch_d[c];
                let sig = (params[0] * self.noise_sigma).max(SIGMA_FLOOR);
                let inv = 1.0 / (2.0 * sig * sig);
                let mut sum = 0.0;
                for k in 0..w.len() {
                    let s = self.geom.spatial[k] * (-pd[k * n + i] * inv).exp();
                    w[k] = s;
                    sum += s;
                }
                let norm = 1.0 / sum;
                for v in w.iter_mut() {
                    *v *= norm;
                }
            }
            KernelFamily::IsoGaussian => {
                kernel::iso_weights_core(&self.geom.dist2, params[0].max(SIGMA_FLOOR), w);
            }
            KernelFamily::AnisoGaussian => {
                kernel::aniso_weights_core(&self.geom, params[0], params[1], params[2], w);
            }
            KernelFamily::Polyblur => unreachable!("polyblur has no windowed weights"),
        }
    }

    /// Weighted sum of the padded window around (x, y) in channel `c`.
    #[inline]
    pub fn gather(&self, c: usize, x: usize, y: usize, w: &[f64]) -> f64 {
        let pw = self.padded.width;
        let plane = self.padded.plane(c);
        let cx = x + self.pad;
        let cy = y + self.pad;
        let mut acc = 0.0;
        for (k, &(dx, dy)) in self.geom.offsets.iter().enumerate() {
            let sx = (cx as i32 + dx) as usize;
            let sy = (cy as i32 + dy) as usize;
            acc += w[k] * plane[sy * pw + sx];
        }
        acc
    }

    /// Copies the padded window around (x, y) in channel `c` into `out`.
    #[inline]
    pub fn window_values(&self, c: usize, x: usize, y: usize, out: &mut [f64]) {
        let pw = self.padded.width;
        let plane = self.padded.plane(c);
        let cx = x + self.pad;
        let cy = y + self.pad;
        for (k, &(dx, dy)) in self.geom.offsets.iter().enumerate() {
            let sx = (cx as i32 + dx) as usize;
            let sy = (cy as i32 + dy) as usize;
            out[k] = plane[sy * pw + sx];
        }
    }
}

/// Bilinearly upsamples the map to the target grid; the result is planar,
/// channel-major, exactly what [`bilinear_resize`] would produce.
pub(crate) fn sample_map_full(pmap: &ParamMap, width: usize, height: usize) -> Vec<f64> {
    bilinear_resize(&pmap.as_image(), width, height).data
}

/// Applies a spatially varying windowed kernel (NLM, isotropic or
/// anisotropic Gaussian) across the image. The parameter map is bilinearly
/// sampled at every output pixel; channels are filtered independently.
pub fn apply_varying(
    img: &Image,
    pmap: &ParamMap,
    spec: &KernelSpec,
    noise_sigma: f64,
) -> Result<Image> {
    spec.validate()?;
    if spec.family == KernelFamily::Polyblur {
        return Err(Error::InvalidSpec(
            "polyblur is applied through apply_polyblur, not a windowed kernel".into(),
        ));
    }
    if pmap.channels != spec.param_channels() {
        return Err(Error::MapMismatch(format!(
            "map has {} channels, {} family needs {}",
            pmap.channels,
            spec.family.name(),
            spec.param_channels()
        )));
    }
    check_map_fits(pmap, img)?;
    let ctx = VaryingContext::new(img, spec, noise_sigma)?;
    let params = sample_map_full(pmap, img.width, img.height);
    Ok(apply_with_context(&ctx, &params))
}

/// Shared forward pass over a precomputed context and full-resolution,
/// already remapped parameters (planar, channel-major).
pub(crate) fn apply_with_context(ctx: &VaryingContext, params: &[f64]) -> Image {
    let (w, h) = (ctx.width, ctx.height);
    let n = w * h;
    let nk = ctx.geom.offsets.len();
    let mut out = Image::new(w, h, ctx.channels);
    for c in 0..ctx.channels {
        let plane = out.plane_mut(c);
        plane.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let mut wbuf = vec![0.0; nk];
            let mut p = vec![0.0; params.len() / n];
            for (x, slot) in row.iter_mut().enumerate() {
                let i = y * w + x;
                for (j, v) in p.iter_mut().enumerate() {
                    *v = params[j * n + i];
                }
                ctx.weights_at(c, x, y, &p, &mut wbuf);
                *slot = ctx.gather(c, x, y, &wbuf);
            }
        });
    }
    out
}

/// Applies the polynomial reblurring kernel with a reduced-resolution
/// coefficient map: the map is bilinearly upsampled to image resolution and
/// combined with the base blur stack pointwise.
pub fn apply_polyblur(img: &Image, pmap: &ParamMap, spec: &KernelSpec) -> Result<Image> {
    spec.validate()?;
    if spec.family != KernelFamily::Polyblur {
        return Err(Error::InvalidSpec(format!(
            "apply_polyblur needs the polyblur family, got {}",
            spec.family.name()
        )));
    }
    if pmap.channels != 3 {
        return Err(Error::MapMismatch(format!(
            "polyblur map needs 3 channels (b, c, d), got {}",
            pmap.channels
        )));
    }
    check_map_fits(pmap, img)?;
    let full = pmap.resampled(img.width, img.height);
    kernel::polyblur_apply(img, &full, spec)
}

/// Round-half-up output length for a magnification factor.
fn scaled_len(len: usize, factor: f64) -> usize {
    (factor * len as f64 + 0.5).floor() as usize
}

fn check_upsample_inputs(img: &Image, pmap: &ParamMap, factor: f64) -> Result<(usize, usize)> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "magnification factor must be finite and > 0, got {factor}"
        )));
    }
    if pmap.channels != 3 {
        return Err(Error::MapMismatch(format!(
            "continuous upsampling needs (sigma1, sigma2, rho) maps, got {} channels",
            pmap.channels
        )));
    }
    check_map_fits(pmap, img)?;
    let n = pmap.width * pmap.height;
    for i in 0..n {
        let s1 = pmap.data[i];
        let s2 = pmap.data[n + i];
        let rho = pmap.data[2 * n + i];
        if !(s1 > 0.0 && s2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "upsampling sigmas must be > 0, got ({s1}, {s2})"
            )));
        }
        if rho.abs() > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "correlation must lie in [-1, 1], got {rho}"
            )));
        }
    }
    let (ow, oh) = (scaled_len(img.width, factor), scaled_len(img.height, factor));
    if ow == 0 || oh == 0 {
        return Err(Error::InvalidGeometry(format!(
            "factor {factor} yields empty {ow}x{oh} output"
        )));
    }
    if ow.saturating_mul(oh).saturating_mul(img.channels) > (1usize << 31) {
        return Err(Error::InvalidGeometry(format!(
            "factor {factor} yields oversized {ow}x{oh} output"
        )));
    }
    Ok((ow, oh))
}

const UPSAMPLE_PAD: usize = 2;

/// Resamples the image to `round(factor * dims)` by evaluating anisotropic
/// Gaussian kernels at continuous source positions.
///
/// The parameter map holds `(sigma1, sigma2, rho)` on a source-aligned grid.
/// Its precision-matrix entries (not the sigmas) are bilinearly interpolated
/// at each continuous position; the kernel then weighs the 5x5 source
/// neighborhood around the nearest source pixel (mirror boundary). If every
/// weight underflows to zero the kernel degenerates to nearest neighbor.
pub fn upsample_continuous(img: &Image, pmap: &ParamMap, factor: f64) -> Result<Image> {
    let (ow, oh) = check_upsample_inputs(img, pmap, factor)?;
    if !img.is_finite() {
        return Err(Error::NonFinite("input image"));
    }

    // precision entries on the map grid
    let n = pmap.width * pmap.height;
    let mut prec = ParamMap::new(pmap.width, pmap.height, 3, pmap.scale_hint);
    for i in 0..n {
        let (p11, p12, p22) =
            kernel::precision_entries(pmap.data[i], pmap.data[n + i], pmap.data[2 * n + i]);
        prec.data[i] = p11;
        prec.data[n + i] = p12;
        prec.data[2 * n + i] = p22;
    }

    let padded = pad_mirror(img, UPSAMPLE_PAD)?;
    let (w, h) = (img.width, img.height);
    let pw = padded.width;
    let r = UPSAMPLE_PAD as isize;

    let mut out = Image::new(ow, oh, img.channels);
    let planes: Vec<&[f64]> = (0..img.channels).map(|c| padded.plane(c)).collect();
    let mut out_planes: Vec<Vec<f64>> = Vec::with_capacity(img.channels);
    for _ in 0..img.channels {
        out_planes.push(vec![0.0; ow * oh]);
    }

    // Rows are independent; weights are shared by all channels.
    let rows: Vec<Vec<f64>> = (0..oh)
        .into_par_iter()
        .map(|oy| {
            let mut row = vec![0.0; ow * img.channels];
            let sy = src_coord(oy, h, oh);
            let mut wbuf = [0.0f64; (2 * UPSAMPLE_PAD + 1) * (2 * UPSAMPLE_PAD + 1)];
            for ox in 0..ow {
                let sx = src_coord(ox, w, ow);
                // precision entries at the continuous source position
                let (p11, p12, p22) = sample_precision(&prec, sx, sy, w, h);
                let cx = sx.round() as isize;
                let cy = sy.round() as isize;
                let mut sum = 0.0;
                let mut k = 0;
                for dy in -r..=r {
                    let v = (cy + dy) as f64 - sy;
                    for dx in -r..=r {
                        let u = (cx + dx) as f64 - sx;
                        let q = 0.5 * (p11 * u * u + 2.0 * p12 * u * v + p22 * v * v);
                        let wt = (-q).exp();
                        wbuf[k] = wt;
                        sum += wt;
                        k += 1;
                    }
                }
                if sum == 0.0 {
                    // nearest-neighbor fallback in the delta limit
                    let ix = cx.clamp(0, w as isize - 1) as usize + UPSAMPLE_PAD;
                    let iy = cy.clamp(0, h as isize - 1) as usize + UPSAMPLE_PAD;
                    for (c, plane) in planes.iter().enumerate() {
                        row[c * ow + ox] = plane[iy * pw + ix];
                    }
                    continue;
                }
                for (c, plane) in planes.iter().enumerate() {
                    let mut acc = 0.0;
                    let mut k = 0;
                    for dy in -r..=r {
                        let iy = (cy + dy + r) as usize;
                        for dx in -r..=r {
                            let ix = (cx + dx + r) as usize;
                            acc += wbuf[k] * plane[iy * pw + ix];
                            k += 1;
                        }
                    }
                    // divide rather than multiply by a reciprocal: a sum
                    // that underflows to a subnormal would overflow 1/sum
                    row[c * ow + ox] = acc / sum;
                }
            }
            row
        })
        .collect();

    for (oy, row) in rows.iter().enumerate() {
        for c in 0..img.channels {
            out_planes[c][oy * ow..(oy + 1) * ow].copy_from_slice(&row[c * ow..(c + 1) * ow]);
        }
    }
    for (c, plane) in out_planes.into_iter().enumerate() {
        out.plane_mut(c).copy_from_slice(&plane);
    }
    Ok(out)
}

/// Bilinear sample of the precision planes at a continuous source position.
fn sample_precision(prec: &ParamMap, sx: f64, sy: f64, src_w: usize, src_h: usize) -> (f64, f64, f64) {
    let n = prec.width * prec.height;
    // continuous source position -> map grid coordinates
    let mx = (sx + 0.5) * (prec.width as f64 / src_w as f64) - 0.5;
    let my = (sy + 0.5) * (prec.height as f64 / src_h as f64) - 0.5;
    let (x0, x1, fx) = lerp_coeffs(mx, prec.width);
    let (y0, y1, fy) = lerp_coeffs(my, prec.height);
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let p = &prec.data[c * n..(c + 1) * n];
        let top = p[y0 * prec.width + x0] * (1.0 - fx) + p[y0 * prec.width + x1] * fx;
        let bot = p[y1 * prec.width + x0] * (1.0 - fx) + p[y1 * prec.width + x1] * fx;
        *slot = top * (1.0 - fy) + bot * fy;
    }
    (out[0], out[1], out[2])
}

/// Upsamples to several factors from one shared parameter map; each output
/// is identical to the corresponding direct [`upsample_continuous`] call.
pub fn infer_once_upsample_many(img: &Image, pmap: &ParamMap, factors: &[f64]) -> Result<Vec<Image>> {
    factors
        .iter()
        .map(|&f| upsample_continuous(img, pmap, f))
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization: PFM payload plus a key=value sidecar.
// ---------------------------------------------------------------------------

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    std::path::PathBuf::from(os)
}

/// Writes the map as PFM with a `<path>.meta` sidecar recording the channel
/// layout and remap ranges so the file can be hand-edited and re-imported.
pub fn save_param_map(pmap: &ParamMap, spec: &KernelSpec, path: &Path) -> Result<()> {
    save_pfm(&pmap.as_image(), path)?;
    let meta = meta_path(path);
    let mut body = String::new();
    body.push_str("format=kernelfit-parammap\n");
    body.push_str("version=1\n");
    body.push_str(&format!("family={}\n", spec.family.name()));
    body.push_str(&format!("channels={}\n", pmap.channels));
    body.push_str(&format!("scale_hint={}\n", pmap.scale_hint));
    for (i, (lo, hi)) in spec.remap_ranges.iter().enumerate() {
        body.push_str(&format!("range{i}={lo},{hi}\n"));
    }
    let mut f = fs::File::create(&meta).map_err(|e| Error::Io {
        path: meta.clone(),
        source: e,
    })?;
    f.write_all(body.as_bytes()).map_err(|e| Error::Io {
        path: meta.clone(),
        source: e,
    })?;
    Ok(())
}

/// Reads a map written by [`save_param_map`]. The sidecar is required; extra
/// keys (provenance lines) are ignored.
pub fn load_param_map(path: &Path) -> Result<ParamMap> {
    let img = load_pfm(path)?;
    let meta = meta_path(path);
    let text = fs::read_to_string(&meta).map_err(|e| Error::Io {
        path: meta.clone(),
        source: e,
    })?;
    let mut channels: Option<usize> = None;
    let mut scale_hint = 1.0f64;
    let mut format_ok = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key.trim() {
            "format" => format_ok = value.trim() == "kernelfit-parammap",
            "channels" => {
                channels = Some(value.trim().parse().map_err(|_| {
                    Error::Decode {
                        path: meta.clone(),
                        reason: format!("bad channels value '{value}'"),
                    }
                })?)
            }
            "scale_hint" => {
                scale_hint = value.trim().parse().map_err(|_| Error::Decode {
                    path: meta.clone(),
                    reason: format!("bad scale_hint value '{value}'"),
                })?
            }
            _ => {}
        }
    }
    if !format_ok {
        return Err(Error::Decode {
            path: meta,
            reason: "sidecar does not declare format=kernelfit-parammap".into(),
        });
    }
    if let Some(ch) = channels {
        if ch != img.channels {
            return Err(Error::Decode {
                path: meta,
                reason: format!(
                    "sidecar declares {ch} channels but the PFM holds {}",
                    img.channels
                ),
            });
        }
    }
    ParamMap::from_data(img.width, img.height, img.channels, img.data, scale_hint)
}
