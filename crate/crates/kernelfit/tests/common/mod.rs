//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here is written straight from the kernel definitions: no
//! padding buffers, no precomputed distance planes, no shared cores with the
//! library. Per pixel we mirror indices on the fly, rebuild the window and
//! evaluate the closed-form weight, so agreement with the fast paths is
//! evidence rather than tautology.

use kernelfit::{Image, KernelFamily, KernelSpec, ParamMap, RHO_LIMIT, SIGMA_FLOOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mirror (reflect-without-repeat) index into `[0, len)`.
pub fn mirror(idx: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if idx < 0 {
        -idx
    } else if idx >= n {
        2 * n - 2 - idx
    } else {
        idx
    };
    assert!((0..n).contains(&r), "offset too large for {len}-sample axis");
    r as usize
}

/// Pixel fetch with mirrored out-of-range coordinates.
pub fn at_mirrored(img: &Image, x: isize, y: isize, c: usize) -> f64 {
    img.at(mirror(x, img.width), mirror(y, img.height), c)
}

/// Bilinear sample of one parameter-map channel at full-resolution pixel
/// (x, y), using half-pixel-center alignment and clamped borders.
pub fn sample_map(pmap: &ParamMap, c: usize, x: usize, y: usize, w: usize, h: usize) -> f64 {
    bilerp_channel(
        &pmap.data[c * pmap.width * pmap.height..(c + 1) * pmap.width * pmap.height],
        pmap.width,
        pmap.height,
        (x as f64 + 0.5) * (pmap.width as f64 / w as f64) - 0.5,
        (y as f64 + 0.5) * (pmap.height as f64 / h as f64) - 0.5,
    )
}

/// Clamped bilinear interpolation over one planar channel at continuous
/// grid coordinates.
pub fn bilerp_channel(plane: &[f64], w: usize, h: usize, gx: f64, gy: f64) -> f64 {
    let cx = gx.clamp(0.0, (w - 1) as f64);
    let cy = gy.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Unnormalized window score at offset (dx, dy) for one output pixel,
/// evaluated from the family's closed form.
fn window_score(
    img: &Image,
    spec: &KernelSpec,
    params: &[f64],
    noise_sigma: f64,
    c: usize,
    x: usize,
    y: usize,
    dx: isize,
    dy: isize,
) -> f64 {
    let d2 = (dx * dx + dy * dy) as f64;
    match spec.family {
        KernelFamily::Nlm => {
            let pr = spec.patch_radius as isize;
            let mut dist = 0.0;
            for py in -pr..=pr {
                for px in -pr..=pr {
                    let a = at_mirrored(img, x as isize + px, y as isize + py, c);
                    let b = at_mirrored(img, x as isize + dx + px, y as isize + dy + py, c);
                    dist += (a - b) * (a - b);
                }
            }
            dist /= ((2 * pr + 1) * (2 * pr + 1)) as f64;
            let spatial = (-d2 / (2.0 * spec.spatial_sigma * spec.spatial_sigma)).exp();
            let sig = (params[0] * noise_sigma).max(SIGMA_FLOOR);
            spatial * (-dist / (2.0 * sig * sig)).exp()
        }
        KernelFamily::IsoGaussian => {
            let sig = params[0].max(SIGMA_FLOOR);
            (-d2 / (2.0 * sig * sig)).exp()
        }
        KernelFamily::AnisoGaussian => {
            let s1 = params[0].max(SIGMA_FLOOR);
            let s2 = params[1].max(SIGMA_FLOOR);
            let rho = params[2].clamp(-RHO_LIMIT, RHO_LIMIT);
            let (u, v) = (dx as f64, dy as f64);
            let q = u * u / (s1 * s1) - 2.0 * rho * u * v / (s1 * s2) + v * v / (s2 * s2);
            (-q / (2.0 * (1.0 - rho * rho))).exp()
        }
        KernelFamily::Polyblur => unreachable!("polyblur is not a windowed kernel"),
    }
}

/// Per-pixel brute-force version of the spatially varying windowed apply:
/// sample the map, rebuild the normalized kernel from its closed form and
/// take the weighted sum over the mirrored window.
pub fn brute_apply_varying(
    img: &Image,
    pmap: &ParamMap,
    spec: &KernelSpec,
    noise_sigma: f64,
) -> Image {
    let r = spec.window_radius as isize;
    let mut out = Image::new(img.width, img.height, img.channels);
    let mut params = vec![0.0; pmap.channels];
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                for (j, p) in params.iter_mut().enumerate() {
                    *p = sample_map(pmap, j, x, y, img.width, img.height);
                }
                let mut sum = 0.0;
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = window_score(img, spec, &params, noise_sigma, c, x, y, dx, dy);
                        sum += w;
                        acc += w * at_mirrored(img, x as isize + dx, y as isize + dy, c);
                    }
                }
                out.set(x, y, c, acc / sum);
            }
        }
    }
    out
}

/// Direct bilateral filter: spatial Gaussian times a range Gaussian on the
/// center-pixel intensity difference, written from the textbook definition.
pub fn brute_bilateral(
    img: &Image,
    multiplier: f64,
    noise_sigma: f64,
    spatial_sigma: f64,
    radius: isize,
) -> Image {
    let sig = (multiplier * noise_sigma).max(SIGMA_FLOOR);
    let mut out = Image::new(img.width, img.height, img.channels);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let center = img.at(x, y, c);
                let mut sum = 0.0;
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let v = at_mirrored(img, x as isize + dx, y as isize + dy, c);
                        let d2 = (dx * dx + dy * dy) as f64;
                        let w = (-d2 / (2.0 * spatial_sigma * spatial_sigma)).exp()
                            * (-(center - v) * (center - v) / (2.0 * sig * sig)).exp();
                        sum += w;
                        acc += w * v;
                    }
                }
                out.set(x, y, c, acc / sum);
            }
        }
    }
    out
}

/// Brute-force continuous-position resampling with anisotropic Gaussian
/// kernels. Follows the published contract: half-pixel-center source
/// coordinates, precision entries (not sigmas) interpolated on the map grid,
/// a 5x5 mirrored window around the rounded source position, and a
/// nearest-neighbor fallback when every weight underflows to zero.
pub fn brute_upsample(img: &Image, pmap: &ParamMap, factor: f64) -> Image {
    let ow = (factor * img.width as f64 + 0.5).floor() as usize;
    let oh = (factor * img.height as f64 + 0.5).floor() as usize;
    let n = pmap.width * pmap.height;
    let mut prec = vec![0.0; 3 * n];
    for i in 0..n {
        let s1 = pmap.data[i].max(SIGMA_FLOOR);
        let s2 = pmap.data[n + i].max(SIGMA_FLOOR);
        let rho = pmap.data[2 * n + i].clamp(-RHO_LIMIT, RHO_LIMIT);
        let q = 1.0 / (1.0 - rho * rho);
        prec[i] = q / (s1 * s1);
        prec[n + i] = -rho * q / (s1 * s2);
        prec[2 * n + i] = q / (s2 * s2);
    }

    let mut out = Image::new(ow, oh, img.channels);
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * (img.height as f64 / oh as f64) - 0.5;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * (img.width as f64 / ow as f64) - 0.5;
            let mx = (sx + 0.5) * (pmap.width as f64 / img.width as f64) - 0.5;
            let my = (sy + 0.5) * (pmap.height as f64 / img.height as f64) - 0.5;
            let p11 = bilerp_channel(&prec[..n], pmap.width, pmap.height, mx, my);
            let p12 = bilerp_channel(&prec[n..2 * n], pmap.width, pmap.height, mx, my);
            let p22 = bilerp_channel(&prec[2 * n..], pmap.width, pmap.height, mx, my);
            let cx = sx.round() as isize;
            let cy = sy.round() as isize;
            let mut weights = [0.0; 25];
            let mut sum = 0.0;
            for (k, w) in weights.iter_mut().enumerate() {
                let u = (cx + (k % 5) as isize - 2) as f64 - sx;
                let v = (cy + (k / 5) as isize - 2) as f64 - sy;
                *w = (-0.5 * (p11 * u * u + 2.0 * p12 * u * v + p22 * v * v)).exp();
                sum += *w;
            }
            for c in 0..img.channels {
                let value = if sum == 0.0 {
                    img.at(cx as usize, cy as usize, c)
                } else {
                    let mut acc = 0.0;
                    for (k, w) in weights.iter().enumerate() {
                        let x = cx + (k % 5) as isize - 2;
                        let y = cy + (k / 5) as isize - 2;
                        acc += w * at_mirrored(img, x, y, c);
                    }
                    acc / sum
                };
                out.set(ox, oy, c, value);
            }
        }
    }
    out
}

/// Largest absolute per-sample difference.
pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.len(), b.data.len(), "shape mismatch");
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Uniform random image on [0, 1).
pub fn rand_image(width: usize, height: usize, channels: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(width, height, channels);
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

/// Random parameter map with every channel drawn from its remap range,
/// pulled slightly inside the bounds so correlation stays non-singular.
pub fn rand_map(spec: &KernelSpec, width: usize, height: usize, seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pmap = ParamMap::new(width, height, spec.param_channels(), 2.0);
    let n = width * height;
    for (c, &(lo, hi)) in spec.remap_ranges.iter().enumerate() {
        let margin = 0.02 * (hi - lo);
        for i in 0..n {
            pmap.data[c * n + i] = rng.gen_range(lo + margin..hi - margin);
        }
    }
    pmap
}
