//! HR → LR simulation (Gaussian blur, bicubic downsampling, additive Gaussian
//! noise, clamp) and aligned LR/HR patch extraction.

use crate::config::{format_f64, KvMap};
use crate::error::{config_err, shape_err, Result};
use crate::numerics::ops::bicubic_resize;
use crate::numerics::{Padding, PortableRng, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationConfig {
    pub blur_sigma: f64,
    pub blur_kernel_size: usize,
    pub scale: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { blur_sigma: 1.0, blur_kernel_size: 7, scale: 2, noise_sigma: 2.0 / 255.0, seed: 42 }
    }
}

const KEYS: &[&str] = &["blur_sigma", "blur_kernel_size", "scale", "noise_sigma", "seed"];

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel_size % 2 == 0 {
            return config_err(format!("blur_kernel_size must be odd, got {}", self.blur_kernel_size));
        }
        if !(self.blur_sigma > 0.0) {
            return config_err(format!("blur_sigma must be positive, got {}", self.blur_sigma));
        }
        if self.scale == 0 {
            return config_err("scale must be ≥ 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return config_err(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("blur_sigma", format_f64(self.blur_sigma));
        kv.set("blur_kernel_size", self.blur_kernel_size);
        kv.set("scale", self.scale);
        kv.set("noise_sigma", format_f64(self.noise_sigma));
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let c = Self {
            blur_sigma: kv.get_or("blur_sigma", d.blur_sigma)?,
            blur_kernel_size: kv.get_or("blur_kernel_size", d.blur_kernel_size)?,
            scale: kv.get_or("scale", d.scale)?,
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Normalized k×k Gaussian sampled at integer offsets from the centre.
pub fn gaussian_kernel<T: Scalar>(sigma: f64, k: usize) -> Result<Tensor<T>> {
    if k % 2 == 0 {
        return config_err(format!("gaussian kernel size must be odd, got {k}"));
    }
    if !(sigma > 0.0) {
        return config_err(format!("gaussian sigma must be positive, got {sigma}"));
    }
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - r, (i % k) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(Tensor::from_vec(&[k, k], raw.iter().map(|v| T::of(v / total)).collect()))
}

/// Replicate-padded blur of every plane of [b, H, W].
pub fn gaussian_blur<T: Scalar>(img: &Tensor<T>, sigma: f64, k: usize) -> Result<Tensor<T>> {
    let d = img.dims();
    if d.len() != 3 {
        return shape_err(format!("expected an image [bands, H, W], got {d:?}"));
    }
    let kern = gaussian_kernel::<T>(sigma, k)?;
    let per_band: Vec<T> = (0..d[0]).flat_map(|_| kern.data().iter().copied()).collect();
    let tape = Tape::inference();
    let x = tape.constant(img.reshape(&[1, d[0], d[1], d[2]])?);
    let kv = tape.constant(Tensor::from_vec(&[d[0], k, k], per_band));
    tape.depthwise_conv2d(&x, &kv, Padding::Replicate)?.value().reshape(d)
}

/// Degrade image number `index` of a collection; the noise stream is
/// seeded with `config.seed ^ index`.
pub fn degrade_indexed<T: Scalar>(hr: &Tensor<T>, config: &DegradationConfig, index: u64) -> Result<Tensor<T>> {
    config.validate()?;
    let d = hr.dims();
    if d.len() != 3 {
        return shape_err(format!("expected an image [bands, H, W], got {d:?}"));
    }
    let s = config.scale;
    if d[1] % s != 0 || d[2] % s != 0 {
        return shape_err(format!("{}×{} is not divisible by scale {s}", d[1], d[2]));
    }
    let blurred = gaussian_blur(hr, config.blur_sigma, config.blur_kernel_size)?;
    let mut lr = bicubic_resize(&blurred, 1, s)?;
    let mut rng = PortableRng::derived(config.seed, index);
    let sigma = config.noise_sigma;
    for v in lr.data_mut() {
        let noisy = if sigma > 0.0 { v.as_f64() + sigma * rng.normal() } else { v.as_f64() };
        *v = T::of(noisy.clamp(0.0, 1.0));
    }
    Ok(lr)
}

pub fn degrade<T: Scalar>(hr: &Tensor<T>, config: &DegradationConfig) -> Result<Tensor<T>> {
    degrade_indexed(hr, config, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair<T: Scalar> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    /// top-left corner in LR pixels; the HR corner is `scale` times this
    pub lr_origin: (usize, usize),
    pub hr_origin: (usize, usize),
}

fn crop<T: Scalar>(img: &Tensor<T>, y0: usize, x0: usize, p: usize) -> Tensor<T> {
    let d = img.dims();
    let (h, w) = (d[1], d[2]);
    let mut out = Vec::with_capacity(d[0] * p * p);
    for b in 0..d[0] {
        for y in y0..y0 + p {
            let row = (b * h + y) * w;
            out.extend_from_slice(&img.data()[row + x0..row + x0 + p]);
        }
    }
    Tensor::from_vec(&[d[0], p, p], out)
}

/// `count` random aligned crops; positions are uniform over valid LR corners.
pub fn extract_patch_pairs<T: Scalar>(
    hr: &Tensor<T>,
    lr: &Tensor<T>,
    lr_patch: usize,
    scale: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchPair<T>>> {
    let (hd, ld) = (hr.dims(), lr.dims());
    if hd.len() != 3 || ld.len() != 3 || hd[0] != ld[0] || hd[1] != scale * ld[1] || hd[2] != scale * ld[2] {
        return shape_err(format!("HR {hd:?} is not {scale}× LR {ld:?}"));
    }
    if lr_patch == 0 || lr_patch > ld[1] || lr_patch > ld[2] {
        return config_err(format!("LR patch {lr_patch} does not fit a {}×{} image", ld[1], ld[2]));
    }
    let mut rng = PortableRng::new(seed);
    Ok((0..count)
        .map(|_| {
            let i = rng.below(ld[1] - lr_patch + 1);
            let j = rng.below(ld[2] - lr_patch + 1);
            PatchPair {
                lr: crop(lr, i, j, lr_patch),
                hr: crop(hr, scale * i, scale * j, scale * lr_patch),
                lr_origin: (i, j),
                hr_origin: (scale * i, scale * j),
            }
        })
        .collect())
}

/// Deterministic test scene in [0.05, 0.95]: a smooth gradient, two oriented
/// sinusoids and a few flat rectangles, different per band.
pub fn synthetic_scene<T: Scalar>(bands: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = PortableRng::new(seed);
    let mut data = Vec::with_capacity(bands * h * w);
    for _ in 0..bands {
        let (gx, gy) = (rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3));
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                let f = rng.uniform_range(0.05, 0.35);
                let a = rng.uniform_range(0.0, std::f64::consts::PI);
                (f * a.cos(), f * a.sin(), rng.uniform_range(0.0, 6.3), rng.uniform_range(0.05, 0.15))
            })
            .collect();
        let rects: Vec<(usize, usize, usize, usize, f64)> = (0..3)
            .map(|_| {
                let (y0, x0) = (rng.below(h), rng.below(w));
                let (rh, rw) = (1 + rng.below(h / 2 + 1), 1 + rng.below(w / 2 + 1));
                (y0, x0, rh, rw, rng.uniform_range(-0.25, 0.25))
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
                let mut val = 0.5 + gx * u + gy * v;
                for &(fx, fy, ph, amp) in &waves {
                    val += amp * (2.0 * std::f64::consts::PI * (fx * x as f64 + fy * y as f64) + ph).sin();
                }
                for &(y0, x0, rh, rw, d) in &rects {
                    if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
                        val += d;
                    }
                }
                data.push(T::of(val.clamp(0.05, 0.95)));
            }
        }
    }
    Tensor::from_vec(&[bands, h, w], data)
}

/// `count` HR scenes of `scale·lr_size` pixels with their degraded LR versions.
pub fn synthetic_pairs<T: Scalar>(
    count: usize,
    bands: usize,
    lr_size: usize,
    config: &DegradationConfig,
) -> Result<Vec<PatchPair<T>>> {
    let s = config.scale;
    (0..count)
        .map(|i| {
            let hr = synthetic_scene::<T>(bands, s * lr_size, s * lr_size, config.seed.wrapping_add(1 + i as u64));
            let lr = degrade_indexed(&hr, config, i as u64)?;
            Ok(PatchPair { lr, hr, lr_origin: (0, 0), hr_origin: (0, 0) })
        })
        .collect()
}
