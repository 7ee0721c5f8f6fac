//! Direct-summation reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use sfg_swinsr::numerics::{PortableRng, Tensor};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn uniform(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = PortableRng::new(seed);
    Tensor::from_fn(dims, |_| rng.uniform())
}

/// `hr` plus `amp`-scaled standard normal noise from a fixed stream.
pub fn with_noise(hr: &Tensor<f64>, amp: f64, seed: u64) -> Tensor<f64> {
    let mut rng = PortableRng::new(seed);
    Tensor::from_fn(hr.dims(), |i| hr.data()[i] + amp * rng.normal())
}

fn planes(t: &Tensor<f64>) -> (usize, usize, usize) {
    let d = t.dims();
    (d[0] * d[1], d[2], d[3])
}

pub fn l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a.data()[i] - b.data()[i]).abs();
    }
    s / a.len() as f64
}

pub fn edge(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (p, h, w) = planes(a);
    let at = |t: &Tensor<f64>, q: usize, y: usize, x: usize| t.data()[(q * h + y) * w + x];
    let (mut sx, mut sy) = (0.0, 0.0);
    for q in 0..p {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    let ga = at(a, q, y, x + 1) - at(a, q, y, x);
                    let gb = at(b, q, y, x + 1) - at(b, q, y, x);
                    sx += (ga - gb).abs();
                }
                if y + 1 < h {
                    let ga = at(a, q, y + 1, x) - at(a, q, y, x);
                    let gb = at(b, q, y + 1, x) - at(b, q, y, x);
                    sy += (ga - gb).abs();
                }
            }
        }
    }
    sx / (p * h * (w - 1)) as f64 + sy / (p * (h - 1) * w) as f64
}

/// Mean SSIM with an 11×11, σ = 1.5 Gaussian window over valid positions.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (p, h, w) = planes(a);
    let k = 11;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            g[i * k + j] = (-(dy * dy + dx * dx) / 4.5).exp();
        }
    }
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut n = 0;
    for q in 0..p {
        let pa = &a.data()[q * h * w..(q + 1) * h * w];
        let pb = &b.data()[q * h * w..(q + 1) * h * w];
        for y in 0..=h - k {
            for x in 0..=w - k {
                let win = |f: &dyn Fn(usize) -> f64| {
                    let mut s = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            s += g[i * k + j] * f((y + i) * w + x + j);
                        }
                    }
                    s
                };
                let ma = win(&|o| pa[o]);
                let mb = win(&|o| pb[o]);
                let va = win(&|o| (pa[o] - ma).powi(2));
                let vb = win(&|o| (pb[o] - mb).powi(2));
                let cov = win(&|o| (pa[o] - ma) * (pb[o] - mb));
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Unnormalized 2-D DFT of each plane by direct summation: (re, im).
pub fn dft(t: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (p, h, w) = planes(t);
    let mut re = vec![0.0; p * h * w];
    let mut im = vec![0.0; p * h * w];
    for q in 0..p {
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let val = t.data()[(q * h + y) * w + x];
                        sr += val * ang.cos();
                        si += val * ang.sin();
                    }
                }
                re[(q * h + u) * w + v] = sr;
                im[(q * h + u) * w + v] = si;
            }
        }
    }
    (re, im)
}

const EPS: f64 = 1e-12;

fn modulus(re: f64, im: f64) -> f64 {
    (re * re + im * im + EPS).sqrt() - EPS.sqrt()
}

/// Mean spectral magnitude of the difference.
pub fn freq(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = Tensor::from_fn(a.dims(), |i| a.data()[i] - b.data()[i]);
    let (re, im) = dft(&diff);
    re.iter().zip(&im).map(|(r, i)| modulus(*r, *i)).sum::<f64>() / re.len() as f64
}

/// Mean absolute difference of spectral magnitudes.
pub fn freq_amplitude(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (ar, ai) = dft(a);
    let (br, bi) = dft(b);
    (0..ar.len()).map(|i| (modulus(ar[i], ai[i]) - modulus(br[i], bi[i])).abs()).sum::<f64>() / ar.len() as f64
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
