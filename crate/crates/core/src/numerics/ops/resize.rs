use crate::error::{config_err, shape_err, Result};
use crate::numerics::tensor::{Scalar, Tensor};

pub const CATMULL_ROM_A: f64 = -0.5;

/// Keys cubic convolution kernel with parameter `a`.
pub fn cubic_weight(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Four taps (clamped indices, weights) for each output coordinate along one axis.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut taps = [(0usize, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let off = k as f64 - 1.0;
                let idx = (base + off).clamp(0.0, n_in as f64 - 1.0) as usize;
                *tap = (idx, cubic_weight(off - t, CATMULL_ROM_A));
            }
            taps
        })
        .collect()
}

/// Separable Catmull-Rom resize of the last two axes to an explicit size.
pub fn bicubic_resize_to<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() < 2 {
        return shape_err(format!("bicubic_resize needs ≥2 dims, got {d:?}"));
    }
    if out_h == 0 || out_w == 0 {
        return config_err(format!("bicubic_resize target {out_h}×{out_w} must be positive"));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let (ty, tx) = (axis_taps(h, out_h), axis_taps(w, out_w));
    let planes: usize = d[..d.len() - 2].iter().product();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut rows = vec![0.0f64; out_h * w];
    for p in x.data().chunks(h * w) {
        for (oy, taps) in ty.iter().enumerate() {
            for xx in 0..w {
                rows[oy * w + xx] = taps.iter().map(|&(iy, wt)| wt * p[iy * w + xx].as_f64()).sum();
            }
        }
        for oy in 0..out_h {
            for taps in &tx {
                let v: f64 = taps.iter().map(|&(ix, wt)| wt * rows[oy * w + ix]).sum();
                out.push(T::of(v));
            }
        }
    }
    let mut od = d.to_vec();
    let nd = od.len();
    od[nd - 2] = out_h;
    od[nd - 1] = out_w;
    Tensor::new(&od, out)
}

/// Resize by the rational factor `num/den`; target extents are ⌊n·num/den⌋.
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, num: usize, den: usize) -> Result<Tensor<T>> {
    if num == 0 || den == 0 {
        return config_err(format!("resize factor {num}/{den} must be positive"));
    }
    let d = x.dims();
    if d.len() < 2 {
        return shape_err(format!("bicubic_resize needs ≥2 dims, got {d:?}"));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    bicubic_resize_to(x, h * num / den, w * num / den)
}
