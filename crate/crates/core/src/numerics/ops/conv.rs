use crate::error::{config_err, shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Border handling for same-size depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of ⌊k/2⌋, same-size output.
    Zero,
    /// Edge replication of ⌊k/2⌋, same-size output.
    Replicate,
    /// No padding; output shrinks by k−1.
    Valid,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(h: usize, w: usize, k: usize, mode: Padding) -> Result<Self> {
        if k % 2 == 0 {
            return config_err(format!("convolution kernel size must be odd, got {k}"));
        }
        let pad = if mode == Padding::Valid { 0 } else { k / 2 };
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < k || pw < k {
            return config_err(format!("{h}×{w} input is smaller than the {k}×{k} kernel"));
        }
        Ok(Self { h, w, k, pad, ph, pw, oh: ph - k + 1, ow: pw - k + 1 })
    }

    /// Source pixel feeding padded coordinate (py, px), if any.
    fn source(&self, py: usize, px: usize, mode: Padding) -> Option<usize> {
        let y = py as isize - self.pad as isize;
        let x = px as isize - self.pad as isize;
        let inside = (0..self.h as isize).contains(&y) && (0..self.w as isize).contains(&x);
        match mode {
            Padding::Replicate => {
                let y = y.clamp(0, self.h as isize - 1) as usize;
                let x = x.clamp(0, self.w as isize - 1) as usize;
                Some(y * self.w + x)
            }
            _ if inside => Some(y as usize * self.w + x as usize),
            _ => None,
        }
    }

    fn pad_plane<T: Scalar>(&self, plane: &[T], mode: Padding) -> Vec<T> {
        let mut out = vec![T::zero(); self.ph * self.pw];
        for py in 0..self.ph {
            for px in 0..self.pw {
                if let Some(s) = self.source(py, px, mode) {
                    out[py * self.pw + px] = plane[s];
                }
            }
        }
        out
    }

    fn unpad_plane_accumulate<T: Scalar>(&self, padded: &[T], dst: &mut [T], mode: Padding) {
        for py in 0..self.ph {
            for px in 0..self.pw {
                if let Some(s) = self.source(py, px, mode) {
                    dst[s] += padded[py * self.pw + px];
                }
            }
        }
    }

    fn pad_planes<T: Scalar>(&self, data: &[T], planes: usize, mode: Padding) -> Vec<T> {
        let hw = self.h * self.w;
        let mut v = Vec::with_capacity(planes * self.ph * self.pw);
        for p in 0..planes {
            v.extend(self.pad_plane(&data[p * hw..(p + 1) * hw], mode));
        }
        v
    }

    /// out += correlate(padded, kernel)
    fn correlate<T: Scalar>(&self, padded: &[T], kernel: &[T], out: &mut [T]) {
        let k = self.k;
        for ky in 0..k {
            for kx in 0..k {
                let wv = kernel[ky * k + kx];
                if wv == T::zero() {
                    continue;
                }
                for y in 0..self.oh {
                    let src = &padded[(y + ky) * self.pw + kx..(y + ky) * self.pw + kx + self.ow];
                    let dst = &mut out[y * self.ow..(y + 1) * self.ow];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += wv * v;
                    }
                }
            }
        }
    }

    /// grad_padded += g ⋆ᵀ kernel ; grad_kernel += Σ g·padded
    fn correlate_backward<T: Scalar>(
        &self,
        padded: &[T],
        kernel: &[T],
        g: &[T],
        gpad: Option<&mut [T]>,
        gker: Option<&mut [T]>,
    ) {
        let k = self.k;
        if let Some(gpad) = gpad {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kernel[ky * k + kx];
                    for y in 0..self.oh {
                        let gr = &g[y * self.ow..(y + 1) * self.ow];
                        let dst = &mut gpad[(y + ky) * self.pw + kx..(y + ky) * self.pw + kx + self.ow];
                        for (d, &gv) in dst.iter_mut().zip(gr) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
        if let Some(gker) = gker {
            for ky in 0..k {
                for kx in 0..k {
                    let mut s = T::zero();
                    for y in 0..self.oh {
                        let gr = &g[y * self.ow..(y + 1) * self.ow];
                        let src = &padded[(y + ky) * self.pw + kx..(y + ky) * self.pw + kx + self.ow];
                        for (&gv, &v) in gr.iter().zip(src) {
                            s += gv * v;
                        }
                    }
                    gker[ky * k + kx] += s;
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Per-channel 2D correlation of x[B,C,H,W] with kernel[C,k,k].
    pub fn depthwise_conv2d(&self, x: &Var<T>, kernel: &Var<T>, mode: Padding) -> Result<Var<T>> {
        let (xd, kd) = (x.dims().to_vec(), kernel.dims().to_vec());
        if xd.len() != 4 || kd.len() != 3 || kd[0] != xd[1] || kd[1] != kd[2] {
            return shape_err(format!("depthwise_conv2d: input {xd:?} with kernel {kd:?}"));
        }
        let (b, c) = (xd[0], xd[1]);
        let geo = Geometry::new(xd[2], xd[3], kd[1], mode)?;
        let (hw, kk, ohw) = (geo.h * geo.w, geo.k * geo.k, geo.oh * geo.ow);
        let mut out = vec![T::zero(); b * c * ohw];
        for bi in 0..b {
            for ci in 0..c {
                let p = (bi * c + ci) * hw;
                let padded = geo.pad_plane(&x.value().data()[p..p + hw], mode);
                let o = (bi * c + ci) * ohw;
                geo.correlate(&padded, &kernel.value().data()[ci * kk..(ci + 1) * kk], &mut out[o..o + ohw]);
            }
        }
        let (xv, kv) = (x.rc(), kernel.rc());
        Ok(self.record(
            "depthwise_conv2d",
            &[x, kernel],
            Tensor::from_vec(&[b, c, geo.oh, geo.ow], out),
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(xv.dims()));
                let mut gk = needs[1].then(|| Tensor::zeros(kv.dims()));
                let mut gpad = vec![T::zero(); geo.ph * geo.pw];
                for bi in 0..b {
                    for ci in 0..c {
                        let p = (bi * c + ci) * hw;
                        let padded = geo.pad_plane(&xv.data()[p..p + hw], mode);
                        let o = (bi * c + ci) * ohw;
                        gpad.iter_mut().for_each(|v| *v = T::zero());
                        geo.correlate_backward(
                            &padded,
                            &kv.data()[ci * kk..(ci + 1) * kk],
                            &g.data()[o..o + ohw],
                            gx.is_some().then_some(&mut gpad[..]),
                            gk.as_mut().map(|t| &mut t.data_mut()[ci * kk..(ci + 1) * kk]),
                        );
                        if let Some(gx) = gx.as_mut() {
                            geo.unpad_plane_accumulate(&gpad, &mut gx.data_mut()[p..p + hw], mode);
                        }
                    }
                }
                vec![gx, gk]
            }),
        ))
    }

    /// Full cross-channel correlation, zero padding ⌊k/2⌋: x[B,Cin,H,W] ⋆ kernel[Cout,Cin,k,k] + bias.
    pub fn conv2d(&self, x: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (xd, kd) = (x.dims().to_vec(), kernel.dims().to_vec());
        if xd.len() != 4 || kd.len() != 4 || kd[1] != xd[1] || kd[2] != kd[3] {
            return shape_err(format!("conv2d: input {xd:?} with kernel {kd:?}"));
        }
        let (b, cin, cout) = (xd[0], xd[1], kd[0]);
        if let Some(bias) = bias {
            if bias.dims() != [cout] {
                return shape_err(format!("conv2d: bias {:?} for kernel {kd:?}", bias.dims()));
            }
        }
        let geo = Geometry::new(xd[2], xd[3], kd[2], Padding::Zero)?;
        let (hw, kk, phw) = (geo.h * geo.w, geo.k * geo.k, geo.ph * geo.pw);
        let padded = geo.pad_planes(x.value().data(), b * cin, Padding::Zero);
        let mut out = vec![T::zero(); b * cout * hw];
        for bi in 0..b {
            for co in 0..cout {
                let dst = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                if let Some(bias) = bias {
                    dst.iter_mut().for_each(|v| *v = bias.value().data()[co]);
                }
                for ci in 0..cin {
                    let src = &padded[(bi * cin + ci) * phw..(bi * cin + ci + 1) * phw];
                    let ker = &kernel.value().data()[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
                    geo.correlate(src, ker, dst);
                }
            }
        }
        let (xv, kv) = (x.rc(), kernel.rc());
        let has_bias = bias.is_some();
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.record(
            "conv2d",
            &inputs,
            Tensor::from_vec(&[b, cout, geo.h, geo.w], out),
            Box::new(move |g, needs| {
                let padded = geo.pad_planes(xv.data(), b * cin, Padding::Zero);
                let mut gpad = needs[0].then(|| vec![T::zero(); b * cin * phw]);
                let mut gk = needs[1].then(|| Tensor::zeros(kv.dims()));
                for bi in 0..b {
                    for co in 0..cout {
                        let gs = &g.data()[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                        for ci in 0..cin {
                            let pi = (bi * cin + ci) * phw;
                            let ki = (co * cin + ci) * kk;
                            geo.correlate_backward(
                                &padded[pi..pi + phw],
                                &kv.data()[ki..ki + kk],
                                gs,
                                gpad.as_mut().map(|v| &mut v[pi..pi + phw]),
                                gk.as_mut().map(|t| &mut t.data_mut()[ki..ki + kk]),
                            );
                        }
                    }
                }
                let gx = gpad.map(|gp| {
                    let mut gx = Tensor::zeros(xv.dims());
                    for p in 0..b * cin {
                        geo.unpad_plane_accumulate(
                            &gp[p * phw..(p + 1) * phw],
                            &mut gx.data_mut()[p * hw..(p + 1) * hw],
                            Padding::Zero,
                        );
                    }
                    gx
                });
                let mut res = vec![gx, gk];
                if has_bias {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for bi in 0..b {
                            for (co, v) in gb.iter_mut().enumerate() {
                                *v += g.data()[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                            }
                        }
                        Tensor::from_vec(&[cout], gb)
                    }));
                }
                res
            }),
        ))
    }
}
