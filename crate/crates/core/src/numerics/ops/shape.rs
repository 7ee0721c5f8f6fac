use crate::error::{config_err, shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{inverse_perm, strides, Scalar, Tensor};

impl<T: Scalar> Tape<T> {
    pub fn reshape(&self, x: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        let out = x.value().reshape(dims)?;
        let src = x.dims().to_vec();
        Ok(self.record(
            "reshape",
            &[x],
            out,
            Box::new(move |g, _| vec![Some(g.reshape(&src).expect("same length"))]),
        ))
    }

    pub fn permute(&self, x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let mut seen = vec![false; x.dims().len()];
        if perm.len() != seen.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permute: {perm:?} is not a permutation of {:?}", x.dims()));
        }
        let inv = inverse_perm(perm);
        Ok(self.record(
            "permute",
            &[x],
            x.value().permute(perm),
            Box::new(move |g, _| vec![Some(g.permute(&inv))]),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let d = x.dims().to_vec();
        if axis >= d.len() || start + len > d[axis] {
            return shape_err(format!("narrow: axis {axis} range {start}..{} out of {d:?}", start + len));
        }
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let mut od = d.clone();
        od[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let xs = x.value().data();
        for o in 0..outer {
            let base = (o * d[axis] + start) * inner;
            out.extend_from_slice(&xs[base..base + len * inner]);
        }
        Ok(self.record(
            "narrow",
            &[x],
            Tensor::from_vec(&od, out),
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&d);
                for o in 0..outer {
                    let base = (o * d[axis] + start) * inner;
                    gx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Toroidal roll: out[..., (i + shift) mod n, ...] = x[..., i, ...] for each (axis, shift).
    pub fn roll(&self, x: &Var<T>, shifts: &[(usize, isize)]) -> Result<Var<T>> {
        let d = x.dims().to_vec();
        if shifts.iter().any(|&(a, _)| a >= d.len()) {
            return shape_err(format!("roll: axis out of range for {d:?}"));
        }
        if shifts.iter().all(|&(_, s)| s == 0) {
            return Ok(x.clone());
        }
        let fwd = roll_index(&d, shifts);
        let out: Vec<T> = {
            let mut o = vec![T::zero(); fwd.len()];
            for (src, &dst) in fwd.iter().enumerate() {
                o[dst] = x.value().data()[src];
            }
            o
        };
        Ok(self.record(
            "roll",
            &[x],
            Tensor::from_vec(&d, out),
            Box::new(move |g, _| {
                let data = fwd.iter().map(|&dst| g.data()[dst]).collect();
                vec![Some(Tensor::from_vec(g.dims(), data))]
            }),
        ))
    }

    /// Rows of `x` (axis 0) picked by `idx`.
    pub fn index_select0(&self, x: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        let d = x.dims().to_vec();
        if d.is_empty() || idx.iter().any(|&i| i >= d[0]) {
            return shape_err(format!("index_select0: index out of range for {d:?}"));
        }
        let row: usize = d[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&x.value().data()[i * row..(i + 1) * row]);
        }
        let mut od = d.clone();
        od[0] = idx.len();
        let idx = idx.to_vec();
        Ok(self.record(
            "index_select0",
            &[x],
            Tensor::from_vec(&od, out),
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&d);
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i * row..(i + 1) * row];
                    for (a, &v) in dst.iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                        *a += v;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reflection pad of the last two axes on the bottom and right edges only.
    pub fn reflect_pad_br(&self, x: &Var<T>, pad_h: usize, pad_w: usize) -> Result<Var<T>> {
        let d = x.dims().to_vec();
        if d.len() < 2 {
            return shape_err(format!("reflect_pad_br: need ≥2 dims, got {d:?}"));
        }
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        if pad_h == 0 && pad_w == 0 {
            return Ok(x.clone());
        }
        if pad_h >= h.max(1) || pad_w >= w.max(1) {
            return config_err(format!("reflect padding ({pad_h},{pad_w}) needs a larger input than {h}×{w}"));
        }
        let (oh, ow) = (h + pad_h, w + pad_w);
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let planes: usize = d[..d.len() - 2].iter().product();
        let mut src_of = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    src_of.push(p * h * w + reflect(y, h) * w + reflect(xx, w));
                }
            }
        }
        let out = src_of.iter().map(|&s| x.value().data()[s]).collect();
        let mut od = d.clone();
        let nd = od.len();
        od[nd - 2] = oh;
        od[nd - 1] = ow;
        Ok(self.record(
            "reflect_pad",
            &[x],
            Tensor::from_vec(&od, out),
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&d);
                for (k, &s) in src_of.iter().enumerate() {
                    gx.data_mut()[s] += g.data()[k];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// [B, C·s², H, W] → [B, C, sH, sW] with out[b,c,s·i+di,s·j+dj] = in[b, c·s²+di·s+dj, i, j].
    pub fn pixel_shuffle(&self, x: &Var<T>, s: usize) -> Result<Var<T>> {
        let d = x.dims();
        if d.len() != 4 || s == 0 || d[1] % (s * s) != 0 {
            return shape_err(format!("pixel_shuffle: channels of {d:?} not divisible by {s}²"));
        }
        let (b, c, h, w) = (d[0], d[1] / (s * s), d[2], d[3]);
        // [B, C, s, s, H, W] → [B, C, H, s, W, s]
        let v = self.reshape(x, &[b, c, s, s, h, w])?;
        let v = self.permute(&v, &[0, 1, 4, 2, 5, 3])?;
        self.reshape(&v, &[b, c, h * s, w * s])
    }
}

/// Destination flat index for every source flat index.
fn roll_index(d: &[usize], shifts: &[(usize, isize)]) -> Vec<usize> {
    let n: usize = d.iter().product();
    let st = strides(d);
    let mut shift = vec![0isize; d.len()];
    for &(a, s) in shifts {
        shift[a] += s;
    }
    (0..n)
        .map(|src| {
            let mut rem = src;
            let mut dst = 0;
            for ax in 0..d.len() {
                let i = rem / st[ax];
                rem %= st[ax];
                let j = (i as isize + shift[ax]).rem_euclid(d[ax] as isize) as usize;
                dst += j * st[ax];
            }
            dst
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_shuffle_mosaic() {
        // channel c carries constant c
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| (i / 4) as f64));
        let y = tape.pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(y.value().at(&[0, 0, r, c]), ((r % 2) * 2 + c % 2) as f64);
            }
        }
        let same = tape.pixel_shuffle(&x, 1).unwrap();
        assert_eq!(same.value(), x.value());
        assert!(tape.pixel_shuffle(&tape.constant(Tensor::zeros(&[1, 3, 2, 2])), 2).is_err());
    }

    #[test]
    fn roll_quadrant_swap() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn(&[4, 4], |i| i as f64));
        let y = tape.roll(&x, &[(0, -2), (1, -2)]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.value().at(&[i, j]), x.value().at(&[(i + 2) % 4, (j + 2) % 4]));
            }
        }
        let back = tape.roll(&y, &[(0, 2), (1, 2)]).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![1., 2., 3.]));
        let y = tape.reflect_pad_br(&x, 0, 2).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 3., 2., 1.]);
    }

    #[test]
    fn narrow_picks_slice() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn(&[2, 4], |i| i as f64));
        let y = tape.narrow(&x, 1, 1, 2).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 5., 6.]);
    }
}
