use crate::error::{config_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// In-place iterative radix-2 FFT. `inverse` flips the twiddle sign; no scaling either way.
pub fn fft_radix2<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * std::f64::consts::PI / len as f64;
        let twiddles: Vec<(T, T)> = (0..half)
            .map(|k| {
                let a = step * k as f64;
                (T::of(a.cos()), T::of(a.sin()))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in twiddles.iter().enumerate() {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Unnormalized 2D transform of every [H, W] plane (rows, then columns).
pub fn fft2_planes<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for (pr, pi) in re.chunks_mut(h * w).zip(im.chunks_mut(h * w)) {
        for (rr, ri) in pr.chunks_mut(w).zip(pi.chunks_mut(w)) {
            fft_radix2(rr, ri, inverse);
        }
        for x in 0..w {
            for y in 0..h {
                cr[y] = pr[y * w + x];
                ci[y] = pi[y * w + x];
            }
            fft_radix2(&mut cr, &mut ci, inverse);
            for y in 0..h {
                pr[y * w + x] = cr[y];
                pi[y * w + x] = ci[y];
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Forward unnormalized 2D DFT over the last two axes of a real tensor.
    /// Returns (real, imaginary) with the input's dims.
    pub fn dft2(&self, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let d = x.dims().to_vec();
        if d.len() < 2 {
            return config_err(format!("dft2 needs at least 2 dims, got {d:?}"));
        }
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return config_err(format!("dft2 needs power-of-two extents, got {h}×{w}"));
        }
        let n = x.value().len();
        let mut re = x.value().data().to_vec();
        let mut im = vec![T::zero(); n];
        fft2_planes(&mut re, &mut im, h, w, false);
        re.extend(im);
        let mut pd = vec![2];
        pd.extend(&d);
        // packed [2, ...] so a single node carries both outputs
        let packed = self.record(
            "dft2",
            &[x],
            Tensor::from_vec(&pd, re),
            Box::new(move |g, _| {
                // dx = Re(conj-transform of (g_re + i·g_im))
                let (gr, gi) = g.data().split_at(n);
                let (mut r, mut i) = (gr.to_vec(), gi.to_vec());
                fft2_planes(&mut r, &mut i, h, w, true);
                vec![Some(Tensor::from_vec(&d, r))]
            }),
        );
        let re = self.narrow(&packed, 0, 0, 1)?;
        let im = self.narrow(&packed, 0, 1, 1)?;
        Ok((self.reshape(&re, x.dims())?, self.reshape(&im, x.dims())?))
    }
}
