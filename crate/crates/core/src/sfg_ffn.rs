//! Spatial-frequency gated feed-forward sublayer and the plain two-layer MLP it replaces.
//!
//! The gated variant expands tokens to `C_h` channels, lays them out as a
//! spatial map, splits the map into a blurred low-frequency part and the
//! high-frequency residual, refines the residual with a 3×3 depthwise conv,
//! and adds it back under a per-pixel sigmoid gate before projecting to `C`.

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Padding, Scalar, Tensor, Var};
use crate::params::{impl_leaf_params, Init, Pass, INIT_STD};

/// Smallest gate bottleneck width.
pub const MIN_GATE_DIM: usize = 16;
pub const REFINE_K: usize = 3;

pub fn hidden_dim(dim: usize, ratio: f64) -> usize {
    (dim as f64 * ratio).floor() as usize
}

pub fn gate_dim(hidden: usize, rho: usize) -> usize {
    (hidden / rho.max(1)).max(MIN_GATE_DIM)
}

#[derive(Clone, Debug)]
pub struct SfgFfn<P> {
    pub w1: P,
    pub b1: P,
    /// [C_h, k, k], one low-pass kernel per hidden channel
    pub blur: P,
    pub refine_w: P,
    pub refine_b: P,
    pub gate_w1: P,
    pub gate_b1: P,
    pub gate_w2: P,
    pub gate_b2: P,
    pub w2: P,
    pub b2: P,
    pub dropout: f64,
}

impl_leaf_params!(SfgFfn {
    w1: "w1",
    b1: "b1",
    blur: "blur",
    refine_w: "refine.weight",
    refine_b: "refine.bias",
    gate_w1: "gate.w1",
    gate_b1: "gate.b1",
    gate_w2: "gate.w2",
    gate_b2: "gate.b2",
    w2: "w2",
    b2: "b2",
} keep { dropout });

#[derive(Clone, Debug)]
pub struct Mlp<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub dropout: f64,
}

impl_leaf_params!(Mlp { w1: "w1", b1: "b1", w2: "w2", b2: "b2" } keep { dropout });

impl<T: Scalar> SfgFfn<Tensor<T>> {
    /// Blur kernels start as the uniform 1/k² low-pass filter; the other weights
    /// are truncated-normal(0.02) and biases zero.
    pub fn init(dim: usize, ratio: f64, k: usize, rho: usize, seed: u64) -> Result<Self> {
        Self::init_with(dim, ratio, k, rho, &mut Init::new(seed))
    }

    pub fn init_with(dim: usize, ratio: f64, k: usize, rho: usize, init: &mut Init) -> Result<Self> {
        if dim == 0 || ratio <= 0.0 || rho == 0 {
            return config_err(format!("sfg_ffn needs dim ≥ 1, ratio > 0, rho ≥ 1 (got {dim}, {ratio}, {rho})"));
        }
        if k % 2 == 0 {
            return config_err(format!("blur kernel size must be odd, got {k}"));
        }
        let ch = hidden_dim(dim, ratio);
        if ch == 0 {
            return config_err(format!("hidden width ⌊{dim}·{ratio}⌋ is zero"));
        }
        let cg = gate_dim(ch, rho);
        Ok(Self {
            w1: init.trunc_normal(&[dim, ch], INIT_STD),
            b1: Tensor::zeros(&[ch]),
            blur: Tensor::full(&[ch, k, k], T::one() / T::of_usize(k * k)),
            refine_w: init.trunc_normal(&[ch, REFINE_K, REFINE_K], INIT_STD),
            refine_b: Tensor::zeros(&[ch]),
            gate_w1: init.trunc_normal(&[ch, cg], INIT_STD),
            gate_b1: Tensor::zeros(&[cg]),
            gate_w2: init.trunc_normal(&[cg, ch], INIT_STD),
            gate_b2: Tensor::zeros(&[ch]),
            w2: init.trunc_normal(&[ch, dim], INIT_STD),
            b2: Tensor::zeros(&[dim]),
            dropout: 0.0,
        })
    }
}

impl<P> SfgFfn<P> {
    /// The same expansion/projection weights viewed as a plain MLP.
    pub fn as_mlp(&self) -> Mlp<P>
    where
        P: Clone,
    {
        Mlp {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            dropout: self.dropout,
        }
    }
}

impl<T: Scalar> Mlp<Tensor<T>> {
    pub fn init(dim: usize, ratio: f64, seed: u64) -> Result<Self> {
        Self::init_with(dim, ratio, &mut Init::new(seed))
    }

    pub fn init_with(dim: usize, ratio: f64, init: &mut Init) -> Result<Self> {
        let ch = hidden_dim(dim, ratio);
        if dim == 0 || ch == 0 {
            return config_err(format!("mlp needs dim ≥ 1 and a non-empty hidden layer (got {dim}, {ratio})"));
        }
        Ok(Self {
            w1: init.trunc_normal(&[dim, ch], INIT_STD),
            b1: Tensor::zeros(&[ch]),
            w2: init.trunc_normal(&[ch, dim], INIT_STD),
            b2: Tensor::zeros(&[dim]),
            dropout: 0.0,
        })
    }
}

/// Low/high frequency split of a [B, C_h, H, W] map: (blur(F), F − blur(F)).
pub fn decompose<T: Scalar>(pass: &Pass<T>, f: &Var<T>, blur: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let lf = pass.tape.depthwise_conv2d(f, blur, Padding::Replicate)?;
    let hf = pass.tape.sub(f, &lf)?;
    Ok((lf, hf))
}

/// GELU(DWConv3×3(F_HF) + bias), zero padding.
pub fn refine<T: Scalar>(pass: &Pass<T>, hf: &Var<T>, kernel: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let t = pass.tape;
    let c = hf.dims()[1];
    let y = t.depthwise_conv2d(hf, kernel, Padding::Zero)?;
    let y = t.add(&y, &t.reshape(bias, &[1, c, 1, 1])?)?;
    Ok(t.gelu(&y))
}

/// Gate on a channels-last map [..., C_h]: σ(W_g2·GELU(W_g1·x + b_g1) + b_g2).
fn gate_channels_last<T: Scalar>(pass: &Pass<T>, x: &Var<T>, p: &SfgFfn<Var<T>>) -> Result<Var<T>> {
    let t = pass.tape;
    let h = t.gelu(&t.linear(x, &p.gate_w1, Some(&p.gate_b1))?);
    Ok(t.sigmoid(&t.linear(&h, &p.gate_w2, Some(&p.gate_b2))?))
}

/// Per-pixel gate for a refined [B, C_h, H, W] map; same shape out, values in (0, 1).
pub fn gate<T: Scalar>(pass: &Pass<T>, refined: &Var<T>, p: &SfgFfn<Var<T>>) -> Result<Var<T>> {
    let t = pass.tape;
    let nhwc = t.permute(refined, &[0, 2, 3, 1])?;
    let g = gate_channels_last(pass, &nhwc, p)?;
    t.permute(&g, &[0, 3, 1, 2])
}

fn check_tokens(x: &[usize], h: usize, w: usize, dim: usize) -> Result<()> {
    if x.len() != 3 || x[1] != h * w || x[2] != dim {
        return shape_err(format!("expected tokens [B, {h}·{w}, {dim}], got {x:?}"));
    }
    Ok(())
}

/// Tokens [B, H·W, C] → [B, H·W, C].
pub fn sfg_ffn_forward<T: Scalar>(
    pass: &Pass<T>,
    x: &Var<T>,
    p: &SfgFfn<Var<T>>,
    h: usize,
    w: usize,
) -> Result<Var<T>> {
    let t = pass.tape;
    let dim = p.w1.dims()[0];
    check_tokens(x.dims(), h, w, dim)?;
    let b = x.dims()[0];
    let ch = p.w1.dims()[1];

    let z = t.gelu(&t.linear(x, &p.w1, Some(&p.b1))?);
    let f_nhwc = t.reshape(&z, &[b, h, w, ch])?;
    let f = t.permute(&f_nhwc, &[0, 3, 1, 2])?;
    let (_, hf) = decompose(pass, &f, &p.blur)?;
    let refined = refine(pass, &hf, &p.refine_w, &p.refine_b)?;
    let refined = t.permute(&refined, &[0, 2, 3, 1])?;
    let g = gate_channels_last(pass, &refined, p)?;
    let f_out = t.add(&f_nhwc, &t.mul(&g, &refined)?)?;

    let tokens = t.reshape(&f_out, &[b, h * w, ch])?;
    let y = t.linear(&tokens, &p.w2, Some(&p.b2))?;
    pass.dropout(&y, p.dropout)
}

/// Dropout(W2·GELU(W1·x + b1) + b2).
pub fn mlp_forward<T: Scalar>(pass: &Pass<T>, x: &Var<T>, p: &Mlp<Var<T>>) -> Result<Var<T>> {
    let t = pass.tape;
    let hidden = t.gelu(&t.linear(x, &p.w1, Some(&p.b1))?);
    let y = t.linear(&hidden, &p.w2, Some(&p.b2))?;
    pass.dropout(&y, p.dropout)
}

/// Either feed-forward variant, as used inside a transformer block.
#[derive(Clone, Debug)]
pub enum Ffn<P> {
    Sfg(SfgFfn<P>),
    Mlp(Mlp<P>),
}

impl<P> crate::params::ParamTree<P> for Ffn<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        match self {
            Ffn::Sfg(p) => p.visit(prefix, f),
            Ffn::Mlp(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        match self {
            Ffn::Sfg(p) => p.visit_mut(prefix, f),
            Ffn::Mlp(p) => p.visit_mut(prefix, f),
        }
    }
}

impl<T: Scalar> crate::params::Bind<T> for Ffn<Tensor<T>> {
    type Bound = Ffn<Var<T>>;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound {
        match self {
            Ffn::Sfg(p) => Ffn::Sfg(p.bind(prefix, f)),
            Ffn::Mlp(p) => Ffn::Mlp(p.bind(prefix, f)),
        }
    }
}

impl<T: Scalar> Ffn<Var<T>> {
    pub fn forward(&self, pass: &Pass<T>, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        match self {
            Ffn::Sfg(p) => sfg_ffn_forward(pass, x, p, h, w),
            Ffn::Mlp(p) => {
                check_tokens(x.dims(), h, w, p.w1.dims()[0])?;
                mlp_forward(pass, x, p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use crate::params::{Bind, ParamTree};

    #[test]
    fn default_widths() {
        assert_eq!(hidden_dim(180, 2.0), 360);
        assert_eq!(gate_dim(360, 8), 45);
        assert_eq!(gate_dim(32, 8), MIN_GATE_DIM);
    }

    #[test]
    fn init_shapes_and_blur() {
        let p = SfgFfn::<Tensor<f32>>::init(180, 2.0, 5, 8, 42).unwrap();
        assert_eq!(p.blur.dims(), &[360, 5, 5]);
        assert!(p.blur.data().iter().all(|&v| v == 1.0 / 25.0));
        assert_eq!(p.gate_w1.dims(), &[360, 45]);
        assert!(SfgFfn::<Tensor<f32>>::init(8, 2.0, 4, 8, 0).is_err());
        assert_eq!(p.names().len(), 11);
    }

    #[test]
    fn init_is_deterministic() {
        let a = SfgFfn::<Tensor<f64>>::init(8, 2.0, 5, 8, 3).unwrap();
        let b = SfgFfn::<Tensor<f64>>::init(8, 2.0, 5, 8, 3).unwrap();
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.gate_w2, b.gate_w2);
    }

    #[test]
    fn forward_shape_and_token_check() {
        let p = SfgFfn::<Tensor<f64>>::init(8, 2.0, 5, 8, 1).unwrap().constants();
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let x = Var::constant(Tensor::from_fn(&[1, 16, 8], |i| (i as f64 * 0.1).sin()));
        assert_eq!(sfg_ffn_forward(&pass, &x, &p, 4, 4).unwrap().dims(), &[1, 16, 8]);
        assert!(sfg_ffn_forward(&pass, &x, &p, 4, 5).is_err());
    }

    #[test]
    fn zero_gate_is_half() {
        let mut p = SfgFfn::<Tensor<f64>>::init(4, 4.0, 3, 1, 1).unwrap();
        p.gate_w1 = Tensor::zeros(p.gate_w1.dims());
        p.gate_w2 = Tensor::zeros(p.gate_w2.dims());
        let p = p.constants();
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let x = Var::constant(Tensor::from_fn(&[1, 16, 3, 3], |i| i as f64 - 40.0));
        let g = gate(&pass, &x, &p).unwrap();
        assert!(g.value().data().iter().all(|&v| v == 0.5));
    }

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::numerics::PortableRng::new(seed);
        Tensor::from_fn(dims, |_| rng.normal())
    }

    fn split(f: &Tensor<f64>, k: usize) -> (Tensor<f64>, Tensor<f64>) {
        let c = f.dims()[1];
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let blur = Var::constant(Tensor::full(&[c, k, k], 1.0 / (k * k) as f64));
        let (lf, hf) = decompose(&pass, &Var::constant(f.clone()), &blur).unwrap();
        (lf.value().clone(), hf.value().clone())
    }

    #[test]
    fn reconstruction_is_bitwise_when_parts_are_comparable() {
        // F in [1, 2) keeps the blurred map in [1, 2), so F − F_LF is exact.
        let mut rng = crate::numerics::PortableRng::new(4);
        let f = Tensor::from_fn(&[2, 3, 9, 7], |_| rng.uniform_range(1.0, 2.0));
        let (lf, hf) = split(&f, 5);
        for i in 0..f.len() {
            assert_eq!(lf.data()[i] + hf.data()[i], f.data()[i]);
        }
    }

    #[test]
    fn reconstruction_within_an_ulp_in_general() {
        let f = random(&[2, 3, 9, 7], 5);
        let (lf, hf) = split(&f, 5);
        for i in 0..f.len() {
            let scale = f.data()[i].abs().max(lf.data()[i].abs());
            assert!((lf.data()[i] + hf.data()[i] - f.data()[i]).abs() <= scale * f64::EPSILON);
        }
    }

    #[test]
    fn constant_map_has_no_high_frequency() {
        let f = Tensor::full(&[1, 2, 6, 6], 0.7);
        let (_, hf) = split(&f, 5);
        assert!(hf.max_abs() <= 1e-15);
    }

    #[test]
    fn impulse_high_frequency_is_impulse_minus_box() {
        let (h, w, k) = (9, 9, 5);
        let mut f = Tensor::zeros(&[1, 1, h, w]);
        f.set(&[0, 0, 4, 4], 1.0);
        let (_, hf) = split(&f, k);
        for y in 0..h {
            for x in 0..w {
                let inside = y.abs_diff(4) <= k / 2 && x.abs_diff(4) <= k / 2;
                let mut expect = if inside { -1.0 / 25.0 } else { 0.0 };
                if (y, x) == (4, 4) {
                    expect += 1.0;
                }
                assert!((hf.at(&[0, 0, y, x]) - expect).abs() < 1e-15, "({y}, {x})");
            }
        }
    }

    #[test]
    fn refine_zero_and_identity_kernels() {
        let hf = Var::constant(random(&[1, 3, 5, 5], 6));
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let zb = Var::constant(Tensor::zeros(&[3]));
        let zero = refine(&pass, &hf, &Var::constant(Tensor::zeros(&[3, 3, 3])), &zb).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
        let id = Var::constant(Tensor::from_fn(&[3, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }));
        let out = refine(&pass, &hf, &id, &zb).unwrap();
        for (o, x) in out.value().data().iter().zip(hf.value().data()) {
            assert_eq!(*o, crate::numerics::ops::gelu(*x));
        }
    }

    #[test]
    fn refine_matches_direct_summation() {
        let x = random(&[1, 2, 4, 5], 7);
        let k = random(&[2, 3, 3], 8);
        let b = random(&[2], 9);
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let out = refine(&pass, &Var::constant(x.clone()), &Var::constant(k.clone()), &Var::constant(b.clone())).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for xx in 0..5 {
                    let mut s = b.data()[c];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                s += k.at(&[c, dy, dx]) * x.at(&[0, c, sy as usize, sx as usize]);
                            }
                        }
                    }
                    let expect = s * 0.5 * (1.0 + libm::erf(s / std::f64::consts::SQRT_2));
                    assert!((out.value().at(&[0, c, y, xx]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_saturates_and_stays_open() {
        let mut p = SfgFfn::<Tensor<f64>>::init(4, 4.0, 3, 1, 1).unwrap();
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let x = Var::constant(random(&[2, 16, 4, 4], 10));
        let g = gate(&pass, &x, &p.constants()).unwrap();
        assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        p.gate_w1 = Tensor::zeros(p.gate_w1.dims());
        p.gate_w2 = Tensor::zeros(p.gate_w2.dims());
        p.gate_b2 = Tensor::full(p.gate_b2.dims(), 20.0);
        let g = gate(&pass, &x, &p.constants()).unwrap();
        assert!(g.value().data().iter().all(|&v| (1.0 - v) < 1e-8 && v < 1.0));
    }

    #[test]
    fn zeroed_refinement_degenerates_to_mlp() {
        let mut p = SfgFfn::<Tensor<f64>>::init(8, 2.0, 5, 8, 11).unwrap();
        p.b1 = random(p.b1.dims(), 12);
        p.b2 = random(p.b2.dims(), 13);
        p.refine_w = Tensor::zeros(p.refine_w.dims());
        p.refine_b = Tensor::zeros(p.refine_b.dims());
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let x = Var::constant(random(&[2, 20, 8], 14));
        let sfg = sfg_ffn_forward(&pass, &x, &p.constants(), 4, 5).unwrap();
        let mlp = mlp_forward(&pass, &x, &p.as_mlp().constants()).unwrap();
        let scale = mlp.value().max_abs();
        let diff = sfg.value().zip_map(mlp.value(), |a, b| a - b).max_abs();
        assert!(diff <= 1e-6 * scale, "{diff}");
    }

    #[test]
    fn constant_tokens_at_init_follow_projection_path() {
        let p = SfgFfn::<Tensor<f64>>::init(8, 2.0, 5, 8, 15).unwrap();
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let row = random(&[8], 16);
        let x = Var::constant(Tensor::from_fn(&[1, 16, 8], |i| row.data()[i % 8]));
        let sfg = sfg_ffn_forward(&pass, &x, &p.constants(), 4, 4).unwrap();
        let mlp = mlp_forward(&pass, &x, &p.as_mlp().constants()).unwrap();
        let diff = sfg.value().zip_map(mlp.value(), |a, b| a - b).max_abs();
        assert!(diff <= 1e-15, "{diff}");
    }

    #[test]
    fn mlp_oracles() {
        let dim = 3;
        let mut p = Mlp::<Tensor<f64>>::init(dim, 1.0, 0).unwrap();
        p.w1 = Tensor::eye(dim);
        p.w2 = Tensor::eye(dim);
        let tape = Tape::inference();
        let pass = Pass::inference(&tape);
        let x = random(&[2, 4, dim], 17);
        let y = mlp_forward(&pass, &Var::constant(x.clone()), &p.constants()).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert_eq!(*a, crate::numerics::ops::gelu(*b));
        }
        p.w2 = Tensor::zeros(&[dim, dim]);
        p.b2 = Tensor::from_vec(&[dim], vec![0.5, -1.0, 2.0]);
        let y = mlp_forward(&pass, &Var::constant(x), &p.constants()).unwrap();
        assert!(y.value().data().chunks(dim).all(|r| r == [0.5, -1.0, 2.0]));
    }

    #[test]
    fn dropout_only_in_training() {
        let mut p = Mlp::<Tensor<f64>>::init(4, 2.0, 0).unwrap();
        p.dropout = 0.5;
        let x = Var::constant(random(&[1, 64, 4], 18));
        let tape = Tape::new();
        let eval = mlp_forward(&Pass::inference(&tape), &x, &p.constants()).unwrap();
        let train = mlp_forward(&Pass::training(&tape, 3), &x, &p.constants()).unwrap();
        assert!(train.value().data().contains(&0.0));
        assert!(eval.value().data().iter().all(|&v| v != 0.0));
    }
}
