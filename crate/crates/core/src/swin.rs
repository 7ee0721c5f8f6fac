//! Shifted-window self-attention and the residual post-norm transformer block.
//!
//! Attention is the scaled-cosine form: per-head logits are
//! `cos(q, k) · exp(min(τ_h, ln 100)) + bias_h(Δ) + mask`, where the relative
//! position bias comes either from a small MLP over log-spaced relative
//! coordinates or from a plain learned table.

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{join, Bind, Init, ParamTree, Pass, INIT_STD};
use crate::sfg_ffn::Ffn;

pub const MASK_NEG: f64 = -100.0;
pub const QK_NORM_EPS: f64 = 1e-6;
pub const CPB_HIDDEN: usize = 512;
const LOGIT_SCALE_INIT: f64 = 10.0;
const BIAS_SCALE: f64 = 16.0;

pub fn logit_scale_max() -> f64 {
    100f64.ln()
}

/// [B, H, W, C] → [B·nW, w·w, C], windows in row-major order per image.
pub fn window_partition<T: Scalar>(pass: &Pass<T>, x: &Var<T>, w: usize) -> Result<Var<T>> {
    let d = x.dims();
    if d.len() != 4 || w == 0 || d[1] % w != 0 || d[2] % w != 0 {
        return shape_err(format!("window_partition: {d:?} not divisible into {w}×{w} windows"));
    }
    let (b, h, wd, c) = (d[0], d[1], d[2], d[3]);
    let t = pass.tape;
    let v = t.reshape(x, &[b, h / w, w, wd / w, w, c])?;
    let v = t.permute(&v, &[0, 1, 3, 2, 4, 5])?;
    t.reshape(&v, &[b * (h / w) * (wd / w), w * w, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(pass: &Pass<T>, windows: &Var<T>, w: usize, h: usize, wd: usize) -> Result<Var<T>> {
    let d = windows.dims();
    if d.len() != 3 || w == 0 || h % w != 0 || wd % w != 0 || d[1] != w * w {
        return shape_err(format!("window_reverse: {d:?} does not tile {h}×{wd} with {w}×{w} windows"));
    }
    let nw = (h / w) * (wd / w);
    if d[0] % nw != 0 {
        return shape_err(format!("window_reverse: {} windows is not a multiple of {nw}", d[0]));
    }
    let (b, c) = (d[0] / nw, d[2]);
    let t = pass.tape;
    let v = t.reshape(windows, &[b, h / w, wd / w, w, w, c])?;
    let v = t.permute(&v, &[0, 1, 3, 2, 4, 5])?;
    t.reshape(&v, &[b, h, wd, c])
}

/// Toroidal roll of a [B, H, W, C] map by (−s, −s).
pub fn cyclic_shift<T: Scalar>(pass: &Pass<T>, x: &Var<T>, s: isize) -> Result<Var<T>> {
    pass.tape.roll(x, &[(1, -s), (2, -s)])
}

/// Additive mask [nW, w², w²] for a shifted H×W map; zero when `shift == 0`.
pub fn attention_mask<T: Scalar>(h: usize, wd: usize, w: usize, shift: usize) -> Tensor<T> {
    let nw = (h / w) * (wd / w);
    let tokens = w * w;
    if shift == 0 {
        return Tensor::zeros(&[nw, tokens, tokens]);
    }
    let region = |i: usize, n: usize| -> usize {
        if i < n - w {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * wd];
    for y in 0..h {
        for x in 0..wd {
            labels[y * wd + x] = region(y, h) * 3 + region(x, wd);
        }
    }
    let mut out = Vec::with_capacity(nw * tokens * tokens);
    for wy in 0..h / w {
        for wx in 0..wd / w {
            let lab: Vec<usize> =
                (0..tokens).map(|t| labels[(wy * w + t / w) * wd + wx * w + t % w]).collect();
            for &a in &lab {
                for &b in &lab {
                    out.push(if a == b { T::zero() } else { T::of(MASK_NEG) });
                }
            }
        }
    }
    Tensor::from_vec(&[nw, tokens, tokens], out)
}

/// Relative-position index for every (query, key) pair of a w×w window.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let n = 2 * w - 1;
    let mut idx = Vec::with_capacity(w.pow(4));
    for q in 0..w * w {
        for k in 0..w * w {
            let dy = (q / w) as isize - (k / w) as isize + w as isize - 1;
            let dx = (q % w) as isize - (k % w) as isize + w as isize - 1;
            idx.push(dy as usize * n + dx as usize);
        }
    }
    idx
}

/// Log-spaced relative coordinates [(2w−1)², 2].
pub fn relative_coords_table<T: Scalar>(w: usize) -> Tensor<T> {
    let n = 2 * w - 1;
    let norm = (w.max(2) - 1) as f64;
    let f = |d: isize| {
        let v = d as f64 / norm * 8.0;
        v.signum() * (v.abs() + 1.0).log2() / 8f64.log2()
    };
    let mut data = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            data.push(T::of(f(i as isize - (w as isize - 1))));
            data.push(T::of(f(j as isize - (w as isize - 1))));
        }
    }
    Tensor::from_vec(&[n * n, 2], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionBiasKind {
    /// 2 → hidden → heads MLP over log-spaced coordinates, squashed to (0, 16).
    Continuous { hidden: usize },
    /// Learned [(2w−1)², heads] table.
    Table,
}

#[derive(Clone, Debug)]
pub enum PositionBias<P> {
    Continuous { w1: P, b1: P, w2: P },
    Table { table: P },
}

#[derive(Clone, Debug)]
pub struct Attention<P> {
    pub qkv_w: P,
    pub qkv_b: P,
    pub proj_w: P,
    pub proj_b: P,
    /// per-head log temperature, [heads]
    pub logit_scale: P,
    pub pos: PositionBias<P>,
    pub heads: usize,
    pub window: usize,
}

impl<P> ParamTree<P> for Attention<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "qkv.weight"), &self.qkv_w);
        f(join(prefix, "qkv.bias"), &self.qkv_b);
        f(join(prefix, "proj.weight"), &self.proj_w);
        f(join(prefix, "proj.bias"), &self.proj_b);
        f(join(prefix, "logit_scale"), &self.logit_scale);
        match &self.pos {
            PositionBias::Continuous { w1, b1, w2 } => {
                f(join(prefix, "cpb.w1"), w1);
                f(join(prefix, "cpb.b1"), b1);
                f(join(prefix, "cpb.w2"), w2);
            }
            PositionBias::Table { table } => f(join(prefix, "bias_table"), table),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "qkv.weight"), &mut self.qkv_w);
        f(join(prefix, "qkv.bias"), &mut self.qkv_b);
        f(join(prefix, "proj.weight"), &mut self.proj_w);
        f(join(prefix, "proj.bias"), &mut self.proj_b);
        f(join(prefix, "logit_scale"), &mut self.logit_scale);
        match &mut self.pos {
            PositionBias::Continuous { w1, b1, w2 } => {
                f(join(prefix, "cpb.w1"), w1);
                f(join(prefix, "cpb.b1"), b1);
                f(join(prefix, "cpb.w2"), w2);
            }
            PositionBias::Table { table } => f(join(prefix, "bias_table"), table),
        }
    }
}

impl<T: Scalar> Bind<T> for Attention<Tensor<T>> {
    type Bound = Attention<Var<T>>;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound {
        let pos = match &self.pos {
            PositionBias::Continuous { w1, b1, w2 } => PositionBias::Continuous {
                w1: f(&join(prefix, "cpb.w1"), w1),
                b1: f(&join(prefix, "cpb.b1"), b1),
                w2: f(&join(prefix, "cpb.w2"), w2),
            },
            PositionBias::Table { table } => PositionBias::Table { table: f(&join(prefix, "bias_table"), table) },
        };
        Attention {
            qkv_w: f(&join(prefix, "qkv.weight"), &self.qkv_w),
            qkv_b: f(&join(prefix, "qkv.bias"), &self.qkv_b),
            proj_w: f(&join(prefix, "proj.weight"), &self.proj_w),
            proj_b: f(&join(prefix, "proj.bias"), &self.proj_b),
            logit_scale: f(&join(prefix, "logit_scale"), &self.logit_scale),
            pos,
            heads: self.heads,
            window: self.window,
        }
    }
}

impl<T: Scalar> Attention<Tensor<T>> {
    pub fn init(dim: usize, heads: usize, window: usize, kind: PositionBiasKind, init: &mut Init) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config_err(format!("embedding dim {dim} is not divisible by {heads} heads"));
        }
        if window == 0 {
            return config_err("window size must be positive");
        }
        let n = 2 * window - 1;
        let pos = match kind {
            PositionBiasKind::Continuous { hidden } => PositionBias::Continuous {
                w1: init.trunc_normal(&[2, hidden], INIT_STD),
                b1: Tensor::zeros(&[hidden]),
                w2: init.trunc_normal(&[hidden, heads], INIT_STD),
            },
            PositionBiasKind::Table => PositionBias::Table { table: init.trunc_normal(&[n * n, heads], INIT_STD) },
        };
        Ok(Self {
            qkv_w: init.trunc_normal(&[dim, 3 * dim], INIT_STD),
            qkv_b: Tensor::zeros(&[3 * dim]),
            proj_w: init.trunc_normal(&[dim, dim], INIT_STD),
            proj_b: Tensor::zeros(&[dim]),
            logit_scale: Tensor::full(&[heads], T::of(LOGIT_SCALE_INIT.ln())),
            pos,
            heads,
            window,
        })
    }
}

impl<T: Scalar> Attention<Var<T>> {
    /// Per-head additive bias [heads, w², w²].
    fn position_bias(&self, pass: &Pass<T>) -> Result<Var<T>> {
        let t = pass.tape;
        let w = self.window;
        let table = match &self.pos {
            PositionBias::Continuous { w1, b1, w2 } => {
                let coords = Var::constant(relative_coords_table::<T>(w));
                let hdn = t.relu(&t.linear(&coords, w1, Some(b1))?);
                t.linear(&hdn, w2, None)?
            }
            PositionBias::Table { table } => table.clone(),
        };
        let picked = t.index_select0(&table, &relative_position_index(w))?;
        let picked = t.reshape(&picked, &[w * w, w * w, self.heads])?;
        let bias = t.permute(&picked, &[2, 0, 1])?;
        Ok(match self.pos {
            PositionBias::Continuous { .. } => t.mul_scalar(&t.sigmoid(&bias), T::of(BIAS_SCALE)),
            PositionBias::Table { .. } => bias,
        })
    }
}

/// Windowed attention over [nWin, w², C]; `mask` is [nW, w², w²] with
/// nWin a multiple of nW (windows grouped per image).
pub fn wmsa_forward<T: Scalar>(
    pass: &Pass<T>,
    tokens: &Var<T>,
    p: &Attention<Var<T>>,
    mask: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    Ok(wmsa_forward_with_weights(pass, tokens, p, mask)?.0)
}

/// As [`wmsa_forward`], also returning the attention weights [nWin, heads, w², w²].
pub fn wmsa_forward_with_weights<T: Scalar>(
    pass: &Pass<T>,
    tokens: &Var<T>,
    p: &Attention<Var<T>>,
    mask: Option<&Tensor<T>>,
) -> Result<(Var<T>, Var<T>)> {
    let t = pass.tape;
    let d = tokens.dims();
    let c = p.proj_w.dims()[0];
    if p.heads == 0 || c % p.heads != 0 {
        return config_err(format!("embedding dim {c} is not divisible by {} heads", p.heads));
    }
    if d.len() != 3 || d[2] != c {
        return shape_err(format!("wmsa: tokens {d:?} for embedding dim {c}"));
    }
    let (nwin, n, h) = (d[0], d[1], p.heads);
    let hd = c / h;
    if n != p.window * p.window {
        return shape_err(format!("wmsa: {n} tokens per window, expected {}", p.window * p.window));
    }

    let qkv = t.linear(tokens, &p.qkv_w, Some(&p.qkv_b))?;
    let qkv = t.reshape(&qkv, &[nwin, n, 3, h, hd])?;
    let qkv = t.permute(&qkv, &[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<T>> {
        let v = t.narrow(&qkv, 0, i, 1)?;
        t.reshape(&v, &[nwin, h, n, hd])
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let q = t.l2_normalize(&q, QK_NORM_EPS);
    let k = t.l2_normalize(&k, QK_NORM_EPS);

    let logits = t.bmm(&q, &k, true)?;
    let scale = t.exp(&t.clamp_max(&p.logit_scale, T::of(logit_scale_max())));
    let logits = t.mul(&logits, &t.reshape(&scale, &[h, 1, 1])?)?;
    let logits = t.add(&logits, &p.position_bias(pass)?)?;
    let logits = match mask {
        Some(m) => {
            let nw = m.dims()[0];
            if nwin % nw != 0 || m.dims()[1..] != [n, n] {
                return shape_err(format!("wmsa: mask {:?} for {nwin} windows of {n} tokens", m.dims()));
            }
            let l = t.reshape(&logits, &[nwin / nw, nw, h, n, n])?;
            let mv = Var::constant(m.reshape(&[1, nw, 1, n, n])?);
            t.reshape(&t.add(&l, &mv)?, &[nwin, h, n, n])?
        }
        None => logits,
    };
    let attn = t.softmax(&logits)?;

    let out = t.bmm(&attn, &v, false)?;
    let out = t.permute(&out, &[0, 2, 1, 3])?;
    let out = t.reshape(&out, &[nwin, n, c])?;
    Ok((t.linear(&out, &p.proj_w, Some(&p.proj_b))?, attn))
}

#[derive(Clone, Debug)]
pub struct SwinBlock<P> {
    pub attn: Attention<P>,
    pub ln1_g: P,
    pub ln1_b: P,
    pub ln2_g: P,
    pub ln2_b: P,
    pub ffn: Ffn<P>,
    pub shift: usize,
    pub drop_path: f64,
}

impl<P> ParamTree<P> for SwinBlock<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.attn.visit(&join(prefix, "attn"), f);
        f(join(prefix, "norm1.weight"), &self.ln1_g);
        f(join(prefix, "norm1.bias"), &self.ln1_b);
        f(join(prefix, "norm2.weight"), &self.ln2_g);
        f(join(prefix, "norm2.bias"), &self.ln2_b);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(join(prefix, "norm1.weight"), &mut self.ln1_g);
        f(join(prefix, "norm1.bias"), &mut self.ln1_b);
        f(join(prefix, "norm2.weight"), &mut self.ln2_g);
        f(join(prefix, "norm2.bias"), &mut self.ln2_b);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

impl<T: Scalar> Bind<T> for SwinBlock<Tensor<T>> {
    type Bound = SwinBlock<Var<T>>;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound {
        SwinBlock {
            attn: self.attn.bind(&join(prefix, "attn"), f),
            ln1_g: f(&join(prefix, "norm1.weight"), &self.ln1_g),
            ln1_b: f(&join(prefix, "norm1.bias"), &self.ln1_b),
            ln2_g: f(&join(prefix, "norm2.weight"), &self.ln2_g),
            ln2_b: f(&join(prefix, "norm2.bias"), &self.ln2_b),
            ffn: self.ffn.bind(&join(prefix, "ffn"), f),
            shift: self.shift,
            drop_path: self.drop_path,
        }
    }
}

impl<T: Scalar> SwinBlock<Tensor<T>> {
    pub fn new(attn: Attention<Tensor<T>>, ffn: Ffn<Tensor<T>>, shift: usize, drop_path: f64) -> Result<Self> {
        let dim = attn.proj_w.dims()[0];
        if shift != 0 && shift != attn.window / 2 {
            return config_err(format!("shift must be 0 or {}, got {shift}", attn.window / 2));
        }
        Ok(Self {
            attn,
            ln1_g: Tensor::ones(&[dim]),
            ln1_b: Tensor::zeros(&[dim]),
            ln2_g: Tensor::ones(&[dim]),
            ln2_b: Tensor::zeros(&[dim]),
            ffn,
            shift,
            drop_path,
        })
    }
}

/// Shift actually applied on an h×w map: none when a single window covers an axis.
pub fn effective_shift(shift: usize, window: usize, h: usize, w: usize) -> usize {
    if h <= window || w <= window {
        0
    } else {
        shift
    }
}

/// x' = x + DropPath(LN₁(W-MSA(x))); out = x' + DropPath(LN₂(FFN(x'))).
pub fn swin_block_forward<T: Scalar>(
    pass: &Pass<T>,
    x: &Var<T>,
    p: &SwinBlock<Var<T>>,
    h: usize,
    w: usize,
) -> Result<Var<T>> {
    let t = pass.tape;
    let d = x.dims();
    let c = p.attn.proj_w.dims()[0];
    if d.len() != 3 || d[1] != h * w || d[2] != c {
        return shape_err(format!("swin block: tokens {d:?} for a {h}×{w}×{c} map"));
    }
    let b = d[0];
    let win = p.attn.window;
    let shift = effective_shift(p.shift, win, h, w);

    let map = t.reshape(x, &[b, h, w, c])?;
    let map = cyclic_shift(pass, &map, shift as isize)?;
    let windows = window_partition(pass, &map, win)?;
    let mask = (shift > 0).then(|| attention_mask::<T>(h, w, win, shift));
    let attn = wmsa_forward(pass, &windows, &p.attn, mask.as_ref())?;
    let map = window_reverse(pass, &attn, win, h, w)?;
    let map = cyclic_shift(pass, &map, -(shift as isize))?;
    let attn_tokens = t.reshape(&map, &[b, h * w, c])?;

    let branch = t.layernorm(&attn_tokens, &p.ln1_g, &p.ln1_b, crate::numerics::ops::LAYERNORM_EPS)?;
    let x1 = t.add(x, &pass.drop_path(&branch, p.drop_path)?)?;

    let ffn = p.ffn.forward(pass, &x1, h, w)?;
    let branch = t.layernorm(&ffn, &p.ln2_g, &p.ln2_b, crate::numerics::ops::LAYERNORM_EPS)?;
    t.add(&x1, &pass.drop_path(&branch, p.drop_path)?)
}
