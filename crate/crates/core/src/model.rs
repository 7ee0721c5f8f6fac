//! Full network: shallow conv embedding, residual transformer stages, global
//! body residual and a pixel-shuffle reconstruction head. Also the analytic
//! parameter and FLOP counters.

use crate::config::{format_f64, format_list, KvMap};
use crate::error::{config_err, shape_err, Result};
use crate::numerics::ops::LAYERNORM_EPS;
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{join, Bind, Init, ParamTree, Pass};
use crate::sfg_ffn::{gate_dim, hidden_dim, Ffn, Mlp, SfgFfn, REFINE_K};
use crate::swin::{swin_block_forward, Attention, PositionBiasKind, SwinBlock, CPB_HIDDEN};

const CONV_K: usize = 3;
const HEAD_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    Sfg,
    Baseline,
}

impl FfnKind {
    pub fn name(self) -> &'static str {
        match self {
            FfnKind::Sfg => "sfg",
            FfnKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sfg" => Ok(FfnKind::Sfg),
            "baseline" | "mlp" => Ok(FfnKind::Baseline),
            _ => config_err(format!("ffn: expected sfg or baseline, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropPathSchedule {
    Constant,
    /// 0 at the first block rising to the configured rate at the last.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scale: usize,
    pub bands: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: f64,
    pub ffn: FfnKind,
    pub blur_k: usize,
    pub gate_rho: usize,
    pub dropout: f64,
    pub drop_path: f64,
    pub drop_path_schedule: DropPathSchedule,
    pub position_bias: PositionBiasKind,
    /// width of the reconstruction head
    pub num_feat: usize,
    pub seed: u64,
}

const KEYS: &[&str] = &[
    "scale",
    "bands",
    "embed_dim",
    "depths",
    "heads",
    "window",
    "mlp_ratio",
    "ffn",
    "blur_k",
    "gate_rho",
    "dropout",
    "drop_path",
    "drop_path_schedule",
    "position_bias",
    "cpb_hidden",
    "num_feat",
    "seed",
];

impl ModelConfig {
    /// 6 stages × 6 blocks, C = 180, window 8, ×2, RGB.
    pub fn full(ffn: FfnKind) -> Self {
        Self {
            scale: 2,
            bands: 3,
            embed_dim: 180,
            depths: vec![6; 6],
            heads: vec![6; 6],
            window: 8,
            mlp_ratio: 2.0,
            ffn,
            blur_k: 5,
            gate_rho: 8,
            dropout: 0.0,
            drop_path: 0.0,
            drop_path_schedule: DropPathSchedule::Constant,
            position_bias: PositionBiasKind::Continuous { hidden: CPB_HIDDEN },
            num_feat: 64,
            seed: 42,
        }
    }

    /// Desk-scale variant: C = 16, two stages of two blocks, table position bias.
    pub fn tiny(ffn: FfnKind) -> Self {
        Self {
            embed_dim: 16,
            depths: vec![2, 2],
            heads: vec![2, 2],
            position_bias: PositionBiasKind::Table,
            num_feat: 16,
            ..Self::full(ffn)
        }
    }

    pub fn blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn upsample_steps(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| config_err(format!("{field}: {why}"));
        if !self.scale.is_power_of_two() || self.scale < 2 {
            return bad("scale", format!("must be a power of two ≥ 2, got {}", self.scale));
        }
        if self.bands == 0 {
            return bad("bands", "must be ≥ 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be ≥ 1".into());
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("depths", format!("need ≥ 1 stage of ≥ 1 block, got {:?}", self.depths));
        }
        if self.depths.len() != self.heads.len() {
            return bad("heads", format!("{} entries for {} stages", self.heads.len(), self.depths.len()));
        }
        if let Some(h) = self.heads.iter().find(|&&h| h == 0 || self.embed_dim % h != 0) {
            return bad("heads", format!("embed_dim {} is not divisible by {h}", self.embed_dim));
        }
        if self.window == 0 {
            return bad("window", "must be ≥ 1".into());
        }
        if !(self.mlp_ratio > 0.0) || hidden_dim(self.embed_dim, self.mlp_ratio) == 0 {
            return bad("mlp_ratio", format!("{} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.blur_k % 2 == 0 {
            return bad("blur_k", format!("must be odd, got {}", self.blur_k));
        }
        if self.gate_rho == 0 {
            return bad("gate_rho", "must be ≥ 1".into());
        }
        for (f, v) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(f, format!("must lie in [0, 1], got {v}"));
            }
        }
        if self.num_feat == 0 {
            return bad("num_feat", "must be ≥ 1".into());
        }
        if let PositionBiasKind::Continuous { hidden: 0 } = self.position_bias {
            return bad("cpb_hidden", "must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("scale", self.scale);
        kv.set("bands", self.bands);
        kv.set("embed_dim", self.embed_dim);
        kv.set("depths", format_list(&self.depths));
        kv.set("heads", format_list(&self.heads));
        kv.set("window", self.window);
        kv.set("mlp_ratio", format_f64(self.mlp_ratio));
        kv.set("ffn", self.ffn.name());
        kv.set("blur_k", self.blur_k);
        kv.set("gate_rho", self.gate_rho);
        kv.set("dropout", format_f64(self.dropout));
        kv.set("drop_path", format_f64(self.drop_path));
        kv.set(
            "drop_path_schedule",
            match self.drop_path_schedule {
                DropPathSchedule::Constant => "constant",
                DropPathSchedule::Linear => "linear",
            },
        );
        match self.position_bias {
            PositionBiasKind::Continuous { hidden } => {
                kv.set("position_bias", "continuous");
                kv.set("cpb_hidden", hidden);
            }
            PositionBiasKind::Table => kv.set("position_bias", "table"),
        }
        kv.set("num_feat", self.num_feat);
        kv.set("seed", self.seed);
        kv
    }

    /// Missing keys fall back to the full configuration.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = Self::full(FfnKind::Sfg);
        let position_bias = match kv.raw("position_bias").unwrap_or("continuous") {
            "continuous" => PositionBiasKind::Continuous { hidden: kv.get_or("cpb_hidden", CPB_HIDDEN)? },
            "table" => PositionBiasKind::Table,
            other => return config_err(format!("position_bias: expected continuous or table, got {other:?}")),
        };
        let drop_path_schedule = match kv.raw("drop_path_schedule").unwrap_or("constant") {
            "constant" => DropPathSchedule::Constant,
            "linear" => DropPathSchedule::Linear,
            other => return config_err(format!("drop_path_schedule: expected constant or linear, got {other:?}")),
        };
        let c = Self {
            scale: kv.get_or("scale", d.scale)?,
            bands: kv.get_or("bands", d.bands)?,
            embed_dim: kv.get_or("embed_dim", d.embed_dim)?,
            depths: kv.list_or("depths", &d.depths)?,
            heads: kv.list_or("heads", &d.heads)?,
            window: kv.get_or("window", d.window)?,
            mlp_ratio: kv.get_or("mlp_ratio", d.mlp_ratio)?,
            ffn: FfnKind::parse(kv.raw("ffn").unwrap_or("sfg"))?,
            blur_k: kv.get_or("blur_k", d.blur_k)?,
            gate_rho: kv.get_or("gate_rho", d.gate_rho)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            drop_path: kv.get_or("drop_path", d.drop_path)?,
            drop_path_schedule,
            position_bias,
            num_feat: kv.get_or("num_feat", d.num_feat)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    fn block_drop_path(&self, index: usize) -> f64 {
        match self.drop_path_schedule {
            DropPathSchedule::Constant => self.drop_path,
            DropPathSchedule::Linear => {
                let n = self.blocks();
                if n <= 1 {
                    self.drop_path
                } else {
                    self.drop_path * index as f64 / (n - 1) as f64
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug)]
pub struct Stage<P> {
    pub blocks: Vec<SwinBlock<P>>,
    pub conv: Conv<P>,
}

#[derive(Clone, Debug)]
pub struct Network<P> {
    pub conv_first: Conv<P>,
    pub embed_norm: (P, P),
    pub stages: Vec<Stage<P>>,
    pub norm: (P, P),
    pub conv_after_body: Conv<P>,
    pub conv_before_upsample: Conv<P>,
    pub upsample: Vec<Conv<P>>,
    pub conv_last: Conv<P>,
}

/// Configuration plus stored weights.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub net: Network<Tensor<T>>,
}

impl<P> ParamTree<P> for Conv<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Bind<T> for Conv<Tensor<T>> {
    type Bound = Conv<Var<T>>;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound {
        Conv { weight: f(&join(prefix, "weight"), &self.weight), bias: f(&join(prefix, "bias"), &self.bias) }
    }
}

impl<P> ParamTree<P> for Stage<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.conv.visit(&join(prefix, "conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

impl<T: Scalar> Bind<T> for Stage<Tensor<T>> {
    type Bound = Stage<Var<T>>;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound {
        Stage {
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.bind(&join(prefix, &format!("blocks.{i}")), f)).collect(),
            conv: self.conv.bind(&join(prefix, "conv"), f),
        }
    }
}

impl<P> ParamTree<P> for Network<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.conv_first.visit(&join(prefix, "conv_first"), f);
        f(join(prefix, "embed_norm.weight"), &self.embed_norm.0);
        f(join(prefix, "embed_norm.bias"), &self.embed_norm.1);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
        f(join(prefix, "norm.weight"), &self.norm.0);
        f(join(prefix, "norm.bias"), &self.norm.1);
        self.conv_after_body.visit(&join(prefix, "conv_after_body"), f);
        self.conv_before_upsample.visit(&join(prefix, "conv_before_upsample"), f);
        for (i, c) in self.upsample.iter().enumerate() {
            c.visit(&join(prefix, &format!("upsample.{i}")), f);
        }
        self.conv_last.visit(&join(prefix, "conv_last"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.conv_first.visit_mut(&join(prefix, "conv_first"), f);
        f(join(prefix, "embed_norm.weight"), &mut self.embed_norm.0);
        f(join(prefix, "embed_norm.bias"), &mut self.embed_norm.1);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        f(join(prefix, "norm.weight"), &mut self.norm.0);
        f(join(prefix, "norm.bias"), &mut self.norm.1);
        self.conv_after_body.visit_mut(&join(prefix, "conv_after_body"), f);
        self.conv_before_upsample.visit_mut(&join(prefix, "conv_before_upsample"), f);
        for (i, c) in self.upsample.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("upsample.{i}")), f);
        }
        self.conv_last.visit_mut(&join(prefix, "conv_last"), f);
    }
}

impl<T: Scalar> Bind<T> for Network<Tensor<T>> {
    type Bound = Network<Var<T>>;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound {
        let conv_first = self.conv_first.bind(&join(prefix, "conv_first"), f);
        let embed_norm = (
            f(&join(prefix, "embed_norm.weight"), &self.embed_norm.0),
            f(&join(prefix, "embed_norm.bias"), &self.embed_norm.1),
        );
        let stages =
            self.stages.iter().enumerate().map(|(i, s)| s.bind(&join(prefix, &format!("stages.{i}")), f)).collect();
        let norm = (f(&join(prefix, "norm.weight"), &self.norm.0), f(&join(prefix, "norm.bias"), &self.norm.1));
        let conv_after_body = self.conv_after_body.bind(&join(prefix, "conv_after_body"), f);
        let conv_before_upsample = self.conv_before_upsample.bind(&join(prefix, "conv_before_upsample"), f);
        let upsample =
            self.upsample.iter().enumerate().map(|(i, c)| c.bind(&join(prefix, &format!("upsample.{i}")), f)).collect();
        let conv_last = self.conv_last.bind(&join(prefix, "conv_last"), f);
        Network { conv_first, embed_norm, stages, norm, conv_after_body, conv_before_upsample, upsample, conv_last }
    }
}

fn conv_init<T: Scalar>(init: &mut Init, cout: usize, cin: usize) -> Conv<Tensor<T>> {
    let fan_in = cin * CONV_K * CONV_K;
    Conv {
        weight: init.fan_in_uniform(&[cout, cin, CONV_K, CONV_K], fan_in),
        bias: init.fan_in_uniform(&[cout], fan_in),
    }
}

fn norm_init<T: Scalar>(c: usize) -> (Tensor<T>, Tensor<T>) {
    (Tensor::ones(&[c]), Tensor::zeros(&[c]))
}

/// Deterministic initialization from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let c = config.embed_dim;
    let mut init = Init::new(config.seed);
    let conv_first = conv_init(&mut init, c, config.bands);
    let mut stages = Vec::with_capacity(config.depths.len());
    let mut index = 0;
    for (&depth, &heads) in config.depths.iter().zip(&config.heads) {
        let mut blocks = Vec::with_capacity(depth);
        for j in 0..depth {
            let attn = Attention::init(c, heads, config.window, config.position_bias, &mut init)?;
            let ffn = match config.ffn {
                FfnKind::Sfg => {
                    let mut p = SfgFfn::init_with(c, config.mlp_ratio, config.blur_k, config.gate_rho, &mut init)?;
                    p.dropout = config.dropout;
                    Ffn::Sfg(p)
                }
                FfnKind::Baseline => {
                    let mut p = Mlp::init_with(c, config.mlp_ratio, &mut init)?;
                    p.dropout = config.dropout;
                    Ffn::Mlp(p)
                }
            };
            let shift = if j % 2 == 1 { config.window / 2 } else { 0 };
            blocks.push(SwinBlock::new(attn, ffn, shift, config.block_drop_path(index))?);
            index += 1;
        }
        stages.push(Stage { blocks, conv: conv_init(&mut init, c, c) });
    }
    let conv_after_body = conv_init(&mut init, c, c);
    let nf = config.num_feat;
    let conv_before_upsample = conv_init(&mut init, nf, c);
    let upsample = (0..config.upsample_steps()).map(|_| conv_init(&mut init, 4 * nf, nf)).collect();
    let conv_last = conv_init(&mut init, config.bands, nf);
    Ok(Model {
        config: config.clone(),
        net: Network {
            conv_first,
            embed_norm: norm_init(c),
            stages,
            norm: norm_init(c),
            conv_after_body,
            conv_before_upsample,
            upsample,
            conv_last,
        },
    })
}

impl<T: Scalar> Model<T> {
    pub fn count_params(&self) -> usize {
        self.net.count()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.net.names()
    }

    /// Inference on a fresh non-recording tape.
    pub fn infer(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = crate::numerics::Tape::inference();
        let pass = Pass::inference(&tape);
        let net = self.net.constants();
        let out = forward(&pass, &self.config, &net, &Var::constant(lr.clone()))?;
        Ok(out.value().clone())
    }
}

fn conv<T: Scalar>(pass: &Pass<T>, x: &Var<T>, c: &Conv<Var<T>>) -> Result<Var<T>> {
    pass.tape.conv2d(x, &c.weight, Some(&c.bias))
}

fn to_tokens<T: Scalar>(pass: &Pass<T>, x: &Var<T>) -> Result<Var<T>> {
    let d = x.dims().to_vec();
    let t = pass.tape.permute(x, &[0, 2, 3, 1])?;
    pass.tape.reshape(&t, &[d[0], d[2] * d[3], d[1]])
}

fn to_map<T: Scalar>(pass: &Pass<T>, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let d = x.dims().to_vec();
    let m = pass.tape.reshape(x, &[d[0], h, w, d[2]])?;
    pass.tape.permute(&m, &[0, 3, 1, 2])
}

/// [B, bands, H, W] → [B, bands, s·H, s·W]. Inputs are reflect-padded on the
/// bottom/right to a window multiple and the output is cropped back.
pub fn forward<T: Scalar>(
    pass: &Pass<T>,
    config: &ModelConfig,
    net: &Network<Var<T>>,
    lr: &Var<T>,
) -> Result<Var<T>> {
    let t = pass.tape;
    let d = lr.dims().to_vec();
    if d.len() != 4 {
        return shape_err(format!("model input must be [B, bands, H, W], got {d:?}"));
    }
    if d[1] != config.bands {
        return shape_err(format!("model expects {} bands, input has {}", config.bands, d[1]));
    }
    let (h, w, win) = (d[2], d[3], config.window);
    if h < win || w < win {
        return shape_err(format!("input {h}×{w} is smaller than the {win}×{win} window"));
    }
    let (ph, pw) = ((win - h % win) % win, (win - w % win) % win);
    let x = t.reflect_pad_br(lr, ph, pw)?;
    let (hp, wp) = (h + ph, w + pw);

    let shallow = conv(pass, &x, &net.conv_first)?;
    let mut tokens = t.layernorm(&to_tokens(pass, &shallow)?, &net.embed_norm.0, &net.embed_norm.1, LAYERNORM_EPS)?;
    for stage in &net.stages {
        let mut y = tokens.clone();
        for block in &stage.blocks {
            y = swin_block_forward(pass, &y, block, hp, wp)?;
        }
        let y = conv(pass, &to_map(pass, &y, hp, wp)?, &stage.conv)?;
        tokens = t.add(&to_tokens(pass, &y)?, &tokens)?;
    }
    let tokens = t.layernorm(&tokens, &net.norm.0, &net.norm.1, LAYERNORM_EPS)?;
    let body = conv(pass, &to_map(pass, &tokens, hp, wp)?, &net.conv_after_body)?;
    let feat = t.add(&body, &shallow)?;

    let mut y = t.leaky_relu(&conv(pass, &feat, &net.conv_before_upsample)?, T::of(HEAD_SLOPE));
    for up in &net.upsample {
        y = t.pixel_shuffle(&conv(pass, &y, up)?, 2)?;
    }
    let y = conv(pass, &y, &net.conv_last)?;
    let s = config.scale;
    let y = t.narrow(&y, 2, 0, s * h)?;
    t.narrow(&y, 3, 0, s * w)
}

/// Analytic multiply-add count, 2 FLOPs per MAC. Softmax, LayerNorm,
/// activations and elementwise adds are not counted.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub input: (usize, usize, usize),
    pub padded: (usize, usize),
    pub breakdown: Vec<(String, f64)>,
}

impl FlopReport {
    pub fn total(&self) -> f64 {
        self.breakdown.iter().map(|(_, v)| v).sum()
    }
}

pub fn conv_flops(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> f64 {
    2.0 * (k * k * cin * cout * h * w) as f64
}

/// Counts for one block at `n` tokens: (attention, ffn).
pub fn block_flops(config: &ModelConfig, heads: usize, n: usize) -> (f64, f64) {
    let c = config.embed_dim as f64;
    let nf = n as f64;
    let tw = (config.window * config.window) as f64;
    let mut attn = 2.0 * nf * c * 3.0 * c + 2.0 * 2.0 * nf * tw * c + 2.0 * nf * c * c;
    if let PositionBiasKind::Continuous { hidden } = config.position_bias {
        let entries = ((2 * config.window - 1) * (2 * config.window - 1)) as f64;
        attn += 2.0 * entries * (2.0 * hidden as f64 + hidden as f64 * heads as f64);
    }
    let ch = hidden_dim(config.embed_dim, config.mlp_ratio) as f64;
    let mut ffn = 2.0 * 2.0 * nf * c * ch;
    if config.ffn == FfnKind::Sfg {
        let cg = gate_dim(ch as usize, config.gate_rho) as f64;
        let k2 = (config.blur_k * config.blur_k) as f64;
        ffn += 2.0 * nf * ch * (k2 + (REFINE_K * REFINE_K) as f64) + 2.0 * 2.0 * nf * ch * cg;
    }
    (attn, ffn)
}

pub fn estimate_flops(config: &ModelConfig, h: usize, w: usize) -> FlopReport {
    let win = config.window;
    let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let n = hp * wp;
    let (c, b, nf) = (config.embed_dim, config.bands, config.num_feat);
    let mut attn = 0.0;
    let mut ffn = 0.0;
    for (&depth, &heads) in config.depths.iter().zip(&config.heads) {
        let (a, f) = block_flops(config, heads, n);
        attn += depth as f64 * a;
        ffn += depth as f64 * f;
    }
    let stage_convs = config.depths.len() as f64 * conv_flops(CONV_K, c, c, hp, wp);
    let mut recon = conv_flops(CONV_K, c, nf, hp, wp);
    let (mut rh, mut rw) = (hp, wp);
    for _ in 0..config.upsample_steps() {
        recon += conv_flops(CONV_K, nf, 4 * nf, rh, rw);
        rh *= 2;
        rw *= 2;
    }
    recon += conv_flops(CONV_K, nf, b, rh, rw);
    FlopReport {
        input: (b, h, w),
        padded: (hp, wp),
        breakdown: vec![
            ("shallow".into(), conv_flops(CONV_K, b, c, hp, wp)),
            ("attention".into(), attn),
            ("ffn".into(), ffn),
            ("stage_convs".into(), stage_convs),
            ("conv_after_body".into(), conv_flops(CONV_K, c, c, hp, wp)),
            ("reconstruction".into(), recon),
        ],
    }
}

/// Parameters grouped by the first one or two name components.
pub fn param_breakdown<T: Scalar>(model: &Model<T>) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    model.net.visit("", &mut |name, p| {
        let parts: Vec<&str> = name.split('.').collect();
        let key = match parts[0] {
            "stages" => {
                let kind = if parts.get(2) == Some(&"blocks") { parts.get(4).copied().unwrap_or("") } else { "conv" };
                match kind {
                    "attn" => "blocks.attention".to_string(),
                    "ffn" => "blocks.ffn".to_string(),
                    "norm1" | "norm2" => "blocks.norm".to_string(),
                    _ => "stage_convs".to_string(),
                }
            }
            first => first.to_string(),
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some(g) => g.1 += p.len(),
            None => groups.push((key, p.len())),
        }
    });
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_has_36_blocks() {
        let c = ModelConfig::full(FfnKind::Sfg);
        assert_eq!(c.blocks(), 36);
        assert_eq!(c.upsample_steps(), 1);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ModelConfig::tiny(FfnKind::Baseline);
        c.drop_path = 0.1;
        c.drop_path_schedule = DropPathSchedule::Linear;
        assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
        let p = ModelConfig::full(FfnKind::Sfg);
        assert_eq!(ModelConfig::parse(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = ModelConfig::tiny(FfnKind::Sfg);
        c.heads = vec![3, 2];
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("heads"), "{msg}");
        let mut c = ModelConfig::tiny(FfnKind::Sfg);
        c.scale = 3;
        assert!(c.validate().unwrap_err().to_string().contains("scale"));
        assert!(ModelConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn single_conv_flops_closed_form() {
        assert_eq!(conv_flops(3, 4, 5, 6, 7), 2.0 * 9.0 * 4.0 * 5.0 * 42.0);
    }

    #[test]
    fn tiny_builds_and_names_are_unique() {
        let m = build_model::<f32>(&ModelConfig::tiny(FfnKind::Sfg)).unwrap();
        let names = m.param_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"stages.1.blocks.1.ffn.blur".to_string()));
    }

    fn image(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::numerics::PortableRng::new(seed);
        Tensor::from_fn(dims, |_| rng.uniform())
    }

    #[test]
    fn tiny_count_matches_hand_ledger() {
        let (c, b, nf, w, heads) = (16, 3, 16, 8, 2);
        let (ch, cg) = (32, 16);
        let attn = c * 3 * c + 3 * c + c * c + c + heads + (2 * w - 1) * (2 * w - 1) * heads;
        let norms = 4 * c;
        let sfg = c * ch + ch + ch * 25 + ch * 9 + ch + ch * cg + cg + cg * ch + ch + ch * c + c;
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let stage = 2 * (attn + norms + sfg) + conv(3, c, c);
        let total = conv(3, b, c) + 2 * c + 2 * stage + 2 * c + conv(3, c, c) + conv(3, c, nf) + conv(3, nf, 4 * nf) + conv(3, nf, b);
        let m = build_model::<f32>(&ModelConfig::tiny(FfnKind::Sfg)).unwrap();
        assert_eq!(m.count_params(), total);
        assert_eq!(total, 38_979);
    }

    #[test]
    fn odd_sizes_are_padded_then_cropped() {
        let m = build_model::<f64>(&ModelConfig::tiny(FfnKind::Sfg)).unwrap();
        let x = image(&[1, 3, 20, 20], 1);
        let y = m.infer(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 40, 40]);
        // same result as padding by hand to 24×24 and cropping the 48×48 output
        let tape = crate::numerics::Tape::inference();
        let padded = tape.reflect_pad_br(&Var::constant(x), 4, 4).unwrap();
        let full = m.infer(padded.value()).unwrap();
        for ch in 0..3 {
            for i in 0..40 {
                for j in 0..40 {
                    assert_eq!(y.at(&[0, ch, i, j]), full.at(&[0, ch, i, j]));
                }
            }
        }
    }

    #[test]
    fn scale_four_and_four_bands() {
        let cfg = ModelConfig { scale: 4, bands: 4, ..ModelConfig::tiny(FfnKind::Baseline) };
        let m = build_model::<f32>(&cfg).unwrap();
        assert_eq!(m.net.upsample.len(), 2);
        let y = m.infer(&image(&[2, 4, 8, 8], 2).cast()).unwrap();
        assert_eq!(y.dims(), &[2, 4, 32, 32]);
    }

    #[test]
    fn input_checks() {
        let m = build_model::<f32>(&ModelConfig::tiny(FfnKind::Sfg)).unwrap();
        let msg = m.infer(&Tensor::zeros(&[1, 4, 8, 8])).unwrap_err().to_string();
        assert!(msg.contains("bands"), "{msg}");
        assert!(m.infer(&Tensor::zeros(&[1, 3, 6, 8])).is_err());
    }

    #[test]
    fn build_is_deterministic_and_seeded() {
        let cfg = ModelConfig::tiny(FfnKind::Sfg);
        let a = build_model::<f32>(&cfg).unwrap();
        let b = build_model::<f32>(&cfg).unwrap();
        let c = build_model::<f32>(&ModelConfig { seed: 7, ..cfg }).unwrap();
        assert_eq!(a.net.conv_first.weight, b.net.conv_first.weight);
        assert_ne!(a.net.conv_first.weight, c.net.conv_first.weight);
    }

    #[test]
    fn flops_grow_with_input() {
        let cfg = ModelConfig::tiny(FfnKind::Sfg);
        let small = estimate_flops(&cfg, 8, 8).total();
        let large = estimate_flops(&cfg, 16, 16).total();
        assert!((large / small - 4.0).abs() < 1e-12);
        let sfg = estimate_flops(&ModelConfig::full(FfnKind::Sfg), 64, 64).total();
        let base = estimate_flops(&ModelConfig::full(FfnKind::Baseline), 64, 64).total();
        assert!(sfg > base);
    }
}
