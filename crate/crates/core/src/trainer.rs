//! AdamW with cosine annealing, a deterministic step-based training loop and
//! the FFN / loss-term ablation grid.

use std::collections::BTreeMap;

use crate::config::{format_f64, KvMap};
use crate::degrade::PatchPair;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{build_model, forward, FfnKind, Model, ModelConfig};
use crate::numerics::rng::splitmix64_mix;
use crate::numerics::{PortableRng, Scalar, Tape, Tensor, Var};
use crate::objective::{mae, psnr, ssim_value, total_loss, LossBreakdown, LossTerm, LossWeights};
use crate::params::{bind_named, ParamTree, Pass};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// 0 disables periodic checkpoints
    pub checkpoint_every: usize,
    /// global gradient-norm clip; off by default
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            total_steps: 1000,
            seed: 42,
            loss: LossWeights::default(),
            checkpoint_every: 0,
            grad_clip: None,
        }
    }
}

const KEYS: &[&str] = &[
    "lr0",
    "lr_min",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "total_steps",
    "seed",
    "loss_terms",
    "lambda_l1",
    "lambda_ssim",
    "lambda_edge",
    "lambda_freq",
    "freq_amplitude",
    "freq_pad",
    "checkpoint_every",
    "grad_clip",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min <= self.lr0) || self.lr_min < 0.0 {
            return config_err(format!("need 0 ≤ lr_min ≤ lr0, got {} and {}", self.lr_min, self.lr0));
        }
        if self.total_steps == 0 {
            return config_err("total_steps must be ≥ 1");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be ≥ 1");
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config_err(format!("{n} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return config_err("weight_decay must be ≥ 0 and adam_eps > 0");
        }
        self.loss.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("lr0", format_f64(self.lr0));
        kv.set("lr_min", format_f64(self.lr_min));
        kv.set("weight_decay", format_f64(self.weight_decay));
        kv.set("beta1", format_f64(self.beta1));
        kv.set("beta2", format_f64(self.beta2));
        kv.set("adam_eps", format_f64(self.adam_eps));
        kv.set("batch_size", self.batch_size);
        kv.set("total_steps", self.total_steps);
        kv.set("seed", self.seed);
        let terms: Vec<&str> = self.loss.terms().iter().map(|t| t.name()).collect();
        kv.set("loss_terms", terms.join(","));
        for t in LossTerm::ALL {
            kv.set(&format!("lambda_{}", t.name()), format_f64(self.loss.weight(t)));
        }
        kv.set("freq_amplitude", self.loss.freq.amplitude);
        kv.set("freq_pad", self.loss.freq.pad_to_pow2);
        kv.set("checkpoint_every", self.checkpoint_every);
        if let Some(c) = self.grad_clip {
            kv.set("grad_clip", format_f64(c));
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let mut loss = match kv.raw("loss_terms") {
            Some(s) => LossWeights::only(&parse_terms(s)?),
            None => LossWeights::default(),
        };
        for t in LossTerm::ALL {
            loss.lambda[t as usize] = kv.get_or(&format!("lambda_{}", t.name()), loss.weight(t))?;
        }
        loss.freq.amplitude = kv.get_or("freq_amplitude", false)?;
        loss.freq.pad_to_pow2 = kv.get_or("freq_pad", false)?;
        let grad_clip = match kv.raw("grad_clip") {
            None => None,
            Some(_) => Some(kv.get_or("grad_clip", 0.0)?),
        };
        let c = Self {
            lr0: kv.get_or("lr0", d.lr0)?,
            lr_min: kv.get_or("lr_min", d.lr_min)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            total_steps: kv.get_or("total_steps", d.total_steps)?,
            seed: kv.get_or("seed", d.seed)?,
            loss,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
            grad_clip,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Comma-separated loss term names.
pub fn parse_terms(s: &str) -> Result<Vec<LossTerm>> {
    let terms: Vec<LossTerm> =
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(LossTerm::parse).collect::<Result<_>>()?;
    if terms.is_empty() {
        return config_err("at least one loss term is required");
    }
    Ok(terms)
}

/// lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return config_err(format!("step {step} outside [0, {total_steps}]"));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// Biases, norm scales and other vectors are not decayed.
pub fn decays(param: &Tensor<impl Scalar>) -> bool {
    param.dims().len() > 1
}

/// One decoupled-decay Adam step over every named leaf of `params`.
/// Parameters without an entry in `grads` see a zero gradient.
pub fn adamw_step<T: Scalar, P: ParamTree<Tensor<T>>>(
    params: &mut P,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut err = None;
    params.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let zero;
        let g = match grads.get(&name) {
            Some(g) if g.dims() == p.dims() => g,
            Some(g) => {
                err = Some(format!("gradient for {name} has dims {:?}, parameter {:?}", g.dims(), p.dims()));
                return;
            }
            None => {
                zero = Tensor::zeros(p.dims());
                &zero
            }
        };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.dims()));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(p.dims()));
        let wd = if decays(p) { cfg.weight_decay } else { 0.0 };
        let decay = T::of(1.0 - lr * wd);
        for (((pi, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            if wd != 0.0 {
                *pi *= decay;
            }
            let upd = lr * (mf / c1) / ((vf / c2).sqrt() + cfg.adam_eps);
            *pi = T::of(pi.as_f64() - upd);
        }
    });
    match err {
        Some(e) => shape_err(e),
        None => Ok(()),
    }
}

fn clip_grads<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) {
    let norm = grads.values().flat_map(|g| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const HISTORY_HEADER: &str = "step,lr,total,l1,ssim,edge,freq";

impl HistoryRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            format_f64(self.lr),
            format_f64(l.total),
            format_f64(l.l1),
            format_f64(l.ssim),
            format_f64(l.edge),
            format_f64(l.freq)
        )
    }
}

/// Stack [bands, h, w] tensors into [B, bands, h, w].
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = items.first() else {
        return shape_err("cannot stack an empty batch");
    };
    let d = first.dims().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.dims() != d.as_slice() {
            return shape_err(format!("batch items differ: {:?} vs {d:?}", t.dims()));
        }
        data.extend_from_slice(t.data());
    }
    let mut od = vec![items.len()];
    od.extend(d);
    Tensor::new(&od, data)
}

/// Dataset indices for `step`: epoch-wise permutations, derivable from the step alone.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch)
        .map(|i| {
            let k = step * batch + i;
            let (epoch, pos) = (k / n, k % n);
            let mut order: Vec<usize> = (0..n).collect();
            PortableRng::derived(seed, epoch as u64).shuffle(&mut order);
            order[pos]
        })
        .collect()
}

/// Model, optimizer state and step counter: everything needed to resume.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub opt: OptimizerState<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, config, opt: OptimizerState::default(), step: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// One optimization step on the batch chosen for the current step.
    pub fn step_once(&mut self, data: &[PatchPair<T>]) -> Result<HistoryRow> {
        if data.is_empty() {
            return Err(Error::Usage("training data is empty".into()));
        }
        let cfg = &self.config;
        let idx = batch_indices(cfg.seed, self.step, cfg.batch_size, data.len());
        let lr_batch = stack(&idx.iter().map(|&i| &data[i].lr).collect::<Vec<_>>())?;
        let hr_batch = stack(&idx.iter().map(|&i| &data[i].hr).collect::<Vec<_>>())?;

        let tape = Tape::new();
        let pass = Pass::training(&tape, splitmix64_mix(cfg.seed.wrapping_add(self.step as u64)));
        let (net, named) = bind_named(&self.model.net, &tape);
        let sr = forward(&pass, &self.model.config, &net, &Var::constant(lr_batch))?;
        let (loss, breakdown) = total_loss(&tape, &sr, &Var::constant(hr_batch), &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { step: self.step, batch: idx[0] });
        }
        let grads = tape.backward(&loss)?;
        let mut by_name: BTreeMap<String, Tensor<T>> = named.iter().map(|(n, v)| (n.clone(), grads.wrt(v))).collect();
        if let Some(c) = cfg.grad_clip {
            clip_grads(&mut by_name, c);
        }
        let lr = cosine_lr(self.step, cfg.total_steps, cfg.lr0, cfg.lr_min)?;
        adamw_step(&mut self.model.net, &by_name, &mut self.opt, lr, cfg)?;
        let row = HistoryRow { step: self.step, lr, loss: breakdown };
        self.step += 1;
        Ok(row)
    }

    /// Runs to `total_steps`; `on_step` sees each row and may checkpoint.
    pub fn run(
        &mut self,
        data: &[PatchPair<T>],
        on_step: &mut dyn FnMut(&Trainer<T>, &HistoryRow) -> Result<()>,
    ) -> Result<Vec<HistoryRow>> {
        let mut history = Vec::new();
        while !self.is_done() {
            let row = self.step_once(data)?;
            on_step(self, &row)?;
            history.push(row);
        }
        Ok(history)
    }
}

/// Train from a fresh model to completion.
pub fn train<T: Scalar>(model: Model<T>, data: &[PatchPair<T>], config: &TrainConfig) -> Result<(Model<T>, Vec<HistoryRow>)> {
    let mut t = Trainer::new(model, config.clone())?;
    let history = t.run(data, &mut |_, _| Ok(()))?;
    Ok((t.model, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// Mean PSNR / SSIM / MAE of the model's output over `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[PatchPair<T>]) -> Result<EvalRow> {
    let mut acc = EvalRow { psnr: 0.0, ssim: 0.0, mae: 0.0 };
    for p in data {
        let sr = model.infer(&stack(&[&p.lr])?)?;
        let hr = stack(&[&p.hr])?;
        acc.psnr += psnr(&sr, &hr, 1.0)?;
        acc.ssim += ssim_value(&sr, &hr)?;
        acc.mae += mae(&sr, &hr)?;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalRow { psnr: acc.psnr / n, ssim: acc.ssim / n, mae: acc.mae / n })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub ffn: FfnKind,
    pub terms: Vec<LossTerm>,
    pub final_loss: f64,
    pub eval: EvalRow,
}

/// The five backbone × loss-term combinations.
pub fn ablation_grid() -> Vec<(FfnKind, Vec<LossTerm>)> {
    use LossTerm::*;
    vec![
        (FfnKind::Baseline, vec![L1]),
        (FfnKind::Baseline, vec![L1, Ssim, Edge, Freq]),
        (FfnKind::Sfg, vec![L1]),
        (FfnKind::Sfg, vec![L1, Ssim]),
        (FfnKind::Sfg, vec![L1, Ssim, Edge, Freq]),
    ]
}

fn row_label(ffn: FfnKind, terms: &[LossTerm]) -> String {
    let t: Vec<&str> = terms.iter().map(|t| t.name()).collect();
    format!("{}+{}", if ffn == FfnKind::Sfg { "SFG" } else { "FFN" }, t.join("/"))
}

/// Trains one model per grid row from `base` and evaluates on `eval`.
pub fn run_ablation<T: Scalar>(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &[PatchPair<T>],
    eval: &[PatchPair<T>],
) -> Result<Vec<AblationRow>> {
    ablation_grid()
        .into_iter()
        .map(|(ffn, terms)| {
            let mc = ModelConfig { ffn, ..base.clone() };
            let mut tc = train_cfg.clone();
            tc.loss = LossWeights { enabled: LossWeights::only(&terms).enabled, ..train_cfg.loss.clone() };
            let (model, hist) = train(build_model::<T>(&mc)?, data, &tc)?;
            Ok(AblationRow {
                label: row_label(ffn, &terms),
                ffn,
                final_loss: hist.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
                eval: evaluate(&model, eval)?,
                terms,
            })
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<22} {:>12} {:>10} {:>8} {:>9}\n", "row", "final_loss", "PSNR", "SSIM", "MAE");
    for r in rows {
        s += &format!(
            "{:<22} {:>12.6} {:>10.4} {:>8.4} {:>9.6}\n",
            r.label, r.final_loss, r.eval.psnr, r.eval.ssim, r.eval.mae
        );
    }
    s
}
