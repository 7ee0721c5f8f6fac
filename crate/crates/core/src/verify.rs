//! Central-difference gradient suite over primitive ops, the feed-forward
//! sublayers, the Swin block and the tiny end-to-end model.

use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::model::{build_model, forward, FfnKind, ModelConfig, Network};
use crate::numerics::{grad_check_with, GradCheckOptions, Padding, PortableRng, Tape, Tensor, Var};
use crate::objective::{edge_loss, freq_loss_with, l1_loss, ssim_loss, FreqOptions};
use crate::params::{Bind, Pass};
use crate::sfg_ffn::{Ffn, Mlp, SfgFfn};
use crate::swin::{swin_block_forward, Attention, PositionBiasKind, SwinBlock};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Losses,
    SfgFfn,
    Swin,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Ops, Scope::Losses, Scope::SfgFfn, Scope::Swin, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Losses => "losses",
            Scope::SfgFfn => "sfg_ffn",
            Scope::Swin => "swin",
            Scope::Model => "model",
        }
    }

    /// `all` expands to every scope.
    pub fn parse_list(s: &str) -> Result<Vec<Scope>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                return Ok(Self::ALL.to_vec());
            }
            match Self::ALL.iter().find(|sc| sc.name() == part) {
                Some(sc) => out.push(*sc),
                None => {
                    return Err(Error::Usage(format!(
                        "unknown scope {part:?}; expected all, ops, losses, sfg_ffn, swin or model"
                    )))
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Usage("empty scope list".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub scope: Scope,
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<8} {:<40} seed {} max_rel_err {:.3e} (tol {:.0e}, {} probes)",
            if self.pass { "ok  " } else { "FAIL" },
            self.scope.name(),
            self.name,
            self.seed,
            self.max_rel_err,
            self.tol,
            self.checked
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    /// Forwarded to the tape to corrupt one backward rule.
    pub fault: Option<String>,
    /// Probe at most this many components of each input.
    pub max_components: Option<usize>,
}

type Fwd = Rc<dyn Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>>;

struct Case {
    name: String,
    input: Tensor<f64>,
    f: Fwd,
    tol: f64,
    max_components: Option<usize>,
}

#[derive(Clone, Copy)]
enum Dist {
    Signed,
    /// |x| ≥ 0.2, away from kinks at zero
    AwayFromZero,
    Positive,
}

fn random(dims: &[usize], seed: u64, dist: Dist) -> Tensor<f64> {
    let mut rng = PortableRng::new(seed);
    Tensor::from_fn(dims, |_| {
        let u = rng.uniform_range(-1.0, 1.0);
        match dist {
            Dist::Signed => u,
            Dist::AwayFromZero => u.signum() * (0.2 + 0.8 * u.abs()),
            Dist::Positive => 1.0 + 0.5 * u,
        }
    })
}

/// Σ y·r with fixed random r, so every output component carries a distinct weight.
fn project(t: &Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = Var::constant(random(y.dims(), seed ^ 0x9e37_79b9, Dist::Signed));
    Ok(t.sum(&t.mul(y, &r)?))
}

struct Builder {
    seed: u64,
    cases: Vec<Case>,
}

impl Builder {
    fn push(
        &mut self,
        name: impl Into<String>,
        input: Tensor<f64>,
        tol: f64,
        f: impl Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>> + 'static,
    ) {
        self.cases.push(Case { name: name.into(), input, f: Rc::new(f), tol, max_components: None });
    }

    fn op(
        &mut self,
        name: &str,
        dims: &[usize],
        dist: Dist,
        f: impl Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>> + 'static,
    ) {
        let seed = self.seed;
        let input = random(dims, seed.wrapping_mul(31).wrapping_add(self.cases.len() as u64), dist);
        self.push(name, input, OP_TOL, move |t, x| project(t, &f(t, x)?, seed));
    }

    fn other(&self, dims: &[usize], salt: u64, dist: Dist) -> Var<f64> {
        Var::constant(random(dims, self.seed ^ (salt << 32), dist))
    }

    /// One case for the input and one per parameter tensor of `tree`.
    fn tree<B>(
        &mut self,
        label: &str,
        tree: B,
        x: Tensor<f64>,
        tol: f64,
        param_probes: usize,
        fwd: impl Fn(&Pass<f64>, &B::Bound, &Var<f64>) -> Result<Var<f64>> + 'static,
    ) where
        B: Bind<f64> + crate::params::ParamTree<Tensor<f64>> + 'static,
    {
        let seed = self.seed;
        let tree = Rc::new(tree);
        let fwd = Rc::new(fwd);
        {
            let (tree, fwd) = (tree.clone(), fwd.clone());
            self.push(format!("{label} wrt input"), x.clone(), tol, move |t, v| {
                let pass = Pass::inference(t);
                let bound = tree.constants();
                project(t, &fwd(&pass, &bound, v)?, seed)
            });
        }
        let mut params = Vec::new();
        tree.visit("", &mut |name, p| params.push((name, p.clone())));
        for (name, value) in params {
            let (tree, fwd, x) = (tree.clone(), fwd.clone(), x.clone());
            let target = name.clone();
            self.cases.push(Case {
                name: format!("{label} wrt {name}"),
                input: value,
                tol,
                max_components: Some(param_probes),
                f: Rc::new(move |t, v| {
                    let pass = Pass::inference(t);
                    let bound = tree.bind("", &mut |n, p| if n == target { v.clone() } else { Var::constant(p.clone()) });
                    project(t, &fwd(&pass, &bound, &Var::constant(x.clone()))?, seed)
                }),
            });
        }
    }
}

fn op_cases(b: &mut Builder) {
    use Dist::*;
    let d = [2, 3, 4];
    let (y, pos) = (b.other(&d, 1, Signed), b.other(&d, 2, Positive));
    let y2 = y.clone();
    b.op("add", &d, Signed, move |t, x| t.add(x, &y2));
    let y2 = y.clone();
    b.op("sub (rhs)", &d, Signed, move |t, x| t.sub(&y2, x));
    let y2 = y.clone();
    b.op("mul", &d, Signed, move |t, x| t.mul(x, &y2));
    b.op("div (numerator)", &d, Signed, move |t, x| t.div(x, &pos));
    let y2 = y.clone();
    b.op("div (denominator)", &d, Positive, move |t, x| t.div(&y2, x));
    b.op("mul_scalar", &d, Signed, |t, x| Ok(t.mul_scalar(x, -1.7)));
    b.op("add_scalar", &d, Signed, |t, x| Ok(t.add_scalar(x, 0.3)));
    b.op("neg", &d, Signed, |t, x| Ok(t.neg(x)));
    b.op("square", &d, Signed, |t, x| Ok(t.square(x)));
    b.op("sqrt", &d, Positive, |t, x| Ok(t.sqrt(x)));
    b.op("sin", &d, Signed, |t, x| Ok(t.sin(x)));
    b.op("exp", &d, Signed, |t, x| Ok(t.exp(x)));
    b.op("abs", &d, AwayFromZero, |t, x| Ok(t.abs(x)));
    b.op("clamp_max", &d, AwayFromZero, |t, x| Ok(t.clamp_max(x, 0.0)));
    b.op("relu", &d, AwayFromZero, |t, x| Ok(t.relu(x)));
    b.op("leaky_relu", &d, AwayFromZero, |t, x| Ok(t.leaky_relu(x, 0.01)));
    b.op("sigmoid", &d, Signed, |t, x| Ok(t.sigmoid(x)));
    b.op("gelu", &d, Signed, |t, x| Ok(t.gelu(x)));

    let (w, bias) = (b.other(&[4, 5], 3, Signed), b.other(&[5], 4, Signed));
    let xl = b.other(&[2, 3, 4], 5, Signed);
    let (w2, b2) = (w.clone(), bias.clone());
    b.op("linear (input)", &[2, 3, 4], Signed, move |t, x| t.linear(x, &w2, Some(&b2)));
    let (x2, b2) = (xl.clone(), bias.clone());
    b.op("linear (weight)", &[4, 5], Signed, move |t, w| t.linear(&x2, w, Some(&b2)));
    b.op("linear (bias)", &[5], Signed, move |t, bi| t.linear(&xl, &w, Some(bi)));
    let bm = b.other(&[2, 4, 3], 6, Signed);
    let bmt = b.other(&[2, 5, 4], 7, Signed);
    let am = b.other(&[2, 5, 4], 8, Signed);
    b.op("bmm (lhs)", &[2, 5, 4], Signed, move |t, a| t.bmm(a, &bm, false));
    let am2 = am.clone();
    b.op("bmm (rhs)", &[2, 4, 3], Signed, move |t, x| t.bmm(&am2, x, false));
    b.op("bmm (lhs, transposed rhs)", &[2, 3, 4], Signed, move |t, a| t.bmm(a, &bmt, true));
    b.op("bmm (transposed rhs)", &[2, 3, 4], Signed, move |t, x| t.bmm(&am, x, true));

    b.op("sum", &d, Signed, |t, x| Ok(t.sum(x)));
    b.op("mean", &d, Signed, |t, x| Ok(t.mean(x)));
    b.op("softmax", &d, Signed, |t, x| t.softmax(&t.mul_scalar(x, 3.0)));
    let (g, be) = (b.other(&[4], 9, Positive), b.other(&[4], 10, Signed));
    let (g2, be2) = (g.clone(), be.clone());
    b.op("layernorm (input)", &d, Signed, move |t, x| t.layernorm(x, &g2, &be2, 1e-5));
    let (xn, be2) = (b.other(&d, 11, Signed), be.clone());
    let xn2 = xn.clone();
    b.op("layernorm (gain)", &[4], Positive, move |t, g| t.layernorm(&xn2, g, &be2, 1e-5));
    b.op("layernorm (shift)", &[4], Signed, move |t, be| t.layernorm(&xn, &g, be, 1e-5));
    b.op("l2_normalize", &d, Signed, |t, x| Ok(t.l2_normalize(x, 1e-6)));

    b.op("reshape", &d, Signed, |t, x| t.reshape(x, &[6, 4]));
    b.op("permute", &d, Signed, |t, x| t.permute(x, &[2, 0, 1]));
    b.op("narrow", &d, Signed, |t, x| t.narrow(x, 2, 1, 2));
    b.op("roll", &d, Signed, |t, x| t.roll(x, &[(1, 1), (2, -3)]));
    b.op("index_select0", &[4, 3], Signed, |t, x| t.index_select0(x, &[3, 0, 0, 2]));
    b.op("reflect_pad_br", &[1, 2, 4, 5], Signed, |t, x| t.reflect_pad_br(x, 2, 3));
    b.op("pixel_shuffle", &[1, 8, 3, 2], Signed, |t, x| t.pixel_shuffle(x, 2));

    for (mode, label) in [(Padding::Zero, "zero"), (Padding::Replicate, "replicate"), (Padding::Valid, "valid")] {
        let k = b.other(&[2, 3, 3], 12, Signed);
        b.op(&format!("depthwise_conv2d {label} (input)"), &[2, 2, 5, 6], Signed, move |t, x| {
            t.depthwise_conv2d(x, &k, mode)
        });
        let xi = b.other(&[2, 2, 5, 6], 13, Signed);
        b.op(&format!("depthwise_conv2d {label} (kernel)"), &[2, 3, 3], Signed, move |t, k| {
            t.depthwise_conv2d(&xi, k, mode)
        });
    }
    let (k, kb, xi) = (b.other(&[3, 2, 3, 3], 14, Signed), b.other(&[3], 15, Signed), b.other(&[2, 2, 4, 5], 16, Signed));
    let (k2, kb2) = (k.clone(), kb.clone());
    b.op("conv2d (input)", &[2, 2, 4, 5], Signed, move |t, x| t.conv2d(x, &k2, Some(&kb2)));
    let (xi2, kb2) = (xi.clone(), kb.clone());
    b.op("conv2d (kernel)", &[3, 2, 3, 3], Signed, move |t, k| t.conv2d(&xi2, k, Some(&kb2)));
    b.op("conv2d (bias)", &[3], Signed, move |t, bi| t.conv2d(&xi, &k, Some(bi)));

    let seed = b.seed;
    b.op("dft2", &[2, 4, 8], Signed, move |t, x| {
        let (re, im) = t.dft2(x)?;
        let pr = project(t, &re, seed ^ 1)?;
        let pi = project(t, &im, seed ^ 2)?;
        t.add(&pr, &pi)
    });
}

fn loss_cases(b: &mut Builder) {
    let d = [2, 3, 16, 16];
    let hr = Var::constant(random(&d, b.seed ^ 77, Dist::Positive).map(|v| v - 0.5));
    let terms: [(&str, fn(&Tape<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>>); 3] =
        [("l1", l1_loss), ("ssim", ssim_loss), ("edge", edge_loss)];
    for (name, f) in terms {
        let hr = hr.clone();
        let seed = b.seed;
        // sr − hr = 0.1 + 0.05·(i + j) + small noise: the residual and its
        // finite differences stay clear of the |·| kinks.
        let noise = random(&d, seed.wrapping_add(1000), Dist::Signed);
        let input = Tensor::from_fn(&d, |k| {
            let (i, j) = ((k / 16) % 16, k % 16);
            hr.value().data()[k] + 0.1 + 0.05 * (i + j) as f64 + 0.01 * noise.data()[k]
        });
        b.push(format!("{name} loss"), input, OP_TOL, move |t, sr| f(t, sr, &hr));
    }
    for (label, opts) in [
        ("freq loss", FreqOptions::default()),
        ("freq loss (amplitude)", FreqOptions { amplitude: true, ..Default::default() }),
    ] {
        let hr = hr.clone();
        let input = random(&d, b.seed.wrapping_add(2000), Dist::Signed).zip_map(hr.value(), |a, h| h + 0.3 * a);
        b.push(label, input, OP_TOL, move |t, sr| freq_loss_with(t, sr, &hr, opts));
    }
    let odd = [1, 2, 12, 10];
    let hr_odd = Var::constant(random(&odd, b.seed ^ 78, Dist::Signed));
    let input = random(&odd, b.seed.wrapping_add(3000), Dist::Signed);
    let opts = FreqOptions { pad_to_pow2: true, ..Default::default() };
    b.push("freq loss (padded)", input, OP_TOL, move |t, sr| freq_loss_with(t, sr, &hr_odd, opts));
}

const SUB_DIM: usize = 8;
const SUB_H: usize = 4;
const SUB_W: usize = 6;

fn perturbed<B: Bind<f64> + crate::params::ParamTree<Tensor<f64>>>(mut tree: B, seed: u64) -> B {
    // Break init symmetries (zero biases, uniform blur) so every path carries gradient.
    let mut rng = PortableRng::new(seed ^ 0x5eed);
    tree.visit_mut("", &mut |_, p| {
        for v in p.data_mut() {
            *v += 0.1 * rng.uniform_range(-1.0, 1.0);
        }
    });
    tree
}

fn ffn_cases(b: &mut Builder) -> Result<()> {
    let seed = b.seed;
    let x = random(&[2, SUB_H * SUB_W, SUB_DIM], seed ^ 21, Dist::Signed);
    let sfg = perturbed(SfgFfn::<Tensor<f64>>::init(SUB_DIM, 2.0, 3, 4, seed)?, seed);
    b.tree("sfg_ffn", sfg, x.clone(), OP_TOL, 6, |pass, p, v| {
        crate::sfg_ffn::sfg_ffn_forward(pass, v, p, SUB_H, SUB_W)
    });
    let mlp = perturbed(Mlp::<Tensor<f64>>::init(SUB_DIM, 2.0, seed)?, seed);
    b.tree("mlp", mlp, x, OP_TOL, 6, |pass, p, v| crate::sfg_ffn::mlp_forward(pass, v, p));
    Ok(())
}

fn swin_cases(b: &mut Builder) -> Result<()> {
    let seed = b.seed;
    let (h, w, win) = (8, 8, 4);
    let x = random(&[1, h * w, SUB_DIM], seed ^ 31, Dist::Signed);
    let variants = [
        ("swin block (table, sfg, shifted)", PositionBiasKind::Table, true, win / 2),
        ("swin block (cpb, mlp, shifted)", PositionBiasKind::Continuous { hidden: 16 }, false, win / 2),
        ("swin block (table, sfg, unshifted)", PositionBiasKind::Table, true, 0),
    ];
    for (label, kind, sfg, shift) in variants {
        let mut init = crate::params::Init::new(seed);
        let attn = Attention::init(SUB_DIM, 2, win, kind, &mut init)?;
        let ffn = if sfg {
            Ffn::Sfg(SfgFfn::init_with(SUB_DIM, 2.0, 3, 4, &mut init)?)
        } else {
            Ffn::Mlp(Mlp::init_with(SUB_DIM, 2.0, &mut init)?)
        };
        let block = perturbed(SwinBlock::new(attn, ffn, shift, 0.0)?, seed);
        b.tree(label, block, x.clone(), OP_TOL, 4, move |pass, p, v| swin_block_forward(pass, v, p, h, w));
    }
    Ok(())
}

fn model_cases(b: &mut Builder) -> Result<()> {
    let seed = b.seed;
    for ffn in [FfnKind::Sfg, FfnKind::Baseline] {
        let config = ModelConfig { seed, ..ModelConfig::tiny(ffn) };
        let model = build_model::<f64>(&config)?;
        let net: Network<Tensor<f64>> = perturbed(model.net, seed);
        let lr = random(&[1, config.bands, config.window, config.window], seed ^ 41, Dist::Positive);
        let label = format!("tiny model ({})", ffn.name());
        b.tree(&label, net, lr, MODEL_TOL, 2, move |pass, net, v| forward(pass, &config, net, v));
    }
    Ok(())
}

fn build_cases(scope: Scope, seed: u64) -> Result<Vec<Case>> {
    let mut b = Builder { seed, cases: Vec::new() };
    match scope {
        Scope::Ops => op_cases(&mut b),
        Scope::Losses => loss_cases(&mut b),
        Scope::SfgFfn => ffn_cases(&mut b)?,
        Scope::Swin => swin_cases(&mut b)?,
        Scope::Model => model_cases(&mut b)?,
    }
    Ok(b.cases)
}

/// Runs every case of `scopes` for each seed; `on_row` sees results as they land.
pub fn gradient_suite(
    scopes: &[Scope],
    seeds: &[u64],
    opts: &SuiteOptions,
    on_row: &mut dyn FnMut(&CheckRow),
) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &scope in scopes {
        for &seed in seeds {
            for case in build_cases(scope, seed)? {
                let gopts = GradCheckOptions {
                    tol: case.tol,
                    max_components: match (case.max_components, opts.max_components) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    },
                    seed,
                    fault: opts.fault.clone(),
                    ..Default::default()
                };
                let f = case.f.clone();
                let rep = grad_check_with(move |t, v| f(t, v), &case.input, &gopts)?;
                let row = CheckRow {
                    scope,
                    name: case.name,
                    seed,
                    max_rel_err: rep.max_rel_err,
                    tol: case.tol,
                    checked: rep.checked,
                    pass: rep.pass,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
