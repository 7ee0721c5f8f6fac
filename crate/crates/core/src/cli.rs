//! The `sfgsr` command line.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 some inputs failed,
//! 3 verification failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{format_f64, KvMap};
use crate::degrade::{degrade_indexed, extract_patch_pairs, synthetic_pairs, DegradationConfig, PatchPair};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{build_model, estimate_flops, param_breakdown, FfnKind, Model, ModelConfig};
use crate::numerics::ops::bicubic_resize;
use crate::numerics::Tensor;
use crate::objective::{mae, psnr, ssim_value};
use crate::trainer::{
    format_ablation, parse_terms, run_ablation, HistoryRow, TrainConfig, Trainer, HISTORY_HEADER,
};
use crate::verify::{gradient_suite, Scope, SuiteOptions, DEFAULT_SEEDS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sfgsr", version, about = "Swin super-resolution with spatial-frequency gated feed-forward layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate LR images from a directory of HR images.
    Degrade(DegradeArgs),
    /// Upscale every image in a directory with a checkpoint.
    Sr(SrArgs),
    /// PSNR / SSIM / MAE between paired files of two directories.
    Metrics(MetricsArgs),
    /// Parameter count and analytic FLOPs.
    Report(ReportArgs),
    /// Central-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Train a model on patches.
    Train(TrainArgs),
    /// Run the five-row FFN / loss-term ablation grid at tiny scale.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// key = value file with blur_sigma, blur_kernel_size, scale, noise_sigma, seed
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    blur_kernel: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    sr: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Read the model config embedded in a checkpoint.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    checkpoint: Option<PathBuf>,
    /// key = value model config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// full or tiny
    #[arg(long)]
    preset: Option<String>,
    /// sfg or baseline; overrides the source
    #[arg(long)]
    ffn: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Input side length for the FLOP estimate.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// all, or a comma list of ops, losses, sfg_ffn, swin, model
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = DEFAULT_SEEDS.len())]
    seeds: usize,
    /// Probe at most this many components per tensor.
    #[arg(long)]
    max_probes: Option<usize>,
    /// Corrupt the backward rule of this op (harness self-test).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    output: PathBuf,
    /// key = value model config; defaults to the tiny preset
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// full or tiny
    #[arg(long, conflicts_with = "model_config")]
    preset: Option<String>,
    /// key = value training config
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long, conflicts_with_all = ["model_config", "preset"])]
    resume: Option<PathBuf>,
    /// Directory of HR images; synthetic scenes when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ffn: Option<String>,
    /// Comma list of l1, ssim, edge, freq.
    #[arg(long)]
    loss_terms: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// LR patch side length.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Number of training patches.
    #[arg(long, default_value_t = 4)]
    patches: usize,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long, default_value_t = 4)]
    patches: usize,
    #[arg(long, default_value_t = 2)]
    eval_patches: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::Sr(a) => cmd_sr(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Report(a) => cmd_report(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Init(a) => cmd_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablation(a) => cmd_ablation(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => EXIT_PARTIAL,
                _ => EXIT_USAGE,
            }
        }
    }
}

/// `SFG_THREADS` caps worker threads; 0 or unset means one per core.
fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("SFG_THREADS") {
        Ok(s) => s.trim().parse::<usize>().map_err(|_| Error::Usage(format!("SFG_THREADS={s:?} is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Usage(e.to_string()))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Usage(format!("cannot create {}: {e}", path.display())))
}

fn input_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!("{} is not a directory", dir.display())));
    }
    io::list_images(dir)
}

fn read_kv(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    KvMap::parse(&text)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn report_failures(failures: &[(PathBuf, Error)]) -> i32 {
    for (p, e) in failures {
        eprintln!("failed: {}: {e}", p.display());
    }
    if failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn cmd_degrade(a: DegradeArgs) -> Result<i32> {
    let mut kv = match &a.config {
        Some(p) => read_kv(p)?,
        None => KvMap::new(),
    };
    let overrides: [(&str, Option<String>); 5] = [
        ("blur_sigma", a.blur_sigma.map(format_f64)),
        ("blur_kernel_size", a.blur_kernel.map(|v| v.to_string())),
        ("scale", a.scale.map(|v| v.to_string())),
        ("noise_sigma", a.noise_sigma.map(format_f64)),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    let cfg = DegradationConfig::from_kv(&kv)?;
    let files = input_images(&a.input)?;
    ensure_dir(&a.output)?;
    let failures: Vec<(PathBuf, Error)> = files
        .par_iter()
        .enumerate()
        .filter_map(|(i, path)| degrade_one(path, i as u64, &cfg, &a.output).err().map(|e| (path.clone(), e)))
        .collect();
    println!("degraded {} of {} images", files.len() - failures.len(), files.len());
    Ok(report_failures(&failures))
}

fn degrade_one(path: &Path, index: u64, cfg: &DegradationConfig, out_dir: &Path) -> Result<()> {
    let hr: Tensor<f64> = io::read_image(path)?;
    let lr = degrade_indexed(&hr, cfg, index)?;
    let out = out_dir.join(file_name(path));
    io::write_image(&out, &lr)?;
    let mut meta = cfg.to_kv();
    meta.set("index", index);
    meta.set("source", file_name(path));
    meta.set("hr_dims", crate::config::format_list(hr.dims()));
    meta.set("lr_dims", crate::config::format_list(lr.dims()));
    io::atomic_write(&out.with_extension("meta"), meta.to_text().as_bytes())
}

fn cmd_sr(a: SrArgs) -> Result<i32> {
    if !a.checkpoint.is_file() {
        return Err(Error::Usage(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let model: Model<f32> = io::load_model(&a.checkpoint)?;
    let files = input_images(&a.input)?;
    ensure_dir(&a.output)?;
    let loaded: Vec<(PathBuf, Result<Tensor<f32>>)> =
        files.par_iter().map(|p| (p.clone(), io::read_image::<f32>(p))).collect();
    let bands = model.config.bands;
    let mut failures = Vec::new();
    let mut inputs = Vec::new();
    for (p, r) in loaded {
        match r {
            Ok(img) if img.dims()[0] != bands => {
                return Err(Error::Config(format!(
                    "{} has {} bands but the checkpoint expects {bands}",
                    p.display(),
                    img.dims()[0]
                )))
            }
            Ok(img) => inputs.push((p, img)),
            Err(e) => failures.push((p, e)),
        }
    }
    let results: Vec<(PathBuf, Result<()>)> = inputs
        .par_iter()
        .map(|(p, img)| {
            let r = (|| {
                let d = img.dims();
                let batch = img.reshape(&[1, d[0], d[1], d[2]])?;
                let sr = model.infer(&batch)?;
                let sd = sr.dims().to_vec();
                let sr = sr.reshape(&sd[1..])?.map(|v| v.clamp(0.0, 1.0));
                io::write_image(&a.output.join(file_name(p)), &sr)
            })();
            (p.clone(), r)
        })
        .collect();
    failures.extend(results.into_iter().filter_map(|(p, r)| r.err().map(|e| (p, e))));
    println!("upscaled {} of {} images", files.len() - failures.len(), files.len());
    Ok(report_failures(&failures))
}

#[derive(Clone, Debug)]
struct MetricRow {
    name: String,
    psnr: f64,
    ssim: f64,
    mae: f64,
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn cmd_metrics(a: MetricsArgs) -> Result<i32> {
    let sr_files = input_images(&a.sr)?;
    let ref_files = input_images(&a.reference)?;
    let sr_names: BTreeSet<String> = sr_files.iter().map(|p| file_name(p)).collect();
    let ref_names: BTreeSet<String> = ref_files.iter().map(|p| file_name(p)).collect();
    let mut failures: Vec<(PathBuf, Error)> = Vec::new();
    for n in sr_names.symmetric_difference(&ref_names) {
        let side = if sr_names.contains(n) { &a.sr } else { &a.reference };
        failures.push((side.join(n), Error::Usage("no file with the same name on the other side".into())));
    }
    let paired: Vec<&String> = sr_names.intersection(&ref_names).collect();
    let results: Vec<(String, Result<MetricRow>)> = paired
        .par_iter()
        .map(|n| {
            let r = (|| {
                let sr: Tensor<f64> = io::read_image(&a.sr.join(n))?;
                let hr: Tensor<f64> = io::read_image(&a.reference.join(n))?;
                Ok(MetricRow { name: (*n).clone(), psnr: psnr(&sr, &hr, 1.0)?, ssim: ssim_value(&sr, &hr)?, mae: mae(&sr, &hr)? })
            })();
            ((*n).clone(), r)
        })
        .collect();
    let mut rows = Vec::new();
    for (n, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((a.sr.join(n), e)),
        }
    }
    if !rows.is_empty() {
        let k = rows.len() as f64;
        rows.push(MetricRow {
            name: "mean".into(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / k,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / k,
            mae: rows.iter().map(|r| r.mae).sum::<f64>() / k,
        });
    }
    println!("{:<32} {:>10} {:>8} {:>10}", "image", "PSNR", "SSIM", "MAE");
    for r in &rows {
        println!("{:<32} {:>10} {:>8.4} {:>10.6}", r.name, fmt_psnr(r.psnr), r.ssim, r.mae);
    }
    if let Some(path) = &a.csv {
        let mut s = String::from("image,psnr,ssim,mae\n");
        for r in &rows {
            s += &format!("{},{},{},{}\n", r.name, format_f64(r.psnr), format_f64(r.ssim), format_f64(r.mae));
        }
        io::atomic_write(path, s.as_bytes())?;
    }
    Ok(report_failures(&failures))
}

fn preset(name: &str, ffn: FfnKind) -> Result<ModelConfig> {
    match name {
        "full" => Ok(ModelConfig::full(ffn)),
        "tiny" => Ok(ModelConfig::tiny(ffn)),
        other => Err(Error::Usage(format!("unknown preset {other:?}; expected full or tiny"))),
    }
}

fn resolve_model(src: &ModelSource, default_preset: &str) -> Result<ModelConfig> {
    let ffn = src.ffn.as_deref().map(FfnKind::parse).transpose()?;
    let mut cfg = if let Some(p) = &src.checkpoint {
        io::load_checkpoint_as::<f32>(p).map(|ck| ck.header).and_then(|h| {
            let mut kv = KvMap::new();
            for k in h.keys().filter(|k| !k.starts_with("train.")) {
                kv.set(k, h.raw(k).unwrap());
            }
            ModelConfig::from_kv(&kv)
        })?
    } else if let Some(p) = &src.config {
        ModelConfig::from_kv(&read_kv(p)?)?
    } else {
        preset(src.preset.as_deref().unwrap_or(default_preset), ffn.unwrap_or(FfnKind::Sfg))?
    };
    if let Some(f) = ffn {
        cfg.ffn = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let cfg = resolve_model(&a.source, "full")?;
    let t0 = std::time::Instant::now();
    let model = build_model::<f32>(&cfg)?;
    let n = model.count_params();
    println!("ffn: {}", cfg.ffn.name());
    println!("parameters: {n} ({:.2}M)", n as f64 / 1e6);
    for (name, count) in param_breakdown(&model) {
        println!("  {name:<22} {count:>12}");
    }
    let flops = estimate_flops(&cfg, a.size, a.size);
    println!(
        "FLOPs for a {}×{}×{} input (padded to {}×{}): {:.3}G",
        flops.input.0,
        flops.input.1,
        flops.input.2,
        flops.padded.0,
        flops.padded.1,
        flops.total() / 1e9
    );
    for (name, v) in &flops.breakdown {
        println!("  {name:<22} {:>12.4}G", v / 1e9);
    }
    println!("built in {:.2?}", t0.elapsed());
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let scopes = Scope::parse_list(&a.scope)?;
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be ≥ 1".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let opts = SuiteOptions { fault: a.fault.clone(), max_components: a.max_probes };
    let rows = gradient_suite(&scopes, &seeds, &opts, &mut |r| println!("{r}"))?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    for sc in &scopes {
        let worst = rows.iter().filter(|r| r.scope == *sc).map(|r| r.max_rel_err).fold(0.0, f64::max);
        println!("{:<8} max_rel_err {worst:.3e}", sc.name());
    }
    println!("{} checks, {failed} failed", rows.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

fn cmd_init(a: InitArgs) -> Result<i32> {
    let cfg = resolve_model(&a.source, "tiny")?;
    let model = build_model::<f32>(&cfg)?;
    io::save_model(&model, &a.output)?;
    println!("wrote {} ({} parameters)", a.output.display(), model.count_params());
    Ok(EXIT_OK)
}

fn training_data(dir: Option<&Path>, cfg: &ModelConfig, patch: usize, count: usize, seed: u64) -> Result<Vec<PatchPair<f32>>> {
    let dcfg = DegradationConfig { scale: cfg.scale, seed, ..Default::default() };
    let Some(dir) = dir else {
        return synthetic_pairs(count, cfg.bands, patch, &dcfg);
    };
    let files = input_images(dir)?;
    if files.is_empty() {
        return Err(Error::Usage(format!("no images in {}", dir.display())));
    }
    let mut pairs = Vec::new();
    for (i, p) in files.iter().enumerate() {
        let hr: Tensor<f32> = io::read_image(p)?;
        if hr.dims()[0] != cfg.bands {
            return Err(Error::Config(format!("{} has {} bands, model expects {}", p.display(), hr.dims()[0], cfg.bands)));
        }
        let (h, w) = (hr.dims()[1] / cfg.scale * cfg.scale, hr.dims()[2] / cfg.scale * cfg.scale);
        let hr = crop_to(&hr, h, w);
        let lr = degrade_indexed(&hr, &dcfg, i as u64)?;
        let per = count.div_ceil(files.len());
        pairs.extend(extract_patch_pairs(&hr, &lr, patch, cfg.scale, per, seed ^ i as u64)?);
    }
    pairs.truncate(count);
    Ok(pairs)
}

fn crop_to(img: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let d = img.dims();
    Tensor::from_fn(&[d[0], h, w], |i| {
        let (b, r) = (i / (h * w), i % (h * w));
        img.at(&[b, r / w, r % w])
    })
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    ensure_dir(&a.output)?;
    let mut trainer = if let Some(path) = &a.resume {
        io::trainer_from_checkpoint(&io::load_checkpoint_as::<f32>(path)?)?
    } else {
        let src = ModelSource { checkpoint: None, config: a.model_config.clone(), preset: a.preset.clone(), ffn: a.ffn.clone() };
        let mcfg = resolve_model(&src, "tiny")?;
        let tcfg = match &a.train_config {
            Some(p) => TrainConfig::from_kv(&read_kv(p)?)?,
            None => TrainConfig { batch_size: 4, total_steps: 200, lr0: 1e-3, lr_min: 1e-3, ..Default::default() },
        };
        Trainer::new(build_model(&mcfg)?, tcfg)?
    };
    let tc = &mut trainer.config;
    if let Some(t) = &a.loss_terms {
        tc.loss.enabled = crate::objective::LossWeights::only(&parse_terms(t)?).enabled;
    }
    tc.total_steps = a.steps.unwrap_or(tc.total_steps);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.lr0 = a.lr.unwrap_or(tc.lr0);
    tc.lr_min = a.lr_min.unwrap_or(tc.lr_min.min(tc.lr0));
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.checkpoint_every = a.checkpoint_every.unwrap_or(tc.checkpoint_every);
    tc.validate()?;
    if a.resume.is_some() && a.ffn.is_some() {
        return Err(Error::Usage("--ffn cannot change a resumed model".into()));
    }

    let data = training_data(a.data.as_deref(), &trainer.model.config, a.patch, a.patches, trainer.config.seed)?;
    println!(
        "training {} ({} parameters) on {} patches, steps {}..{}",
        trainer.model.config.ffn.name(),
        trainer.model.count_params(),
        data.len(),
        trainer.step,
        trainer.config.total_steps
    );
    let out = a.output.clone();
    let mut csv = format!("{HISTORY_HEADER}\n");
    let history = trainer.run(&data, &mut |tr, row: &HistoryRow| {
        let every = tr.config.checkpoint_every;
        if every > 0 && tr.step % every == 0 {
            io::trainer_checkpoint(tr).save(&out.join(format!("checkpoint_{:06}.sfgc", tr.step)))?;
        }
        if row.step % 10 == 0 || tr.is_done() {
            println!("step {:>6} lr {:.3e} loss {:.6}", row.step, row.lr, row.loss.total);
        }
        Ok(())
    })?;
    for r in &history {
        csv += &r.csv();
        csv.push('\n');
    }
    io::atomic_write(&a.output.join("history.csv"), csv.as_bytes())?;
    io::trainer_checkpoint(&trainer).save(&a.output.join("model.sfgc"))?;
    let eval = crate::trainer::evaluate(&trainer.model, &data)?;
    let bic = bicubic_psnr(&data, trainer.model.config.scale)?;
    println!(
        "final PSNR {} dB (bicubic {} dB), SSIM {:.4}, MAE {:.6}",
        fmt_psnr(eval.psnr),
        fmt_psnr(bic),
        eval.ssim,
        eval.mae
    );
    Ok(EXIT_OK)
}

/// Mean PSNR of bicubic-upsampled LR against HR.
pub fn bicubic_psnr(data: &[PatchPair<f32>], scale: usize) -> Result<f64> {
    let mut acc = 0.0;
    for p in data {
        acc += psnr(&bicubic_resize(&p.lr, scale, 1)?, &p.hr, 1.0)?;
    }
    Ok(acc / data.len().max(1) as f64)
}

fn cmd_ablation(a: AblationArgs) -> Result<i32> {
    let base = ModelConfig { seed: a.seed, ..ModelConfig::tiny(FfnKind::Sfg) };
    let dcfg = DegradationConfig { seed: a.seed, ..Default::default() };
    let data = synthetic_pairs::<f32>(a.patches, base.bands, a.patch, &dcfg)?;
    let eval_cfg = DegradationConfig { seed: a.seed.wrapping_add(1000), ..dcfg };
    let eval = synthetic_pairs::<f32>(a.eval_patches, base.bands, a.patch, &eval_cfg)?;
    let tc = TrainConfig {
        batch_size: a.patches.min(4),
        total_steps: a.steps,
        lr0: a.lr,
        lr_min: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let rows = run_ablation(&base, &tc, &data, &eval)?;
    let table = format_ablation(&rows);
    print!("{table}");
    if let Some(dir) = &a.output {
        ensure_dir(dir)?;
        let mut csv = String::from("row,final_loss,psnr,ssim,mae\n");
        for r in &rows {
            csv += &format!(
                "{},{},{},{},{}\n",
                r.label,
                format_f64(r.final_loss),
                format_f64(r.eval.psnr),
                format_f64(r.eval.ssim),
                format_f64(r.eval.mae)
            );
        }
        io::atomic_write(&dir.join("ablation.csv"), csv.as_bytes())?;
        io::atomic_write(&dir.join("ablation.txt"), table.as_bytes())?;
    }
    Ok(EXIT_OK)
}
