use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::json;

use pxsub::cascade::{
    build_refiners, run_with, train_cascade, train_soft_constraint, CascadeConfig, Sample, StageTrace,
};
use pxsub::degrade::degrade as degrade_image;
use pxsub::formation::{constraint_residual, substitution_residual, FormationOp, ResidualReport};
use pxsub::image::{load_image, save_image};
use pxsub::metrics::{evaluate_with, format_db, serialize_db, MetricsReport};
use pxsub::neural::write_weights;
use pxsub::refine::{RefinerKind, RefinerSpec};

use crate::config::{weights_file_name, LossKind, RunConfig, StageEntry};
use crate::files::{by_stem, create_dir, is_image, list_images, pair_up, require, stem, write_text};
use crate::{CmdResult, Common, Failure};

fn parsed<T: std::str::FromStr<Err = pxsub::Error>>(v: &Option<String>) -> Result<Option<T>, Failure> {
    v.as_deref().map(str::parse).transpose().map_err(Failure::from)
}

fn set_stage_count(cfg: &mut RunConfig, t: Option<usize>) -> Result<(), Failure> {
    match t {
        Some(0) => Err(Failure::usage("--stages must be at least 1")),
        Some(t) => {
            cfg.stages.resize(t, StageEntry::default());
            Ok(())
        }
        None => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

// ---------------------------------------------------------------- degrade

#[derive(Args)]
pub struct DegradeArgs {
    #[command(flatten)]
    pub common: Common,
    /// HR image or directory of HR images.
    #[arg(long, short = 'i')]
    input: Option<PathBuf>,
    /// Directory for the LR images and manifest.json.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// gaussian-decimate or bicubic.
    #[arg(long)]
    mode: Option<String>,
    /// Gaussian blur sigma in HR pixels (default 0.5 * scale).
    #[arg(long)]
    sigma: Option<f64>,
    /// Gaussian noise standard deviation on the [0, 1] scale.
    #[arg(long)]
    noise: Option<f64>,
    /// Noise seed; image i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

impl DegradeArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> CmdResult {
        cfg.io_input = self.input.clone().or(cfg.io_input.take());
        cfg.io_output = self.output.clone().or(cfg.io_output.take());
        if let Some(m) = parsed(&self.mode)? {
            cfg.degrade_mode = m;
        }
        cfg.degrade_sigma = self.sigma.or(cfg.degrade_sigma);
        cfg.degrade_noise = self.noise.unwrap_or(cfg.degrade_noise);
        cfg.degrade_seed = self.seed.unwrap_or(cfg.degrade_seed);
        Ok(())
    }
}

pub fn degrade(cfg: &RunConfig) -> CmdResult {
    let input = require(&cfg.io_input, "--input")?;
    let output = require(&cfg.io_output, "--output")?;
    let spec = cfg.degrade_spec()?;
    let s = spec.scale.get();
    let sources = list_images(input)?;
    create_dir(output)?;
    let mut entries = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let hr = load_image(src)?;
        // Each image gets its own noise stream, fixed by its sorted position.
        let seed = cfg.degrade_seed.wrapping_add(i as u64);
        let lr = degrade_image(&hr, &spec, seed)?;
        let raw_stem = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let file_name = format!("{raw_stem}_x{s}.png");
        let dst = output.join(&file_name);
        save_image(&lr, &dst)?;
        println!("{} -> {} ({}x{})", src.display(), dst.display(), lr.width(), lr.height());
        entries.push(json!({
            "source": src.display().to_string(),
            // Relative to the manifest, so identical runs give identical files.
            "output": file_name,
            "seed": seed,
            "hr_size": [hr.width(), hr.height()],
            "lr_size": [lr.width(), lr.height()],
        }));
    }
    let manifest = json!({
        "spec": spec,
        "kernel_sigma": spec.effective_sigma(),
        "kernel_size": spec.effective_kernel_size(),
        "seed": cfg.degrade_seed,
        "images": entries,
    });
    write_json(&output.join("manifest.json"), &manifest)
}

// ---------------------------------------------------------------- sr

#[derive(Args)]
pub struct SrArgs {
    #[command(flatten)]
    pub common: Common,
    /// LR image or directory of LR images.
    #[arg(long, short = 'i')]
    input: Option<PathBuf>,
    /// Output image (single input) or directory.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Stage count T.
    #[arg(long)]
    stages: Option<usize>,
    /// Refiner for every stage: bicubic, ibp, gradprior or toynet.
    #[arg(long)]
    refiner: Option<String>,
    /// Directory holding stage<i>.pxw weight files.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write per-stage images and metrics.json under this directory.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Report the substitution residual of every stage.
    #[arg(long)]
    check: bool,
    /// Ground-truth directory for per-stage metrics in the trace.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Formation model the LR images came from.
    #[arg(long)]
    mode: Option<String>,
}

impl SrArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> CmdResult {
        cfg.io_input = self.input.clone().or(cfg.io_input.take());
        cfg.io_output = self.output.clone().or(cfg.io_output.take());
        cfg.io_weights = self.weights.clone().or(cfg.io_weights.take());
        cfg.io_trace = self.trace.clone().or(cfg.io_trace.take());
        cfg.io_gt = self.gt.clone().or(cfg.io_gt.take());
        if let Some(m) = parsed(&self.mode)? {
            cfg.degrade_mode = m;
        }
        set_stage_count(cfg, self.stages)?;
        if let Some(kind) = parsed::<RefinerKind>(&self.refiner)? {
            cfg.stages.iter_mut().for_each(|st| st.kind = kind);
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct StageJson<'a> {
    stage: usize,
    refiner: &'a str,
    guard_tripped: bool,
    substitution: pxsub::formation::SubstitutionRecord,
    substituted_residual: ResidualReport,
    estimate_residual: ResidualReport,
    metrics: Option<MetricsReport>,
}

fn trace_json<'a>(name: &str, trace: &'a StageTrace) -> serde_json::Value {
    let stages: Vec<StageJson<'a>> = trace
        .stages
        .iter()
        .map(|st| StageJson {
            stage: st.stage,
            refiner: st.refiner,
            guard_tripped: st.guard_tripped,
            substitution: st.substitution,
            substituted_residual: st.substituted_residual,
            estimate_residual: st.estimate_residual,
            metrics: st.metrics,
        })
        .collect();
    json!({ "image": name, "stages": stages })
}

pub fn sr(cfg: &RunConfig, args: &SrArgs) -> CmdResult {
    let input = require(&cfg.io_input, "--input")?;
    let output = require(&cfg.io_output, "--output")?;
    let cascade = cfg.cascade()?;
    let s = cascade.scale().get();
    let refiners = build_refiners(&cascade)?;
    let sources = list_images(input)?;
    let single_file = is_image(output);
    if single_file && sources.len() != 1 {
        return Err(Failure::usage("an output file name needs exactly one input image"));
    }
    if !single_file {
        create_dir(output)?;
    }
    let gt = cfg.io_gt.as_deref().map(|d| by_stem(d, s)).transpose()?;
    let mut tripped = Vec::new();
    for src in &sources {
        let name = stem(src, s);
        let lr = load_image(src)?;
        let (out, mut trace) = run_with(&lr, &cascade, &refiners)?;
        let dst = if single_file { output.to_path_buf() } else { output.join(format!("{name}.png")) };
        save_image(&out, &dst)?;
        println!("{} -> {} ({}x{}, T={})", src.display(), dst.display(), out.width(), out.height(), trace.len());
        if let Some(path) = gt.as_ref().and_then(|m| m.get(&name)) {
            trace.attach_metrics(&load_image(path)?, cascade.scale(), cfg.eval_protocol)?;
        }
        if args.check {
            for st in &trace.stages {
                println!(
                    "  stage {}: substituted residual mse {:e} ({}/{} sites){}",
                    st.stage,
                    st.substituted_residual.mse,
                    st.substitution.substituted_count,
                    st.substitution.expected_count,
                    if st.substituted_residual.mse == 0.0 { " exact" } else { "" }
                );
            }
        }
        if let Some(dir) = &cfg.io_trace {
            let dir = dir.join(&name);
            create_dir(&dir)?;
            for st in &trace.stages {
                save_image(&st.estimate, dir.join(format!("stage{}_estimate.png", st.stage)))?;
                save_image(&st.blurred, dir.join(format!("stage{}_blurred.png", st.stage)))?;
                save_image(&st.substituted, dir.join(format!("stage{}_substituted.png", st.stage)))?;
            }
            write_json(&dir.join("metrics.json"), &trace_json(&name, &trace))?;
        }
        if trace.guard_tripped() {
            tripped.push(name);
        }
    }
    if !tripped.is_empty() {
        return Err(Failure::numeric(format!("divergence guard tripped for {}", tripped.join(", "))));
    }
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of LR inputs (`<stem>_x<s>` names are accepted).
    #[arg(long)]
    lr_dir: Option<PathBuf>,
    /// Directory of HR targets with matching stems.
    #[arg(long)]
    hr_dir: Option<PathBuf>,
    /// Directory for weights, log and summary.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Passes over the training pairs, one pair per step.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Seed for initialization and crop order.
    #[arg(long)]
    seed: Option<u64>,
    /// hard (stage-wise with substitution) or soft (single stage, L1 plus
    /// formation loss).
    #[arg(long)]
    loss: Option<String>,
    /// Formation-loss weight for --loss soft.
    #[arg(long)]
    lambda: Option<f64>,
    /// Stage count T.
    #[arg(long)]
    stages: Option<usize>,
    /// LR crop side; images smaller than this are used whole.
    #[arg(long)]
    patch: Option<usize>,
    /// Network feature channels.
    #[arg(long)]
    features: Option<usize>,
    /// Residual blocks per network.
    #[arg(long)]
    blocks: Option<usize>,
    /// Formation model: gaussian-decimate or bicubic.
    #[arg(long)]
    mode: Option<String>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> CmdResult {
        cfg.io_lr = self.lr_dir.clone().or(cfg.io_lr.take());
        cfg.io_gt = self.hr_dir.clone().or(cfg.io_gt.take());
        cfg.io_output = self.output.clone().or(cfg.io_output.take());
        cfg.train_epochs = self.epochs.unwrap_or(cfg.train_epochs);
        cfg.train_lr = self.learning_rate.unwrap_or(cfg.train_lr);
        cfg.train_seed = self.seed.unwrap_or(cfg.train_seed);
        if let Some(l) = parsed(&self.loss)? {
            cfg.train_loss = l;
        }
        cfg.train_lambda = self.lambda.unwrap_or(cfg.train_lambda);
        cfg.train_patch = self.patch.unwrap_or(cfg.train_patch);
        cfg.net_features = self.features.unwrap_or(cfg.net_features);
        cfg.net_blocks = self.blocks.unwrap_or(cfg.net_blocks);
        if let Some(m) = parsed(&self.mode)? {
            cfg.degrade_mode = m;
        }
        set_stage_count(cfg, self.stages)
    }
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<(String, Sample)>, Failure> {
    let s = cfg.scale()?.get();
    let lr = by_stem(require(&cfg.io_lr, "--lr-dir")?, s)?;
    let hr = by_stem(require(&cfg.io_gt, "--hr-dir")?, s)?;
    let pairs = pair_up(&lr, &hr, ("LR", "HR"));
    if pairs.is_empty() {
        return Err(Failure::data("no LR/HR pairs with matching stems"));
    }
    pairs
        .into_iter()
        .map(|(name, l, h)| Ok((name, Sample { lr: load_image(&l)?, hr: load_image(&h)? })))
        .collect()
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let output = require(&cfg.io_output, "--output")?.to_path_buf();
    let train = cfg.train()?;
    let named = load_samples(cfg)?;
    let samples: Vec<Sample> = named.into_iter().map(|(_, s)| s).collect();
    let stage_count = match cfg.train_loss {
        LossKind::Hard => cfg.stages.len(),
        LossKind::Soft => {
            if cfg.stages.len() > 1 {
                eprintln!("note: soft-constraint training is single-stage; training stage 1 only");
            }
            1
        }
    };
    // Every trained stage is a network, whatever the run-time refiners are.
    let cascade = CascadeConfig {
        degrade: cfg.degrade_spec()?,
        stages: vec![RefinerSpec::toynet(None); stage_count],
        shared_weights: cfg.shared_weights,
    };
    let outcome = match cfg.train_loss {
        LossKind::Hard => train_cascade(&samples, &cascade, &train)?,
        LossKind::Soft => train_soft_constraint(&samples, &cascade, cfg.train_lambda, &train)?,
    };
    create_dir(&output)?;
    for (i, net) in outcome.nets.iter().enumerate() {
        write_weights(net, output.join(weights_file_name(i + 1)))?;
    }
    let mut csv = String::from("stage,step,loss\n");
    for e in &outcome.log {
        let _ = writeln!(csv, "{},{},{}", e.stage, e.step, e.loss);
    }
    write_text(&output.join("train_log.csv"), &csv)?;
    write_text(&output.join("config.txt"), &cfg.dump())?;
    for sm in &outcome.summaries {
        println!(
            "stage {}: {} steps, loss {:.6} -> {:.6}{}",
            sm.stage,
            sm.steps,
            sm.initial_loss,
            sm.final_loss,
            if sm.trained { "" } else { " (shared)" }
        );
    }
    let summary = json!({
        "loss": cfg.train_loss.as_str(),
        "lambda": if cfg.train_loss == LossKind::Soft { Some(cfg.train_lambda) } else { None },
        "samples": samples.len(),
        "train": train,
        "stages": outcome.summaries,
    });
    write_json(&output.join("train_summary.json"), &summary)
}

// ---------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// SR image or directory.
    #[arg(long)]
    sr: Option<PathBuf>,
    /// Ground-truth image or directory.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// LR observations; adds a regenerated-LR report.
    #[arg(long)]
    lr: Option<PathBuf>,
    /// y-channel-shaved or rgb-full.
    #[arg(long)]
    protocol: Option<String>,
    /// float or 8bit comparison of regenerated LR images.
    #[arg(long)]
    lr_mode: Option<String>,
    /// Formation model: gaussian-decimate or bicubic.
    #[arg(long)]
    mode: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> CmdResult {
        cfg.io_input = self.sr.clone().or(cfg.io_input.take());
        cfg.io_gt = self.gt.clone().or(cfg.io_gt.take());
        cfg.io_lr = self.lr.clone().or(cfg.io_lr.take());
        if let Some(p) = parsed(&self.protocol)? {
            cfg.eval_protocol = p;
        }
        if let Some(m) = parsed(&self.lr_mode)? {
            cfg.eval_lr_mode = m;
        }
        if let Some(m) = parsed(&self.mode)? {
            cfg.degrade_mode = m;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EvalRow {
    image: String,
    #[serde(serialize_with = "serialize_db")]
    psnr: f64,
    ssim: f64,
    mse: f64,
    regenerated_lr: Option<ResidualReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> CmdResult {
    let s = cfg.scale()?;
    let spec = cfg.degrade_spec()?;
    let sr = by_stem(require(&cfg.io_input, "--sr")?, s.get())?;
    let gt = by_stem(require(&cfg.io_gt, "--gt")?, s.get())?;
    let lr = cfg.io_lr.as_deref().map(|d| by_stem(d, s.get())).transpose()?;
    let pairs = pair_up(&sr, &gt, ("SR", "ground-truth"));
    if pairs.is_empty() {
        return Err(Failure::data("no SR image has a matching ground truth"));
    }
    let mut rows = Vec::new();
    for (name, sr_path, gt_path) in pairs {
        let img = load_image(&sr_path)?;
        let report = evaluate_with(&img, &load_image(&gt_path)?, s, cfg.eval_protocol)?;
        let regenerated_lr = match lr.as_ref().map(|m| m.get(&name)) {
            Some(Some(p)) => Some(constraint_residual(&img, &load_image(p)?, &spec, cfg.eval_lr_mode)?),
            Some(None) => {
                eprintln!("warning: no LR image for `{name}`; regenerated-LR report skipped");
                None
            }
            None => None,
        };
        rows.push(EvalRow { image: name, psnr: report.psnr, ssim: report.ssim, mse: report.mse, regenerated_lr });
    }
    let with_lr = rows.iter().any(|r| r.regenerated_lr.is_some());
    let width = rows.iter().map(|r| r.image.len()).max().unwrap_or(0).max(5);
    let mut table = format!("{:<width$}  {:>10}  {:>8}", "image", "psnr", "ssim");
    if with_lr {
        let _ = write!(table, "  {:>12}  {:>10}", "lr_mse", "lr_psnr");
    }
    table.push('\n');
    let line = |name: &str, psnr: f64, ssim: f64, regen: Option<(f64, f64)>| {
        let mut l = format!("{name:<width$}  {:>10}  {ssim:>8.4}", format_db(psnr));
        match regen {
            Some((m, p)) => {
                let _ = write!(l, "  {m:>12.4e}  {:>10}", format_db(p));
            }
            None if with_lr => {
                let _ = write!(l, "  {:>12}  {:>10}", "-", "-");
            }
            None => {}
        }
        l + "\n"
    };
    for r in &rows {
        table += &line(&r.image, r.psnr, r.ssim, r.regenerated_lr.map(|g| (g.mse, g.psnr)));
    }
    let mean_psnr = mean(rows.iter().map(|r| r.psnr));
    let mean_ssim = mean(rows.iter().map(|r| r.ssim));
    let regen: Vec<&ResidualReport> = rows.iter().filter_map(|r| r.regenerated_lr.as_ref()).collect();
    let mean_regen = (!regen.is_empty())
        .then(|| (mean(regen.iter().map(|g| g.mse)), mean(regen.iter().map(|g| g.psnr))));
    table += &line("mean", mean_psnr, mean_ssim, mean_regen);
    print!("{table}");
    if let Some(path) = &args.json {
        #[derive(Serialize)]
        struct Mean {
            #[serde(serialize_with = "serialize_db")]
            psnr: f64,
            ssim: f64,
            regenerated_lr_mse: Option<f64>,
        }
        let report = json!({
            "protocol": cfg.eval_protocol,
            "scale": s.get(),
            "lr_mode": cfg.eval_lr_mode,
            "images": rows,
            "mean": Mean { psnr: mean_psnr, ssim: mean_ssim, regenerated_lr_mse: mean_regen.map(|m| m.0) },
        });
        write_json(path, &report)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- check-constraint

#[derive(Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// SR image or directory.
    #[arg(long)]
    sr: Option<PathBuf>,
    /// LR observations with matching stems.
    #[arg(long)]
    lr: Option<PathBuf>,
    /// float or 8bit comparison.
    #[arg(long)]
    lr_mode: Option<String>,
    /// Formation model: gaussian-decimate or bicubic.
    #[arg(long)]
    mode: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl CheckArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> CmdResult {
        cfg.io_input = self.sr.clone().or(cfg.io_input.take());
        cfg.io_lr = self.lr.clone().or(cfg.io_lr.take());
        if let Some(m) = parsed(&self.lr_mode)? {
            cfg.eval_lr_mode = m;
        }
        if let Some(m) = parsed(&self.mode)? {
            cfg.degrade_mode = m;
        }
        Ok(())
    }
}

/// For each SR image: how far its regenerated LR is from the observation,
/// and the (zero) residual once it is blurred and substituted.
pub fn check_constraint(cfg: &RunConfig, args: &CheckArgs) -> CmdResult {
    let spec = cfg.degrade_spec()?;
    let s = spec.scale;
    let op = FormationOp::from_spec(&spec)?;
    let sr = by_stem(require(&cfg.io_input, "--sr")?, s.get())?;
    let lr = by_stem(require(&cfg.io_lr, "--lr")?, s.get())?;
    let pairs = pair_up(&sr, &lr, ("SR", "LR"));
    if pairs.is_empty() {
        return Err(Failure::data("no SR image has a matching LR observation"));
    }
    let width = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0).max(5);
    println!("{:<width$}  {:>12}  {:>10}  {:>16}", "image", "regen_mse", "regen_psnr", "substituted_mse");
    let mut rows = Vec::new();
    let mut broken = Vec::new();
    for (name, sr_path, lr_path) in pairs {
        let (img, obs) = (load_image(&sr_path)?, load_image(&lr_path)?);
        let regenerated = constraint_residual(&img, &obs, &spec, cfg.eval_lr_mode)?;
        let (_, substituted, _) = op.enforce(&img, &obs)?;
        let after = substitution_residual(&substituted, &obs, s)?;
        println!(
            "{name:<width$}  {:>12.4e}  {:>10}  {:>16e}",
            regenerated.mse,
            format_db(regenerated.psnr),
            after.mse
        );
        if after.mse != 0.0 {
            broken.push(name.clone());
        }
        rows.push(json!({ "image": name, "regenerated_lr": regenerated, "substituted": after }));
    }
    if let Some(path) = &args.json {
        write_json(path, &json!({ "lr_mode": cfg.eval_lr_mode, "images": rows }))?;
    }
    if !broken.is_empty() {
        return Err(Failure::numeric(format!("substitution left a residual for {}", broken.join(", "))));
    }
    Ok(())
}
