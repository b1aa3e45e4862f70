use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use menet::audit::{gradient_audit, TOLERANCE};
use menet::config::ExperimentConfig;
use menet::data::{
    self, generate_synthetic, DatasetManifest, Image, Mask, Sample, GENERATOR_VERSION,
};
use menet::distortions::{random_strength, DistortionSpec};
use menet::experiment::{predict, score_maps, JacobianRow};
use menet::model::MEnetParams;
use menet::nn::BnMode;
use menet::robustness::{
    input_gradient, jacobian_stats, lipschitz_bound, mc_directional_norm, MenetProbe, Norm,
    ProbeHead,
};
use menet::saliency::MapKind;
use menet::trainer::{load_checkpoint, Trainer};
use menet::{Rng, Tensor};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "menet",
    version,
    about = "Metric expression network for salient object segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic split (manifest, PPM images, PGM masks).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model on a split written by gen-data.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Optional validation split; enables best.ment and validation.csv.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Saliency maps for every image of a split or a directory of PPM files.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MapArg::Metric)]
        map: MapArg,
    },
    /// Write corrupted copies of a split or image directory.
    Distort {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input-gradient statistics, Monte-Carlo estimates and the Jacobian bound.
    Robustness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Monte-Carlo estimate: exponent p, step t, sample count n.
        #[arg(long, num_args = 3, value_names = ["P", "T", "N"])]
        mc: Option<Vec<String>>,
        #[arg(long, value_enum)]
        bound: Option<NormArg>,
        #[arg(long, value_enum, default_value_t = HeadArg::Metric)]
        head: HeadArg,
        /// Row label in the statistics table; defaults to the directory name.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference audit of every layer and loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-scale feature maps of one image as 8-bit PGM files.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MapArg {
    Metric,
    Ce,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    L1,
    L2,
    Linf,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Metric,
    Ce,
}

impl From<MapArg> for MapKind {
    fn from(m: MapArg) -> Self {
        match m {
            MapArg::Metric => MapKind::Metric,
            MapArg::Ce => MapKind::Ce,
        }
    }
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::L2 => Norm::L2,
            NormArg::Linf => Norm::Linf,
        }
    }
}

impl From<HeadArg> for ProbeHead {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Metric => ProbeHead::Metric,
            HeadArg::Ce => ProbeHead::Ce,
        }
    }
}

/// Raised when a finite-difference audit fails.
#[derive(Debug)]
struct AuditFailed(usize);

impl std::fmt::Display for AuditFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} gradient check(s) exceeded the tolerance {TOLERANCE:e}",
            self.0
        )
    }
}

impl std::error::Error for AuditFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<AuditFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<menet::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = std::env::var("MENET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        menet::exec::init_threads(n);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            n,
            size,
            seed,
            split,
        } => gen_data(&out, n, size, seed, &split),
        Command::Train {
            config,
            data,
            val,
            out,
        } => train(config.as_deref(), &data, val.as_deref(), &out),
        Command::Infer { ckpt, images, out } => infer(&ckpt, &images, &out),
        Command::Eval { pred, gt, out, map } => eval(&pred, &gt, &out, map.into()),
        Command::Distort { images, spec, out } => distort(&images, &spec, &out),
        Command::Robustness {
            ckpt,
            images,
            out,
            mc,
            bound,
            head,
            dataset,
            seed,
        } => robustness(
            &ckpt,
            &images,
            &out,
            mc,
            bound.map(Into::into),
            head.into(),
            dataset,
            seed,
        ),
        Command::Gradcheck { config, seed } => gradcheck(config.as_deref(), seed),
        Command::DumpFeatures { ckpt, image, out } => dump_features(&ckpt, &image, &out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RunInfo<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
}

/// Record the tool version and effective settings of a run in `dir/run.json`.
fn echo_run<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunInfo {
            tool: "menet",
            version: VERSION,
            command,
            config,
        },
    )
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

/// Images of a split directory (with masks) or of every `.ppm` file in a
/// plain directory (without).
fn load_images(dir: &Path) -> Result<Vec<(String, Image, Option<Mask>)>> {
    if dir.join("manifest.json").exists() {
        let (_, samples) = data::load_split(dir)?;
        return Ok(samples
            .into_iter()
            .map(|s| (s.id, s.image, Some(s.mask)))
            .collect());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no manifest.json and no .ppm images", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            Ok((id, data::load_image(p)?, None))
        })
        .collect()
}

fn gen_data(out: &Path, n: usize, size: usize, seed: u64, split: &str) -> Result<()> {
    let samples = generate_synthetic(n, size, seed, split)?;
    let manifest = DatasetManifest {
        split: split.to_string(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        seed,
        size,
        version: GENERATOR_VERSION,
    };
    data::save_split(out, &manifest, &samples)?;
    log::info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train(config: Option<&Path>, data_dir: &Path, val: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (_, samples) = data::load_split(data_dir)?;
    let val_samples = val.map(data::load_split).transpose()?.map(|(_, s)| s);
    echo_run(out, "train", &cfg)?;
    let mut trainer = Trainer::<f32>::new(&cfg.model, cfg.train.clone())?;
    let start = Instant::now();
    let summary = trainer.run(&samples, val_samples.as_deref(), Some(out))?;
    log::info!(
        "trained {} iterations in {:.1}s",
        trainer.iteration(),
        start.elapsed().as_secs_f64()
    );
    if let Some(best) = summary.best {
        log::info!(
            "best validation F {:.4} at iteration {}",
            best.report.f_beta,
            best.iteration
        );
    }
    Ok(())
}

fn load_params(ckpt: &Path) -> Result<MEnetParams<f32>> {
    Ok(load_checkpoint::<f32>(ckpt)?.params)
}

#[derive(Serialize)]
struct Timing {
    images: usize,
    total_seconds: f64,
    seconds_per_image: f64,
}

fn infer(ckpt: &Path, images_dir: &Path, out: &Path) -> Result<()> {
    let params = load_params(ckpt)?;
    let images = load_images(images_dir)?;
    let refs: Vec<&Image> = images.iter().map(|(_, img, _)| img).collect();
    let start = Instant::now();
    let maps = predict(&params, &refs, MapKind::Metric)?;
    let elapsed = start.elapsed().as_secs_f64();
    for ((id, _, _), m) in images.iter().zip(&maps) {
        let binary: Vec<f64> = m.binary.iter().map(|&b| b as f64).collect();
        data::save_gray(
            &out.join(format!("{id}_metric.pgm")),
            m.size,
            m.size,
            &m.metric,
        )?;
        data::save_gray(&out.join(format!("{id}_ce.pgm")), m.size, m.size, &m.ce)?;
        data::save_gray(
            &out.join(format!("{id}_binary.pgm")),
            m.size,
            m.size,
            &binary,
        )?;
    }
    let timing = Timing {
        images: maps.len(),
        total_seconds: elapsed,
        seconds_per_image: elapsed / maps.len().max(1) as f64,
    };
    log::info!(
        "{} maps in {:.3}s ({:.4}s per image)",
        timing.images,
        timing.total_seconds,
        timing.seconds_per_image
    );
    write_json(&out.join("timing.json"), &timing)?;
    echo_run(
        out,
        "infer",
        &serde_json::json!({ "ckpt": ckpt, "images": images_dir }),
    )
}

/// A predicted map: `{id}_{kind}.pgm`, falling back to `{id}.pgm`.
fn load_pred(dir: &Path, id: &str, kind: &str) -> Result<Vec<f64>> {
    let named = dir.join(format!("{id}_{kind}.pgm"));
    let path = if named.exists() {
        named
    } else {
        dir.join(format!("{id}.pgm"))
    };
    Ok(data::load_gray(&path)?.2)
}

fn eval(pred: &Path, gt: &Path, out: &Path, map: MapKind) -> Result<()> {
    let masks: Vec<(String, Mask)> = if gt.join("manifest.json").exists() {
        data::load_split(gt)?
            .1
            .into_iter()
            .map(|s| (s.id, s.mask))
            .collect()
    } else {
        let mut paths: Vec<PathBuf> = fs::read_dir(gt)
            .with_context(|| format!("reading {}", gt.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                Ok((
                    p.file_stem()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                    data::load_mask(p)?,
                ))
            })
            .collect::<Result<_>>()?
    };
    if masks.is_empty() {
        bail!("{}: no ground-truth masks", gt.display());
    }
    let kind = match map {
        MapKind::Metric => "metric",
        MapKind::Ce => "ce",
    };
    let mut maps = Vec::with_capacity(masks.len());
    for (id, mask) in &masks {
        let selected = load_pred(pred, id, kind)?;
        let ce_path = pred.join(format!("{id}_ce.pgm"));
        let ce = if ce_path.exists() {
            data::load_gray(&ce_path)?.2
        } else {
            selected.clone()
        };
        if selected.len() != mask.data.len() || ce.len() != mask.data.len() {
            bail!(
                "{}: prediction for `{id}` does not match the mask size {}x{}",
                pred.display(),
                mask.width,
                mask.height
            );
        }
        let (metric, ce_map) = match map {
            MapKind::Metric => (selected, ce),
            MapKind::Ce => (ce.clone(), ce),
        };
        maps.push(menet::saliency::SaliencyMaps {
            size: mask.height,
            metric,
            ce: ce_map,
            binary: Vec::new(),
            selected: map,
        });
    }
    let gts: Vec<&[u8]> = masks.iter().map(|(_, m)| m.data.as_slice()).collect();
    let report = score_maps(&maps, &gts, map)?;
    log::info!(
        "F {:.4} MAE {:.4} over {} images",
        report.mean.f_beta,
        report.mean.mae,
        gts.len()
    );
    write_json(out, &report)?;
    let csv = out.with_file_name(format!(
        "{}_pr.csv",
        out.file_stem().unwrap_or_default().to_string_lossy()
    ));
    fs::write(&csv, report.pr_curve.to_csv())
        .with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}

fn distort(images_dir: &Path, spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: DistortionSpec = serde_json::from_str(&text).map_err(|e| menet::Error::Parse {
        path: spec_path.to_path_buf(),
        offset: e.column(),
        reason: e.to_string(),
    })?;
    spec.validate()?;
    let images = load_images(images_dir)?;
    let mut rng = Rng::new(spec.seed, 1);
    let mut applied = Vec::with_capacity(images.len());
    let mut samples = Vec::new();
    for (i, (id, img, mask)) in images.into_iter().enumerate() {
        let concrete = if spec.range.is_some() {
            random_strength(&spec, &mut rng)?
        } else {
            spec
        };
        let distorted = concrete.apply(&img, i as u64)?;
        applied.push(serde_json::json!({ "id": id, "distortion": concrete.distortion }));
        match mask {
            Some(mask) => samples.push(Sample {
                id,
                image: distorted,
                mask,
            }),
            None => data::save_image(&out.join(format!("{id}.ppm")), &distorted)?,
        }
    }
    if !samples.is_empty() {
        let (mut manifest, _) = data::load_split(images_dir)?;
        manifest.split = format!("{}-distorted", manifest.split);
        data::save_split(out, &manifest, &samples)?;
    }
    write_json(&out.join("applied.json"), &applied)?;
    echo_run(out, "distort", &spec)
}

#[allow(clippy::too_many_arguments)]
fn robustness(
    ckpt: &Path,
    images_dir: &Path,
    out: &Path,
    mc: Option<Vec<String>>,
    bound: Option<Norm>,
    head: ProbeHead,
    dataset: Option<String>,
    seed: u64,
) -> Result<()> {
    let params = load_params(ckpt)?;
    let images = load_images(images_dir)?;
    let mc = mc
        .map(|v| -> Result<(f64, f64, usize)> {
            Ok((
                v[0].parse().context("--mc P must be a number")?,
                v[1].parse().context("--mc T must be a number")?,
                v[2].parse().context("--mc N must be an integer")?,
            ))
        })
        .transpose()?;
    let dataset = dataset.unwrap_or_else(|| {
        images_dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned()
    });
    let mut fields = Vec::with_capacity(images.len());
    let mut estimates = Vec::new();
    let mut bounds = Vec::new();
    for (i, (id, img, _)) in images.iter().enumerate() {
        let x: Tensor<f32> = data::to_batch(&[img])?;
        let probe = MenetProbe::new(&params, &x, head)?.with_mode(BnMode::Inference);
        fields.push(
            input_gradient(&probe, &x)?
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect::<Vec<f64>>(),
        );
        if let Some((p, t, n)) = mc {
            let est = mc_directional_norm(&probe, &x, p, t, n, &Rng::new(seed, 3).split(i as u64))?;
            estimates.push(serde_json::json!({ "id": id, "estimate": est }));
        }
        if let Some(norm) = bound {
            bounds.push(serde_json::json!({ "id": id, "bound": lipschitz_bound(&probe, norm)? }));
        }
    }
    let report = jacobian_stats(&fields)?;
    let row = JacobianRow {
        dataset,
        images: images.len(),
        stats: report.mean,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = out.join("jacobian.csv");
    fs::write(
        &csv,
        format!("{}{}", JacobianRow::CSV_HEADER, row.to_csv_line()),
    )
    .with_context(|| format!("writing {}", csv.display()))?;
    let per_image: Vec<_> = images
        .iter()
        .zip(&report.per_image)
        .map(|((id, _, _), s)| serde_json::json!({ "id": id, "stats": s }))
        .collect();
    write_json(&out.join("jacobian_per_image.json"), &per_image)?;
    if !estimates.is_empty() {
        write_json(&out.join("mc.json"), &estimates)?;
    }
    if !bounds.is_empty() {
        write_json(&out.join("bound.json"), &bounds)?;
    }
    echo_run(
        out,
        "robustness",
        &serde_json::json!({ "ckpt": ckpt, "images": images_dir, "head": head, "mc": mc, "bound": bound, "seed": seed }),
    )
}

fn gradcheck(config: Option<&Path>, seed: u64) -> Result<()> {
    // the config is validated so a broken file fails here rather than later
    load_config(config)?;
    let start = Instant::now();
    let entries = gradient_audit(seed)?;
    let mut failed = 0;
    for e in &entries {
        println!(
            "{:<28} {:.3e} {}",
            e.name,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" }
        );
        failed += !e.passed as usize;
    }
    println!(
        "{} checks in {:.1}s",
        entries.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(AuditFailed(failed).into());
    }
    Ok(())
}

fn dump_features(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let params = load_params(ckpt)?;
    let img = data::load_image(image)?;
    let fwd = params.forward(&data::to_batch::<f32>(&[&img])?, BnMode::Inference)?;
    for (s, map) in fwd.scales.iter().enumerate() {
        let v: Vec<f64> = map.data().iter().map(|&x| x as f64).collect();
        let (lo, hi) = v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                (a.min(x), b.max(x))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let norm: Vec<f64> = v.iter().map(|x| (x - lo) / span).collect();
        let side = map.shape()[2];
        data::save_gray(&out.join(format!("scale_{s:02}.pgm")), side, side, &norm)?;
    }
    log::info!(
        "wrote {} feature maps to {}",
        fwd.scales.len(),
        out.display()
    );
    echo_run(
        out,
        "dump-features",
        &serde_json::json!({ "ckpt": ckpt, "image": image }),
    )
}
