use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use rgdn::degrade::store::{read_manifest, read_store, triplet_dir, triplet_id, write_store, MANIFEST};
use rgdn::degrade::{synth_dataset, Degradation, Kernel, SynthConfig};
use rgdn::gdu::{Subnets, Topology};
use rgdn::imageio::{load_rgb, save_png};
use rgdn::infer::{restore, Reference, StopRule};
use rgdn::metrics::{Crop, EvalReport};
use rgdn::train::{load_checkpoint, save_checkpoint, LogRow, TrainConfig, Trainer};
use rgdn::Tensor;

use crate::manifest::RunManifest;
use crate::outputs::Outputs;
use crate::{DeconvArgs, EvalArgs, SynthArgs, TrainArgs};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "RGDN_THREADS";

pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a thread count, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// PNG files of a directory, sorted by name.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = SynthConfig {
        kernels_per_image: a.kernels_per_image,
        sigma_lo: a.sigma_lo,
        sigma_hi: a.sigma_hi,
        sizes: a.sizes.clone(),
        seed: a.seed,
    };
    cfg.validate()?;
    let mut images = Vec::new();
    let mut inputs = Vec::new();
    for p in list_pngs(&a.truth_dir)? {
        match load_rgb(&p) {
            Ok(img) => {
                images.push(img);
                inputs.push(p);
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        bail!("no readable PNG images in {}", a.truth_dir.display());
    }
    let triplets = synth_dataset(&images, &cfg)?;

    let mut out = Outputs::create(&a.out)?;
    for i in 0..triplets.len() {
        out.path(triplet_id(i));
    }
    out.path(MANIFEST);
    write_store(out.dir(), &triplets)?;
    log::info!(
        "wrote {} triplets from {} images to {}",
        triplets.len(),
        images.len(),
        a.out.display()
    );

    let mut m = RunManifest::new("synth", &cfg)?;
    m.seeds = vec![cfg.seed];
    m.inputs = inputs;
    m.outputs = vec![a.out.clone()];
    out.path(crate::manifest::FILE);
    m.write(out.dir(), started)?;
    out.commit();
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        learning_rate: a.lr,
        tau: a.tau,
        kappa: a.kappa.clone().unwrap_or_else(|| vec![1.0; a.steps]),
        iterations: a.iters,
        seed: a.seed,
        topology: Topology {
            features: a.features,
            ..Topology::default()
        },
        subnets: Subnets {
            r: !a.no_r,
            h: !a.no_h,
            d: !a.no_d,
        },
        crop: a.crop,
        checkpoint_every: a.checkpoint_every,
    }
}

pub const MODEL_FILE: &str = "model.rgdn";
pub const LOG_FILE: &str = "train_log.csv";

pub fn train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = train_config(&a);
    cfg.validate()?;
    let data = read_store(&a.store).with_context(|| format!("loading store {}", a.store.display()))?;
    if data.is_empty() {
        bail!("store {} holds no triplets", a.store.display());
    }
    log::info!(
        "training on {} triplets for {} iterations ({} features)",
        data.len(),
        cfg.iterations,
        cfg.topology.features
    );

    let mut out = Outputs::create(&a.out)?;
    let model = out.path(MODEL_FILE);
    let log_path = out.path(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", LogRow::csv_header(cfg.steps))?;

    let mut trainer = Trainer::<f32>::new(cfg.clone(), &data, None)?;
    let every = cfg.checkpoint_every;
    trainer.run(|row, params| {
        writeln!(log, "{}", row.to_csv()).map_err(|e| rgdn::Error::Invalid(e.to_string()))?;
        if row.iter % 100 == 0 {
            log::info!("iter {} objective {:.6}", row.iter, row.objective);
        }
        if every.is_some_and(|n| row.iter % n == 0) {
            save_checkpoint(&model, params, &cfg)?;
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&model, trainer.params(), &cfg)?;

    let mut m = RunManifest::new("train", &cfg)?;
    m.seeds = vec![cfg.seed];
    m.inputs = vec![a.store.clone()];
    m.outputs = vec![model, log_path];
    out.path(crate::manifest::FILE);
    m.write(out.dir(), started)?;
    out.commit();
    Ok(())
}

/// One image to restore.
struct Job {
    name: String,
    observed: Tensor<f64>,
    degradation: Degradation,
    truth: Option<Tensor<f64>>,
}

fn read_kernel(path: &Path) -> Result<Kernel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Kernel::from_text(&text).with_context(|| format!("parsing kernel {}", path.display()))
}

fn deconv_jobs(a: &DeconvArgs) -> Result<(Vec<Job>, Vec<PathBuf>)> {
    let pick = |k: Option<Kernel>| -> Result<Degradation> {
        match (a.denoise, k) {
            (true, _) => Ok(Degradation::Identity),
            (false, Some(k)) => Ok(Degradation::Blur(k)),
            (false, None) => bail!("a kernel is required unless --denoise is given"),
        }
    };
    if let Some(store) = &a.store {
        let data = read_store(store).with_context(|| format!("loading store {}", store.display()))?;
        let ids = read_manifest(store)?;
        let jobs = data
            .into_iter()
            .zip(ids)
            .map(|(t, e)| {
                Ok(Job {
                    name: e.id,
                    degradation: pick(t.degradation.kernel().cloned())?,
                    observed: t.observed,
                    truth: Some(t.truth),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((jobs, vec![store.clone()]));
    }
    let input = a.input.as_ref().expect("clap requires --input or --store");
    let mut inputs = vec![input.clone()];
    let kernel = match (&a.kernel, a.denoise) {
        (Some(p), false) => {
            inputs.push(p.clone());
            Some(read_kernel(p)?)
        }
        _ => None,
    };
    let truth = match &a.truth {
        Some(p) => {
            inputs.push(p.clone());
            Some(load_rgb(p)?)
        }
        None => None,
    };
    let job = Job {
        name: stem(input),
        observed: load_rgb(input)?,
        degradation: pick(kernel)?,
        truth,
    };
    Ok((vec![job], inputs))
}

#[derive(Serialize)]
struct DeconvEcho<'a> {
    model: &'a Path,
    epsilon: f64,
    max_iters: usize,
    denoise: bool,
}

pub fn deconv(a: DeconvArgs) -> Result<()> {
    let started = Instant::now();
    let ckpt = load_checkpoint::<f32>(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let params = ckpt.params;
    let rule = StopRule {
        epsilon: a.eps,
        max_iters: a.max_iters,
    };
    let (jobs, mut inputs) = deconv_jobs(&a)?;
    inputs.insert(0, a.model.clone());

    let mut out = Outputs::create(&a.out)?;
    let targets: Vec<(PathBuf, PathBuf)> = jobs
        .iter()
        .map(|j| {
            (
                out.path(format!("{}.png", j.name)),
                out.path(format!("{}_trace.csv", j.name)),
            )
        })
        .collect();
    let results: Vec<Result<String>> = jobs
        .par_iter()
        .zip(&targets)
        .map(|(job, (png, trace))| {
            let y = job.observed.cast::<f32>();
            let crop = job.degradation.crop_margin();
            let reference = job.truth.as_ref().map(|t| Reference { truth: t, crop });
            let r = restore(&params, &y, &job.degradation, None, &rule, reference)
                .with_context(|| format!("restoring {}", job.name))?;
            if r.flagged() {
                log::warn!(
                    "{}: stopped on a non-finite step; kept the last finite estimate",
                    job.name
                );
            }
            save_png(png, &r.estimate)?;
            fs::write(trace, r.trace_csv()).with_context(|| format!("writing {}", trace.display()))?;
            Ok(format!("{}: {} iterations ({:?})", job.name, r.iterations(), r.reason))
        })
        .collect();
    for r in results {
        log::info!("{}", r?);
    }

    let mut m = RunManifest::new(
        "deconv",
        DeconvEcho {
            model: &a.model,
            epsilon: a.eps,
            max_iters: a.max_iters,
            denoise: a.denoise,
        },
    )?;
    m.inputs = inputs;
    m.outputs = targets.into_iter().flat_map(|(p, t)| [p, t]).collect();
    out.path(crate::manifest::FILE);
    m.write(out.dir(), started)?;
    out.commit();
    Ok(())
}

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "summary.txt";

pub fn eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let crop: Crop = a.crop.parse()?;
    let restored: BTreeMap<String, PathBuf> = list_pngs(&a.restored)?
        .into_iter()
        .map(|p| (file_name(&p), p))
        .collect();

    // truth path and kernel side per file name
    let mut truths: BTreeMap<String, (PathBuf, Option<usize>)> = BTreeMap::new();
    let mut inputs = vec![a.restored.clone()];
    if let Some(store) = &a.store {
        for e in read_manifest(store)? {
            let side = (e.kernel_side > 0).then_some(e.kernel_side);
            let path = triplet_dir(store, &e.id).join("truth.png");
            truths.insert(format!("{}.png", e.id), (path, side));
        }
        inputs.push(store.clone());
    } else if let Some(dir) = &a.truth {
        for p in list_pngs(dir)? {
            truths.insert(file_name(&p), (p, None));
        }
        inputs.push(dir.clone());
        if crop == Crop::Auto {
            log::warn!("no kernel sizes without --store; crop auto uses a zero margin");
        }
    }
    let missing_truth: Vec<&String> = restored.keys().filter(|k| !truths.contains_key(*k)).collect();
    let missing_restored: Vec<&String> = truths.keys().filter(|k| !restored.contains_key(*k)).collect();
    if !missing_truth.is_empty() || !missing_restored.is_empty() {
        bail!("file names do not align; without truth: {missing_truth:?}; without restoration: {missing_restored:?}");
    }
    if restored.is_empty() {
        bail!("no PNG images in {}", a.restored.display());
    }

    let names: Vec<&String> = restored.keys().collect();
    let scores: Vec<Result<(String, Tensor<f64>, Tensor<f64>, usize)>> = names
        .par_iter()
        .map(|name| {
            let (tp, side) = &truths[*name];
            let truth = load_rgb(tp)?;
            let est = load_rgb(&restored[*name])?;
            Ok(((*name).clone(), truth, est, crop.resolve(*side)))
        })
        .collect();
    let mut report = EvalReport::default();
    for s in scores {
        let (name, truth, est, margin) = s?;
        report
            .push(name.clone(), &truth, &est, margin)
            .with_context(|| format!("scoring {name}"))?;
    }

    let mut out = Outputs::create(&a.out)?;
    let csv = out.path(EVAL_CSV);
    let summary = out.path(EVAL_SUMMARY);
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let table = report.summary();
    fs::write(&summary, &table).with_context(|| format!("writing {}", summary.display()))?;
    print!("{table}");

    let mut m = RunManifest::new("eval", serde_json::json!({ "crop": a.crop }))?;
    m.inputs = inputs;
    m.outputs = vec![csv, summary];
    out.path(crate::manifest::FILE);
    m.write(out.dir(), started)?;
    out.commit();
    Ok(())
}
