//! The five pipeline commands. Each reads an [`ExperimentConfig`], writes
//! its outputs atomically and drops a `provenance.txt` next to them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{admm_pnp, default_rho_grid, rho_sweep, History, SweepReport, LL_STABLE_WINDOW};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::{mse, Image, Sinogram};
use crate::net::{forward, read_checkpoint, spectral_norm_l, write_checkpoint, DenoiserParams, PowerConfig, PowerStart};
use crate::recon::{gaussian_postfilter_sweep, log_likelihood};
use crate::sim::io::{read_image, read_sinogram, sinogram_as_image, write_atomic, write_image, write_pgm, write_sinogram};
use crate::train::{
    build_dataset, derive_seed, fmt_f64, phantom_system, sample_tilde, train_phase, Dataset, DatasetItem, Phase,
    Split,
};

pub const VERSION: &str = concat!("pnprecon ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_HEADER: &str = "item,phantom_id,dose_index,dose,seed,split";
pub const SUMMARY_HEADER: &str =
    "item,phantom_id,dose,method,mse,log_likelihood,primal_residual,dual_residual,filter_sigma,rho,iterations";
pub const CERTIFY_HEADER: &str = "sample,item,kappa,sigma,iterations";
pub const CERTIFY_SUMMARY_HEADER: &str = "n_samples,sigma_min,sigma_mean,sigma_max,fraction_within_margin,margin";

/// Gaussian post-filter widths (pixels) tried for the filtered-OSEM baseline.
pub const FILTER_SIGMAS: [f64; 12] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 3.5, 4.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRow {
    item: usize,
    phantom_id: usize,
    dose_index: usize,
    dose: String,
    seed: u64,
    split: Split,
}

fn item_stem(i: usize) -> String {
    format!("item_{i:03}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn write_provenance(dir: &Path, cfg: &ExperimentConfig, command: &str, extra: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "command = {command}").unwrap();
    writeln!(text, "config_sha256 = {}", cfg.hash()).unwrap();
    writeln!(text, "seed = {}", cfg.seed).unwrap();
    writeln!(text, "version = {VERSION}").unwrap();
    for (k, v) in extra {
        writeln!(text, "{k} = {v}").unwrap();
    }
    write_text(&dir.join("provenance.txt"), &text)
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>, name: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.output_dir.join(name))
}

fn checkpoint_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

fn require(path: &Path, reason: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { path: path.to_path_buf(), reason: reason.to_string() })
    }
}

/// Simulates the dataset and writes it under `data_dir` (or `out`).
pub fn cmd_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Dataset> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_dir.clone());
    let specs = cfg.phantom_specs();
    let dataset = build_dataset(&specs, &cfg.simulation_plan())?;

    for (pid, spec) in specs.iter().enumerate() {
        let (activity, mu) = crate::sim::make_phantom(spec)?;
        write_image(&dir.join(format!("phantom_{pid:02}_activity.img")), &activity)?;
        write_pgm(&dir.join(format!("phantom_{pid:02}_activity.pgm")), &activity)?;
        write_image(&dir.join(format!("phantom_{pid:02}_mu.img")), &mu)?;
    }
    let mut manifest = csv::Writer::from_writer(Vec::new());
    for (i, item) in dataset.items.iter().enumerate() {
        let stem = item_stem(i);
        write_sinogram(&dir.join(format!("{stem}_counts.sino")), &item.counts.to_real())?;
        write_pgm(&dir.join(format!("{stem}_counts.pgm")), &sinogram_as_image(&item.counts.to_real()))?;
        write_image(&dir.join(format!("{stem}_osem.img")), &item.x_noisy)?;
        write_pgm(&dir.join(format!("{stem}_osem.pgm")), &item.x_noisy)?;
        manifest.serialize(ManifestRow {
            item: i,
            phantom_id: item.phantom_id,
            dose_index: item.dose_index,
            dose: fmt_f64(item.dose),
            seed: item.seed,
            split: item.split,
        })?;
    }
    let bytes = manifest.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join("manifest.csv"), &bytes)?;
    write_provenance(&dir, cfg, "simulate", &[("items", dataset.items.len().to_string())])?;
    Ok(dataset)
}

/// Reads a dataset written by [`cmd_simulate`], rebuilding the system models
/// from the config. Fails if the files were produced by a different config.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.csv");
    require(&manifest_path, "run `simulate` first")?;
    let plan = cfg.simulation_plan();
    let specs = cfg.phantom_specs();
    let models: Vec<(Image, Arc<crate::sim::SystemModel>)> = specs
        .par_iter()
        .enumerate()
        .map(|(pid, spec)| phantom_system(&plan, pid, spec).map(|(a, m)| (a, Arc::new(m))))
        .collect::<Result<Vec<_>>>()?;

    let stale = |reason: String| Error::Format { path: manifest_path.clone(), reason };
    let mut reader = csv::Reader::from_path(&manifest_path)?;
    let mut items = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row?;
        if row.item != i || row.phantom_id >= specs.len() || row.dose_index >= plan.doses[row.phantom_id].len() {
            return Err(stale(format!("row {i} does not match the config")));
        }
        let dose = plan.doses[row.phantom_id][row.dose_index];
        if row.dose != fmt_f64(dose) {
            return Err(stale(format!("row {i}: dose {} differs from configured {}", row.dose, fmt_f64(dose))));
        }
        let stem = item_stem(i);
        let counts_real = read_sinogram(&dir.join(format!("{stem}_counts.sino")))?;
        let counts = Sinogram {
            n_angles: counts_real.n_angles,
            n_bins: counts_real.n_bins,
            values: counts_real.values.iter().map(|&v| v as u64).collect(),
        };
        items.push(DatasetItem {
            phantom_id: row.phantom_id,
            dose_index: row.dose_index,
            dose,
            seed: row.seed,
            split: row.split,
            counts,
            x_noisy: read_image(&dir.join(format!("{stem}_osem.img")))?,
            x_ref: models[row.phantom_id].0.clone(),
        });
    }
    let expected: usize = plan.doses.iter().map(Vec::len).sum();
    if items.len() != expected {
        return Err(stale(format!("{} rows, config implies {expected}", items.len())));
    }
    Ok(Dataset { items, models: models.into_iter().map(|(_, m)| m).collect() })
}

pub fn phase_checkpoint(cfg: &ExperimentConfig, phase: Phase) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("{}.ckpt", phase.as_str()))
}

/// Trains one phase. PRE starts from a seeded initialization, JAC from the
/// PRE checkpoint. Writes `<phase>.ckpt` and `train_<phase>.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, phase: Phase, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
    let params0 = match phase {
        Phase::Pre => DenoiserParams::init(cfg.arch()?, cfg.init_seed())?,
        Phase::Jac => {
            let pre = dir.join("pre.ckpt");
            require(&pre, "the JAC phase starts from the PRE checkpoint; run `train --phase pre` first")?;
            let p = read_checkpoint(&pre)?;
            if p.arch != cfg.arch()? {
                return Err(Error::Config(format!("{}: architecture differs from [net]", pre.display())));
            }
            p
        }
    };
    let dataset = load_dataset(cfg, &cfg.paths.data_dir)?;
    let tcfg = cfg.train_config(phase);
    let (params, log) = train_phase(&params0, &dataset, &tcfg)?;
    let ckpt = dir.join(format!("{}.ckpt", phase.as_str()));
    write_checkpoint(&ckpt, &params)?;
    write_text(&dir.join(format!("train_{}.csv", phase.as_str())), &log.to_csv())?;
    write_provenance(&dir, cfg, &format!("train --phase {}", phase.as_str()), &[])?;
    Ok(ckpt)
}

/// Test items reconstructed by `reconstruct` and `sweep`: one per test
/// phantom, at the configured dose index.
pub fn evaluation_items(cfg: &ExperimentConfig, dataset: &Dataset) -> Vec<usize> {
    dataset
        .indices(Split::Test)
        .into_iter()
        .filter(|&i| dataset.items[i].dose_index == cfg.admm.dose_index)
        .collect()
}

fn load_checkpoint(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(PathBuf, DenoiserParams)> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| phase_checkpoint(cfg, Phase::Jac));
    require(&path, "train the denoiser first or pass --checkpoint")?;
    let params = read_checkpoint(&path)?;
    Ok((path, params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub item: usize,
    pub phantom_id: usize,
    pub dose: f64,
    pub method: &'static str,
    pub mse: f64,
    pub log_likelihood: f64,
    pub primal_residual: Option<f64>,
    pub dual_residual: Option<f64>,
    pub filter_sigma: Option<f64>,
    pub rho: Option<f64>,
    pub iterations: Option<usize>,
}

fn opt_f(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.item,
            r.phantom_id,
            fmt_f64(r.dose),
            r.method,
            fmt_f64(r.mse),
            fmt_f64(r.log_likelihood),
            opt_f(r.primal_residual),
            opt_f(r.dual_residual),
            opt_f(r.filter_sigma),
            opt_f(r.rho),
            r.iterations.map(|k| k.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    out
}

pub struct ReconstructOutput {
    pub dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub histories: Vec<(usize, History)>,
}

/// ADMM with the given checkpoint on each evaluation item, plus the OSEM
/// and best Gaussian-filtered OSEM baselines.
pub fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    rho: Option<f64>,
    iters: Option<usize>,
    out: Option<&Path>,
) -> Result<ReconstructOutput> {
    let (ckpt_path, params) = load_checkpoint(cfg, checkpoint)?;
    let rho = rho
        .or(cfg.admm.rho)
        .ok_or_else(|| Error::Config("admm.rho is not set; add it to the config or pass --rho".into()))?;
    let acfg = cfg.admm_config(rho, iters);
    acfg.validate().map_err(|e| Error::Config(format!("admm: {e}")))?;
    let dataset = load_dataset(cfg, &cfg.paths.data_dir)?;
    let dir = output_dir(cfg, out, &format!("reconstruct_{}", checkpoint_stem(&ckpt_path)));
    let items = evaluation_items(cfg, &dataset);

    let mut summary = Vec::new();
    let mut histories = Vec::new();
    for &i in &items {
        let item = &dataset.items[i];
        let lm = dataset.likelihood(i)?;
        let row = |method, x: &Image| -> Result<SummaryRow> {
            Ok(SummaryRow {
                item: i,
                phantom_id: item.phantom_id,
                dose: item.dose,
                method,
                mse: mse(x, &item.x_ref),
                log_likelihood: log_likelihood(&lm, x)?,
                primal_residual: None,
                dual_residual: None,
                filter_sigma: None,
                rho: None,
                iterations: None,
            })
        };
        let stem = item_stem(i);
        summary.push(row("osem", &item.x_noisy)?);

        let (sigma, filtered) = gaussian_postfilter_sweep(&item.x_noisy, &item.x_ref, &FILTER_SIGMAS)?;
        summary.push(SummaryRow { filter_sigma: Some(sigma), ..row("osem_filtered", &filtered)? });
        write_image(&dir.join(format!("{stem}_osem_filtered.img")), &filtered)?;
        write_pgm(&dir.join(format!("{stem}_osem_filtered.pgm")), &filtered)?;

        let (x, history) = admm_pnp(&lm, &params, &acfg, &item.x_noisy, Some(&item.x_ref))?;
        let last = history.last().expect("at least one iteration");
        summary.push(SummaryRow {
            primal_residual: Some(last.primal_residual),
            dual_residual: Some(last.dual_residual),
            rho: Some(rho),
            iterations: Some(history.rows.len()),
            ..row("admm", &x)?
        });
        write_image(&dir.join(format!("{stem}_admm.img")), &x)?;
        write_pgm(&dir.join(format!("{stem}_admm.pgm")), &x)?;
        write_text(&dir.join(format!("{stem}_history.csv")), &history.to_csv())?;
        histories.push((i, history));
    }
    write_text(&dir.join("summary.csv"), &summary_csv(&summary))?;
    write_provenance(
        &dir,
        cfg,
        "reconstruct",
        &[
            ("checkpoint", ckpt_path.display().to_string()),
            ("rho", fmt_f64(rho)),
            ("iterations", acfg.n_iterations.to_string()),
        ],
    )?;
    Ok(ReconstructOutput { dir, summary, histories })
}

pub struct SweepOutput {
    pub dir: PathBuf,
    pub report: SweepReport,
    pub item: usize,
}

/// ρ sweep on one evaluation item. Writes `sweep.csv` (per-iteration
/// curves) and `sweep_summary.csv` (per-ρ labels).
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    iters: Option<usize>,
    out: Option<&Path>,
) -> Result<SweepOutput> {
    let (ckpt_path, params) = load_checkpoint(cfg, checkpoint)?;
    let dataset = load_dataset(cfg, &cfg.paths.data_dir)?;
    let items = evaluation_items(cfg, &dataset);
    let i = *items
        .get(cfg.sweep.test_index)
        .ok_or_else(|| Error::Config("sweep.test_index: no such evaluation item".into()))?;
    let item = &dataset.items[i];
    let lm = dataset.likelihood(i)?;
    let base = cfg.admm_config(1.0, iters);
    let rhos = if cfg.sweep.rhos.is_empty() {
        default_rho_grid(&lm, &params, &base, &item.x_noisy, cfg.sweep.pilot_iterations)?
    } else {
        cfg.sweep.rhos.clone()
    };
    let report = rho_sweep(&lm, &params, &rhos, &base, &item.x_noisy, Some(&item.x_ref))?;
    let dir = output_dir(cfg, out, &format!("sweep_{}", checkpoint_stem(&ckpt_path)));
    write_text(&dir.join("sweep.csv"), &report.curves_csv())?;
    write_text(&dir.join("sweep_summary.csv"), &report.summary_csv())?;
    let best = report.best().map(|r| fmt_f64(r.rho)).unwrap_or_default();
    write_provenance(
        &dir,
        cfg,
        "sweep",
        &[
            ("checkpoint", ckpt_path.display().to_string()),
            ("item", i.to_string()),
            ("iterations", base.n_iterations.to_string()),
            ("ll_window", LL_STABLE_WINDOW.to_string()),
            ("best_rho", best),
        ],
    )?;
    Ok(SweepOutput { dir, report, item: i })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifySummary {
    pub n_samples: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub fraction_within: f64,
    pub margin: f64,
}

pub struct CertifyOutput {
    pub dir: PathBuf,
    pub sigmas: Vec<f64>,
    pub summary: CertifySummary,
}

/// Spectral norm of `J_L` at `n_samples` convex combinations
/// `κ x_ref + (1 − κ) D(x)` over the test items, cycling through them.
pub fn cmd_certify(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    n_samples: Option<usize>,
    out: Option<&Path>,
) -> Result<CertifyOutput> {
    let (ckpt_path, params) = load_checkpoint(cfg, checkpoint)?;
    let n = n_samples.unwrap_or(cfg.certify.n_samples);
    if n == 0 {
        return Err(Error::Config("certify.n_samples must be at least 1".into()));
    }
    let dataset = load_dataset(cfg, &cfg.paths.data_dir)?;
    let test = dataset.indices(Split::Test);
    let outputs: Vec<Image> =
        test.par_iter().map(|&i| forward(&params, &dataset.items[i].x_noisy)).collect::<Result<_>>()?;
    let power = PowerConfig { max_iters: cfg.certify.power_iters, tol: cfg.certify.power_tol };
    let rows: Vec<(usize, f64, f64, usize)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let k = s % test.len();
            let i = test[k];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xCE, s as u64]));
            let kappa: f64 = rng.random_range(0.0..=1.0);
            let x_tilde = sample_tilde(&dataset.items[i].x_ref, &outputs[k], kappa)?;
            let start = PowerStart::Seed(derive_seed(cfg.seed, &[0xCF, s as u64]));
            let est = spectral_norm_l(&params, &x_tilde, &power, &start)?;
            Ok((i, kappa, est.sigma, est.iterations))
        })
        .collect::<Result<_>>()?;

    let mut csv = format!("{CERTIFY_HEADER}\n");
    for (s, (i, kappa, sigma, its)) in rows.iter().enumerate() {
        writeln!(csv, "{s},{i},{},{},{its}", fmt_f64(*kappa), fmt_f64(*sigma)).unwrap();
    }
    let sigmas: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let margin = cfg.certify.margin;
    let summary = CertifySummary {
        n_samples: n,
        min: sigmas.iter().copied().fold(f64::INFINITY, f64::min),
        mean: sigmas.iter().sum::<f64>() / n as f64,
        max: sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        fraction_within: sigmas.iter().filter(|&&s| s <= 1.0 + margin).count() as f64 / n as f64,
        margin,
    };
    let summary_text = format!(
        "{CERTIFY_SUMMARY_HEADER}\n{},{},{},{},{},{}\n",
        summary.n_samples,
        fmt_f64(summary.min),
        fmt_f64(summary.mean),
        fmt_f64(summary.max),
        fmt_f64(summary.fraction_within),
        fmt_f64(summary.margin)
    );
    let dir = output_dir(cfg, out, &format!("certify_{}", checkpoint_stem(&ckpt_path)));
    write_text(&dir.join("certify.csv"), &csv)?;
    write_text(&dir.join("certify_summary.csv"), &summary_text)?;
    write_provenance(&dir, cfg, "certify", &[("checkpoint", ckpt_path.display().to_string())])?;
    Ok(CertifyOutput { dir, sigmas, summary })
}
