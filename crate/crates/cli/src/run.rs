//! The four commands, as library functions returning what they print.

use std::fs;
use std::path::{Path, PathBuf};

use fia_core::codec::{decode, encode, ImageBuffer};
use fia_core::edit::{run_edit, EditRequest, EditTrace};
use fia_core::fixtures::{by_name, Fixture};
use fia_core::metrics::{mse, psnr_from_mse, spectral_structure_distance, ssim, MetricReport};
use fia_core::model::{ModelConfig, ToyDit};
use fia_core::ppm::{read_ppm, to_ppm_bytes, write_ppm};
use fia_core::prompt::embed_prompt;
use fia_core::spectral::make_gaussian_lowpass;
use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{Resolved, RunConfig};
use crate::error::CliError;
use crate::grid::{Cell, GridSpec};
use crate::report::{AblationReport, ReportRow, RowMetrics};

pub const TRACE_SCHEMA: &str = "fia-edit-trace/1";
pub const REPORT_FILE: &str = "report.txt";

/// The toy model for a run; `seed` replaces the configured model seed.
pub fn build_model(r: &Resolved, seed: Option<u64>) -> Result<ToyDit, CliError> {
    if let Some(path) = &r.weights {
        let model = ToyDit::load(path).map_err(|e| CliError::io(path.display(), e))?;
        let c = model.config();
        if c.latent_channels != r.model.latent_channels || c.text_dim != r.model.text_dim {
            return Err(CliError::Config(format!(
                "weights in {} do not match the configured codec and text width",
                path.display()
            )));
        }
        return Ok(model);
    }
    Ok(ToyDit::new(ModelConfig {
        seed: seed.unwrap_or(r.model.seed),
        ..r.model
    })?)
}

/// Encodes `image`, runs the edit loop and decodes the result.
pub fn edit_image(
    r: &Resolved,
    model: &ToyDit,
    image: &ImageBuffer,
    source_prompt: &str,
    target_prompt: &str,
    seed: u64,
    snapshot_stride: Option<usize>,
) -> Result<(ImageBuffer, EditTrace), CliError> {
    let req = EditRequest {
        source_latent: encode(image, r.codec_patch)?,
        p_src: embed_prompt(source_prompt, r.model.text_dim, r.prompt_seed)?,
        p_tar: embed_prompt(target_prompt, r.model.text_dim, r.prompt_seed)?,
        schedule: r.schedule.clone(),
        guidance: r.guidance,
        fia: r.fia,
        seed,
        noise_mode: r.noise_mode,
        snapshot_stride,
    };
    let trace = run_edit(model, &req)?;
    let mut out = decode(&trace.final_latent, r.codec_patch)?;
    out.provenance = format!("edit of {}", image.provenance);
    Ok((out, trace))
}

pub fn trace_text(r: &Resolved, seed: u64, trace: &EditTrace) -> String {
    let mut out = format!(
        "schema={TRACE_SCHEMA}\nsteps={}\nseed={seed}\nnoise_mode={}\n",
        trace.records.len(),
        r.noise_mode.as_str()
    );
    for rec in &trace.records {
        out.push_str(&format!(
            "step={} sigma_t={:?} sigma_next={:?} v_delta_norm={:?} fij_active={}\n",
            rec.step_index, rec.sigma_t, rec.sigma_next, rec.v_delta_norm, rec.fij_active
        ));
    }
    let norm = trace.final_latent.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.push_str(&format!("final_latent_norm={norm:?}\n"));
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

fn trace_path(out: &Path) -> PathBuf {
    out.with_extension("trace")
}

fn snapshot_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("edit");
    out.with_file_name(format!("{stem}.step{step:03}.ppm"))
}

/// `edit`: writes the edited image, `<out>.trace` and any snapshots; returns
/// the paths written.
pub fn cmd_edit(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    seed: Option<u64>,
    snapshot_stride: Option<usize>,
) -> Result<Vec<PathBuf>, CliError> {
    let r = cfg.resolve()?;
    let seed = seed.unwrap_or(r.seed);
    let image = read_ppm(input).map_err(|e| CliError::io(input.display(), e))?;
    let model = build_model(&r, None)?;
    let (edited, trace) = edit_image(
        &r,
        &model,
        &image,
        &r.source_prompt,
        &r.target_prompt,
        seed,
        snapshot_stride,
    )?;
    write_ppm(out, &edited).map_err(|e| CliError::io(out.display(), e))?;
    let tpath = trace_path(out);
    write_bytes(&tpath, trace_text(&r, seed, &trace).as_bytes())?;
    let mut written = vec![out.to_path_buf(), tpath];
    for rec in &trace.records {
        if let Some(latent) = &rec.snapshot {
            let path = snapshot_path(out, rec.step_index);
            write_ppm(&path, &decode(latent, r.codec_patch)?).map_err(|e| CliError::io(path.display(), e))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn filter_digest(r: &Resolved, sigma: f64) -> Result<String, CliError> {
    let side = r.fixture_size / (r.codec_patch * r.model.patch_size);
    let mask = make_gaussian_lowpass(side, side, sigma, r.fia.filter_normalized)?.mask;
    let mut h = Sha256::new();
    for v in mask.iter() {
        h.update(v.to_le_bytes());
    }
    Ok(h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn fixtures(r: &Resolved) -> Result<Vec<Fixture>, CliError> {
    r.fixtures
        .iter()
        .map(|name| by_name(name, r.fixture_size, r.fixture_size).map_err(|e| CliError::Config(e.to_string())))
        .collect()
}

/// Runs one grid cell at one seed over every fixture and averages.
pub fn run_cell(r: &Resolved, cell: &Cell, seed: u64, reseed_model: bool, set: &[Fixture]) -> Result<RowMetrics, CliError> {
    let cell_cfg = Resolved {
        fia: cell.fia_config(&r.fia),
        noise_mode: cell.noise_mode,
        ..r.clone()
    };
    let model = build_model(&cell_cfg, reseed_model.then_some(seed))?;
    let (mut sq, mut ss, mut sd) = (0.0, 0.0, 0.0);
    for fx in set {
        let (edited, _) = edit_image(&cell_cfg, &model, &fx.image, fx.source_prompt, fx.target_prompt, seed, None)?;
        sq += mse(&fx.image, &edited, fx.background.as_ref())?;
        ss += ssim(&fx.image, &edited)?;
        sd += spectral_structure_distance(&fx.image, &edited)?;
    }
    let n = set.len() as f64;
    Ok(RowMetrics {
        mse_bg: sq / n,
        psnr_bg: psnr_from_mse(sq / n),
        ssim: ss / n,
        spectral_distance: sd / n,
        filter_digest: filter_digest(r, cell.filter_sigma)?,
    })
}

/// Runs every (cell, seed) pair on a pool of `jobs` workers. Cell failures
/// are recorded in their row; only setup errors abort.
pub fn run_ablation(r: &Resolved, grid: &GridSpec, jobs: usize) -> Result<AblationReport, CliError> {
    let cells = grid.cells(r)?;
    let seeds = grid.seeds(r)?;
    let reseed_model = grid.seeds.is_some();
    let set = fixtures(r)?;
    let work: Vec<(Cell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (*c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| {
        work.par_iter()
            .map(|(cell, seed)| {
                let topology = r.model.topology();
                let fij_blocks = cell.fia_config(&r.fia).fij_blocks(&topology).ok().flatten();
                ReportRow {
                    cell: cell.index,
                    fri_mode: cell.fri.as_str().into(),
                    fij_enabled: cell.fij_enabled,
                    noise_mode: cell.noise_mode.as_str().into(),
                    filter_sigma: cell.filter_sigma,
                    fij_blocks,
                    seed: *seed,
                    outcome: run_cell(r, cell, *seed, reseed_model, &set).map_err(|e| e.to_string()),
                }
            })
            .collect()
    });
    Ok(AblationReport {
        fixtures: r.fixtures.clone(),
        rows,
    })
}

/// `ablate`: writes `<out_dir>/report.txt` and returns its path.
pub fn cmd_ablate(
    cfg: &RunConfig,
    grid: &GridSpec,
    out_dir: &Path,
    seed: Option<u64>,
    jobs: usize,
) -> Result<PathBuf, CliError> {
    let mut r = cfg.resolve()?;
    if let Some(s) = seed {
        r.seed = s;
    }
    let report = run_ablation(&r, grid, jobs)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display(), e))?;
    let path = out_dir.join(REPORT_FILE);
    write_bytes(&path, report.render().as_bytes())?;
    Ok(path)
}

/// `x` with six significant digits, trailing zeros trimmed.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (m, e) = s.split_once('e').expect("exponent form");
        let m = m.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{e}")
    }
}

pub fn metrics_text(report: &MetricReport) -> String {
    let region = if report.mask.is_some() { "mask" } else { "all" };
    format!(
        "mse={}\npsnr={}\nssim={}\nspectral_distance={}\nmse_region={region}\n",
        sig6(report.mse),
        sig6(report.psnr),
        sig6(report.ssim),
        sig6(report.spectral_structure_distance)
    )
}

/// Pixels whose mean channel value exceeds one half.
pub fn mask_from_image(img: &ImageBuffer) -> Array2<bool> {
    img.grayscale().mapv(|v| v > 0.5)
}

/// `metrics`: size mismatches are I/O errors, as for unreadable files.
pub fn cmd_metrics(a: &Path, b: &Path, mask: Option<&Path>) -> Result<String, CliError> {
    let read = |p: &Path| read_ppm(p).map_err(|e| CliError::io(p.display(), e));
    let (ia, ib) = (read(a)?, read(b)?);
    let mask = mask.map(|p| read(p).map(|m| mask_from_image(&m))).transpose()?;
    let report = MetricReport::compute(&ia, &ib, mask.as_ref()).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(metrics_text(&report))
}

/// A smaller configuration for `selftest` when none is given.
pub fn selftest_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule.steps = 20;
    cfg.fixtures.size = 32;
    cfg
}

fn selftest_grid() -> GridSpec {
    GridSpec {
        fri_mode: Some(vec!["off".into(), "freq".into()]),
        noise_mode: Some(vec!["none".into(), "fresh_gaussian".into(), "reused_epsilon".into()]),
        ..GridSpec::default()
    }
}

/// One pass of the self-test suite, writing every artifact into `dir`.
fn selftest_pass(cfg: &RunConfig, dir: &Path, jobs: usize) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let r = cfg.resolve()?;
    let fx = by_name(&r.fixtures[0], r.fixture_size, r.fixture_size)?;
    let source = dir.join("source.ppm");
    write_bytes(&source, &to_ppm_bytes(&fx.image))?;
    let edited = dir.join("edited.ppm");
    cmd_edit(cfg, &source, &edited, None, Some(r.schedule.step_count().div_ceil(4)))?;
    write_bytes(&dir.join("metrics.txt"), cmd_metrics(&source, &edited, None)?.as_bytes())?;
    cmd_ablate(cfg, &selftest_grid(), dir, None, jobs)?;
    Ok(())
}

fn list_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir.display(), e))?
        .map(|e| {
            e.map(|e| e.file_name().to_string_lossy().into_owned())
                .map_err(|e| CliError::io(dir.display(), e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    names.sort();
    Ok(names)
}

/// `selftest`: runs the suite twice under `out` and compares every artifact
/// byte for byte. Returns the artifact names.
pub fn cmd_selftest(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<String>, CliError> {
    let (a, b) = (out.join("run-a"), out.join("run-b"));
    for dir in [&a, &b] {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        }
        selftest_pass(cfg, dir, jobs)?;
    }
    let names = list_files(&a)?;
    if names != list_files(&b)? {
        return Err(CliError::Mismatch("the two runs wrote different file sets".into()));
    }
    for name in &names {
        let read = |d: &Path| fs::read(d.join(name)).map_err(|e| CliError::io(name, e));
        if read(&a)? != read(&b)? {
            return Err(CliError::Mismatch(format!("{name} differs between runs")));
        }
    }
    Ok(names)
}
