//! Dataset preparation, quality evaluation and latency measurement.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::image::{load_y, psnr, resize, ssim, Kernel, MetricRecord, Plane};
use crate::par::Exec;
use crate::pipeline::{super_resolve_timed, PipelineConfig};

/// HR plane cropped to a multiple of `scale` and its bicubic downscale.
pub fn degrade(hr: &Plane, scale: usize) -> Result<(Plane, Plane)> {
    if scale == 0 {
        return Err(invalid_input("scale must be positive"));
    }
    let hr = hr.crop_to_multiple(scale)?;
    if hr.is_empty() {
        return Err(invalid_input(format!("image smaller than scale {scale}")));
    }
    let lr = resize(&hr, hr.height() / scale, hr.width() / scale, Kernel::Bicubic)?;
    Ok((lr, hr))
}

/// `.png` files in `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Matches LR and HR files by stem. Any unmatched name is an error.
pub fn pair_dirs(lr_dir: impl AsRef<Path>, hr_dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let lr: BTreeMap<_, _> = list_pngs(lr_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
    let hr: BTreeMap<_, _> = list_pngs(hr_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
    let unmatched: Vec<_> = lr.keys().filter(|k| !hr.contains_key(*k)).chain(hr.keys().filter(|k| !lr.contains_key(*k))).cloned().collect();
    if !unmatched.is_empty() {
        return Err(Error::InvalidDataset(format!("LR/HR names do not match: {}", unmatched.join(", "))));
    }
    if lr.is_empty() {
        return Err(Error::InvalidDataset("no images found".into()));
    }
    Ok(lr.into_iter().map(|(k, l)| { let h = hr[&k].clone(); (k, l, h) }).collect())
}

/// Upscaling method under evaluation.
pub enum Method<'a> {
    Baseline(Kernel),
    Pipeline(&'a PipelineConfig),
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline(k) => format!("{k:?}").to_lowercase(),
            Method::Pipeline(_) => "pipeline".into(),
        }
    }

    pub fn upscale(&self, lr: &Plane, scale: usize, exec: Exec) -> Result<Plane> {
        match self {
            Method::Baseline(k) => resize(lr, lr.height() * scale, lr.width() * scale, *k),
            Method::Pipeline(cfg) => {
                if cfg.scale != scale {
                    return Err(invalid_input(format!("pipeline scale {} but evaluating at {scale}", cfg.scale)));
                }
                Ok(super_resolve_timed(lr, cfg, exec)?.0)
            }
        }
    }
}

/// Scores one prediction with border crop = `scale`.
pub fn score(dataset: &str, image: &str, sr: &Plane, hr: &Plane, scale: usize) -> Result<MetricRecord> {
    Ok(MetricRecord {
        dataset: dataset.into(),
        image: image.into(),
        psnr_db: psnr(sr, hr, scale)?,
        ssim: ssim(sr, hr, scale)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub scale: usize,
    pub records: Vec<MetricRecord>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl EvalSummary {
    pub fn from_records(method: String, scale: usize, records: Vec<MetricRecord>) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            method,
            scale,
            mean_psnr_db: records.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            mean_ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
            records,
        }
    }

    /// Fixed-width table, one row per image and a mean row.
    pub fn table(&self) -> String {
        let w = self.records.iter().map(|r| r.image.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<w$}  {:>9}  {:>7}\n", "image", "PSNR(dB)", "SSIM");
        for r in &self.records {
            s += &format!("{:<w$}  {:>9.4}  {:>7.4}\n", r.image, r.psnr_db, r.ssim);
        }
        s += &format!("{:<w$}  {:>9.4}  {:>7.4}\n", "mean", self.mean_psnr_db, self.mean_ssim);
        s
    }
}

/// Evaluates HR images by degrading each one and upscaling it back.
pub fn evaluate_hr(dataset: &str, hr: &[(String, Plane)], method: &Method<'_>, scale: usize, exec: Exec) -> Result<EvalSummary> {
    let records = exec.install(|| {
        exec.map_range(hr.len(), |i| -> Result<MetricRecord> {
            let (name, plane) = &hr[i];
            let (lr, hr) = degrade(plane, scale)?;
            score(dataset, name, &method.upscale(&lr, scale, Exec::Sequential)?, &hr, scale)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
    })??;
    Ok(EvalSummary::from_records(method.name(), scale, records))
}

/// Loads every PNG of a directory as `(stem, luma)`.
pub fn load_dir_y(dir: impl AsRef<Path>) -> Result<Vec<(String, Plane)>> {
    list_pngs(dir)?.iter().map(|p| Ok((stem(p), load_y(p)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub height: usize,
    pub width: usize,
    pub output_height: usize,
    pub output_width: usize,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Mean wall time per group.
    pub stage_mean_ms: Vec<f64>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `iterations` runs on `input` after `warmup` untimed runs.
pub fn measure_latency(cfg: &PipelineConfig, input: &Plane, warmup: usize, iterations: usize, exec: Exec) -> Result<LatencyStats> {
    if iterations == 0 {
        return Err(invalid_input("iterations must be positive"));
    }
    for _ in 0..warmup {
        super_resolve_timed(input, cfg, exec)?;
    }
    let mut totals = Vec::with_capacity(iterations);
    let mut stages = vec![0.0; cfg.groups.len()];
    let mut out_dims = (0, 0);
    for _ in 0..iterations {
        let start = Instant::now();
        let (out, t) = super_resolve_timed(input, cfg, exec)?;
        totals.push(ms(start.elapsed()));
        for (s, d) in stages.iter_mut().zip(&t.groups) {
            *s += ms(*d);
        }
        out_dims = (out.height(), out.width());
    }
    let mean_ms = totals.iter().sum::<f64>() / iterations as f64;
    totals.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        height: input.height(),
        width: input.width(),
        output_height: out_dims.0,
        output_width: out_dims.1,
        iterations,
        mean_ms,
        p50_ms: percentile(&totals, 50.0),
        p95_ms: percentile(&totals, 95.0),
        stage_mean_ms: stages.into_iter().map(|s| s / iterations as f64).collect(),
    })
}
