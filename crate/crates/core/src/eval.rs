//! Sample-quality metrics and sweeps over depth, schedules and sampler
//! settings.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::masking::{Schedule, TokenGrid};
use crate::rvq::{fit_codebook, Codebook, FitConfig};
use crate::sampler::{generate_batch, SamplerConfig};
use crate::trainer::{TokenDataset, TrainConfig, TrainState, Trainer};

/// Eigenvalues in `[-EIG_TOL, 0)` are rounding noise and clamp to zero.
pub const EIG_TOL: f64 = 1e-8;

fn moments(x: &[f64], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || !x.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!("{} values do not split into vectors of {dim}", x.len())));
    }
    let n = x.len() / dim;
    if n < dim + 1 {
        return Err(Error::invalid(format!("need at least {} vectors of dimension {dim}, got {n}", dim + 1)));
    }
    let m = DMatrix::from_row_slice(n, dim, x);
    let mean = DVector::from_iterator(dim, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn check_eigs(eigs: &DVector<f64>) -> Result<()> {
    let min = eigs.min();
    if min < -EIG_TOL {
        let max = eigs.max();
        return Err(Error::DegenerateCovariance {
            min_eig: min,
            condition: max.abs() / min.abs(),
        });
    }
    Ok(())
}

/// `V·diag(√λ)·Vᵀ` of a symmetric PSD matrix.
fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    check_eigs(&eig.eigenvalues)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two vector sets, each given
/// as a flat row-major `[n, dim]` slice.
///
/// `tr((Σ_A Σ_B)^{1/2})` is taken as `Σ √λ` over the eigenvalues of the
/// symmetric `Σ_A^{1/2} Σ_B Σ_A^{1/2}`.
pub fn frechet_distance(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let (mu_a, cov_a) = moments(a, dim)?;
    let (mu_b, cov_b) = moments(b, dim)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let root_a = sqrt_psd(cov_a.clone())?;
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    check_eigs(&eig.eigenvalues)?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between two datasets over whole flattened records.
pub fn dataset_frechet(a: &Dataset, b: &Dataset) -> Result<f64> {
    if (a.len, a.dim) != (b.len, b.dim) {
        return Err(Error::invalid(format!(
            "record shapes differ: {}x{} vs {}x{}",
            a.len, a.dim, b.len, b.dim
        )));
    }
    frechet_distance(&a.values, &b.values, a.len * a.dim)
}

/// Fréchet distance between the two halves of `data`: the noise floor a
/// perfect generator of the same size would sit near.
pub fn self_distance(data: &Dataset) -> Result<f64> {
    let half = data.count() / 2;
    dataset_frechet(&data.slice(0..half), &data.slice(half..2 * half))
}

/// Generated records with their token grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub data: Dataset,
    pub grids: Vec<TokenGrid>,
    /// Model invocations per generated grid.
    pub forward_passes: usize,
}

/// Generates `classes.len()` records (class `None` = unconditional) in
/// batches of `chunk`; batch `k` samples with seed `config.seed + k`.
pub fn generate_dataset(
    model: &Model,
    book: &Codebook,
    classes: &[Option<usize>],
    config: &SamplerConfig,
    chunk: usize,
) -> Result<Generated> {
    let c = &model.config;
    let mut values = Vec::with_capacity(classes.len() * c.len * c.dim);
    let mut labels = Vec::with_capacity(classes.len());
    let mut grids = Vec::with_capacity(classes.len());
    let mut passes = 0;
    for (k, part) in classes.chunks(chunk.max(1)).enumerate() {
        let model_labels: Vec<usize> = part.iter().map(|c| c.map_or(0, |c| c + 1)).collect();
        let cfg = SamplerConfig {
            seed: config.seed.wrapping_add(k as u64),
            ..config.clone()
        };
        for (g, cls) in generate_batch(model, book, &model_labels, &cfg)?.into_iter().zip(part) {
            values.extend(book.dequantize_full(&g.grid)?.into_data());
            labels.push(cls.unwrap_or(0) as u32);
            passes = g.forward_passes;
            grids.push(g.grid);
        }
    }
    Ok(Generated {
        data: Dataset::new(c.len, c.dim, c.num_classes, labels, values)?,
        grids,
        forward_passes: passes,
    })
}

/// Fit, train and sample settings for one end-to-end run.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub fit: FitConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Generated records per evaluation.
    pub samples: usize,
    pub chunk: usize,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub book: Codebook,
    pub state: TrainState,
    pub recon_mse: Vec<f64>,
    pub train_time: Duration,
}

/// Fits a codebook on `data`, then trains for `pipeline.train.steps`.
pub fn fit_and_train(data: &Dataset, pipeline: &Pipeline) -> Result<Trained> {
    let start = Instant::now();
    let latents = data.latents();
    let (book, report) = fit_codebook(&latents, &pipeline.fit)?;
    let tokens = TokenDataset::encode(&book, &latents, &data.classes())?;
    let model_cfg = BackboneConfig {
        len: data.len,
        dim: data.dim,
        depth: pipeline.fit.depth,
        vocab: pipeline.fit.vocab,
        num_classes: data.num_classes,
        ..pipeline.model.clone()
    };
    let model = Model::init(model_cfg, pipeline.train.seed)?;
    let mut trainer = Trainer::new(pipeline.train.clone(), book, tokens, TrainState::new(model))?;
    trainer.train_until(pipeline.train.steps, |_, _| Ok(()))?;
    Ok(Trained {
        book: trainer.book,
        state: trainer.state,
        recon_mse: report.mse_by_depth,
        train_time: start.elapsed(),
    })
}

/// Labels for `n` generated records following the class frequencies of
/// `reference` by cycling through its labels.
pub fn label_plan(reference: &Dataset, n: usize) -> Vec<Option<usize>> {
    let classes = reference.classes();
    (0..n).map(|k| classes[k % classes.len()]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub depth: usize,
    pub recon_mse: f64,
    pub fd: f64,
}

/// Fits, trains and samples at each depth; reports full-depth reconstruction
/// MSE and the Fréchet distance of generated records to `reference`.
pub fn depth_sweep(data: &Dataset, reference: &Dataset, depths: &[usize], pipeline: &Pipeline) -> Result<Vec<DepthRow>> {
    if depths.len() < 2 {
        return Err(Error::invalid("a depth sweep needs at least two depths"));
    }
    depths
        .iter()
        .map(|&depth| {
            let p = Pipeline {
                fit: FitConfig { depth, ..pipeline.fit.clone() },
                ..pipeline.clone()
            };
            let t = fit_and_train(data, &p)?;
            let generated = generate_dataset(
                &t.state.ema_model(),
                &t.book,
                &label_plan(reference, p.samples),
                &p.sampler,
                p.chunk,
            )?;
            Ok(DepthRow {
                depth,
                recon_mse: *t.recon_mse.last().expect("mse has D+1 entries"),
                fd: dataset_frechet(&generated.data, reference)?,
            })
        })
        .collect()
}

/// Fréchet distances indexed `[train][sample]`, with and without guidance.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleGrid {
    pub train: Vec<Schedule>,
    pub sample: Vec<Schedule>,
    pub without_cfg: Vec<Vec<f64>>,
    pub with_cfg: Vec<Vec<f64>>,
}

/// One model per training schedule (sampled with EMA parameters), evaluated
/// under every sampling schedule. `cfg_on` supplies the guided weights; the
/// unguided row uses zero guidance.
pub fn schedule_grid(
    data: &Dataset,
    reference: &Dataset,
    train: &[Schedule],
    sample: &[Schedule],
    pipeline: &Pipeline,
    cfg_on: (f64, f64),
) -> Result<ScheduleGrid> {
    let mut without_cfg = Vec::new();
    let mut with_cfg = Vec::new();
    let labels = label_plan(reference, pipeline.samples);
    for &ts in train {
        let p = Pipeline {
            train: TrainConfig { schedule: ts, ..pipeline.train.clone() },
            ..pipeline.clone()
        };
        let t = fit_and_train(data, &p)?;
        let ema = t.state.ema_model();
        let mut off = Vec::new();
        let mut on = Vec::new();
        for &ss in sample {
            for (weights, row) in [((0.0, 0.0), &mut off), (cfg_on, &mut on)] {
                let cfg = SamplerConfig {
                    schedule: ss,
                    cfg_start: weights.0,
                    cfg_end: weights.1,
                    ..p.sampler.clone()
                };
                let generated = generate_dataset(&ema, &t.book, &labels, &cfg, p.chunk)?;
                row.push(dataset_frechet(&generated.data, reference)?);
            }
        }
        without_cfg.push(off);
        with_cfg.push(on);
    }
    Ok(ScheduleGrid {
        train: train.to_vec(),
        sample: sample.to_vec(),
        without_cfg,
        with_cfg,
    })
}

impl ScheduleGrid {
    /// `cfg,train,<sample schedules…>` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cfg,train");
        for s in &self.sample {
            out += &format!(",{s}");
        }
        out.push('\n');
        for (tag, m) in [("off", &self.without_cfg), ("on", &self.with_cfg)] {
            for (ts, row) in self.train.iter().zip(m) {
                out += &format!("{tag},{ts}");
                for v in row {
                    out += &format!(",{v:.6}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Which sampler knob a sweep point varies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Knob {
    Steps(usize),
    TopP(f64),
    Temperature(f64),
}

impl fmt::Display for Knob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Knob::Steps(t) => write!(f, "steps,{t}"),
            Knob::TopP(p) => write!(f, "top_p,{p}"),
            Knob::Temperature(t) => write!(f, "temperature,{t}"),
        }
    }
}

/// The default one-at-a-time sweep points: step counts up to 63, top-p up
/// to 1 and choice temperatures from 0 (greedy) to 28.
pub fn default_knobs() -> Vec<Knob> {
    let mut k: Vec<Knob> = [8, 16, 32, 63].into_iter().map(Knob::Steps).collect();
    k.extend([0.9, 0.95, 0.98, 1.0].into_iter().map(Knob::TopP));
    k.extend([0.0, 1.0, 4.0, 28.0].into_iter().map(Knob::Temperature));
    k
}

/// Varies one knob at a time around `base` and reports the Fréchet distance
/// of each setting.
pub fn sampler_stats(
    model: &Model,
    book: &Codebook,
    reference: &Dataset,
    base: &SamplerConfig,
    knobs: &[Knob],
    samples: usize,
    chunk: usize,
) -> Result<Vec<(Knob, f64)>> {
    let labels = label_plan(reference, samples);
    knobs
        .iter()
        .map(|&k| {
            let cfg = match k {
                Knob::Steps(steps) => SamplerConfig { steps, ..base.clone() },
                Knob::TopP(top_p) => SamplerConfig { top_p, ..base.clone() },
                Knob::Temperature(temperature) => SamplerConfig { temperature, ..base.clone() },
            };
            let generated = generate_dataset(model, book, &labels, &cfg, chunk)?;
            Ok((k, dataset_frechet(&generated.data, reference)?))
        })
        .collect()
}

pub fn sampler_stats_csv(rows: &[(Knob, f64)]) -> String {
    let mut out = String::from("knob,value,fd\n");
    for (k, fd) in rows {
        out += &format!("{k},{fd:.6}\n");
    }
    out
}

pub fn depth_sweep_csv(rows: &[DepthRow]) -> String {
    let mut out = String::from("depth,recon_mse,fd\n");
    for r in rows {
        out += &format!("{},{:.6e},{:.6}\n", r.depth, r.recon_mse, r.fd);
    }
    out
}

/// Summary of one generated set against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fd: f64,
    /// Distance between the reference halves, when computed.
    pub fd_baseline: Option<f64>,
    pub recon_mse_by_depth: Vec<f64>,
    pub forward_pass_count: Option<usize>,
    pub usage_entropy: Vec<f64>,
    pub mode_occupancy: Option<Vec<f64>>,
    pub wall_time: Duration,
}

impl EvalReport {
    /// Invariants that must hold for any valid report.
    pub fn check(&self, vocab: usize) -> Result<()> {
        if !(self.fd >= 0.0) {
            return Err(Error::invalid(format!("negative Fréchet distance {}", self.fd)));
        }
        if self.recon_mse_by_depth.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-15) {
            return Err(Error::invalid("reconstruction error increases with depth"));
        }
        let cap = (vocab as f64).ln() + 1e-12;
        if self.usage_entropy.iter().any(|&h| !(-1e-12..=cap).contains(&h)) {
            return Err(Error::invalid("usage entropy outside [0, ln V]"));
        }
        Ok(())
    }

    /// `key=value` lines; `wall_time` is omitted when `timing` is false so
    /// two runs can be compared byte for byte.
    pub fn to_kv(&self, timing: bool) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("fd", format!("{:.9e}", self.fd));
        if let Some(b) = self.fd_baseline {
            m.insert("fd_baseline", format!("{b:.9e}"));
        }
        m.insert("recon_mse_by_depth", list(&self.recon_mse_by_depth));
        if let Some(n) = self.forward_pass_count {
            m.insert("forward_pass_count", n.to_string());
        }
        m.insert("usage_entropy", list(&self.usage_entropy));
        if let Some(o) = &self.mode_occupancy {
            m.insert("mode_occupancy", list(o));
        }
        if timing {
            m.insert("wall_time_s", format!("{:.3}", self.wall_time.as_secs_f64()));
        }
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Fréchet distance of `generated` to `reference`, plus codebook statistics
/// on the reference when a codebook is given.
pub fn evaluate(generated: &Dataset, reference: &Dataset, book: Option<&Codebook>, baseline: bool) -> Result<EvalReport> {
    let start = Instant::now();
    let fd = dataset_frechet(generated, reference)?;
    let fd_baseline = if baseline { Some(self_distance(reference)?) } else { None };
    let (recon_mse_by_depth, usage_entropy) = match book {
        Some(b) => {
            let lat = reference.latents();
            (b.mse_by_depth(&lat)?, b.usage_entropy(&lat)?)
        }
        None => (Vec::new(), Vec::new()),
    };
    Ok(EvalReport {
        fd,
        fd_baseline,
        recon_mse_by_depth,
        forward_pass_count: None,
        usage_entropy,
        mode_occupancy: None,
        wall_time: start.elapsed(),
    })
}
