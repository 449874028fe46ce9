//! Iterative unmasking from a fully masked grid.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gumbel, StandardNormal};

use crate::backbone::{Model, ModelInput};
use crate::error::{Error, Result};
use crate::masking::{binary_unmask, MaskState, Schedule, TokenGrid};
use crate::mog::{self, MoGParams, SampleOptions, HALF_LN_2PI};
use crate::rvq::{Codebook, LatentSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Random,
    Confidence,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Random => "random",
            Selection::Confidence => "confidence",
        })
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selection::Random),
            "confidence" => Ok(Selection::Confidence),
            _ => Err(Error::invalid(format!("unknown selection `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: Schedule,
    pub selection: Selection,
    /// Gumbel noise scale on confidence scores.
    pub temperature: f64,
    pub top_p: f64,
    /// Temperature on the mixture weights.
    pub pi_temperature: f64,
    pub cfg_start: f64,
    pub cfg_end: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 16,
            schedule: Schedule::Circle,
            selection: Selection::Confidence,
            temperature: 1.0,
            top_p: 1.0,
            pi_temperature: 1.0,
            cfg_start: 0.0,
            cfg_end: 0.0,
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 4] = ["paper-63", "paper-28", "paper-48", "paper-64"];

impl SamplerConfig {
    /// Named step/guidance/top-p settings used for large-scale image runs.
    pub fn preset(name: &str) -> Result<Self> {
        let (steps, cfg_end, top_p) = match name {
            "paper-63" => (63, 2.2, 0.98),
            "paper-28" => (28, 2.4, 0.94),
            "paper-48" => (48, 2.4, 0.96),
            "paper-64" => (64, 2.2, 0.98),
            _ => {
                return Err(Error::invalid(format!(
                    "unknown preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(SamplerConfig {
            steps,
            selection: Selection::Confidence,
            temperature: 28.0,
            top_p,
            cfg_start: 0.02,
            cfg_end,
            ..SamplerConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("choice temperature {} must be ≥ 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top-p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.pi_temperature > 0.0) {
            return Err(Error::invalid("mixture temperature must be positive"));
        }
        if !self.cfg_start.is_finite() || !self.cfg_end.is_finite() {
            return Err(Error::invalid("guidance weights must be finite"));
        }
        Ok(())
    }

    /// Guidance weight at step `t ∈ 1..=T`, linear from `cfg_start` to `cfg_end`.
    pub fn cfg_weight(&self, t: usize) -> f64 {
        if self.steps < 2 {
            return self.cfg_start;
        }
        let frac = (t - 1) as f64 / (self.steps - 1) as f64;
        self.cfg_start + frac * (self.cfg_end - self.cfg_start)
    }

    fn guided(&self, model: &Model) -> bool {
        model.config.num_classes > 0 && (self.cfg_start != 0.0 || self.cfg_end != 0.0)
    }
}

/// What one step saw and did, for a single grid.
#[derive(Clone, Debug)]
pub struct StepTrace<'a> {
    pub t: usize,
    pub sample: usize,
    pub cfg_weight: f64,
    pub before: &'a MaskState,
    pub after: &'a MaskState,
    /// Grid with every masked depth filled by quantizing the sampled `z`.
    pub candidate: &'a TokenGrid,
    /// Sampled cumulative embeddings, one per position (zero where nothing is masked).
    pub z: &'a LatentSequence,
    /// Confidence scores, position-major; empty in random mode.
    pub scores: &'a [f64],
    pub grid: &'a TokenGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub grid: TokenGrid,
    /// Model invocations spent on this generation.
    pub forward_passes: usize,
}

/// Cumulative Gaussian log-density of each masked token under its codeword,
/// plus `τ·Gumbel(0, 1)`. Visible tokens score `-inf`.
///
/// The depth-`j` residual is `z_i − Σ_{v_i ≤ d < j} e(x_{i,d}; d)` where `v_i`
/// is the visible depth count; each depth adds
/// `−(H/2)·ln(2πσ_j²) − ‖r − e(x_{i,j}; j)‖² / (2σ_j²)`.
pub fn confidence_scores<R: Rng + ?Sized>(
    z: &LatentSequence,
    candidate: &TokenGrid,
    mask: &MaskState,
    book: &Codebook,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (len, depth, dim) = (candidate.len(), book.depth(), book.dim());
    if z.len() != len || mask.len() != len || candidate.depth() != depth || mask.depth() != depth {
        return Err(Error::invalid("scores need z, grid and mask of the same shape"));
    }
    let sigma = book.sigma();
    if sigma.len() != depth || sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::invalid("codebook lacks a positive σ for every depth"));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let mut scores = vec![f64::NEG_INFINITY; len * depth];
    let mut r = vec![0.0; dim];
    for i in 0..len {
        r.copy_from_slice(z.vector(i));
        let mut cum = 0.0;
        for j in mask.visible(i)..depth {
            let e = book.embedding(j, candidate.get(i, j));
            let s2 = sigma[j] * sigma[j];
            let mut sq = 0.0;
            for (x, e) in r.iter_mut().zip(e) {
                sq += (*x - e) * (*x - e);
                *x -= e;
            }
            cum += -(dim as f64) * (HALF_LN_2PI + sigma[j].ln()) - sq / (2.0 * s2);
            let noise = if temperature > 0.0 {
                temperature * rng.sample(gumbel)
            } else {
                0.0
            };
            scores[i * depth + j] = cum + noise;
        }
    }
    Ok(scores)
}

/// Reveals tokens until `n_target` remain masked, always choosing the best
/// score among each position's shallowest masked depth. Ties go to the lower
/// position index.
pub fn select_by_score(scores: &[f64], state: &MaskState, n_target: usize) -> Result<MaskState> {
    let (len, depth) = (state.len(), state.depth());
    if scores.len() != len * depth {
        return Err(Error::Dimension {
            expected: len * depth,
            found: scores.len(),
        });
    }
    let total = state.total_masked();
    if n_target > total {
        return Err(Error::invalid(format!(
            "target of {n_target} masked exceeds the {total} currently masked"
        )));
    }
    let mut next = state.clone();
    for _ in n_target..total {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..len {
            if next.masked_count(i) == 0 {
                continue;
            }
            let s = scores[i * depth + next.visible(i)];
            if best.is_none_or(|(_, b)| s.total_cmp(&b).is_gt()) {
                best = Some((i, s));
            }
        }
        let (i, _) = best.expect("a masked token remains");
        next.reveal(i, 1);
    }
    next.step += 1;
    Ok(next)
}

/// Dispatches to the configured selection rule.
pub fn select_unmask<R: Rng + ?Sized>(
    selection: Selection,
    scores: &[f64],
    state: &MaskState,
    n_target: usize,
    rng: &mut R,
) -> Result<MaskState> {
    match selection {
        Selection::Confidence => select_by_score(scores, state, n_target),
        Selection::Random => binary_unmask(state, n_target, rng),
    }
}

fn check_compatible(model: &Model, book: &Codebook, labels: &[usize]) -> Result<()> {
    let c = &model.config;
    if (c.depth, c.vocab, c.dim) != (book.depth(), book.vocab(), book.dim()) {
        return Err(Error::invalid(format!(
            "model expects D={} V={} H={}, codebook has D={} V={} H={}",
            c.depth,
            c.vocab,
            c.dim,
            book.depth(),
            book.vocab(),
            book.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > c.num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range (model has {} classes, 0 = unconditional)",
            c.num_classes
        )));
    }
    Ok(())
}

/// Generates one grid per label, sharing each step's model call across the
/// batch. Label 0 is unconditional.
pub fn generate_batch(
    model: &Model,
    book: &Codebook,
    labels: &[usize],
    config: &SamplerConfig,
) -> Result<Vec<Generation>> {
    generate_traced(model, book, labels, config, |_| Ok(()))
}

pub fn generate(model: &Model, book: &Codebook, label: usize, config: &SamplerConfig) -> Result<Generation> {
    let mut out = generate_batch(model, book, &[label], config)?;
    Ok(out.pop().expect("one label in, one grid out"))
}

/// [`generate_batch`] with a callback after every step of every grid.
pub fn generate_traced(
    model: &Model,
    book: &Codebook,
    labels: &[usize],
    config: &SamplerConfig,
    mut on_step: impl FnMut(&StepTrace<'_>) -> Result<()>,
) -> Result<Vec<Generation>> {
    config.validate()?;
    check_compatible(model, book, labels)?;
    let (len, depth, dim) = (model.config.len, book.depth(), book.dim());
    let opts = SampleOptions {
        top_p: config.top_p,
        pi_temperature: config.pi_temperature,
    };
    let basis = model.basis();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grids: Vec<TokenGrid> = labels.iter().map(|_| TokenGrid::masked(len, depth)).collect();
    let mut masks: Vec<MaskState> = labels.iter().map(|_| MaskState::fully_masked(len, depth)).collect();
    let guided = config.guided(model);
    let mut passes = 0;

    for t in 1..=config.steps {
        let n_target = config
            .schedule
            .mask_count(t as f64 / config.steps as f64, len, depth)?;
        let w = config.cfg_weight(t);
        let head = predict_all(model, book, &grids, &masks, labels, guided, w, &mut passes)?;

        for s in 0..labels.len() {
            let mask = &masks[s];
            let mut z = LatentSequence::zeros(len, dim);
            let mut eps = vec![0.0; dim];
            for i in 0..len {
                if mask.masked_count(i) == 0 {
                    continue;
                }
                let row = s * len + i;
                let nu = mog::choose_component(&head, row, &opts, &mut rng)?;
                for e in eps.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                z.vector_mut(i).copy_from_slice(&mog::emit(&head, &basis, row, nu, &eps));
            }
            let mut candidate = grids[s].clone();
            let start: Vec<usize> = (0..len).map(|i| mask.visible(i)).collect();
            book.quantize_into(&z, &start, &mut candidate)?;

            let target = n_target.min(mask.total_masked());
            let scores = match config.selection {
                Selection::Confidence => {
                    confidence_scores(&z, &candidate, mask, book, config.temperature, &mut rng)?
                }
                Selection::Random => Vec::new(),
            };
            let next = select_unmask(config.selection, &scores, mask, target, &mut rng)?;
            for i in 0..len {
                for j in mask.visible(i)..next.visible(i) {
                    grids[s].set(i, j, candidate.get(i, j));
                }
            }
            on_step(&StepTrace {
                t,
                sample: s,
                cfg_weight: w,
                before: mask,
                after: &next,
                candidate: &candidate,
                z: &z,
                scores: &scores,
                grid: &grids[s],
            })?;
            masks[s] = next;
        }
    }
    debug_assert!(masks.iter().all(|m| m.total_masked() == 0));
    Ok(grids
        .into_iter()
        .map(|grid| Generation {
            grid,
            forward_passes: passes,
        })
        .collect())
}

/// Head parameters for every row of every grid, guided when enabled.
#[allow(clippy::too_many_arguments)]
fn predict_all(
    model: &Model,
    book: &Codebook,
    grids: &[TokenGrid],
    masks: &[MaskState],
    labels: &[usize],
    guided: bool,
    w: f64,
    passes: &mut usize,
) -> Result<MoGParams> {
    let mut input = ModelInput::new();
    for ((g, m), &l) in grids.iter().zip(masks).zip(labels) {
        input.push(g, m, book, l)?;
    }
    let cond = model.predict(&input)?;
    *passes += 1;
    if !guided {
        return Ok(cond);
    }
    input.labels.iter_mut().for_each(|l| *l = 0);
    let uncond = model.predict(&input)?;
    *passes += 1;
    mog::cfg_combine(&cond, &uncond, w)
}
