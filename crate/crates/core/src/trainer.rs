//! Masked-token training loop, loss helpers and bound diagnostics.
//!
//! Each step draws one `r ~ U[0, 1)` per grid, masks `⌈γ(r)·L·D⌉` tokens,
//! and regresses the sum of each position's masked codeword embeddings with
//! the mixture head. Positions with nothing masked carry no loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Model, ModelInput, ParamStore};
use crate::error::{Error, Result};
use crate::masking::{binary_mask, binary_unmask, MaskState, Schedule, TokenGrid, MASK};
use crate::mog::{self, loss_graph, LossKind, MoGParams};
use crate::numerics::{finite_difference_check_sampled, Gradients, Graph, Tensor};
use crate::rvq::{Codebook, LatentSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to weight matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub schedule: Schedule,
    pub label_dropout: f64,
    /// Stop gradients through the component posterior in the KL term.
    pub detach_q: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Steps at which a finite-difference audit runs on a frozen micro-batch.
    pub audit_steps: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 16,
            lr: 3e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ema_decay: 0.999,
            schedule: Schedule::Circle,
            label_dropout: 0.1,
            detach_q: true,
            seed: 0,
            checkpoint_every: 1000,
            audit_steps: vec![0, 1000],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::invalid("label dropout must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("EMA decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Token grids with model labels (0 = null, `c + 1` for class `c`).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub grids: Vec<TokenGrid>,
    pub labels: Vec<usize>,
}

impl TokenDataset {
    /// Quantizes every latent sequence; class ids shift by one to leave 0 as null.
    pub fn encode(book: &Codebook, latents: &[LatentSequence], classes: &[Option<usize>]) -> Result<Self> {
        if latents.len() != classes.len() {
            return Err(Error::Dimension {
                expected: latents.len(),
                found: classes.len(),
            });
        }
        let grids = latents
            .iter()
            .map(|l| book.quantize(l).map(|(g, _)| g))
            .collect::<Result<Vec<_>>>()?;
        let labels = classes.iter().map(|c| c.map_or(0, |c| c + 1)).collect();
        Ok(TokenDataset { grids, labels })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// Regression targets: for every position with at least one masked depth,
/// its index and the sum of its masked codeword embeddings.
pub fn build_target(grid: &TokenGrid, mask: &MaskState, book: &Codebook) -> Result<(Vec<usize>, Vec<f64>)> {
    let dim = book.dim();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..grid.len() {
        if mask.masked_count(i) == 0 {
            continue;
        }
        let mut z = vec![0.0; dim];
        for j in mask.visible(i)..grid.depth() {
            let t = grid.get(i, j);
            if t == MASK {
                return Err(Error::MaskedToken { position: i, depth: j });
            }
            for (a, e) in z.iter_mut().zip(book.embedding(j, t)) {
                *a += e;
            }
        }
        rows.push(i);
        targets.extend(z);
    }
    Ok((rows, targets))
}

/// One training example after masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub grid: TokenGrid,
    pub mask: MaskState,
    pub label: usize,
}

/// Recorded loss over a batch: head values for the loss rows and the
/// per-row loss node.
struct BatchGraph {
    graph: Graph,
    loss: usize,
    per_row: usize,
    head_raw: Tensor,
    targets: Vec<f64>,
    rows: usize,
}

fn batch_graph(model: &Model, book: &Codebook, batch: &[MaskedExample], kind: LossKind) -> Result<BatchGraph> {
    let len = model.config.len;
    let mut input = ModelInput::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, ex) in batch.iter().enumerate() {
        input.push(&ex.grid, &ex.mask, book, ex.label)?;
        let (r, t) = build_target(&ex.grid, &ex.mask, book)?;
        rows.extend(r.into_iter().map(|i| s * len + i));
        targets.extend(t);
    }
    let mut g = Graph::new();
    let built = model.build(&mut g, &input)?;
    let m = rows.len();
    if m == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(BatchGraph {
            graph: g,
            loss: zero,
            per_row: zero,
            head_raw: Tensor::zeros(&[0, model.config.head_width()]),
            targets,
            rows: 0,
        });
    }
    let head = model.head_nodes(&mut g, &built, Some(rows))?;
    let z = g.input("targets", Tensor::matrix(m, model.config.dim, targets.clone()));
    let per_row = loss_graph(&mut g, head, z, model.config.dim, kind)?;
    let loss = g.mean(per_row)?;
    let head_raw = collect_head(&g, &head, model);
    Ok(BatchGraph {
        graph: g,
        loss,
        per_row,
        head_raw,
        targets,
        rows: m,
    })
}

/// Reassembles `[m, head_width]` raw head rows from the sliced head nodes.
fn collect_head(g: &Graph, head: &mog::HeadNodes, model: &Model) -> Tensor {
    let parts = [
        g.value(head.logits),
        g.value(head.mu),
        g.value(head.log_scale),
        g.value(head.shift),
    ];
    let m = parts[0].shape()[0];
    let mut data = Vec::with_capacity(m * model.config.head_width());
    for i in 0..m {
        data.extend_from_slice(parts[0].row(i));
        data.extend_from_slice(parts[1].row(i));
        data.push(parts[2].data()[i]);
        data.extend_from_slice(parts[3].row(i));
    }
    Tensor::matrix(m, model.config.head_width(), data)
}

/// Mean loss over the masked positions of `batch` (0 when nothing is masked).
pub fn masked_loss(model: &Model, book: &Codebook, batch: &[MaskedExample], kind: LossKind) -> Result<f64> {
    let bg = batch_graph(model, book, batch, kind)?;
    Ok(bg.graph.value(bg.loss).item())
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Model,
    book: &Codebook,
    batch: &[MaskedExample],
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    let bg = batch_graph(model, book, batch, kind)?;
    let loss = bg.graph.value(bg.loss).item();
    if bg.rows == 0 {
        let zeros = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        return Ok((loss, Gradients::from_map(zeros)));
    }
    Ok((loss, bg.graph.backward(bg.loss)?))
}

/// `−log p(x⁰ | xᵗ)` under the latent construction, where `xᵗ` is the grid
/// after reveal step `t` of `steps` (`⌈γ(t/T)·L·D⌉` tokens still masked, so
/// `t = steps` leaves nothing to predict). Equal weight for every `t`.
#[allow(clippy::too_many_arguments)]
pub fn simple_loss<R: Rng + ?Sized>(
    model: &Model,
    book: &Codebook,
    grid: &TokenGrid,
    label: usize,
    t: usize,
    steps: usize,
    schedule: Schedule,
    rng: &mut R,
) -> Result<f64> {
    if t == 0 || t > steps {
        return Err(Error::invalid(format!("t must lie in 1..={steps}, got {t}")));
    }
    let n = schedule.mask_count(t as f64 / steps as f64, grid.len(), grid.depth())?;
    let mask = binary_mask(n, grid.len(), grid.depth(), rng)?;
    let ex = MaskedExample {
        grid: grid.clone(),
        mask,
        label,
    };
    masked_loss(model, book, &[ex], LossKind::Decomposed { detach_q: true })
}

/// Tokens masked at diffusion step `t` of `steps` (`t = steps` is fully masked).
pub fn masked_at(schedule: Schedule, t: usize, steps: usize, len: usize, depth: usize) -> Result<usize> {
    schedule.mask_count(1.0 - t as f64 / steps as f64, len, depth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub exact_nll: f64,
    /// Surrogate minus exact NLL, averaged over loss rows.
    pub gap: f64,
    pub rows: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub audit: Option<f64>,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} nll={:.6} gap={:.3e} rows={} lr={:.3e} grad_norm={:.4e} audit=",
            self.step, self.loss, self.exact_nll, self.gap, self.rows, self.lr, self.grad_norm
        )?;
        match self.audit {
            Some(a) => write!(f, "{a:.3e}"),
            None => write!(f, "-"),
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub ema: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let zeros: ParamStore = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        TrainState {
            ema: model.params.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            model,
            step: 0,
        }
    }

    /// The model with EMA parameters, used for sampling.
    pub fn ema_model(&self) -> Model {
        Model {
            config: self.model.config.clone(),
            params: self.ema.clone(),
        }
    }
}

/// RNG for step `step`: one ChaCha stream per step under the root seed.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Draws a batch: grids uniformly with replacement, `r ~ U[0,1)`, masks and
/// label dropout.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &TokenDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<MaskedExample>> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.random_range(0..data.len());
            let grid = &data.grids[idx];
            let r: f64 = rng.random();
            let n = cfg.schedule.mask_count(r, grid.len(), grid.depth())?;
            let mask = binary_mask(n, grid.len(), grid.depth(), rng)?;
            let drop = rng.random::<f64>() < cfg.label_dropout;
            Ok(MaskedExample {
                grid: grid.clone(),
                mask,
                label: if drop { 0 } else { data.labels[idx] },
            })
        })
        .collect()
}

fn dump_batch(batch: &[MaskedExample]) -> String {
    batch
        .iter()
        .map(|ex| {
            format!(
                "label={} masked={:?} tokens={}",
                ex.label,
                ex.mask.masked_counts(),
                ex.grid.to_depth_major_line()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct Trainer {
    pub config: TrainConfig,
    pub book: Codebook,
    pub data: TokenDataset,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig, book: Codebook, data: TokenDataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        let mc = &state.model.config;
        if book.depth() != mc.depth || book.vocab() != mc.vocab || book.dim() != mc.dim {
            return Err(Error::invalid(format!(
                "codebook D={} V={} H={} does not match model D={} V={} H={}",
                book.depth(),
                book.vocab(),
                book.dim(),
                mc.depth,
                mc.vocab,
                mc.dim
            )));
        }
        for (grid, &label) in data.grids.iter().zip(&data.labels) {
            if grid.len() != mc.len || grid.depth() != mc.depth {
                return Err(Error::invalid(format!(
                    "grid {}x{} does not match model {}x{}",
                    grid.len(),
                    grid.depth(),
                    mc.len,
                    mc.depth
                )));
            }
            if label > mc.num_classes {
                return Err(Error::invalid(format!(
                    "label {label} outside 0..={}",
                    mc.num_classes
                )));
            }
        }
        Ok(Trainer {
            config,
            book,
            data,
            state,
        })
    }

    fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.config.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.config.warmup as f64).min(1.0)
        };
        self.config.lr * warm
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.state.step;
        let mut rng = step_rng(self.config.seed, step);
        let batch = sample_batch(&self.data, &self.config, &mut rng)?;
        let kind = LossKind::Decomposed {
            detach_q: self.config.detach_q,
        };
        let model = &self.state.model;
        let bg = batch_graph(model, &self.book, &batch, kind)?;
        let loss = bg.graph.value(bg.loss).item();

        let (exact_nll, gap) = if bg.rows > 0 {
            let head = model.split_raw(&bg.head_raw);
            let exact = mog::exact_nll(&head, &model.basis(), &bg.targets)?;
            let surrogate = bg.graph.value(bg.per_row).data().to_vec();
            let m = bg.rows as f64;
            let e = exact.iter().sum::<f64>() / m;
            let s = surrogate.iter().sum::<f64>() / m;
            let worst = surrogate
                .iter()
                .zip(&exact)
                .map(|(s, e)| s - e)
                .fold(f64::INFINITY, f64::min);
            if worst < -1e-9 * e.abs().max(1.0) {
                return Err(Error::invalid(format!(
                    "step {step}: surrogate fell below the exact NLL by {}",
                    -worst
                )));
            }
            (e, s - e)
        } else {
            (0.0, 0.0)
        };

        let grads = if bg.rows > 0 {
            bg.graph.backward(bg.loss)?
        } else {
            Gradients::default()
        };
        let finite = loss.is_finite() && grads.iter().all(|(_, g)| g.all_finite());
        if !finite {
            return Err(Error::NonFinite {
                step,
                dump: dump_batch(&batch),
            });
        }

        let audit = if self.config.audit_steps.contains(&step) {
            Some(self.audit(&batch)?)
        } else {
            None
        };

        let grad_norm = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let lr = self.lr_at(step);
        self.apply(&grads, grad_norm, lr, step);
        self.state.step += 1;
        Ok(StepReport {
            step,
            loss,
            exact_nll,
            gap,
            rows: bg.rows,
            lr,
            grad_norm,
            audit,
        })
    }

    /// Finite-difference check on the first two examples of the batch,
    /// differentiating through every term of the surrogate.
    fn audit(&self, batch: &[MaskedExample]) -> Result<f64> {
        let micro = &batch[..batch.len().min(2)];
        let mut bg = batch_graph(
            &self.state.model,
            &self.book,
            micro,
            LossKind::Decomposed { detach_q: false },
        )?;
        if bg.rows == 0 {
            return Ok(0.0);
        }
        let report = finite_difference_check_sampled(&mut bg.graph, bg.loss, 1e-5, Some(4))?;
        Ok(report.max_rel_err)
    }

    fn apply(&mut self, grads: &Gradients, grad_norm: f64, lr: f64, step: u64) {
        let c = &self.config;
        let clip = if c.grad_clip > 0.0 && grad_norm > c.grad_clip {
            c.grad_clip / grad_norm
        } else {
            1.0
        };
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let st = &mut self.state;
        for (name, p) in st.model.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let m = st.adam_m.get_mut(name).expect("moment per param");
            let v = st.adam_v.get_mut(name).expect("moment per param");
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps) + decay * *x;
                *x -= lr * update;
            }
        }
        for (name, p) in &st.model.params {
            let e = st.ema.get_mut(name).expect("ema per param");
            for (ei, &pi) in e.data_mut().iter_mut().zip(p.data()) {
                *ei = c.ema_decay * *ei + (1.0 - c.ema_decay) * pi;
            }
        }
    }

    /// Trains until `state.step == target`, calling `on_step` after each step.
    pub fn train_until(&mut self, target: u64, mut on_step: impl FnMut(&StepReport, &TrainState) -> Result<()>) -> Result<()> {
        while self.state.step < target {
            let report = self.train_step()?;
            on_step(&report, &self.state)?;
        }
        Ok(())
    }
}

/// Monte-Carlo estimates of the bound terms for one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VlbTerms {
    /// Prior term; zero because the final state is fully masked.
    pub prior: f64,
    /// `L_t` for `t = 1..T−1`.
    pub steps: Vec<f64>,
    /// Reconstruction term `−log p(x⁰ | x¹)`.
    pub reconstruction: f64,
}

impl VlbTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.steps.iter().sum::<f64>() + self.reconstruction
    }
}

/// Estimated `−log p_θ` of the tokens revealed between `after` and `before`
/// (per position, factorized), from `samples` draws of the model's `z`.
fn reveal_nll<R: Rng + ?Sized>(
    model: &Model,
    book: &Codebook,
    grid: &TokenGrid,
    label: usize,
    before: &MaskState,
    after: &MaskState,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut input = ModelInput::new();
    input.push(grid, before, book, label)?;
    let head: MoGParams = model.predict(&input)?;
    let basis = model.basis();
    let opts = mog::SampleOptions::default();
    let mut total = 0.0;
    let mut eps = vec![0.0; book.dim()];
    for i in 0..grid.len() {
        let (from, to) = (before.visible(i), after.visible(i));
        if to == from {
            continue;
        }
        let mut hits = 0usize;
        for _ in 0..samples {
            let nu = mog::choose_component(&head, i, &opts, rng)?;
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let z = mog::emit(&head, &basis, i, nu, &eps);
            let mut residual = z;
            let mut ok = true;
            for j in from..to {
                let (v, _) = book.nearest(j, &residual);
                if v != grid.get(i, j) {
                    ok = false;
                    break;
                }
                for (r, e) in residual.iter_mut().zip(book.embedding(j, v)) {
                    *r -= e;
                }
            }
            hits += usize::from(ok);
        }
        let p = (hits as f64).max(0.5) / samples as f64;
        total -= p.ln();
    }
    Ok(total)
}

/// Bound terms along one forward trajectory `x⁰ → x¹ → … → xᵀ`; each
/// `L_t` reveals `x^t` from `x^{t+1}` with the true posterior over which
/// tokens are revealed and the model's probability of their values.
#[allow(clippy::too_many_arguments)]
pub fn vlb_diagnostic<R: Rng + ?Sized>(
    model: &Model,
    book: &Codebook,
    grid: &TokenGrid,
    label: usize,
    steps: usize,
    schedule: Schedule,
    samples: usize,
    rng: &mut R,
) -> Result<VlbTerms> {
    if steps < 1 || samples < 1 {
        return Err(Error::invalid("steps and samples must be at least 1"));
    }
    let (len, depth) = (grid.len(), grid.depth());
    let mut terms = Vec::with_capacity(steps.saturating_sub(1));
    for t in 1..steps {
        let n_next = masked_at(schedule, t + 1, steps, len, depth)?;
        let n_now = masked_at(schedule, t, steps, len, depth)?;
        let next = binary_mask(n_next, len, depth, rng)?;
        let now = binary_unmask(&next, n_now, rng)?;
        terms.push(reveal_nll(model, book, grid, label, &next, &now, samples, rng)?);
    }
    let n1 = masked_at(schedule, 1, steps, len, depth)?;
    let x1 = binary_mask(n1, len, depth, rng)?;
    let clean = MaskState::unmasked(len, depth);
    let reconstruction = reveal_nll(model, book, grid, label, &x1, &clean, samples, rng)?;
    Ok(VlbTerms {
        prior: 0.0,
        steps: terms,
        reconstruction,
    })
}
