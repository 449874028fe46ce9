//! Mixture-of-Gaussians output head with low-rank component means.
//!
//! For a target `z` the head predicts mixture logits, low-rank mean
//! coordinates `μ̃_ν`, a positive scale `a` and a shift `b`. Component means
//! are `μ_ν = M_ν μ̃_ν + s_ν` and the density is taken in the normalized
//! space `z̃ = (z − b) / a` with identity covariance, so
//! `p(z) = a^{-H} Σ_ν π_ν N(z̃; μ_ν, I)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, LowRankCache};
use crate::numerics::{Graph, NodeId};

/// `½ log 2π`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Trainable per-component bases `M_ν` (`H × h`) and offsets `s_ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankBasis {
    pub components: usize,
    pub dim: usize,
    pub rank: usize,
    /// `[K, H, h]` row-major
    pub matrices: Vec<f64>,
    /// `[K, H]`
    pub offsets: Vec<f64>,
}

impl LowRankBasis {
    pub fn new(
        components: usize,
        dim: usize,
        rank: usize,
        matrices: Vec<f64>,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        if matrices.len() != components * dim * rank {
            return Err(Error::Dimension {
                expected: components * dim * rank,
                found: matrices.len(),
            });
        }
        if offsets.len() != components * dim {
            return Err(Error::Dimension {
                expected: components * dim,
                found: offsets.len(),
            });
        }
        if !matrices.iter().chain(&offsets).all(|x| x.is_finite()) {
            return Err(Error::invalid("low-rank basis contains non-finite values"));
        }
        Ok(LowRankBasis {
            components,
            dim,
            rank,
            matrices,
            offsets,
        })
    }

    pub fn cache(&self) -> LowRankCache<'_> {
        LowRankCache::from_slices(&self.matrices, &self.offsets, self.components, self.dim, self.rank)
    }

    /// `M_ν μ̃ + s_ν`
    pub fn mean(&self, nu: usize, mu_tilde: &[f64]) -> Vec<f64> {
        let (big_h, h) = (self.dim, self.rank);
        let m = &self.matrices[nu * big_h * h..(nu + 1) * big_h * h];
        let s = &self.offsets[nu * big_h..(nu + 1) * big_h];
        (0..big_h)
            .map(|r| {
                m[r * h..(r + 1) * h]
                    .iter()
                    .zip(mu_tilde)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + s[r]
            })
            .collect()
    }
}

/// Head outputs for `rows` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MoGParams {
    pub rows: usize,
    pub components: usize,
    pub dim: usize,
    pub rank: usize,
    /// `[rows, K]`
    pub logits: Vec<f64>,
    /// `[rows, K·h]`
    pub mu: Vec<f64>,
    /// `a`, one per row
    pub scale: Vec<f64>,
    /// `b`, `[rows, H]`
    pub shift: Vec<f64>,
}

impl MoGParams {
    pub fn new(
        components: usize,
        dim: usize,
        rank: usize,
        logits: Vec<f64>,
        mu: Vec<f64>,
        scale: Vec<f64>,
        shift: Vec<f64>,
    ) -> Result<Self> {
        let rows = scale.len();
        let check = |expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(Error::Dimension { expected, found })
            }
        };
        check(rows * components, logits.len())?;
        check(rows * components * rank, mu.len())?;
        check(rows * dim, shift.len())?;
        Ok(MoGParams {
            rows,
            components,
            dim,
            rank,
            logits,
            mu,
            scale,
            shift,
        })
    }

    pub fn row_logits(&self, i: usize) -> &[f64] {
        &self.logits[i * self.components..(i + 1) * self.components]
    }

    pub fn row_mu(&self, i: usize) -> &[f64] {
        let w = self.components * self.rank;
        &self.mu[i * w..(i + 1) * w]
    }

    pub fn row_shift(&self, i: usize) -> &[f64] {
        &self.shift[i * self.dim..(i + 1) * self.dim]
    }

    /// Mixture weights `π` for row `i`.
    pub fn weights(&self, i: usize) -> Vec<f64> {
        let mut p = self.row_logits(i).to_vec();
        kernels::softmax_in_place(&mut p);
        p
    }

    fn check_against(&self, basis: &LowRankBasis) -> Result<()> {
        if basis.components != self.components || basis.dim != self.dim || basis.rank != self.rank {
            return Err(Error::invalid(format!(
                "head (K={}, H={}, h={}) does not match basis (K={}, H={}, h={})",
                self.components, self.dim, self.rank, basis.components, basis.dim, basis.rank
            )));
        }
        if let Some(a) = self.scale.iter().find(|&&a| !(a > 0.0)) {
            return Err(Error::invalid(format!("scale must be positive, got {a}")));
        }
        Ok(())
    }

    fn normalized(&self, i: usize, z: &[f64]) -> Vec<f64> {
        let a = self.scale[i];
        z.iter().zip(self.row_shift(i)).map(|(z, b)| (z - b) / a).collect()
    }

    fn sqdists(&self, i: usize, cache: &LowRankCache<'_>, zt: &[f64]) -> Vec<f64> {
        let zz: f64 = zt.iter().map(|x| x * x).sum();
        let h = self.rank;
        let mu = self.row_mu(i);
        (0..self.components)
            .map(|nu| cache.sqdist(nu, zt, zz, &mu[nu * h..(nu + 1) * h]))
            .collect()
    }
}

/// Log-density of `N(·; μ, I)` at squared distance `d` in `dim` dimensions.
fn ln_gauss(d: f64, dim: usize) -> f64 {
    -0.5 * d - dim as f64 * HALF_LN_2PI
}

fn check_targets(params: &MoGParams, basis: &LowRankBasis, targets: &[f64]) -> Result<()> {
    params.check_against(basis)?;
    if targets.len() != params.rows * params.dim {
        return Err(Error::Dimension {
            expected: params.rows * params.dim,
            found: targets.len(),
        });
    }
    Ok(())
}

/// `−log p(z_i)` for every row, including the `H·log a` Jacobian.
pub fn exact_nll(params: &MoGParams, basis: &LowRankBasis, targets: &[f64]) -> Result<Vec<f64>> {
    check_targets(params, basis, targets)?;
    let cache = basis.cache();
    let big_h = params.dim;
    Ok((0..params.rows)
        .map(|i| {
            let zt = params.normalized(i, &targets[i * big_h..(i + 1) * big_h]);
            let d = params.sqdists(i, &cache, &zt);
            let lse_pi = kernels::logsumexp(params.row_logits(i));
            let terms: Vec<f64> = params
                .row_logits(i)
                .iter()
                .zip(&d)
                .map(|(l, &d)| l - lse_pi + ln_gauss(d, big_h))
                .collect();
            big_h as f64 * params.scale[i].ln() - kernels::logsumexp(&terms)
        })
        .collect())
}

/// Per-row pieces of the Jensen-decomposed loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposed {
    pub log_scale: f64,
    pub regression: f64,
    pub classification: f64,
}

impl Decomposed {
    pub fn total(&self) -> f64 {
        self.log_scale + self.regression + self.classification
    }
}

/// Regression `−Σ q log N(z̃; μ_ν, I)` and classification `KL(q ‖ π)` with
/// `q ∝ N(z̃; μ_ν, I)`; the total upper-bounds [`exact_nll`].
pub fn decomposed_loss(
    params: &MoGParams,
    basis: &LowRankBasis,
    targets: &[f64],
) -> Result<Vec<Decomposed>> {
    check_targets(params, basis, targets)?;
    let cache = basis.cache();
    let big_h = params.dim;
    Ok((0..params.rows)
        .map(|i| {
            let zt = params.normalized(i, &targets[i * big_h..(i + 1) * big_h]);
            let d = params.sqdists(i, &cache, &zt);
            let log_gauss: Vec<f64> = d.iter().map(|&d| ln_gauss(d, big_h)).collect();
            let lse_q = kernels::logsumexp(&log_gauss);
            let lse_pi = kernels::logsumexp(params.row_logits(i));
            let mut regression = 0.0;
            let mut classification = 0.0;
            for (lg, l) in log_gauss.iter().zip(params.row_logits(i)) {
                let log_q = lg - lse_q;
                let q = log_q.exp();
                if q > 0.0 {
                    regression -= q * lg;
                    classification += q * (log_q - (l - lse_pi));
                }
            }
            Decomposed {
                log_scale: big_h as f64 * params.scale[i].ln(),
                regression,
                classification,
            }
        })
        .collect())
}

/// `‖z̃ − (M μ̃ + s)‖²` through the expanded form with cached `MᵀM`, `Mᵀs`.
pub fn lowrank_sqdist(basis: &LowRankBasis, nu: usize, z: &[f64], mu_tilde: &[f64]) -> f64 {
    let zz = z.iter().map(|x| x * x).sum();
    basis.cache().sqdist(nu, z, zz, mu_tilde)
}

/// Guided head: logits and `μ̃` extrapolated as `(1+w)·cond − w·uncond`,
/// scale and shift from `cond`.
pub fn cfg_combine(cond: &MoGParams, uncond: &MoGParams, w: f64) -> Result<MoGParams> {
    if (cond.rows, cond.components, cond.dim, cond.rank)
        != (uncond.rows, uncond.components, uncond.dim, uncond.rank)
    {
        return Err(Error::invalid(format!(
            "guidance heads differ: rows/K/H/h {:?} vs {:?}",
            (cond.rows, cond.components, cond.dim, cond.rank),
            (uncond.rows, uncond.components, uncond.dim, uncond.rank)
        )));
    }
    if w == 0.0 {
        return Ok(cond.clone());
    }
    let mix = |c: &[f64], u: &[f64]| -> Vec<f64> {
        c.iter().zip(u).map(|(c, u)| (1.0 + w) * c - w * u).collect()
    };
    Ok(MoGParams {
        logits: mix(&cond.logits, &uncond.logits),
        mu: mix(&cond.mu, &uncond.mu),
        ..cond.clone()
    })
}

/// Components sorted by weight (descending, ties by index) up to the
/// smallest prefix whose mass reaches `top_p`.
pub fn nucleus(weights: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut keep = 0;
    for &nu in &order {
        keep += 1;
        mass += weights[nu];
        if mass >= top_p {
            break;
        }
    }
    order.truncate(keep);
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub top_p: f64,
    /// Temperature on the mixture logits inside the nucleus.
    pub pi_temperature: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            top_p: 1.0,
            pi_temperature: 1.0,
        }
    }
}

/// Picks a component for row `i` from the tempered, nucleus-restricted `π`.
pub fn choose_component<R: Rng + ?Sized>(
    params: &MoGParams,
    i: usize,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<usize> {
    if !(opts.top_p > 0.0 && opts.top_p <= 1.0) {
        return Err(Error::invalid(format!("top-p must be in (0, 1], got {}", opts.top_p)));
    }
    if !(opts.pi_temperature > 0.0) {
        return Err(Error::invalid("mixture temperature must be positive"));
    }
    let keep = nucleus(&params.weights(i), opts.top_p);
    let logits = params.row_logits(i);
    let mut probs: Vec<f64> = keep.iter().map(|&nu| logits[nu] / opts.pi_temperature).collect();
    kernels::softmax_in_place(&mut probs);
    let mut u: f64 = rng.random();
    for (&nu, &p) in keep.iter().zip(&probs) {
        if u < p {
            return Ok(nu);
        }
        u -= p;
    }
    Ok(*keep.last().expect("nucleus is never empty"))
}

/// `a·(μ_ν + ε) + b` for row `i`.
pub fn emit(params: &MoGParams, basis: &LowRankBasis, i: usize, nu: usize, eps: &[f64]) -> Vec<f64> {
    let h = params.rank;
    let mean = basis.mean(nu, &params.row_mu(i)[nu * h..(nu + 1) * h]);
    let a = params.scale[i];
    mean.iter()
        .zip(eps)
        .zip(params.row_shift(i))
        .map(|((m, e), b)| a * (m + e) + b)
        .collect()
}

/// Draws one vector per row.
pub fn sample<R: Rng + ?Sized>(
    params: &MoGParams,
    basis: &LowRankBasis,
    rng: &mut R,
    opts: &SampleOptions,
) -> Result<Vec<f64>> {
    params.check_against(basis)?;
    let mut out = Vec::with_capacity(params.rows * params.dim);
    let mut eps = vec![0.0; params.dim];
    for i in 0..params.rows {
        let nu = choose_component(params, i, opts, rng)?;
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        out.extend(emit(params, basis, i, nu, &eps));
    }
    Ok(out)
}

/// Which per-row objective [`loss_graph`] records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Exact,
    /// Jensen-decomposed surrogate; `detach_q` stops gradients through the
    /// component posterior `q`.
    Decomposed { detach_q: bool },
}

/// Graph nodes of a head evaluated on `m` rows.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `[m, K]`
    pub logits: NodeId,
    /// `[m, K·h]`
    pub mu: NodeId,
    /// `log a`, `[m]`
    pub log_scale: NodeId,
    /// `[m, H]`
    pub shift: NodeId,
    /// `[K, H, h]`
    pub basis: NodeId,
    /// `[K, H]`
    pub offset: NodeId,
}

/// Records the per-row loss `[m]` against `targets: [m, H]`.
pub fn loss_graph(g: &mut Graph, head: HeadNodes, targets: NodeId, dim: usize, kind: LossKind) -> Result<NodeId> {
    let neg_log_a = g.scale(head.log_scale, -1.0)?;
    let inv_a = g.exp(neg_log_a)?;
    let inv_a = g.repeat_cols(inv_a, dim)?;
    let centered = g.sub(targets, head.shift)?;
    let zt = g.mul(centered, inv_a)?;
    let d = g.lowrank_sqdist(zt, head.mu, head.basis, head.offset)?;
    let log_pi = g.log_softmax(head.logits)?;
    let log_gauss = g.scale(d, -0.5)?;
    let log_gauss = g.shift(log_gauss, -(dim as f64) * HALF_LN_2PI)?;
    let jacobian = g.scale(head.log_scale, dim as f64)?;
    match kind {
        LossKind::Exact => {
            let joint = g.add(log_pi, log_gauss)?;
            let lse = g.logsumexp(joint)?;
            g.sub(jacobian, lse)
        }
        LossKind::Decomposed { detach_q } => {
            let mut log_q = g.log_softmax(log_gauss)?;
            if detach_q {
                log_q = g.detach(log_q)?;
            }
            let q = g.exp(log_q)?;
            let weighted = g.mul(q, log_gauss)?;
            let regression = g.row_sum(weighted)?;
            let ratio = g.sub(log_q, log_pi)?;
            let kl = g.mul(q, ratio)?;
            let classification = g.row_sum(kl)?;
            let rest = g.sub(classification, regression)?;
            g.add(jacobian, rest)
        }
    }
}
