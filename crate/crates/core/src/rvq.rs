//! Residual vector quantization: per-depth codebooks, encode/decode,
//! codebook fitting and the binary codebook file.

use std::io::{Read, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{Token, TokenGrid, MASK};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"RVQC";
pub const CODEBOOK_VERSION: u32 = 1;
pub const SIGMA_FLOOR: f64 = 1e-6;

/// `L` vectors of dimension `H`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    dim: usize,
    data: Vec<f64>,
}

impl LatentSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} values do not split into vectors of dim {dim}",
                data.len()
            )));
        }
        Ok(LatentSequence { dim, data })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        LatentSequence {
            dim,
            data: vec![0.0; len * dim],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    depth: usize,
    vocab: usize,
    dim: usize,
    /// `depth × vocab × dim`
    embeddings: Vec<f64>,
    sigma: Vec<f64>,
}

impl Codebook {
    pub fn new(
        depth: usize,
        vocab: usize,
        dim: usize,
        embeddings: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        if depth == 0 || vocab == 0 || dim == 0 {
            return Err(Error::invalid("codebook extents must be positive"));
        }
        if embeddings.len() != depth * vocab * dim {
            return Err(Error::Dimension {
                expected: depth * vocab * dim,
                found: embeddings.len(),
            });
        }
        if sigma.len() != depth {
            return Err(Error::Dimension {
                expected: depth,
                found: sigma.len(),
            });
        }
        if !embeddings.iter().chain(&sigma).all(|v| v.is_finite()) {
            return Err(Error::invalid("codebook contains non-finite values"));
        }
        Ok(Codebook {
            depth,
            vocab,
            dim,
            embeddings,
            sigma,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embedding `e(v; j)` for zero-based depth `j`.
    pub fn embedding(&self, j: usize, v: Token) -> &[f64] {
        let start = (j * self.vocab + v as usize) * self.dim;
        &self.embeddings[start..start + self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn table(&self, j: usize) -> &[f64] {
        &self.embeddings[j * self.vocab * self.dim..(j + 1) * self.vocab * self.dim]
    }

    /// Per-depth residual standard deviations `σ_j`.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Nearest codeword at depth `j`; ties go to the lowest index.
    pub fn nearest(&self, j: usize, residual: &[f64]) -> (Token, f64) {
        let mut best = (0, f64::INFINITY);
        for (v, e) in self.table(j).chunks(self.dim).enumerate() {
            let d = sqdist(residual, e);
            if d < best.1 {
                best = (v as Token, d);
            }
        }
        best
    }

    fn check_dim(&self, latents: &LatentSequence) -> Result<()> {
        if latents.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: latents.dim(),
            });
        }
        Ok(())
    }

    /// Full-depth quantization; returns tokens and final residuals.
    pub fn quantize(&self, latents: &LatentSequence) -> Result<(TokenGrid, LatentSequence)> {
        let mut grid = TokenGrid::masked(latents.len(), self.depth);
        let start = vec![0; latents.len()];
        let residual = self.quantize_into(latents, &start, &mut grid)?;
        Ok((grid, residual))
    }

    /// Quantizes `latents[i]` into depths `start_depth[i]..D` of `grid`,
    /// leaving shallower depths untouched. The input vectors are the residual
    /// to be explained by those depths. Returns the final residuals.
    pub fn quantize_into(
        &self,
        latents: &LatentSequence,
        start_depth: &[usize],
        grid: &mut TokenGrid,
    ) -> Result<LatentSequence> {
        self.check_dim(latents)?;
        if start_depth.len() != latents.len() || grid.len() != latents.len() {
            return Err(Error::Dimension {
                expected: latents.len(),
                found: start_depth.len().min(grid.len()),
            });
        }
        if grid.depth() != self.depth {
            return Err(Error::Dimension {
                expected: self.depth,
                found: grid.depth(),
            });
        }
        let mut residual = latents.clone();
        for (i, &start) in start_depth.iter().enumerate() {
            if start > self.depth {
                return Err(Error::invalid(format!(
                    "start depth {start} beyond codebook depth {}",
                    self.depth
                )));
            }
            let r = residual.vector_mut(i);
            for j in start..self.depth {
                let (v, _) = self.nearest(j, r);
                grid.set(i, j, v);
                for (x, e) in r.iter_mut().zip(self.embedding(j, v)) {
                    *x -= e;
                }
            }
        }
        Ok(residual)
    }

    /// `z_i = Σ_{j < up_to_depth[i]} e(x_{i,j}; j)`.
    pub fn dequantize(&self, grid: &TokenGrid, up_to_depth: &[usize]) -> Result<LatentSequence> {
        if up_to_depth.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                found: up_to_depth.len(),
            });
        }
        let mut out = LatentSequence::zeros(grid.len(), self.dim);
        for (i, &d) in up_to_depth.iter().enumerate() {
            if d > self.depth.min(grid.depth()) {
                return Err(Error::invalid(format!("depth {d} beyond grid")));
            }
            let z = out.vector_mut(i);
            for j in 0..d {
                let t = grid.get(i, j);
                if t == MASK {
                    return Err(Error::MaskedToken {
                        position: i,
                        depth: j,
                    });
                }
                if t as usize >= self.vocab {
                    return Err(Error::invalid(format!("token {t} outside vocabulary")));
                }
                for (x, e) in z.iter_mut().zip(self.embedding(j, t)) {
                    *x += e;
                }
            }
        }
        Ok(out)
    }

    pub fn dequantize_full(&self, grid: &TokenGrid) -> Result<LatentSequence> {
        self.dequantize(grid, &vec![self.depth; grid.len()])
    }

    /// Mean squared reconstruction error (per vector, summed over dims) after
    /// each number of summed depths `0..=D`.
    pub fn mse_by_depth(&self, data: &[LatentSequence]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.depth + 1];
        let mut count = 0usize;
        for seq in data {
            self.check_dim(seq)?;
            for i in 0..seq.len() {
                let mut r = seq.vector(i).to_vec();
                acc[0] += r.iter().map(|x| x * x).sum::<f64>();
                for (j, slot) in acc.iter_mut().enumerate().skip(1) {
                    let (v, _) = self.nearest(j - 1, &r);
                    for (x, e) in r.iter_mut().zip(self.embedding(j - 1, v)) {
                        *x -= e;
                    }
                    *slot += r.iter().map(|x| x * x).sum::<f64>();
                }
                count += 1;
            }
        }
        Ok(acc.into_iter().map(|a| a / count.max(1) as f64).collect())
    }

    /// Entropy (nats) of codeword usage at each depth over the given data.
    pub fn usage_entropy(&self, data: &[LatentSequence]) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.depth * self.vocab];
        for seq in data {
            let (grid, _) = self.quantize(seq)?;
            for i in 0..grid.len() {
                for j in 0..self.depth {
                    counts[j * self.vocab + grid.get(i, j) as usize] += 1;
                }
            }
        }
        Ok(counts
            .chunks(self.vocab)
            .map(|c| {
                let total: usize = c.iter().sum();
                c.iter()
                    .filter(|&&n| n > 0)
                    .map(|&n| {
                        let p = n as f64 / total as f64;
                        -p * p.ln()
                    })
                    .sum()
            })
            .collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        for v in [CODEBOOK_VERSION, self.depth as u32, self.vocab as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in self.embeddings.iter().chain(&self.sigma) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.embeddings.len() + self.depth));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e| Error::io("<codebook>", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format {
                what: "codebook magic".into(),
                expected: String::from_utf8_lossy(CODEBOOK_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut word).map_err(io)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(r)?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format {
                what: "codebook version".into(),
                expected: CODEBOOK_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let depth = next_u32(r)? as usize;
        let vocab = next_u32(r)? as usize;
        let dim = next_u32(r)? as usize;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(io)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let embeddings = read_f64s(depth * vocab * dim)?;
        let sigma = read_f64s(depth)?;
        Codebook::new(depth, vocab, dim, embeddings, sigma)
    }
}

/// How codewords move toward their assigned residuals during fitting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateRule {
    /// Lloyd update: mean of residuals whose nearest codeword is `v`.
    Nearest,
    /// Soft update: residuals weighted by `softmax_v(−‖r − e_v‖² / 2σ²)`.
    Probabilistic { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub depth: usize,
    pub vocab: usize,
    pub update: UpdateRule,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            depth: 4,
            vocab: 32,
            update: UpdateRule::Nearest,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Reconstruction MSE after `0..=D` depths on the training data.
    pub mse_by_depth: Vec<f64>,
    pub warnings: Vec<String>,
    pub reseeded: usize,
}

/// Fits codebooks depth by depth on successive residuals.
pub fn fit_codebook(dataset: &[LatentSequence], cfg: &FitConfig) -> Result<(Codebook, FitReport)> {
    let dim = dataset
        .first()
        .map(LatentSequence::dim)
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    if cfg.vocab < 2 {
        return Err(Error::invalid("vocabulary must hold at least 2 codewords"));
    }
    if cfg.depth == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    if let UpdateRule::Probabilistic { sigma } = cfg.update {
        if !(sigma > 0.0) {
            return Err(Error::invalid("assignment sigma must be positive"));
        }
    }
    let mut residuals: Vec<f64> = Vec::new();
    for seq in dataset {
        if seq.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: seq.dim(),
            });
        }
        residuals.extend_from_slice(seq.data());
    }
    let n = residuals.len() / dim;
    if n == 0 {
        return Err(Error::invalid("dataset holds no vectors"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut embeddings = Vec::with_capacity(cfg.depth * cfg.vocab * dim);
    let mut sigma = Vec::with_capacity(cfg.depth);
    let mut mse = vec![mean_sq(&residuals, dim)];
    let mut warnings = Vec::new();
    let mut reseeded = 0;

    for j in 0..cfg.depth {
        sigma.push(norm_std(&residuals, dim).max(SIGMA_FLOOR));
        let (mut table, distinct) = kmeanspp_init(&residuals, dim, cfg.vocab, &mut rng);
        if distinct < cfg.vocab {
            warnings.push(format!(
                "depth {}: only {distinct} distinct residuals for {} codewords; duplicates kept",
                j + 1,
                cfg.vocab
            ));
        }
        for _ in 0..cfg.epochs {
            reseeded += lloyd_epoch(&residuals, dim, &mut table, cfg.update, &mut rng);
        }
        for r in residuals.chunks_mut(dim) {
            let best = nearest_in(&table, dim, r);
            for (x, e) in r.iter_mut().zip(&table[best * dim..(best + 1) * dim]) {
                *x -= e;
            }
        }
        mse.push(mean_sq(&residuals, dim));
        embeddings.extend_from_slice(&table);
    }
    let book = Codebook::new(cfg.depth, cfg.vocab, dim, embeddings, sigma)?;
    Ok((
        book,
        FitReport {
            mse_by_depth: mse,
            warnings,
            reseeded,
        },
    ))
}

fn mean_sq(residuals: &[f64], dim: usize) -> f64 {
    residuals.iter().map(|x| x * x).sum::<f64>() / (residuals.len() / dim) as f64
}

/// Standard deviation of residual norms.
fn norm_std(residuals: &[f64], dim: usize) -> f64 {
    let norms: Vec<f64> = residuals
        .chunks(dim)
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    (norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn nearest_in(table: &[f64], dim: usize, r: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (v, e) in table.chunks(dim).enumerate() {
        let d = sqdist(r, e);
        if d < best.1 {
            best = (v, d);
        }
    }
    best.0
}

/// k-means++ seeding. Returns the table and how many distinct points it found;
/// once every residual coincides with a chosen seed the rest are filled with
/// random duplicates.
fn kmeanspp_init(residuals: &[f64], dim: usize, vocab: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let n = residuals.len() / dim;
    let mut table = Vec::with_capacity(vocab * dim);
    let first = rng.random_range(0..n);
    table.extend_from_slice(&residuals[first * dim..(first + 1) * dim]);
    let mut dist: Vec<f64> = residuals
        .chunks(dim)
        .map(|r| sqdist(r, &table[..dim]))
        .collect();
    let mut distinct = 1;
    while table.len() < vocab * dim {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            distinct += 1;
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // guard against rounding landing on a zero-distance tail
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&d| d > 0.0).unwrap();
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let start = table.len();
        table.extend_from_slice(&residuals[pick * dim..(pick + 1) * dim]);
        let new = table[start..].to_vec();
        for (d, r) in dist.iter_mut().zip(residuals.chunks(dim)) {
            *d = d.min(sqdist(r, &new));
        }
    }
    (table, distinct)
}

/// One assignment/update pass. Codewords with no nearest-assigned residual
/// are reseeded from random residuals; returns how many were reseeded.
fn lloyd_epoch(
    residuals: &[f64],
    dim: usize,
    table: &mut [f64],
    update: UpdateRule,
    rng: &mut ChaCha8Rng,
) -> usize {
    let vocab = table.len() / dim;
    let n = residuals.len() / dim;
    let mut sums = vec![0.0; vocab * dim];
    let mut weights = vec![0.0; vocab];
    let mut hard = vec![0usize; vocab];
    let mut logits = vec![0.0; vocab];
    for r in residuals.chunks(dim) {
        let best = nearest_in(table, dim, r);
        hard[best] += 1;
        match update {
            UpdateRule::Nearest => {
                weights[best] += 1.0;
                for (s, x) in sums[best * dim..(best + 1) * dim].iter_mut().zip(r) {
                    *s += x;
                }
            }
            UpdateRule::Probabilistic { sigma } => {
                let inv = 0.5 / (sigma * sigma);
                for (l, e) in logits.iter_mut().zip(table.chunks(dim)) {
                    *l = -sqdist(r, e) * inv;
                }
                crate::numerics::kernels::softmax_in_place(&mut logits);
                for (v, &p) in logits.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    weights[v] += p;
                    for (s, x) in sums[v * dim..(v + 1) * dim].iter_mut().zip(r) {
                        *s += p * x;
                    }
                }
            }
        }
    }
    let dead: Vec<usize> = (0..vocab).filter(|&v| hard[v] == 0 || weights[v] <= 0.0).collect();
    for v in 0..vocab {
        if weights[v] > 0.0 && hard[v] > 0 {
            for (e, s) in table[v * dim..(v + 1) * dim]
                .iter_mut()
                .zip(&sums[v * dim..(v + 1) * dim])
            {
                *e = s / weights[v];
            }
        }
    }
    if !dead.is_empty() {
        let picks = index::sample(rng, n, dead.len().min(n));
        for (v, pick) in dead.iter().zip(picks.into_vec().into_iter().cycle()) {
            table[v * dim..(v + 1) * dim].copy_from_slice(&residuals[pick * dim..(pick + 1) * dim]);
        }
    }
    dead.len()
}
