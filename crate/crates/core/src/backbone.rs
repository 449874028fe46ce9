//! Transformer backbone mapping a partially masked token grid to per-position
//! mixture-of-Gaussians head outputs.
//!
//! Each position's input is the sum of its visible codeword embeddings plus
//! the fraction of its depths still masked. Normalization layers carry no
//! affine parameters; instead a bias computed from the class label and the
//! grid's masked fraction is added after every normalization.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::masking::{MaskState, TokenGrid};
use crate::mog::{HeadNodes, LowRankBasis, MoGParams};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rvq::Codebook;

pub type ParamStore = BTreeMap<String, Tensor>;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Mixture components `K`.
    pub components: usize,
    /// Low-rank mean dimension `h`.
    pub rank: usize,
    pub len: usize,
    pub depth: usize,
    pub vocab: usize,
    pub dim: usize,
    /// 0 for an unconditional model.
    pub num_classes: usize,
    /// Sinusoidal frequencies used to featurize the masked fraction.
    pub time_freqs: usize,
    pub positional: bool,
    /// Standard deviation of the initial component offsets.
    pub offset_init: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            components: 64,
            rank: 8,
            len: 16,
            depth: 4,
            vocab: 32,
            dim: 8,
            num_classes: 0,
            time_freqs: 4,
            positional: true,
            offset_init: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("components", self.components),
            ("rank", self.rank),
            ("len", self.len),
            ("depth", self.depth),
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("time_freqs", self.time_freqs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.offset_init >= 0.0 && self.offset_init.is_finite()) {
            return Err(Error::invalid("offset_init must be finite and non-negative"));
        }
        Ok(())
    }

    /// Head outputs per position: `K` logits, `K·h` means, 1 log-scale, `H` shift.
    pub fn head_width(&self) -> usize {
        self.components + self.components * self.rank + 1 + self.dim
    }

    /// Number of label rows; row 0 is the null label.
    pub fn label_rows(&self) -> usize {
        self.num_classes + 1
    }
}

/// Inputs for `groups` grids, flattened to `groups·L` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub groups: usize,
    /// `[groups·L, H + 1]`: visible embedding sum and masked fraction `q_i/D`.
    pub features: Vec<f64>,
    /// 1 where every depth of the position is masked.
    pub null_rows: Vec<f64>,
    /// 0 = null, `1..=num_classes` = class.
    pub labels: Vec<usize>,
    /// Fraction of the grid's tokens that are masked.
    pub ratios: Vec<f64>,
}

impl ModelInput {
    pub fn new() -> Self {
        ModelInput {
            groups: 0,
            features: Vec::new(),
            null_rows: Vec::new(),
            labels: Vec::new(),
            ratios: Vec::new(),
        }
    }

    /// Appends one grid. Visible depths of `grid` must hold tokens.
    pub fn push(&mut self, grid: &TokenGrid, mask: &MaskState, book: &Codebook, label: usize) -> Result<()> {
        if mask.len() != grid.len() || mask.depth() != grid.depth() || grid.depth() != book.depth() {
            return Err(Error::invalid(format!(
                "grid {}x{}, mask {}x{} and codebook depth {} disagree",
                grid.len(),
                grid.depth(),
                mask.len(),
                mask.depth(),
                book.depth()
            )));
        }
        let visible: Vec<usize> = (0..grid.len()).map(|i| mask.visible(i)).collect();
        let sums = book.dequantize(grid, &visible)?;
        let depth = grid.depth() as f64;
        for i in 0..grid.len() {
            self.features.extend_from_slice(sums.vector(i));
            self.features.push(mask.masked_count(i) as f64 / depth);
            self.null_rows.push(if visible[i] == 0 { 1.0 } else { 0.0 });
        }
        self.labels.push(label);
        self.ratios
            .push(mask.total_masked() as f64 / (grid.len() * grid.depth()) as f64);
        self.groups += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.null_rows.len()
    }
}

impl Default for ModelInput {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-position input features `[L, H + 1]` and fully-masked indicators.
pub fn input_features(grid: &TokenGrid, mask: &MaskState, book: &Codebook) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut input = ModelInput::new();
    input.push(grid, mask, book, 0)?;
    Ok((input.features, input.null_rows))
}

/// Nodes produced by [`Model::build`].
#[derive(Clone, Copy, Debug)]
pub struct BuiltModel {
    /// Projected input embedding, `[rows, width]`.
    pub embedded: NodeId,
    /// Raw head output, `[rows, head_width]`.
    pub raw: NodeId,
    pub basis: NodeId,
    pub offset: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn sinusoid(x: f64, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = PI * (1u64 << k) as f64;
        out.push((w * x).sin());
        out.push((w * x).cos());
    }
    out
}

/// Sinusoidal encodings `[len, width]`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for p in 0..len {
        for c in 0..width {
            let rate = 10_000f64.powf(-((c / 2 * 2) as f64) / width as f64);
            let a = p as f64 * rate;
            data[p * width + c] = if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(len, width, data)
}

impl Model {
    /// Random initialization; the head projection starts at zero so that
    /// `π` is uniform, `μ̃ = 0`, `a = 1` and `b = 0` everywhere.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let w = c.width;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let resid = inv(w) / (2.0 * c.layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("embed.w".into(), randn(&mut rng, &[c.dim + 1, w], inv(c.dim + 1)));
        p.insert("embed.b".into(), Tensor::zeros(&[w]));
        p.insert("embed.null".into(), randn(&mut rng, &[1, w], 1.0));
        p.insert("cond.label".into(), randn(&mut rng, &[c.label_rows(), w], 1.0));
        p.insert("cond.time.w".into(), randn(&mut rng, &[2 * c.time_freqs, w], inv(2 * c.time_freqs)));
        p.insert("cond.time.b".into(), Tensor::zeros(&[w]));
        for l in 0..c.layers {
            let pre = format!("layer{l}");
            for norm in ["norm1", "norm2"] {
                p.insert(format!("{pre}.{norm}.w"), Tensor::zeros(&[w, w]));
                p.insert(format!("{pre}.{norm}.b"), Tensor::zeros(&[w]));
            }
            p.insert(format!("{pre}.qkv.w"), randn(&mut rng, &[w, 3 * w], inv(w)));
            p.insert(format!("{pre}.proj.w"), randn(&mut rng, &[w, w], resid));
            p.insert(format!("{pre}.proj.b"), Tensor::zeros(&[w]));
            let hidden = c.mlp_ratio * w;
            p.insert(format!("{pre}.mlp1.w"), randn(&mut rng, &[w, hidden], inv(w)));
            p.insert(format!("{pre}.mlp1.b"), Tensor::zeros(&[hidden]));
            p.insert(
                format!("{pre}.mlp2.w"),
                randn(&mut rng, &[hidden, w], inv(hidden) / (2.0 * c.layers as f64).sqrt()),
            );
            p.insert(format!("{pre}.mlp2.b"), Tensor::zeros(&[w]));
        }
        p.insert("final.norm.w".into(), Tensor::zeros(&[w, w]));
        p.insert("final.norm.b".into(), Tensor::zeros(&[w]));
        p.insert("head.w".into(), Tensor::zeros(&[w, c.head_width()]));
        p.insert("head.b".into(), Tensor::zeros(&[c.head_width()]));
        p.insert(
            "head.basis".into(),
            randn(&mut rng, &[c.components, c.dim, c.rank], inv(c.rank)),
        );
        p.insert(
            "head.offset".into(),
            randn(&mut rng, &[c.components, c.dim], c.offset_init),
        );
        Ok(Model { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn basis(&self) -> LowRankBasis {
        let c = &self.config;
        LowRankBasis::new(
            c.components,
            c.dim,
            c.rank,
            self.params["head.basis"].data().to_vec(),
            self.params["head.offset"].data().to_vec(),
        )
        .expect("basis shape fixed at init")
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let c = &self.config;
        if input.rows() != input.groups * c.len || input.features.len() != input.rows() * (c.dim + 1) {
            return Err(Error::invalid(format!(
                "input of {} rows for {} grids of length {}",
                input.rows(),
                input.groups,
                c.len
            )));
        }
        if let Some(l) = input.labels.iter().find(|&&l| l > c.num_classes) {
            return Err(Error::invalid(format!(
                "label {l} outside 0..={}",
                c.num_classes
            )));
        }
        Ok(())
    }

    /// Records the forward pass; every parameter becomes a named graph leaf.
    pub fn build(&self, g: &mut Graph, input: &ModelInput) -> Result<BuiltModel> {
        self.check_input(input)?;
        let c = &self.config;
        let (rows, w) = (input.rows(), c.width);
        let mut param = |g: &mut Graph, name: &str| -> NodeId {
            match g.leaf_id(name) {
                Some(id) => id,
                None => g.param(name, self.params[name].clone()),
            }
        };

        // conditioning vector per grid
        let times: Vec<f64> = input.ratios.iter().flat_map(|&r| sinusoid(r, c.time_freqs)).collect();
        let times = g.input("time", Tensor::matrix(input.groups, 2 * c.time_freqs, times));
        let tw = param(g, "cond.time.w");
        let tb = param(g, "cond.time.b");
        let t = g.matmul(times, tw)?;
        let t = g.add_row(t, tb)?;
        let t = g.gelu(t)?;
        let table = param(g, "cond.label");
        let lab = g.gather_rows(table, input.labels.clone())?;
        let cond = g.add(t, lab)?;
        let spread: Vec<usize> = (0..rows).map(|r| r / c.len).collect();

        let cond_bias = |g: &mut Graph, param: &mut dyn FnMut(&mut Graph, &str) -> NodeId, pre: &str| -> Result<NodeId> {
            let wn = param(g, &format!("{pre}.w"));
            let bn = param(g, &format!("{pre}.b"));
            let b = g.matmul(cond, wn)?;
            let b = g.add_row(b, bn)?;
            g.gather_rows(b, spread.clone())
        };

        // input embedding
        let feats = g.input("features", Tensor::matrix(rows, c.dim + 1, input.features.clone()));
        let ew = param(g, "embed.w");
        let eb = param(g, "embed.b");
        let x = g.matmul(feats, ew)?;
        let x = g.add_row(x, eb)?;
        let nulls = g.input("null_rows", Tensor::matrix(rows, 1, input.null_rows.clone()));
        let null = param(g, "embed.null");
        let nul = g.matmul(nulls, null)?;
        let embedded = g.add(x, nul)?;
        let mut x = embedded;
        if c.positional {
            let pe = positional_encoding(c.len, w);
            let tiled: Vec<f64> = (0..input.groups).flat_map(|_| pe.data().iter().copied()).collect();
            let pe = g.constant(Tensor::matrix(rows, w, tiled));
            x = g.add(x, pe)?;
        }

        for l in 0..c.layers {
            let pre = format!("layer{l}");
            let h = g.layer_norm(x, LN_EPS)?;
            let b = cond_bias(g, &mut param, &format!("{pre}.norm1"))?;
            let h = g.add(h, b)?;
            let qw = param(g, &format!("{pre}.qkv.w"));
            // no bias: a key bias cancels inside the softmax
            let qkv = g.matmul(h, qw)?;
            let att = g.attention(qkv, input.groups, c.heads)?;
            let pw = param(g, &format!("{pre}.proj.w"));
            let pb = param(g, &format!("{pre}.proj.b"));
            let att = g.matmul(att, pw)?;
            let att = g.add_row(att, pb)?;
            x = g.add(x, att)?;

            let h = g.layer_norm(x, LN_EPS)?;
            let b = cond_bias(g, &mut param, &format!("{pre}.norm2"))?;
            let h = g.add(h, b)?;
            let w1 = param(g, &format!("{pre}.mlp1.w"));
            let b1 = param(g, &format!("{pre}.mlp1.b"));
            let h = g.matmul(h, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.gelu(h)?;
            let w2 = param(g, &format!("{pre}.mlp2.w"));
            let b2 = param(g, &format!("{pre}.mlp2.b"));
            let h = g.matmul(h, w2)?;
            let h = g.add_row(h, b2)?;
            x = g.add(x, h)?;
        }

        let h = g.layer_norm(x, LN_EPS)?;
        let b = cond_bias(g, &mut param, "final.norm")?;
        let h = g.add(h, b)?;
        let hw = param(g, "head.w");
        let hb = param(g, "head.b");
        let raw = g.matmul(h, hw)?;
        let raw = g.add_row(raw, hb)?;
        let basis = param(g, "head.basis");
        let offset = param(g, "head.offset");
        Ok(BuiltModel {
            embedded,
            raw,
            basis,
            offset,
        })
    }

    /// Splits the rows `rows` of the raw head output into head nodes.
    pub fn head_nodes(&self, g: &mut Graph, built: &BuiltModel, rows: Option<Vec<usize>>) -> Result<HeadNodes> {
        let c = &self.config;
        let raw = match rows {
            Some(r) => g.gather_rows(built.raw, r)?,
            None => built.raw,
        };
        let m = g.shape(raw)[0];
        let k = c.components;
        let logits = g.slice_cols(raw, 0, k)?;
        let mu = g.slice_cols(raw, k, k * c.rank)?;
        let log_scale = g.slice_cols(raw, k + k * c.rank, 1)?;
        let log_scale = g.reshape(log_scale, &[m])?;
        let shift = g.slice_cols(raw, k + k * c.rank + 1, c.dim)?;
        Ok(HeadNodes {
            logits,
            mu,
            log_scale,
            shift,
            basis: built.basis,
            offset: built.offset,
        })
    }

    /// Head parameters for every row of `input`.
    pub fn predict(&self, input: &ModelInput) -> Result<MoGParams> {
        let mut g = Graph::new();
        let built = self.build(&mut g, input)?;
        Ok(self.split_raw(g.value(built.raw)))
    }

    /// Interprets raw head output rows as mixture parameters.
    pub fn split_raw(&self, raw: &Tensor) -> MoGParams {
        let c = &self.config;
        let k = c.components;
        let rows = raw.shape()[0];
        let mut logits = Vec::with_capacity(rows * k);
        let mut mu = Vec::with_capacity(rows * k * c.rank);
        let mut scale = Vec::with_capacity(rows);
        let mut shift = Vec::with_capacity(rows * c.dim);
        for i in 0..rows {
            let r = raw.row(i);
            logits.extend_from_slice(&r[..k]);
            mu.extend_from_slice(&r[k..k + k * c.rank]);
            scale.push(r[k + k * c.rank].exp());
            shift.extend_from_slice(&r[k + k * c.rank + 1..]);
        }
        MoGParams::new(k, c.dim, c.rank, logits, mu, scale, shift).expect("head layout fixed by config")
    }
}
