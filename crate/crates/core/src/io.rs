//! Binary artifact formats, key=value configs and atomic file output.
//!
//! All numbers are little-endian; floats are f64.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{BackboneConfig, Model, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rvq::{Codebook, LatentSequence, CODEBOOK_MAGIC, CODEBOOK_VERSION};
use crate::trainer::{TrainConfig, TrainState};

pub const DATASET_MAGIC: &[u8; 4] = b"RGDS";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte slice; every read reports truncation.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                what: self.what.into(),
                expected: format!("{n} more bytes at offset {}", self.pos),
                found: format!("{} bytes", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::invalid("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            what: self.what.into(),
            expected: "UTF-8 text".into(),
            found: "invalid bytes".into(),
        })
    }

    /// Checks magic and version, naming both values on mismatch.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::Format {
                what: format!("{} magic", self.what),
                expected: String::from_utf8_lossy(magic).into(),
                found: String::from_utf8_lossy(found).into(),
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format {
                what: format!("{} version", self.what),
                expected: version.to_string(),
                found: v.to_string(),
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                what: format!("{} length", self.what),
                expected: format!("{} bytes", self.pos),
                found: format!("{} bytes", self.buf.len()),
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

/// `N` records of `L × H` vectors with a `u32` label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub len: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub labels: Vec<u32>,
    /// `N·L·H` values, record-major.
    pub values: Vec<f64>,
}

impl Dataset {
    pub fn new(len: usize, dim: usize, num_classes: usize, labels: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::invalid("dataset records need L ≥ 1 and H ≥ 1"));
        }
        if values.len() != labels.len() * len * dim {
            return Err(Error::Dimension {
                expected: labels.len() * len * dim,
                found: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {k}")));
        }
        if num_classes > 0 {
            if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
                return Err(Error::invalid(format!("label {l} outside 0..{num_classes}")));
            }
        }
        Ok(Dataset {
            len,
            dim,
            num_classes,
            labels,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&self, n: usize) -> &[f64] {
        let w = self.len * self.dim;
        &self.values[n * w..(n + 1) * w]
    }

    pub fn latents(&self) -> Vec<LatentSequence> {
        (0..self.count())
            .map(|n| LatentSequence::new(self.dim, self.record(n).to_vec()).expect("record shape"))
            .collect()
    }

    /// Class ids for conditioning, `None` when the set is unlabelled.
    pub fn classes(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (self.num_classes > 0).then_some(l as usize))
            .collect()
    }

    /// Records `range`, keeping header fields.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let w = self.len * self.dim;
        Dataset {
            labels: self.labels[range.clone()].to_vec(),
            values: self.values[range.start * w..range.end * w].to_vec(),
            ..*self
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.count() * (4 + 8 * self.len * self.dim));
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, self.count() as u32);
        put_u32(&mut out, self.len as u32);
        put_u32(&mut out, self.dim as u32);
        put_u32(&mut out, self.num_classes as u32);
        for n in 0..self.count() {
            put_u32(&mut out, self.labels[n]);
            put_f64s(&mut out, self.record(n));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.header(DATASET_MAGIC, DATASET_VERSION)?;
        let (n, len, dim, classes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let expected = 24 + n * (4 + 8 * len * dim);
        if bytes.len() != expected {
            return Err(Error::Format {
                what: "dataset length".into(),
                expected: format!("{expected} bytes for {n} records of {len}x{dim}"),
                found: format!("{} bytes", bytes.len()),
            });
        }
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * len * dim);
        for _ in 0..n {
            labels.push(r.u32()?);
            values.extend(r.f64s(len * dim)?);
        }
        r.finish()?;
        Dataset::new(len, dim, classes, labels, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&read_file(path)?)
    }
}

pub fn save_codebook(book: &Codebook, path: &Path) -> Result<()> {
    atomic_write(path, &book.to_bytes())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let bytes = read_file(path)?;
    let mut cur = std::io::Cursor::new(&bytes[..]);
    let book = Codebook::read_from(&mut cur)?;
    if cur.position() as usize != bytes.len() {
        return Err(Error::Format {
            what: "codebook length".into(),
            expected: format!("{} bytes", cur.position()),
            found: format!("{} bytes", bytes.len()),
        });
    }
    Ok(book)
}

/// Flat `key = value` text; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Typed access to a key=value map that tracks which keys were read.
pub struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<&'a str>>,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a BTreeMap<String, String>) -> Self {
        KvReader {
            map,
            used: Default::default(),
        }
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get_key_value(key) {
            None => Ok(default),
            Some((k, v)) => {
                self.used.borrow_mut().push(k);
                v.parse()
                    .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
            }
        }
    }

    /// Fails on keys nobody asked for, which are usually typos.
    pub fn finish(&self, prefix: &str) -> Result<()> {
        let used = self.used.borrow();
        for k in self.map.keys().filter(|k| k.starts_with(prefix)) {
            if !used.contains(&k.as_str()) {
                return Err(Error::invalid(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }
}

pub fn backbone_to_kv(c: &BackboneConfig, out: &mut BTreeMap<String, String>) {
    let mut put = |k: &str, v: String| {
        out.insert(format!("model.{k}"), v);
    };
    put("layers", c.layers.to_string());
    put("width", c.width.to_string());
    put("heads", c.heads.to_string());
    put("mlp_ratio", c.mlp_ratio.to_string());
    put("components", c.components.to_string());
    put("rank", c.rank.to_string());
    put("len", c.len.to_string());
    put("depth", c.depth.to_string());
    put("vocab", c.vocab.to_string());
    put("dim", c.dim.to_string());
    put("num_classes", c.num_classes.to_string());
    put("time_freqs", c.time_freqs.to_string());
    put("positional", c.positional.to_string());
    put("offset_init", format!("{:?}", c.offset_init));
}

pub fn backbone_from_kv(kv: &KvReader<'_>, base: BackboneConfig) -> Result<BackboneConfig> {
    Ok(BackboneConfig {
        layers: kv.get("model.layers", base.layers)?,
        width: kv.get("model.width", base.width)?,
        heads: kv.get("model.heads", base.heads)?,
        mlp_ratio: kv.get("model.mlp_ratio", base.mlp_ratio)?,
        components: kv.get("model.components", base.components)?,
        rank: kv.get("model.rank", base.rank)?,
        len: kv.get("model.len", base.len)?,
        depth: kv.get("model.depth", base.depth)?,
        vocab: kv.get("model.vocab", base.vocab)?,
        dim: kv.get("model.dim", base.dim)?,
        num_classes: kv.get("model.num_classes", base.num_classes)?,
        time_freqs: kv.get("model.time_freqs", base.time_freqs)?,
        positional: kv.get("model.positional", base.positional)?,
        offset_init: kv.get("model.offset_init", base.offset_init)?,
    })
}

pub fn train_to_kv(c: &TrainConfig, out: &mut BTreeMap<String, String>) {
    let mut put = |k: &str, v: String| {
        out.insert(format!("train.{k}"), v);
    };
    put("steps", c.steps.to_string());
    put("batch_size", c.batch_size.to_string());
    put("lr", format!("{:?}", c.lr));
    put("warmup", c.warmup.to_string());
    put("beta1", format!("{:?}", c.beta1));
    put("beta2", format!("{:?}", c.beta2));
    put("eps", format!("{:?}", c.eps));
    put("weight_decay", format!("{:?}", c.weight_decay));
    put("grad_clip", format!("{:?}", c.grad_clip));
    put("ema_decay", format!("{:?}", c.ema_decay));
    put("schedule", c.schedule.to_string());
    put("label_dropout", format!("{:?}", c.label_dropout));
    put("detach_q", c.detach_q.to_string());
    put("seed", c.seed.to_string());
    put("checkpoint_every", c.checkpoint_every.to_string());
    put(
        "audit_steps",
        c.audit_steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
}

pub fn train_from_kv(kv: &KvReader<'_>, base: TrainConfig) -> Result<TrainConfig> {
    let audit: String = kv.get(
        "train.audit_steps",
        base.audit_steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    )?;
    let audit_steps = audit
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad audit step `{s}`")))
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(TrainConfig {
        steps: kv.get("train.steps", base.steps)?,
        batch_size: kv.get("train.batch_size", base.batch_size)?,
        lr: kv.get("train.lr", base.lr)?,
        warmup: kv.get("train.warmup", base.warmup)?,
        beta1: kv.get("train.beta1", base.beta1)?,
        beta2: kv.get("train.beta2", base.beta2)?,
        eps: kv.get("train.eps", base.eps)?,
        weight_decay: kv.get("train.weight_decay", base.weight_decay)?,
        grad_clip: kv.get("train.grad_clip", base.grad_clip)?,
        ema_decay: kv.get("train.ema_decay", base.ema_decay)?,
        schedule: kv.get("train.schedule", base.schedule)?,
        label_dropout: kv.get("train.label_dropout", base.label_dropout)?,
        detach_q: kv.get("train.detach_q", base.detach_q)?,
        seed: kv.get("train.seed", base.seed)?,
        checkpoint_every: kv.get("train.checkpoint_every", base.checkpoint_every)?,
        audit_steps,
    })
}

/// A complete training snapshot: configs, codebook, parameters, optimizer
/// moments, EMA and step. The per-step RNG is derived from the seed and step,
/// so no generator state beyond those two is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub book: Codebook,
    pub state: TrainState,
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore) {
    put_u32(out, store.len() as u32);
    for (name, t) in store {
        put_string(out, name);
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        put_f64s(out, t.data());
    }
}

fn read_store(r: &mut Reader<'_>) -> Result<ParamStore> {
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let mut kv = BTreeMap::new();
        backbone_to_kv(&self.state.model.config, &mut kv);
        train_to_kv(&self.train, &mut kv);
        put_string(&mut out, &format_kv(&kv));
        put_u64(&mut out, self.state.step);
        let book = self.book.to_bytes();
        put_u64(&mut out, book.len() as u64);
        out.extend_from_slice(&book);
        for store in [&self.state.model.params, &self.state.ema, &self.state.adam_m, &self.state.adam_v] {
            put_store(&mut out, store);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let text = r.string()?;
        let map = parse_kv(&text)?;
        let kv = KvReader::new(&map);
        let config = backbone_from_kv(&kv, BackboneConfig::default())?;
        let train = train_from_kv(&kv, TrainConfig::default())?;
        kv.finish("")?;
        let step = r.u64()?;
        let n = r.u64()? as usize;
        let book = Codebook::read_from(&mut r.take(n)?)?;
        let params = read_store(&mut r)?;
        let ema = read_store(&mut r)?;
        let adam_m = read_store(&mut r)?;
        let adam_v = read_store(&mut r)?;
        r.finish()?;
        let reference = Model::init(config.clone(), 0)?;
        for store in [&params, &ema, &adam_m, &adam_v] {
            let same = store.len() == reference.params.len()
                && store
                    .iter()
                    .zip(&reference.params)
                    .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
            if !same {
                return Err(Error::Format {
                    what: "checkpoint tensors".into(),
                    expected: "the parameter set implied by the stored model config".into(),
                    found: format!("{} tensors with other names or shapes", store.len()),
                });
            }
        }
        Ok(Checkpoint {
            train,
            book,
            state: TrainState {
                model: Model { config, params },
                ema,
                adam_m,
                adam_v,
                step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_file(path)?)
    }
}

/// Human-readable header of any artifact this crate writes.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    let magic = bytes.get(..4).unwrap_or(&bytes[..]);
    let mut out = format!("file={}\nbytes={}\n", path.display(), bytes.len());
    match magic {
        m if m == DATASET_MAGIC => {
            let d = Dataset::from_bytes(&bytes)?;
            out += &format!(
                "kind=dataset\nversion={DATASET_VERSION}\ncount={}\nlen={}\ndim={}\nnum_classes={}\n",
                d.count(),
                d.len,
                d.dim,
                d.num_classes
            );
        }
        m if m == CODEBOOK_MAGIC => {
            let b = load_codebook(path)?;
            out += &format!(
                "kind=codebook\nversion={CODEBOOK_VERSION}\ndepth={}\nvocab={}\ndim={}\nsigma={}\n",
                b.depth(),
                b.vocab(),
                b.dim(),
                b.sigma().iter().map(|s| format!("{s:.6e}")).collect::<Vec<_>>().join(",")
            );
        }
        m if m == CHECKPOINT_MAGIC => {
            let c = Checkpoint::from_bytes(&bytes)?;
            out += &format!(
                "kind=checkpoint\nversion={CHECKPOINT_VERSION}\nstep={}\nparams={}\n",
                c.state.step,
                c.state.model.param_count()
            );
            let mut kv = BTreeMap::new();
            backbone_to_kv(&c.state.model.config, &mut kv);
            train_to_kv(&c.train, &mut kv);
            out += &format_kv(&kv);
        }
        _ => {
            return Err(Error::Format {
                what: "artifact magic".into(),
                expected: "RGDS, RVQC or RGCK".into(),
                found: String::from_utf8_lossy(magic).into(),
            })
        }
    }
    Ok(out)
}

/// One grid per line, depth-major.
pub fn token_dump(grids: &[crate::masking::TokenGrid]) -> String {
    grids.iter().map(|g| g.to_depth_major_line() + "\n").collect()
}
