//! Synthetic mixture datasets with known generating parameters.
//!
//! Every record draws one mode, a 2-D point `c` around that mode's centre,
//! and writes `x_i = B·R(θ_i)·c + noise` at each position `i`, where `B` is
//! a fixed `H × 2` orthonormal frame and `R(θ_i)` a per-position rotation
//! with `θ_i = π·i/L`. The whole record therefore carries a single mode.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{atomic_write, format_kv, parse_kv, read_file, Dataset, KvReader};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// `√modes × √modes` lattice of centres.
    Grid,
    /// Centres evenly spaced on a circle.
    Ring,
    /// Each class owns a small ring of modes, classes shifted apart.
    Classes,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Grid => "grid",
            Family::Ring => "ring",
            Family::Classes => "classes",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Family::Grid),
            "ring" => Ok(Family::Ring),
            "classes" => Ok(Family::Classes),
            _ => Err(Error::invalid(format!(
                "unknown family `{s}` (known: grid, ring, classes)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub family: Family,
    pub count: usize,
    pub len: usize,
    pub dim: usize,
    /// Total modes; for `Classes`, modes per class.
    pub modes: usize,
    pub classes: usize,
    pub spacing: f64,
    /// Jitter of a record's shared 2-D point around its mode; couples all positions.
    pub mode_std: f64,
    /// Independent per-element noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            family: Family::Grid,
            count: 10_000,
            len: 8,
            dim: 8,
            modes: 9,
            classes: 0,
            spacing: 1.0,
            mode_std: 0.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Generating parameters, enough to regenerate the distribution and to
/// assign any vector set back to modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub family: Family,
    pub len: usize,
    pub dim: usize,
    pub centers: Vec<[f64; 2]>,
    /// Class of each mode (all 0 when unlabelled).
    pub mode_class: Vec<usize>,
    pub num_classes: usize,
    pub mode_std: f64,
    pub noise: f64,
    /// `H × 2`, row-major, orthonormal columns.
    pub frame: Vec<f64>,
}

impl Truth {
    fn angle(&self, i: usize) -> f64 {
        PI * i as f64 / self.len as f64
    }

    /// `B·R(θ_i)·c`.
    pub fn embed(&self, i: usize, c: [f64; 2]) -> Vec<f64> {
        let (s, co) = self.angle(i).sin_cos();
        let rc = [co * c[0] - s * c[1], s * c[0] + co * c[1]];
        (0..self.dim)
            .map(|k| self.frame[2 * k] * rc[0] + self.frame[2 * k + 1] * rc[1])
            .collect()
    }

    /// Least-squares 2-D point of a record, averaged over positions.
    pub fn project(&self, record: &[f64]) -> [f64; 2] {
        let mut acc = [0.0; 2];
        for i in 0..self.len {
            let x = &record[i * self.dim..(i + 1) * self.dim];
            let mut p = [0.0; 2];
            for k in 0..self.dim {
                p[0] += self.frame[2 * k] * x[k];
                p[1] += self.frame[2 * k + 1] * x[k];
            }
            let (s, co) = self.angle(i).sin_cos();
            acc[0] += co * p[0] + s * p[1];
            acc[1] += -s * p[0] + co * p[1];
        }
        [acc[0] / self.len as f64, acc[1] / self.len as f64]
    }

    pub fn nearest_mode(&self, record: &[f64]) -> usize {
        let p = self.project(record);
        let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        (0..self.centers.len())
            .min_by(|&a, &b| d(&self.centers[a]).total_cmp(&d(&self.centers[b])))
            .expect("at least one mode")
    }

    /// Draws `count` records and the mode each came from.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<(Dataset, Vec<usize>)> {
        let mut labels = Vec::with_capacity(count);
        let mut modes = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * self.len * self.dim);
        for _ in 0..count {
            let m = rng.random_range(0..self.centers.len());
            let ctr = self.centers[m];
            let c = [
                ctr[0] + self.mode_std * rng.sample::<f64, _>(StandardNormal),
                ctr[1] + self.mode_std * rng.sample::<f64, _>(StandardNormal),
            ];
            for i in 0..self.len {
                for x in self.embed(i, c) {
                    values.push(x + self.noise * rng.sample::<f64, _>(StandardNormal));
                }
            }
            labels.push(self.mode_class[m] as u32);
            modes.push(m);
        }
        Ok((Dataset::new(self.len, self.dim, self.num_classes, labels, values)?, modes))
    }

    /// Fraction of records closest to each mode.
    pub fn occupancy(&self, data: &Dataset) -> Vec<f64> {
        let mut counts = vec![0usize; self.centers.len()];
        for n in 0..data.count() {
            counts[self.nearest_mode(data.record(n))] += 1;
        }
        counts.iter().map(|&c| c as f64 / data.count().max(1) as f64).collect()
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut kv = BTreeMap::new();
        kv.insert("family".into(), self.family.to_string());
        kv.insert("len".into(), self.len.to_string());
        kv.insert("dim".into(), self.dim.to_string());
        kv.insert("num_classes".into(), self.num_classes.to_string());
        kv.insert("mode_std".into(), format!("{:?}", self.mode_std));
        kv.insert("noise".into(), format!("{:?}", self.noise));
        kv.insert(
            "centers".into(),
            join(self.centers.iter().map(|c| format!("{:?}:{:?}", c[0], c[1])).collect()),
        );
        kv.insert("mode_class".into(), join(self.mode_class.iter().map(|c| c.to_string()).collect()));
        kv.insert("frame".into(), join(self.frame.iter().map(|x| format!("{x:?}")).collect()));
        format_kv(&kv)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let kv = KvReader::new(&map);
        let floats = |s: &str| -> Result<Vec<f64>> {
            s.split([',', ':'])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad number `{t}` in truth file"))))
                .collect()
        };
        let family: Family = kv.get("family", Family::Grid)?;
        let len: usize = kv.get("len", 0)?;
        let dim: usize = kv.get("dim", 0)?;
        let centers: Vec<[f64; 2]> = floats(&kv.get::<String>("centers", String::new())?)?
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let mode_class = kv
            .get::<String>("mode_class", String::new())?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad class `{t}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let frame = floats(&kv.get::<String>("frame", String::new())?)?;
        let truth = Truth {
            family,
            len,
            dim,
            num_classes: kv.get("num_classes", 0)?,
            mode_std: kv.get("mode_std", 0.0)?,
            noise: kv.get("noise", 0.0)?,
            centers,
            mode_class,
            frame,
        };
        kv.finish("")?;
        if truth.len == 0 || truth.dim < 2 || truth.frame.len() != 2 * truth.dim || truth.centers.is_empty()
            || truth.mode_class.len() != truth.centers.len()
        {
            return Err(Error::invalid("truth file is incomplete"));
        }
        Ok(truth)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Truth::from_text(&String::from_utf8_lossy(&bytes))
    }
}

/// Sidecar path holding the generating parameters of a dataset file.
pub fn truth_path(dataset: &Path) -> std::path::PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".truth");
    s.into()
}

fn frame(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < 2 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    (0..dim).flat_map(|k| [cols[0][k], cols[1][k]]).collect()
}

fn centers(cfg: &SynthConfig) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    let s = cfg.spacing;
    match cfg.family {
        Family::Grid => {
            let side = (cfg.modes as f64).sqrt().round() as usize;
            if side * side != cfg.modes {
                return Err(Error::invalid(format!("grid needs a square mode count, got {}", cfg.modes)));
            }
            let mid = (side as f64 - 1.0) / 2.0;
            let c = (0..cfg.modes)
                .map(|m| [((m % side) as f64 - mid) * s, ((m / side) as f64 - mid) * s])
                .collect();
            Ok((c, vec![0; cfg.modes]))
        }
        Family::Ring => {
            let radius = s * (cfg.modes as f64 / (2.0 * PI)).max(1.0);
            let c = (0..cfg.modes)
                .map(|m| {
                    let a = 2.0 * PI * m as f64 / cfg.modes as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect();
            Ok((c, vec![0; cfg.modes]))
        }
        Family::Classes => {
            if cfg.classes == 0 {
                return Err(Error::invalid("class-conditional family needs at least one class"));
            }
            let mid = (cfg.classes as f64 - 1.0) / 2.0;
            let mut c = Vec::new();
            let mut owner = Vec::new();
            for k in 0..cfg.classes {
                for m in 0..cfg.modes {
                    let a = 2.0 * PI * m as f64 / cfg.modes as f64;
                    c.push([(k as f64 - mid) * 2.0 * s + 0.5 * s * a.cos(), 0.5 * s * a.sin()]);
                    owner.push(k);
                }
            }
            Ok((c, owner))
        }
    }
}

/// Draws the dataset and returns the mode of each record alongside.
pub fn synthesize(cfg: &SynthConfig) -> Result<(Dataset, Truth, Vec<usize>)> {
    if cfg.count == 0 {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    if cfg.modes == 0 || cfg.len == 0 || cfg.dim < 2 {
        return Err(Error::invalid("need at least one mode, L ≥ 1 and H ≥ 2"));
    }
    if !(cfg.mode_std >= 0.0 && cfg.noise >= 0.0 && cfg.spacing > 0.0) {
        return Err(Error::invalid("spreads must be non-negative and spacing positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (centers, mode_class) = centers(cfg)?;
    let num_classes = if cfg.family == Family::Classes { cfg.classes } else { 0 };
    let truth = Truth {
        family: cfg.family,
        len: cfg.len,
        dim: cfg.dim,
        centers,
        mode_class,
        num_classes,
        mode_std: cfg.mode_std,
        noise: cfg.noise,
        frame: frame(cfg.dim, &mut rng),
    };
    let (data, modes) = truth.sample(cfg.count, &mut rng)?;
    Ok((data, truth, modes))
}
