//! Row kernels shared by graph ops and the plain-value code paths.

use super::tensor::Tensor;

/// Stable `log Σ exp(x)` with max subtraction.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// In-place softmax over a row.
pub fn softmax_in_place(row: &mut [f64]) {
    let lse = logsumexp(row);
    for x in row.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// Mean and inverse standard deviation of a row.
pub fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LowRankDims {
    pub m: usize,
    pub k: usize,
    pub big_h: usize,
    pub h: usize,
}

pub(crate) fn lowrank_dims(
    z: &Tensor,
    mu: &Tensor,
    basis: &Tensor,
    offset: &Tensor,
) -> Result<LowRankDims, String> {
    if basis.rank() != 3 || offset.rank() != 2 || z.rank() != 2 || mu.rank() != 2 {
        return Err(format!(
            "z {:?}, mu {:?}, basis {:?}, offset {:?}",
            z.shape(),
            mu.shape(),
            basis.shape(),
            offset.shape()
        ));
    }
    let (k, big_h, h) = (basis.shape()[0], basis.shape()[1], basis.shape()[2]);
    let m = z.shape()[0];
    if z.shape()[1] != big_h
        || offset.shape() != [k, big_h]
        || mu.shape() != [m, k * h]
    {
        return Err(format!(
            "z {:?}, mu {:?} inconsistent with basis {:?}, offset {:?}",
            z.shape(),
            mu.shape(),
            basis.shape(),
            offset.shape()
        ));
    }
    Ok(LowRankDims { m, k, big_h, h })
}

/// Per-component `MᵀM`, `Mᵀs` and `sᵀs`, plus the raw basis for `Mᵀz`.
pub struct LowRankCache<'a> {
    basis: &'a [f64],
    gram: Vec<f64>,
    mts: Vec<f64>,
    sts: Vec<f64>,
    offset: &'a [f64],
    big_h: usize,
    h: usize,
}

impl<'a> LowRankCache<'a> {
    pub(crate) fn new(basis: &'a Tensor, offset: &'a Tensor, dims: LowRankDims) -> Self {
        Self::from_slices(basis.data(), offset.data(), dims.k, dims.big_h, dims.h)
    }

    /// `basis` is `[k, big_h, h]` row-major, `offset` is `[k, big_h]`.
    pub fn from_slices(basis: &'a [f64], offset: &'a [f64], k: usize, big_h: usize, h: usize) -> Self {
        let mut gram = vec![0.0; k * h * h];
        let mut mts = vec![0.0; k * h];
        let mut sts = vec![0.0; k];
        for nu in 0..k {
            let m = &basis[nu * big_h * h..(nu + 1) * big_h * h];
            let s = &offset[nu * big_h..(nu + 1) * big_h];
            let g = &mut gram[nu * h * h..(nu + 1) * h * h];
            for r in 0..big_h {
                let mrow = &m[r * h..(r + 1) * h];
                for a in 0..h {
                    for b in 0..h {
                        g[a * h + b] += mrow[a] * mrow[b];
                    }
                    mts[nu * h + a] += mrow[a] * s[r];
                }
            }
            sts[nu] = s.iter().map(|x| x * x).sum();
        }
        LowRankCache {
            basis,
            gram,
            mts,
            sts,
            offset,
            big_h,
            h,
        }
    }

    /// `zᵀz + μ̃ᵀ(MᵀM)μ̃ + sᵀs − 2(Mᵀz)ᵀμ̃ − 2zᵀs + 2μ̃ᵀMᵀs` for component `nu`.
    pub fn sqdist(&self, nu: usize, z: &[f64], zz: f64, mu: &[f64]) -> f64 {
        let (big_h, h) = (self.big_h, self.h);
        let m = &self.basis[nu * big_h * h..(nu + 1) * big_h * h];
        let s = &self.offset[nu * big_h..(nu + 1) * big_h];
        let g = &self.gram[nu * h * h..(nu + 1) * h * h];
        let mts = &self.mts[nu * h..(nu + 1) * h];

        let mut quad = 0.0;
        for a in 0..h {
            let mut row = 0.0;
            for b in 0..h {
                row += g[a * h + b] * mu[b];
            }
            quad += mu[a] * row;
        }
        let mut mtz_mu = 0.0;
        let mut zs = 0.0;
        for r in 0..big_h {
            let mrow = &m[r * h..(r + 1) * h];
            let proj: f64 = mrow.iter().zip(mu).map(|(a, b)| a * b).sum();
            mtz_mu += z[r] * proj;
            zs += z[r] * s[r];
        }
        let mu_mts: f64 = mu.iter().zip(mts).map(|(a, b)| a * b).sum();
        zz + quad + self.sts[nu] - 2.0 * mtz_mu - 2.0 * zs + 2.0 * mu_mts
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lowrank_sqdist_backward(
    dims: LowRankDims,
    z: &Tensor,
    mu: &Tensor,
    basis: &Tensor,
    offset: &Tensor,
    g: &Tensor,
    dz: &mut Tensor,
    dmu: &mut Tensor,
    dbasis: &mut Tensor,
    doffset: &mut Tensor,
) {
    let LowRankDims { m, k, big_h, h } = dims;
    let mut resid = vec![0.0; big_h];
    for i in 0..m {
        let zi = z.row(i);
        for nu in 0..k {
            let gi = g.data()[i * k + nu];
            if gi == 0.0 {
                continue;
            }
            let mt = &mu.row(i)[nu * h..(nu + 1) * h];
            let mb = &basis.data()[nu * big_h * h..(nu + 1) * big_h * h];
            let s = &offset.data()[nu * big_h..(nu + 1) * big_h];
            // resid = (M μ̃ + s) − z, so d/dμ = 2·resid
            for r in 0..big_h {
                let proj: f64 = mb[r * h..(r + 1) * h].iter().zip(mt).map(|(a, b)| a * b).sum();
                resid[r] = proj + s[r] - zi[r];
            }
            let scale = 2.0 * gi;
            for (d, &e) in dz.row_mut(i).iter_mut().zip(&resid) {
                *d -= scale * e;
            }
            for (d, &e) in doffset.data_mut()[nu * big_h..(nu + 1) * big_h]
                .iter_mut()
                .zip(&resid)
            {
                *d += scale * e;
            }
            let dmu_row = &mut dmu.row_mut(i)[nu * h..(nu + 1) * h];
            let db = &mut dbasis.data_mut()[nu * big_h * h..(nu + 1) * big_h * h];
            for r in 0..big_h {
                let e = scale * resid[r];
                let mrow = &mb[r * h..(r + 1) * h];
                for a in 0..h {
                    dmu_row[a] += e * mrow[a];
                    db[r * h + a] += e * mt[a];
                }
            }
        }
    }
}
