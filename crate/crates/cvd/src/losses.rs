//! Training objectives: sliced-Wasserstein independence, cross-view
//! reconstruction MSE, InfoNCE localization, and the weighted total.

use rand::Rng;

use crate::error::{CvdError, Result};
use crate::tensor::Tensor;

/// The loss components of one training step. All fields are scalar
/// tensors on the same tape.
pub struct LossReport {
    pub iic_d: Tensor,
    pub iic_s: Tensor,
    pub irc_d: Tensor,
    pub irc_s: Tensor,
    pub loc: Tensor,
    pub total: Tensor,
}

/// Plain-number view of a [`LossReport`].
#[derive(Debug, Clone, Copy)]
pub struct LossValues {
    pub iic_d: f64,
    pub iic_s: f64,
    pub irc_d: f64,
    pub irc_s: f64,
    pub loc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn values(&self) -> LossValues {
        LossValues {
            iic_d: self.iic_d.item(),
            iic_s: self.iic_s.item(),
            irc_d: self.irc_d.item(),
            irc_s: self.irc_s.item(),
            loc: self.loc.item(),
            total: self.total.item(),
        }
    }
}

/// Recompute the weighted total from logged components with the exact
/// expression used on the tape; the CSV accounting identity checks
/// against this.
pub fn total_from_components(v: &LossValues, lambda1: f64, lambda2: f64) -> f64 {
    (v.iic_d + v.iic_s) * 0.5 * lambda1 + (v.irc_d + v.irc_s) * 0.5 * lambda2 + v.loc
}

/// Flatten per-sample spatial factor maps to [B, C*H*W] rows.
pub fn flatten_factors(z_c: &Tensor, z_v: &Tensor) -> Result<(Tensor, Tensor)> {
    if z_c.shape().len() != 4 || z_v.shape().len() != 4 {
        return Err(CvdError::Shape("flatten_factors expects [B,C,H,W] maps".into()));
    }
    if z_c.shape()[0] != z_v.shape()[0] || z_c.shape()[2..] != z_v.shape()[2..] {
        return Err(CvdError::Shape(format!(
            "factor maps disagree: {:?} vs {:?}",
            z_c.shape(),
            z_v.shape()
        )));
    }
    let b = z_c.shape()[0];
    let fc = z_c.reshape(&[b, z_c.numel() / b])?;
    let fv = z_v.reshape(&[b, z_v.numel() / b])?;
    Ok((fc, fv))
}

/// Sample a derangement (fixed-point-free permutation) of 0..b from the
/// graph rng by rejection.
fn sample_derangement(t: &Tensor, b: usize) -> Vec<usize> {
    t.graph().with_rng(|rng| loop {
        let mut perm: Vec<usize> = (0..b).collect();
        // Fisher-Yates
        for i in (1..b).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    })
}

/// Empirical product-of-marginals rows: `[c_i ; v_pi(i)]` with `pi` a
/// random derangement drawn from the graph rng.
pub fn marginal_product_sample(c: &Tensor, v: &Tensor) -> Result<Tensor> {
    let b = c.shape()[0];
    if b < 2 {
        return Err(CvdError::Batch("product-of-marginals needs batch >= 2".into()));
    }
    if v.shape()[0] != b {
        return Err(CvdError::Shape("batch sizes disagree".into()));
    }
    let perm = sample_derangement(c, b);
    let shuffled = v.permute_rows(&perm)?;
    Tensor::concat_axis1(&[c, &shuffled])
}

/// Squared 1-D Wasserstein-2 distance between equally sized sample sets:
/// mean squared gap between sorted samples.
pub fn wasserstein2_1d(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 1 {
        return Err(CvdError::Shape(format!(
            "wasserstein2_1d expects equal-length vectors, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.shape()[0];
    let (sa, _) = a.sort_last()?;
    let (sb, _) = b.sort_last()?;
    sa.sub(&sb)?.square()?.sum_all()?.mul_scalar(1.0 / n as f64)
}

/// Monte-Carlo squared sliced Wasserstein-2 distance: K random unit
/// directions, exact sorted 1-D transport per slice, averaged. The
/// directions come from the graph rng and sit on the tape as constants,
/// so grad checks replay them.
pub fn sliced_w2(p: &Tensor, q: &Tensor, k: usize) -> Result<Tensor> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(CvdError::Shape(format!(
            "sliced_w2 expects matching [B,D] sets, got {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    if k < 1 {
        return Err(CvdError::Config("projection count must be >= 1".into()));
    }
    let (b, d) = (p.shape()[0], p.shape()[1]);
    let dirs = p.graph().with_rng(|rng| {
        let mut m = vec![0.0f64; d * k];
        for col in 0..k {
            loop {
                let mut norm2 = 0.0;
                for row in 0..d {
                    let v: f64 = rand::distributions::Distribution::sample(
                        &rand_distr::StandardNormal,
                        rng,
                    );
                    m[row * k + col] = v;
                    norm2 += v * v;
                }
                if norm2 > 1e-24 {
                    let inv = norm2.sqrt().recip();
                    for row in 0..d {
                        m[row * k + col] *= inv;
                    }
                    break;
                }
            }
        }
        m
    });
    let theta = p.graph().tensor(dirs, &[d, k], false)?;
    // [B,K] projections -> [K,B] slices -> sorted transport per slice.
    let pp = p.matmul(&theta)?.transpose2()?;
    let qp = q.matmul(&theta)?.transpose2()?;
    let (sp, _) = pp.sort_last()?;
    let (sq, _) = qp.sort_last()?;
    sp.sub(&sq)?
        .square()?
        .sum_all()?
        .mul_scalar(1.0 / (k * b) as f64)
}

/// Intra-view independence loss: sliced W2^2 between the empirical joint
/// of (content, viewpoint) rows and an in-batch product of marginals.
pub fn loss_iic(z_c: &Tensor, z_v: &Tensor, k: usize) -> Result<Tensor> {
    let joint = Tensor::concat_axis1(&[z_c, z_v])?;
    let product = marginal_product_sample(z_c, z_v)?;
    sliced_w2(&joint, &product, k)
}

/// Reconstruction loss: mean squared error over all elements.
pub fn loss_irc(original: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    if original.shape() != reconstructed.shape() {
        return Err(CvdError::Shape(format!(
            "reconstruction shape {:?} vs original {:?}",
            reconstructed.shape(),
            original.shape()
        )));
    }
    original.sub(reconstructed)?.square()?.mean_all()
}

fn infonce_one_direction(sim: &Tensor, b: usize) -> Result<Tensor> {
    let lse = sim.logsumexp_rows()?;
    let pos = sim.diag()?;
    lse.sub(&pos)?.sum_all()?.mul_scalar(1.0 / b as f64)
}

/// In-batch InfoNCE over unit-normalized content rows. Uni-directional
/// uses drone rows as queries against the satellite gallery; `bi` also
/// averages in the transposed direction.
pub fn loss_infonce(c_d: &Tensor, c_s: &Tensor, tau: f64, bi: bool) -> Result<Tensor> {
    if c_d.shape() != c_s.shape() || c_d.shape().len() != 2 {
        return Err(CvdError::Shape(format!(
            "infonce expects matching [B,D], got {:?} vs {:?}",
            c_d.shape(),
            c_s.shape()
        )));
    }
    if tau <= 0.0 {
        return Err(CvdError::Config("temperature must be positive".into()));
    }
    let (b, d) = (c_d.shape()[0], c_d.shape()[1]);
    for (name, t) in [("drone", c_d), ("satellite", c_s)] {
        let data = t.data();
        for r in 0..b {
            let norm: f64 = data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(CvdError::Precondition(format!(
                    "{name} row {r} is not unit-normalized (norm {norm})"
                )));
            }
        }
    }
    let sim = c_d.matmul(&c_s.transpose2()?)?.mul_scalar(1.0 / tau)?;
    let fwd = infonce_one_direction(&sim, b)?;
    if bi {
        let bwd = infonce_one_direction(&sim.transpose2()?, b)?;
        fwd.add(&bwd)?.mul_scalar(0.5)
    } else {
        Ok(fwd)
    }
}

/// Weighted total with per-view halving of the paired constraints.
pub fn loss_total(
    iic_d: Tensor,
    iic_s: Tensor,
    irc_d: Tensor,
    irc_s: Tensor,
    loc: Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossReport> {
    let iic_term = iic_d.add(&iic_s)?.mul_scalar(0.5)?.mul_scalar(lambda1)?;
    let irc_term = irc_d.add(&irc_s)?.mul_scalar(0.5)?.mul_scalar(lambda2)?;
    let total = iic_term.add(&irc_term)?.add(&loc)?;
    Ok(LossReport {
        iic_d,
        iic_s,
        irc_d,
        irc_s,
        loc,
        total,
    })
}
