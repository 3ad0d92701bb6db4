//! Mutual-information estimators and the disentanglement objective.
//!
//! Maximized terms use a contrastive lower bound over in-batch negatives
//! with a cosine critic `cos(g(x), h(y)) / τ`. Minimized terms use a
//! conditional-Gaussian upper bound. All inputs are `[B, D]` sample
//! matrices whose rows are paired.

use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Mlp};
use crate::tensor::{Scalar, Var};

pub const MIN_SAMPLES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundKind {
    Lower,
    Upper,
}

fn check_pair<T: Scalar>(g: &Graph<T>, x: Var, y: Var) -> Result<usize> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] {
        return Err(Error::dim(format!("paired samples must be [B,D] with equal B: {sx:?}, {sy:?}")));
    }
    if sx[0] < MIN_SAMPLES {
        return Err(Error::SampleSize {
            min: MIN_SAMPLES,
            got: sx[0],
        });
    }
    Ok(sx[0])
}

/// Temperature of the cosine critic; scores lie in `[-1/τ, 1/τ]`.
pub const NCE_TEMPERATURE: f64 = 0.1;

fn unit_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let n = g.sum_axis(sq, 1)?;
    let n = g.add_scalar(n, T::lit(1e-8))?;
    let ln = g.log(n)?;
    let ln = g.scale(ln, T::lit(-0.5))?;
    let inv = g.exp(ln)?;
    g.mul(x, inv)
}

/// Contrastive lower bound. The estimate never exceeds `ln B`.
#[derive(Clone, Debug)]
pub struct InfoNce {
    pub g: Mlp,
    pub h: Mlp,
}

impl InfoNce {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dx: usize, dy: usize, hidden: usize, embed: usize) -> Result<Self> {
        Ok(InfoNce {
            g: Mlp::new(init, &format!("{name}.g"), &[dx, hidden, embed])?,
            h: Mlp::new(init, &format!("{name}.h"), &[dy, hidden, embed])?,
        })
    }

    pub fn estimate<T: Scalar>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let b = check_pair(g, x, y)?;
        let gx = self.g.forward(g, x)?;
        let gx = unit_rows(g, gx)?;
        let gx = g.scale(gx, T::lit(1.0 / NCE_TEMPERATURE))?;
        let hy = self.h.forward(g, y)?;
        let hy = unit_rows(g, hy)?;
        let ht = g.transpose(hy)?;
        let scores = g.matmul(gx, ht)?;
        let pos = g.diag(scores)?;
        let pos = g.mean(pos)?;
        let lse = g.logsumexp_rows(scores)?;
        let lse = g.mean(lse)?;
        let v = g.sub(pos, lse)?;
        g.add_scalar(v, T::lit((b as f64).ln()))
    }

    /// The critic maximizes the bound itself.
    pub fn objective<T: Scalar>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        self.estimate(g, x, y)
    }
}

/// Upper bound from a learned conditional Gaussian `q(y|x)`.
#[derive(Clone, Debug)]
pub struct Club {
    pub mu: Mlp,
    pub logvar: Mlp,
}

impl Club {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dx: usize, dy: usize, hidden: usize) -> Result<Self> {
        Ok(Club {
            mu: Mlp::new(init, &format!("{name}.mu"), &[dx, hidden, dy])?,
            logvar: Mlp::new(init, &format!("{name}.logvar"), &[dx, hidden, dy])?,
        })
    }

    /// `(mu, 1 / (2 var), logvar)`, log-variance squashed into (-1, 1).
    fn gaussian<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var, Var)> {
        let mu = self.mu.forward(g, x)?;
        let raw = self.logvar.forward(g, x)?;
        let lv = g.tanh(raw)?;
        let neg = g.neg(lv)?;
        let prec = g.exp(neg)?;
        let half_prec = g.scale(prec, T::lit(0.5))?;
        Ok((mu, half_prec, lv))
    }

    /// Mean over pairs of `log q(y_i|x_i)` minus the mean over all `(i, j)`
    /// of `log q(y_j|x_i)`. The all-pairs mean uses the first two sample
    /// moments of `y`, so it costs `O(B·D)`.
    pub fn estimate<T: Scalar>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let b = check_pair(g, x, y)?;
        let (mu, hp, _) = self.gaussian(g, x)?;
        if g.shape(mu) != g.shape(y) {
            return Err(Error::dim(format!("club: prediction {:?} vs target {:?}", g.shape(mu), g.shape(y))));
        }
        let inv_b = T::one() / T::count(b);
        let d = g.sub(y, mu)?;
        let d2 = g.square(d)?;
        let pos = g.mul(d2, hp)?;
        let pos = g.sum(pos)?;
        let m1 = g.mean_axis(y, 0)?;
        let y2 = g.square(y)?;
        let m2 = g.mean_axis(y2, 0)?;
        let mu2 = g.square(mu)?;
        let cross = g.mul(mu, m1)?;
        let cross = g.scale(cross, T::lit(2.0))?;
        let spread = g.sub(mu2, cross)?;
        let spread = g.add(spread, m2)?;
        let neg = g.mul(spread, hp)?;
        let neg = g.sum(neg)?;
        let v = g.sub(neg, pos)?;
        g.scale(v, inv_b)
    }

    /// Mean conditional log-likelihood (up to a constant), which the critic
    /// maximizes.
    pub fn objective<T: Scalar>(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let b = check_pair(g, x, y)?;
        let (mu, hp, lv) = self.gaussian(g, x)?;
        if g.shape(mu) != g.shape(y) {
            return Err(Error::dim(format!("club: prediction {:?} vs target {:?}", g.shape(mu), g.shape(y))));
        }
        let d = g.sub(y, mu)?;
        let d2 = g.square(d)?;
        let fit = g.mul(d2, hp)?;
        let half_lv = g.scale(lv, T::lit(0.5))?;
        let nll = g.add(fit, half_lv)?;
        let nll = g.sum(nll)?;
        g.scale(nll, -T::one() / T::count(b))
    }
}

const STANDARDIZE_EPS: f64 = 1e-5;

/// Per-dimension standardization over the batch of a `[B, D]` matrix.
/// Critic inputs pass through this so the model cannot move a bound by
/// rescaling its features.
pub fn standardize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    if g.shape(x).len() != 2 {
        return Err(Error::dim(format!("standardize expects [B,D], got {:?}", g.shape(x))));
    }
    let m = g.mean_axis(x, 0)?;
    let c = g.sub(x, m)?;
    let sq = g.square(c)?;
    let var = g.mean_axis(sq, 0)?;
    let var = g.add_scalar(var, T::lit(STANDARDIZE_EPS))?;
    let lv = g.log(var)?;
    let lv = g.scale(lv, T::lit(-0.5))?;
    let inv = g.exp(lv)?;
    g.mul(c, inv)
}

/// Feature dimensions seen by the six critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiDims {
    pub motion: usize,
    pub useful: usize,
    pub noisy: usize,
    pub enhanced: usize,
    pub visual: usize,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct MiCritics {
    pub t1: Club,
    pub t2: InfoNce,
    pub t3y: Club,
    pub t3f: InfoNce,
    pub t4y: Club,
    pub t4f: InfoNce,
}

impl MiCritics {
    pub fn new<T: Scalar>(init: &mut Init<T>, d: MiDims, hidden: usize, embed: usize) -> Result<Self> {
        let p = "rdm.critic";
        Ok(MiCritics {
            t1: Club::new(init, &format!("{p}.t1"), d.useful, d.noisy, hidden)?,
            t2: InfoNce::new(init, &format!("{p}.t2"), d.motion, d.useful, hidden, embed)?,
            t3y: Club::new(init, &format!("{p}.t3y"), d.useful, d.label, hidden)?,
            t3f: InfoNce::new(init, &format!("{p}.t3f"), d.useful, d.enhanced, hidden, embed)?,
            t4y: Club::new(init, &format!("{p}.t4y"), d.visual, d.label, hidden)?,
            t4f: InfoNce::new(init, &format!("{p}.t4f"), d.visual, d.enhanced, hidden, embed)?,
        })
    }
}

/// Pooled `[B, C]` features and flattened labels `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct MiInputs {
    pub motion: Var,
    pub useful: Var,
    pub noisy: Var,
    pub enhanced: Var,
    pub visual: Var,
    pub labels: Var,
}

impl MiInputs {
    pub fn detached<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Self> {
        Ok(MiInputs {
            motion: g.detach(self.motion)?,
            useful: g.detach(self.useful)?,
            noisy: g.detach(self.noisy)?,
            enhanced: g.detach(self.enhanced)?,
            visual: g.detach(self.visual)?,
            labels: g.detach(self.labels)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiTerms<V> {
    pub t1: V,
    pub t2: V,
    pub t3: V,
    pub t4: V,
    pub total: V,
}

/// `t1 - t2 + t3 + t4`.
pub fn compose(t1: f64, t2: f64, t3: f64, t4: f64) -> f64 {
    t1 - t2 + t3 + t4
}

impl MiTerms<f64> {
    pub fn from_parts(t1: f64, t2: f64, t3: f64, t4: f64) -> Self {
        MiTerms {
            t1,
            t2,
            t3,
            t4,
            total: compose(t1, t2, t3, t4),
        }
    }
}

impl MiTerms<Var> {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> MiTerms<f64> {
        let v = |x: Var| g.value(x).item().as_f64();
        MiTerms {
            t1: v(self.t1),
            t2: v(self.t2),
            t3: v(self.t3),
            t4: v(self.t4),
            total: v(self.total),
        }
    }
}

/// The disentanglement objective on the tape. `stop_noisy` treats the noisy
/// part as a fixed landmark in the first term.
pub fn mi_loss<T: Scalar>(g: &mut Graph<T>, c: &MiCritics, x: &MiInputs, stop_noisy: bool) -> Result<MiTerms<Var>> {
    let noisy = if stop_noisy { g.detach(x.noisy)? } else { x.noisy };
    let t1 = c.t1.estimate(g, x.useful, noisy)?;
    let t2 = c.t2.estimate(g, x.motion, x.useful)?;
    let a = c.t3y.estimate(g, x.useful, x.labels)?;
    let b = c.t3f.estimate(g, x.useful, x.enhanced)?;
    let t3 = g.sub(a, b)?;
    let a = c.t4y.estimate(g, x.visual, x.labels)?;
    let b = c.t4f.estimate(g, x.visual, x.enhanced)?;
    let t4 = g.sub(a, b)?;
    let total = g.sub(t1, t2)?;
    let total = g.add(total, t3)?;
    let total = g.add(total, t4)?;
    Ok(MiTerms { t1, t2, t3, t4, total })
}

/// Sum of every critic's own objective, negated for minimization. Inputs
/// should be detached so only critic parameters receive gradients.
pub fn critic_loss<T: Scalar>(g: &mut Graph<T>, c: &MiCritics, x: &MiInputs) -> Result<Var> {
    let parts = [
        c.t1.objective(g, x.useful, x.noisy)?,
        c.t2.objective(g, x.motion, x.useful)?,
        c.t3y.objective(g, x.useful, x.labels)?,
        c.t3f.objective(g, x.useful, x.enhanced)?,
        c.t4y.objective(g, x.visual, x.labels)?,
        c.t4f.objective(g, x.visual, x.enhanced)?,
    ];
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.neg(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_arithmetic() {
        let t = MiTerms::from_parts(0.5, 0.3, 0.1, 0.2);
        assert!((t.total - 0.5).abs() < 1e-15);
    }
}
