//! Mixture-of-experts training losses.
//!
//! A mixture head proposes `k` Gaussian primitives for the missing-region
//! latent. Each step picks the primitive closest (in KL) to the complement
//! encoder's posterior: the *best* primitive. Two losses train the head:
//!
//! * the frequency loss pulls the mixing coefficients toward the long-run
//!   frequency with which each primitive wins, and
//! * the back-propagate-max loss differentiates the closed-form KL of only
//!   the winning primitive, leaving the selection itself out of the graph.
//!
//! The selection index is recomputed from current values every step and is
//! never differentiated through.

use crate::dist::{kl_diag_gaussian, DiagGaussian, GaussianMixture};
use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::{Tape, Var};

#[cfg(test)]
use crate::tensor::Tensor;

/// A diagonal Gaussian whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Plain-value snapshot for non-differentiable decisions.
    pub fn snapshot(&self, tape: &Tape) -> DiagGaussian {
        DiagGaussian::new(tape.val(self.mean).to_vec(), tape.val(self.log_var).to_vec())
    }

    /// Reparameterized sample on the tape: `mean + exp(0.5·log_var) ⊙ noise`.
    /// The noise is a recorded constant, so gradients flow to mean/log_var.
    pub fn sample(&self, tape: &mut Tape, rng: &mut Prng) -> Result<Var> {
        let d = tape.numel(self.mean);
        let noise = tape.constant_vec(&[d], rng.normal_vec(d));
        let half_lv = tape.scale(self.log_var, 0.5);
        let std = tape.exp(half_lv);
        let scaled = tape.mul(std, noise)?;
        tape.add(self.mean, scaled)
    }
}

/// A Gaussian mixture whose parameters live on a tape: mixing coefficients
/// `alpha` ([k], softmax output) plus flattened component means/log-variances
/// ([k·d], component-major).
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub alpha: Var,
    pub means: Var,
    pub log_vars: Var,
    pub k: usize,
    pub d: usize,
}

impl MixtureVars {
    /// Tape handles for component `i`.
    pub fn component(&self, tape: &mut Tape, i: usize) -> Result<GaussianVars> {
        if i >= self.k {
            return Err(Error::Contract(format!(
                "component index {i} out of range (k = {})",
                self.k
            )));
        }
        Ok(GaussianVars {
            mean: tape.slice(self.means, i * self.d, self.d)?,
            log_var: tape.slice(self.log_vars, i * self.d, self.d)?,
        })
    }

    /// Plain-value snapshot of the whole mixture.
    pub fn snapshot(&self, tape: &Tape) -> Result<GaussianMixture> {
        let alpha = tape.val(self.alpha).to_vec();
        let means = tape.val(self.means);
        let lvs = tape.val(self.log_vars);
        let comps = (0..self.k)
            .map(|i| {
                DiagGaussian::new(
                    means[i * self.d..(i + 1) * self.d].to_vec(),
                    lvs[i * self.d..(i + 1) * self.d].to_vec(),
                )
            })
            .collect();
        Ok(GaussianMixture::new(
            crate::dist::Categorical::new(alpha)
                .map_err(|_| Error::Numeric("mixture weights"))?,
            comps,
        ))
    }
}

/// Winner of the per-step selection: the argmin index plus every
/// primitive's KL to the target.
#[derive(Clone, Debug)]
pub struct BestPrimitive {
    pub index: usize,
    pub kls: Vec<f64>,
}

/// Argmin over `KL(component_i ‖ target)`, ties broken toward the smallest
/// index. Operates on plain values — the selection is not differentiable.
pub fn best_primitive(m: &GaussianMixture, target: &DiagGaussian) -> Result<BestPrimitive> {
    let mut kls = Vec::with_capacity(m.k());
    for c in &m.components {
        kls.push(kl_diag_gaussian(c, target)?);
    }
    let mut index = 0;
    for (i, &v) in kls.iter().enumerate() {
        if v < kls[index] {
            index = i;
        }
    }
    Ok(BestPrimitive { index, kls })
}

/// Squared distance between the mixing coefficients and the one-hot
/// indicator of the winning primitive: `Σ_i (v_i − α_i)²`. The indicator is
/// a recorded constant; gradients reach only the α-producing logits.
pub fn frequency_loss(tape: &mut Tape, alpha: Var, best: &BestPrimitive) -> Result<Var> {
    let k = tape.numel(alpha);
    if best.index >= k {
        return Err(Error::Contract(format!(
            "best index {} out of range (k = {k})",
            best.index
        )));
    }
    let mut one_hot = vec![0.0; k];
    one_hot[best.index] = 1.0;
    let v = tape.constant_vec(&[k], one_hot);
    let diff = tape.sub(v, alpha)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// Closed-form KL between two diagonal Gaussians as a tape expression:
///
/// ```text
/// 1/2 · Σ_t [ lvq − lvp − 1 + exp(lvp − lvq) + (μp − μq)² · exp(−lvq) ]
/// ```
pub fn kl_diag_tape(tape: &mut Tape, p: &GaussianVars, q: &GaussianVars) -> Result<Var> {
    if tape.numel(p.mean) != tape.numel(q.mean) {
        return Err(Error::Shape {
            op: "kl_diag_tape",
            lhs: tape.shape(p.mean).to_vec(),
            rhs: tape.shape(q.mean).to_vec(),
        });
    }
    let lv_diff = tape.sub(q.log_var, p.log_var)?; // lvq − lvp
    let ratio = tape.sub(p.log_var, q.log_var)?;
    let ratio = tape.exp(ratio); // σp²/σq²
    let dm = tape.sub(p.mean, q.mean)?;
    let dm2 = tape.square(dm);
    let inv_q = tape.scale(q.log_var, -1.0);
    let inv_q = tape.exp(inv_q); // 1/σq²
    let quad = tape.mul(dm2, inv_q)?;
    let s1 = tape.add(lv_diff, ratio)?;
    let s2 = tape.add(s1, quad)?;
    let s3 = tape.add_scalar(s2, -1.0);
    let total = tape.sum(s3);
    Ok(tape.scale(total, 0.5))
}

/// Back-propagate-max loss: the KL of the *selected* component against the
/// complement posterior, differentiable in both the component's and the
/// target's parameters. The index is a constant of the expression.
pub fn bm_loss(
    tape: &mut Tape,
    mixture: &MixtureVars,
    best: &BestPrimitive,
    target: &GaussianVars,
) -> Result<Var> {
    let comp = mixture.component(tape, best.index)?;
    kl_diag_tape(tape, &comp, target)
}

/// Combined mixture loss: frequency term plus back-propagate-max term.
pub fn gmm_loss(
    tape: &mut Tape,
    mixture: &MixtureVars,
    best: &BestPrimitive,
    target: &GaussianVars,
) -> Result<(Var, Var, Var)> {
    let l_f = frequency_loss(tape, mixture.alpha, best)?;
    let l_bm = bm_loss(tape, mixture, best, target)?;
    let total = tape.add(l_f, l_bm)?;
    Ok((total, l_f, l_bm))
}

/// Largest mixing coefficient — the diversity-collapse indicator reported
/// per example at evaluation time.
pub fn dominance(alpha: &[f64]) -> f64 {
    alpha.iter().cloned().fold(0.0, f64::max)
}
