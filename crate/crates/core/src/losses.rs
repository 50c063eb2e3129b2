//! The training objective: reconstruction, adversarial and ELBO terms on top
//! of the mixture losses, combined as
//! `L_final = L_gmm + L_elbo + (L_r + λ_adv · L_a)`, plus the LSGAN
//! discriminator objective.
//!
//! L1 terms are per-pixel means so magnitudes are resolution-independent and
//! the adversarial weight keeps its meaning across image sizes.

use crate::error::{Error, Result};
use crate::moe::GaussianVars;
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Mean absolute difference between two same-shape tensors.
fn mean_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let ad = tape.abs(diff);
    Ok(tape.mean(ad))
}

/// Reconstruction loss: `mean|Î_o − I_o| + mean|Î_m_best − I_m|`, where
/// `Î_m_best` is the selected primitive's completion restricted to the
/// visible region (the same degeneration that maps I_o to I_m).
pub fn reconstruction_loss(
    tape: &mut Tape,
    io_hat: Var,
    io: Var,
    im_hat_best: Var,
    im: Var,
) -> Result<Var> {
    if tape.shape(io_hat) != tape.shape(io) || tape.shape(im_hat_best) != tape.shape(im) {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            lhs: tape.shape(io_hat).to_vec(),
            rhs: tape.shape(io).to_vec(),
        });
    }
    let full = mean_l1(tape, io_hat, io)?;
    let masked = mean_l1(tape, im_hat_best, im)?;
    tape.add(full, masked)
}

/// Generator-side adversarial loss (LSGAN form):
/// `(D(Î_o) − 1)² + (D(Î_o_best) − D(I_o))²`.
///
/// The caller must have bound the discriminator frozen so gradients reach
/// only the generator; `d_real` is a constant of the expression.
pub fn adversarial_gen_loss(
    tape: &mut Tape,
    d_fake: Var,
    d_fake_best: Var,
    d_real: Var,
) -> Result<Var> {
    let shifted = tape.add_scalar(d_fake, -1.0);
    let t1 = tape.square(shifted);
    let diff = tape.sub(d_fake_best, d_real)?;
    let t2 = tape.square(diff);
    tape.add(t1, t2)
}

/// Discriminator objective (LSGAN): `(D(real) − 1)² + ½·Σ_fakes D(fake)²`.
/// Fake images must enter as constants (detached from the generator).
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fakes: &[Var]) -> Result<Var> {
    let shifted = tape.add_scalar(d_real, -1.0);
    let mut total = tape.square(shifted);
    for &f in d_fakes {
        let sq = tape.square(f);
        let half = tape.scale(sq, 0.5);
        total = tape.add(total, half)?;
    }
    Ok(total)
}

/// Closed-form KL to the standard normal prior:
/// `1/2 · Σ (exp(lv) + μ² − 1 − lv)`.
pub fn kl_to_standard_normal(tape: &mut Tape, g: &GaussianVars) -> Result<Var> {
    let var = tape.exp(g.log_var);
    let mu2 = tape.square(g.mean);
    let s = tape.add(var, mu2)?;
    let s = tape.add_scalar(s, -1.0);
    let s = tape.sub(s, g.log_var)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, 0.5))
}

/// Negative evidence lower bound for the masked-image branch:
/// visible-region mean L1 plus KL of the masked posterior to N(0, I).
/// `im_recon_vis` is the zero-latent decode restricted to visible pixels.
pub fn elbo_loss(tape: &mut Tape, q_zm: &GaussianVars, im_recon_vis: Var, im: Var) -> Result<Var> {
    let recon = mean_l1(tape, im_recon_vis, im)?;
    let kl = kl_to_standard_normal(tape, q_zm)?;
    tape.add(recon, kl)
}

/// Tape handles for all assembled objective terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_r: Var,
    pub l_a: Var,
    pub l_c: Var,
    pub l_elbo: Var,
    pub l_f: Var,
    pub l_bm: Var,
    pub l_gmm: Var,
    pub l_final: Var,
}

/// Combine the pieces: `L_c = L_r + λ·L_a`, `L_gmm = L_f + L_bm`,
/// `L_final = L_gmm + L_elbo + L_c`.
pub fn final_loss(
    tape: &mut Tape,
    l_r: Var,
    l_a: Var,
    l_elbo: Var,
    l_f: Var,
    l_bm: Var,
    lambda_adv: f64,
) -> Result<LossTerms> {
    let weighted_a = tape.scale(l_a, lambda_adv);
    let l_c = tape.add(l_r, weighted_a)?;
    let l_gmm = tape.add(l_f, l_bm)?;
    let partial = tape.add(l_gmm, l_elbo)?;
    let l_final = tape.add(partial, l_c)?;
    Ok(LossTerms {
        l_r,
        l_a,
        l_c,
        l_elbo,
        l_f,
        l_bm,
        l_gmm,
        l_final,
    })
}

/// One step's scalar loss values, as logged (one JSON line per record).
/// The derived fields are recomputed from the parts so the internal
/// identities hold to machine precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_a: f64,
    pub l_c: f64,
    pub l_elbo: f64,
    pub l_f: f64,
    pub l_bm: f64,
    pub l_gmm: f64,
    pub l_final: f64,
    pub l_disc: f64,
    /// Most frequently selected primitive in the batch (ties toward the
    /// smallest index).
    pub best_index: usize,
    /// Mean of the per-example largest mixing coefficient.
    pub dominance: f64,
}

impl LossReport {
    pub fn from_parts(
        l_r: f64,
        l_a: f64,
        l_elbo: f64,
        l_f: f64,
        l_bm: f64,
        l_disc: f64,
        lambda_adv: f64,
        best_index: usize,
        dominance: f64,
    ) -> Self {
        let l_c = l_r + lambda_adv * l_a;
        let l_gmm = l_f + l_bm;
        LossReport {
            l_r,
            l_a,
            l_c,
            l_elbo,
            l_f,
            l_bm,
            l_gmm,
            l_final: l_gmm + l_elbo + l_c,
            l_disc,
            best_index,
            dominance,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let checks: [(&'static str, f64); 9] = [
            ("l_r", self.l_r),
            ("l_a", self.l_a),
            ("l_c", self.l_c),
            ("l_elbo", self.l_elbo),
            ("l_f", self.l_f),
            ("l_bm", self.l_bm),
            ("l_gmm", self.l_gmm),
            ("l_final", self.l_final),
            ("l_disc", self.l_disc),
        ];
        checks.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    /// Internal identities and sign constraints. KL-backed terms get a small
    /// negative slack for rounding.
    pub fn check_invariants(&self, lambda_adv: f64) -> Result<()> {
        let tol = 1e-12;
        if (self.l_c - (self.l_r + lambda_adv * self.l_a)).abs() > tol {
            return Err(Error::Contract("l_c != l_r + lambda*l_a".into()));
        }
        if (self.l_gmm - (self.l_f + self.l_bm)).abs() > tol {
            return Err(Error::Contract("l_gmm != l_f + l_bm".into()));
        }
        if (self.l_final - (self.l_gmm + self.l_elbo + self.l_c)).abs() > tol {
            return Err(Error::Contract("l_final != l_gmm + l_elbo + l_c".into()));
        }
        let slack = -1e-9;
        for (name, v) in [
            ("l_r", self.l_r),
            ("l_a", self.l_a),
            ("l_elbo", self.l_elbo),
            ("l_f", self.l_f),
            ("l_bm", self.l_bm),
            ("l_disc", self.l_disc),
        ] {
            if v < slack {
                return Err(Error::Contract(format!("{name} negative: {v}")));
            }
        }
        Ok(())
    }
}
