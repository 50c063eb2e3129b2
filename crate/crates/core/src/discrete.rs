//! Discrete probabilistic-graph-model oracle.
//!
//! A [`DiscretePgm`] realizes the completion model's factorization over tiny
//! finite alphabets, where every divergence can be brute-forced by summation
//! over the full joint. It exists to verify that the joint KL between the
//! variational side and the model side decomposes exactly into three terms:
//! generation consistency (a), latent matching (b), and the masked-image
//! posterior term (c).
//!
//! Variational side (conditioned on the observed masked image):
//! `q(io|zm,zc) · q_theta(zc|zm) · q_psi(zm|im)`.
//! Model side (conditioned on both observed partial images):
//! `p(io|im,ic) · p(zc|ic) · p(zm|im)`.

use crate::prng::Prng;

/// Conditional probability tables over finite alphabets, plus the observed
/// symbol indices the divergence is evaluated at.
#[derive(Clone, Debug)]
pub struct DiscretePgm {
    /// Observed masked-image symbol.
    pub im: usize,
    /// Observed complement-image symbol.
    pub ic: usize,
    /// `[zm][zc][io]` — variational generation table.
    pub q_io_given_zm_zc: Vec<Vec<Vec<f64>>>,
    /// `[zm][zc]` — the θ-parameterized latent link.
    pub q_zc_given_zm: Vec<Vec<f64>>,
    /// `[im][zm]` — the ψ-parameterized masked-image posterior.
    pub q_zm_given_im: Vec<Vec<f64>>,
    /// `[im][ic][io]` — model generation table.
    pub p_io_given_im_ic: Vec<Vec<Vec<f64>>>,
    /// `[ic][zc]` — model complement posterior.
    pub p_zc_given_ic: Vec<Vec<f64>>,
    /// `[im][zm]` — model masked-image posterior.
    pub p_zm_given_im: Vec<Vec<f64>>,
}

/// The brute-forced left-hand side and the three decomposition terms.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionCheck {
    pub lhs: f64,
    pub term_a: f64,
    pub term_b: f64,
    pub term_c: f64,
}

impl DecompositionCheck {
    pub fn rhs(&self) -> f64 {
        self.term_a + self.term_b + self.term_c
    }
}

/// One summand of Σ q·ln(q/p) with the 0·ln 0 = 0 convention; q > 0 over
/// p = 0 yields +∞ (support violation).
#[inline]
fn kl_summand(q: f64, p: f64) -> f64 {
    if q == 0.0 {
        0.0
    } else if p == 0.0 {
        f64::INFINITY
    } else {
        q * (q / p).ln()
    }
}

fn row_kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(&a, &b)| kl_summand(a, b)).sum()
}

impl DiscretePgm {
    /// Random strictly-positive tables with alphabet sizes up to
    /// `max_alphabet` (at least 2). If `zc_blind_generation` is set, the
    /// variational generation table ignores `zc`; with that restriction the
    /// first decomposition term provably cannot depend on the θ table.
    pub fn random(rng: &mut Prng, max_alphabet: usize, zc_blind_generation: bool) -> Self {
        let size = |rng: &mut Prng| 2 + rng.below(max_alphabet.max(2) - 1);
        let (n_io, n_im, n_ic) = (size(rng), size(rng), size(rng));
        let (n_zm, n_zc) = (size(rng), size(rng));

        let row = |rng: &mut Prng, n: usize| -> Vec<f64> {
            // floor keeps every entry strictly positive
            let mut v: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };

        let q_io_given_zm_zc: Vec<Vec<Vec<f64>>> = (0..n_zm)
            .map(|_| {
                if zc_blind_generation {
                    let shared = row(rng, n_io);
                    vec![shared; n_zc]
                } else {
                    (0..n_zc).map(|_| row(rng, n_io)).collect()
                }
            })
            .collect();
        let q_zc_given_zm = (0..n_zm).map(|_| row(rng, n_zc)).collect();
        let q_zm_given_im = (0..n_im).map(|_| row(rng, n_zm)).collect();
        let p_io_given_im_ic = (0..n_im)
            .map(|_| (0..n_ic).map(|_| row(rng, n_io)).collect())
            .collect();
        let p_zc_given_ic = (0..n_ic).map(|_| row(rng, n_zc)).collect();
        let p_zm_given_im = (0..n_im).map(|_| row(rng, n_zm)).collect();

        DiscretePgm {
            im: rng.below(n_im),
            ic: rng.below(n_ic),
            q_io_given_zm_zc,
            q_zc_given_zm,
            q_zm_given_im,
            p_io_given_im_ic,
            p_zc_given_ic,
            p_zm_given_im,
        }
    }

    /// A copy whose variational tables equal the model tables (so every
    /// divergence is zero). The generation table is shared across (zm, zc).
    pub fn with_q_equal_p(&self) -> Self {
        let mut c = self.clone();
        let n_zm = c.q_zc_given_zm.len();
        let n_zc = c.q_zc_given_zm[0].len();
        let p_io = c.p_io_given_im_ic[c.im][c.ic].clone();
        c.q_io_given_zm_zc = vec![vec![p_io; n_zc]; n_zm];
        c.q_zc_given_zm = vec![c.p_zc_given_ic[c.ic].clone(); n_zm];
        c.q_zm_given_im = c.p_zm_given_im.clone();
        c
    }

    /// Every conditional row must sum to 1 within 1e-12.
    pub fn rows_normalized(&self) -> bool {
        let ok = |row: &Vec<f64>| (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        self.q_io_given_zm_zc.iter().flatten().all(ok)
            && self.q_zc_given_zm.iter().all(ok)
            && self.q_zm_given_im.iter().all(ok)
            && self.p_io_given_im_ic.iter().flatten().all(ok)
            && self.p_zc_given_ic.iter().all(ok)
            && self.p_zm_given_im.iter().all(ok)
    }
}

/// Brute-force both sides of the decomposition.
///
/// The left side sums `q·ln(q/p)` over the full `(io, zm, zc)` joint; the
/// right side evaluates the three terms independently. When the variational
/// support escapes the model support, both sides report +∞.
pub fn verify_decomposition(pgm: &DiscretePgm) -> DecompositionCheck {
    let q_zm = &pgm.q_zm_given_im[pgm.im];
    let p_zm = &pgm.p_zm_given_im[pgm.im];
    let p_zc = &pgm.p_zc_given_ic[pgm.ic];
    let p_io = &pgm.p_io_given_im_ic[pgm.im][pgm.ic];
    let n_zm = q_zm.len();
    let n_zc = p_zc.len();
    let n_io = p_io.len();

    let mut lhs = 0.0;
    for zm in 0..n_zm {
        for zc in 0..n_zc {
            let q_zc_row = &pgm.q_zc_given_zm[zm];
            let q_io_row = &pgm.q_io_given_zm_zc[zm][zc];
            for io in 0..n_io {
                let qj = q_io_row[io] * q_zc_row[zc] * q_zm[zm];
                let pj = p_io[io] * p_zc[zc] * p_zm[zm];
                lhs += kl_summand(qj, pj);
            }
        }
    }

    // (a): expected generation divergence under the variational latents
    let mut term_a = 0.0;
    for zm in 0..n_zm {
        for zc in 0..n_zc {
            let w = q_zm[zm] * pgm.q_zc_given_zm[zm][zc];
            if w > 0.0 {
                term_a += w * row_kl(&pgm.q_io_given_zm_zc[zm][zc], p_io);
            }
        }
    }
    // (b): latent link vs model complement posterior, averaged over zm
    let mut term_b = 0.0;
    for zm in 0..n_zm {
        if q_zm[zm] > 0.0 {
            term_b += q_zm[zm] * row_kl(&pgm.q_zc_given_zm[zm], p_zc);
        }
    }
    // (c): masked-image posterior divergence
    let term_c = row_kl(q_zm, p_zm);

    DecompositionCheck {
        lhs,
        term_a,
        term_b,
        term_c,
    }
}
