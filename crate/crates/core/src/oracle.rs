//! Standalone verification suites, used by the `verify` CLI subcommand and
//! the acceptance tests. Each suite draws fresh (seeded) randomness and
//! checks a mathematical property against an independent route:
//!
//! * `decomposition` — brute-force summation over discrete joint
//!   distributions versus the three-term split;
//! * `kl` — the closed-form diagonal-Gaussian KL versus a Monte-Carlo
//!   estimate;
//! * `frequency` — the mixing-coefficient fixed point under simulated
//!   best-index draws;
//! * `gradients` — reverse-mode gradients versus central finite differences
//!   for every op and every composite loss.

use crate::data::{gen_sample, ImageSample};
use crate::dist::{kl_diag_gaussian, kl_monte_carlo, sample_categorical, Categorical, DiagGaussian};
use crate::discrete::{verify_decomposition, DiscretePgm};
use crate::error::Result;
use crate::losses::{
    adversarial_gen_loss, discriminator_loss, elbo_loss, final_loss, reconstruction_loss,
};
use crate::model::{ModelDims, ModelParams, ParamGroup};
use crate::moe::{best_primitive, bm_loss, frequency_loss, gmm_loss, BestPrimitive};
use crate::prng::Prng;
use crate::tensor::{Tape, Tensor, Var};

/// One checked property.
#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Results of one suite run.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub results: Vec<PropertyResult>,
    pub elapsed_ms: u64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

fn run_suite(
    suite: &'static str,
    f: impl FnOnce(&mut Vec<PropertyResult>),
) -> SuiteReport {
    let start = std::time::Instant::now();
    let mut results = Vec::new();
    f(&mut results);
    SuiteReport {
        suite,
        results,
        elapsed_ms: start.elapsed().as_millis() as u64,
    }
}

fn record(results: &mut Vec<PropertyResult>, name: &str, passed: bool, detail: String) {
    results.push(PropertyResult {
        name: name.to_string(),
        passed,
        detail,
    });
}

// ----- decomposition suite --------------------------------------------------

/// Joint-KL decomposition on 50 random strictly positive discrete models:
/// |lhs − (a+b+c)| ≤ 1e-10, plus the zero case and the θ-isolation property.
pub fn decomposition_suite(seed: u64) -> SuiteReport {
    run_suite("decomposition", |results| {
        let mut rng = Prng::derive(seed, 1);

        let mut worst = 0.0f64;
        let mut all_ok = true;
        for _ in 0..50 {
            let pgm = DiscretePgm::random(&mut rng, 3, false);
            let c = verify_decomposition(&pgm);
            let gap = (c.lhs - c.rhs()).abs();
            worst = worst.max(gap);
            all_ok &= gap <= 1e-10 && pgm.rows_normalized();
        }
        record(
            results,
            "identity on 50 random models",
            all_ok,
            format!("worst |lhs - rhs| = {worst:.3e}"),
        );

        let pgm = DiscretePgm::random(&mut rng, 3, false).with_q_equal_p();
        let c = verify_decomposition(&pgm);
        record(
            results,
            "equal tables give zero",
            c.lhs.abs() <= 1e-12 && c.rhs().abs() <= 1e-12,
            format!("lhs = {:.3e}, rhs = {:.3e}", c.lhs, c.rhs()),
        );

        let mut ok = true;
        let mut worst_iso = 0.0f64;
        for _ in 0..10 {
            let mut pgm = DiscretePgm::random(&mut rng, 3, true);
            let before = verify_decomposition(&pgm);
            for row in &mut pgm.q_zc_given_zm {
                for v in row.iter_mut() {
                    *v = 0.05 + rng.uniform();
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let after = verify_decomposition(&pgm);
            let gap = ((after.lhs - before.lhs) - (after.term_b - before.term_b)).abs();
            worst_iso = worst_iso.max(gap);
            ok &= gap <= 1e-10
                && (after.term_a - before.term_a).abs() <= 1e-12
                && (after.term_c - before.term_c).abs() <= 1e-12;
        }
        record(
            results,
            "theta moves only the latent-link term",
            ok,
            format!("worst |d_lhs - d_b| = {worst_iso:.3e}"),
        );
    })
}

// ----- kl suite ---------------------------------------------------------------

fn kl_suite_with(seed: u64, kl: &dyn Fn(&DiagGaussian, &DiagGaussian) -> f64) -> SuiteReport {
    run_suite("kl", |results| {
        let mut rng = Prng::derive(seed, 2);

        let mut max_sigma = 0.0f64;
        let mut nonneg = true;
        let mut self_zero = true;
        let mut mc_ok = true;
        for _ in 0..100 {
            let d = 1 + rng.below(8);
            let p = DiagGaussian::new(
                (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
                (0..d).map(|_| rng.uniform_in(-1.5, 1.0)).collect(),
            );
            let q = DiagGaussian::new(
                (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
                (0..d).map(|_| rng.uniform_in(-1.5, 1.0)).collect(),
            );
            let closed = kl(&p, &q);
            nonneg &= closed >= 0.0;
            self_zero &= kl(&p, &p).abs() <= 1e-12;
            let (est, se) = kl_monte_carlo(&p, &q, 200_000, &mut rng).unwrap();
            let sigmas = (closed - est).abs() / se.max(1e-12);
            max_sigma = max_sigma.max(sigmas);
            mc_ok &= sigmas <= 5.0;
        }
        record(
            results,
            "closed form within 5 SE of Monte-Carlo (100 pairs)",
            mc_ok,
            format!("worst deviation = {max_sigma:.2} SE"),
        );
        record(results, "KL(p||p) = 0", self_zero, String::new());
        record(results, "KL >= 0 always", nonneg, String::new());
    })
}

/// Closed-form KL versus a 200k-sample Monte-Carlo estimate on 100 random
/// diagonal-Gaussian pairs.
pub fn kl_suite(seed: u64) -> SuiteReport {
    kl_suite_with(seed, &|p, q| kl_diag_gaussian(p, q).unwrap())
}

/// Same suite with a deliberately broken KL; test hook proving the suite
/// detects a flipped quadratic term.
pub fn kl_suite_mutated(seed: u64) -> SuiteReport {
    kl_suite_with(seed, &|p, q| {
        let mut acc = 0.0;
        for t in 0..p.dim() {
            let (lvp, lvq) = (p.log_var[t], q.log_var[t]);
            let dm = p.mean[t] - q.mean[t];
            // sign flip on the quadratic term
            acc += lvq - lvp - 1.0 + (lvp - lvq).exp() - dm * dm * (-lvq).exp();
        }
        0.5 * acc
    })
}

// ----- frequency suite ----------------------------------------------------

/// Gradient descent on the mean frequency loss with best indices drawn
/// i.i.d. from `p`; returns the final mixing coefficients.
pub fn frequency_fixed_point(
    p: &[f64],
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut Prng,
) -> Vec<f64> {
    let k = p.len();
    let dist = Categorical::new(p.to_vec()).expect("valid probability vector");
    let mut logits = Tensor::zeros(&[k]);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let lv = tape.param(&logits);
        let alpha = tape.softmax(lv).expect("finite logits");
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let j = sample_categorical(&dist, rng);
            let best = BestPrimitive {
                index: j,
                kls: vec![0.0; k],
            };
            let l = frequency_loss(&mut tape, alpha, &best).expect("frequency loss");
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l).unwrap(),
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / batch as f64);
        tape.backward(mean).expect("backward");
        let g = tape.grad(lv).expect("logit gradient");
        for (w, gi) in logits.data.iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    let mut tape = Tape::new();
    let lv = tape.constant(&logits);
    let alpha = tape.softmax(lv).unwrap();
    tape.val(alpha).to_vec()
}

/// Fixed point of the frequency loss: α converges to the true best-index
/// probabilities, at p = [0.7, 0.3] and at uniform p over k = 4.
pub fn frequency_suite(seed: u64) -> SuiteReport {
    run_suite("frequency", |results| {
        for (name, p) in [
            ("p = [0.7, 0.3]", vec![0.7, 0.3]),
            ("p uniform over k=4", vec![0.25; 4]),
        ] {
            let mut rng = Prng::derive(seed, 3 ^ p.len() as u64);
            let alpha = frequency_fixed_point(&p, 10_000, 0.05, 64, &mut rng);
            let err = alpha
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            record(
                results,
                &format!("fixed point at {name}"),
                err <= 0.02,
                format!("max |alpha - p| = {err:.4}"),
            );
        }
    })
}

// ----- gradient suite -------------------------------------------------------

/// Outcome counts of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckOutcome {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

/// Compare reverse-mode gradients against central finite differences at
/// `coords` randomly chosen coordinates of `inputs[perturb]`.
///
/// `eval(inputs, want_grads)` rebuilds the computation from scratch and
/// returns the scalar loss, plus (when asked) gradients aligned with
/// `inputs`. Central differences are meaningless across the kinks of |x|,
/// leaky-relu or clamp and across selection boundaries, so a coordinate is
/// skipped and resampled when either (a) two step sizes disagree, or (b)
/// the one-sided differences disagree — the latter catches a kink sitting
/// exactly at the evaluation point, where symmetric differences of both
/// step sizes agree on the (wrong) two-sided average.
pub fn grad_check(
    eval: &dyn Fn(&[Tensor], bool) -> Result<(f64, Option<Vec<Vec<f64>>>)>,
    inputs: &[Tensor],
    perturb: std::ops::Range<usize>,
    coords: usize,
    tol: f64,
    rng: &mut Prng,
) -> Result<GradCheckOutcome> {
    let (loss0, grads) = eval(inputs, true)?;
    let grads = grads.expect("gradient evaluation requested");
    let mut outcome = GradCheckOutcome::default();

    let loss_at = |tensors: &[Tensor]| -> Result<f64> { Ok(eval(tensors, false)?.0) };

    let mut attempts = 0;
    while outcome.checked < coords && attempts < coords * 20 {
        attempts += 1;
        let ti = perturb.start + rng.below(perturb.len());
        if inputs[ti].numel() == 0 {
            continue;
        }
        let i = rng.below(inputs[ti].numel());

        let h = 1e-5;
        let mut fd = [0.0; 2];
        let mut plus_h = 0.0;
        let mut minus_h = 0.0;
        for (s, step) in [(0usize, h), (1usize, h / 2.0)] {
            let mut plus = inputs.to_vec();
            plus[ti].data[i] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data[i] -= step;
            let (lp, lm) = (loss_at(&plus)?, loss_at(&minus)?);
            if s == 0 {
                plus_h = lp;
                minus_h = lm;
            }
            fd[s] = (lp - lm) / (2.0 * step);
        }
        let ad = grads[ti][i];
        let scale = 1.0_f64.max(ad.abs()).max(fd[1].abs());
        let two_step_gap = (fd[0] - fd[1]).abs() / scale;
        // second difference: zero for linear, O(h) for smooth, O(1) at a
        // centered kink
        let one_sided_gap = ((plus_h - loss0) - (loss0 - minus_h)).abs() / (h * scale);
        if two_step_gap > 0.25 * tol || one_sided_gap > 1e-3 {
            outcome.skipped_kinks += 1;
            continue;
        }
        let rel = (ad - fd[1]).abs() / scale;
        outcome.worst_rel_err = outcome.worst_rel_err.max(rel);
        if rel > tol {
            outcome.failures += 1;
        }
        outcome.checked += 1;
    }
    Ok(outcome)
}

/// Fixed test geometry for the composite-loss checks: small enough for fast
/// finite differences, large enough to exercise every code path.
fn oracle_dims() -> ModelDims {
    ModelDims {
        channels: 1,
        height: 8,
        width: 8,
        latent_dim: 3,
        k: 3,
    }
}

fn oracle_sample(seed: u64) -> ImageSample {
    let spec = crate::config::CorpusSpec {
        n_train: 4,
        n_test: 0,
        height: 8,
        width: 8,
        ..Default::default()
    };
    gen_sample(&spec, (seed % 4) as usize).expect("oracle sample")
}

/// Which composed objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    Reconstruction,
    AdversarialGen,
    Discriminator,
    Elbo,
    Frequency,
    BackPropMax,
    GmmCombined,
    Final,
}

/// Evaluate one composite loss from a flat list of parameter tensors
/// (generator tensors, then discriminator tensors), rebuilding the whole
/// step pipeline. Returns gradients aligned with the input list on request.
fn eval_composite(
    kind: LossKind,
    base: &ModelParams,
    sample: &ImageSample,
    noise_seed: u64,
    tensors: &[Tensor],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    // rebuild params from the flat tensor list
    let mut params = base.clone();
    {
        let mut it = tensors.iter();
        for group in [ParamGroup::Generator, ParamGroup::Discriminator] {
            for (_, t) in params.named_mut(group) {
                *t = it.next().expect("tensor list matches parameter count").clone();
            }
        }
    }
    let disc_diff = matches!(kind, LossKind::Discriminator);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, !disc_diff, disc_diff);
    let dims = params.dims;
    let mut rng = Prng::derive(noise_seed, 17);

    let (im, ic) = sample.split();
    let im_v = tape.constant(&im);
    let ic_v = tape.constant(&ic);
    let io_v = tape.constant(&sample.io);
    let mask_v = tape.constant(&sample.mask.grid);
    let mut vis = sample.mask.grid.clone();
    for v in &mut vis.data {
        *v = 1.0 - *v;
    }
    let vis_v = tape.constant(&vis);

    let q_zm = bound.encode_masked(&mut tape, im_v, mask_v)?;
    let q_zc = bound.encode_complement(&mut tape, ic_v, mask_v)?;
    let z_m = q_zm.sample(&mut tape, &mut rng)?;
    let mixture = bound.gmm_head(&mut tape, z_m)?;
    let best = best_primitive(&mixture.snapshot(&tape)?, &q_zc.snapshot(&tape))?;

    let loss = match kind {
        LossKind::Frequency => frequency_loss(&mut tape, mixture.alpha, &best)?,
        LossKind::BackPropMax => bm_loss(&mut tape, &mixture, &best, &q_zc)?,
        LossKind::GmmCombined => gmm_loss(&mut tape, &mixture, &best, &q_zc)?.0,
        _ => {
            let z_c = q_zc.sample(&mut tape, &mut rng)?;
            let comp = mixture.component(&mut tape, best.index)?;
            let z_c_hat = comp.sample(&mut tape, &mut rng)?;
            let io_hat = bound.decode(&mut tape, z_m, z_c)?;
            let io_hat_best = bound.decode(&mut tape, z_m, z_c_hat)?;
            match kind {
                LossKind::Reconstruction => {
                    let im_hat_best = tape.mul(io_hat_best, vis_v)?;
                    reconstruction_loss(&mut tape, io_hat, io_v, im_hat_best, im_v)?
                }
                LossKind::AdversarialGen => {
                    let d_fake = bound.discriminate(&mut tape, io_hat)?;
                    let d_best = bound.discriminate(&mut tape, io_hat_best)?;
                    let d_real = bound.discriminate(&mut tape, io_v)?;
                    adversarial_gen_loss(&mut tape, d_fake, d_best, d_real)?
                }
                LossKind::Discriminator => {
                    let f1 = tape.value_tensor(io_hat);
                    let f2 = tape.value_tensor(io_hat_best);
                    let f1 = tape.constant(&f1);
                    let f2 = tape.constant(&f2);
                    let d_real = bound.discriminate(&mut tape, io_v)?;
                    let d_f1 = bound.discriminate(&mut tape, f1)?;
                    let d_f2 = bound.discriminate(&mut tape, f2)?;
                    discriminator_loss(&mut tape, d_real, &[d_f1, d_f2])?
                }
                LossKind::Elbo => {
                    let zero = tape.constant(&Tensor::zeros(&[dims.latent_dim]));
                    let recon = bound.decode(&mut tape, z_m, zero)?;
                    let recon_vis = tape.mul(recon, vis_v)?;
                    elbo_loss(&mut tape, &q_zm, recon_vis, im_v)?
                }
                LossKind::Final => {
                    let im_hat_best = tape.mul(io_hat_best, vis_v)?;
                    let l_r =
                        reconstruction_loss(&mut tape, io_hat, io_v, im_hat_best, im_v)?;
                    let d_fake = bound.discriminate(&mut tape, io_hat)?;
                    let d_best = bound.discriminate(&mut tape, io_hat_best)?;
                    let d_real = bound.discriminate(&mut tape, io_v)?;
                    let l_a = adversarial_gen_loss(&mut tape, d_fake, d_best, d_real)?;
                    let zero = tape.constant(&Tensor::zeros(&[dims.latent_dim]));
                    let recon = bound.decode(&mut tape, z_m, zero)?;
                    let recon_vis = tape.mul(recon, vis_v)?;
                    let l_elbo = elbo_loss(&mut tape, &q_zm, recon_vis, im_v)?;
                    let l_f = frequency_loss(&mut tape, mixture.alpha, &best)?;
                    let l_bm = bm_loss(&mut tape, &mixture, &best, &q_zc)?;
                    final_loss(&mut tape, l_r, l_a, l_elbo, l_f, l_bm, 0.05)?.l_final
                }
                _ => unreachable!(),
            }
        }
    };

    let value = tape.scalar_val(loss);
    if !want_grads {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    let mut vars = crate::train::bound_group_vars(&bound, ParamGroup::Generator);
    vars.extend(crate::train::bound_group_vars(
        &bound,
        ParamGroup::Discriminator,
    ));
    let grads = vars
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.numel(v)],
        })
        .collect();
    Ok((value, Some(grads)))
}

/// Reverse-mode gradients versus central finite differences: primitive ops
/// first, then every composite loss at 100 random parameter points each.
pub fn gradient_suite(seed: u64) -> SuiteReport {
    run_suite("gradients", |results| {
        let mut rng = Prng::derive(seed, 4);

        // primitive ops
        let op_outcome = (|| -> Result<GradCheckOutcome> {
            let mut total = GradCheckOutcome::default();
            for trial in 0..100 {
                let n = 4 + rng.below(5);
                let x = Tensor::from_vec(&[n], rng.normal_vec(n));
                let w = Tensor::from_vec(&[n], rng.normal_vec(n));
                let pick = trial % 7;
                let eval = |inputs: &[Tensor], want: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
                    let mut tape = Tape::new();
                    let a = tape.param(&inputs[0]);
                    let b = tape.param(&inputs[1]);
                    let y = match pick {
                        0 => tape.add(a, b)?,
                        1 => tape.sub(a, b)?,
                        2 => tape.mul(a, b)?,
                        3 => {
                            let e = tape.exp(a);
                            tape.mul(e, b)?
                        }
                        4 => {
                            let sq = tape.square(a);
                            let lg = tape.add_scalar(sq, 1.0);
                            let lg = tape.log(lg);
                            tape.mul(lg, b)?
                        }
                        5 => {
                            let r = tape.leaky_relu(a, 0.2);
                            tape.mul(r, b)?
                        }
                        _ => {
                            let s = tape.softmax(a)?;
                            tape.mul(s, b)?
                        }
                    };
                    let loss = tape.sum(y);
                    let v = tape.scalar_val(loss);
                    if !want {
                        return Ok((v, None));
                    }
                    tape.backward(loss)?;
                    let g = [a, b]
                        .iter()
                        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                        .collect();
                    Ok((v, Some(g)))
                };
                let out = grad_check(&eval, &[x, w], 0..2, 2, 1e-4, &mut rng)?;
                total.checked += out.checked;
                total.skipped_kinks += out.skipped_kinks;
                total.failures += out.failures;
                total.worst_rel_err = total.worst_rel_err.max(out.worst_rel_err);
            }
            Ok(total)
        })();
        match op_outcome {
            Ok(o) => record(
                results,
                "elementwise/softmax ops vs finite differences",
                o.failures == 0 && o.checked >= 100,
                format!(
                    "{} coords checked, worst rel err {:.2e}, {} kink skips",
                    o.checked, o.worst_rel_err, o.skipped_kinks
                ),
            ),
            Err(e) => record(results, "elementwise ops", false, e.to_string()),
        }

        // matmul and conv2d
        let lin_outcome = (|| -> Result<GradCheckOutcome> {
            let mut total = GradCheckOutcome::default();
            for _ in 0..20 {
                let a = Tensor::from_vec(&[3, 4], rng.normal_vec(12));
                let b = Tensor::from_vec(&[4, 2], rng.normal_vec(8));
                let eval = |inputs: &[Tensor], want: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
                    let mut tape = Tape::new();
                    let a = tape.param(&inputs[0]);
                    let b = tape.param(&inputs[1]);
                    let y = tape.matmul(a, b)?;
                    let sq = tape.square(y);
                    let loss = tape.mean(sq);
                    let v = tape.scalar_val(loss);
                    if !want {
                        return Ok((v, None));
                    }
                    tape.backward(loss)?;
                    let g = [a, b]
                        .iter()
                        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                        .collect();
                    Ok((v, Some(g)))
                };
                let out = grad_check(&eval, &[a, b], 0..2, 3, 1e-6, &mut rng)?;
                total.checked += out.checked;
                total.failures += out.failures;
                total.worst_rel_err = total.worst_rel_err.max(out.worst_rel_err);

                let x = Tensor::from_vec(&[2, 6, 6], rng.normal_vec(72));
                let k = Tensor::from_vec(&[2, 2, 3, 3], rng.normal_vec(36));
                let eval = |inputs: &[Tensor], want: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
                    let mut tape = Tape::new();
                    let x = tape.param(&inputs[0]);
                    let k = tape.param(&inputs[1]);
                    let y = tape.conv2d(x, k, None, 2, 1)?;
                    let sq = tape.square(y);
                    let loss = tape.mean(sq);
                    let v = tape.scalar_val(loss);
                    if !want {
                        return Ok((v, None));
                    }
                    tape.backward(loss)?;
                    let g = [x, k]
                        .iter()
                        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
                        .collect();
                    Ok((v, Some(g)))
                };
                let out = grad_check(&eval, &[x, k], 0..2, 3, 1e-5, &mut rng)?;
                total.checked += out.checked;
                total.failures += out.failures;
                total.worst_rel_err = total.worst_rel_err.max(out.worst_rel_err);
            }
            Ok(total)
        })();
        match lin_outcome {
            Ok(o) => record(
                results,
                "matmul/conv2d vs finite differences",
                o.failures == 0 && o.checked >= 100,
                format!("{} coords checked, worst rel err {:.2e}", o.checked, o.worst_rel_err),
            ),
            Err(e) => record(results, "matmul/conv2d", false, e.to_string()),
        }

        // composite losses through the full pipeline
        let kinds = [
            (LossKind::Reconstruction, "reconstruction loss"),
            (LossKind::AdversarialGen, "adversarial generator loss"),
            (LossKind::Discriminator, "discriminator loss"),
            (LossKind::Elbo, "elbo loss"),
            (LossKind::Frequency, "frequency loss"),
            (LossKind::BackPropMax, "back-propagate-max loss"),
            (LossKind::GmmCombined, "combined mixture loss"),
            (LossKind::Final, "final objective"),
        ];
        for (kind, name) in kinds {
            let outcome = (|| -> Result<GradCheckOutcome> {
                let mut total = GradCheckOutcome::default();
                for inst in 0..10 {
                    let mut prng = Prng::derive(seed, 100 + inst);
                    let base = ModelParams::init(oracle_dims(), &mut prng)?;
                    let sample = oracle_sample(inst);
                    // a generic random point in parameter space: jitter every
                    // tensor (biases included) away from the kink-prone
                    // all-zero init
                    let mut tensors: Vec<Tensor> = Vec::new();
                    for group in [ParamGroup::Generator, ParamGroup::Discriminator] {
                        for (_, t) in base.named(group) {
                            let mut t = t.clone();
                            for v in &mut t.data {
                                *v += prng.uniform_in(-0.05, 0.05);
                            }
                            tensors.push(t);
                        }
                    }
                    let n_gen = base.named(ParamGroup::Generator).len();
                    let perturb = if kind == LossKind::Discriminator {
                        n_gen..tensors.len()
                    } else {
                        0..n_gen
                    };
                    let eval = |inputs: &[Tensor],
                                want: bool|
                     -> Result<(f64, Option<Vec<Vec<f64>>>)> {
                        eval_composite(kind, &base, &sample, 900 + inst, inputs, want)
                    };
                    let out = grad_check(&eval, &tensors, perturb, 10, 1e-4, &mut rng)?;
                    total.checked += out.checked;
                    total.skipped_kinks += out.skipped_kinks;
                    total.failures += out.failures;
                    total.worst_rel_err = total.worst_rel_err.max(out.worst_rel_err);
                }
                Ok(total)
            })();
            match outcome {
                Ok(o) => record(
                    results,
                    name,
                    o.failures == 0 && o.checked >= 100,
                    format!(
                        "{} coords checked, worst rel err {:.2e}, {} kink skips",
                        o.checked, o.worst_rel_err, o.skipped_kinks
                    ),
                ),
                Err(e) => record(results, name, false, e.to_string()),
            }
        }
    })
}

/// Run the named suites ("all" selects every one).
pub fn run_suites(which: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut reports = Vec::new();
    let all = which == "all";
    if all || which == "kl" {
        reports.push(kl_suite(seed));
    }
    if all || which == "decomposition" {
        reports.push(decomposition_suite(seed));
    }
    if all || which == "frequency" {
        reports.push(frequency_suite(seed));
    }
    if all || which == "gradients" {
        reports.push(gradient_suite(seed));
    }
    if reports.is_empty() {
        return Err(crate::error::Error::Config(format!(
            "unknown suite `{which}` (expected kl|decomposition|frequency|gradients|all)"
        )));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_suite_passes() {
        let r = decomposition_suite(1234);
        assert!(r.passed(), "{:#?}", r.results);
        assert!(r.elapsed_ms < 60_000);
    }

    #[test]
    fn frequency_suite_passes() {
        let r = frequency_suite(77);
        assert!(r.passed(), "{:#?}", r.results);
        assert!(r.elapsed_ms < 30_000);
    }

    #[test]
    fn kl_suite_passes_and_mutation_fails() {
        let r = kl_suite(99);
        assert!(r.passed(), "{:#?}", r.results);
        let bad = kl_suite_mutated(99);
        assert!(!bad.passed(), "sign-flipped KL must fail the suite");
    }

    #[test]
    fn gradient_suite_passes() {
        let r = gradient_suite(2024);
        assert!(r.passed(), "{:#?}", r.results);
        assert!(r.elapsed_ms < 300_000);
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!(run_suites("bogus", 1).is_err());
    }
}
