//! Evaluation metrics and the test-split evaluation driver.
//!
//! PSNR / SSIM / MAE measure reconstruction fidelity. Diversity is the mean
//! pairwise L1 among sampled completions restricted to the masked region.
//! Mode coverage exploits the synthetic corpus: every context's M variant
//! renderings are known, so each completion can be assigned to its nearest
//! variant (or to none) and the fraction of distinct recovered modes
//! reported. The SSIM variant is pinned exactly — 8×8 uniform window,
//! stride 1, C1 = 0.01², C2 = 0.03² on unit dynamic range — because "SSIM"
//! is underdetermined across implementations.

use crate::config::CorpusSpec;
use crate::data::{render_image, ImageSample};
use crate::error::{Error, Result};
use crate::infer::complete;
use crate::model::ModelParams;
use crate::prng::Prng;
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Distance beyond which a completion counts as matching no mode.
pub const MODE_REJECT_TAU: f64 = 0.15;

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on unit dynamic range, capped at 100
/// for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Mean absolute pixel difference.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("mae", a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64)
}

/// Single-scale SSIM, averaged over all window positions (and channels).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            op: "ssim window",
            lhs: vec![h, w],
            rhs: vec![SSIM_WINDOW, SSIM_WINDOW],
        });
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        let plane_a = &a.data[ch * h * w..(ch + 1) * h * w];
        let plane_b = &b.data[ch * h * w..(ch + 1) * h * w];
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let row = (y0 + dy) * w + x0;
                    for dx in 0..SSIM_WINDOW {
                        let (x, y) = (plane_a[row + dx], plane_b[row + dx]);
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Mean L1 distance restricted to masked pixels.
pub fn masked_l1(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<f64> {
    check_same_shape("masked_l1", a, b)?;
    let plane = mask.data.len();
    let channels = a.data.len() / plane;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for p in 0..plane {
            if mask.data[p] > 0.5 {
                acc += (a.data[ch * plane + p] - b.data[ch * plane + p]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Input("masked_l1 needs a non-empty mask".into()));
    }
    Ok(acc / count as f64)
}

/// Mean pairwise masked L1 over all unordered output pairs.
pub fn diversity(outputs: &[Tensor], mask: &Tensor) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Input(
            "diversity needs at least two outputs".into(),
        ));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..outputs.len() {
        for j in (i + 1)..outputs.len() {
            acc += masked_l1(&outputs[i], &outputs[j], mask)?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// Assign each output to its nearest ground-truth variant (masked L1),
/// rejecting anything farther than [`MODE_REJECT_TAU`] from every variant.
/// Returns the fraction of distinct modes recovered plus per-output
/// assignments.
pub fn mode_coverage(
    outputs: &[Tensor],
    sample: &ImageSample,
    spec: &CorpusSpec,
) -> Result<(f64, Vec<Option<usize>>)> {
    let variants: Vec<Tensor> = (0..spec.modes)
        .map(|m| render_image(spec, sample.context_seed, m, &sample.mask))
        .collect();
    let mut assigned = Vec::with_capacity(outputs.len());
    for out in outputs {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (m, variant) in variants.iter().enumerate() {
            let d = masked_l1(out, variant, &sample.mask.grid)?;
            if d < best_d {
                best_d = d;
                best = Some(m);
            }
        }
        assigned.push(if best_d <= MODE_REJECT_TAU { best } else { None });
    }
    let mut seen = vec![false; spec.modes];
    for a in assigned.iter().flatten() {
        seen[*a] = true;
    }
    let recovered = seen.iter().filter(|s| **s).count();
    Ok((recovered as f64 / spec.modes as f64, assigned))
}

/// Mean and population standard deviation of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Aggregate {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Per-input evaluation row (optional CSV output).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub mode_label: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub matched_mae: f64,
    pub diversity: f64,
    pub mode_coverage: f64,
    pub dominance: f64,
}

/// Test-split evaluation summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_inputs: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Reconstruction quality of the full decode against the original.
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub mae: Aggregate,
    /// Masked-region MAE of the completion closest to the ground truth.
    pub matched_mae: Aggregate,
    pub diversity: Aggregate,
    pub mode_coverage: Aggregate,
    /// L∞ distance between the sorted mean mixing coefficients and the
    /// sorted true mode probabilities.
    pub alpha_error: f64,
    pub mean_alpha: Vec<f64>,
    pub dominance_mean: f64,
    /// Counts of per-input dominance in ten uniform bins over [0, 1].
    pub dominance_hist: Vec<usize>,
}

impl EvalReport {
    /// Aligned plain-text table of the headline numbers.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>10} {:>10}\n",
            "metric", "mean", "std"
        ));
        for (name, agg) in [
            ("psnr_db", self.psnr),
            ("ssim", self.ssim),
            ("mae", self.mae),
            ("matched_mae", self.matched_mae),
            ("diversity", self.diversity),
            ("mode_coverage", self.mode_coverage),
        ] {
            s.push_str(&format!(
                "{:<16} {:>10.4} {:>10.4}\n",
                name, agg.mean, agg.std
            ));
        }
        s.push_str(&format!(
            "{:<16} {:>10.4}\n",
            "alpha_error", self.alpha_error
        ));
        s.push_str(&format!(
            "{:<16} {:>10.4}\n",
            "dominance_mean", self.dominance_mean
        ));
        s
    }
}

/// Evaluate a trained model over the corpus test split: `n_samples`
/// completions per input plus one full reconstruction per input.
pub fn evaluate(
    params: &ModelParams,
    corpus: &crate::data::Corpus,
    n_samples: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<SampleMetrics>)> {
    let spec = &corpus.spec;
    let test = corpus.test();
    if test.is_empty() {
        return Err(Error::Config("corpus has no test split".into()));
    }
    let k = params.dims.k;

    let mut rows = Vec::with_capacity(test.len());
    let mut alpha_sum = vec![0.0; k];
    let mut dominance_hist = vec![0usize; 10];

    for (i, sample) in test.iter().enumerate() {
        let (im, ic) = sample.split();
        let mut rng = Prng::derive(seed, i as u64);
        let set = complete(params, &im, &sample.mask.grid, n_samples, &mut rng)?;

        // reconstruction path: posterior means through both encoders
        let recon = {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false, false);
            let im_v = tape.constant(&im);
            let ic_v = tape.constant(&ic);
            let mask_v = tape.constant(&sample.mask.grid);
            let q_zm = bound.encode_masked(&mut tape, im_v, mask_v)?;
            let q_zc = bound.encode_complement(&mut tape, ic_v, mask_v)?;
            let img = bound.decode(&mut tape, q_zm.mean, q_zc.mean)?;
            tape.value_tensor(img)
        };

        let images: Vec<Tensor> = set.completions.iter().map(|c| c.image.clone()).collect();
        let matched = images
            .iter()
            .map(|img| masked_l1(img, &sample.io, &sample.mask.grid))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let (coverage, _) = mode_coverage(&images, sample, spec)?;

        for (a, s) in alpha_sum.iter_mut().zip(&set.alpha) {
            *a += s;
        }
        let bin = ((set.dominance * 10.0) as usize).min(9);
        dominance_hist[bin] += 1;

        rows.push(SampleMetrics {
            index: spec.n_train + i,
            mode_label: sample.mode_label,
            psnr: psnr(&recon, &sample.io)?,
            ssim: ssim(&recon, &sample.io)?,
            mae: mae(&recon, &sample.io)?,
            matched_mae: matched,
            diversity: diversity(&images, &sample.mask.grid)?,
            mode_coverage: coverage,
            dominance: set.dominance,
        });
    }

    let n = test.len() as f64;
    let mean_alpha: Vec<f64> = alpha_sum.iter().map(|a| a / n).collect();
    let alpha_error = {
        let mut a = mean_alpha.clone();
        let mut p = spec.mode_probs.clone();
        a.sort_by(|x, y| y.partial_cmp(x).unwrap());
        p.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let len = a.len().max(p.len());
        a.resize(len, 0.0);
        p.resize(len, 0.0);
        a.iter()
            .zip(&p)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let collect = |f: fn(&SampleMetrics) -> f64| -> Aggregate {
        Aggregate::of(&rows.iter().map(f).collect::<Vec<f64>>())
    };

    let report = EvalReport {
        n_inputs: test.len(),
        n_samples,
        seed,
        psnr: collect(|r| r.psnr),
        ssim: collect(|r| r.ssim),
        mae: collect(|r| r.mae),
        matched_mae: collect(|r| r.matched_mae),
        diversity: collect(|r| r.diversity),
        mode_coverage: collect(|r| r.mode_coverage),
        alpha_error,
        mean_alpha,
        dominance_mean: rows.iter().map(|r| r.dominance).sum::<f64>() / n,
        dominance_hist,
    };
    Ok((report, rows))
}
