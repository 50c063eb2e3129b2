//! Synthetic multimodal completion corpus.
//!
//! Each sample is a context pattern (smooth two-axis ramp plus a border
//! frame, both functions of a per-sample context seed) whose masked region
//! is filled with one of M high-contrast glyph variants. The variant is
//! drawn independently of the context, and all variants of one context share
//! identical visible pixels — so the posterior over completions is exactly
//! M-modal with known probabilities, which is what makes pluralism
//! measurable downstream.
//!
//! Masks mark MISSING pixels with 1. The corpus is a pure function of its
//! [`CorpusSpec`]; generation is index-addressable and reproducible.

use crate::config::{CorpusSpec, MaskPolicy};
use crate::error::{Error, Result};
use crate::netpbm;
use crate::prng::Prng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How a particular sample's mask was produced (enough to rebuild it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskInfo {
    Center { fraction: f64 },
    Random { seed: u64 },
}

/// Binary missing-pixel mask over an H×W grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    /// [1, H, W], entries exactly 0.0 or 1.0; 1 marks a missing pixel.
    pub grid: Tensor,
    pub info: MaskInfo,
}

impl Mask {
    pub fn height(&self) -> usize {
        self.grid.shape[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape[2]
    }

    /// Fraction of pixels marked missing.
    pub fn missing_fraction(&self) -> f64 {
        self.grid.data.iter().sum::<f64>() / self.grid.data.len() as f64
    }

    pub fn from_grid(grid: Tensor, info: MaskInfo) -> Result<Self> {
        if grid.shape.len() != 3 || grid.shape[0] != 1 {
            return Err(Error::Input(format!(
                "mask must be [1, H, W], got {:?}",
                grid.shape
            )));
        }
        if !grid.data.iter().all(|v| *v == 0.0 || *v == 1.0) {
            return Err(Error::Input("mask entries must be exactly 0 or 1".into()));
        }
        let m = Mask { grid, info };
        let f = m.missing_fraction();
        if !(f > 0.0 && f <= 0.9) {
            return Err(Error::Input(format!(
                "mask missing fraction {f} outside (0, 0.9]"
            )));
        }
        Ok(m)
    }
}

/// Axis-centered square mask of area closest to `fraction·H·W`, side rounded
/// to the nearest even number.
pub fn center_mask(h: usize, w: usize, fraction: f64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction <= 0.9) {
        return Err(Error::Config(format!(
            "center mask fraction must lie in (0, 0.9], got {fraction}"
        )));
    }
    let target = fraction * (h * w) as f64;
    let raw = target.sqrt();
    let mut side = (raw / 2.0).round() as usize * 2;
    side = side.clamp(2, h.min(w));
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut grid = Tensor::zeros(&[1, h, w]);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            grid.data[y * w + x] = 1.0;
        }
    }
    Mask::from_grid(grid, MaskInfo::Center { fraction })
}

/// Union of 1–4 random axis-aligned rectangles, resampled until the missing
/// fraction lands in [0.2, 0.5]. After 1000 failed attempts, falls back to a
/// center mask at fraction 0.3 with a warning.
pub fn random_mask(h: usize, w: usize, rng: &mut Prng) -> Mask {
    let seed_info = MaskInfo::Random { seed: rng.state() };
    for _ in 0..1000 {
        let mut grid = Tensor::zeros(&[1, h, w]);
        let rects = 1 + rng.below(4);
        for _ in 0..rects {
            let rw = w / 4 + rng.below(w / 2 - w / 4 + 1);
            let rh = h / 4 + rng.below(h / 2 - h / 4 + 1);
            let x0 = rng.below(w - rw + 1);
            let y0 = rng.below(h - rh + 1);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    grid.data[y * w + x] = 1.0;
                }
            }
        }
        let f = grid.data.iter().sum::<f64>() / (h * w) as f64;
        if (0.2..=0.5).contains(&f) {
            return Mask {
                grid,
                info: seed_info,
            };
        }
    }
    log::warn!("random_mask: 1000 rejected attempts, falling back to center mask");
    let center = center_mask(h, w, 0.3).expect("fallback center mask");
    Mask {
        grid: center.grid,
        info: seed_info,
    }
}

/// Rebuild a mask from its stored description.
pub fn mask_from_info(h: usize, w: usize, info: &MaskInfo) -> Result<Mask> {
    match info {
        MaskInfo::Center { fraction } => center_mask(h, w, *fraction),
        MaskInfo::Random { seed } => Ok(random_mask(h, w, &mut Prng::from_state(*seed))),
    }
}

/// One corpus entry: the full image, its mask, and the ground-truth mode.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub io: Tensor,
    pub mask: Mask,
    pub mode_label: usize,
    pub context_seed: u64,
}

impl ImageSample {
    /// Split into the masked partial image (visible content, missing pixels
    /// zeroed) and the complement partial image (missing content only).
    /// Their supports are disjoint, so `im + ic == io` exactly.
    pub fn split(&self) -> (Tensor, Tensor) {
        let c = self.io.shape[0];
        let plane = self.io.shape[1] * self.io.shape[2];
        let mut im = Tensor::zeros(&self.io.shape);
        let mut ic = Tensor::zeros(&self.io.shape);
        for ch in 0..c {
            for p in 0..plane {
                let idx = ch * plane + p;
                if self.mask.grid.data[p] > 0.5 {
                    ic.data[idx] = self.io.data[idx];
                } else {
                    im.data[idx] = self.io.data[idx];
                }
            }
        }
        (im, ic)
    }
}

/// Glyph intensity for mode `m` at pixel (y, x). High-contrast patterns with
/// pairwise masked-L1 distance at least 0.4 on any contiguous region.
fn glyph_value(mode: usize, y: usize, x: usize) -> f64 {
    let (lo, hi) = (0.1, 0.9);
    match mode % 8 {
        0 => lo,
        1 => hi,
        2 => {
            if (x / 2) % 2 == 0 {
                hi
            } else {
                lo
            }
        }
        3 => {
            if (y / 2) % 2 == 0 {
                hi
            } else {
                lo
            }
        }
        4 => {
            if (x / 2 + y / 2) % 2 == 0 {
                hi
            } else {
                lo
            }
        }
        5 => {
            if (x / 2 + y / 2) % 2 == 0 {
                lo
            } else {
                hi
            }
        }
        6 => {
            if (x / 4) % 2 == 0 {
                hi
            } else {
                lo
            }
        }
        _ => {
            if (y / 4) % 2 == 0 {
                hi
            } else {
                lo
            }
        }
    }
}

/// Render the full image for a given context and mode: ramp-plus-frame
/// context everywhere, glyph content inside the masked region. Values are
/// pushed through the 8-bit quantizer so renderings match stored files
/// bit-for-bit.
pub fn render_image(spec: &CorpusSpec, context_seed: u64, mode: usize, mask: &Mask) -> Tensor {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut rng = Prng::seed(context_seed);
    let base = rng.uniform_in(0.35, 0.65);
    let ax = rng.uniform_in(-0.15, 0.15);
    let ay = rng.uniform_in(-0.15, 0.15);
    let frame = rng.uniform_in(0.1, 0.9);

    let mut img = Tensor::zeros(&[c, h, w]);
    let plane = h * w;
    for y in 0..h {
        let v = 2.0 * (y as f64 / (h - 1) as f64) - 1.0;
        for x in 0..w {
            let u = 2.0 * (x as f64 / (w - 1) as f64) - 1.0;
            let in_frame = y < 2 || y >= h - 2 || x < 2 || x >= w - 2;
            let context = if in_frame { frame } else { base + ax * u + ay * v };
            let value = if mask.grid.data[y * w + x] > 0.5 {
                glyph_value(mode, y, x)
            } else {
                context
            };
            let q = netpbm::quantize(value);
            for ch in 0..c {
                img.data[ch * plane + y * w + x] = q;
            }
        }
    }
    img
}

/// Generate sample `index` of the corpus: a pure function of (spec, index).
pub fn gen_sample(spec: &CorpusSpec, index: usize) -> Result<ImageSample> {
    if index >= spec.total() {
        return Err(Error::Contract(format!(
            "sample index {index} out of range ({} samples)",
            spec.total()
        )));
    }
    let mut rng = Prng::derive(spec.seed, index as u64);
    let context_seed = rng.next_u64();
    let weights = crate::dist::Categorical::new(spec.mode_probs.clone())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mode_label = crate::dist::sample_categorical(&weights, &mut rng);
    let mask = match spec.mask {
        MaskPolicy::Center { fraction } => center_mask(spec.height, spec.width, fraction)?,
        MaskPolicy::Random => {
            let mut mask_rng = rng.split();
            random_mask(spec.height, spec.width, &mut mask_rng)
        }
    };
    let io = render_image(spec, context_seed, mode_label, &mask);
    Ok(ImageSample {
        io,
        mask,
        mode_label,
        context_seed,
    })
}

// ----- on-disk corpus -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: String,
    pub mode_label: usize,
    pub context_seed: u64,
    pub mask: MaskInfo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub samples: Vec<ManifestEntry>,
}

/// A fully materialized corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<ImageSample>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let samples = (0..spec.total())
            .map(|i| gen_sample(spec, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            spec: spec.clone(),
            samples,
        })
    }

    pub fn train(&self) -> &[ImageSample] {
        &self.samples[..self.spec.n_train]
    }

    pub fn test(&self) -> &[ImageSample] {
        &self.samples[self.spec.n_train..]
    }

    /// Write every sample as a PGM/PPM file plus `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let ext = if self.spec.channels == 1 { "pgm" } else { "ppm" };
            let file = format!("sample_{i:05}.{ext}");
            netpbm::write_image(&dir.join(&file), &s.io)?;
            entries.push(ManifestEntry {
                file,
                split: if i < self.spec.n_train {
                    "train".into()
                } else {
                    "test".into()
                },
                mode_label: s.mode_label,
                context_seed: s.context_seed,
                mask: s.mask.info.clone(),
            });
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            samples: entries,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Load a corpus previously written by [`Corpus::write_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Config(format!("cannot read {manifest_path:?}: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("corrupt manifest {manifest_path:?}: {e}")))?;
        manifest.spec.validate()?;
        if manifest.samples.len() != manifest.spec.total() {
            return Err(Error::Config(format!(
                "manifest lists {} samples but spec declares {}",
                manifest.samples.len(),
                manifest.spec.total()
            )));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let io = netpbm::read_image(&dir.join(&e.file))?;
            if io.shape != [manifest.spec.channels, manifest.spec.height, manifest.spec.width] {
                return Err(Error::Config(format!(
                    "{}: image shape {:?} does not match spec",
                    e.file, io.shape
                )));
            }
            let mask = mask_from_info(manifest.spec.height, manifest.spec.width, &e.mask)?;
            samples.push(ImageSample {
                io,
                mask,
                mode_label: e.mode_label,
                context_seed: e.context_seed,
            });
        }
        Ok(Corpus {
            spec: manifest.spec,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_mask_default_is_16x16() {
        let m = center_mask(32, 32, 0.25).unwrap();
        assert_eq!(m.grid.data.iter().sum::<f64>(), 256.0);
        // centered: rows/cols 8..24
        for y in 0..32 {
            for x in 0..32 {
                let inside = (8..24).contains(&y) && (8..24).contains(&x);
                assert_eq!(m.grid.data[y * 32 + x] > 0.5, inside);
            }
        }
    }

    #[test]
    fn center_mask_area_close_to_target() {
        for f in [0.05, 0.1, 0.25, 0.4, 0.6, 0.9] {
            let m = center_mask(32, 32, f).unwrap();
            let area = m.grid.data.iter().sum::<f64>();
            let target = f * 1024.0;
            let side = area.sqrt();
            assert!(
                (area - target).abs() <= 2.0 * side + 1.0,
                "fraction {f}: area {area} target {target}"
            );
        }
    }

    #[test]
    fn center_mask_flip_symmetric() {
        let m = center_mask(32, 32, 0.25).unwrap();
        let g = &m.grid.data;
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(g[y * 32 + x], g[y * 32 + (31 - x)]);
                assert_eq!(g[y * 32 + x], g[(31 - y) * 32 + x]);
            }
        }
    }

    #[test]
    fn center_mask_rejects_bad_fraction() {
        assert!(center_mask(32, 32, 0.0).is_err());
        assert!(center_mask(32, 32, 0.95).is_err());
    }

    #[test]
    fn random_mask_fraction_contract() {
        let mut rng = Prng::seed(60);
        for _ in 0..200 {
            let m = random_mask(32, 32, &mut rng);
            let f = m.missing_fraction();
            assert!((0.2..=0.5).contains(&f), "fraction {f}");
        }
    }

    #[test]
    fn random_mask_deterministic_and_rebuildable() {
        let m1 = random_mask(32, 32, &mut Prng::seed(61));
        let m2 = random_mask(32, 32, &mut Prng::seed(61));
        assert_eq!(m1, m2);
        let rebuilt = mask_from_info(32, 32, &m1.info).unwrap();
        assert_eq!(rebuilt.grid, m1.grid);
    }

    #[test]
    fn random_mask_mean_fraction_pinned() {
        let mut rng = Prng::seed(62);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| random_mask(32, 32, &mut rng).missing_fraction())
            .sum::<f64>()
            / n as f64;
        assert!((0.3..=0.4).contains(&mean), "mean fraction {mean}");
    }

    #[test]
    fn gen_sample_bit_deterministic() {
        let spec = CorpusSpec {
            n_train: 8,
            n_test: 2,
            ..CorpusSpec::default()
        };
        let a = gen_sample(&spec, 3).unwrap();
        let b = gen_sample(&spec, 3).unwrap();
        assert_eq!(a.io, b.io);
        assert_eq!(a.mask.grid, b.mask.grid);
        assert_eq!(a.mode_label, b.mode_label);
    }

    #[test]
    fn modes_share_visible_pixels_exactly() {
        let spec = CorpusSpec::default();
        let s = gen_sample(&spec, 5).unwrap();
        for mode in 0..spec.modes {
            let variant = render_image(&spec, s.context_seed, mode, &s.mask);
            for p in 0..spec.height * spec.width {
                if s.mask.grid.data[p] < 0.5 {
                    assert_eq!(variant.data[p], s.io.data[p], "visible pixel {p} differs");
                }
            }
            if mode == s.mode_label {
                assert_eq!(variant.data, s.io.data);
            }
        }
    }

    #[test]
    fn glyph_variants_well_separated() {
        let spec = CorpusSpec::default();
        let mask = center_mask(32, 32, 0.25).unwrap();
        let imgs: Vec<Tensor> = (0..4)
            .map(|m| render_image(&spec, 123, m, &mask))
            .collect();
        let masked_l1 = |a: &Tensor, b: &Tensor| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for p in 0..1024 {
                if mask.grid.data[p] > 0.5 {
                    acc += (a.data[p] - b.data[p]).abs();
                    n += 1.0;
                }
            }
            acc / n
        };
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d = masked_l1(&imgs[i], &imgs[j]);
                assert!(d >= 0.35, "modes {i},{j} too close: {d}");
            }
        }
    }

    #[test]
    fn mode_frequencies_match_probs() {
        let spec = CorpusSpec {
            n_train: 10_000,
            n_test: 0,
            ..CorpusSpec::default()
        };
        let mut counts = [0usize; 4];
        for i in 0..10_000 {
            counts[gen_sample(&spec, i).unwrap().mode_label] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.015, "mode frequency {f}");
        }
    }

    #[test]
    fn split_recomposes_exactly() {
        let spec = CorpusSpec::default();
        let s = gen_sample(&spec, 0).unwrap();
        let (im, ic) = s.split();
        for i in 0..s.io.numel() {
            assert_eq!(im.data[i] + ic.data[i], s.io.data[i]);
            assert!(im.data[i] == 0.0 || ic.data[i] == 0.0);
        }
    }

    #[test]
    fn split_degenerate_masks() {
        let spec = CorpusSpec::default();
        let mut s = gen_sample(&spec, 1).unwrap();
        // nearly-all-one mask (0.9 cap): complement carries that content
        s.mask = center_mask(32, 32, 0.9).unwrap();
        let (_, ic) = s.split();
        let missing: f64 = s.mask.grid.data.iter().sum();
        let nonzero = ic.data.iter().filter(|v| **v != 0.0).count();
        assert!(nonzero as f64 <= missing);
    }

    #[test]
    fn corpus_roundtrip_through_disk() {
        let spec = CorpusSpec {
            n_train: 6,
            n_test: 2,
            ..CorpusSpec::default()
        };
        let corpus = Corpus::generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_dir(dir.path()).unwrap();
        let loaded = Corpus::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 8);
        for (a, b) in corpus.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.io, b.io, "images should round-trip bit-exactly");
            assert_eq!(a.mask.grid, b.mask.grid);
            assert_eq!(a.mode_label, b.mode_label);
        }
    }

    #[test]
    fn corrupt_manifest_is_a_named_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.json"), b"{ not json").unwrap();
        match Corpus::load_dir(dir.path()) {
            Err(Error::Config(msg)) => assert!(msg.contains("manifest")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
