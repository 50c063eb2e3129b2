//! The networks: masked-image encoder, complement encoder, mixture head,
//! decoder, and discriminator — small convolutional/dense stacks sized for
//! desk-scale images.
//!
//! Plain [`ModelParams`] hold the weights between steps; [`ModelParams::bind`]
//! registers them on a tape (differentiable or frozen per parameter group)
//! and returns a [`BoundModel`] exposing the forward passes. All forwards are
//! deterministic; sampling happens only through explicit reparameterized
//! draws outside this module.

use crate::error::{Error, Result};
use crate::moe::{GaussianVars, MixtureVars};
use crate::prng::Prng;
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Encoder trunk widths (fixed), decoder/discriminator widths (sized for the
/// single-core training budget), and the mixture head's hidden width.
const ENC_C1: usize = 16;
const ENC_C2: usize = 32;
const DEC_C0: usize = 32;
const DEC_C1: usize = 12;
const DEC_C2: usize = 6;
const DISC_C1: usize = 8;
const DISC_C2: usize = 16;
const DISC_C3: usize = 32;
const HEAD_HIDDEN: usize = 64;

const LEAK: f64 = 0.2;
const LOG_VAR_CLAMP: f64 = 10.0;
/// Initial bias of every log-variance head: small starting variances keep
/// early KLs finite and reparameterization stable.
const LOG_VAR_BIAS: f64 = -2.0;

/// Image and latent geometry, persisted in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub k: usize,
}

fn conv_out(x: usize) -> usize {
    // k=3, stride 2, pad 1
    (x + 2 - 3) / 2 + 1
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(
                "model needs height/width multiples of 4, at least 8".into(),
            ));
        }
        if self.latent_dim < 1 || self.k < 1 {
            return Err(Error::Config("latent_dim and k must be >= 1".into()));
        }
        Ok(())
    }

    fn disc_flat(&self) -> usize {
        let h = conv_out(conv_out(conv_out(self.height)));
        let w = conv_out(conv_out(conv_out(self.width)));
        DISC_C3 * h * w
    }

    fn dec_fc_out(&self) -> usize {
        DEC_C0 * (self.height / 4) * (self.width / 4)
    }

    /// Width of the mixture head's output: k logits, k·d means, k·d
    /// log-variances.
    fn head_out(&self) -> usize {
        self.k + 2 * self.k * self.latent_dim
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init(f: usize, c: usize, kh: usize, kw: usize, rng: &mut Prng) -> Self {
        ConvParams {
            w: Tensor::he_uniform(&[f, c, kh, kw], c * kh * kw, rng),
            b: Tensor::zeros(&[f]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseParams {
    fn init(out: usize, inp: usize, rng: &mut Prng) -> Self {
        DenseParams {
            w: Tensor::he_uniform(&[out, inp], inp, rng),
            b: Tensor::zeros(&[out]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub mean: DenseParams,
    pub log_var: DenseParams,
}

impl EncoderParams {
    fn init(dims: &ModelDims, rng: &mut Prng) -> Self {
        let mut p = EncoderParams {
            conv1: ConvParams::init(ENC_C1, dims.channels + 1, 3, 3, rng),
            conv2: ConvParams::init(ENC_C2, ENC_C1, 3, 3, rng),
            mean: DenseParams::init(dims.latent_dim, ENC_C2, rng),
            log_var: DenseParams::init(dims.latent_dim, ENC_C2, rng),
        };
        p.log_var.b = Tensor::full(&[dims.latent_dim], LOG_VAR_BIAS);
        p
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub hidden: DenseParams,
    pub out: DenseParams,
}

impl HeadParams {
    fn init(dims: &ModelDims, rng: &mut Prng) -> Self {
        let mut p = HeadParams {
            hidden: DenseParams::init(HEAD_HIDDEN, dims.latent_dim, rng),
            out: DenseParams::init(dims.head_out(), HEAD_HIDDEN, rng),
        };
        // log-variance slice of the output starts at small variances
        let lv_start = dims.k + dims.k * dims.latent_dim;
        for v in &mut p.out.b.data[lv_start..] {
            *v = LOG_VAR_BIAS;
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub fc: DenseParams,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

impl DecoderParams {
    fn init(dims: &ModelDims, rng: &mut Prng) -> Self {
        DecoderParams {
            fc: DenseParams::init(dims.dec_fc_out(), 2 * dims.latent_dim, rng),
            conv1: ConvParams::init(DEC_C1, DEC_C0, 3, 3, rng),
            conv2: ConvParams::init(DEC_C2, DEC_C1, 3, 3, rng),
            conv3: ConvParams::init(dims.channels, DEC_C2, 1, 1, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
    pub fc: DenseParams,
}

impl DiscParams {
    fn init(dims: &ModelDims, rng: &mut Prng) -> Self {
        DiscParams {
            conv1: ConvParams::init(DISC_C1, dims.channels, 3, 3, rng),
            conv2: ConvParams::init(DISC_C2, DISC_C1, 3, 3, rng),
            conv3: ConvParams::init(DISC_C3, DISC_C2, 3, 3, rng),
            fc: DenseParams::init(1, dims.disc_flat(), rng),
        }
    }
}

/// All trainable weights. Generator parameters are the two encoders, the
/// mixture head and the decoder; the discriminator is its own group.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc_m: EncoderParams,
    pub enc_c: EncoderParams,
    pub head: HeadParams,
    pub dec: DecoderParams,
    pub disc: DiscParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Generator,
    Discriminator,
}

impl ModelParams {
    pub fn init(dims: ModelDims, rng: &mut Prng) -> Result<Self> {
        dims.validate()?;
        Ok(ModelParams {
            dims,
            enc_m: EncoderParams::init(&dims, rng),
            enc_c: EncoderParams::init(&dims, rng),
            head: HeadParams::init(&dims, rng),
            dec: DecoderParams::init(&dims, rng),
            disc: DiscParams::init(&dims, rng),
        })
    }

    /// Named tensors of one group, in the canonical (checkpoint) order.
    pub fn named(&self, group: ParamGroup) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        match group {
            ParamGroup::Generator => {
                for (prefix, enc) in [("enc_m", &self.enc_m), ("enc_c", &self.enc_c)] {
                    out.push((format!("{prefix}.conv1.w"), &enc.conv1.w));
                    out.push((format!("{prefix}.conv1.b"), &enc.conv1.b));
                    out.push((format!("{prefix}.conv2.w"), &enc.conv2.w));
                    out.push((format!("{prefix}.conv2.b"), &enc.conv2.b));
                    out.push((format!("{prefix}.mean.w"), &enc.mean.w));
                    out.push((format!("{prefix}.mean.b"), &enc.mean.b));
                    out.push((format!("{prefix}.log_var.w"), &enc.log_var.w));
                    out.push((format!("{prefix}.log_var.b"), &enc.log_var.b));
                }
                out.push(("head.hidden.w".into(), &self.head.hidden.w));
                out.push(("head.hidden.b".into(), &self.head.hidden.b));
                out.push(("head.out.w".into(), &self.head.out.w));
                out.push(("head.out.b".into(), &self.head.out.b));
                out.push(("dec.fc.w".into(), &self.dec.fc.w));
                out.push(("dec.fc.b".into(), &self.dec.fc.b));
                out.push(("dec.conv1.w".into(), &self.dec.conv1.w));
                out.push(("dec.conv1.b".into(), &self.dec.conv1.b));
                out.push(("dec.conv2.w".into(), &self.dec.conv2.w));
                out.push(("dec.conv2.b".into(), &self.dec.conv2.b));
                out.push(("dec.conv3.w".into(), &self.dec.conv3.w));
                out.push(("dec.conv3.b".into(), &self.dec.conv3.b));
            }
            ParamGroup::Discriminator => {
                out.push(("disc.conv1.w".into(), &self.disc.conv1.w));
                out.push(("disc.conv1.b".into(), &self.disc.conv1.b));
                out.push(("disc.conv2.w".into(), &self.disc.conv2.w));
                out.push(("disc.conv2.b".into(), &self.disc.conv2.b));
                out.push(("disc.conv3.w".into(), &self.disc.conv3.w));
                out.push(("disc.conv3.b".into(), &self.disc.conv3.b));
                out.push(("disc.fc.w".into(), &self.disc.fc.w));
                out.push(("disc.fc.b".into(), &self.disc.fc.b));
            }
        }
        out
    }

    /// Mutable access in the same canonical order.
    pub fn named_mut(&mut self, group: ParamGroup) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match group {
            ParamGroup::Generator => {
                for (prefix, enc) in [("enc_m", &mut self.enc_m), ("enc_c", &mut self.enc_c)] {
                    out.push((format!("{prefix}.conv1.w"), &mut enc.conv1.w));
                    out.push((format!("{prefix}.conv1.b"), &mut enc.conv1.b));
                    out.push((format!("{prefix}.conv2.w"), &mut enc.conv2.w));
                    out.push((format!("{prefix}.conv2.b"), &mut enc.conv2.b));
                    out.push((format!("{prefix}.mean.w"), &mut enc.mean.w));
                    out.push((format!("{prefix}.mean.b"), &mut enc.mean.b));
                    out.push((format!("{prefix}.log_var.w"), &mut enc.log_var.w));
                    out.push((format!("{prefix}.log_var.b"), &mut enc.log_var.b));
                }
                out.push(("head.hidden.w".into(), &mut self.head.hidden.w));
                out.push(("head.hidden.b".into(), &mut self.head.hidden.b));
                out.push(("head.out.w".into(), &mut self.head.out.w));
                out.push(("head.out.b".into(), &mut self.head.out.b));
                out.push(("dec.fc.w".into(), &mut self.dec.fc.w));
                out.push(("dec.fc.b".into(), &mut self.dec.fc.b));
                out.push(("dec.conv1.w".into(), &mut self.dec.conv1.w));
                out.push(("dec.conv1.b".into(), &mut self.dec.conv1.b));
                out.push(("dec.conv2.w".into(), &mut self.dec.conv2.w));
                out.push(("dec.conv2.b".into(), &mut self.dec.conv2.b));
                out.push(("dec.conv3.w".into(), &mut self.dec.conv3.w));
                out.push(("dec.conv3.b".into(), &mut self.dec.conv3.b));
            }
            ParamGroup::Discriminator => {
                out.push(("disc.conv1.w".into(), &mut self.disc.conv1.w));
                out.push(("disc.conv1.b".into(), &mut self.disc.conv1.b));
                out.push(("disc.conv2.w".into(), &mut self.disc.conv2.w));
                out.push(("disc.conv2.b".into(), &mut self.disc.conv2.b));
                out.push(("disc.conv3.w".into(), &mut self.disc.conv3.w));
                out.push(("disc.conv3.b".into(), &mut self.disc.conv3.b));
                out.push(("disc.fc.w".into(), &mut self.disc.fc.w));
                out.push(("disc.fc.b".into(), &mut self.disc.fc.b));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named(ParamGroup::Generator)
            .iter()
            .chain(self.named(ParamGroup::Discriminator).iter())
            .all(|(_, t)| t.is_finite())
    }

    /// Register this model's weights on a tape. Each group can be bound
    /// differentiable or frozen; frozen weights participate in forwards but
    /// receive no gradients (and their gradient kernels are skipped).
    pub fn bind(&self, tape: &mut Tape, gen_grad: bool, disc_grad: bool) -> BoundModel {
        let mut reg = |t: &Tensor, grad: bool| {
            if grad {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let bind_conv = |tape: &mut dyn FnMut(&Tensor, bool) -> Var, p: &ConvParams, g: bool| {
            BoundConv {
                w: tape(&p.w, g),
                b: tape(&p.b, g),
            }
        };
        let bind_dense = |tape: &mut dyn FnMut(&Tensor, bool) -> Var, p: &DenseParams, g: bool| {
            BoundDense {
                w: tape(&p.w, g),
                b: tape(&p.b, g),
            }
        };
        let bind_enc = |tape: &mut dyn FnMut(&Tensor, bool) -> Var, e: &EncoderParams, g: bool| {
            BoundEncoder {
                conv1: bind_conv(tape, &e.conv1, g),
                conv2: bind_conv(tape, &e.conv2, g),
                mean: bind_dense(tape, &e.mean, g),
                log_var: bind_dense(tape, &e.log_var, g),
            }
        };
        let f: &mut dyn FnMut(&Tensor, bool) -> Var = &mut reg;
        BoundModel {
            dims: self.dims,
            enc_m: bind_enc(f, &self.enc_m, gen_grad),
            enc_c: bind_enc(f, &self.enc_c, gen_grad),
            head: BoundHead {
                hidden: bind_dense(f, &self.head.hidden, gen_grad),
                out: bind_dense(f, &self.head.out, gen_grad),
            },
            dec: BoundDecoder {
                fc: bind_dense(f, &self.dec.fc, gen_grad),
                conv1: bind_conv(f, &self.dec.conv1, gen_grad),
                conv2: bind_conv(f, &self.dec.conv2, gen_grad),
                conv3: bind_conv(f, &self.dec.conv3, gen_grad),
            },
            disc: BoundDisc {
                conv1: bind_conv(f, &self.disc.conv1, disc_grad),
                conv2: bind_conv(f, &self.disc.conv2, disc_grad),
                conv3: bind_conv(f, &self.disc.conv3, disc_grad),
                fc: bind_dense(f, &self.disc.fc, disc_grad),
            },
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct BoundDense {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct BoundEncoder {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub mean: BoundDense,
    pub log_var: BoundDense,
}

#[derive(Clone, Copy)]
pub struct BoundHead {
    pub hidden: BoundDense,
    pub out: BoundDense,
}

#[derive(Clone, Copy)]
pub struct BoundDecoder {
    pub fc: BoundDense,
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub conv3: BoundConv,
}

#[derive(Clone, Copy)]
pub struct BoundDisc {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub conv3: BoundConv,
    pub fc: BoundDense,
}

/// Tape-bound model exposing the forward passes.
#[derive(Clone, Copy)]
pub struct BoundModel {
    pub dims: ModelDims,
    pub enc_m: BoundEncoder,
    pub enc_c: BoundEncoder,
    pub head: BoundHead,
    pub dec: BoundDecoder,
    pub disc: BoundDisc,
}

fn dense(tape: &mut Tape, p: BoundDense, x: Var) -> Result<Var> {
    let y = tape.matmul(p.w, x)?;
    tape.add(y, p.b)
}

fn validate_encoder_input(tape: &Tape, img: Var, mask: Var, zero_on_missing: bool) -> Result<()> {
    let mv = tape.val(mask);
    if !mv.iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(Error::Input("encoder mask must be exactly binary".into()));
    }
    let iv = tape.val(img);
    if !iv.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("encoder image contains NaN/Inf".into()));
    }
    // each partial image must be zero outside its own support
    let plane = mv.len();
    let channels = iv.len() / plane;
    for ch in 0..channels {
        for p in 0..plane {
            let hidden = (mv[p] == 1.0) == zero_on_missing;
            if hidden && iv[ch * plane + p] != 0.0 {
                return Err(Error::Input(
                    "partial image carries content outside its support".into(),
                ));
            }
        }
    }
    Ok(())
}

impl BoundModel {
    fn encode(&self, tape: &mut Tape, enc: BoundEncoder, img: Var, mask: Var) -> Result<GaussianVars> {
        let x = tape.concat(img, mask)?;
        let c1 = tape.conv2d(x, enc.conv1.w, Some(enc.conv1.b), 2, 1)?;
        let h1 = tape.leaky_relu(c1, LEAK);
        let c2 = tape.conv2d(h1, enc.conv2.w, Some(enc.conv2.b), 2, 1)?;
        let h2 = tape.leaky_relu(c2, LEAK);
        let g = tape.avg_pool_all(h2)?;
        let mean = dense(tape, enc.mean, g)?;
        let lv = dense(tape, enc.log_var, g)?;
        let log_var = tape.clamp(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok(GaussianVars { mean, log_var })
    }

    /// Posterior over the masked-image latent. `img` must be zeroed on
    /// missing pixels; `mask` is the binary missing-pixel indicator.
    pub fn encode_masked(&self, tape: &mut Tape, img: Var, mask: Var) -> Result<GaussianVars> {
        validate_encoder_input(tape, img, mask, true)?;
        self.encode(tape, self.enc_m, img, mask)
    }

    /// Posterior over the complement latent. `img` must be zeroed on
    /// visible pixels.
    pub fn encode_complement(&self, tape: &mut Tape, img: Var, mask: Var) -> Result<GaussianVars> {
        validate_encoder_input(tape, img, mask, false)?;
        self.encode(tape, self.enc_c, img, mask)
    }

    /// Map a masked-image latent to the k-primitive mixture over the
    /// complement latent.
    pub fn gmm_head(&self, tape: &mut Tape, z_m: Var) -> Result<MixtureVars> {
        let (k, d) = (self.dims.k, self.dims.latent_dim);
        let h = dense(tape, self.head.hidden, z_m)?;
        let h = tape.leaky_relu(h, LEAK);
        let out = dense(tape, self.head.out, h)?;
        let logits = tape.slice(out, 0, k)?;
        let alpha = tape.softmax(logits)?;
        let means = tape.slice(out, k, k * d)?;
        let lvs = tape.slice(out, k + k * d, k * d)?;
        let log_vars = tape.clamp(lvs, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok(MixtureVars {
            alpha,
            means,
            log_vars,
            k,
            d,
        })
    }

    /// Splice the two latents and decode to an image in [0,1].
    pub fn decode(&self, tape: &mut Tape, z_m: Var, z: Var) -> Result<Var> {
        let dims = &self.dims;
        let cat = tape.concat(z_m, z)?;
        let t = dense(tape, self.dec.fc, cat)?;
        let t = tape.leaky_relu(t, LEAK);
        let t = tape.reshape(t, &[DEC_C0, dims.height / 4, dims.width / 4])?;
        let u1 = tape.upsample2x(t)?;
        let c1 = tape.conv2d(u1, self.dec.conv1.w, Some(self.dec.conv1.b), 1, 1)?;
        let c1 = tape.leaky_relu(c1, LEAK);
        let u2 = tape.upsample2x(c1)?;
        let c2 = tape.conv2d(u2, self.dec.conv2.w, Some(self.dec.conv2.b), 1, 1)?;
        let c2 = tape.leaky_relu(c2, LEAK);
        let y = tape.conv2d(c2, self.dec.conv3.w, Some(self.dec.conv3.b), 1, 0)?;
        Ok(tape.sigmoid(y))
    }

    /// Unbounded realism score for an image.
    pub fn discriminate(&self, tape: &mut Tape, img: Var) -> Result<Var> {
        let c1 = tape.conv2d(img, self.disc.conv1.w, Some(self.disc.conv1.b), 2, 1)?;
        let h1 = tape.leaky_relu(c1, LEAK);
        let c2 = tape.conv2d(h1, self.disc.conv2.w, Some(self.disc.conv2.b), 2, 1)?;
        let h2 = tape.leaky_relu(c2, LEAK);
        let c3 = tape.conv2d(h2, self.disc.conv3.w, Some(self.disc.conv3.b), 2, 1)?;
        let h3 = tape.leaky_relu(c3, LEAK);
        let n = tape.numel(h3);
        let flat = tape.reshape(h3, &[n])?;
        let score = tape.matmul(self.disc.fc.w, flat)?;
        tape.add(score, self.disc.fc.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            channels: 1,
            height: 8,
            width: 8,
            latent_dim: 3,
            k: 2,
        }
    }

    fn test_inputs(dims: &ModelDims, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = Prng::seed(seed);
        let plane = dims.height * dims.width;
        let mut mask = Tensor::zeros(&[1, dims.height, dims.width]);
        for y in 2..6 {
            for x in 2..6 {
                mask.data[y * dims.width + x] = 1.0;
            }
        }
        let io = Tensor::from_vec(
            &[dims.channels, dims.height, dims.width],
            (0..dims.channels * plane).map(|_| rng.uniform()).collect(),
        );
        let mut im = io.clone();
        let mut ic = io.clone();
        for ch in 0..dims.channels {
            for p in 0..plane {
                if mask.data[p] > 0.5 {
                    im.data[ch * plane + p] = 0.0;
                } else {
                    ic.data[ch * plane + p] = 0.0;
                }
            }
        }
        (im, ic, mask)
    }

    #[test]
    fn encoder_output_shapes_and_determinism() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(1)).unwrap();
        let (im, _, mask) = test_inputs(&dims, 2);
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true, true);
            let iv = tape.constant(&im);
            let mv = tape.constant(&mask);
            let g = bound.encode_masked(&mut tape, iv, mv).unwrap();
            (tape.val(g.mean).to_vec(), tape.val(g.log_var).to_vec())
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1.len(), dims.latent_dim);
        assert_eq!(l1.len(), dims.latent_dim);
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        assert!(l1.iter().all(|v| (-10.0..=10.0).contains(v)));
    }

    #[test]
    fn encoder_invariant_to_hidden_pixels() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(3)).unwrap();
        let (im, _, mask) = test_inputs(&dims, 4);
        // randomizing hidden pixels of the ORIGINAL image then re-zeroing
        // them yields the exact same masked input, hence identical encodings
        let mut altered = im.clone();
        let mut rng = Prng::seed(5);
        for p in 0..64 {
            if mask.data[p] > 0.5 {
                altered.data[p] = rng.uniform(); // hidden content changes...
                altered.data[p] = 0.0; // ...but the masked image zeroes it
            }
        }
        let encode = |img: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false, false);
            let iv = tape.constant(img);
            let mv = tape.constant(&mask);
            let g = bound.encode_masked(&mut tape, iv, mv).unwrap();
            tape.val(g.mean).to_vec()
        };
        let a = encode(&im);
        let b = encode(&altered);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn encoder_rejects_content_outside_support() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(6)).unwrap();
        let (im, _, mask) = test_inputs(&dims, 7);
        let mut bad = im.clone();
        // paint a hidden pixel
        let hole = mask.data.iter().position(|v| *v == 1.0).unwrap();
        bad.data[hole] = 0.7;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false, false);
        let iv = tape.constant(&bad);
        let mv = tape.constant(&mask);
        assert!(matches!(
            bound.encode_masked(&mut tape, iv, mv),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn encoder_rejects_non_binary_mask() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(8)).unwrap();
        let (im, _, mut mask) = test_inputs(&dims, 9);
        mask.data[0] = 0.5;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false, false);
        let iv = tape.constant(&im);
        let mv = tape.constant(&mask);
        assert!(matches!(
            bound.encode_masked(&mut tape, iv, mv),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn complement_encoder_zero_input_mean_equals_bias() {
        let dims = small_dims();
        let mut params = ModelParams::init(dims, &mut Prng::seed(10)).unwrap();
        // zero the final dense layers; plant a recognizable bias
        params.enc_c.mean.w = Tensor::zeros(&[dims.latent_dim, ENC_C2]);
        params.enc_c.mean.b = Tensor::from_vec(&[3], vec![0.25, -0.5, 1.0]);
        let (_, _, mask) = test_inputs(&dims, 11);
        let zero_ic = Tensor::zeros(&[1, 8, 8]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false, false);
        let iv = tape.constant(&zero_ic);
        let mv = tape.constant(&mask);
        let g = bound.encode_complement(&mut tape, iv, mv).unwrap();
        assert_eq!(tape.val(g.mean), &[0.25, -0.5, 1.0]);
    }

    #[test]
    fn head_weights_sum_to_one_and_respond_to_latent() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(12)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false, false);
        let z = tape.constant(&Tensor::from_vec(&[3], vec![0.4, -0.2, 0.1]));
        let mix = bound.gmm_head(&mut tape, z).unwrap();
        let alpha = tape.val(mix.alpha);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(tape.numel(mix.means), dims.k * dims.latent_dim);

        // perturbing the latent moves at least one component mean
        let z2 = tape.constant(&Tensor::from_vec(&[3], vec![0.4 + 1e-3, -0.2, 0.1]));
        let mix2 = bound.gmm_head(&mut tape, z2).unwrap();
        let moved = tape
            .val(mix.means)
            .iter()
            .zip(tape.val(mix2.means))
            .any(|(a, b)| (a - b).abs() > 0.0);
        assert!(moved);
    }

    #[test]
    fn head_with_single_primitive_is_one_gaussian() {
        let dims = ModelDims {
            k: 1,
            ..small_dims()
        };
        let params = ModelParams::init(dims, &mut Prng::seed(13)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false, false);
        let z = tape.constant(&Tensor::from_vec(&[3], vec![0.0, 0.5, -0.5]));
        let mix = bound.gmm_head(&mut tape, z).unwrap();
        assert_eq!(tape.val(mix.alpha), &[1.0]);
        let snap = mix.snapshot(&tape).unwrap();
        assert_eq!(snap.k(), 1);
    }

    #[test]
    fn decode_shape_and_range() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(14)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false, false);
        let zm = tape.constant(&Tensor::from_vec(&[3], vec![5.0, -3.0, 0.2]));
        let z = tape.constant(&Tensor::from_vec(&[3], vec![-8.0, 2.0, 1.4]));
        let img = bound.decode(&mut tape, zm, z).unwrap();
        assert_eq!(tape.shape(img), &[1, 8, 8]);
        assert!(tape.val(img).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_scalar_and_deterministic() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(15)).unwrap();
        let (im, _, _) = test_inputs(&dims, 16);
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false, false);
            let iv = tape.constant(&im);
            let s = bound.discriminate(&mut tape, iv).unwrap();
            assert_eq!(tape.numel(s), 1);
            tape.scalar_val(s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_groups_receive_no_gradients() {
        let dims = small_dims();
        let params = ModelParams::init(dims, &mut Prng::seed(17)).unwrap();
        let (im, _, mask) = test_inputs(&dims, 18);
        let mut tape = Tape::new();
        // generator differentiable, discriminator frozen
        let bound = params.bind(&mut tape, true, false);
        let iv = tape.constant(&im);
        let mv = tape.constant(&mask);
        let g = bound.encode_masked(&mut tape, iv, mv).unwrap();
        let z = g.sample(&mut tape, &mut Prng::seed(19)).unwrap();
        let img = bound.decode(&mut tape, z, z).unwrap();
        let score = bound.discriminate(&mut tape, img).unwrap();
        let loss = tape.square(score);
        let loss = tape.sum(loss);
        tape.backward(loss).unwrap();
        // gradient reaches the generator through the frozen discriminator
        assert!(tape
            .grad(bound.dec.conv1.w)
            .unwrap()
            .iter()
            .any(|v| v.abs() > 0.0));
        assert!(tape.grad(bound.disc.conv1.w).is_none());
    }
}
