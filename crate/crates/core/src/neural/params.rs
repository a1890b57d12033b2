use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{count_params, ModelConfig};
use crate::error::Result;

/// Floating-point element type of a model. Training runs in `f32`;
/// `f64` instances exist for finite-difference gradient checks.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn c(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `exp` that the compiler can vectorize. Exact for `f64`.
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }
    #[inline]
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Scalar for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }
    #[inline]
    fn fast_tanh(self) -> Self {
        let x = self.clamp(-9.0, 9.0);
        let e = exp_f32(2.0 * x);
        (e - 1.0) / (e + 1.0)
    }
}

/// Branch-free `expf` (range reduction by ln 2 and a degree-6 polynomial),
/// within a few ulp over the whole range. Underflows to 0 below -87.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let under = x < -87.0;
    let x = x.clamp(-87.0, 88.0);
    // Adding 1.5 * 2^23 rounds to the nearest integer without a libm call.
    const ROUND: f32 = 12_582_912.0;
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    if under {
        0.0
    } else {
        y * scale
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Weights stored input-major: `y = x · w + b`, `w` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub up: Linear<F>,
    pub down: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub norm_attn: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm_ff: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<F> {
    pub norm_self: LayerNorm<F>,
    pub self_attn: Attention<F>,
    pub norm_cross: LayerNorm<F>,
    pub cross_attn: Attention<F>,
    pub norm_ff: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

/// All trainable tensors of the encoder-decoder, plus the (non-trainable)
/// sinusoidal position table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// Shared source/target token embedding, `vocab × d_model`.
    pub embed: Array2<F>,
    pub encoder: Vec<EncoderLayer<F>>,
    pub enc_norm: LayerNorm<F>,
    pub decoder: Vec<DecoderLayer<F>>,
    pub dec_norm: LayerNorm<F>,
    pub out: Linear<F>,
    pub(crate) positions: Array2<F>,
}

/// Visitation of tensors in declaration order.
trait Tensors<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>);
}

fn slice<F>(a: &ndarray::ArrayBase<ndarray::OwnedRepr<F>, impl ndarray::Dimension>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<F>(
    a: &mut ndarray::ArrayBase<ndarray::OwnedRepr<F>, impl ndarray::Dimension>,
) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

impl<F> Tensors<F> for Linear<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        out.push((format!("{prefix}.w"), slice(&self.w)));
        out.push((format!("{prefix}.b"), slice(&self.b)));
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        out.push(slice_mut(&mut self.w));
        out.push(slice_mut(&mut self.b));
    }
}

impl<F> Tensors<F> for LayerNorm<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        out.push((format!("{prefix}.gain"), slice(&self.gain)));
        out.push((format!("{prefix}.bias"), slice(&self.bias)));
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        out.push(slice_mut(&mut self.gain));
        out.push(slice_mut(&mut self.bias));
    }
}

impl<F> Tensors<F> for Attention<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.q.collect(&format!("{prefix}.q"), out);
        self.k.collect(&format!("{prefix}.k"), out);
        self.v.collect(&format!("{prefix}.v"), out);
        self.o.collect(&format!("{prefix}.o"), out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.o.collect_mut(out);
    }
}

impl<F> Tensors<F> for FeedForward<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        self.up.collect_mut(out);
        self.down.collect_mut(out);
    }
}

impl<F> Tensors<F> for EncoderLayer<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.norm_attn.collect(&format!("{prefix}.norm_attn"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.norm_ff.collect(&format!("{prefix}.norm_ff"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        self.norm_attn.collect_mut(out);
        self.attn.collect_mut(out);
        self.norm_ff.collect_mut(out);
        self.ff.collect_mut(out);
    }
}

impl<F> Tensors<F> for DecoderLayer<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.norm_self.collect(&format!("{prefix}.norm_self"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.norm_cross.collect(&format!("{prefix}.norm_cross"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.norm_ff.collect(&format!("{prefix}.norm_ff"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        self.norm_self.collect_mut(out);
        self.self_attn.collect_mut(out);
        self.norm_cross.collect_mut(out);
        self.cross_attn.collect_mut(out);
        self.norm_ff.collect_mut(out);
        self.ff.collect_mut(out);
    }
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform<F: Scalar>(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<F> {
        Array2::from_shape_simple_fn((rows, cols), || {
            F::c(self.rng.gen_range(-bound..bound))
        })
    }

    fn linear<F: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Linear<F> {
        Linear {
            w: self.uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: Array1::zeros(fan_out),
        }
    }

    fn norm<F: Scalar>(d: usize) -> LayerNorm<F> {
        LayerNorm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn attention<F: Scalar>(&mut self, d: usize) -> Attention<F> {
        Attention {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }

    fn ff<F: Scalar>(&mut self, d: usize, d_ff: usize) -> FeedForward<F> {
        FeedForward {
            up: self.linear(d, d_ff),
            down: self.linear(d_ff, d),
        }
    }
}

/// Sinusoidal position table, `len × d`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        F::c(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<F: Scalar> ModelParams<F> {
    /// Weights uniform in `±1/sqrt(fan_in)` (embedding rows use `±1/sqrt(d_model)`),
    /// biases zero, layer norms at gain 1 and bias 0. Deterministic per seed.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init { rng: &mut rng };
        let d = config.d_model;
        let embed = init.uniform(config.vocab_size, d, 1.0 / (d as f64).sqrt());
        let encoder = (0..config.n_layers_enc)
            .map(|_| EncoderLayer {
                norm_attn: Init::norm(d),
                attn: init.attention(d),
                norm_ff: Init::norm(d),
                ff: init.ff(d, config.d_ff),
            })
            .collect();
        let decoder = (0..config.n_layers_dec)
            .map(|_| DecoderLayer {
                norm_self: Init::norm(d),
                self_attn: init.attention(d),
                norm_cross: Init::norm(d),
                cross_attn: init.attention(d),
                norm_ff: Init::norm(d),
                ff: init.ff(d, config.d_ff),
            })
            .collect();
        let out = init.linear(d, config.vocab_size);
        Ok(Self {
            config: *config,
            embed,
            encoder,
            enc_norm: Init::norm(d),
            decoder,
            dec_norm: Init::norm(d),
            out,
            positions: sinusoidal_positions(config.max_src_len.max(config.tgt_len), d),
        })
    }

    /// Same shapes, all entries zero (gradient accumulators, optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::new();
        out.push(("embed".to_string(), slice(&self.embed)));
        for (i, l) in self.encoder.iter().enumerate() {
            l.collect(&format!("encoder.{i}"), &mut out);
        }
        self.enc_norm.collect("enc_norm", &mut out);
        for (i, l) in self.decoder.iter().enumerate() {
            l.collect(&format!("decoder.{i}"), &mut out);
        }
        self.dec_norm.collect("dec_norm", &mut out);
        self.out.collect("out", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        out.push(slice_mut(&mut self.embed));
        for l in &mut self.encoder {
            l.collect_mut(&mut out);
        }
        self.enc_norm.collect_mut(&mut out);
        for l in &mut self.decoder {
            l.collect_mut(&mut out);
        }
        self.dec_norm.collect_mut(&mut out);
        self.out.collect_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Converts every tensor to another precision.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut target = ModelParams::<G>::init(&self.config).expect("config already validated");
        let src = self.tensors();
        for (dst, (_, s)) in target.tensors_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a = G::c(b.to_f64());
            }
        }
        target
    }
}

pub fn init_model(config: &ModelConfig) -> Result<ModelParams<f32>> {
    ModelParams::init(config)
}

/// Sanity link between the closed-form count and an instantiated model.
pub fn instantiated_count(config: &ModelConfig) -> Result<usize> {
    let p = ModelParams::<f32>::init(config)?;
    debug_assert_eq!(p.param_count(), count_params(config));
    Ok(p.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_and_tanh_track_libm() {
        assert_eq!((-100.0f32).fast_exp(), 0.0);
        let mut x = -86.0f32;
        while x < 88.0 {
            let want = x.exp();
            let got = x.fast_exp();
            let tol = want * 4.0 * f32::EPSILON + f32::MIN_POSITIVE;
            assert!((got - want).abs() <= tol, "exp({x}) = {got}, want {want}");
            let (t, tw) = (x.fast_tanh(), x.tanh());
            assert!((t - tw).abs() <= 4.0 * f32::EPSILON, "tanh({x}) = {t}, want {tw}");
            x += 0.0137;
        }
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::new(16, 1, 1, 2, 32, 5);
        let a = ModelParams::<f32>::init(&c).unwrap();
        let b = ModelParams::<f32>::init(&c).unwrap();
        assert_eq!(a, b);
        let other = ModelParams::<f32>::init(&ModelConfig { seed: 6, ..c }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn param_count_matches_closed_form() {
        for c in [
            ModelConfig::new(32, 1, 1, 2, 64, 0),
            ModelConfig::new(16, 2, 3, 4, 24, 0),
            ModelConfig::default(),
        ] {
            // independent tally from the instantiated tensors
            let p = ModelParams::<f32>::init(&c).unwrap();
            let summed: usize = p.tensors().iter().map(|(_, t)| t.len()).sum();
            assert_eq!(summed, count_params(&c));
            assert_eq!(p.param_count(), count_params(&c));
        }
    }

    #[test]
    fn weight_means_are_centred() {
        let p = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
        for (name, t) in p.tensors() {
            if !name.ends_with(".w") && name != "embed" {
                continue;
            }
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let bound = t.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            // U(-a, a) has variance a^2 / 3
            let sigma_of_mean = bound / 3f64.sqrt() / n.sqrt();
            assert!(mean.abs() < 3.0 * sigma_of_mean, "{name}: {mean}");
        }
    }

    #[test]
    fn norms_start_at_identity() {
        let p = ModelParams::<f32>::init(&ModelConfig::default()).unwrap();
        assert!(p.enc_norm.gain.iter().all(|&g| g == 1.0));
        assert!(p.dec_norm.bias.iter().all(|&b| b == 0.0));
        assert!(p.out.b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn tensor_names_are_unique() {
        let p = ModelParams::<f32>::init(&ModelConfig::new(8, 2, 2, 2, 8, 0)).unwrap();
        let names: std::collections::HashSet<_> =
            p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), p.tensors().len());
    }
}
