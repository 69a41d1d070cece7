//! Coarse-to-fine student: attention-enhanced stride-8 features, a coarse
//! probability map and a learned pixel-shuffle upsampler to the fine window.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correspondence::{MappingConfig, ProbMap};
use crate::encoder::{encode_on_tape, he_uniform, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{kl_supervision_loss, LabelDist};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Checkpoint, Module};
use crate::scalar::Scalar;
use crate::window::Window;

/// Floor added to coarse probabilities before the upsampler takes their log.
pub const UPSAMPLE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentConfig {
    /// Coarse window radius `r_c` on the stride-`s_c` grid.
    pub coarse_radius: usize,
    /// Fine window radius `r` of the output map.
    pub fine_radius: usize,
    /// Pixel-shuffle factor `u` (coarse stride / fine stride).
    pub upscale: usize,
    pub tau: f64,
    /// Gain of the quadratic upsampler initialisation.
    pub init_gain: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            coarse_radius: 3,
            fine_radius: 6,
            upscale: 4,
            tau: 0.1,
            init_gain: 1.0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_radius == 0 || self.fine_radius == 0 || self.upscale == 0 {
            return Err(Error::Config("student radii and upscale must be positive".into()));
        }
        if self.upscale * self.coarse_radius < self.fine_radius {
            return Err(Error::Config(format!(
                "coarse window does not cover the fine one: {} * {} < {}",
                self.upscale, self.coarse_radius, self.fine_radius
            )));
        }
        MappingConfig::new(self.coarse_radius, self.tau).map(|_| ())
    }

    pub fn coarse_window(&self) -> Window {
        Window::new(self.coarse_radius)
    }

    pub fn fine_window(&self) -> Window {
        Window::new(self.fine_radius)
    }
}

/// Single-head projections `[C, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    /// Random query/key/value projections and a zero output projection, so a
    /// fresh block is the identity through its residual.
    fn init(rng: &mut ChaCha8Rng, c: usize) -> Self {
        Self {
            wq: he_uniform(rng, &[c, c], c),
            wk: he_uniform(rng, &[c, c], c),
            wv: he_uniform(rng, &[c, c], c),
            wo: Tensor::zeros(&[c, c]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub self_attn: AttentionBlock<T>,
    pub cross_attn: AttentionBlock<T>,
}

/// 1x1 convolution from coarse window channels to `u^2` fine windows,
/// stored as a `[K_c, u^2 K]` matrix plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsamplerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn round_div(d: isize, u: isize) -> isize {
    (d as f64 / u as f64).round() as isize
}

impl<T: Scalar> UpsamplerParams<T> {
    /// Separable 3-point quadratic interpolation of the coarse
    /// log-probabilities at `d / u`, scaled by `gain`. The fine argmax then
    /// sits at the parabolic peak of the coarse map.
    pub fn quadratic(cfg: &StudentConfig, gain: f64) -> Self {
        let (cw, fw, u) = (cfg.coarse_window(), cfg.fine_window(), cfg.upscale);
        let (kc, kf) = (cw.len(), fw.len());
        let taps = |x: f64| {
            let n = x.round();
            let t = x - n;
            [(n - 1.0, 0.5 * t * (t - 1.0)), (n, 1.0 - t * t), (n + 1.0, 0.5 * t * (t + 1.0))]
        };
        let mut weight = Tensor::zeros(&[kc, u * u * kf]);
        for d in 0..kf {
            let (du, dv) = fw.offset(d);
            for (cx, wx) in taps(du as f64 / u as f64) {
                for (cy, wy) in taps(dv as f64 / u as f64) {
                    if let Some(c) = cw.index(cx as isize, cy as isize) {
                        for sub in 0..u * u {
                            weight.data_mut()[c * u * u * kf + sub * kf + d] += T::of(gain * wx * wy);
                        }
                    }
                }
            }
        }
        Self {
            weight,
            bias: Tensor::zeros(&[u * u * kf]),
        }
    }

    /// Copies the nearest coarse log-probability, scaled by `gain`, into every
    /// fine offset, with a small bias on offsets that are exact multiples of
    /// `u` so the argmax lands on `u * offset(c)`.
    pub fn nearest(cfg: &StudentConfig, gain: f64) -> Self {
        let (cw, fw, u) = (cfg.coarse_window(), cfg.fine_window(), cfg.upscale);
        let (kc, kf) = (cw.len(), fw.len());
        let ui = u as isize;
        let mut weight = Tensor::zeros(&[kc, u * u * kf]);
        let mut bias = Tensor::zeros(&[u * u * kf]);
        for sub in 0..u * u {
            for d in 0..kf {
                let (du, dv) = fw.offset(d);
                if let Some(c) = cw.index(round_div(du, ui), round_div(dv, ui)) {
                    weight.data_mut()[c * u * u * kf + sub * kf + d] = T::of(gain);
                }
                if du % ui == 0 && dv % ui == 0 {
                    bias.data_mut()[sub * kf + d] = T::of(gain * 1e-3);
                }
            }
        }
        Self { weight, bias }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams<T> {
    pub config: StudentConfig,
    pub encoder: EncoderParams<T>,
    pub attention: AttentionParams<T>,
    pub upsampler: UpsamplerParams<T>,
}

impl<T: Scalar> StudentParams<T> {
    /// Student whose encoder starts from `teacher`'s weights at stride
    /// `u * teacher stride`, with identity attention and quadratic upsampler.
    pub fn from_teacher(teacher: &EncoderParams<T>, cfg: StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = teacher.restrided(teacher.stride() * cfg.upscale)?;
        Self::with_encoder(encoder, cfg, seed)
    }

    pub fn with_encoder(encoder: EncoderParams<T>, cfg: StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = encoder.config.channels;
        if !c.is_multiple_of(4) {
            return Err(Error::Config(format!("attention width {c} must be a multiple of 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: cfg,
            attention: AttentionParams {
                self_attn: AttentionBlock::init(&mut rng, c),
                cross_attn: AttentionBlock::init(&mut rng, c),
            },
            upsampler: UpsamplerParams::quadratic(&cfg, cfg.init_gain),
            encoder,
        })
    }

    /// Output stride of the fine map.
    pub fn fine_stride(&self) -> usize {
        self.encoder.stride() / self.config.upscale
    }

    pub fn meta(&self) -> Vec<(String, String)> {
        let mut m = vec![("kind".to_string(), "student".to_string())];
        m.extend(self.encoder.meta("encoder."));
        let c = &self.config;
        m.push(("student.coarse_radius".into(), c.coarse_radius.to_string()));
        m.push(("student.fine_radius".into(), c.fine_radius.to_string()));
        m.push(("student.upscale".into(), c.upscale.to_string()));
        m.push(("student.tau".into(), c.tau.to_string()));
        m.push(("student.init_gain".into(), c.init_gain.to_string()));
        m
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_value("kind")? != "student" {
            return Err(Error::Config("checkpoint is not a student".into()));
        }
        let ecfg = EncoderParams::<T>::config_from_meta(ck, "encoder.")?;
        let cfg = StudentConfig {
            coarse_radius: ck.meta_parse("student.coarse_radius")?,
            fine_radius: ck.meta_parse("student.fine_radius")?,
            upscale: ck.meta_parse("student.upscale")?,
            tau: ck.meta_parse("student.tau")?,
            init_gain: ck.meta_parse("student.init_gain")?,
        };
        let mut s = Self::with_encoder(EncoderParams::init(0, &ecfg)?, cfg, 0)?;
        s.load_named(&ck.tensors)?;
        Ok(s)
    }
}

impl<T: Scalar> Module<T> for StudentParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named();
        for (tag, b) in [("self", &self.attention.self_attn), ("cross", &self.attention.cross_attn)] {
            out.push((format!("attn.{tag}.wq"), &b.wq));
            out.push((format!("attn.{tag}.wk"), &b.wk));
            out.push((format!("attn.{tag}.wv"), &b.wv));
            out.push((format!("attn.{tag}.wo"), &b.wo));
        }
        out.push(("upsampler.weight".into(), &self.upsampler.weight));
        out.push(("upsampler.bias".into(), &self.upsampler.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        for b in [&mut self.attention.self_attn, &mut self.attention.cross_attn] {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
        }
        out.push(&mut self.upsampler.weight);
        out.push(&mut self.upsampler.bias);
        out
    }
}

/// 2-D sinusoidal encoding `[h*w, c]`: channel group `4i..4i+4` holds
/// `sin/cos(y w_i), sin/cos(x w_i)` with `w_i = 10000^(-i / (c/4))`.
pub fn positional_encoding<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let groups = c / 4;
    Tensor::from_fn(&[h * w, c], |idx| {
        let (p, ch) = (idx / c, idx % c);
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let g = ch / 4;
        if g >= groups {
            return T::zero();
        }
        let omega = 10000f64.powf(-(g as f64) / groups as f64);
        T::of(match ch % 4 {
            0 => (y * omega).sin(),
            1 => (y * omega).cos(),
            2 => (x * omega).sin(),
            _ => (x * omega).cos(),
        })
    })
}

/// `out = x + softmax((x+pe) Wq ((src+pe) Wk)^T / sqrt(C)) (src Wv) Wo` on
/// `[N, C]` tokens. `w` holds the four projection vars. Returns the output
/// and the attention matrix.
fn attend<T: Scalar>(tape: &mut Tape<T>, x: Var, src: Var, pe: Var, w: &[Var]) -> Result<(Var, Var)> {
    let c = tape.shape(x)[1];
    let xq = tape.add(x, pe)?;
    let xk = tape.add(src, pe)?;
    let q = tape.matmul(xq, w[0], false, false)?;
    let k = tape.matmul(xk, w[1], false, false)?;
    let v = tape.matmul(src, w[2], false, false)?;
    let scores = tape.matmul(q, k, false, true)?;
    let scores = tape.scale(scores, T::of(1.0 / (c as f64).sqrt()))?;
    let attn = tape.softmax(scores, None)?;
    let mixed = tape.matmul(attn, v, false, false)?;
    let proj = tape.matmul(mixed, w[3], false, false)?;
    Ok((tape.add(x, proj)?, attn))
}

/// Self- then cross-attention on a pair of `[h, w, C]` maps; `w` holds the
/// eight attention vars (self block first).
pub fn enhance_on_tape<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, w: &[Var]) -> Result<(Var, Var)> {
    let s = tape.shape(f1).to_vec();
    if s.len() != 3 || tape.shape(f2) != s.as_slice() {
        return Err(Error::shape("enhance", &s, tape.shape(f2)));
    }
    if w.len() != 8 {
        return Err(Error::shape("enhance vars", &[8], &[w.len()]));
    }
    let (n, c) = (s[0] * s[1], s[2]);
    let pe = tape.constant(positional_encoding(s[0], s[1], c));
    let t1 = tape.reshape(f1, &[n, c])?;
    let t2 = tape.reshape(f2, &[n, c])?;
    let (a1, _) = attend(tape, t1, t1, pe, &w[..4])?;
    let (a2, _) = attend(tape, t2, t2, pe, &w[..4])?;
    let (b1, _) = attend(tape, a1, a2, pe, &w[4..])?;
    let (b2, _) = attend(tape, a2, a1, pe, &w[4..])?;
    Ok((tape.reshape(b1, &s)?, tape.reshape(b2, &s)?))
}

/// Off-tape [`enhance_on_tape`].
pub fn enhance<T: Scalar>(params: &AttentionParams<T>, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let w = attention_vars(&mut tape, params);
    let (a, b) = (tape.constant(f1.clone()), tape.constant(f2.clone()));
    let (o1, o2) = enhance_on_tape(&mut tape, a, b, &w)?;
    Ok((tape.value(o1).clone(), tape.value(o2).clone()))
}

fn attention_vars<T: Scalar>(tape: &mut Tape<T>, p: &AttentionParams<T>) -> Vec<Var> {
    [&p.self_attn, &p.cross_attn]
        .iter()
        .flat_map(|b| [&b.wq, &b.wk, &b.wv, &b.wo])
        .map(|t| tape.constant(t.clone()))
        .collect()
}

/// Attention matrix of the self-attention block for tokens `f: [h, w, C]`.
pub fn self_attention_weights<T: Scalar>(params: &AttentionParams<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let w = attention_vars(&mut tape, params);
    let s = f.shape().to_vec();
    let pe = tape.constant(positional_encoding(s[0], s[1], s[2]));
    let x = tape.constant(f.clone().reshape(&[s[0] * s[1], s[2]])?);
    let (_, attn) = attend(&mut tape, x, x, pe, &w[..4])?;
    Ok(tape.value(attn).clone())
}

/// Coarse probabilities `[h_c, w_c, K_c]` from enhanced features, which are
/// L2-normalised before correlation.
pub fn coarse_map_on_tape<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, cfg: &StudentConfig) -> Result<Var> {
    let a = tape.l2_normalize(f1)?;
    let b = tape.l2_normalize(f2)?;
    let m = MappingConfig::new(cfg.coarse_radius, cfg.tau)?;
    crate::correspondence::prob_map_on_tape(tape, a, b, &m)
}

/// Fine logits `[u h_c, u w_c, K]` from a linear map of the coarse
/// log-probabilities `ln(p + UPSAMPLE_EPS)`; out-of-image
/// offsets still need masking by the caller's softmax.
pub fn upsample_logits_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    coarse: Var,
    weight: Var,
    bias: Var,
    cfg: &StudentConfig,
) -> Result<Var> {
    let s = tape.shape(coarse).to_vec();
    let kc = cfg.coarse_window().len();
    if s.len() != 3 || s[2] != kc {
        return Err(Error::shape("upsample", &[0, 0, kc], &s));
    }
    let u = cfg.upscale;
    let kf = cfg.fine_window().len();
    if tape.shape(weight) != [kc, u * u * kf] {
        return Err(Error::shape("upsample weight", &[kc, u * u * kf], tape.shape(weight)));
    }
    let eps = tape.constant(Tensor::full(&s, T::of(UPSAMPLE_EPS)));
    let shifted = tape.add(coarse, eps)?;
    let logp = tape.log(shifted)?;
    let flat = tape.reshape(logp, &[s[0] * s[1], kc])?;
    let lin = tape.matmul(flat, weight, false, false)?;
    let lin = tape.add_bias(lin, bias)?;
    let grid = tape.reshape(lin, &[s[0], s[1], u * u * kf])?;
    tape.pixel_shuffle(grid, u)
}

/// Off-tape upsampling of a coarse map with explicit upsampler weights.
pub fn upsample_map<T: Scalar>(coarse: &ProbMap<T>, up: &UpsamplerParams<T>, cfg: &StudentConfig) -> Result<ProbMap<T>> {
    cfg.validate()?;
    if coarse.window() != cfg.coarse_window() {
        return Err(Error::Config("coarse map radius differs from the student config".into()));
    }
    let mut tape = Tape::new();
    let c = tape.constant(coarse.probs().clone());
    let w = tape.constant(up.weight.clone());
    let b = tape.constant(up.bias.clone());
    let logits = upsample_logits_on_tape(&mut tape, c, w, b, cfg)?;
    let s = tape.shape(logits).to_vec();
    let fw = cfg.fine_window();
    let p = tape.softmax(logits, Some(fw.mask(s[0], s[1]).into()))?;
    ProbMap::new(tape.value(p).clone(), fw)
}

/// Student forward on Lab frames; returns the fine logits `[h/s_f, w/s_f, K]`.
pub fn student_logits_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &StudentParams<T>,
    vars: &[Var],
    frame1: &Tensor<T>,
    frame2: &Tensor<T>,
) -> Result<Var> {
    let ne = 2 * params.encoder.layers.len();
    if vars.len() != ne + 10 {
        return Err(Error::shape("student vars", &[ne + 10], &[vars.len()]));
    }
    let feats = encode_on_tape(tape, &params.encoder, &vars[..ne], &[frame1, frame2])?;
    let (e1, e2) = enhance_on_tape(tape, feats[0], feats[1], &vars[ne..ne + 8])?;
    let coarse = coarse_map_on_tape(tape, e1, e2, &params.config)?;
    upsample_logits_on_tape(tape, coarse, vars[ne + 8], vars[ne + 9], &params.config)
}

/// Masked log-probabilities and probabilities of the fine student map.
pub fn student_outputs_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, cfg: &StudentConfig) -> Result<(Var, Var)> {
    let s = tape.shape(logits).to_vec();
    let mask: std::sync::Arc<[bool]> = cfg.fine_window().mask(s[0], s[1]).into();
    let lp = tape.log_softmax(logits, Some(mask.clone()))?;
    let p = tape.softmax(logits, Some(mask))?;
    Ok((lp, p))
}

/// Fine probability map of the student for a pair of Lab frames.
pub fn student_map<T: Scalar>(params: &StudentParams<T>, frame1: &Tensor<T>, frame2: &Tensor<T>) -> Result<ProbMap<T>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let logits = student_logits_on_tape(&mut tape, params, &vars, frame1, frame2)?;
    let s = tape.shape(logits).to_vec();
    let fw = params.config.fine_window();
    let p = tape.softmax(logits, Some(fw.mask(s[0], s[1]).into()))?;
    ProbMap::new(tape.value(p).clone(), fw)
}

/// Fine map from already-encoded coarse features `[h_c, w_c, C]`.
pub fn student_map_from_features<T: Scalar>(params: &StudentParams<T>, c1: &Tensor<T>, c2: &Tensor<T>) -> Result<ProbMap<T>> {
    let mut tape = Tape::new();
    let w = attention_vars(&mut tape, &params.attention);
    let (a, b) = (tape.constant(c1.clone()), tape.constant(c2.clone()));
    let (e1, e2) = enhance_on_tape(&mut tape, a, b, &w)?;
    let coarse = coarse_map_on_tape(&mut tape, e1, e2, &params.config)?;
    let uw = tape.constant(params.upsampler.weight.clone());
    let ub = tape.constant(params.upsampler.bias.clone());
    let logits = upsample_logits_on_tape(&mut tape, coarse, uw, ub, &params.config)?;
    let s = tape.shape(logits).to_vec();
    let fw = params.config.fine_window();
    let p = tape.softmax(logits, Some(fw.mask(s[0], s[1]).into()))?;
    ProbMap::new(tape.value(p).clone(), fw)
}

/// `KL(teacher || student)` averaged over pixels, from the student's recorded
/// log-probabilities.
pub fn distill_loss<T: Scalar>(tape: &mut Tape<T>, student_logp: Var, teacher: &ProbMap<T>) -> Result<Var> {
    if tape.shape(student_logp) != teacher.probs().shape() {
        return Err(Error::shape("distill_loss", teacher.probs().shape(), tape.shape(student_logp)));
    }
    kl_supervision_loss(tape, student_logp, &LabelDist::from_prob_map(teacher))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::correspondence::{argmax_flow, local_correlation};
    use crate::encoder::EncoderConfig;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn coverage_is_enforced() {
        let bad = StudentConfig {
            coarse_radius: 1,
            fine_radius: 6,
            upscale: 4,
            ..StudentConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(StudentConfig::default().validate().is_ok());
    }

    #[test]
    fn full_scale_channel_arithmetic() {
        let cfg = StudentConfig {
            coarse_radius: 6,
            fine_radius: 24,
            upscale: 4,
            ..StudentConfig::default()
        };
        assert_eq!(cfg.coarse_window().len(), 169);
        assert_eq!(cfg.upscale * cfg.upscale * cfg.fine_window().len(), 16 * 2401);
    }

    #[test]
    fn zero_output_projection_is_identity_and_symmetric() {
        let enc = EncoderParams::<f64>::init(0, &EncoderConfig::with_stride(8)).unwrap();
        let s = StudentParams::with_encoder(enc, StudentConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f1 = random(&mut rng, &[4, 5, 32]);
        let f2 = random(&mut rng, &[4, 5, 32]);
        let (o1, o2) = enhance(&s.attention, &f1, &f2).unwrap();
        assert_eq!(o1, f1);
        assert_eq!(o2, f2);

        let mut att = s.attention.clone();
        att.self_attn.wo = random(&mut rng, &[32, 32]);
        att.cross_attn.wo = random(&mut rng, &[32, 32]);
        let (a1, a2) = enhance(&att, &f1, &f2).unwrap();
        let (b1, b2) = enhance(&att, &f2, &f1).unwrap();
        assert_eq!(a1, b2);
        assert_eq!(a2, b1);
        assert_ne!(a1, f1);

        let w = self_attention_weights(&att, &f1).unwrap();
        for row in w.data().chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_upsampler_recovers_subpixel_peak() {
        let cfg = StudentConfig::default();
        let cw = cfg.coarse_window();
        let (cx, cy) = (0.5, -0.75);
        let (h, w) = (7, 7);
        let mask = cw.mask(h, w);
        let mut probs = Tensor::<f64>::zeros(&[h, w, cw.len()]);
        for (row, m) in probs.data_mut().chunks_mut(cw.len()).zip(mask.chunks(cw.len())) {
            for (k, p) in row.iter_mut().enumerate() {
                let (u, v) = cw.offset(k);
                if m[k] {
                    *p = (-0.2 * ((u as f64 - cx).powi(2) + (v as f64 - cy).powi(2))).exp();
                }
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
        }
        let coarse = ProbMap::new(probs, cw).unwrap();
        let fine = upsample_map(&coarse, &UpsamplerParams::quadratic(&cfg, 1.0), &cfg).unwrap();
        let f = argmax_flow(&fine);
        for y in 12..16 {
            for x in 12..16 {
                assert_eq!(f.get(y, x), (2.0, -3.0), "fine pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn nearest_initialised_upsampler_scales_coarse_argmax() {
        let cfg = StudentConfig {
            coarse_radius: 3,
            fine_radius: 6,
            upscale: 2,
            ..StudentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (hc, wc) = (6, 7);
        let f1 = random(&mut rng, &[hc, wc, 6]);
        let f2 = random(&mut rng, &[hc, wc, 6]);
        let coarse = local_correlation(&f1, &f2, &MappingConfig::new(3, 0.2).unwrap()).unwrap();
        let fine = upsample_map(&coarse, &UpsamplerParams::nearest(&cfg, 50.0), &cfg).unwrap();
        assert_eq!((fine.h(), fine.w()), (2 * hc, 2 * wc));
        let cf = argmax_flow(&coarse);
        let ff = argmax_flow(&fine);
        for y in 0..2 * hc {
            for x in 0..2 * wc {
                let (cu, cv) = cf.get(y / 2, x / 2);
                assert_eq!(ff.get(y, x), (2.0 * cu, 2.0 * cv), "fine pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn student_output_is_a_valid_map_and_distill_is_zero_on_itself() {
        let teacher = EncoderParams::<f64>::init(1, &EncoderConfig::default()).unwrap();
        let s = StudentParams::from_teacher(&teacher, StudentConfig::default(), 2).unwrap();
        assert_eq!(s.fine_stride(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0));
        let p = student_map(&s, &a, &b).unwrap();
        assert_eq!((p.h(), p.w(), p.window().radius()), (16, 16, 6));

        let mut tape = Tape::new();
        let lp = tape.constant(p.probs().map(|v| if v > 0.0 { v.ln() } else { 0.0 }));
        let loss = distill_loss(&mut tape, lp, &p).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn map_from_features_matches_map_from_frames() {
        let teacher = EncoderParams::<f64>::init(4, &EncoderConfig::default()).unwrap();
        let mut s = StudentParams::from_teacher(&teacher, StudentConfig::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        s.attention.cross_attn.wo = random(&mut rng, &[32, 32]);
        let a = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0));
        let c1 = crate::encoder::encode(&s.encoder, &a).unwrap();
        let c2 = crate::encoder::encode(&s.encoder, &b).unwrap();
        let direct = student_map(&s, &a, &b).unwrap();
        let cached = student_map_from_features(&s, &c1, &c2).unwrap();
        let err = direct
            .probs()
            .data()
            .iter()
            .zip(cached.probs().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn student_checkpoint_round_trip() {
        let teacher = EncoderParams::<f32>::init(1, &EncoderConfig::default()).unwrap();
        let s = StudentParams::from_teacher(&teacher, StudentConfig::default(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::params::save_checkpoint(dir.path(), &s.meta(), &s.named()).unwrap();
        let ck = crate::params::load_checkpoint(dir.path()).unwrap();
        assert_eq!(StudentParams::<f32>::from_checkpoint(&ck).unwrap(), s);
    }
}
