//! Convolutional feature extractor producing dense per-pixel embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Module;
use crate::scalar::Scalar;

/// Dense `[h, w, c]` embedding grid.
pub type FeatureMap<T> = Tensor<T>;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Overall downsampling factor.
    pub stride: usize,
    /// Output embedding width.
    pub channels: usize,
    /// Widths of the hidden layers; the last layer emits `channels`.
    pub hidden: Vec<usize>,
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            channels: 32,
            hidden: vec![16, 32, 32],
            normalize: true,
        }
    }
}

impl EncoderConfig {
    pub fn with_stride(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    /// Per-layer strides. Downsampling happens as early as possible after the
    /// first layer, so stride 8 uses every layer but the last.
    pub fn layer_strides(&self) -> Result<Vec<usize>> {
        let n = self.hidden.len() + 1;
        let halvings = match self.stride {
            1 => 0,
            2 => 1,
            4 => 2,
            8 => 3,
            s => return Err(Error::Config(format!("encoder stride must be 1, 2, 4 or 8, got {s}"))),
        };
        if halvings > n - 1 {
            return Err(Error::Config(format!("stride {} needs at least {} layers", self.stride, halvings + 1)));
        }
        let mut strides = vec![1; n];
        if halvings == 3 {
            strides[0] = 2;
            strides[1] = 2;
            strides[2] = 2;
        } else {
            for s in strides.iter_mut().skip(1).take(halvings) {
                *s = 2;
            }
        }
        Ok(strides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        self.layer_strides().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[cout, cin, 3, 3]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer<T>>,
}

/// Fan-in scaled uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub(crate) fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let b = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-b..b)))
}

impl<T: Scalar> EncoderParams<T> {
    /// Deterministic initialisation from `seed`.
    pub fn init(seed: u64, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let strides = config.layer_strides()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![3];
        widths.extend(&config.hidden);
        widths.push(config.channels);
        let layers = widths
            .windows(2)
            .zip(strides)
            .map(|(io, stride)| ConvLayer {
                weight: he_uniform(&mut rng, &[io[1], io[0], 3, 3], io[0] * 9),
                bias: Tensor::zeros(&[io[1]]),
                stride,
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// Copy of these weights with a different overall stride.
    pub fn restrided(&self, stride: usize) -> Result<Self> {
        let config = EncoderConfig {
            stride,
            ..self.config.clone()
        };
        let strides = config.layer_strides()?;
        let mut out = self.clone();
        out.config = config;
        for (l, s) in out.layers.iter_mut().zip(strides) {
            l.stride = s;
        }
        Ok(out)
    }

    pub fn stride(&self) -> usize {
        self.config.stride
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Config entries recorded in checkpoint manifests.
    pub fn meta(&self, prefix: &str) -> Vec<(String, String)> {
        let hidden: Vec<String> = self.config.hidden.iter().map(|c| c.to_string()).collect();
        vec![
            (format!("{prefix}stride"), self.config.stride.to_string()),
            (format!("{prefix}channels"), self.config.channels.to_string()),
            (format!("{prefix}hidden"), hidden.join(",")),
            (format!("{prefix}normalize"), self.config.normalize.to_string()),
        ]
    }

    pub fn config_from_meta(ck: &crate::params::Checkpoint, prefix: &str) -> Result<EncoderConfig> {
        let hidden = ck
            .meta_value(&format!("{prefix}hidden"))?
            .split(',')
            .map(|c| c.parse().map_err(|_| Error::Config(format!("bad hidden width {c}"))))
            .collect::<Result<Vec<usize>>>()?;
        Ok(EncoderConfig {
            stride: ck.meta_parse(&format!("{prefix}stride"))?,
            channels: ck.meta_parse(&format!("{prefix}channels"))?,
            hidden,
            normalize: ck.meta_parse(&format!("{prefix}normalize"))?,
        })
    }
}

impl<T: Scalar> Module<T> for EncoderParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &l.weight));
            out.push((format!("encoder.conv{i}.bias"), &l.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

/// Centres frames and stacks them channel-first into `[n, 3, h, w]`.
fn stack_frames<T: Scalar>(frames: &[&Tensor<T>], stride: usize) -> Result<(Tensor<T>, usize, usize)> {
    let first = frames.first().ok_or_else(|| Error::invalid("encode needs at least one frame"))?;
    let s = first.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("encode", &[0, 0, 3], s));
    }
    let (h, w) = (s[0], s[1]);
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::invalid(format!("frame {h}x{w} not divisible by encoder stride {stride}")));
    }
    let mut data = vec![T::zero(); frames.len() * 3 * h * w];
    for (n, f) in frames.iter().enumerate() {
        if f.shape() != s {
            return Err(Error::shape("encode", s, f.shape()));
        }
        let base = n * 3 * h * w;
        for (p, px) in f.data().chunks(3).enumerate() {
            for c in 0..3 {
                data[base + c * h * w + p] = px[c] - T::of(0.5);
            }
        }
    }
    Ok((Tensor::new(&[frames.len(), 3, h, w], data)?, h, w))
}

/// Records the encoder on `tape` for a batch of Lab frames `[h, w, 3]` in
/// `[0, 1]`; `vars` come from [`Module::bind`]. Returns one `[h/s, w/s, C]`
/// feature map per frame.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams<T>,
    vars: &[Var],
    frames: &[&Tensor<T>],
) -> Result<Vec<Var>> {
    if vars.len() != 2 * params.layers.len() {
        return Err(Error::shape("encode_on_tape vars", &[2 * params.layers.len()], &[vars.len()]));
    }
    let (x, h, w) = stack_frames(frames, params.stride())?;
    let n = frames.len();
    let mut cur = tape.constant(x);
    for (i, l) in params.layers.iter().enumerate() {
        cur = tape.conv2d(cur, vars[2 * i], vars[2 * i + 1], l.stride, 1)?;
        if i + 1 < params.layers.len() {
            cur = tape.relu(cur)?;
        }
    }
    let (fh, fw, c) = (h / params.stride(), w / params.stride(), params.config.channels);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let one = if n == 1 { cur } else { tape.slice(cur, 0, i, 1)? };
        let chw = tape.reshape(one, &[c, fh, fw])?;
        let mut hwc = tape.permute(chw, &[1, 2, 0])?;
        if params.config.normalize {
            hwc = tape.l2_normalize(hwc)?;
        }
        out.push(hwc);
    }
    Ok(out)
}

/// Features of a single Lab frame without recording gradients.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, frame: &Tensor<T>) -> Result<FeatureMap<T>> {
    Ok(encode_batch(params, &[frame])?.pop().expect("one frame in, one map out"))
}

pub fn encode_batch<T: Scalar>(params: &EncoderParams<T>, frames: &[&Tensor<T>]) -> Result<Vec<FeatureMap<T>>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let outs = encode_on_tape(&mut tape, params, &vars, frames)?;
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;

    #[test]
    fn output_extents_follow_stride() {
        let cfg = EncoderConfig {
            channels: 16,
            ..EncoderConfig::with_stride(2)
        };
        let p = EncoderParams::<f32>::init(0, &cfg).unwrap();
        let f = encode(&p, &Tensor::full(&[32, 32, 3], 0.3)).unwrap();
        assert_eq!(f.shape(), &[16, 16, 16]);
        let p8 = EncoderParams::<f32>::init(0, &EncoderConfig::with_stride(8)).unwrap();
        let f8 = encode(&p8, &Tensor::full(&[64, 64, 3], 0.3)).unwrap();
        assert_eq!(f8.shape(), &[8, 8, 32]);
        assert!(encode(&p8, &Tensor::full(&[60, 64, 3], 0.3)).is_err());
    }

    #[test]
    fn strides_compose_to_total() {
        for s in [1, 2, 4, 8] {
            let st = EncoderConfig::with_stride(s).layer_strides().unwrap();
            assert_eq!(st.iter().product::<usize>(), s);
        }
        assert!(EncoderConfig::with_stride(3).validate().is_err());
    }

    #[test]
    fn unit_norm_features() {
        let p = EncoderParams::<f32>::init(3, &EncoderConfig::default()).unwrap();
        let frame = Tensor::from_fn(&[16, 16, 3], |i| ((i * 37) % 101) as f32 / 100.0);
        let f = encode(&p, &frame).unwrap();
        for px in f.data().chunks(32) {
            let n: f32 = px.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn seeded_init() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::<f32>::init(1, &cfg).unwrap();
        assert_eq!(a, EncoderParams::init(1, &cfg).unwrap());
        assert_ne!(a, EncoderParams::init(2, &cfg).unwrap());
        assert!(a.all_finite());
        let z = encode(&a, &Tensor::zeros(&[8, 8, 3])).unwrap();
        assert!(z.all_finite());
    }

    #[test]
    fn translation_covariance_on_interior() {
        let p = EncoderParams::<f64>::init(4, &EncoderConfig::default()).unwrap();
        let n = 24;
        let pattern = |y: usize, x: usize, c: usize| ((y * 13 + x * 7 + c * 5) % 17) as f64 / 17.0;
        let a = Tensor::from_fn(&[n, n, 3], |i| pattern(i / 3 / n, (i / 3) % n, i % 3));
        // b(y, x) = a(y, x + 2): content moves left by one feature pixel
        let b = Tensor::from_fn(&[n, n, 3], |i| pattern(i / 3 / n, (i / 3) % n + 2, i % 3));
        let fa = encode(&p, &a).unwrap();
        let fb = encode(&p, &b).unwrap();
        let (fh, c) = (n / 2, 32);
        for y in 3..fh - 3 {
            for x in 3..fh - 4 {
                for ch in 0..c {
                    let va = fa.data()[(y * fh + x + 1) * c + ch];
                    let vb = fb.data()[(y * fh + x) * c + ch];
                    assert!((va - vb).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batch_matches_single_frames_and_gradients_check() {
        let cfg = EncoderConfig {
            channels: 4,
            hidden: vec![3, 4, 4],
            ..EncoderConfig::default()
        };
        let p = EncoderParams::<f64>::init(5, &cfg).unwrap();
        let f1 = Tensor::from_fn(&[6, 6, 3], |i| (i % 7) as f64 / 7.0);
        let f2 = Tensor::from_fn(&[6, 6, 3], |i| (i % 5) as f64 / 5.0);
        let both = encode_batch(&p, &[&f1, &f2]).unwrap();
        assert!(both[1].max_abs_diff(&encode(&p, &f2).unwrap()) < 1e-12);

        let inputs: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let target = Tensor::from_fn(&[3, 3, 4], |i| ((i * 3) % 5) as f64 / 5.0 - 0.4);
        let rep = check_gradients(&inputs, 1e-5, |tape, vars| {
            let out = encode_on_tape(tape, &p, vars, &[&f1])?;
            let t = tape.constant(target.clone());
            let prod = tape.mul(out[0], t)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-3, "{rep:?}");
    }
}
