//! Supervision labels, KL, reconstruction and adversarial objectives.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correspondence::{FlowField, MappingConfig, OcclusionMask, ProbMap};
use crate::encoder::{encode, he_uniform, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::kernels::window_gather_forward;
use crate::numerics::tape::softmax_row;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Module;
use crate::scalar::Scalar;
use crate::window::Window;

/// Target distribution over window offsets with a per-pixel usability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDist<T> {
    probs: Tensor<T>,
    window: Window,
    valid: Vec<bool>,
}

impl<T: Scalar> LabelDist<T> {
    pub fn h(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn window(&self) -> Window {
        self.window
    }

    /// `[h, w, K]`; rows of invalid pixels are all zero.
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Treats a probability map as a label with every pixel usable.
    pub fn from_prob_map(p: &ProbMap<T>) -> Self {
        Self {
            probs: p.probs().clone(),
            window: p.window(),
            valid: vec![true; p.h() * p.w()],
        }
    }
}

/// How the soft labeler samples its query feature at `i + G(i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftSampling {
    Nearest,
    Bilinear,
}

/// Which supervision distribution the KL term uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelKind {
    Dirac,
    Gaussian { sigma_u: f64, sigma_v: f64 },
    Soft(SoftSampling),
}

/// Half-away-from-zero rounding, the documented nearest-integer rule.
pub fn round_offset(v: f32) -> isize {
    v.round() as isize
}

/// Pixels usable for supervision: displacement within the window, target in
/// the image, and not covered.
fn usable(g: &FlowField, r: usize, covered: Option<&[bool]>) -> Result<Vec<bool>> {
    let (h, w) = (g.h(), g.w());
    if let Some(c) = covered {
        if c.len() != h * w {
            return Err(Error::shape("covered", &[h * w], &[c.len()]));
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = g.get(y, x);
            let in_range = du.abs().max(dv.abs()) <= r as f32;
            let (ty, tx) = (y as isize + round_offset(dv), x as isize + round_offset(du));
            let inside = ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize;
            let hidden = covered.is_some_and(|c| c[y * w + x]);
            out.push(in_range && inside && !hidden);
        }
    }
    Ok(out)
}

/// One-hot label at the rounded ground-truth offset.
pub fn dirac_label<T: Scalar>(g: &FlowField, cfg: &MappingConfig, covered: Option<&[bool]>) -> Result<LabelDist<T>> {
    cfg.validate()?;
    let win = cfg.window();
    let valid = usable(g, cfg.radius, covered)?;
    let (h, w, k) = (g.h(), g.w(), win.len());
    let mut probs = vec![T::zero(); h * w * k];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if valid[i] {
                let (du, dv) = g.get(y, x);
                let idx = win
                    .index(round_offset(du), round_offset(dv))
                    .expect("usable displacement lies in the window");
                probs[i * k + idx] = T::one();
            }
        }
    }
    Ok(LabelDist {
        probs: Tensor::new(&[h, w, k], probs)?,
        window: win,
        valid,
    })
}

/// Separable gaussian around `G(i)`, renormalised over the in-image window.
pub fn gaussian_label<T: Scalar>(
    g: &FlowField,
    sigma: (f64, f64),
    cfg: &MappingConfig,
    covered: Option<&[bool]>,
) -> Result<LabelDist<T>> {
    cfg.validate()?;
    if !(sigma.0 > 0.0 && sigma.1 > 0.0) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma:?}")));
    }
    let win = cfg.window();
    let valid = usable(g, cfg.radius, covered)?;
    let (h, w, k) = (g.h(), g.w(), win.len());
    let mut probs = vec![T::zero(); h * w * k];
    let mut logits = vec![0.0f64; k];
    let mut row = vec![0.0f64; k];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                continue;
            }
            let (gu, gv) = g.get(y, x);
            let mut mask = vec![false; k];
            for (j, l) in logits.iter_mut().enumerate() {
                let (du, dv) = win.offset(j);
                mask[j] = win.key(y, x, j, h, w).is_some();
                let (eu, ev) = (du as f64 - gu as f64, dv as f64 - gv as f64);
                *l = -eu * eu / (2.0 * sigma.0 * sigma.0) - ev * ev / (2.0 * sigma.1 * sigma.1);
            }
            softmax_row(&logits, Some(&mask), &mut row);
            for (o, v) in probs[i * k..(i + 1) * k].iter_mut().zip(&row) {
                *o = T::of(*v);
            }
        }
    }
    Ok(LabelDist {
        probs: Tensor::new(&[h, w, k], probs)?,
        window: win,
        valid,
    })
}

fn sample_feature<T: Scalar>(f: &Tensor<T>, y: f64, x: f64, mode: SoftSampling, out: &mut [f64]) {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let at = |yy: usize, xx: usize| &f.data()[(yy * w + xx) * c..(yy * w + xx + 1) * c];
    match mode {
        SoftSampling::Nearest => {
            let (yy, xx) = (y.round() as usize, x.round() as usize);
            for (o, v) in out.iter_mut().zip(at(yy, xx)) {
                *o = v.as_f64();
            }
        }
        SoftSampling::Bilinear => {
            let y0 = y.floor().clamp(0.0, (h - 1) as f64);
            let x0 = x.floor().clamp(0.0, (w - 1) as f64);
            let (fy, fx) = ((y - y0).clamp(0.0, 1.0), (x - x0).clamp(0.0, 1.0));
            let (y0, x0) = (y0 as usize, x0 as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            out.iter_mut().for_each(|o| *o = 0.0);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    for (o, v) in out.iter_mut().zip(at(yy, xx)) {
                        *o += wy * wx * v.as_f64();
                    }
                }
            }
        }
    }
}

/// Self-similarity label from frozen features `f2 = encode(theta_self, I2)`:
/// the query feature sampled at `i + G(i)` is correlated with `f2` over the
/// window centred at `i` and normalised with temperature `tau`.
pub fn soft_label_from_features<T: Scalar>(
    f2: &Tensor<T>,
    g: &FlowField,
    cfg: &MappingConfig,
    sampling: SoftSampling,
    covered: Option<&[bool]>,
) -> Result<LabelDist<T>> {
    cfg.validate()?;
    let s = f2.shape();
    if s.len() != 3 || s[0] != g.h() || s[1] != g.w() {
        return Err(Error::shape("soft_label", &[g.h(), g.w(), 0], s));
    }
    let win = cfg.window();
    let valid = usable(g, cfg.radius, covered)?;
    let (h, w, c, k) = (s[0], s[1], s[2], win.len());
    let mut probs = vec![T::zero(); h * w * k];
    let mut q = vec![0.0f64; c];
    let mut logits = vec![0.0f64; k];
    let mut mask = vec![false; k];
    let mut row = vec![0.0f64; k];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                continue;
            }
            let (du, dv) = g.get(y, x);
            sample_feature(f2, y as f64 + dv as f64, x as f64 + du as f64, sampling, &mut q);
            for j in 0..k {
                mask[j] = false;
                logits[j] = 0.0;
                if let Some((ky, kx)) = win.key(y, x, j, h, w) {
                    let key = &f2.data()[(ky * w + kx) * c..(ky * w + kx + 1) * c];
                    let d: f64 = q.iter().zip(key).map(|(a, b)| a * b.as_f64()).sum();
                    logits[j] = d / cfg.tau;
                    mask[j] = true;
                }
            }
            softmax_row(&logits, Some(&mask), &mut row);
            for (o, v) in probs[i * k..(i + 1) * k].iter_mut().zip(&row) {
                *o = T::of(*v);
            }
        }
    }
    Ok(LabelDist {
        probs: Tensor::new(&[h, w, k], probs)?,
        window: win,
        valid,
    })
}

/// [`soft_label_from_features`] with `f2` computed from the Lab frame `i2`.
pub fn soft_label<T: Scalar>(
    theta_self: &EncoderParams<T>,
    i2: &Tensor<T>,
    g: &FlowField,
    cfg: &MappingConfig,
    sampling: SoftSampling,
    covered: Option<&[bool]>,
) -> Result<LabelDist<T>> {
    let f2 = encode(theta_self, i2)?;
    soft_label_from_features(&f2, g, cfg, sampling, covered)
}

/// Builds the requested label kind; `f2_self` is needed only for soft labels.
pub fn make_label<T: Scalar>(
    kind: LabelKind,
    g: &FlowField,
    cfg: &MappingConfig,
    covered: Option<&[bool]>,
    f2_self: Option<&Tensor<T>>,
) -> Result<LabelDist<T>> {
    match kind {
        LabelKind::Dirac => dirac_label(g, cfg, covered),
        LabelKind::Gaussian { sigma_u, sigma_v } => gaussian_label(g, (sigma_u, sigma_v), cfg, covered),
        LabelKind::Soft(s) => {
            let f = f2_self.ok_or_else(|| Error::MissingPrerequisite("soft labels need soft-labeler features".into()))?;
            soft_label_from_features(f, g, cfg, s, covered)
        }
    }
}

/// Mean over valid pixels of `KL(L || P)`, given recorded log-probabilities
/// `logp: [h, w, K]`.
pub fn kl_supervision_loss<T: Scalar>(tape: &mut Tape<T>, logp: Var, label: &LabelDist<T>) -> Result<Var> {
    if tape.shape(logp) != label.probs.shape() {
        return Err(Error::shape("kl_supervision_loss", label.probs.shape(), tape.shape(logp)));
    }
    let n = label.valid_count();
    if n == 0 {
        return Err(Error::NoValidPixels("kl_supervision_loss"));
    }
    let wgt: Vec<f64> = label.valid.iter().map(|&v| if v { 1.0 / n as f64 } else { 0.0 }).collect();
    tape.kl_rows(logp, Arc::new(label.probs.clone()), wgt)
}

/// Direct evaluation of [`kl_supervision_loss`] on a finished map.
pub fn kl_divergence<T: Scalar>(p: &ProbMap<T>, label: &LabelDist<T>) -> Result<f64> {
    if p.probs().shape() != label.probs.shape() {
        return Err(Error::shape("kl_divergence", label.probs.shape(), p.probs().shape()));
    }
    let n = label.valid_count();
    if n == 0 {
        return Err(Error::NoValidPixels("kl_divergence"));
    }
    let k = label.window.len();
    let mut total = 0.0;
    for ((lrow, prow), &ok) in label.probs.data().chunks(k).zip(p.probs().data().chunks(k)).zip(&label.valid) {
        if !ok {
            continue;
        }
        for (l, q) in lrow.iter().zip(prow) {
            let (l, q) = (l.as_f64(), q.as_f64());
            if l > 0.0 {
                total += l * (l.ln() - q.ln());
            }
        }
    }
    Ok(total / n as f64)
}

/// `I_rec(i) = sum_k P(i, k) I2(i + offset_k)`.
pub fn reconstruct<T: Scalar>(p: &ProbMap<T>, i2: &Tensor<T>) -> Result<Tensor<T>> {
    let s = i2.shape();
    if s.len() != 3 || s[0] != p.h() || s[1] != p.w() {
        return Err(Error::shape("reconstruct", &[p.h(), p.w(), 0], s));
    }
    let out = window_gather_forward(p.probs().data(), i2.data(), s[0], s[1], s[2], p.window());
    Tensor::new(s, out)
}

/// Recorded reconstruction from probabilities `p: [h, w, K]`.
pub fn reconstruct_on_tape<T: Scalar>(tape: &mut Tape<T>, p: Var, i2: Var, win: Window) -> Result<Var> {
    tape.window_gather(p, i2, win)
}

/// `sum_i O(i) |rec(i) - I1(i)|_1 / (#{O = 1} * C)`.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, rec: Var, i1: Var, o: &OcclusionMask) -> Result<Var> {
    let s = tape.shape(rec).to_vec();
    if tape.shape(i1) != s.as_slice() || s.len() != 3 || s[0] != o.h() || s[1] != o.w() {
        return Err(Error::shape("reconstruction_loss", &s, tape.shape(i1)));
    }
    let n = o.count_consistent();
    if n == 0 {
        return Err(Error::NoValidPixels("reconstruction_loss"));
    }
    let c = s[2];
    let weights = Tensor::from_fn(&s, |i| T::of(o.flags()[i / c] as f64));
    let diff = tape.sub(rec, i1)?;
    let a = tape.abs(diff)?;
    let wv = tape.constant(weights);
    let masked = tape.mul(a, wv)?;
    let total = tape.sum(masked)?;
    tape.scale(total, T::of(1.0 / (n * c) as f64))
}

/// Discriminator over probability maps: three stride-2 3x3 convolutions
/// (`K -> 16 -> 16 -> 1`) with ReLU, global mean, sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

pub const DISC_WIDTH: usize = 16;

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn init(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [in_channels, DISC_WIDTH, DISC_WIDTH, 1];
        let weights = widths
            .windows(2)
            .map(|io| he_uniform(&mut rng, &[io[1], io[0], 3, 3], io[0] * 9))
            .collect();
        let biases = widths[1..].iter().map(|&c| Tensor::zeros(&[c])).collect();
        Self { weights, biases }
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|t| t.all_finite())
    }
}

impl<T: Scalar> Module<T> for DiscriminatorParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("disc.conv{i}.weight"), w));
            out.push((format!("disc.conv{i}.bias"), b));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Discriminator logit `z` for a probability map `p: [h, w, K]`; `D = sigmoid(z)`.
pub fn discriminator_logit<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], p: Var) -> Result<Var> {
    let s = tape.shape(p).to_vec();
    if s.len() != 3 || vars.len() != 6 {
        return Err(Error::invalid("discriminator expects [h, w, K] input and 6 parameter vars"));
    }
    let chw = tape.permute(p, &[2, 0, 1])?;
    let mut cur = tape.reshape(chw, &[1, s[2], s[0], s[1]])?;
    for i in 0..3 {
        cur = tape.conv2d(cur, vars[2 * i], vars[2 * i + 1], 2, 1)?;
        if i < 2 {
            cur = tape.relu(cur)?;
        }
    }
    tape.mean(cur)
}

/// `-[log D(P_t) + log(1 - D(P_s))]` written with softplus for stability.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], p_s: Var, p_t: Var) -> Result<Var> {
    let zt = discriminator_logit(tape, vars, p_t)?;
    let zs = discriminator_logit(tape, vars, p_s)?;
    let nzt = tape.scale(zt, -T::one())?;
    let a = tape.softplus(nzt)?;
    let b = tape.softplus(zs)?;
    tape.add(a, b)
}

/// The adversarial objective with both maps passed through gradient reversal:
/// one backward pass descends it for the discriminator and ascends it (scaled
/// by `lambda`) for whatever produced the maps.
pub fn adversarial_loss<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], p_s: Var, p_t: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let rs = tape.grad_reverse(p_s, T::of(lambda))?;
    let rt = tape.grad_reverse(p_t, T::of(lambda))?;
    discriminator_loss(tape, vars, rs, rt)
}

/// Unweighted sum of the enabled terms.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, terms: &[Option<Var>]) -> Result<Var> {
    let mut it = terms.iter().flatten();
    let first = *it.next().ok_or_else(|| Error::Config("no loss term enabled".into()))?;
    it.try_fold(first, |acc, &t| tape.add(acc, t))
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub kl: f64,
    pub rec: f64,
    pub adv: f64,
    pub total: f64,
    pub valid: usize,
}

impl LossReport {
    pub const HEADER: &'static str = "step,kl,rec,adv,total,valid";

    pub fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.kl, self.rec, self.adv, self.total, self.valid
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid(format!("malformed loss line {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            kl: f[1].parse().map_err(|_| bad())?,
            rec: f[2].parse().map_err(|_| bad())?,
            adv: f[3].parse().map_err(|_| bad())?,
            total: f[4].parse().map_err(|_| bad())?,
            valid: f[5].parse().map_err(|_| bad())?,
        })
    }
}
