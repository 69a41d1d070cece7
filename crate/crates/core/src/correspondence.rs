//! Local-correlation probability maps, flow readout and forward-backward
//! occlusion detection.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels::local_corr_forward;
use crate::numerics::tape::softmax_row;
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::window::Window;

/// Window radius `r` (feature-grid pixels) and softmax temperature `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MappingConfig {
    pub radius: usize,
    pub tau: f64,
}

impl MappingConfig {
    pub fn new(radius: usize, tau: f64) -> Result<Self> {
        let cfg = Self { radius, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::Config("window radius must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn window(&self) -> Window {
        Window::new(self.radius)
    }
}

/// Per-pixel distribution over the `(2r+1)^2` window offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    probs: Tensor<T>,
    window: Window,
    valid: Arc<[bool]>,
}

impl<T: Scalar> ProbMap<T> {
    /// Wraps `probs: [h, w, K]`. Entries at out-of-image offsets must be zero
    /// and every row must sum to one.
    pub fn new(probs: Tensor<T>, window: Window) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 3 || s[2] != window.len() {
            return Err(Error::shape("ProbMap", &[0, 0, window.len()], s));
        }
        let valid: Arc<[bool]> = window.mask(s[0], s[1]).into();
        let k = window.len();
        for (row, m) in probs.data().chunks(k).zip(valid.chunks(k)) {
            let mut sum = 0.0;
            for (p, &ok) in row.iter().zip(m) {
                let p = p.as_f64();
                if p < 0.0 || (!ok && p != 0.0) || !p.is_finite() {
                    return Err(Error::invalid("ProbMap: negative, non-finite or out-of-image mass"));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::invalid(format!("ProbMap: row sums to {sum}")));
            }
        }
        Ok(Self { probs, window, valid })
    }

    /// Builds a map whose row `i` puts all mass on `offsets[i]`.
    pub fn dirac(h: usize, w: usize, window: Window, offsets: &[(isize, isize)]) -> Result<Self> {
        if offsets.len() != h * w {
            return Err(Error::shape("ProbMap::dirac", &[h * w], &[offsets.len()]));
        }
        let k = window.len();
        let mut data = vec![T::zero(); h * w * k];
        for (i, &(du, dv)) in offsets.iter().enumerate() {
            let idx = window
                .index(du, dv)
                .ok_or_else(|| Error::invalid(format!("offset ({du},{dv}) outside window")))?;
            data[i * k + idx] = T::one();
        }
        Self::new(Tensor::new(&[h, w, k], data)?, window)
    }

    pub fn h(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor<T> {
        self.probs
    }

    /// In-image flag per (pixel, offset), laid out like `probs`.
    pub fn valid(&self) -> &Arc<[bool]> {
        &self.valid
    }

    pub fn row(&self, y: usize, x: usize) -> &[T] {
        let k = self.window.len();
        let i = y * self.w() + x;
        &self.probs.data()[i * k..(i + 1) * k]
    }

    /// Window index of the most probable offset; ties go to the smallest index.
    pub fn argmax_index(&self, y: usize, x: usize) -> usize {
        argmax_first(self.row(y, x))
    }
}

pub(crate) fn argmax_first<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-pixel displacement `(du, dv)`, stored as `[h, w, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    vectors: Tensor<f32>,
}

impl FlowField {
    pub fn new(vectors: Tensor<f32>) -> Result<Self> {
        let s = vectors.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::shape("FlowField", &[0, 0, 2], s));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite { op: "FlowField" });
        }
        Ok(Self { vectors })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            vectors: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn h(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.w() + x) * 2;
        let d = self.vectors.data();
        (d[i], d[i + 1])
    }

    /// Samples an image-resolution flow on the stride-`s` feature grid and
    /// rescales it to feature pixels. Feature pixel `(fy, fx)` reads image
    /// pixel `(s*fy + s/2, s*fx + s/2)`.
    pub fn downsample(&self, s: usize) -> Result<FlowField> {
        if s == 0 || !self.h().is_multiple_of(s) || !self.w().is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "flow extents {}x{} not divisible by stride {s}",
                self.h(),
                self.w()
            )));
        }
        let (h, w) = (self.h() / s, self.w() / s);
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                let (du, dv) = self.get(y * s + s / 2, x * s + s / 2);
                data.push(du / s as f32);
                data.push(dv / s as f32);
            }
        }
        FlowField::new(Tensor::new(&[h, w, 2], data)?)
    }
}

/// Per-pixel forward-backward consistency flag; `1` means consistent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    h: usize,
    w: usize,
    flags: Vec<u8>,
}

impl OcclusionMask {
    pub fn new(h: usize, w: usize, flags: Vec<u8>) -> Result<Self> {
        if flags.len() != h * w {
            return Err(Error::shape("OcclusionMask", &[h * w], &[flags.len()]));
        }
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::invalid("occlusion flags must be 0 or 1"));
        }
        Ok(Self { h, w, flags })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            flags: vec![1; h * w],
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.flags[y * self.w + x]
    }

    pub fn count_consistent(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }
}

fn check_features<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if f1.rank() != 3 || f1.shape() != f2.shape() {
        return Err(Error::shape("local_correlation", f1.shape(), f2.shape()));
    }
    let s = f1.shape();
    Ok((s[0], s[1], s[2]))
}

/// `P(i, k) = softmax_k(F1(i) . F2(i + offset_k) / tau)` over in-image keys.
pub fn local_correlation<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, cfg: &MappingConfig) -> Result<ProbMap<T>> {
    cfg.validate()?;
    let (h, w, c) = check_features(f1, f2)?;
    let win = cfg.window();
    let logits = local_corr_forward(f1.data(), f2.data(), h, w, c, win, T::of(1.0 / cfg.tau));
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "local_correlation" });
    }
    let valid: Arc<[bool]> = win.mask(h, w).into();
    let k = win.len();
    let mut probs = vec![T::zero(); h * w * k];
    for ((row, m), out) in logits.chunks(k).zip(valid.chunks(k)).zip(probs.chunks_mut(k)) {
        softmax_row(row, Some(m), out);
    }
    Ok(ProbMap {
        probs: Tensor::new(&[h, w, k], probs)?,
        window: win,
        valid,
    })
}

/// Recorded counterpart of [`local_correlation`]: returns masked log-probabilities
/// `[h, w, K]` (zero at out-of-image offsets) so losses can differentiate
/// through the features.
pub fn log_prob_map<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, cfg: &MappingConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(f1).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("log_prob_map expects [h, w, c] features"));
    }
    let win = cfg.window();
    let logits = tape.local_corr(f1, f2, win, T::of(1.0 / cfg.tau))?;
    tape.log_softmax(logits, Some(win.mask(s[0], s[1]).into()))
}

/// Recorded probability map (softmax rather than log-softmax).
pub fn prob_map_on_tape<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, cfg: &MappingConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(f1).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("prob_map_on_tape expects [h, w, c] features"));
    }
    let win = cfg.window();
    let logits = tape.local_corr(f1, f2, win, T::of(1.0 / cfg.tau))?;
    tape.softmax(logits, Some(win.mask(s[0], s[1]).into()))
}

/// Offset of the most probable key at every pixel (smallest index on ties).
pub fn argmax_flow<T: Scalar>(p: &ProbMap<T>) -> FlowField {
    let (h, w) = (p.h(), p.w());
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = p.window.offset(p.argmax_index(y, x));
            data.push(du as f32);
            data.push(dv as f32);
        }
    }
    FlowField::new(Tensor::new(&[h, w, 2], data).expect("flow extents")).expect("integer flow is finite")
}

/// Expected offset under each pixel's distribution.
pub fn soft_argmax_flow<T: Scalar>(p: &ProbMap<T>) -> FlowField {
    let (h, w) = (p.h(), p.w());
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let (mut eu, mut ev) = (0.0f64, 0.0f64);
            for (k, v) in p.row(y, x).iter().enumerate() {
                let (du, dv) = p.window.offset(k);
                eu += v.as_f64() * du as f64;
                ev += v.as_f64() * dv as f64;
            }
            data.push(eu as f32);
            data.push(ev as f32);
        }
    }
    FlowField::new(Tensor::new(&[h, w, 2], data).expect("flow extents")).expect("expectation is finite")
}

/// `O(i) = 1` iff following the argmax of `p12` from `i` and then the argmax
/// of `p21` lands back on `i`.
pub fn occlusion_mask<T: Scalar>(p12: &ProbMap<T>, p21: &ProbMap<T>) -> Result<OcclusionMask> {
    if p12.h() != p21.h() || p12.w() != p21.w() {
        return Err(Error::shape("occlusion_mask", &[p12.h(), p12.w()], &[p21.h(), p21.w()]));
    }
    let (h, w) = (p12.h(), p12.w());
    let mut flags = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = p12.window.offset(p12.argmax_index(y, x));
            // argmax never lands on a masked key, so j is in the image
            let (jy, jx) = ((y as isize + dv) as usize, (x as isize + du) as usize);
            let (bu, bv) = p21.window.offset(p21.argmax_index(jy, jx));
            let back = (jy as isize + bv, jx as isize + bu);
            flags.push((back == (y as isize, x as isize)) as u8);
        }
    }
    OcclusionMask::new(h, w, flags)
}

/// Writes the probabilities as CPXT to `path` plus a `<path>.txt` sidecar
/// recording the radius and channel convention.
pub fn export_prob_map<T: Scalar>(path: &Path, p: &ProbMap<T>) -> Result<()> {
    crate::numerics::io::save_tensor(path, &p.probs)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    let side = std::path::PathBuf::from(side);
    let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    writeln!(
        f,
        "radius={}\nheight={}\nwidth={}\nchannels={}\nchannel_order=k=(dv+r)*(2r+1)+(du+r)\n",
        p.window.radius(),
        p.h(),
        p.w(),
        p.window.len()
    )
    .map_err(|e| Error::io(&side, e))
}
