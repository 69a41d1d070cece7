//! Recurrent label propagation: point tracking and mask propagation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::correspondence::{local_correlation, occlusion_mask, MappingConfig, OcclusionMask};
use crate::data::{rgb_to_lab, Image};
use crate::encoder::{encode_batch, EncoderParams, FeatureMap};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[h, w, K]` per-pixel label channels at feature resolution.
pub type LabelVolume = Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationConfig {
    pub mapping: MappingConfig,
    /// Keys kept per query before renormalising.
    pub topk: usize,
    /// Number of previous predictions used as extra references.
    pub memory: usize,
    /// Heatmap standard deviation in feature pixels.
    pub heatmap_sigma: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            mapping: MappingConfig { radius: 6, tau: 0.1 },
            topk: 10,
            memory: 1,
            heatmap_sigma: 1.0,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        self.mapping.validate()?;
        if self.topk == 0 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::Config("heatmap sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Transports reference labels to the target frame. For each target pixel
/// `i` and reference, the `topk` best-scoring keys of the window around `i`
/// are softmax-weighted (temperature `tau`) and their labels summed; the
/// results are averaged over references. Score ties keep the smaller window
/// index.
pub fn propagate(refs: &[(&FeatureMap<f32>, &LabelVolume)], target: &FeatureMap<f32>, cfg: &MappingConfig, topk: usize) -> Result<LabelVolume> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::invalid("propagate needs at least one reference"));
    }
    if topk == 0 {
        return Err(Error::invalid("topk must be at least 1"));
    }
    let s = target.shape();
    if s.len() != 3 {
        return Err(Error::shape("propagate", &[0, 0, 0], s));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let nl = refs[0].1.last_dim();
    for (f, l) in refs {
        if f.shape() != s || l.shape() != [h, w, nl] {
            return Err(Error::shape("propagate reference", &[h, w, nl], l.shape()));
        }
    }
    let win = cfg.window();
    let kn = win.len();
    let inv_tau = 1.0 / cfg.tau;
    let mut out = vec![0.0f32; h * w * nl];
    out.par_chunks_mut(w * nl).enumerate().for_each(|(y, row)| {
        let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(kn);
        for x in 0..w {
            let q = &target.data()[(y * w + x) * c..(y * w + x + 1) * c];
            let acc = &mut row[x * nl..(x + 1) * nl];
            for (f, labels) in refs {
                scored.clear();
                for k in 0..kn {
                    if let Some((ky, kx)) = win.key(y, x, k, h, w) {
                        let j = ky * w + kx;
                        let key = &f.data()[j * c..(j + 1) * c];
                        let d: f64 = q.iter().zip(key).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                        scored.push((d * inv_tau, k, j));
                    }
                }
                // stable sort keeps window order among equal scores
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
                let kept = &scored[..topk.min(scored.len())];
                let mx = kept[0].0;
                let z: f64 = kept.iter().map(|s| (s.0 - mx).exp()).sum();
                for &(sc, _, j) in kept {
                    let wgt = (sc - mx).exp() / z / refs.len() as f64;
                    for (a, l) in acc.iter_mut().zip(&labels.data()[j * nl..(j + 1) * nl]) {
                        *a += (wgt * *l as f64) as f32;
                    }
                }
            }
        }
    });
    Tensor::new(&[h, w, nl], out)
}

/// Image-pixel coordinate to feature-grid coordinate for stride `s`.
pub fn image_to_feature(v: f32, s: usize) -> f32 {
    (v - (s as f32 - 1.0) / 2.0) / s as f32
}

pub fn feature_to_image(v: f32, s: usize) -> f32 {
    v * s as f32 + (s as f32 - 1.0) / 2.0
}

/// Gaussian heatmaps, one channel per point `(fx, fy)` in feature pixels.
pub fn render_heatmaps(h: usize, w: usize, points: &[(f32, f32)], sigma: f64) -> LabelVolume {
    let n = points.len();
    Tensor::from_fn(&[h, w, n], |i| {
        let (p, ch) = (i / n.max(1), i % n.max(1));
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let (px, py) = (points[ch].0 as f64, points[ch].1 as f64);
        (-((x - px).powi(2) + (y - py).powi(2)) / (2.0 * sigma * sigma)).exp() as f32
    })
}

/// Sub-pixel peak of channel `ch`: weighted mean of the heatmap within a
/// radius-2 neighbourhood of its arg-max.
pub fn heatmap_peak(vol: &LabelVolume, ch: usize) -> (f32, f32) {
    let (h, w, n) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let at = |y: usize, x: usize| vol.data()[(y * w + x) * n + ch];
    let mut best = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if at(y, x) > at(best.0, best.1) {
                best = (y, x);
            }
        }
    }
    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for y in best.0.saturating_sub(2)..=(best.0 + 2).min(h - 1) {
        for x in best.1.saturating_sub(2)..=(best.1 + 2).min(w - 1) {
            let v = at(y, x).max(0.0) as f64;
            sx += v * x as f64;
            sy += v * y as f64;
            sw += v;
        }
    }
    if sw <= 0.0 {
        return (best.1 as f32, best.0 as f32);
    }
    ((sx / sw) as f32, (sy / sw) as f32)
}

/// Per-frame positions in image pixels plus a visibility flag.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTrack {
    pub positions: Vec<(f32, f32)>,
    pub visible: Vec<bool>,
}

fn lab_features(encoder: &EncoderParams<f32>, clip: &[Image]) -> Result<Vec<FeatureMap<f32>>> {
    if clip.is_empty() {
        return Err(Error::invalid("empty clip"));
    }
    let lab: Vec<Image> = clip.iter().map(rgb_to_lab).collect::<Result<_>>()?;
    let mut feats = Vec::with_capacity(lab.len());
    // bounded batches keep the tape small on long clips
    for chunk in lab.chunks(8) {
        let refs: Vec<&Image> = chunk.iter().collect();
        feats.extend(encode_batch(encoder, &refs)?);
    }
    Ok(feats)
}

fn consistency(a: &FeatureMap<f32>, b: &FeatureMap<f32>, cfg: &MappingConfig) -> Result<OcclusionMask> {
    let p12 = local_correlation(a, b, cfg)?;
    let p21 = local_correlation(b, a, cfg)?;
    occlusion_mask(&p12, &p21)
}

/// Tracks `queries` (image pixels in frame 0) through an RGB clip. Frame `t`
/// uses frame 0 and the previous `memory` predictions as references; earlier
/// predictions are re-rendered as clean heatmaps at their read-out positions.
/// A point becomes invisible when it leaves the frame or its previous
/// position fails the forward-backward check between consecutive frames.
pub fn track_points(
    encoder: &EncoderParams<f32>,
    clip: &[Image],
    queries: &[(f32, f32)],
    cfg: &PropagationConfig,
) -> Result<Vec<PointTrack>> {
    cfg.validate()?;
    let feats = lab_features(encoder, clip)?;
    let s = encoder.stride();
    let (ih, iw) = (clip[0].shape()[0], clip[0].shape()[1]);
    for &(u, v) in queries {
        if !(u >= 0.0 && v >= 0.0 && u <= (iw - 1) as f32 && v <= (ih - 1) as f32) {
            return Err(Error::invalid(format!("query ({u}, {v}) lies outside frame 0")));
        }
    }
    let (fh, fw) = (feats[0].shape()[0], feats[0].shape()[1]);
    let to_feat = |p: (f32, f32)| (image_to_feature(p.0, s), image_to_feature(p.1, s));
    let mut feat_pos: Vec<Vec<(f32, f32)>> = vec![queries.iter().map(|&q| to_feat(q)).collect()];
    let mut tracks: Vec<PointTrack> = queries
        .iter()
        .map(|&q| PointTrack {
            positions: vec![q],
            visible: vec![true],
        })
        .collect();
    let first = render_heatmaps(fh, fw, &feat_pos[0], cfg.heatmap_sigma);
    for t in 1..clip.len() {
        let mut rendered: Vec<LabelVolume> = Vec::new();
        let lo = t.saturating_sub(cfg.memory).max(1);
        for prev in feat_pos.iter().take(t).skip(lo) {
            rendered.push(render_heatmaps(fh, fw, prev, cfg.heatmap_sigma));
        }
        let mut refs: Vec<(&FeatureMap<f32>, &LabelVolume)> = vec![(&feats[0], &first)];
        for (i, vol) in rendered.iter().enumerate() {
            refs.push((&feats[lo + i], vol));
        }
        let out = propagate(&refs, &feats[t], &cfg.mapping, cfg.topk)?;
        let occ = consistency(&feats[t - 1], &feats[t], &cfg.mapping)?;
        let mut now = Vec::with_capacity(queries.len());
        for (p, tr) in tracks.iter_mut().enumerate() {
            let (fx, fy) = heatmap_peak(&out, p);
            now.push((fx, fy));
            let (u, v) = (feature_to_image(fx, s), feature_to_image(fy, s));
            let prev = feat_pos[t - 1][p];
            let (py, px) = (
                (prev.1.round().max(0.0) as usize).min(fh - 1),
                (prev.0.round().max(0.0) as usize).min(fw - 1),
            );
            let inside = u >= 0.0 && v >= 0.0 && u <= (iw - 1) as f32 && v <= (ih - 1) as f32;
            tr.positions.push((u.clamp(0.0, (iw - 1) as f32), v.clamp(0.0, (ih - 1) as f32)));
            tr.visible.push(inside && occ.get(py, px) == 1);
        }
        feat_pos.push(now);
    }
    Ok(tracks)
}

fn one_hot_features(labels: &[u8], ih: usize, iw: usize, s: usize, classes: usize) -> LabelVolume {
    let (fh, fw) = (ih / s, iw / s);
    let mut vol = Tensor::zeros(&[fh, fw, classes]);
    let inv = 1.0 / (s * s) as f32;
    for y in 0..ih {
        for x in 0..iw {
            let l = labels[y * iw + x] as usize;
            vol.data_mut()[((y / s) * fw + x / s) * classes + l] += inv;
        }
    }
    vol
}

fn argmax_labels(vol: &LabelVolume) -> Vec<u8> {
    let k = vol.last_dim();
    vol.data()
        .chunks(k)
        .map(|row| crate::correspondence::argmax_first(row) as u8)
        .collect()
}

fn upsample_nearest(labels: &[u8], fh: usize, fw: usize, s: usize) -> Vec<u8> {
    let (ih, iw) = (fh * s, fw * s);
    (0..ih * iw).map(|i| labels[(i / iw / s) * fw + (i % iw) / s]).collect()
}

/// Propagates a first-frame label map (`0..classes`, image resolution) through
/// an RGB clip. Returns one label map per frame, frame 0 being `mask0` itself.
pub fn propagate_mask(
    encoder: &EncoderParams<f32>,
    clip: &[Image],
    mask0: &[u8],
    classes: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<Vec<u8>>> {
    cfg.validate()?;
    if classes == 0 || classes > 256 {
        return Err(Error::invalid("class count must be in 1..=256"));
    }
    let feats = lab_features(encoder, clip)?;
    let (ih, iw) = (clip[0].shape()[0], clip[0].shape()[1]);
    if mask0.len() != ih * iw {
        return Err(Error::shape("propagate_mask", &[ih * iw], &[mask0.len()]));
    }
    if let Some(&bad) = mask0.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(format!("label {bad} exceeds class count {classes}")));
    }
    let s = encoder.stride();
    let (fh, fw) = (feats[0].shape()[0], feats[0].shape()[1]);
    let first = one_hot_features(mask0, ih, iw, s, classes);
    let mut preds: Vec<LabelVolume> = vec![first.clone()];
    let mut out = vec![mask0.to_vec()];
    for t in 1..clip.len() {
        let lo = t.saturating_sub(cfg.memory).max(1);
        let mut refs: Vec<(&FeatureMap<f32>, &LabelVolume)> = vec![(&feats[0], &first)];
        for (i, vol) in preds.iter().enumerate().take(t).skip(lo) {
            refs.push((&feats[i], vol));
        }
        let vol = propagate(&refs, &feats[t], &cfg.mapping, cfg.topk)?;
        let labels = argmax_labels(&vol);
        out.push(upsample_nearest(&labels, fh, fw, s));
        preds.push(one_hot_features(&upsample_nearest(&labels, fh, fw, s), ih, iw, s, classes));
    }
    Ok(out)
}

/// Writes `frame,point_id,u,v,visible` lines.
pub fn write_tracks(path: &Path, tracks: &[PointTrack]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("frame,point_id,u,v,visible\n");
    let frames = tracks.first().map_or(0, |t| t.positions.len());
    for t in 0..frames {
        for (p, tr) in tracks.iter().enumerate() {
            let (u, v) = tr.positions[t];
            body.push_str(&format!("{t},{p},{u},{v},{}\n", tr.visible[t] as u8));
        }
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tracks(path: &Path) -> Result<Vec<PointTrack>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(usize, usize, f32, f32, bool)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("frame") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: expected frame,point_id,u,v,visible", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        rows.push((
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
            f[3].parse().map_err(|_| bad())?,
            f[4] == "1",
        ));
    }
    let frames = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let points = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let mut tracks = vec![
        PointTrack {
            positions: vec![(f32::NAN, f32::NAN); frames],
            visible: vec![false; frames],
        };
        points
    ];
    for (t, p, u, v, vis) in rows {
        tracks[p].positions[t] = (u, v);
        tracks[p].visible[t] = vis;
    }
    if tracks.iter().any(|t| t.positions.iter().any(|p| p.0.is_nan())) {
        return Err(Error::format(path, "track file misses some (frame, point) entries"));
    }
    Ok(tracks)
}

/// Reads query points as `u,v` or `u v` lines (image pixels).
pub fn read_queries(path: &Path) -> Result<Vec<(f32, f32)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let bad = || Error::format(path, format!("line {}: expected u,v", n + 1));
        if parts.len() != 2 {
            return Err(bad());
        }
        out.push((parts[0].parse().map_err(|_| bad())?, parts[1].parse().map_err(|_| bad())?));
    }
    Ok(out)
}
