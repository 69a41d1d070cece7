//! Held-out evaluation of encoder and student checkpoints.

use std::path::Path;
use std::time::Instant;

use super::config::EvalConfig;
use super::{downsample_covered, stream_rng, TAG_EVAL_CLIP, TAG_EVAL_PAIR};
use crate::coarse2fine::{student_map, student_map_from_features, StudentParams};
use crate::correspondence::{argmax_flow, local_correlation, FlowField, MappingConfig};
use crate::data::{gen_clip, gen_pair, rgb_to_lab, Domain, VideoPair};
use crate::encoder::{encode_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::inference::track_points;
use crate::metrics::{delta_avg, epe, Aggregation, EvalReport, VideoTracks, DELTA_THRESHOLDS};
use crate::params::{load_checkpoint, Checkpoint, Module};

pub fn load_encoder(dir: &Path) -> Result<EncoderParams<f32>> {
    encoder_from_checkpoint(&load_checkpoint(dir)?)
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<EncoderParams<f32>> {
    let kind = ck.meta_value("kind")?;
    if kind != "encoder" {
        return Err(Error::Config(format!("expected an encoder checkpoint, found kind={kind}")));
    }
    let cfg = EncoderParams::<f32>::config_from_meta(ck, "encoder.")?;
    let mut enc = EncoderParams::init(0, &cfg)?;
    enc.load_named(&ck.tensors)?;
    Ok(enc)
}

/// The `i`-th held-out synthetic pair.
pub fn eval_pair(cfg: &EvalConfig, i: usize) -> Result<VideoPair> {
    gen_pair(&cfg.generator, Domain::Synthetic, &mut stream_rng(cfg.eval_seed, TAG_EVAL_PAIR, i as u64))
}

/// Pixels with a correspondent inside the window: not covered and `|G|_inf <= r`.
pub fn supervisable(flow: &FlowField, covered: &[bool], radius: usize) -> Vec<bool> {
    let r = radius as f32;
    (0..flow.h() * flow.w())
        .map(|i| {
            let (du, dv) = flow.get(i / flow.w(), i % flow.w());
            !covered[i] && du.abs() <= r && dv.abs() <= r
        })
        .collect()
}

fn flow_targets(pair: &VideoPair, stride: usize, radius: usize) -> Result<(FlowField, Vec<bool>)> {
    let (h, w) = (pair.frame1.shape()[0], pair.frame1.shape()[1]);
    let gt = pair
        .gt_flow
        .as_ref()
        .ok_or_else(|| Error::invalid("held-out pair lacks flow"))?
        .downsample(stride)?;
    let covered = downsample_covered(pair.covered.as_deref().unwrap_or(&vec![false; h * w]), h, w, stride);
    let valid = supervisable(&gt, &covered, radius);
    Ok((gt, valid))
}

fn pooled_epe(name: &str, per_pair: Vec<(f64, usize)>) -> Result<EvalReport> {
    let n: usize = per_pair.iter().map(|p| p.1).sum();
    if n == 0 {
        return Err(Error::NoValidPixels("flow_epe"));
    }
    let value = per_pair.iter().map(|(e, c)| e * *c as f64).sum::<f64>() / n as f64;
    Ok(EvalReport {
        metric: name.into(),
        value,
        per_video: per_pair.into_iter().map(|p| p.0).collect(),
        aggregation: Aggregation::AllPoints,
    })
}

/// Arg-max flow endpoint error in feature pixels over the supervisable pixels
/// of the held-out pairs.
pub fn flow_epe(enc: &EncoderParams<f32>, cfg: &EvalConfig) -> Result<EvalReport> {
    let mapping = cfg.propagation.mapping;
    let mut per_pair = Vec::new();
    for i in 0..cfg.eval_pairs {
        let pair = eval_pair(cfg, i)?;
        let a = rgb_to_lab(&pair.frame1)?;
        let b = rgb_to_lab(&pair.frame2)?;
        let f = encode_batch(enc, &[&a, &b])?;
        let pred = argmax_flow(&local_correlation(&f[0], &f[1], &mapping)?);
        let (gt, valid) = flow_targets(&pair, enc.stride(), mapping.radius)?;
        let n = valid.iter().filter(|&&v| v).count();
        if n > 0 {
            per_pair.push((epe(&pred, &gt, &valid)?, n));
        }
    }
    pooled_epe("epe", per_pair)
}

/// Arg-max endpoint error of the student's fine map, in fine pixels.
pub fn student_epe(student: &StudentParams<f32>, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut per_pair = Vec::new();
    for i in 0..cfg.eval_pairs {
        let pair = eval_pair(cfg, i)?;
        let p = student_map(student, &rgb_to_lab(&pair.frame1)?, &rgb_to_lab(&pair.frame2)?)?;
        let (gt, valid) = flow_targets(&pair, student.fine_stride(), student.config.fine_radius)?;
        let n = valid.iter().filter(|&&v| v).count();
        if n > 0 {
            per_pair.push((epe(&argmax_flow(&p), &gt, &valid)?, n));
        }
    }
    pooled_epe("student_epe", per_pair)
}

/// Fraction of interior pixels (whole window inside the frame) where the
/// student's and teacher's arg-max offsets are within one fine pixel.
pub fn distill_agreement(
    student: &StudentParams<f32>,
    teacher: &EncoderParams<f32>,
    mapping: &MappingConfig,
    cfg: &EvalConfig,
) -> Result<f64> {
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..cfg.eval_pairs {
        let pair = eval_pair(cfg, i)?;
        let a = rgb_to_lab(&pair.frame1)?;
        let b = rgb_to_lab(&pair.frame2)?;
        let f = encode_batch(teacher, &[&a, &b])?;
        let t = argmax_flow(&local_correlation(&f[0], &f[1], mapping)?);
        let s = argmax_flow(&student_map(student, &a, &b)?);
        if (s.h(), s.w()) != (t.h(), t.w()) {
            return Err(Error::shape("distill_agreement", &[t.h(), t.w()], &[s.h(), s.w()]));
        }
        let r = mapping.radius;
        for y in r..t.h().saturating_sub(r) {
            for x in r..t.w().saturating_sub(r) {
                let (a, b) = (s.get(y, x), t.get(y, x));
                total += 1;
                if ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= 1.0 {
                    agree += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::NoValidPixels("distill_agreement"));
    }
    Ok(agree as f64 / total as f64)
}

/// Tracks held-out clips of the configured domain and returns the tracks
/// scored by the metrics module, excluding the query frame.
pub fn held_out_tracks(enc: &EncoderParams<f32>, cfg: &EvalConfig) -> Result<Vec<VideoTracks>> {
    let mut videos = Vec::with_capacity(cfg.eval_clips);
    for c in 0..cfg.eval_clips {
        let mut rng = stream_rng(cfg.eval_seed, TAG_EVAL_CLIP, c as u64);
        let clip = gen_clip(&cfg.generator, cfg.clip_len, cfg.points, cfg.track_domain, &mut rng)?;
        let queries: Vec<(f32, f32)> = clip.tracks.iter().map(|t| t.positions[0]).collect();
        let pred = track_points(enc, &clip.frames, &queries, &cfg.propagation)?;
        videos.push(VideoTracks {
            pred: pred.iter().map(|t| t.positions[1..].to_vec()).collect(),
            gt: clip.tracks.iter().map(|t| t.positions[1..].to_vec()).collect(),
            visible: clip.tracks.iter().map(|t| t.visible[1..].to_vec()).collect(),
            scale: vec![(cfg.generator.size * cfg.generator.size) as f64; cfg.clip_len - 1],
        });
    }
    Ok(videos)
}

/// Position accuracy averaged over the pixel thresholds on held-out clips.
pub fn tracking_accuracy(enc: &EncoderParams<f32>, cfg: &EvalConfig) -> Result<EvalReport> {
    delta_avg(&held_out_tracks(enc, cfg)?, &DELTA_THRESHOLDS, Aggregation::AllPoints)
}

pub fn eval_encoder(enc: &EncoderParams<f32>, cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    let videos = held_out_tracks(enc, cfg)?;
    Ok(vec![
        flow_epe(enc, cfg)?,
        delta_avg(&videos, &DELTA_THRESHOLDS, Aggregation::AllPoints)?,
        delta_avg(&videos, &DELTA_THRESHOLDS, Aggregation::PerVideoMean)?,
    ])
}

/// Evaluates an encoder (flow and tracking) or student (flow) checkpoint.
pub fn eval_checkpoint(dir: &Path, cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    let ck = load_checkpoint(dir)?;
    match ck.meta_value("kind")? {
        "encoder" => eval_encoder(&encoder_from_checkpoint(&ck)?, cfg),
        "student" => Ok(vec![student_epe(&StudentParams::from_checkpoint(&ck)?, cfg)?]),
        other => Err(Error::format(dir, format!("unknown checkpoint kind '{other}'"))),
    }
}

/// Median wall-clock timings of full fine matching against the student.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchReport {
    pub full_match_ms: f64,
    pub student_match_ms: f64,
    pub full_end_to_end_ms: f64,
    pub student_end_to_end_ms: f64,
}

impl BenchReport {
    /// Full-matching time over student time for the matching step alone.
    pub fn match_speed_ratio(&self) -> f64 {
        self.full_match_ms / self.student_match_ms
    }

    /// The same ratio with feature extraction included.
    pub fn end_to_end_speed_ratio(&self) -> f64 {
        self.full_end_to_end_ms / self.student_end_to_end_ms
    }
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Times teacher matching (`local_correlation` at the fine stride) and the
/// student on one pair of Lab frames, after one warm-up run each.
pub fn bench_matching(
    teacher: &EncoderParams<f32>,
    student: &StudentParams<f32>,
    mapping: &MappingConfig,
    frame1: &crate::numerics::Tensor<f32>,
    frame2: &crate::numerics::Tensor<f32>,
    reps: usize,
) -> Result<BenchReport> {
    let fine = encode_batch(teacher, &[frame1, frame2])?;
    let coarse = encode_batch(&student.encoder, &[frame1, frame2])?;
    Ok(BenchReport {
        full_match_ms: median_ms(reps, || local_correlation(&fine[0], &fine[1], mapping).map(drop))?,
        student_match_ms: median_ms(reps, || student_map_from_features(student, &coarse[0], &coarse[1]).map(drop))?,
        full_end_to_end_ms: median_ms(reps, || {
            let f = encode_batch(teacher, &[frame1, frame2])?;
            local_correlation(&f[0], &f[1], mapping).map(drop)
        })?,
        student_end_to_end_ms: median_ms(reps, || student_map(student, frame1, frame2).map(drop))?,
    })
}
