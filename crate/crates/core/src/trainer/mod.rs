//! Training stages: soft-labeler pretraining, joint training, distillation.

pub mod config;
pub mod eval;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coarse2fine::{distill_loss, student_logits_on_tape, student_outputs_on_tape, StudentParams};
use crate::correspondence::{local_correlation, occlusion_mask, FlowField, MappingConfig, ProbMap};
use crate::data::{channel_dropout, gen_pair, rgb_to_lab, Domain, GeneratorConfig, Image, VideoPair};
use crate::encoder::{encode, encode_batch, encode_on_tape, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, kl_supervision_loss, make_label, reconstruction_loss, total_loss, DiscriminatorParams, LossReport,
};
use crate::numerics::{adam_step, cosine_lr, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::params::{load_checkpoint, save_checkpoint, Module};

pub use config::{EvalConfig, LabelChoice, LossSet, Profile, Stage, TrainConfig};
pub use eval::{bench_matching, distill_agreement, BenchReport, eval_checkpoint, eval_encoder, flow_epe, load_encoder, tracking_accuracy};

pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const FINAL_CKPT: &str = "final";

const TAG_SYNTH: u64 = 1;
const TAG_REAL: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_ORDER: u64 = 4;
pub(crate) const TAG_EVAL_PAIR: u64 = 5;
pub(crate) const TAG_EVAL_CLIP: u64 = 6;
const DISC_SEED_OFFSET: u64 = 0xD15C;

/// Independent generator for item `index` of stream `tag` under `seed`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// The `index`-th training pair of `domain` for `seed`.
pub fn training_pair(cfg: &GeneratorConfig, seed: u64, domain: Domain, index: usize) -> Result<VideoPair> {
    let tag = match domain {
        Domain::Synthetic => TAG_SYNTH,
        Domain::Real => TAG_REAL,
    };
    gen_pair(cfg, domain, &mut stream_rng(seed, tag, index as u64))
}

/// `s x s` block average of an `[h, w, c]` image.
pub fn avg_pool(img: &Image, s: usize) -> Result<Image> {
    let sh = img.shape();
    if sh.len() != 3 || !sh[0].is_multiple_of(s) || !sh[1].is_multiple_of(s) {
        return Err(Error::shape("avg_pool", &[s, s, 0], sh));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let (oh, ow) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f32;
    Ok(Tensor::from_fn(&[oh, ow, c], |i| {
        let (p, ch) = (i / c, i % c);
        let (oy, ox) = (p / ow, p % ow);
        let mut acc = 0.0f32;
        for y in oy * s..(oy + 1) * s {
            for x in ox * s..(ox + 1) * s {
                acc += img.data()[(y * w + x) * c + ch];
            }
        }
        acc * inv
    }))
}

/// A feature pixel is covered when any pixel of its block is.
pub fn downsample_covered(covered: &[bool], h: usize, w: usize, s: usize) -> Vec<bool> {
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![false; oh * ow];
    for y in 0..oh * s {
        for x in 0..ow * s {
            if covered[y * w + x] {
                out[(y / s) * ow + x / s] = true;
            }
        }
    }
    out
}

/// A pair converted to network inputs and feature-resolution targets.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub lab1: Image,
    pub lab2: Image,
    pub input1: Image,
    pub input2: Image,
    pub small1: Image,
    pub small2: Image,
    pub flow: Option<FlowField>,
    pub covered: Option<Vec<bool>>,
}

impl PreparedPair {
    pub fn new<R: rand::Rng>(pair: &VideoPair, stride: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        let lab1 = rgb_to_lab(&pair.frame1)?;
        let lab2 = rgb_to_lab(&pair.frame2)?;
        let input1 = channel_dropout(&lab1, rng, dropout)?;
        let input2 = channel_dropout(&lab2, rng, dropout)?;
        let (h, w) = (lab1.shape()[0], lab1.shape()[1]);
        Ok(Self {
            small1: avg_pool(&lab1, stride)?,
            small2: avg_pool(&lab2, stride)?,
            flow: pair.gt_flow.as_ref().map(|f| f.downsample(stride)).transpose()?,
            covered: pair.covered.as_ref().map(|c| downsample_covered(c, h, w, stride)),
            lab1,
            lab2,
            input1,
            input2,
        })
    }
}

/// Result of a finished stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: PathBuf,
    pub reports: Vec<LossReport>,
}

/// Loads a plain encoder checkpoint, checking it matches the configured geometry.
fn load_prerequisite(path: &Option<PathBuf>, what: &str, stride: usize) -> Result<EncoderParams<f32>> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::MissingPrerequisite(format!("{what} checkpoint path not set")))?;
    if !p.join(crate::params::MANIFEST).is_file() {
        return Err(Error::MissingPrerequisite(format!("{what} checkpoint {} not found", p.display())));
    }
    let enc = load_encoder(p)?;
    if enc.stride() != stride {
        return Err(Error::Config(format!(
            "{what} checkpoint has stride {}, config expects {stride}",
            enc.stride()
        )));
    }
    Ok(enc)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged { step, what: op },
        other => other,
    }
}

/// Runs one stage, writing `config.txt`, `loss.csv`, periodic `step-NNNNNN`
/// checkpoints and the `final` checkpoint under `out`.
pub fn run_stage(cfg: &TrainConfig, out: &Path) -> Result<StageOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(CONFIG_ECHO);
    std::fs::write(&echo, config::render_pairs(&cfg.to_pairs())).map_err(|e| Error::io(&echo, e))?;
    let log_path = out.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    writeln!(log, "{}", LossReport::HEADER).map_err(|e| Error::io(&log_path, e))?;
    let mut sink = |r: &LossReport| writeln!(log, "{}", r.line()).map_err(|e| Error::io(&log_path, e));
    let out_dir = out.to_path_buf();
    let result = match cfg.stage {
        Stage::PretrainSelf | Stage::Joint => train_encoder(cfg, &out_dir, &mut sink),
        Stage::Distill => train_student(cfg, &out_dir, &mut sink),
    }?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(result)
}

fn encoder_meta(cfg: &TrainConfig, enc: &EncoderParams<f32>, step: usize) -> Vec<(String, String)> {
    let mut m = vec![
        ("kind".to_string(), "encoder".to_string()),
        ("stage".to_string(), cfg.stage.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("step".to_string(), step.to_string()),
        ("mapping.radius".to_string(), cfg.radius.to_string()),
        ("mapping.tau".to_string(), cfg.tau.to_string()),
    ];
    m.extend(enc.meta("encoder."));
    m
}

fn save_encoder_ckpt(
    dir: &Path,
    cfg: &TrainConfig,
    enc: &EncoderParams<f32>,
    disc: Option<&DiscriminatorParams<f32>>,
    step: usize,
) -> Result<()> {
    let mut tensors = enc.named();
    if let Some(d) = disc {
        tensors.extend(d.named());
    }
    save_checkpoint(dir, &encoder_meta(cfg, enc, step), &tensors)
}

fn step_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("step-{step:06}"))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, TAG_ORDER, epoch as u64));
    idx
}

/// Indices of the pairs used at each step, epoch by epoch.
fn schedule(cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut steps = Vec::with_capacity(cfg.total_steps());
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, cfg.pairs);
        steps.extend(order.chunks(cfg.batch).map(|c| c.to_vec()));
    }
    steps
}

fn prepare(cfg: &TrainConfig, domain: Domain, indices: &[usize], step: usize, slot: u64) -> Result<Vec<PreparedPair>> {
    indices
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let pair = training_pair(&cfg.generator, cfg.seed, domain, i)?;
            let mut rng = stream_rng(cfg.seed, TAG_DROPOUT, ((step as u64) << 20) | (slot << 16) | j as u64);
            PreparedPair::new(&pair, cfg.stride, cfg.dropout, &mut rng)
        })
        .collect()
}

/// Trainable state of the encoder stages.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub encoder: EncoderParams<f32>,
    pub disc: DiscriminatorParams<f32>,
    pub adam: AdamState<f32>,
}

impl EncoderState {
    pub fn new(encoder: EncoderParams<f32>, seed: u64, window_len: usize) -> Self {
        let disc = DiscriminatorParams::init(seed.wrapping_add(DISC_SEED_OFFSET), window_len);
        let adam = AdamState::new(encoder.named().into_iter().chain(disc.named()).map(|(_, t)| t));
        Self { encoder, disc, adam }
    }
}

/// Which terms a step should build; pretraining is reconstruction only.
fn active_losses(cfg: &TrainConfig) -> LossSet {
    match cfg.stage {
        Stage::PretrainSelf => LossSet {
            kl: false,
            rec: true,
            adv: false,
        },
        _ => cfg.losses,
    }
}

fn mean_terms(tape: &mut Tape<f32>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f32)?))
}

/// Reconstruction of `small1` from `small2` through the recorded map `p`,
/// restricted to the forward-backward consistent pixels.
fn rec_term(
    tape: &mut Tape<f32>,
    mapping: &MappingConfig,
    f1: Var,
    f2: Var,
    p: Var,
    pair: &PreparedPair,
) -> Result<Option<Var>> {
    let p12 = ProbMap::new(tape.value(p).clone(), mapping.window())?;
    let p21 = local_correlation(tape.value(f2), tape.value(f1), mapping)?;
    let o = occlusion_mask(&p12, &p21)?;
    if o.count_consistent() == 0 {
        return Ok(None);
    }
    let src = tape.constant(pair.small2.clone());
    let target = tape.constant(pair.small1.clone());
    let rec = tape.window_gather(p, src, mapping.window())?;
    reconstruction_loss(tape, rec, target, &o).map(Some)
}

/// One optimisation step of the encoder stages. `synth` feeds the KL and the
/// synthetic adversarial branch, `real` the reconstruction and the real
/// adversarial branch. `self_feats` holds the soft labeler's features of each
/// synthetic second frame when soft labels are used.
pub fn encoder_step(
    cfg: &TrainConfig,
    state: &mut EncoderState,
    synth: &[PreparedPair],
    real: &[PreparedPair],
    self_feats: Option<&[Tensor<f32>]>,
    step: usize,
) -> Result<LossReport> {
    let losses = active_losses(cfg);
    let mapping = cfg.mapping()?;
    let win = mapping.window();
    let mut tape = Tape::<f32>::new();
    let ev = state.encoder.bind(&mut tape, true);
    let dv = if losses.adv { state.disc.bind(&mut tape, true) } else { Vec::new() };
    let frames: Vec<&Image> = synth
        .iter()
        .chain(real)
        .flat_map(|p| [&p.input1, &p.input2])
        .collect();
    let feats = encode_on_tape(&mut tape, &state.encoder, &ev, &frames)?;
    let (fh, fw) = (tape.shape(feats[0])[0], tape.shape(feats[0])[1]);
    let mask: std::sync::Arc<[bool]> = win.mask(fh, fw).into();
    let scale = (1.0 / mapping.tau) as f32;
    let kind = cfg.label_kind();
    let label_mapping = cfg.label_mapping()?;

    let (mut kl_terms, mut rec_terms, mut adv_terms) = (Vec::new(), Vec::new(), Vec::new());
    let mut ps_maps = Vec::new();
    let mut valid = 0usize;
    for (b, pair) in synth.iter().enumerate() {
        let (f1, f2) = (feats[2 * b], feats[2 * b + 1]);
        let logits = tape.local_corr(f1, f2, win, scale)?;
        if losses.kl {
            let flow = pair
                .flow
                .as_ref()
                .ok_or_else(|| Error::invalid("synthetic pair lacks ground-truth flow"))?;
            let f2_self = self_feats.map(|f| &f[b]);
            let label = make_label::<f32>(kind, flow, &label_mapping, pair.covered.as_deref(), f2_self)?;
            if label.valid_count() > 0 {
                valid += label.valid_count();
                let lp = tape.log_softmax(logits, Some(mask.clone()))?;
                kl_terms.push(kl_supervision_loss(&mut tape, lp, &label)?);
            }
        }
        if losses.adv {
            ps_maps.push(tape.softmax(logits, Some(mask.clone()))?);
        }
    }
    let off = 2 * synth.len();
    for (b, pair) in real.iter().enumerate() {
        if !(losses.rec || losses.adv) {
            break;
        }
        let (f1, f2) = (feats[off + 2 * b], feats[off + 2 * b + 1]);
        let logits = tape.local_corr(f1, f2, win, scale)?;
        let p = tape.softmax(logits, Some(mask.clone()))?;
        if losses.rec {
            if let Some(t) = rec_term(&mut tape, &mapping, f1, f2, p, pair)? {
                rec_terms.push(t);
            }
        }
        if losses.adv {
            if let Some(&ps) = ps_maps.get(b) {
                adv_terms.push(adversarial_loss(&mut tape, &dv, ps, p, cfg.lambda)?);
            }
        }
    }
    let kl = mean_terms(&mut tape, &kl_terms)?;
    let rec = mean_terms(&mut tape, &rec_terms)?;
    let adv = mean_terms(&mut tape, &adv_terms)?;
    let value = |t: &Tape<f32>, v: Option<Var>| v.map_or(0.0, |v| t.value(v).item() as f64);
    let mut report = LossReport {
        step,
        kl: value(&tape, kl),
        rec: value(&tape, rec),
        adv: value(&tape, adv),
        total: 0.0,
        valid,
    };
    if kl.is_none() && rec.is_none() && adv.is_none() {
        return Ok(report);
    }
    let total = total_loss(&mut tape, &[kl, rec, adv])?;
    report.total = tape.value(total).item() as f64;
    if !report.total.is_finite() {
        return Err(Error::Diverged { step, what: "total loss" });
    }
    let grads = tape.backward(total)?;
    let ne = ev.len();
    let enc_shapes: Vec<Vec<usize>> = state.encoder.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let disc_shapes: Vec<Vec<usize>> = state.disc.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut g: Vec<Tensor<f32>> = Vec::with_capacity(ne + disc_shapes.len());
    for (v, s) in ev.iter().zip(&enc_shapes) {
        g.push(grads.get_or_zeros(*v, s));
    }
    for (i, s) in disc_shapes.iter().enumerate() {
        g.push(match dv.get(i) {
            Some(v) => grads.get_or_zeros(*v, s),
            None => Tensor::zeros(s),
        });
    }
    if g.iter().any(|t| !t.all_finite()) {
        return Err(Error::Diverged { step, what: "gradient" });
    }
    let lr = if cfg.cosine {
        cosine_lr(cfg.lr, step, cfg.total_steps())
    } else {
        cfg.lr
    };
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut params = state.encoder.tensors_mut();
    params.extend(state.disc.tensors_mut());
    let grefs: Vec<&Tensor<f32>> = g.iter().collect();
    if losses.adv {
        adam_step(&mut params, &grefs, &mut state.adam, &adam, lr)?;
    } else {
        // the discriminator is absent from the graph; leave its moments untouched
        let mut enc_only: Vec<&mut Tensor<f32>> = params.into_iter().take(ne).collect();
        let mut sub = AdamState {
            m: state.adam.m[..ne].to_vec(),
            v: state.adam.v[..ne].to_vec(),
            step: state.adam.step,
        };
        adam_step(&mut enc_only, &grefs[..ne], &mut sub, &adam, lr)?;
        state.adam.m[..ne].clone_from_slice(&sub.m);
        state.adam.v[..ne].clone_from_slice(&sub.v);
        state.adam.step = sub.step;
    }
    if !state.encoder.all_finite() {
        return Err(Error::Diverged { step, what: "encoder parameters" });
    }
    Ok(report)
}

fn train_encoder(cfg: &TrainConfig, out: &Path, sink: &mut dyn FnMut(&LossReport) -> Result<()>) -> Result<StageOutput> {
    let losses = active_losses(cfg);
    let soft = matches!(cfg.label, LabelChoice::Soft | LabelChoice::SoftBilinear);
    let theta_self = if cfg.stage == Stage::Joint && ((losses.kl && soft) || cfg.init_from_self) {
        Some(load_prerequisite(&cfg.self_ckpt, "soft-labeler", cfg.stride)?)
    } else {
        None
    };
    let encoder = match (&theta_self, cfg.init_from_self) {
        (Some(t), true) => t.clone(),
        _ => EncoderParams::init(cfg.seed, &cfg.encoder_config())?,
    };
    let mut state = EncoderState::new(encoder, cfg.seed, cfg.mapping()?.window().len());
    let mut reports = Vec::new();
    for (step, idx) in schedule(cfg).iter().enumerate() {
        let (synth, real) = match cfg.stage {
            Stage::PretrainSelf => (Vec::new(), prepare(cfg, Domain::Synthetic, idx, step, 0)?),
            _ => (
                if losses.kl || losses.adv {
                    prepare(cfg, Domain::Synthetic, idx, step, 0)?
                } else {
                    Vec::new()
                },
                if losses.rec || losses.adv {
                    prepare(cfg, Domain::Real, idx, step, 1)?
                } else {
                    Vec::new()
                },
            ),
        };
        let self_feats = match (&theta_self, losses.kl && soft) {
            (Some(t), true) => {
                let frames: Vec<&Image> = synth.iter().map(|p| &p.lab2).collect();
                Some(encode_batch(t, &frames)?)
            }
            _ => None,
        };
        let r = encoder_step(cfg, &mut state, &synth, &real, self_feats.as_deref(), step).map_err(diverged(step))?;
        sink(&r)?;
        reports.push(r);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let disc = losses.adv.then_some(&state.disc);
            save_encoder_ckpt(&step_dir(out, step + 1), cfg, &state.encoder, disc, step + 1)?;
        }
    }
    let final_dir = out.join(FINAL_CKPT);
    save_encoder_ckpt(&final_dir, cfg, &state.encoder, losses.adv.then_some(&state.disc), reports.len())?;
    Ok(StageOutput {
        checkpoint: final_dir,
        reports,
    })
}

/// One distillation step on Lab pairs against the teacher's maps.
pub fn distill_step(
    cfg: &TrainConfig,
    student: &mut StudentParams<f32>,
    adam: &mut AdamState<f32>,
    pairs: &[(Image, Image, ProbMap<f32>)],
    step: usize,
) -> Result<LossReport> {
    let mut tape = Tape::<f32>::new();
    let vars = student.bind(&mut tape, true);
    let mut terms = Vec::with_capacity(pairs.len());
    let mut valid = 0;
    for (a, b, teacher) in pairs {
        let logits = student_logits_on_tape(&mut tape, student, &vars, a, b)?;
        let (lp, _) = student_outputs_on_tape(&mut tape, logits, &student.config)?;
        terms.push(distill_loss(&mut tape, lp, teacher)?);
        valid += teacher.h() * teacher.w();
    }
    let loss = mean_terms(&mut tape, &terms)?.ok_or_else(|| Error::invalid("empty distillation batch"))?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Diverged { step, what: "distillation loss" });
    }
    let grads = tape.backward(loss)?;
    let shapes: Vec<Vec<usize>> = student.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let g: Vec<Tensor<f32>> = vars.iter().zip(&shapes).map(|(v, s)| grads.get_or_zeros(*v, s)).collect();
    if g.iter().any(|t| !t.all_finite()) {
        return Err(Error::Diverged { step, what: "gradient" });
    }
    let lr = if cfg.cosine {
        cosine_lr(cfg.lr, step, cfg.total_steps())
    } else {
        cfg.lr
    };
    let grefs: Vec<&Tensor<f32>> = g.iter().collect();
    let mut params = student.tensors_mut();
    adam_step(&mut params, &grefs, adam, &AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, lr)?;
    Ok(LossReport {
        step,
        kl: value,
        total: value,
        valid,
        ..LossReport::default()
    })
}

fn train_student(cfg: &TrainConfig, out: &Path, sink: &mut dyn FnMut(&LossReport) -> Result<()>) -> Result<StageOutput> {
    let teacher = load_prerequisite(&cfg.teacher_ckpt, "teacher", cfg.stride)?;
    let mapping = cfg.mapping()?;
    let mut student = StudentParams::from_teacher(&teacher, cfg.student_config(), cfg.seed)?;
    let mut adam = AdamState::new(student.named().into_iter().map(|(_, t)| t));
    let mut reports = Vec::new();
    for (step, idx) in schedule(cfg).iter().enumerate() {
        let mut batch = Vec::with_capacity(idx.len());
        for &i in idx {
            let pair = training_pair(&cfg.generator, cfg.seed, Domain::Real, i)?;
            let a = rgb_to_lab(&pair.frame1)?;
            let b = rgb_to_lab(&pair.frame2)?;
            let tmap = local_correlation(&encode(&teacher, &a)?, &encode(&teacher, &b)?, &mapping)?;
            batch.push((a, b, tmap));
        }
        let r = distill_step(cfg, &mut student, &mut adam, &batch, step).map_err(diverged(step))?;
        sink(&r)?;
        reports.push(r);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            save_student(&step_dir(out, step + 1), cfg, &student, step + 1)?;
        }
    }
    let final_dir = out.join(FINAL_CKPT);
    save_student(&final_dir, cfg, &student, reports.len())?;
    Ok(StageOutput {
        checkpoint: final_dir,
        reports,
    })
}

fn save_student(dir: &Path, cfg: &TrainConfig, s: &StudentParams<f32>, step: usize) -> Result<()> {
    let mut meta = s.meta();
    meta.push(("stage".into(), cfg.stage.to_string()));
    meta.push(("seed".into(), cfg.seed.to_string()));
    meta.push(("step".into(), step.to_string()));
    save_checkpoint(dir, &meta, &s.named())
}

/// Loads a student checkpoint directory.
pub fn load_student(dir: &Path) -> Result<StudentParams<f32>> {
    StudentParams::from_checkpoint(&load_checkpoint(dir)?)
}

#[cfg(test)]
mod tests;
