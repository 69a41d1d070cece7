//! Flat `key=value` configuration for training and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::coarse2fine::StudentConfig;
use crate::correspondence::MappingConfig;
use crate::data::{Domain, GeneratorConfig, TextureMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::inference::PropagationConfig;
use crate::losses::{LabelKind, SoftSampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PretrainSelf,
    Joint,
    Distill,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PretrainSelf => "pretrain-self",
            Stage::Joint => "joint",
            Stage::Distill => "distill",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain-self" => Ok(Stage::PretrainSelf),
            "joint" => Ok(Stage::Joint),
            "distill" => Ok(Stage::Distill),
            _ => Err(Error::Config(format!("unknown stage '{s}' (pretrain-self|joint|distill)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::Config(format!("unknown profile '{s}' (desk|full)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        })
    }
}

/// Which objective terms contribute to the joint-stage total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSet {
    pub kl: bool,
    pub rec: bool,
    pub adv: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet { kl: true, rec: true, adv: true };
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.kl, "kl"), (self.rec, "rec"), (self.adv, "adv")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LossSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut set = LossSet { kl: false, rec: false, adv: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "kl" => set.kl = true,
                "rec" => set.rec = true,
                "adv" => set.adv = true,
                _ => return Err(Error::Config(format!("unknown loss '{part}' (kl|rec|adv)"))),
            }
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelChoice {
    Dirac,
    Gaussian,
    Soft,
    SoftBilinear,
}

impl FromStr for LabelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirac" => Ok(LabelChoice::Dirac),
            "gaussian" => Ok(LabelChoice::Gaussian),
            "soft" => Ok(LabelChoice::Soft),
            "soft-bilinear" => Ok(LabelChoice::SoftBilinear),
            _ => Err(Error::Config(format!("unknown label '{s}' (dirac|gaussian|soft|soft-bilinear)"))),
        }
    }
}

impl fmt::Display for LabelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelChoice::Dirac => "dirac",
            LabelChoice::Gaussian => "gaussian",
            LabelChoice::Soft => "soft",
            LabelChoice::SoftBilinear => "soft-bilinear",
        })
    }
}

/// Everything one training run needs. Build with [`TrainConfig::desk`] or
/// [`TrainConfig::full`] and override fields, or parse `key=value` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub profile: Profile,
    pub seed: u64,
    pub losses: LossSet,
    pub label: LabelChoice,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub radius: usize,
    pub tau: f64,
    /// Temperature for soft labels built from θ_self; `None` uses `tau`.
    pub label_tau: Option<f64>,
    pub lambda: f64,
    pub stride: usize,
    pub channels: usize,
    /// L2-normalize encoder features before correlation.
    pub normalize: bool,
    pub coarse_radius: usize,
    /// Temperature of the student's coarse map; `None` uses `tau`.
    pub coarse_tau: Option<f64>,
    pub upscale: usize,
    pub batch: usize,
    pub pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub cosine: bool,
    pub dropout: f64,
    pub init_from_self: bool,
    pub checkpoint_every: usize,
    pub self_ckpt: Option<PathBuf>,
    pub teacher_ckpt: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            stage: Stage::Joint,
            profile: Profile::Desk,
            seed: 0,
            losses: LossSet::ALL,
            label: LabelChoice::Soft,
            sigma_u: 1.0,
            sigma_v: 1.0,
            radius: 6,
            tau: 0.1,
            label_tau: None,
            lambda: 1.0,
            stride: 2,
            channels: 32,
            normalize: true,
            coarse_radius: 3,
            coarse_tau: None,
            upscale: 4,
            batch: 1,
            pairs: 2000,
            epochs: 1,
            lr: 1e-3,
            cosine: true,
            dropout: 0.2,
            init_from_self: false,
            checkpoint_every: 0,
            self_ckpt: None,
            teacher_ckpt: None,
            generator: GeneratorConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            radius: 24,
            coarse_radius: 6,
            tau: 1.0,
            stride: 4,
            batch: 16,
            pairs: 20000,
            epochs: 30,
            generator: GeneratorConfig {
                size: 256,
                sprite_size: (40, 110),
                max_disp: 48,
                ..GeneratorConfig::default()
            },
            ..Self::desk()
        }
    }

    /// Parses `key=value` pairs; `profile` is applied first wherever it appears.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.parse::<Profile>())
            .transpose()?
            .unwrap_or(Profile::Desk);
        let mut cfg = match profile {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        };
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => self.profile = value.parse()?,
            "stage" => self.stage = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "losses" => self.losses = value.parse()?,
            "label" => self.label = value.parse()?,
            "sigma" => {
                self.sigma_u = parse(key, value)?;
                self.sigma_v = self.sigma_u;
            }
            "sigma_u" => self.sigma_u = parse(key, value)?,
            "sigma_v" => self.sigma_v = parse(key, value)?,
            "radius" => self.radius = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "coarse_tau" => {
                self.coarse_tau = if value.trim().is_empty() { None } else { Some(parse(key, value)?) }
            }
            "label_tau" => {
                self.label_tau = if value.trim().is_empty() { None } else { Some(parse(key, value)?) }
            }
            "lambda" => self.lambda = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "normalize" => self.normalize = parse(key, value)?,
            "coarse_radius" => self.coarse_radius = parse(key, value)?,
            "upscale" => self.upscale = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "pairs" => self.pairs = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "schedule" => {
                self.cosine = match value {
                    "cosine" => true,
                    "constant" => false,
                    _ => return Err(Error::Config(format!("unknown schedule '{value}' (cosine|constant)"))),
                }
            }
            "dropout" => self.dropout = parse(key, value)?,
            "init" => {
                self.init_from_self = match value {
                    "self" => true,
                    "random" => false,
                    _ => return Err(Error::Config(format!("unknown init '{value}' (random|self)"))),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "self_ckpt" => self.self_ckpt = non_empty(value),
            "teacher_ckpt" => self.teacher_ckpt = non_empty(value),
            _ => {
                if !set_generator_key(&mut self.generator, key, value)? {
                    return Err(Error::Config(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.mapping()?;
        self.label_mapping()?;
        self.encoder_config().validate()?;
        if self.stage == Stage::Distill {
            self.student_config().validate()?;
        }
        if self.batch == 0 || self.pairs == 0 || self.epochs == 0 {
            return Err(Error::Config("batch, pairs and epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.sigma_u > 0.0 && self.sigma_v > 0.0) {
            return Err(Error::Config("gaussian sigmas must be positive".into()));
        }
        if !self.generator.size.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of stride {}",
                self.generator.size, self.stride
            )));
        }
        if self.stage == Stage::Joint && !(self.losses.kl || self.losses.rec || self.losses.adv) {
            return Err(Error::Config("joint stage needs at least one loss".into()));
        }
        Ok(())
    }

    pub fn mapping(&self) -> Result<MappingConfig> {
        MappingConfig::new(self.radius, self.tau).map_err(|e| Error::Config(e.to_string()))
    }

    /// Mapping used to build soft labels from θ_self features.
    pub fn label_mapping(&self) -> Result<MappingConfig> {
        MappingConfig::new(self.radius, self.label_tau.unwrap_or(self.tau)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            normalize: self.normalize,
            ..EncoderConfig::with_stride(self.stride)
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            coarse_radius: self.coarse_radius,
            fine_radius: self.radius,
            upscale: self.upscale,
            tau: self.coarse_tau.unwrap_or(self.tau),
            ..StudentConfig::default()
        }
    }

    pub fn label_kind(&self) -> LabelKind {
        match self.label {
            LabelChoice::Dirac => LabelKind::Dirac,
            LabelChoice::Gaussian => LabelKind::Gaussian {
                sigma_u: self.sigma_u,
                sigma_v: self.sigma_v,
            },
            LabelChoice::Soft => LabelKind::Soft(SoftSampling::Nearest),
            LabelChoice::SoftBilinear => LabelKind::Soft(SoftSampling::Bilinear),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.pairs.div_ceil(self.batch)
    }

    /// Canonical `key=value` listing that parses back to the same config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let g = &self.generator;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut out = vec![
            ("profile", self.profile.to_string()),
            ("stage", self.stage.to_string()),
            ("seed", self.seed.to_string()),
            ("losses", self.losses.to_string()),
            ("label", self.label.to_string()),
            ("sigma_u", self.sigma_u.to_string()),
            ("sigma_v", self.sigma_v.to_string()),
            ("radius", self.radius.to_string()),
            ("tau", self.tau.to_string()),
            ("label_tau", self.label_tau.map_or(String::new(), |t| t.to_string())),
            ("lambda", self.lambda.to_string()),
            ("stride", self.stride.to_string()),
            ("channels", self.channels.to_string()),
            ("normalize", self.normalize.to_string()),
            ("coarse_radius", self.coarse_radius.to_string()),
            ("coarse_tau", self.coarse_tau.map_or(String::new(), |t| t.to_string())),
            ("upscale", self.upscale.to_string()),
            ("batch", self.batch.to_string()),
            ("pairs", self.pairs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("schedule", if self.cosine { "cosine" } else { "constant" }.to_string()),
            ("dropout", self.dropout.to_string()),
            ("init", if self.init_from_self { "self" } else { "random" }.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("self_ckpt", path(&self.self_ckpt)),
            ("teacher_ckpt", path(&self.teacher_ckpt)),
            ("image_size", g.size.to_string()),
            ("sprites_min", g.sprite_count.0.to_string()),
            ("sprites_max", g.sprite_count.1.to_string()),
            ("sprite_size_min", g.sprite_size.0.to_string()),
            ("sprite_size_max", g.sprite_size.1.to_string()),
            ("max_disp", g.max_disp.to_string()),
            ("background_motion", g.background_motion.to_string()),
            ("subpixel", g.subpixel.to_string()),
            ("texture", match g.texture {
                TextureMode::Noise => "noise",
                TextureMode::Gradient => "gradient",
            }
            .to_string()),
            ("jitter", g.jitter.to_string()),
            ("distortion", g.distortion.to_string()),
            ("gap", g.gap.to_string()),
        ];
        out.retain(|(_, v)| !v.is_empty());
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Held-out evaluation settings. The held-out stream depends only on
/// `eval_seed`, never on the training seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub eval_seed: u64,
    pub eval_pairs: usize,
    pub eval_clips: usize,
    pub clip_len: usize,
    pub points: usize,
    /// Domain of the held-out tracking clips.
    pub track_domain: Domain,
    pub propagation: PropagationConfig,
    pub generator: GeneratorConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_seed: 0x5EED_E7A1,
            eval_pairs: 32,
            eval_clips: 8,
            clip_len: 8,
            points: 16,
            track_domain: Domain::Real,
            propagation: PropagationConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl EvalConfig {
    /// Eval settings matching a training config's geometry.
    pub fn for_training(cfg: &TrainConfig) -> Result<Self> {
        let mut e = Self::default();
        e.generator = cfg.generator.clone();
        e.propagation.mapping = cfg.mapping()?;
        Ok(e)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "eval_pairs" => self.eval_pairs = parse(key, value)?,
            "eval_clips" => self.eval_clips = parse(key, value)?,
            "clip_len" => self.clip_len = parse(key, value)?,
            "points" => self.points = parse(key, value)?,
            "track_domain" => self.track_domain = value.parse()?,
            "topk" => self.propagation.topk = parse(key, value)?,
            "memory" => self.propagation.memory = parse(key, value)?,
            "heatmap_sigma" => self.propagation.heatmap_sigma = parse(key, value)?,
            "radius" => self.propagation.mapping.radius = parse(key, value)?,
            "tau" => self.propagation.mapping.tau = parse(key, value)?,
            other => {
                if !set_generator_key(&mut self.generator, other, value)? {
                    return Err(Error::Config(format!("unknown eval key '{other}'")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.propagation.validate()?;
        if self.clip_len < 2 {
            return Err(Error::Config("clip_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Applies a generator key; returns false when `key` is not one.
pub fn set_generator_key(g: &mut GeneratorConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "image_size" => g.size = parse(key, value)?,
        "sprites_min" => g.sprite_count.0 = parse(key, value)?,
        "sprites_max" => g.sprite_count.1 = parse(key, value)?,
        "sprite_size_min" => g.sprite_size.0 = parse(key, value)?,
        "sprite_size_max" => g.sprite_size.1 = parse(key, value)?,
        "max_disp" => g.max_disp = parse(key, value)?,
        "background_motion" => g.background_motion = parse(key, value)?,
        "subpixel" => g.subpixel = parse(key, value)?,
        "texture" => {
            g.texture = match value {
                "noise" => TextureMode::Noise,
                "gradient" => TextureMode::Gradient,
                _ => return Err(Error::Config(format!("unknown texture '{value}' (noise|gradient)"))),
            }
        }
        "jitter" => g.jitter = parse(key, value)?,
        "distortion" => g.distortion = parse(key, value)?,
        "gap" => g.gap = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn non_empty(v: &str) -> Option<PathBuf> {
    (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()))
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(origin, format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_text(&text, path)
}

/// Splits `pairs` into those accepted by `accept` and the rest.
pub fn partition_keys(pairs: &[(String, String)], accept: impl Fn(&str) -> bool) -> (Vec<(String, String)>, Vec<(String, String)>) {
    pairs.iter().cloned().partition(|(k, _)| accept(k))
}

pub fn render_pairs(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

/// Merges later pairs over earlier ones, keeping first-seen key order.
pub fn merge_pairs(base: &[(String, String)], over: &[(String, String)]) -> Vec<(String, String)> {
    let mut map: BTreeMap<String, usize> = BTreeMap::new();
    let mut out: Vec<(String, String)> = Vec::new();
    for (k, v) in base.iter().chain(over) {
        match map.get(k) {
            Some(&i) => out[i].1 = v.clone(),
            None => {
                map.insert(k.clone(), out.len());
                out.push((k.clone(), v.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(s: &[(&str, &str)]) -> Vec<(String, String)> {
        s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn desk_defaults_and_overrides() {
        let cfg = TrainConfig::from_pairs(&kv(&[("seed", "7"), ("losses", "kl"), ("label", "dirac")])).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.losses, LossSet { kl: true, rec: false, adv: false });
        assert_eq!(cfg.label_kind(), LabelKind::Dirac);
        assert_eq!((cfg.radius, cfg.stride, cfg.generator.size), (6, 2, 64));
        assert_eq!(cfg.total_steps(), 2000);
    }

    #[test]
    fn profile_applies_before_other_keys() {
        let cfg = TrainConfig::from_pairs(&kv(&[("radius", "20"), ("profile", "full")])).unwrap();
        assert_eq!(cfg.radius, 20);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.generator.size, 256);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(TrainConfig::from_pairs(&kv(&[("radiu", "3")])), Err(Error::Config(_))));
        assert!(TrainConfig::from_pairs(&kv(&[("radius", "x")])).is_err());
        assert!(TrainConfig::from_pairs(&kv(&[("losses", "kl,foo")])).is_err());
        assert!(TrainConfig::from_pairs(&kv(&[("losses", "")])).is_err());
        assert!(TrainConfig::from_pairs(&kv(&[("dropout", "1")])).is_err());
        assert!(EvalConfig::from_pairs(&kv(&[("bogus", "1")])).is_err());
        let e = EvalConfig::from_pairs(&kv(&[("topk", "5"), ("image_size", "32")])).unwrap();
        assert_eq!((e.propagation.topk, e.generator.size), (5, 32));
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.stage = Stage::Distill;
        cfg.teacher_ckpt = Some("t/ck".into());
        cfg.label = LabelChoice::SoftBilinear;
        cfg.losses = LossSet { kl: true, rec: false, adv: true };
        cfg.normalize = false;
        cfg.label_tau = Some(0.03);
        assert_eq!(TrainConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
        assert!(!cfg.encoder_config().normalize);
        assert_eq!(cfg.label_mapping().unwrap().tau, 0.03);
        cfg.label_tau = None;
        assert_eq!(TrainConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
        assert_eq!(cfg.label_mapping().unwrap().tau, cfg.tau);
    }

    #[test]
    fn kv_text_parsing() {
        let p = parse_kv_text("# c\nseed = 3\n\nlr=0.01 # trailing\n", Path::new("x")).unwrap();
        assert_eq!(p, kv(&[("seed", "3"), ("lr", "0.01")]));
        assert!(parse_kv_text("novalue\n", Path::new("x")).is_err());
        let m = merge_pairs(&kv(&[("a", "1"), ("b", "2")]), &kv(&[("a", "3"), ("c", "4")]));
        assert_eq!(m, kv(&[("a", "3"), ("b", "2"), ("c", "4")]));
    }
}
