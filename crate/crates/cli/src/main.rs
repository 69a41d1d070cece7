use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pixcorr::coarse2fine::StudentParams;
use pixcorr::correspondence::{export_prob_map, local_correlation};
use pixcorr::data::{load_clip, read_label_map, rgb_to_lab, save_clip, write_flow, write_label_map, write_mask, write_ppm, Domain};
use pixcorr::encoder::{encode, EncoderConfig, EncoderParams};
use pixcorr::inference::{propagate_mask, read_queries, read_tracks, track_points, write_tracks, PointTrack};
use pixcorr::metrics::{boundary_f, delta_avg, format_reports, jaccard, pck, Aggregation, VideoTracks, DELTA_THRESHOLDS};
use pixcorr::numerics::io::save_tensor;
use pixcorr::trainer::config::{merge_pairs, read_kv_file, set_generator_key};
use pixcorr::trainer::{bench_matching, eval_checkpoint, load_encoder, run_stage, stream_rng, training_pair, EvalConfig, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "pixcorr", version, about = "Dense pixel correspondence: training, tracking and evaluation")]
struct Cli {
    /// Seed for data generation and training (overrides the `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin the worker pool to one thread unless --threads is given.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat key=value config file; positional key=value overrides win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file, depending on the verb.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Overrides {
    /// key=value settings applied after --config.
    #[arg(value_name = "KEY=VALUE")]
    kv: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write synthetic or jittered pairs (frames, flow, covered mask) and clips.
    GenData(Overrides),
    /// Run a training stage (pretrain-self or joint; see `stage`).
    Train(Overrides),
    /// Distill a coarse-to-fine student from a teacher encoder checkpoint.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Track query points through a clip.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Propagate a first-frame label map through a clip.
    PropagateMask {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Number of classes; defaults to the largest label plus one.
        #[arg(long)]
        classes: Option<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Score a checkpoint on held-out data, or score track/mask files.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "gt_tracks")]
        pred_tracks: Vec<PathBuf>,
        #[arg(long)]
        gt_tracks: Vec<PathBuf>,
        #[arg(long, requires = "gt_masks")]
        pred_masks: Option<PathBuf>,
        #[arg(long)]
        gt_masks: Option<PathBuf>,
        /// PCK threshold relative to sqrt(A), with A = --pck-scale.
        #[arg(long, default_value_t = 0.1)]
        pck_alpha: f64,
        #[arg(long)]
        pck_scale: Option<f64>,
        /// Boundary tolerance in pixels.
        #[arg(long, default_value_t = 2)]
        tolerance: usize,
        #[command(flatten)]
        o: Overrides,
    },
    /// Write per-frame features (and optionally consecutive probability maps).
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        prob_maps: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Time full local matching against the coarse-to-fine student.
    Bench {
        /// Teacher encoder checkpoint; a seeded random encoder otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Student checkpoint; derived from the teacher otherwise.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[command(flatten)]
        o: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("error kind=usage message={:?}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.chain().find_map(|c| c.downcast_ref::<pixcorr::Error>()).map_or("runtime", |p| p.kind());
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error kind={kind} message={:?}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.or(cli.deterministic.then_some(1));
    if let Some(n) = threads {
        pixcorr::init_thread_pool(n)?;
    }
    let g = Global {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
    };
    match cli.verb {
        Verb::GenData(o) => gen_data(&g, &o),
        Verb::Train(o) => train(&g, &o, None),
        Verb::Distill { teacher, o } => train(&g, &o, Some(teacher)),
        Verb::Track { ckpt, clip, points, o } => track(&g, &o, &ckpt, &clip, &points),
        Verb::PropagateMask { ckpt, clip, mask, classes, o } => mask_verb(&g, &o, &ckpt, &clip, &mask, classes),
        Verb::Eval {
            ckpt,
            pred_tracks,
            gt_tracks,
            pred_masks,
            gt_masks,
            pck_alpha,
            pck_scale,
            tolerance,
            o,
        } => {
            let files = FileEval {
                pred_tracks,
                gt_tracks,
                pred_masks,
                gt_masks,
                pck_alpha,
                pck_scale,
                tolerance,
            };
            eval(&g, &o, ckpt, files)
        }
        Verb::ExportFeatures { ckpt, clip, prob_maps, o } => export_features(&g, &o, &ckpt, &clip, prob_maps),
        Verb::Bench { ckpt, student, reps, o } => bench(&g, &o, ckpt, student, reps),
    }
}

struct Global {
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Global {
    /// Config file pairs followed by positional overrides.
    fn pairs(&self, o: &Overrides) -> Result<Vec<(String, String)>> {
        let base = match &self.config {
            Some(p) => read_kv_file(p)?,
            None => Vec::new(),
        };
        let mut over = Vec::with_capacity(o.kv.len());
        for item in &o.kv {
            let (k, v) = item
                .split_once('=')
                .with_context(|| format!("expected key=value, got '{item}'"))?;
            over.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(merge_pairs(&base, &over))
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required for this verb")
    }

    fn write_or_print(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn eval_config(pairs: &[(String, String)]) -> Result<EvalConfig> {
    Ok(EvalConfig::from_pairs(pairs)?)
}

fn gen_data(g: &Global, o: &Overrides) -> Result<()> {
    let out = g.out()?;
    let mut gen = pixcorr::data::GeneratorConfig::default();
    let (mut count, mut clips, mut clip_len, mut points) = (8usize, 0usize, 8usize, 16usize);
    let mut domain = Domain::Synthetic;
    let mut seed = 0u64;
    for (k, v) in g.pairs(o)? {
        let num = || v.parse::<usize>().with_context(|| format!("bad value '{v}' for key '{k}'"));
        match k.as_str() {
            "count" => count = num()?,
            "clips" => clips = num()?,
            "clip_len" => clip_len = num()?,
            "points" => points = num()?,
            "seed" => seed = v.parse().with_context(|| format!("bad seed '{v}'"))?,
            "domain" => domain = v.parse()?,
            _ => {
                if !set_generator_key(&mut gen, &k, &v)? {
                    bail!(pixcorr::Error::Config(format!("unknown key '{k}'")));
                }
            }
        }
    }
    let seed = g.seed.unwrap_or(seed);
    gen.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count {
        let pair = training_pair(&gen, seed, domain, i)?;
        let dir = out.join(format!("pair_{i:05}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_ppm(&dir.join("frame1.ppm"), &pair.frame1)?;
        write_ppm(&dir.join("frame2.ppm"), &pair.frame2)?;
        if let (Some(flow), Some(cov)) = (&pair.gt_flow, &pair.covered) {
            write_flow(&dir.join("flow.cpxf"), flow)?;
            write_mask(&dir.join("covered.pgm"), gen.size, gen.size, cov)?;
        }
    }
    for c in 0..clips {
        let mut rng = stream_rng(seed, 0xC11B, c as u64);
        let clip = pixcorr::data::gen_clip(&gen, clip_len, points, domain, &mut rng)?;
        let dir = out.join(format!("clip_{c:05}"));
        save_clip(&dir.join("frames"), &clip.frames)?;
        let queries: String = clip
            .tracks
            .iter()
            .map(|t| format!("{},{}\n", t.positions[0].0, t.positions[0].1))
            .collect();
        std::fs::write(dir.join("queries.txt"), queries).context("writing queries")?;
        let gt: Vec<PointTrack> = clip
            .tracks
            .iter()
            .map(|t| PointTrack {
                positions: t.positions.clone(),
                visible: t.visible.clone(),
            })
            .collect();
        write_tracks(&dir.join("gt_tracks.txt"), &gt)?;
        let masks = dir.join("masks");
        std::fs::create_dir_all(&masks).context("creating mask dir")?;
        if let Some(layer) = (1..clip.scene.layers.len()).next() {
            for t in 0..clip_len {
                let m: Vec<u8> = clip.scene.layer_mask(layer, t as f32).iter().map(|&b| b as u8).collect();
                write_label_map(&masks.join(format!("mask_{t:05}.pgm")), gen.size, gen.size, &m)?;
            }
        }
    }
    println!("pairs={count} clips={clips} out={}", out.display());
    Ok(())
}

fn train(g: &Global, o: &Overrides, teacher: Option<Option<PathBuf>>) -> Result<()> {
    let out = g.out()?;
    let mut pairs = g.pairs(o)?;
    if let Some(s) = g.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = &teacher {
        pairs.push(("stage".into(), "distill".into()));
        if let Some(p) = t {
            pairs.push(("teacher_ckpt".into(), p.display().to_string()));
        }
    }
    let cfg = TrainConfig::from_pairs(&pairs)?;
    if teacher.is_none() && cfg.stage == Stage::Distill {
        bail!(pixcorr::Error::Config("use the distill verb for the distill stage".into()));
    }
    let res = run_stage(&cfg, out)?;
    let last = res.reports.last().map_or(0.0, |r| r.total);
    println!("stage={} steps={} final_total={last} checkpoint={}", cfg.stage, res.reports.len(), res.checkpoint.display());
    Ok(())
}

fn track(g: &Global, o: &Overrides, ckpt: &Path, clip: &Path, points: &Path) -> Result<()> {
    let cfg = eval_config(&g.pairs(o)?)?;
    let enc = load_encoder(ckpt)?;
    let frames = load_clip(clip)?;
    let queries = read_queries(points)?;
    let tracks = track_points(&enc, &frames, &queries, &cfg.propagation)?;
    let out = g.out()?;
    write_tracks(out, &tracks)?;
    println!("points={} frames={} out={}", tracks.len(), frames.len(), out.display());
    Ok(())
}

fn mask_verb(g: &Global, o: &Overrides, ckpt: &Path, clip: &Path, mask: &Path, classes: Option<usize>) -> Result<()> {
    let cfg = eval_config(&g.pairs(o)?)?;
    let enc = load_encoder(ckpt)?;
    let frames = load_clip(clip)?;
    let (_, _, labels) = read_label_map(mask)?;
    let k = classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) as usize + 1);
    let masks = propagate_mask(&enc, &frames, &labels, k, &cfg.propagation)?;
    let out = g.out()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
    for (t, m) in masks.iter().enumerate() {
        write_label_map(&out.join(format!("mask_{t:05}.pgm")), h, w, m)?;
    }
    println!("frames={} classes={k} out={}", masks.len(), out.display());
    Ok(())
}

struct FileEval {
    pred_tracks: Vec<PathBuf>,
    gt_tracks: Vec<PathBuf>,
    pred_masks: Option<PathBuf>,
    gt_masks: Option<PathBuf>,
    pck_alpha: f64,
    pck_scale: Option<f64>,
    tolerance: usize,
}

fn load_masks(dir: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let paths = pixcorr::data::io::clip_frame_paths(dir)?;
    if paths.is_empty() {
        bail!(pixcorr::Error::Format { path: dir.to_path_buf(), msg: "no PGM masks found".into() });
    }
    let mut out = Vec::with_capacity(paths.len());
    let (mut h, mut w) = (0, 0);
    for p in &paths {
        let (ph, pw, m) = read_label_map(p)?;
        (h, w) = (ph, pw);
        out.push(m);
    }
    Ok((h, w, out))
}

fn eval(g: &Global, o: &Overrides, ckpt: Option<PathBuf>, f: FileEval) -> Result<()> {
    let mut reports = Vec::new();
    if let Some(ck) = ckpt {
        let mut pairs = g.pairs(o)?;
        if let Some(s) = g.seed {
            pairs.push(("eval_seed".into(), s.to_string()));
        }
        reports.extend(eval_checkpoint(&ck, &eval_config(&pairs)?)?);
    }
    if !f.pred_tracks.is_empty() {
        if f.pred_tracks.len() != f.gt_tracks.len() {
            bail!(pixcorr::Error::Config("--pred-tracks and --gt-tracks counts differ".into()));
        }
        let mut videos = Vec::new();
        for (p, gt) in f.pred_tracks.iter().zip(&f.gt_tracks) {
            let (pred, gt) = (read_tracks(p)?, read_tracks(gt)?);
            let frames = gt.first().map_or(0, |t| t.positions.len());
            // frame 0 holds the queries and is not scored
            videos.push(VideoTracks {
                pred: pred.iter().map(|t| t.positions.iter().skip(1).copied().collect()).collect(),
                gt: gt.iter().map(|t| t.positions.iter().skip(1).copied().collect()).collect(),
                visible: gt.iter().map(|t| t.visible.iter().skip(1).copied().collect()).collect(),
                scale: vec![f.pck_scale.unwrap_or(1.0); frames.saturating_sub(1)],
            });
        }
        reports.push(delta_avg(&videos, &DELTA_THRESHOLDS, Aggregation::AllPoints)?);
        reports.push(delta_avg(&videos, &DELTA_THRESHOLDS, Aggregation::PerVideoMean)?);
        if f.pck_scale.is_some() {
            reports.push(pck(&videos, f.pck_alpha, Aggregation::AllPoints)?);
        }
    }
    if let (Some(pd), Some(gd)) = (&f.pred_masks, &f.gt_masks) {
        let (h, w, pred) = load_masks(pd)?;
        let (gh, gw, gt) = load_masks(gd)?;
        if (h, w) != (gh, gw) {
            bail!(pixcorr::Error::Config("mask extents differ".into()));
        }
        let objects = gt.iter().flatten().chain(pred.iter().flatten()).copied().max().unwrap_or(0).max(1);
        reports.push(jaccard(&pred, &gt, objects)?);
        reports.push(boundary_f(&pred, &gt, h, w, objects, f.tolerance)?);
    }
    if reports.is_empty() {
        bail!(pixcorr::Error::Config("nothing to evaluate: pass --ckpt or prediction/ground-truth files".into()));
    }
    g.write_or_print(&format_reports(&reports))
}

fn export_features(g: &Global, o: &Overrides, ckpt: &Path, clip: &Path, prob_maps: bool) -> Result<()> {
    let cfg = eval_config(&g.pairs(o)?)?;
    let enc = load_encoder(ckpt)?;
    let frames = load_clip(clip)?;
    let out = g.out()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let lab: Vec<_> = frames.iter().map(rgb_to_lab).collect::<pixcorr::Result<_>>()?;
    let feats: Vec<_> = lab.iter().map(|f| encode(&enc, f)).collect::<pixcorr::Result<_>>()?;
    for (t, f) in feats.iter().enumerate() {
        save_tensor(&out.join(format!("features_{t:05}.cpxt")), f)?;
    }
    if prob_maps {
        for t in 1..feats.len() {
            let p = local_correlation(&feats[t - 1], &feats[t], &cfg.propagation.mapping)?;
            export_prob_map(&out.join(format!("probmap_{:05}_{t:05}.cpxt", t - 1)), &p)?;
        }
    }
    println!("frames={} out={}", feats.len(), out.display());
    Ok(())
}

fn bench(g: &Global, o: &Overrides, ckpt: Option<PathBuf>, student: Option<PathBuf>, reps: usize) -> Result<()> {
    let mut pairs = g.pairs(o)?;
    if let Some(s) = g.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    let cfg = TrainConfig::from_pairs(&pairs)?;
    let teacher = match &ckpt {
        Some(p) => load_encoder(p)?,
        None => EncoderParams::init(cfg.seed, &EncoderConfig { channels: cfg.channels, ..EncoderConfig::with_stride(cfg.stride) })?,
    };
    let student = match &student {
        Some(p) => StudentParams::from_checkpoint(&pixcorr::params::load_checkpoint(p)?)?,
        None => StudentParams::from_teacher(&teacher, cfg.student_config(), cfg.seed)?,
    };
    let mapping = cfg.mapping()?;
    let pair = training_pair(&cfg.generator, cfg.seed, Domain::Real, 0)?;
    let (a, b) = (rgb_to_lab(&pair.frame1)?, rgb_to_lab(&pair.frame2)?);
    let r = bench_matching(&teacher, &student, &mapping, &a, &b, reps)?;
    let s = cfg.generator.size;
    g.write_or_print(&format!(
        "size={s}\nfine_radius={}\ncoarse_radius={}\nupscale={}\nfull_match_ms={:.4}\nstudent_match_ms={:.4}\nmatch_speed_ratio={:.4}\nfull_end_to_end_ms={:.4}\nstudent_end_to_end_ms={:.4}\nend_to_end_speed_ratio={:.4}\n",
        cfg.radius,
        cfg.coarse_radius,
        cfg.upscale,
        r.full_match_ms,
        r.student_match_ms,
        r.match_speed_ratio(),
        r.full_end_to_end_ms,
        r.student_end_to_end_ms,
        r.end_to_end_speed_ratio(),
    ))
}
