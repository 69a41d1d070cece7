use super::*;
use crate::losses::round_offset;

fn tiny(stage: Stage) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.stage = stage;
    cfg.generator.size = 32;
    cfg.generator.sprite_size = (8, 14);
    cfg.generator.max_disp = 4;
    cfg.radius = 4;
    cfg.coarse_radius = 2;
    cfg.upscale = 2;
    cfg.channels = 8;
    cfg.pairs = 3;
    cfg.epochs = 1;
    cfg
}

fn small_eval(cfg: &TrainConfig) -> EvalConfig {
    let mut e = EvalConfig::for_training(cfg).unwrap();
    e.eval_pairs = 2;
    e.eval_clips = 1;
    e.clip_len = 3;
    e.points = 4;
    e
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn avg_pool_and_covered_downsampling() {
    let img = Tensor::from_fn(&[4, 4, 1], |i| i as f32);
    let p = avg_pool(&img, 2).unwrap();
    assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    let mut cov = vec![false; 16];
    cov[5] = true;
    assert_eq!(downsample_covered(&cov, 4, 4, 2), vec![true, false, false, false]);
    assert!(avg_pool(&img, 3).is_err());
}

#[test]
fn stream_is_keyed_by_seed_tag_and_index() {
    let g = GeneratorConfig::default();
    let a = training_pair(&g, 1, Domain::Synthetic, 0).unwrap();
    let b = training_pair(&g, 1, Domain::Synthetic, 0).unwrap();
    let c = training_pair(&g, 1, Domain::Synthetic, 1).unwrap();
    let d = training_pair(&g, 2, Domain::Synthetic, 0).unwrap();
    assert_eq!(a.frame1, b.frame1);
    assert_ne!(a.frame1, c.frame1);
    assert_ne!(a.frame1, d.frame1);
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Stage::Joint);
    cfg.label = LabelChoice::Dirac;
    cfg.checkpoint_every = 2;
    let a = run_stage(&cfg, &dir.path().join("a")).unwrap();
    let b = run_stage(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(dir_bytes(&dir.path().join("a")), dir_bytes(&dir.path().join("b")));
    assert!(dir.path().join("a/step-000002/manifest.txt").is_file());
    let log = std::fs::read_to_string(dir.path().join("a").join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 1 + cfg.total_steps());
    assert!(log.starts_with(LossReport::HEADER));
    cfg.seed = 1;
    let c = run_stage(&cfg, &dir.path().join("c")).unwrap();
    assert_ne!(a.reports, c.reports);
}

#[test]
fn soft_labels_require_a_soft_labeler_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Stage::Joint);
    assert!(matches!(run_stage(&cfg, dir.path()), Err(Error::MissingPrerequisite(_))));
    let mut d = tiny(Stage::Distill);
    d.teacher_ckpt = Some(dir.path().join("nope"));
    assert!(matches!(run_stage(&d, dir.path()), Err(Error::MissingPrerequisite(_))));
}

#[test]
fn soft_labeler_is_untouched_by_joint_training() {
    let dir = tempfile::tempdir().unwrap();
    let pre = run_stage(&tiny(Stage::PretrainSelf), &dir.path().join("self")).unwrap();
    assert!(pre.reports.iter().all(|r| r.kl == 0.0 && r.adv == 0.0 && r.rec > 0.0));
    let before = dir_bytes(&pre.checkpoint);
    let theta_before = load_encoder(&pre.checkpoint).unwrap();
    let mut cfg = tiny(Stage::Joint);
    cfg.self_ckpt = Some(pre.checkpoint.clone());
    let joint = run_stage(&cfg, &dir.path().join("joint")).unwrap();
    assert!(joint.reports.iter().all(|r| r.total.is_finite()));
    assert_eq!(dir_bytes(&pre.checkpoint), before);
    assert_eq!(load_encoder(&pre.checkpoint).unwrap(), theta_before);
    assert_ne!(load_encoder(&joint.checkpoint).unwrap(), theta_before);
}

fn step_with(losses: LossSet, label: LabelChoice) -> (LossReport, EncoderState, EncoderState, Vec<PreparedPair>) {
    let mut cfg = tiny(Stage::Joint);
    cfg.losses = losses;
    cfg.label = label;
    let synth = prepare(&cfg, Domain::Synthetic, &[0], 0, 0).unwrap();
    let real = prepare(&cfg, Domain::Real, &[0], 0, 1).unwrap();
    let enc = EncoderParams::init(3, &cfg.encoder_config()).unwrap();
    let state0 = EncoderState::new(enc, 3, cfg.mapping().unwrap().window().len());
    let mut state = state0.clone();
    let r = encoder_step(&cfg, &mut state, &synth, &real, None, 0).unwrap();
    (r, state0, state, synth)
}

#[test]
fn ablation_matrix_only_enabled_terms_act() {
    for (kl, rec, adv) in [
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, false),
        (true, true, true),
    ] {
        let (r, s0, s1, _) = step_with(LossSet { kl, rec, adv }, LabelChoice::Dirac);
        assert_eq!(r.kl != 0.0, kl, "{r:?}");
        assert_eq!(r.rec != 0.0, rec, "{r:?}");
        assert_eq!(r.adv != 0.0, adv, "{r:?}");
        assert_ne!(s0.encoder, s1.encoder);
        assert_eq!(s0.disc == s1.disc, !adv);
    }
}

#[test]
fn kl_valid_count_matches_independent_filter() {
    let (r, _, _, synth) = step_with(LossSet { kl: true, rec: false, adv: false }, LabelChoice::Dirac);
    let p = &synth[0];
    let flow = p.flow.as_ref().unwrap();
    let cov = p.covered.as_ref().unwrap();
    let (h, w) = (flow.h() as isize, flow.w() as isize);
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = flow.get(y as usize, x as usize);
            let (ru, rv) = (round_offset(du), round_offset(dv));
            let inside = (0..w).contains(&(x + ru)) && (0..h).contains(&(y + rv));
            if !cov[(y * w + x) as usize] && ru.abs() <= 4 && rv.abs() <= 4 && inside {
                n += 1;
            }
        }
    }
    assert!(n > 0);
    assert_eq!(r.valid, n);
}

#[test]
fn divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Stage::PretrainSelf);
    cfg.lr = 1e30;
    cfg.cosine = false;
    cfg.pairs = 3;
    match run_stage(&cfg, dir.path()) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn distillation_produces_a_loadable_student() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = tiny(Stage::Joint);
    t.label = LabelChoice::Dirac;
    t.pairs = 1;
    let teacher = run_stage(&t, &dir.path().join("teacher")).unwrap();
    let mut d = tiny(Stage::Distill);
    d.pairs = 2;
    d.teacher_ckpt = Some(teacher.checkpoint.clone());
    let out = run_stage(&d, &dir.path().join("student")).unwrap();
    assert!(out.reports.iter().all(|r| r.kl >= 0.0 && r.total.is_finite()));
    let student = load_student(&out.checkpoint).unwrap();
    assert_eq!(student.fine_stride(), 2);
    let e = small_eval(&d);
    let reports = eval_checkpoint(&out.checkpoint, &e).unwrap();
    assert_eq!(reports[0].metric, "student_epe");
    let enc = load_encoder(&teacher.checkpoint).unwrap();
    let agree = distill_agreement(&student, &enc, &d.mapping().unwrap(), &e).unwrap();
    assert!((0.0..=1.0).contains(&agree));
}

#[test]
fn evaluation_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Stage::Joint);
    cfg.label = LabelChoice::Dirac;
    cfg.pairs = 1;
    let out = run_stage(&cfg, dir.path()).unwrap();
    let e = small_eval(&cfg);
    let a = eval_checkpoint(&out.checkpoint, &e).unwrap();
    let b = eval_checkpoint(&out.checkpoint, &e).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a[0].value >= 0.0 && (0.0..=1.0).contains(&a[1].value));
}
