use pixcorr::correspondence::{argmax_flow, local_correlation, occlusion_mask, soft_argmax_flow};
use pixcorr::data::{gen_clip, gen_pair, rgb_to_lab, Domain};
use pixcorr::encoder::encode;
use pixcorr::inference::{track_points, PropagationConfig};
use pixcorr::trainer::{load_encoder, run_stage, stream_rng, LabelChoice, TrainConfig};
use pixcorr::{MappingConfig, Tensor};
use proptest::prelude::*;

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.generator.size = 32;
    cfg.generator.sprite_size = (8, 14);
    cfg.generator.max_disp = 4;
    cfg.radius = 4;
    cfg.channels = 8;
    cfg.pairs = 3;
    cfg.label = LabelChoice::Dirac;
    cfg
}

#[test]
fn trained_checkpoint_drives_matching_and_tracking() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let out = run_stage(&cfg, dir.path()).unwrap();
    let enc = load_encoder(&out.checkpoint).unwrap();
    let mapping = cfg.mapping().unwrap();

    let pair = gen_pair(&cfg.generator, Domain::Synthetic, &mut stream_rng(11, 0, 0)).unwrap();
    let f1 = encode(&enc, &rgb_to_lab(&pair.frame1).unwrap()).unwrap();
    let f2 = encode(&enc, &rgb_to_lab(&pair.frame2).unwrap()).unwrap();
    let p12 = local_correlation(&f1, &f2, &mapping).unwrap();
    let p21 = local_correlation(&f2, &f1, &mapping).unwrap();
    assert_eq!((p12.h(), p12.w()), (16, 16));
    for row in p12.probs().data().chunks(81) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-4, "row sums to {s}");
    }
    let hard = argmax_flow(&p12);
    let soft = soft_argmax_flow(&p12);
    for y in 0..16 {
        for x in 0..16 {
            let (u, v) = hard.get(y, x);
            assert!(u.abs() <= 4.0 && v.abs() <= 4.0);
            let (su, sv) = soft.get(y, x);
            assert!(su.abs() <= 4.0 + 1e-4 && sv.abs() <= 4.0 + 1e-4);
        }
    }
    let occ = occlusion_mask(&p12, &p21).unwrap();
    assert_eq!((occ.h(), occ.w()), (16, 16));

    let clip = gen_clip(&cfg.generator, 4, 5, Domain::Synthetic, &mut stream_rng(11, 1, 0)).unwrap();
    let queries: Vec<(f32, f32)> = clip.tracks.iter().map(|t| t.positions[0]).collect();
    let prop = PropagationConfig { mapping, ..PropagationConfig::default() };
    let tracks = track_points(&enc, &clip.frames, &queries, &prop).unwrap();
    assert_eq!(tracks.len(), queries.len());
    for (t, q) in tracks.iter().zip(&queries) {
        assert_eq!(t.positions.len(), 4);
        assert_eq!(t.positions[0], *q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identical_features_match_themselves(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0, 0);
        let mut data: Vec<f64> = (0..6 * 7 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for px in data.chunks_mut(4) {
            let n = px.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            px.iter_mut().for_each(|v| *v /= n);
        }
        let f = Tensor::new(&[6, 7, 4], data).unwrap();
        let cfg = MappingConfig::new(2, 0.01).unwrap();
        let p = local_correlation(&f, &f, &cfg).unwrap();
        let occ = occlusion_mask(&p, &p).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                prop_assert_eq!(occ.get(y, x), 1);
            }
        }
    }
}
