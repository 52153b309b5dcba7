use super::*;
use crate::textcond::{tokenize_prompts, UNKNOWN_ID};
use std::collections::HashSet;

fn small_cfg(n: usize) -> DataConfig {
    DataConfig {
        samples_per_tier: n,
        ..DataConfig::default()
    }
}

fn static_specs() -> (SpriteSpec, BackgroundSpec) {
    let sprite = SpriteSpec {
        shape: ShapeKind::Disc,
        color: SPRITE_COLORS[0],
        size: 0.2,
        trajectory: Trajectory::Linear {
            start: [8.0, 8.0],
            velocity: [0.0, 0.0],
        },
        soft_edge: 1.5,
    };
    let bg = BackgroundSpec {
        pattern: Pattern::Checker,
        colors: [BACKGROUND_COLORS[0], BACKGROUND_COLORS[2]],
        drift: [0.0, 0.0],
    };
    (sprite, bg)
}

fn frames_identical(v: &Video) -> bool {
    (1..v.frames()).all(|f| v.frame(f) == v.frame(0))
}

#[test]
fn static_spec_gives_identical_frames() {
    let (s, b) = static_specs();
    let q = gen_quadruple(&s, &b, 4, 16, 16, 1).unwrap();
    let v = &q.videos;
    for clip in [&v.foreground, &v.alpha, &v.background, &v.blended] {
        assert!(frames_identical(clip));
    }
    assert_eq!(q.prompts[0], "a red disc still");
    assert_eq!(q.prompts[1], "white and black checker static");
}

#[test]
fn generated_quadruples_satisfy_composite_identity() {
    let cfg = small_cfg(32);
    for i in 0..cfg.samples_per_tier {
        let (q, _) = base_quadruple(i, &cfg).unwrap();
        assert!(q.composite_residual().unwrap() < 1e-6);
        let a = q.videos.alpha.data();
        assert!(a.iter().any(|&x| x > 0.0 && x < 1.0), "sample {i} has a binary alpha");
        assert!(a.iter().any(|&x| x == 1.0));
        // foreground is black outside the alpha support
        for (k, &x) in a.iter().enumerate() {
            if x == 0.0 {
                assert!(q.videos.foreground.data()[k * 3..k * 3 + 3].iter().all(|&c| c == 0.0));
            }
        }
        // the sprite never touches the border
        let (f, h, w) = q.dims();
        for fi in 0..f {
            for y in 0..h {
                for x in [0, w - 1] {
                    assert_eq!(q.videos.alpha.get(fi, y, x, 0), 0.0);
                }
            }
        }
    }
}

#[test]
fn spec_grid_prompts_are_distinct() {
    let cfg = DataConfig::default();
    let prompts: HashSet<String> = (0..16)
        .map(|i| base_quadruple(i, &cfg).unwrap().0.prompts[0].clone())
        .collect();
    assert_eq!(prompts.len(), 16);
    let all: HashSet<String> = (0..90)
        .map(|i| {
            let (s, _, _) = spec_for(i, &cfg).unwrap();
            CaptionRule::foreground(&s)
        })
        .collect();
    assert_eq!(all.len(), 90);
}

#[test]
fn out_of_bounds_trajectory_is_rejected() {
    let (mut s, b) = static_specs();
    s.trajectory = Trajectory::Linear {
        start: [8.0, 8.0],
        velocity: [2.0, 0.0],
    };
    assert!(gen_quadruple(&s, &b, 4, 16, 16, 0).is_err());
    s.soft_edge = 0.5;
    s.trajectory = Trajectory::Linear {
        start: [8.0, 8.0],
        velocity: [0.0, 0.0],
    };
    assert!(gen_quadruple(&s, &b, 4, 16, 16, 0).is_err());
}

#[test]
fn freeze_replays_the_seeded_frame() {
    let (q, _) = base_quadruple(3, &DataConfig::default()).unwrap();
    for seed in 0..10 {
        let idx = ChaCha8Rng::seed_from_u64(seed).random_range(0..4usize);
        let z = freeze(&q, seed);
        for f in 0..4 {
            assert_eq!(z.videos.blended.frame(f), q.videos.blended.frame(idx));
            assert_eq!(z.videos.alpha.frame(f), q.videos.alpha.frame(idx));
        }
        assert_eq!(z.prompts, q.prompts);
        // idempotent on frozen input
        assert_eq!(freeze(&z, seed + 100), z);
    }
}

#[test]
fn copy_paste_contracts() {
    let cfg = DataConfig::default();
    let (a, _) = base_quadruple(0, &cfg).unwrap();
    let (b, _) = base_quadruple(5, &cfg).unwrap();
    assert_eq!(copy_paste(&a, &a).unwrap(), a);
    let c = copy_paste(&a, &b).unwrap();
    assert_eq!(c.videos.alpha, a.videos.alpha);
    assert_eq!(c.videos.background, b.videos.background);
    let (fa, aa, bb) = (
        a.videos.foreground.data(),
        a.videos.alpha.data(),
        b.videos.background.data(),
    );
    for (i, &got) in c.videos.blended.data().iter().enumerate() {
        let al = aa[i / 3];
        let want = (al * fa[i] + (1.0 - al) * bb[i]).clamp(0.0, 1.0);
        assert_eq!(got, want);
    }
    assert_eq!(c.prompts[0], a.prompts[0]);
    assert_eq!(c.prompts[1], b.prompts[1]);
    assert_eq!(c.prompts[2], format!("{} over {}", a.prompts[0], b.prompts[1]));

    let small = DataConfig {
        frames: 2,
        ..cfg
    };
    let (d, _) = base_quadruple(0, &small).unwrap();
    assert!(copy_paste(&a, &d).is_err());
}

#[test]
fn degrade_contracts() {
    let (q, _) = base_quadruple(7, &DataConfig::default()).unwrap();
    let d = degrade(&q, 9);
    assert!(d.videos.alpha.data().iter().all(|&a| a == 0.0 || a == 1.0));
    let frames = q.dims().0;
    for f in 0..frames {
        let p = q.videos.blended.frame(f.saturating_sub(1));
        let c = q.videos.blended.frame(f);
        let n = q.videos.blended.frame((f + 1).min(frames - 1));
        for (i, &got) in d.videos.blended.frame(f).iter().enumerate() {
            let want = (p[i] as f64 + c[i] as f64 + n[i] as f64) / 3.0;
            assert!((got as f64 - want).abs() < 1e-6);
        }
    }
    assert_eq!(d.videos.foreground, q.videos.foreground);
    assert_ne!(d.videos.background, q.videos.background);
    let dev: f64 = d
        .videos
        .background
        .data()
        .iter()
        .zip(q.videos.background.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / q.videos.background.data().len() as f64;
    assert!(dev > 0.005 && dev < 0.03, "{dev}");
    assert!(d.composite_mean_residual().unwrap() < 0.1);

    // binary alpha on a static clip survives untouched
    let mut s = q.clone();
    s.videos.alpha = d.videos.alpha.repeat_frame(0);
    let again = degrade(&s, 1);
    assert_eq!(again.videos.alpha, s.videos.alpha);
}

#[test]
fn captions_use_a_closed_vocabulary() {
    let vocab = caption_vocabulary();
    let cfg = small_cfg(90);
    for tier in Tier::ALL {
        for s in generate_tier(tier, &cfg).unwrap() {
            let t = tokenize_prompts(&s.quadruple.prompts, &vocab, 16).unwrap();
            assert!(!t.ids.contains(&UNKNOWN_ID), "{:?}", s.quadruple.prompts);
            // nothing is truncated at the default prompt length
            for (b, p) in s.quadruple.prompts.iter().enumerate() {
                assert!(p.split_whitespace().count() < 16, "block {b}: {p}");
            }
        }
    }
}

#[test]
fn tiers_have_their_roles() {
    let cfg = small_cfg(10);
    let coarse = generate_tier(Tier::Coarse, &cfg).unwrap();
    assert!(coarse.iter().all(|s| !s.frozen));
    assert!(coarse
        .iter()
        .all(|s| s.quadruple.videos.alpha.data().iter().all(|&a| a == 0.0 || a == 1.0)));
    let frozen = generate_tier(Tier::Frozen, &cfg).unwrap();
    for s in &frozen {
        assert!(s.frozen);
        assert!(frames_identical(&s.quadruple.videos.blended));
        assert!(s.quadruple.composite_residual().unwrap() < 1e-6);
    }
    let joint = generate_tier(Tier::Joint, &cfg).unwrap();
    let n_frozen = joint.iter().filter(|s| s.frozen).count();
    assert_eq!(n_frozen, 8);
    for s in &joint {
        assert_eq!(s.frozen, frames_identical(&s.quadruple.videos.blended));
    }
    assert_eq!(generate_tier(Tier::Joint, &cfg).unwrap(), joint);
}

#[test]
fn frozen_fraction_is_spread_evenly() {
    let flags: Vec<bool> = (0..10).map(|i| joint_is_frozen(i, 0.8)).collect();
    assert_eq!(flags.iter().filter(|&&f| f).count(), 8);
    assert!((0..100).all(|i| joint_is_frozen(i, 1.0)));
    assert!((0..100).all(|i| !joint_is_frozen(i, 0.0)));
}

#[test]
fn single_frame_joint_tier_matches_clean_frames() {
    let cfg = DataConfig {
        frames: 1,
        samples_per_tier: 5,
        ..DataConfig::default()
    };
    let joint = generate_tier(Tier::Joint, &cfg).unwrap();
    for (i, s) in joint.iter().enumerate() {
        if joint_is_frozen(i, cfg.joint_frozen_fraction) {
            assert_eq!(s.quadruple, base_quadruple(i, &cfg).unwrap().0);
        }
    }
}

#[test]
fn dataset_files_are_deterministic() {
    let cfg = small_cfg(3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let rows = write_dataset(a.path(), &cfg).unwrap();
    write_dataset(b.path(), &cfg).unwrap();
    assert_eq!(rows.len(), 9);
    assert_eq!(read_manifest(a.path()).unwrap(), rows);
    for r in &rows {
        assert_eq!(
            fs::read(a.path().join(&r.file)).unwrap(),
            fs::read(b.path().join(&r.file)).unwrap()
        );
    }
    assert_eq!(
        fs::read(a.path().join(MANIFEST)).unwrap(),
        fs::read(b.path().join(MANIFEST)).unwrap()
    );
    let joint = load_tier(a.path(), Tier::Joint).unwrap();
    assert_eq!(joint.len(), 3);
    let vocab = Vocabulary::load(&a.path().join(VOCABULARY_FILE)).unwrap();
    assert_eq!(vocab, caption_vocabulary());
    assert!(load_tier(tempfile::tempdir().unwrap().path(), Tier::Coarse).is_err());
}
