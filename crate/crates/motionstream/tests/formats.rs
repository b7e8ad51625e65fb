use motionstream::formats::*;
use motionstream::models::*;
use motionstream_core::audio::AudioTokens;
use motionstream_core::generator::{Generator, GeneratorConfig};
use motionstream_core::kinematics::{MotionClip, Skeleton};
use motionstream_core::seeded;
use motionstream_core::tensor::Tensor;
use motionstream_core::tokenizer::{Codebooks, TokenGrid, Tokenizer, TokenizerConfig};
use proptest::prelude::*;

fn clip(frames: usize, seed: u64) -> MotionClip {
    let s = Skeleton::humanoid();
    MotionClip::new(30.0, Tensor::randn(frames, s.frame_dim(), 0.5, &mut seeded(seed))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn motion_round_trips_through_f32(frames in 1usize..20, seed in any::<u64>()) {
        let s = Skeleton::humanoid();
        let c = clip(frames, seed);
        let back = decode_motion(&encode_motion(&s, &c).unwrap()).unwrap();
        prop_assert_eq!(&back.skeleton.parents, &s.parents);
        prop_assert_eq!(&back.skeleton.foot_joints, &s.foot_joints);
        prop_assert_eq!(&back.skeleton.upper_body_joints, &s.upper_body_joints);
        prop_assert_eq!(back.clip.frames, f32_round(&c.frames));
    }

    #[test]
    fn tokens_round_trip(n in 0usize..12, q in 1usize..4, p in 1usize..4, k in 1usize..300, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let idx = (0..n * q * p).map(|_| rng.gen_range(0..k) as u16).collect();
        let g = TokenGrid::new(n, q, p, k, idx).unwrap();
        prop_assert_eq!(decode_tokens(&encode_tokens(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn audio_round_trips(frames in 0usize..50, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let a = AudioTokens { layers: 2, codebook_size: 64, ids: (0..frames * 2).map(|_| rng.gen_range(0..64)).collect() };
        prop_assert_eq!(decode_audio(&encode_audio(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn truncation_is_rejected(cut in 1usize..40) {
        let bytes = encode_motion(&Skeleton::humanoid(), &clip(3, 1)).unwrap();
        let n = bytes.len().saturating_sub(cut);
        prop_assert!(decode_motion(&bytes[..n]).is_err());
    }
}

#[test]
fn codebooks_round_trip() {
    let c = Codebooks::random(16, 4, 3, 2, &mut seeded(3));
    let back = decode_codebooks(&encode_codebooks(&c).unwrap()).unwrap();
    assert_eq!(back.tables.len(), 6);
    for (a, b) in back.tables.iter().zip(&c.tables) {
        assert_eq!(a, &f32_round(b));
    }
}

#[test]
fn newer_version_and_wrong_magic_fail_loudly() {
    let mut bytes = encode_tokens(&TokenGrid::zeros(1, 1, 1, 4)).unwrap();
    bytes[4] = 9;
    assert!(matches!(decode_tokens(&bytes), Err(FormatError::Version { found: 9, .. })));
    let audio = encode_audio(&AudioTokens::empty(2, 64)).unwrap();
    assert!(matches!(decode_tokens(&audio), Err(FormatError::Magic { .. })));
    let mut tail = encode_tokens(&TokenGrid::zeros(1, 1, 1, 4)).unwrap();
    tail.push(0);
    assert!(decode_tokens(&tail).is_err());
}

#[test]
fn out_of_range_token_is_rejected() {
    let mut bytes = encode_tokens(&TokenGrid::zeros(1, 1, 1, 4)).unwrap();
    let n = bytes.len();
    bytes[n - 2] = 7;
    assert!(decode_tokens(&bytes).is_err());
}

#[test]
fn foreign_skeleton_guesses_joint_roles() {
    let names = ["pelvis", "left_ankle", "spine", "head"].map(String::from).to_vec();
    let s = Skeleton::new(
        vec![None, Some(0), Some(0), Some(2)],
        vec![[0.0; 3], [0.1, -0.9, 0.0], [0.0, 0.2, 0.0], [0.0, 0.3, 0.0]],
        names,
        vec![],
        vec![],
    )
    .unwrap();
    let c = MotionClip::rest(4, 2, 0.9, 30.0);
    let back = decode_motion(&encode_motion(&s, &c).unwrap()).unwrap();
    assert_eq!(back.skeleton.foot_joints, vec![1]);
    assert_eq!(back.skeleton.upper_body_joints, vec![2, 3]);
}

#[test]
fn generator_checkpoint_restores_logits() {
    let cfg = GeneratorConfig { width: 16, layers: 1, heads: 2, ..Default::default() };
    let g = Generator::new(cfg, &mut seeded(4)).unwrap();
    let back = generator_from(&decode_checkpoint(&encode_checkpoint(&generator_checkpoint(&g)).unwrap()).unwrap()).unwrap();
    let ids: Vec<usize> = (0..10).collect();
    let d = g.logits(&ids).max_abs_diff(&back.logits(&ids));
    assert!(d < 1e-3, "logit drift {d}");
    assert!(tokenizer_from(&generator_checkpoint(&g)).is_err());
}

#[test]
fn tokenizer_checkpoint_restores_tokens() {
    let s = Skeleton::humanoid();
    let tok = Tokenizer::new(TokenizerConfig::default(), s.num_joints(), &mut seeded(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.mck");
    save_tokenizer(&p, &tok).unwrap();
    let back = load_tokenizer(&p).unwrap();
    let c = clip(16, 6);
    let (a, b) = (tok.tokenize(&c).unwrap(), back.tokenize(&c).unwrap());
    let same = a.indices.iter().zip(&b.indices).filter(|(x, y)| x == y).count();
    assert!(same as f64 >= 0.95 * a.indices.len() as f64);
}
