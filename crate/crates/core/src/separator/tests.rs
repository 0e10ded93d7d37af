use super::*;
use crate::fixtures::{fixture_frame_config, late_entry_scene};
use crate::model::{init_model, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_frame() -> FrameConfig {
    FrameConfig {
        sample_rate: 8000,
        window_size: 64,
        hop_size: 16,
        ..FrameConfig::default()
    }
}

fn rand_mag(frames: usize, rng: &mut ChaCha8Rng) -> MagSpectrogram {
    let cfg = small_frame();
    let bins = cfg.num_bins();
    MagSpectrogram::new((0..bins * frames).map(|_| rng.random_range(0.0..1.0)).collect(), bins, frames, cfg).unwrap()
}

fn binary(values: Vec<f64>) -> ActivationCurve {
    ActivationCurve::binary(values, 500.0, "x").unwrap()
}

fn noise_clip(n: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::mono((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
}

fn tiny_params() -> SeparatorParams {
    init_model(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn weighting_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mag = rand_mag(6, &mut rng);
    assert_eq!(apply_activation_weight(&mag, &binary(vec![1.0; 6])).unwrap(), mag);
    let zero = apply_activation_weight(&mag, &binary(vec![0.0; 6])).unwrap();
    assert!(zero.values().iter().all(|&v| v == 0.0));
    let alt = apply_activation_weight(&mag, &binary(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0])).unwrap();
    for b in 0..mag.bins() {
        for t in 0..6 {
            let expect = if t % 2 == 0 { mag.get(b, t) } else { 0.0 };
            assert_eq!(alt.get(b, t), expect);
        }
    }
    assert!(matches!(apply_activation_weight(&mag, &binary(vec![1.0; 5])), Err(Error::Shape(_))));
}

#[test]
fn weighting_the_mask_equals_weighting_the_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mix = rand_mag(10, &mut rng);
    let (bins, frames) = mix.shape();
    let mask = Mask::new((0..bins * frames).map(|_| rng.random_range(0.0..1.0)).collect(), bins, frames).unwrap();
    let act = binary((0..frames).map(|t| (t % 3 != 1) as u8 as f64).collect());
    let via_product = apply_activation_weight(&predicted_spectrogram(&mask, &mix).unwrap(), &act).unwrap();
    let weighted_mask = Mask::new(
        (0..bins * frames).map(|i| mask.values()[i] * act.values()[i % frames]).collect(),
        bins,
        frames,
    )
    .unwrap();
    let via_mask = predicted_spectrogram(&weighted_mask, &mix).unwrap();
    assert_eq!(via_product, via_mask);
}

#[test]
fn config_validation() {
    for bad in [
        InferenceConfig {
            activation_threshold: 1.0,
            ..InferenceConfig::default()
        },
        InferenceConfig {
            smooth_kernel_frames: 4,
            ..InferenceConfig::default()
        },
        InferenceConfig {
            segment_seconds: 0.0,
            ..InferenceConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn unweighted_path_equals_all_ones_path() {
    let params = tiny_params();
    let frame = small_frame();
    let mix = noise_clip(4000, 4);
    let off = InferenceConfig {
        use_activation_weight: false,
        ..InferenceConfig::default()
    };
    let ones = InferenceConfig {
        activation_source: ActivationSource::AllOnes,
        ..InferenceConfig::default()
    };
    let a = separate(&params, &mix, &frame, &off, "x", None).unwrap();
    let b = separate(&params, &mix, &frame, &ones, "x", None).unwrap();
    assert_eq!(a.estimate, b.estimate);
    assert_eq!(a.estimate.len(), mix.len());
    assert!(a.act_used.values().iter().all(|&v| v == 1.0));
}

#[test]
fn all_zero_oracle_silences_the_estimate() {
    let params = tiny_params();
    let frame = small_frame();
    let mix = noise_clip(3000, 5);
    let frames = frame.num_frames(mix.len());
    let cfg = InferenceConfig {
        activation_source: ActivationSource::GroundTruth,
        ..InferenceConfig::default()
    };
    let oracle = binary(vec![0.0; frames]);
    let sep = separate(&params, &mix, &frame, &cfg, "x", Some(&oracle)).unwrap();
    assert!(sep.estimate.samples().iter().all(|&s| s == 0.0));
    assert!(separate(&params, &mix, &frame, &cfg, "x", None).is_err());
}

#[test]
fn segmented_inference_matches_frame_layout() {
    let params = tiny_params();
    let frame = small_frame();
    // 0.05 s segments are 25 frames; 3000 samples give 188 frames
    let mix = noise_clip(3000, 6);
    let cfg = InferenceConfig {
        segment_seconds: 0.05,
        activation_source: ActivationSource::AllOnes,
        ..InferenceConfig::default()
    };
    let sep = separate(&params, &mix, &frame, &cfg, "x", None).unwrap();
    assert_eq!(sep.estimate.len(), 3000);
    let raw = sep.act_raw.unwrap();
    assert_eq!(raw.len(), frame.num_frames(3000));

    // segment boundaries only change which frames share a network pass
    let (mag, _) = stft(&mix, &frame).unwrap();
    let (mask, logits) = channel_mask(&params, &mag, 25).unwrap();
    let first = forward(&params, &mag.slice_frames(0, 25).unwrap(), Mode::Eval).unwrap();
    assert_eq!(&logits[..25], &first.activation_logits[..]);
    assert_eq!(mask.get(3, 24), first.mask.get(3, 24));
}

#[test]
fn short_segments_merge_into_their_predecessor() {
    let params = tiny_params();
    let mag = rand_mag(53, &mut ChaCha8Rng::seed_from_u64(7));
    let (mask, logits) = channel_mask(&params, &mag, 25).unwrap();
    assert_eq!(mask.shape(), mag.shape());
    assert_eq!(logits.len(), 53);
    let tail = forward(&params, &mag.slice_frames(25, 53).unwrap(), Mode::Eval).unwrap();
    assert_eq!(&logits[25..], &tail.activation_logits[..]);
    assert!(channel_mask(&params, &rand_mag(7, &mut ChaCha8Rng::seed_from_u64(8)), 25).is_err());
}

#[test]
fn stereo_channels_share_one_weight() {
    let params = tiny_params();
    let frame = small_frame();
    let left = noise_clip(2000, 9).into_channels().remove(0);
    let right: Vec<f64> = left.iter().map(|s| s * 0.1).collect();
    let stereo = AudioClip::new(vec![left, right], 8000).unwrap();
    let sep = separate(&params, &stereo, &frame, &InferenceConfig::default(), "x", None).unwrap();
    assert_eq!(sep.estimate.num_channels(), 2);
    assert_eq!(sep.estimate.len(), 2000);
    assert!(sep.act_used.is_binary());
}

#[test]
fn leaky_mask_is_cleaned_before_onset_by_ground_truth_weight() {
    let frame = fixture_frame_config(8000);
    let scene = late_entry_scene(&frame, 120, 200, 1).unwrap();
    let (mag, _) = stft(&scene.mixture, &frame).unwrap();
    let leaky = Mask::filled(0.6, mag.bins(), mag.frames()).unwrap();
    let oracle = reference_activation(&scene.target, &frame, "tone", DEFAULT_THRESHOLD).unwrap();
    assert!(oracle.values()[..=120].iter().all(|&v| v == 0.0));

    let weighted_cfg = InferenceConfig {
        activation_source: ActivationSource::GroundTruth,
        ..InferenceConfig::default()
    };
    let plain_cfg = InferenceConfig {
        use_activation_weight: false,
        ..InferenceConfig::default()
    };
    let weighted = separate_with_mask(&leaky, &scene.mixture, &frame, &weighted_cfg, "tone", Some(&oracle)).unwrap();
    let plain = separate_with_mask(&leaky, &scene.mixture, &frame, &plain_cfg, "tone", Some(&oracle)).unwrap();
    let head = 120 * frame.hop_size;
    assert!(weighted.estimate.samples()[..head].iter().all(|&s| s == 0.0));
    assert!(plain.estimate.samples()[..head].iter().any(|&s| s != 0.0));
    let energy = |c: &AudioClip| c.samples().iter().map(|s| s * s).sum::<f64>();
    assert!(energy(&weighted.estimate) < energy(&plain.estimate));
}

#[test]
fn predicted_source_needs_a_model() {
    let frame = small_frame();
    let mix = noise_clip(1000, 10);
    let (mag, _) = stft(&mix, &frame).unwrap();
    let mask = Mask::filled(0.5, mag.bins(), mag.frames()).unwrap();
    assert!(matches!(
        separate_with_mask(&mask, &mix, &frame, &InferenceConfig::default(), "x", None),
        Err(Error::Config(_))
    ));
}

#[test]
fn batch_writes_one_estimate_per_song_and_is_repeatable() {
    let params = tiny_params();
    let frame = small_frame();
    let songs: Vec<EvalSong> = (0..2)
        .map(|i| {
            crate::datapipe::assemble_song(
                format!("s{i}"),
                vec![("x".into(), noise_clip(1500, 20 + i)), ("y".into(), noise_clip(1500, 30 + i))],
            )
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let report = batch_separate(&params, &songs, &frame, &InferenceConfig::default(), "x", dir.path());
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    for s in ["s0", "s1"] {
        assert!(estimate_path(dir.path(), s, "x").exists());
        let (raw, used) = activation_paths(dir.path(), s, "x");
        assert!(raw.exists() && used.exists());
    }
    let first = std::fs::read(estimate_path(dir.path(), "s0", "x")).unwrap();
    let again = batch_separate(&params, &songs, &frame, &InferenceConfig::default(), "x", dir.path());
    assert!(again.failures.is_empty());
    assert_eq!(first, std::fs::read(estimate_path(dir.path(), "s0", "x")).unwrap());

    let gt = InferenceConfig {
        activation_source: ActivationSource::GroundTruth,
        ..InferenceConfig::default()
    };
    let missing = batch_separate(&params, &songs, &frame, &gt, "z", dir.path());
    assert_eq!(missing.failures.len(), 2);
}

#[test]
fn short_song_is_a_single_segment() {
    let params = tiny_params();
    let frame = small_frame();
    let mix = noise_clip(777, 11);
    let sep = separate(&params, &mix, &frame, &InferenceConfig::default(), "x", None).unwrap();
    assert_eq!(sep.estimate.len(), 777);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighting_is_idempotent_and_never_adds_energy(
        seed in 0u64..1000,
        bits in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mag = rand_mag(12, &mut rng);
        let act = binary(bits.iter().map(|&b| b as u8 as f64).collect());
        let once = apply_activation_weight(&mag, &act).unwrap();
        let twice = apply_activation_weight(&once, &act).unwrap();
        prop_assert_eq!(&once, &twice);
        let (eo, em) = (once.frame_energies(), mag.frame_energies());
        for (a, b) in eo.iter().zip(&em) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn smoothing_flips_exactly_where_the_window_majority_disagrees(
        bits in proptest::collection::vec(any::<bool>(), 1..80),
        half in 0usize..5,
    ) {
        let k = 2 * half + 1;
        let curve = binary(bits.iter().map(|&b| b as u8 as f64).collect());
        let smooth = median_smooth(&curve, k).unwrap();
        let n = bits.len() as isize;
        for i in 0..bits.len() {
            let ones = (-(half as isize)..=half as isize)
                .filter(|&d| bits[crate::dsp::reflect_index(i as isize + d, n as usize)])
                .count();
            let majority = ones * 2 > k;
            prop_assert_eq!(smooth.values()[i] == 1.0, majority);
        }
    }
}
