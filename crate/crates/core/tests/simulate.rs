mod common;

use mcsa_core::simulate::*;
use common::naive_convolve;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn room(absorption: f64) -> RoomSpec {
    RoomSpec {
        dims: [5.0, 4.0, 3.0],
        rt60_s: 0.5,
        absorption,
    }
}

#[test]
fn first_order_images_match_hand_list() {
    let src = [1.0, 1.5, 0.7];
    let mut got: Vec<[f64; 3]> = enumerate_images(&room(0.3), src, 1).iter().map(|i| i.position).collect();
    let mut expect = vec![
        [1.0, 1.5, 0.7],
        [-1.0, 1.5, 0.7],
        [9.0, 1.5, 0.7],
        [1.0, -1.5, 0.7],
        [1.0, 6.5, 0.7],
        [1.0, 1.5, -0.7],
        [1.0, 1.5, 5.3],
    ];
    let key = |p: &[f64; 3]| p.map(|v| (v * 1e6).round() as i64);
    got.sort_by_key(key);
    expect.sort_by_key(key);
    assert_eq!(got.len(), 7);
    for (g, e) in got.iter().zip(&expect) {
        for k in 0..3 {
            assert!((g[k] - e[k]).abs() < 1e-12, "{g:?} vs {e:?}");
        }
    }
}

#[test]
fn image_counts_follow_the_shell_formula() {
    // 4n^2 + 2 images have exactly n >= 1 reflections in a shoebox.
    let mut expected = 1;
    for n in 0..6usize {
        if n > 0 {
            expected += 4 * n * n + 2;
        }
        let imgs = enumerate_images(&room(0.3), [1.0, 1.0, 1.0], n);
        assert_eq!(imgs.len(), expected, "order {n}");
        assert!(imgs.iter().all(|i| i.order <= n));
    }
}

#[test]
fn fully_absorbing_walls_leave_the_direct_path() {
    let r = room(1.0);
    let (src, mic) = ([1.0, 1.0, 1.2], [3.2, 2.5, 1.0]);
    let direct = image_source_rir(&r, src, mic, 16000, 0, 2000).unwrap();
    let many = image_source_rir(&r, src, mic, 16000, 12, 2000).unwrap();
    assert_eq!(direct, many);
}

#[test]
fn direct_path_lands_on_the_propagation_delay() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let r = room(0.5);
        let p = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|k| rng.random_range(0.3..r.dims[k] - 0.3));
        let (src, mic) = (p(&mut rng), p(&mut rng));
        let rir = image_source_rir(&r, src, mic, 16000, 0, 4000).unwrap();
        let delay = distance(src, mic) / SPEED_OF_SOUND * 16000.0;
        let peak = rir
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        assert!((peak as f64 - delay).abs() <= 1.0, "peak {peak}, delay {delay}");
    }
}

#[test]
fn schroeder_curve_is_monotone() {
    let r = RoomSpec::with_rt60([6.0, 5.0, 2.8], 0.6, AbsorptionModel::default()).unwrap();
    let rir = room_rir(&r, [1.0, 1.2, 1.5], [4.0, 3.1, 0.7], 16000, 30, 6000).unwrap();
    let curve = schroeder_curve(&rir);
    assert_eq!(curve[0], 0.0);
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn sabine_matches_the_worked_example() {
    let a = rt60_to_absorption(0.5, [5.0, 5.0, 4.0]).unwrap();
    assert!((a - 0.2477).abs() < 1e-4);
}

fn source_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (prop::collection::vec(-1.0f64..1.0, 1..40), 0usize..30)
}

proptest! {
    #[test]
    fn fft_convolution_matches_direct_sum(a in prop::collection::vec(-1.0f64..1.0, 1..60), b in prop::collection::vec(-1.0f64..1.0, 1..60)) {
        let fast = fft_convolve(&a, &b);
        let slow = naive_convolve(&a, &b);
        prop_assert_eq!(fast.len(), slow.len());
        for (x, y) in fast.iter().zip(&slow) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn mixing_is_shifted_convolution_and_superposes(
        srcs in prop::collection::vec(source_strategy(), 1..4),
        rir_len in 1usize..20,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mics = 2;
        let mut start = 0;
        let sources: Vec<DelayedSource> = srcs
            .iter()
            .enumerate()
            .map(|(i, (sig, gap))| {
                if i > 0 {
                    start += gap + 1;
                }
                DelayedSource { signal: sig.clone(), start_sample: start }
            })
            .collect();
        let rirs: Vec<Vec<Vec<f64>>> = sources
            .iter()
            .map(|_| (0..mics).map(|_| (0..rir_len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let mixed = mix_with_delays(&sources, &rirs, 16000).unwrap();
        let len = mixed.len();
        for m in 0..mics {
            let mut expect = vec![0.0; len];
            for (s, r) in sources.iter().zip(&rirs) {
                for (i, v) in naive_convolve(&s.signal, &r[m]).iter().enumerate() {
                    expect[s.start_sample + i] += v;
                }
            }
            for (i, e) in expect.iter().enumerate() {
                prop_assert!((mixed.samples()[[m, i]] - e).abs() < 1e-10);
            }
        }
        // Doubling one source's signal adds exactly its own contribution again.
        let mut doubled = sources.clone();
        doubled[0].signal.iter_mut().for_each(|v| *v *= 2.0);
        let again = mix_with_delays(&doubled, &rirs, 16000).unwrap();
        let alone = mix_with_delays(&sources[..1], &rirs[..1], 16000).unwrap();
        for m in 0..mics {
            for i in 0..len {
                let extra = if i < alone.len() { alone.samples()[[m, i]] } else { 0.0 };
                prop_assert!((again.samples()[[m, i]] - mixed.samples()[[m, i]] - extra).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampled_scenes_respect_the_ranges(seed in any::<u64>(), mics in 2usize..5, n in 1usize..4) {
        let cfg = RoomSampling::default();
        let (r, array, sources) = sample_room(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, mics, n).unwrap();
        prop_assert!(check_scene(&cfg, &r, &array, &sources).is_empty());
        prop_assert_eq!(array.n_mics(), mics);
        prop_assert!((array.max_pairwise_distance() - 0.10).abs() < 1e-9);
        prop_assert!(array.is_collinear(1e-9));
    }

    #[test]
    fn offsets_start_at_zero_and_stay_within_the_previous_utterance(durs in prop::collection::vec(0.1f64..3.0, 1..5), seed in any::<u64>()) {
        let off = sample_offsets(&mut ChaCha8Rng::seed_from_u64(seed), &durs);
        prop_assert_eq!(off[0], 0.0);
        for i in 1..off.len() {
            let gap = off[i] - off[i - 1];
            prop_assert!(gap > 0.0 && gap <= durs[i - 1]);
        }
    }
}

#[test]
fn lexicon_words_are_distinct() {
    let mut words = TOY_LEXICON.to_vec();
    words.sort();
    words.dedup();
    assert_eq!(words.len(), 26);
    let synth = ToySynth::default();
    let voice = speaker_pool(&mut ChaCha8Rng::seed_from_u64(1), 1).remove(0);
    let waves: Vec<Vec<f64>> = TOY_LEXICON.iter().map(|w| synth.synthesize(&[w.to_string()], &voice)).collect();
    for i in 0..waves.len() {
        for j in i + 1..waves.len() {
            assert_ne!(waves[i], waves[j], "{} and {}", TOY_LEXICON[i], TOY_LEXICON[j]);
        }
    }
}

#[test]
fn simulated_mixtures_are_reproducible() {
    let cfg = SimulationConfig {
        rir_duration_s: Some(0.1),
        max_words: 2,
        ..Default::default()
    };
    let pool = SpeakerPool::new(&cfg, 3);
    let a = simulate_mixture(&cfg, &pool, "m", 42).unwrap();
    let b = simulate_mixture(&cfg, &pool, "m", 42).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.wave.samples(), b.wave.samples());
    assert_eq!(a.wave.channels(), cfg.n_mics);
    let peak = a.wave.samples().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - cfg.peak).abs() < 1e-12);
}
