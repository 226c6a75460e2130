mod common;

use common::{max_abs_diff, randomise};
use mcsa_core::autograd::{Graph, ParamStore};
use mcsa_core::frontend::*;
use mcsa_core::gradcheck::{check_gradients, GradCheckConfig};
use mcsa_core::init::Initializer;
use mcsa_core::speaker::*;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_profiles(rng: &mut impl Rng, e: usize, k: usize) -> SpeakerProfileMatrix {
    let enrollments: Vec<(String, Vec<Vec<f64>>)> = (0..k)
        .map(|i| {
            let vs = (0..3).map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            (format!("spk{i}"), vs)
        })
        .collect();
    build_profile_matrix(&enrollments).unwrap()
}

#[test]
fn profile_columns_are_normalised_enrollment_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enrollments: Vec<(String, Vec<Vec<f64>>)> = (0..8)
        .map(|i| {
            let vs = (0..4).map(|_| (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            (format!("s{i}"), vs)
        })
        .collect();
    let p = build_profile_matrix(&enrollments).unwrap();
    assert_eq!(p.matrix().dim(), (192, 8));
    for (k, (id, vs)) in enrollments.iter().enumerate() {
        assert_eq!(p.index_of(id), Some(k));
        let mean: Vec<f64> = (0..192).map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / 4.0).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..192 {
            assert!((p.matrix()[[j, k]] - mean[j] / norm).abs() < 1e-12);
        }
    }
}

#[test]
fn malformed_profiles_are_rejected() {
    assert!(SpeakerProfileMatrix::new(Array2::from_elem((3, 2), 1.0), vec!["a".into(), "b".into()]).is_err());
    let eye = Array2::eye(3);
    assert!(SpeakerProfileMatrix::new(eye.clone(), vec!["a".into()]).is_err());
    assert!(SpeakerProfileMatrix::new(eye, vec!["a".into(), "b".into(), "c".into()]).is_ok());
    let dup = vec![("a".to_string(), vec![vec![1.0, 0.0]]), ("a".to_string(), vec![vec![0.0, 1.0]])];
    assert!(build_profile_matrix(&dup).is_err());
    assert!(build_profile_matrix(&[("z".to_string(), vec![vec![0.0, 0.0]])]).is_err());
}

proptest! {
    #[test]
    fn posterior_is_a_softmax_of_dot_products(seed in any::<u64>(), k in 1usize..6, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_profiles(&mut rng, 6, k);
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let post = speaker_posterior(&q, &p).unwrap();
        let dots: Vec<f64> = (0..k).map(|c| (0..6).map(|j| p.matrix()[[j, c]] * q[j]).sum()).collect();
        let z: f64 = dots.iter().map(|d| d.exp()).sum();
        for c in 0..k {
            prop_assert!((post.probs[c] - dots[c].exp() / z).abs() < 1e-12);
        }
        let best = (0..k).max_by(|a, b| dots[*a].total_cmp(&dots[*b])).unwrap();
        prop_assert_eq!(post.argmax(), best);

        // Moving the query along a direction orthogonal to every profile
        // changes nothing; with K < E such a direction exists for K = 1.
        if k == 1 {
            let col: Vec<f64> = (0..6).map(|j| p.matrix()[[j, 0]]).collect();
            let mut ortho: Vec<f64> = (0..6).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect();
            let d: f64 = ortho.iter().zip(&col).map(|(a, b)| a * b).sum();
            ortho.iter_mut().zip(&col).for_each(|(o, c)| *o -= d * c);
            let moved: Vec<f64> = q.iter().zip(&ortho).map(|(a, o)| a + shift * o).collect();
            prop_assert_eq!(speaker_posterior(&moved, &p).unwrap().probs, post.probs.clone());
        }

        let w = weighted_profile(&post, &p).unwrap();
        for j in 0..6 {
            let expect: f64 = (0..k).map(|c| post.probs[c] * p.matrix()[[j, c]]).sum();
            prop_assert!((w[j] - expect).abs() < 1e-12);
        }
        // A convex combination of unit vectors stays inside the unit ball.
        prop_assert!(w.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-12);
    }
}

#[test]
fn sharp_queries_select_their_profile() {
    let p = random_profiles(&mut ChaCha8Rng::seed_from_u64(4), 16, 5);
    for k in 0..5 {
        let q: Vec<f64> = (0..16).map(|j| 200.0 * p.matrix()[[j, k]]).collect();
        let post = speaker_posterior(&q, &p).unwrap();
        assert_eq!(post.argmax(), k);
        assert!(post.probs[k] > 1.0 - 1e-9);
        let w = weighted_profile(&post, &p).unwrap();
        assert!((0..16).all(|j| (w[j] - p.matrix()[[j, k]]).abs() < 1e-6));
    }
    assert!(speaker_posterior(&[1.0; 3], &p).is_err());
}

fn mel_input(seed: u64, seconds: f64, n_mels: usize) -> MelFeatureTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * 16000.0) as usize;
    let wave = MultichannelWave::new(Array2::from_shape_fn((2, n), |_| rng.random_range(-0.5..0.5)), 16000).unwrap();
    log_mel(&stft(&wave, 25.0, 10.0).unwrap(), n_mels).unwrap()
}

#[test]
fn stub_is_the_mel_stack_and_a_projection() {
    let mut store = ParamStore::new();
    let stub = SpeakerEncoderStub::new(&mut store, &mut Initializer::new(2), "spk", 20, 8);
    randomise(&mut store, 3);
    let mel = mel_input(5, 0.4, 20);
    let got = speaker_encode_mel(&store, &stub, &mel).unwrap();
    let mean = mel.channel_mean();
    let single = MelFeatureTensor {
        values: mean.clone().into_shape_with_order((1, mean.nrows(), 20)).unwrap(),
    };
    let feats = stub.conv.features(&store, &FrontendInput::Mel(single)).unwrap();
    let expect = project_to_model_dim(&store, &stub.projection, &feats).unwrap();
    assert_eq!(got.frames(), stub.conv.output_frames(mel.frames()));
    assert!(max_abs_diff(&got.values, &expect.index_axis(ndarray::Axis(0), 0).to_owned()) < 1e-12);
    got.check_frames(stub.conv.output_frames(mel.frames())).unwrap();
    assert!(got.check_frames(got.frames() + 1).is_err());

    let wrong = MelFeatureTensor { values: Array3::zeros((1, 40, 10)) };
    assert!(speaker_encode_mel(&store, &stub, &wrong).is_err());
}

#[test]
fn enrollment_embeddings_ignore_loudness() {
    let embedder = EnrollmentEmbedder::new(16, 40, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<f64> = (0..8000).map(|_| rng.random_range(-0.3..0.3)).collect();
    let quiet = MultichannelWave::mono(samples.clone(), 16000).unwrap();
    let loud = MultichannelWave::mono(samples.iter().map(|v| v * 3.0).collect(), 16000).unwrap();
    let a = embedder.embed(&quiet).unwrap();
    let b = embedder.embed(&loud).unwrap();
    assert_eq!(a.len(), 16);
    assert_eq!(a, embedder.embed(&quiet).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
}

fn speaker_decoder(store: &mut ParamStore) -> SpeakerDecoder {
    SpeakerDecoder::new(store, &mut Initializer::new(8), "sd", 7, 8, 2, 16, 2, 6)
}

#[test]
fn speaker_decoder_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let dec = speaker_decoder(&mut store);
    randomise(&mut store, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h_asr = store.insert("h_asr", Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0)));
    let h_spk = store.insert("h_spk", Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0)));
    let probe = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
    let tokens = [0usize, 4, 2];
    let report = check_gradients(
        &store,
        &|g: &mut Graph| {
            let a = g.param(h_asr);
            let s = g.param(h_spk);
            let q = dec.forward(g, &tokens, a, s).unwrap();
            let r = g.constant(probe.clone());
            let y = g.mul(q, r);
            g.sum_all(y)
        },
        &GradCheckConfig::default(),
    );
    assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err());
    assert_eq!(report.entries_checked(), store.num_scalars());
}

#[test]
fn speaker_queries_are_causal_and_use_both_memories() {
    let mut store = ParamStore::new();
    let dec = speaker_decoder(&mut store);
    randomise(&mut store, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h_asr = Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
    let h_spk = Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
    let short = speaker_decode(&store, &dec, &[0, 4], &h_asr, &h_spk).unwrap();
    let mut g = Graph::new(&store);
    let a = g.constant(h_asr.clone());
    let s = g.constant(h_spk.clone());
    let q = dec.forward(&mut g, &[0, 4, 5, 6], a, s).unwrap();
    let row: Vec<f64> = g.value(q).row(1).to_vec();
    assert!(short.iter().zip(&row).all(|(x, y)| (x - y).abs() < 1e-12));

    let other = h_spk.mapv(|v| -v);
    assert_ne!(short, speaker_decode(&store, &dec, &[0, 4], &h_asr, &other).unwrap());
    assert!(speaker_decode(&store, &dec, &[], &h_asr, &h_spk).is_err());
    assert!(speaker_decode(&store, &dec, &[0], &h_asr, &h_spk.slice(ndarray::s![..4, ..]).to_owned()).is_err());
}
