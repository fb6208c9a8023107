mod common;

use common::{randn, rng, tiny_encoder, tiny_signal_encoder};
use flea_core::corpus::{generate_corpus, GenerationSpec};
use flea_core::encoder::{
    forward, init_params, layer_embeddings, sample_mask, ConvLayerSpec, EncoderConfig, InputKind, MaskSpec,
    TapSpec,
};
use flea_core::numerics::Tensor;
use flea_core::Error;
use proptest::prelude::*;

#[test]
fn span_mask_fraction_matches_union_probability() {
    let (t, p, l) = (1000, 0.08, 10);
    let fractions: Vec<f64> = (0..100)
        .map(|seed| sample_mask(t, p, l, &mut rng(seed)).unwrap().num_masked() as f64 / t as f64)
        .collect();
    let mc = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let closed_form = 1.0 - (1.0f64 - p).powi(l as i32);
    assert!((closed_form - 0.57).abs() < 0.01);
    assert!((mc - closed_form).abs() <= 0.05, "Monte Carlo {mc} vs {closed_form}");
    // Frame i can only be covered by the min(i + 1, l) starts before it.
    let exact = (0..t)
        .map(|i| 1.0 - (1.0 - p).powi((i + 1).min(l) as i32))
        .sum::<f64>()
        / t as f64;
    assert!((mc - exact).abs() < 0.01, "Monte Carlo {mc} vs edge-exact {exact}");
}

#[test]
fn degenerate_mask_probabilities() {
    assert!(sample_mask(50, 0.0, 10, &mut rng(0)).unwrap().is_empty());
    assert_eq!(sample_mask(50, 1.0, 1, &mut rng(0)).unwrap().num_masked(), 50);
    // Sequence shorter than one span.
    let m = sample_mask(3, 1.0, 10, &mut rng(0)).unwrap();
    assert_eq!(m.masked_indices, vec![0, 1, 2]);
}

fn input(seed: u64, t: usize, f: usize) -> Tensor {
    randn(&mut rng(seed), &[t, f])
}

#[test]
fn perturbing_masked_frames_changes_nothing() {
    let cfg = tiny_encoder(4, 3);
    let params = init_params(&cfg, 1).unwrap();
    let x = input(2, 10, 4);
    let mask = MaskSpec::from_indices(10, &[2, 3, 7]).unwrap();
    let base = forward(&params, &cfg, &x, Some(&mask)).unwrap();

    let mut y = x.clone();
    for &i in &mask.masked_indices {
        y.row_mut(i).iter_mut().for_each(|v| *v += 5.0);
    }
    assert_eq!(forward(&params, &cfg, &y, Some(&mask)).unwrap(), base);

    // An unmasked frame reaches the other frames through attention.
    let mut z = x.clone();
    z.row_mut(5)[0] += 1.0;
    let moved = forward(&params, &cfg, &z, Some(&mask)).unwrap();
    assert_ne!(moved.hidden_states[0].row(0), base.hidden_states[0].row(0));
    assert_ne!(moved.logits.row(2), base.logits.row(2));
}

#[test]
fn empty_mask_and_no_mask_agree_bit_for_bit() {
    let cfg = tiny_encoder(4, 3);
    let params = init_params(&cfg, 3).unwrap();
    let x = input(4, 7, 4);
    let a = forward(&params, &cfg, &x, None).unwrap();
    let b = forward(&params, &cfg, &x, Some(&MaskSpec::none(7))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fully_masked_logits_ignore_the_input() {
    let cfg = tiny_encoder(4, 3);
    let params = init_params(&cfg, 5).unwrap();
    let all = MaskSpec::from_indices(6, &(0..6).collect::<Vec<_>>()).unwrap();
    let a = forward(&params, &cfg, &input(1, 6, 4), Some(&all)).unwrap();
    let b = forward(&params, &cfg, &input(2, 6, 4), Some(&all)).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn forward_shape_contract() {
    let cfg = tiny_encoder(4, 5);
    let params = init_params(&cfg, 0).unwrap();
    let out = forward(&params, &cfg, &input(0, 9, 4), None).unwrap();
    assert_eq!(out.hidden_states.len(), cfg.num_transformer_layers);
    for h in &out.hidden_states {
        assert_eq!(h.shape(), &[9, cfg.embed_dim]);
    }
    assert_eq!(out.logits.shape(), &[9, 5]);
}

#[test]
fn stride_four_conv_stack_gives_a_quarter_of_the_samples() {
    let cfg = EncoderConfig {
        input: InputKind::Signal {
            conv_layers: vec![
                ConvLayerSpec {
                    out_channels: 4,
                    kernel: 2,
                    stride: 2,
                },
                ConvLayerSpec {
                    out_channels: 4,
                    kernel: 2,
                    stride: 2,
                },
            ],
        },
        max_frames: 128,
        ..tiny_encoder(1, 3)
    };
    assert_eq!(cfg.total_stride(), 4);
    assert_eq!(cfg.output_frames(400).unwrap(), 100);
    let params = init_params(&cfg, 0).unwrap();
    let out = forward(&params, &cfg, &Tensor::vector(vec![0.1; 400]), None).unwrap();
    assert_eq!(out.output.rows(), 100);
}

#[test]
fn zero_length_input_is_a_length_error() {
    let sig = tiny_signal_encoder(3);
    assert!(matches!(sig.output_frames(0), Err(Error::Length(_))));
    assert!(matches!(sig.output_frames(2), Err(Error::Length(_))));
    let frames = tiny_encoder(4, 3);
    let params = init_params(&frames, 0).unwrap();
    let empty = Tensor::new(vec![0, 4], vec![]).unwrap();
    assert!(matches!(forward(&params, &frames, &empty, None), Err(Error::Length(_))));
}

#[test]
fn layer_embeddings_preserve_utterance_boundaries() {
    let corpus = generate_corpus(&GenerationSpec {
        utterances_per_speaker: 3,
        frames_min: 6,
        frames_max: 11,
        feature_dim: 4,
        ..GenerationSpec::default()
    })
    .unwrap();
    let cfg = tiny_encoder(4, 3);
    let params = init_params(&cfg, 0).unwrap();
    let tap = TapSpec::new(2, &cfg).unwrap();
    let emb = layer_embeddings(corpus.utterances.iter(), &params, &cfg, tap).unwrap();
    assert_eq!(emb.total_frames(), corpus.total_frames());
    assert_eq!(emb.concat().unwrap().rows(), corpus.total_frames());
    for (u, (id, m)) in corpus.utterances.iter().zip(emb.utterance_ids.iter().zip(&emb.matrices)) {
        assert_eq!(&u.id, id);
        assert_eq!(m.rows(), u.num_frames());
        let direct = forward(&params, &cfg, &u.frames, None).unwrap();
        assert_eq!(m, &direct.hidden_states[1]);
    }
}

#[test]
fn tap_ranges_follow_the_presets() {
    let desk = EncoderConfig::desk(8, 4);
    for l in 1..=3 {
        TapSpec::new(l, &desk).unwrap();
    }
    assert!(TapSpec::new(0, &desk).is_err());
    assert!(TapSpec::new(4, &desk).is_err());
    let reference = EncoderConfig::full_scale(50);
    for l in [6, 9, 11] {
        TapSpec::new(l, &reference).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_unions_of_spans(seed in any::<u64>(), t in 1usize..200, p in 0.0f64..0.5, l in 1usize..15) {
        let m = sample_mask(t, p, l, &mut rng(seed)).unwrap();
        prop_assert!(m.masked_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.masked_indices.iter().all(|&i| i < t));
        // Every maximal run is at least one span long unless cut by the end.
        let flags = m.flags();
        let mut i = 0;
        while i < t {
            if flags[i] {
                let start = i;
                while i < t && flags[i] {
                    i += 1;
                }
                prop_assert!(i - start >= l || i == t, "run {start}..{i} shorter than {l}");
            } else {
                i += 1;
            }
        }
        prop_assert_eq!(sample_mask(t, p, l, &mut rng(seed)).unwrap(), m);
    }

    #[test]
    fn forward_is_deterministic_and_masking_local(seed in any::<u64>(), t in 2usize..12, f in 1usize..6) {
        let cfg = tiny_encoder(f, 3);
        let params = init_params(&cfg, seed).unwrap();
        let x = input(seed ^ 1, t, f);
        let mask = sample_mask(t, 0.3, 2, &mut rng(seed)).unwrap();
        let a = forward(&params, &cfg, &x, Some(&mask)).unwrap();
        prop_assert_eq!(&forward(&params, &cfg, &x, Some(&mask)).unwrap(), &a);
        let mut y = x.clone();
        for &i in &mask.masked_indices {
            y.row_mut(i).iter_mut().for_each(|v| *v = -*v * 3.0 + 1.0);
        }
        prop_assert_eq!(forward(&params, &cfg, &y, Some(&mask)).unwrap(), a);
    }
}
