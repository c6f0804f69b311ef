//! Structural invariants of the temporal-channel transformer, checked over
//! randomly drawn legal configurations: token-matrix extents, row-stochastic
//! attention weights, and dense-output geometry.

use proptest::prelude::*;
use tctr_core::autodiff::{Tape, VarId};
use tctr_core::params::ParamStore;
use tctr_core::rng;
use tctr_core::tctr::{
    decode_spatial, encode_memory, register_tctr_params, EncoderVariant, TctrConfig,
};
use tctr_core::tensor::Tensor;

/// Row sums measured in f64 so the check reflects the stored f32 values, not
/// extra summation roundoff.
fn assert_row_stochastic(tape: &Tape<f32>, attn: VarId, rows: usize, cols: usize, what: &str) {
    let t = tape.value(attn);
    assert_eq!(t.dims(), &[rows, cols], "{what}: weight matrix extents");
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)), "{what}: weight outside [0,1]");
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{what}: row {r} sums to {sum}");
    }
}

fn variant_strategy() -> impl Strategy<Value = EncoderVariant> {
    prop_oneof![
        Just(EncoderVariant::TemporalChannel),
        Just(EncoderVariant::TemporalOnly),
        Just(EncoderVariant::ChannelOnly),
    ]
}

fn config_strategy() -> impl Strategy<Value = (TctrConfig, usize, usize, usize, u64)> {
    let arch = (
        0usize..=2,          // t_radius
        1usize..=6,          // c2
        prop_oneof![Just(4usize), Just(8), Just(12)], // c3, divisible by 4
        1usize..=2,          // enc_blocks
        1usize..=2,          // dec_blocks
        1usize..=3,          // heads
        2usize..=6,          // d_k
        4usize..=16,         // ffn_hidden
        variant_strategy(),
        any::<bool>(),
    );
    let shape = (
        2usize..=8,          // c1
        prop_oneof![Just((2usize, 4usize)), Just((4, 4)), Just((4, 8)), Just((2, 2))],
        any::<u64>(),
    );
    (arch, shape)
        .prop_map(
            |(
                (t_radius, c2, c3, enc_blocks, dec_blocks, heads, d_k, ffn_hidden, variant, use_pe),
                (c1, (h1, w1), seed),
            )| {
                (
                    TctrConfig {
                        t_radius,
                        c2,
                        c3,
                        enc_blocks,
                        dec_blocks,
                        heads,
                        d_k,
                        ffn_hidden,
                        variant,
                        use_pe,
                    },
                    c1,
                    h1,
                    w1,
                    seed,
                )
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn random_legal_configs_hold_the_contract(
        (cfg, c1, h1, w1, seed) in config_strategy()
    ) {
        let mut store = ParamStore::<f32>::new();
        register_tctr_params(&mut store, &cfg, c1, h1, w1, seed).unwrap();

        let mut tape = Tape::new();
        let mut r = rng::stream(seed, "invariants/frames");
        let frames: Vec<VarId> = (0..cfg.n_frames())
            .map(|_| {
                let t = Tensor::from_fn(&[c1, h1, w1], |_| {
                    rng::normal(&mut r, 1.0) as f32
                })
                .unwrap();
                tape.constant(t)
            })
            .collect();
        let target = cfg.n_frames() / 2;

        let enc = encode_memory(&mut tape, &store, &frames, target, &cfg).unwrap();
        let tokens = cfg.encoder_tokens();
        // Memory rows are tokens; every token keeps one feature per voxel.
        prop_assert_eq!(tape.dims(enc.memory), &[tokens, h1 * w1]);
        prop_assert_eq!(enc.attn.len(), cfg.enc_blocks * cfg.heads);
        for (i, &a) in enc.attn.iter().enumerate() {
            assert_row_stochastic(&tape, a, tokens, tokens, &format!("encoder attn {i}"));
        }

        let dec = decode_spatial(&mut tape, &store, frames[target], enc.memory, &cfg).unwrap();
        // The dense temporal map spans exactly the target frame's geometry.
        prop_assert_eq!(tape.dims(dec.g), tape.dims(frames[target]));
        prop_assert_eq!(dec.self_attn.len(), cfg.dec_blocks * cfg.heads);
        prop_assert_eq!(dec.cross_attn.len(), cfg.dec_blocks * cfg.heads);
        for (i, &a) in dec.self_attn.iter().enumerate() {
            assert_row_stochastic(&tape, a, h1 * w1, h1 * w1, &format!("decoder self attn {i}"));
        }
        for (i, &a) in dec.cross_attn.iter().enumerate() {
            // Every voxel query distributes unit mass over the memory tokens.
            assert_row_stochastic(&tape, a, h1 * w1, tokens, &format!("decoder cross attn {i}"));
        }
    }

    #[test]
    fn wrong_frame_count_is_rejected((cfg, c1, h1, w1, seed) in config_strategy()) {
        let mut store = ParamStore::<f32>::new();
        register_tctr_params(&mut store, &cfg, c1, h1, w1, seed).unwrap();
        let mut tape = Tape::new();
        let frames: Vec<VarId> = (0..cfg.n_frames() + 1)
            .map(|_| tape.constant(Tensor::zeros(&[c1, h1, w1]).unwrap()))
            .collect();
        prop_assert!(encode_memory(&mut tape, &store, &frames, 0, &cfg).is_err());
    }
}
