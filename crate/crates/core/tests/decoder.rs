mod common;

use halluscope::decoder::{
    forward_sequence, generate, layer_norm, normalized_score, random_model, trace_sequence, AttentionNoise,
    DecodeMode, DecoderState, GenerateOptions, Hooks, ModelConfig,
};
use halluscope::DecoderWeights;

fn cfg(layers: usize, heads: usize, d: usize, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::toy(layers, heads, d, vocab);
    c.max_positions = 32;
    c
}

#[test]
fn forward_matches_reference_equations() {
    let w = random_model(&cfg(3, 2, 8, 7), 11).unwrap();
    let tokens = [1, 4, 0, 6, 2, 2];
    let recs = forward_sequence(&w, &tokens, &Hooks::none()).unwrap();
    let oracle = common::reference(&w, &tokens);
    for (t, rec) in recs.iter().enumerate() {
        for l in 0..3 {
            assert!(common::max_diff(&rec.x_attn[l], &oracle[t][l].0) < 1e-9);
            assert!(common::max_diff(&rec.x_post[l], &oracle[t][l].1) < 1e-9);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let w = random_model(&cfg(2, 4, 16, 9), 3).unwrap();
    let noisy = Hooks {
        attn_noise: Some(AttentionNoise { sigma: 0.7, seed: 5 }),
        ..Hooks::none()
    };
    for hooks in [Hooks::none(), noisy] {
        for rec in forward_sequence(&w, &[3, 1, 4, 1, 5, 8, 2], &hooks).unwrap() {
            for row in rec.attn.iter().flatten() {
                assert_eq!(row.len(), rec.position + 1);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|a| *a >= 0.0));
            }
        }
    }
}

#[test]
fn zero_value_projection_leaves_only_the_residual() {
    let mut w = random_model(&cfg(2, 2, 8, 5), 4).unwrap();
    for lw in &mut w.layers {
        lw.wv.iter_mut().for_each(|m| m.scale(0.0));
    }
    for rec in forward_sequence(&w, &[0, 3, 2, 4], &Hooks::none()).unwrap() {
        for l in 0..2 {
            let lw = &w.layers[l];
            let expect = layer_norm(&rec.x_pre[l], &lw.ln_g[0], &lw.ln_b[0]);
            assert_eq!(rec.x_attn[l], expect);
            assert!(rec.head_out[l].iter().flatten().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn zero_ffn_leaves_only_the_attention_state() {
    let w = random_model(&cfg(2, 2, 8, 5), 4).unwrap().with_ffn_erased(&[0, 1]).unwrap();
    for rec in forward_sequence(&w, &[0, 3, 2, 4], &Hooks::none()).unwrap() {
        for l in 0..2 {
            assert!(rec.ffn_out[l].iter().all(|v| *v == 0.0));
            let lw = &w.layers[l];
            assert_eq!(rec.x_post[l], layer_norm(&rec.x_attn[l], &lw.ln_g[1], &lw.ln_b[1]));
        }
    }
}

#[test]
fn grouped_kv_matches_duplicated_heads() {
    let mut grouped_cfg = cfg(2, 4, 16, 8);
    grouped_cfg.kv_group = 2;
    let grouped = random_model(&grouped_cfg, 21).unwrap();

    let mut flat = DecoderWeights::zeros(cfg(2, 4, 16, 8)).unwrap();
    flat.emb = grouped.emb.clone();
    flat.pos = grouped.pos.clone();
    flat.unemb = grouped.unemb.clone();
    flat.unemb_bias = grouped.unemb_bias.clone();
    for (f, g) in flat.layers.iter_mut().zip(&grouped.layers) {
        let mut copy = g.clone();
        copy.wk = (0..4).map(|h| g.wk[h / 2].clone()).collect();
        copy.wv = (0..4).map(|h| g.wv[h / 2].clone()).collect();
        *f = copy;
    }
    let tokens = [5, 1, 7, 7, 0, 2];
    let a = forward_sequence(&grouped, &tokens, &Hooks::none()).unwrap();
    let b = forward_sequence(&flat, &tokens, &Hooks::none()).unwrap();
    let oracle = common::reference(&grouped, &tokens);
    for t in 0..tokens.len() {
        for l in 0..2 {
            assert!(common::max_diff(&a[t].x_post[l], &b[t].x_post[l]) < 1e-9);
            assert!(common::max_diff(&a[t].x_post[l], &oracle[t][l].1) < 1e-9);
        }
        assert!(common::max_diff(&a[t].next_logprobs, &b[t].next_logprobs) < 1e-9);
    }
}

#[test]
fn peek_does_not_commit() {
    let w = random_model(&cfg(2, 2, 8, 6), 9).unwrap();
    let mut s = DecoderState::new(&w);
    s.push(1, &Hooks::none()).unwrap();
    let peeked = s.peek(4, &Hooks::none()).unwrap();
    assert_eq!(s.len(), 1);
    let pushed = s.push(4, &Hooks::none()).unwrap();
    assert_eq!(peeked.x_post, pushed.x_post);
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..5 {
        let w = random_model(&cfg(2, 2, 8, 6), seed).unwrap();
        let g = generate(&w, &[1, 2], &GenerateOptions::greedy(5), &Hooks::none()).unwrap();
        let b = generate(&w, &[1, 2], &GenerateOptions::beam(1, 0.8, 5), &Hooks::none()).unwrap();
        assert_eq!(g.tokens, b.tokens);
    }
}

fn sequence_logprob(w: &DecoderWeights, prompt: &[u32], seq: &[u32]) -> f64 {
    trace_sequence(w, prompt, seq, &Hooks::none()).unwrap().token_logprob.iter().sum()
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for (vocab, len, eos, penalty) in [(4, 3, None, 0.8), (6, 2, None, 0.0), (5, 3, Some(0), 0.8), (3, 3, Some(2), 1.0)] {
        for seed in 0..3 {
            let w = random_model(&cfg(2, 2, 8, vocab), 100 + seed).unwrap();
            let prompt = [1u32, 2];
            let best = common::enumerate(vocab as u32, len, eos)
                .into_iter()
                .map(|s| {
                    let lp = sequence_logprob(&w, &prompt, &s);
                    (normalized_score(lp, s.len(), penalty), s)
                })
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            let opts = GenerateOptions {
                mode: DecodeMode::Beam {
                    width: vocab.pow(len as u32),
                    length_penalty: penalty,
                },
                max_new_tokens: len,
                eos_token: eos,
            };
            let got = generate(&w, &prompt, &opts, &Hooks::none()).unwrap();
            assert_eq!(got.tokens, best.1, "vocab {vocab} len {len} seed {seed}");
            assert!((got.score - best.0).abs() < 1e-6);
        }
    }
}

#[test]
fn sampling_is_reproducible() {
    let w = random_model(&cfg(2, 2, 8, 6), 2).unwrap();
    let opts = GenerateOptions {
        mode: DecodeMode::Sample { temperature: 1.0, seed: 17 },
        max_new_tokens: 6,
        eos_token: None,
    };
    let a = generate(&w, &[3], &opts, &Hooks::none()).unwrap();
    let b = generate(&w, &[3], &opts, &Hooks::none()).unwrap();
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn trace_taps_agree_with_records() {
    let w = random_model(&cfg(2, 2, 8, 6), 8).unwrap();
    let (ctx, resp) = ([1u32, 2, 3], [4u32, 5]);
    let t = trace_sequence(&w, &ctx, &resp, &Hooks::none()).unwrap();
    let recs = forward_sequence(&w, &[1, 2, 3, 4, 5], &Hooks::none()).unwrap();
    for (pos, rec) in recs.iter().enumerate() {
        for l in 0..2 {
            let want: Vec<f64> = rec.x_post[l].iter().map(|v| *v as f32 as f64).collect();
            assert_eq!(t.hidden(halluscope::Tap::Post, pos, l), &want[..]);
        }
    }
    // attention over context only, renormalization not applied
    let row = t.attn_row(0, 1, 0);
    assert_eq!(row.len(), 3);
    assert!(row.iter().sum::<f64>() <= 1.0 + 1e-6);
}
