use super::train::{loss_and_grad, param_slices, param_slices_mut};
use super::*;

fn tiny(n_kv_heads: usize) -> ToyLmConfig {
    ToyLmConfig {
        n_blocks: 2,
        d_model: 8,
        n_heads: 2,
        n_kv_heads,
        d_ff: 12,
        max_seq: 16,
        rope_base: 10_000.0,
        seed: 3,
    }
}

fn perturbed(cfg: &ToyLmConfig) -> DenseModel {
    use rand::{Rng, SeedableRng};
    let mut m = DenseModel::init(cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    // Non-unit norm gains so their gradients are exercised.
    for s in param_slices_mut(&mut m) {
        if s.len() == cfg.d_model {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

#[test]
fn uniform_model_has_perplexity_256() {
    let mut m = DenseModel::uniform(&tiny(2)).unwrap();
    let ppl = window_ppl(&mut m, b"hello world, hello!", 8).unwrap();
    assert_eq!(ppl.len(), 2);
    for p in ppl {
        assert!((p - 256.0).abs() < 1e-9, "{p}");
    }
}

#[test]
fn window_ppl_rejects_short_input() {
    let mut m = DenseModel::uniform(&tiny(2)).unwrap();
    assert!(matches!(window_ppl(&mut m, b"abc", 8), Err(Error::InsufficientData(_))));
}

#[test]
fn gradient_matches_finite_differences() {
    for kv in [2, 1] {
        let cfg = tiny(kv);
        let model = perturbed(&cfg);
        let batch = vec![b"the cat sat".to_vec(), b"1+2=3 4+4=8".to_vec()];
        let (_, grad) = loss_and_grad(&model, &batch).unwrap();
        let grads: Vec<Vec<f64>> = param_slices(&grad).into_iter().map(<[f64]>::to_vec).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (ti, g) in grads.iter().enumerate() {
            // A handful of coordinates per tensor, including the largest-gradient one.
            let big = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
            for idx in [0, g.len() / 2, g.len() - 1, big] {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    param_slices_mut(&mut m)[ti][idx] += delta;
                    loss_and_grad(&m, &batch).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[idx]).abs() / (fd.abs().max(g[idx].abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-5, "kv={kv} worst relative error {worst}");
    }
}

#[test]
fn training_loss_matches_inference_nll() {
    let cfg = tiny(1);
    let mut model = perturbed(&cfg);
    let seq = b"abcabcabcab".to_vec();
    let (loss, _) = loss_and_grad(&model, &[seq.clone()]).unwrap();
    let nll = model.token_nll(&seq).unwrap();
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    assert!((loss - mean).abs() < 1e-12);
}

#[test]
fn incremental_decode_matches_full_prefill() {
    for kv in [2, 1] {
        let model = perturbed(&tiny(kv));
        let toks = b"decode me!".to_vec();
        let (full, _) = model.prefill(&toks).unwrap();
        let (_, mut cache) = model.prefill(&toks[..4]).unwrap();
        for (i, &t) in toks[4..].iter().enumerate() {
            let row = model.decode_step(&mut cache, t).unwrap();
            let want = full.logits.row(4 + i);
            let diff = row.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "position {} differs by {diff}", 4 + i);
        }
        assert_eq!(cache.len(), toks.len());
    }
}

#[test]
fn decode_past_max_seq_is_rejected() {
    let model = perturbed(&tiny(2));
    let (_, mut cache) = model.prefill(&[7u8; 16]).unwrap();
    assert!(matches!(model.decode_step(&mut cache, 1), Err(Error::Overlength { len: 17, max: 16 })));
}

#[test]
fn batched_forward_matches_single_sequences() {
    let model = perturbed(&tiny(2));
    let sk = model.skeleton::<f64>();
    let seqs = vec![b"alpha".to_vec(), b"omega".to_vec()];
    let mut cache = KvCache::new(&model.cfg, 2);
    let out = forward(&sk, &mut model.projector::<f64>(), &seqs, &mut cache, false).unwrap();
    for (s, seq) in seqs.iter().enumerate() {
        let (single, _) = model.prefill(seq).unwrap();
        for t in 0..seq.len() {
            assert_eq!(out.logits.row(s * seq.len() + t), single.logits.row(t));
        }
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let model = perturbed(&tiny(2));
    let toks = b"single precision".to_vec();
    let (full, _) = model.prefill(&toks).unwrap();
    let sk = model.skeleton::<f32>();
    let mut cache = KvCache::new(&model.cfg, 1);
    let out = forward(&sk, &mut model.projector::<f32>(), &[toks], &mut cache, false).unwrap();
    let diff = out
        .logits
        .data()
        .iter()
        .zip(full.logits.data())
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn recorder_sees_every_projection_input() {
    let model = perturbed(&tiny(2));
    let sk = model.skeleton::<f64>();
    let mut rec = ActivationRecorder::new(model.projector::<f64>(), 2);
    let mut cache = KvCache::new(&model.cfg, 1);
    forward(&sk, &mut rec, &[b"record".to_vec()], &mut cache, false).unwrap();
    for block in &rec.inputs {
        assert_eq!(block[InputSlot::AttnIn as usize][0].shape(), (6, 8));
        assert_eq!(block[InputSlot::MlpOut as usize][0].shape(), (6, 12));
    }
}

#[test]
fn short_training_reduces_loss_deterministically() {
    let cfg = tiny(2);
    let stream: Vec<u8> = b"abcdabcdabcdabcd".iter().cycle().take(400).cloned().collect();
    let tc = LmTrainConfig { steps: 60, batch_size: 4, seq_len: 12, learning_rate: 1e-2, ..Default::default() };
    let mut a = DenseModel::init(&cfg).unwrap();
    let log = train_lm(&mut a, &stream, &tc).unwrap();
    assert!(log.losses.last().unwrap() < &(log.losses[0] * 0.5), "{:?}", log.losses);
    let mut b = DenseModel::init(&cfg).unwrap();
    train_lm(&mut b, &stream, &tc).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tensor_ids_round_trip() {
    for l in 0..3 {
        for p in Projection::ALL {
            assert_eq!(parse_tensor_id(&tensor_id(l, p)), Some((l, p)));
        }
    }
    assert_eq!(parse_tensor_id("embed"), None);
    assert_eq!(parse_tensor_id("blocks.1.x"), None);
}

#[test]
fn config_validation() {
    assert!(ToyLmConfig { n_heads: 3, ..tiny(1) }.validate().is_err());
    assert!(ToyLmConfig { n_kv_heads: 3, n_heads: 4, ..tiny(1) }.validate().is_err());
    assert!(ToyLmConfig { d_model: 6, n_heads: 2, ..tiny(1) }.validate().is_err());
    assert!(tiny(1).validate().is_ok());
}
