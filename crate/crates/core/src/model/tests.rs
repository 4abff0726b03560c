use super::*;
use crate::synthlang::{EOS, PAD};
use crate::tensor::{grad_check, Tensor};

fn cfg(d: usize, vocab: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: d,
        n_heads: 4,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 2 * d,
        vocab_size: vocab,
        max_len: 16,
        dropout_rate: 0.0,
    }
}

fn ex(input: &[usize], target: &[usize]) -> Example {
    Example {
        input: input.to_vec(),
        target: target.to_vec(),
    }
}

#[test]
fn config_validation() {
    let mut c = cfg(16, 20);
    assert!(c.validate().is_ok());
    c.n_heads = 3;
    assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
    let mut c = cfg(16, 20);
    c.dropout_rate = 1.0;
    assert!(init_params(&c, 0).is_err());
}

#[test]
fn init_is_deterministic_with_expected_shapes() {
    let c = cfg(16, 30);
    let a = init_params(&c, 3).unwrap();
    let b = init_params(&c, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_params(&c, 4).unwrap());
    assert_eq!(a.get("embed").unwrap().shape(), &[30, 16]);
    assert_eq!(a.get("dec.1.cross.k").unwrap().shape(), &[16, 16]);
}

#[test]
fn init_std_matches_inverse_sqrt_d() {
    let p = init_params(&cfg(64, 200), 1).unwrap();
    let w = p.get("embed").unwrap().data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    let target = 1.0 / 8.0;
    assert!((std - target).abs() < 0.2 * target, "std {std}");
}

#[test]
fn flat_round_trip() {
    let mut p = init_params(&cfg(16, 20), 0).unwrap();
    let flat = p.to_flat();
    assert_eq!(flat.len(), p.n_values());
    let doubled: Vec<f64> = flat.iter().map(|x| 2.0 * x).collect();
    p.set_flat(&doubled).unwrap();
    assert_eq!(p.to_flat(), doubled);
    assert!(p.set_flat(&flat[1..]).is_err());
}

#[test]
fn encode_shape_and_overlength() {
    let p = init_params(&cfg(16, 20), 0).unwrap();
    let es = encode(&p, &[5, 6, 7, EOS]).unwrap();
    assert_eq!(es.hidden.shape(), &[4, 16]);
    assert!(matches!(
        encode(&p, &[5; 17]),
        Err(ModelError::Overlength { len: 17, max: 16 })
    ));
    assert!(matches!(
        encode(&p, &[25]),
        Err(ModelError::UnknownToken { id: 25, .. })
    ));
}

#[test]
fn pad_tail_does_not_change_unmasked_states() {
    let p = init_params(&cfg(16, 20), 0).unwrap();
    let base = encode(&p, &[5, 6, 7, EOS]).unwrap();
    let padded = encode(&p, &[5, 6, 7, EOS, PAD, PAD, PAD]).unwrap();
    for i in 0..4 {
        for (a, b) in base.hidden.row(i).iter().zip(padded.hidden.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let pa = mean_pool(&base).unwrap();
    let pb = mean_pool(&padded).unwrap();
    assert!(pa.iter().zip(&pb).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn different_sentences_differ_at_init() {
    let p = init_params(&cfg(16, 20), 0).unwrap();
    let a = mean_pool(&encode(&p, &[5, 6, 7, EOS]).unwrap()).unwrap();
    let b = mean_pool(&encode(&p, &[8, 9, 10, EOS]).unwrap()).unwrap();
    let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(dist > 0.0);
}

#[test]
fn mean_pool_arithmetic() {
    let es = EncoderStates {
        hidden: Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(),
        mask: vec![true, true],
    };
    assert_eq!(mean_pool(&es).unwrap(), vec![2.0, 4.0]);
    let single = EncoderStates {
        hidden: Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap(),
        mask: vec![true],
    };
    assert_eq!(mean_pool(&single).unwrap(), vec![1.5, -2.0]);
    let masked = EncoderStates {
        hidden: Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap(),
        mask: vec![false],
    };
    assert_eq!(mean_pool(&masked), Err(ModelError::AllMasked));
}

#[test]
fn initial_loss_is_near_log_vocab() {
    let vocab = 500;
    let p = init_params(&cfg(32, vocab), 2).unwrap();
    let batch: Vec<Example> = (0..8)
        .map(|i| ex(&[10 + i, 20 + i, 30 + i, EOS], &[40 + i, 50 + i, EOS]))
        .collect();
    let loss = forward_loss(&p, &batch).unwrap();
    let ln_v = (vocab as f64).ln();
    assert!((loss - ln_v).abs() < 0.15 * ln_v, "loss {loss} vs {ln_v}");
}

#[test]
fn duplicated_example_gives_same_loss() {
    let p = init_params(&cfg(16, 20), 0).unwrap();
    let e = ex(&[5, 6, EOS], &[7, 8, 9, EOS]);
    let one = forward_loss(&p, std::slice::from_ref(&e)).unwrap();
    let two = forward_loss(&p, &[e.clone(), e]).unwrap();
    assert!((one - two).abs() < 1e-12);
}

#[test]
fn empty_batch_and_sequences_are_errors() {
    let p = init_params(&cfg(16, 20), 0).unwrap();
    assert_eq!(forward_loss(&p, &[]), Err(ModelError::EmptyBatch));
    assert_eq!(forward_loss(&p, &[ex(&[5, EOS], &[])]), Err(ModelError::EmptySequence));
}

#[test]
fn loss_is_nonnegative() {
    let p = init_params(&cfg(16, 20), 5).unwrap();
    for t in 3..20 {
        assert!(forward_loss(&p, &[ex(&[5, EOS], &[t])]).unwrap() >= 0.0);
    }
}

fn sgd_overfit(p: &mut ModelParams, batch: &[Example], steps: usize, lr: f64) -> Vec<f64> {
    let mut losses = Vec::new();
    for _ in 0..steps {
        let (loss, grads) = loss_and_grads(p, batch, None).unwrap();
        losses.push(loss);
        for (t, g) in p.tensors_mut().iter_mut().zip(&grads) {
            t.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * g);
        }
    }
    losses
}

#[test]
fn overfitting_one_batch_reduces_loss_and_reproduces_target() {
    let mut p = init_params(&cfg(16, 20), 1).unwrap();
    let batch = vec![ex(&[5, 6, 7, EOS], &[9, 12, 15, EOS])];
    let losses = sgd_overfit(&mut p, &batch, 150, 0.3);
    assert!(losses[49] < losses[0]);
    assert!(*losses.last().unwrap() < 0.05, "{losses:?}");
    assert_eq!(greedy_generate(&p, &[5, 6, 7, EOS], 10).unwrap(), vec![9, 12, 15]);
}

#[test]
fn generation_respects_max_new_and_is_deterministic() {
    let p = init_params(&cfg(16, 20), 3).unwrap();
    let input = [5, 6, 7, EOS];
    assert!(greedy_generate(&p, &input, 1).unwrap().len() <= 1);
    let a = greedy_generate(&p, &input, 8).unwrap();
    assert_eq!(a, greedy_generate(&p, &input, 8).unwrap());
    let batch = greedy_generate_batch(&p, &[&input[..], &[8, 9, EOS]], 8).unwrap();
    assert_eq!(batch[0], a);
    assert_eq!(batch[1], greedy_generate(&p, &[8, 9, EOS], 8).unwrap());
}

#[test]
fn argmax_ties_take_lowest_id() {
    assert_eq!(super::forward::argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
    assert_eq!(super::forward::argmax(&[0.0, 0.0]), 0);
}

#[test]
fn dropout_changes_loss_only_when_seeded() {
    let mut c = cfg(16, 20);
    c.dropout_rate = 0.3;
    let p = init_params(&c, 0).unwrap();
    let batch = [ex(&[5, 6, 7, EOS], &[8, 9, EOS])];
    let plain = forward_loss(&p, &batch).unwrap();
    let (no_drop, _) = loss_and_grads(&p, &batch, None).unwrap();
    assert!((plain - no_drop).abs() < 1e-12);
    let (a, _) = loss_and_grads(&p, &batch, Some(1)).unwrap();
    let (b, _) = loss_and_grads(&p, &batch, Some(1)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, plain);
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let c = cfg(16, 12);
    let p = init_params(&c, 11).unwrap();
    let batch = vec![ex(&[3, 4, 5, EOS], &[6, 7, EOS]), ex(&[8, 9, EOS], &[10, 11, 4, EOS])];
    let theta = Tensor::vector(p.to_flat());
    let mut work = p.clone();
    let err = grad_check(
        |t| {
            work.set_flat(t.data()).unwrap();
            let (loss, grads) = loss_and_grads(&work, &batch, None).unwrap();
            let flat: Vec<f64> = grads.into_iter().flat_map(Tensor::into_data).collect();
            Ok((loss, Tensor::vector(flat)))
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}
