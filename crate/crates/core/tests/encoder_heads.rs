mod common;

use omnitok::encoder::{Encoder, EncoderConfig};
use omnitok::head::{evaluate, forward, forward_pooled, pooled_representation, Pooling, Sample};
use omnitok::tokenizer::point::PointCloud;
use omnitok::tokenizer::{
    ImageInput, ImageSettings, MetaTokenizer, Modality, ModalityInput, PointSettings,
};
use omnitok::{Adam, ClassificationHead, Tensor, Trainer};
use rand::seq::SliceRandom;

fn small() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        heads: 4,
        dim: 16,
        mlp_dim: 32,
        n_max: 256,
    }
}

fn permute_rows(z: &Tensor, order: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| z.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Reordering a sum changes its rounding, so agreement is to 1e-12 rather
/// than bitwise.
fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
}

#[test]
fn summary_ignores_order_of_non_class_rows() {
    let mut g = common::rng(1);
    let mut enc = Encoder::new(small(), 1).unwrap();
    common::jitter(&mut enc.params, &mut g, 0.2);
    let z0 = common::randn(&mut g, &[9, 16], 1.0);
    let mut order: Vec<usize> = (1..9).collect();
    order.shuffle(&mut g);
    order.insert(0, 0);
    let a = enc.encode(&z0).unwrap();
    let b = enc.encode(&permute_rows(&z0, &order)).unwrap();
    assert!(close(&a.summary, &b.summary));
    assert!(close(
        permute_rows(&a.tokens, &order).data(),
        b.tokens.data()
    ));
}

#[test]
fn attention_rows_are_distributions() {
    let mut g = common::rng(2);
    let enc = Encoder::new(small(), 2).unwrap();
    let (_, cache) = enc
        .encode_with_cache(&common::randn(&mut g, &[7, 16], 2.0))
        .unwrap();
    for layer in 0..2 {
        for head in cache.attention(layer) {
            for i in 0..head.rows() {
                assert!((head.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(head.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }
}

#[test]
fn one_backbone_serves_every_modality() {
    let mut g = common::rng(3);
    let enc = Encoder::new(small(), 3).unwrap();
    let mut tok = MetaTokenizer::new(16, 3).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 3,
            patch: 16,
        },
        196,
    )
    .unwrap();
    tok.register_point_cloud(
        PointSettings {
            feature_dim: 0,
            k: 8,
        },
        64,
    )
    .unwrap();
    let img =
        ModalityInput::Image(ImageInput::new(common::randn(&mut g, &[3, 224, 224], 1.0)).unwrap());
    let pts =
        ModalityInput::PointCloud(PointCloud::from_xyz(&common::cloud(&mut g, 1024)).unwrap());
    for (x, n) in [(img, 196), (pts, 64)] {
        let (z0, _) = tok.sequence(&tok.prepare(&x).unwrap()).unwrap();
        let out = enc.encode(&z0).unwrap();
        assert_eq!((out.summary.len(), out.tokens.rows()), (16, n + 1));
    }
}

#[test]
fn infrared_and_xray_share_the_image_tokenizer() {
    let mut g = common::rng(4);
    let mut tok = MetaTokenizer::new(8, 4).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        16,
    )
    .unwrap();
    let img = ImageInput::new(common::randn(&mut g, &[1, 6, 6], 1.0)).unwrap();
    let plain = tok.tokenize(&ModalityInput::Image(img.clone())).unwrap();
    for x in [
        ModalityInput::Infrared(img.clone()),
        ModalityInput::Xray(img.clone()),
    ] {
        assert_eq!(tok.tokenize(&x).unwrap().embeddings(), plain.embeddings());
    }
}

fn image_data(
    tok: &MetaTokenizer,
    g: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    separable: bool,
) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut x = common::randn(g, &[1, 4, 4], 0.3);
            if separable {
                let sign = if label == 0 { -1.0 } else { 1.0 };
                x.data_mut().iter_mut().take(8).for_each(|v| *v += sign);
            }
            Sample {
                input: tok
                    .prepare(&ModalityInput::Image(ImageInput::new(x).unwrap()))
                    .unwrap(),
                label,
            }
        })
        .collect()
}

#[test]
fn frozen_random_backbone_learns_separable_task() {
    let mut g = common::rng(5);
    let mut enc = Encoder::new(small(), 5).unwrap();
    enc.freeze();
    let digest = enc.digest();
    let mut tok = MetaTokenizer::new(16, 5).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )
    .unwrap();
    let data = image_data(&tok, &mut g, 32, true);
    let mut head = ClassificationHead::new("head", 16, 2, None, 5).unwrap();
    let mut opt = Adam::new(1e-2);
    let mut trainer = Trainer {
        tokenizer: &mut tok,
        encoder: &mut enc,
        head: &mut head,
        optimizer: &mut opt,
        pooling: Pooling::Cls,
    };
    // proj weight + bias, class token, 5 position rows
    let tok_count = 4 * 16 + 16 + 16 + 5 * 16;
    // layer norm, then linear to 2 classes
    let head_count = 2 * 16 + 16 * 2 + 2;
    assert_eq!(
        trainer.trainable_count(Modality::Image),
        tok_count + head_count
    );
    let run = trainer.fit(&data, 200, 8, 5).unwrap();
    assert_eq!(run.history.len(), 200);
    assert_eq!(run.trainable_params, tok_count + head_count);
    let acc = evaluate(&data, &tok, &enc, &head, Pooling::Cls)
        .unwrap()
        .accuracy;
    assert!(acc >= 0.95, "{acc}");
    assert_eq!(enc.digest(), digest);
}

#[test]
fn unfrozen_step_moves_backbone() {
    let mut g = common::rng(6);
    let mut enc = Encoder::new(small(), 6).unwrap();
    enc.freeze();
    enc.unfreeze();
    let digest = enc.digest();
    let mut tok = MetaTokenizer::new(16, 6).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )
    .unwrap();
    let data = image_data(&tok, &mut g, 4, true);
    let mut head = ClassificationHead::new("head", 16, 2, None, 6).unwrap();
    let mut opt = Adam::new(1e-3);
    let refs: Vec<&Sample> = data.iter().collect();
    Trainer {
        tokenizer: &mut tok,
        encoder: &mut enc,
        head: &mut head,
        optimizer: &mut opt,
        pooling: Pooling::Cls,
    }
    .train_step(&refs)
    .unwrap();
    assert_ne!(enc.digest(), digest);
}

/// Untrained heads on balanced data: accuracy stays within a 4-sigma
/// binomial band around 1/K.
#[test]
fn random_head_is_near_chance() {
    let (k, n) = (4usize, 400usize);
    let mut g = common::rng(7);
    let enc = Encoder::new(small(), 7).unwrap();
    let mut tok = MetaTokenizer::new(16, 7).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )
    .unwrap();
    let data: Vec<Sample> = (0..n)
        .map(|i| {
            let x = ImageInput::new(common::randn(&mut g, &[1, 4, 4], 1.0)).unwrap();
            Sample {
                input: tok.prepare(&ModalityInput::Image(x)).unwrap(),
                label: i % k,
            }
        })
        .collect();
    let p = 1.0 / k as f64;
    let band = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
    let mut mean = 0.0;
    for seed in 0..5 {
        let head = ClassificationHead::new("head", 16, k, None, 100 + seed).unwrap();
        mean += evaluate(&data, &tok, &enc, &head, Pooling::Cls)
            .unwrap()
            .accuracy
            / 5.0;
    }
    assert!((mean - p).abs() <= band, "{mean} vs {p} ± {band}");
}

#[test]
fn mean_pooling_ignores_token_order() {
    let mut g = common::rng(8);
    let enc = Encoder::new(small(), 8).unwrap();
    let mut tok = MetaTokenizer::new(16, 8).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 1,
        },
        9,
    )
    .unwrap();
    let x = common::randn(&mut g, &[1, 3, 3], 1.0);
    let prepared = tok
        .prepare(&ModalityInput::Image(ImageInput::new(x).unwrap()))
        .unwrap();
    let (z0, _) = tok.sequence(&prepared).unwrap();
    let mut order: Vec<usize> = (1..10).collect();
    order.shuffle(&mut g);
    order.insert(0, 0);
    let pool = |z: &Tensor| {
        let t = enc.encode(z).unwrap().tokens;
        (0..16)
            .map(|j| (1..t.rows()).map(|i| t.row(i)[j]).sum::<f64>() / (t.rows() - 1) as f64)
            .collect::<Vec<_>>()
    };
    assert!(close(&pool(&z0), &pool(&permute_rows(&z0, &order))));
    let lib = pooled_representation(&prepared, &tok, &enc, Pooling::Mean).unwrap();
    assert!(close(&lib, &pool(&z0)));
}

#[test]
fn single_token_pool_is_that_token() {
    let mut g = common::rng(9);
    let enc = Encoder::new(small(), 9).unwrap();
    let mut tok = MetaTokenizer::new(16, 9).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        1,
    )
    .unwrap();
    let x = ImageInput::new(common::randn(&mut g, &[1, 2, 2], 1.0)).unwrap();
    let prepared = tok.prepare(&ModalityInput::Image(x)).unwrap();
    let (z0, _) = tok.sequence(&prepared).unwrap();
    let row = enc.encode(&z0).unwrap().tokens.row(1).to_vec();
    assert_eq!(
        pooled_representation(&prepared, &tok, &enc, Pooling::Mean).unwrap(),
        row
    );
}

#[test]
fn logit_shift_keeps_decisions() {
    let mut g = common::rng(10);
    let enc = Encoder::new(small(), 10).unwrap();
    let mut tok = MetaTokenizer::new(16, 10).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )
    .unwrap();
    let data = image_data(&tok, &mut g, 20, false);
    let mut head = ClassificationHead::new("head", 16, 3, None, 10).unwrap();
    let before = evaluate(&data, &tok, &enc, &head, Pooling::Cls)
        .unwrap()
        .accuracy;
    let logits: Vec<Vec<f64>> = data
        .iter()
        .map(|s| forward(&s.input, &tok, &enc, &head).unwrap())
        .collect();
    head.params
        .by_name_mut("head.out.bias")
        .unwrap()
        .value
        .data_mut()
        .iter_mut()
        .for_each(|b| *b += 3.25);
    assert_eq!(
        evaluate(&data, &tok, &enc, &head, Pooling::Cls)
            .unwrap()
            .accuracy,
        before
    );
    for (s, old) in data.iter().zip(&logits) {
        let new = forward(&s.input, &tok, &enc, &head).unwrap();
        assert!(new
            .iter()
            .zip(old)
            .all(|(a, b)| (a - b - 3.25).abs() < 1e-12));
        assert_eq!(
            forward_pooled(&s.input, &tok, &enc, &head).unwrap().len(),
            3
        );
    }
}

#[test]
fn mlp_head_gradients_match_central_differences() {
    let mut g = common::rng(11);
    let mut enc = Encoder::new(
        EncoderConfig {
            depth: 1,
            heads: 2,
            dim: 8,
            mlp_dim: 8,
            n_max: 4,
        },
        11,
    )
    .unwrap();
    enc.freeze();
    let mut tok = MetaTokenizer::new(8, 11).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )
    .unwrap();
    let mut head = ClassificationHead::new("head", 8, 3, Some(6), 11).unwrap();
    common::jitter(&mut head.params, &mut g, 0.3);
    common::jitter(tok.params_mut(Modality::Image).unwrap(), &mut g, 0.3);
    let data = image_data(&tok, &mut g, 3, false);
    let refs: Vec<&Sample> = data.iter().collect();
    omnitok::head::accumulate_gradients(&refs, &mut tok, &mut enc, &mut head, Pooling::Cls)
        .unwrap();
    for name in ["head.hidden.weight", "head.ln.gamma", "head.out.bias"] {
        let p = head.params.by_name(name).unwrap();
        let (base, analytic) = (p.value.data().to_vec(), p.value.grad().unwrap().to_vec());
        let mut probe = head.clone();
        let numeric = common::central_diff(&base, |v| {
            probe
                .params
                .by_name_mut(name)
                .unwrap()
                .value
                .data_mut()
                .copy_from_slice(v);
            evaluate(&data, &tok, &enc, &probe, Pooling::Cls)
                .unwrap()
                .mean_loss
        });
        assert!(common::worst(&analytic, &numeric) < 1e-4, "{name}");
    }
    let name = "tokenizer.image.proj.weight";
    let base = tok
        .params(Modality::Image)
        .unwrap()
        .by_name(name)
        .unwrap()
        .value
        .data()
        .to_vec();
    let analytic = tok
        .params(Modality::Image)
        .unwrap()
        .by_name(name)
        .unwrap()
        .value
        .grad()
        .unwrap()
        .to_vec();
    let mut probe = tok.clone();
    let numeric = common::central_diff(&base, |v| {
        probe
            .params_mut(Modality::Image)
            .unwrap()
            .by_name_mut(name)
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(v);
        evaluate(&data, &probe, &enc, &head, Pooling::Cls)
            .unwrap()
            .mean_loss
    });
    assert!(common::worst(&analytic, &numeric) < 1e-4);
    assert!(enc
        .params
        .iter()
        .all(|p| p.value.grad().map_or(true, |g| g.iter().all(|&x| x == 0.0))));
}
