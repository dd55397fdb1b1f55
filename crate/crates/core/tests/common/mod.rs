//! Oracles shared by the integration tests. Nothing here calls the library's
//! own checking helpers; every expected value is derived independently.
#![allow(dead_code)]

use omnitok::encoder::{Encoder, EncoderConfig};
use omnitok::head::{accumulate_gradients, evaluate, ClassificationHead, Pooling, Sample};
use omnitok::layers::LN_EPS;
use omnitok::ops;
use omnitok::optim::Moments;
use omnitok::tokenizer::{ImageInput, ImageSettings, MetaTokenizer, Modality, ModalityInput};
use omnitok::{Adam, ParamSet, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Below this magnitude errors are absolute: exactly-zero gradients leave
/// ~1e-10 of central-difference rounding noise.
pub const FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    // Box-Muller keeps the oracle free of distribution crates.
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central differences, one coordinate at a time.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + STEP;
            let up = f(&p);
            p[i] = x[i] - STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn dot(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn like(t: &Tensor, v: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), v.to_vec()).unwrap()
}

pub fn jitter(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for p in ps.iter_mut() {
        let noise = randn(rng, p.value.shape(), scale);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// Worst relative error per layer for one seed. Each layer is probed with a
/// random cotangent `r`, so the scalar under test is `<layer(x), r>`.
pub fn layer_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut g = rng(seed);
    let mut out = Vec::new();

    let (x, w, b, r) = (
        randn(&mut g, &[4, 3], 1.0),
        randn(&mut g, &[3, 5], 1.0),
        randn(&mut g, &[5], 1.0),
        randn(&mut g, &[4, 5], 1.0),
    );
    let (dx, dw, db) = ops::linear_backward(&x, &w, &r);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&ops::linear(x, w, b).unwrap(), &r);
    let e = worst(
        dx.data(),
        &central_diff(x.data(), |v| f(&like(&x, v), &w, &b)),
    )
    .max(worst(
        dw.data(),
        &central_diff(w.data(), |v| f(&x, &like(&w, v), &b)),
    ))
    .max(worst(
        db.data(),
        &central_diff(b.data(), |v| f(&x, &w, &like(&b, v))),
    ));
    out.push(("linear", e));

    let (x, gam, bet, r) = (
        randn(&mut g, &[3, 7], 2.0),
        randn(&mut g, &[7], 1.0),
        randn(&mut g, &[7], 1.0),
        randn(&mut g, &[3, 7], 1.0),
    );
    let (_, cache) = ops::layer_norm(&x, &gam, &bet, LN_EPS).unwrap();
    let (dx, dg, db) = ops::layer_norm_backward(&cache, &gam, &r);
    let f =
        |x: &Tensor, a: &Tensor, b: &Tensor| dot(&ops::layer_norm(x, a, b, LN_EPS).unwrap().0, &r);
    let e = worst(
        dx.data(),
        &central_diff(x.data(), |v| f(&like(&x, v), &gam, &bet)),
    )
    .max(worst(
        dg.data(),
        &central_diff(gam.data(), |v| f(&x, &like(&gam, v), &bet)),
    ))
    .max(worst(
        db.data(),
        &central_diff(bet.data(), |v| f(&x, &gam, &like(&bet, v))),
    ));
    out.push(("layer_norm", e));

    let (x, r) = (randn(&mut g, &[4, 6], 2.0), randn(&mut g, &[4, 6], 1.0));
    let dx = ops::gelu_backward(&x, &r);
    out.push((
        "gelu",
        worst(
            dx.data(),
            &central_diff(x.data(), |v| dot(&ops::gelu(&like(&x, v)), &r)),
        ),
    ));

    let (x, r) = (randn(&mut g, &[3, 6], 2.0), randn(&mut g, &[3, 6], 1.0));
    let dx = ops::softmax_rows_backward(&ops::softmax_rows(&x), &r);
    out.push((
        "softmax",
        worst(
            dx.data(),
            &central_diff(x.data(), |v| dot(&ops::softmax_rows(&like(&x, v)), &r)),
        ),
    ));

    let x = randn(&mut g, &[4, 5], 2.0);
    let labels: Vec<usize> = (0..4).map(|_| g.gen_range(0..5)).collect();
    let (_, dx) = ops::cross_entropy(&x, &labels).unwrap();
    out.push((
        "cross_entropy",
        worst(
            dx.data(),
            &central_diff(x.data(), |v| {
                ops::cross_entropy(&like(&x, v), &labels).unwrap().0
            }),
        ),
    ));

    let cfg = EncoderConfig {
        depth: 1,
        heads: 2,
        dim: 8,
        mlp_dim: 12,
        n_max: 8,
    };
    let mut enc = Encoder::new(cfg, seed).unwrap();
    jitter(&mut enc.params, &mut g, 0.3);
    let z = randn(&mut g, &[6, 8], 1.0);
    let r = randn(&mut g, &[6, 8], 1.0);
    for (label, attn) in [("msa", true), ("mlp_block", false)] {
        let run = |e: &Encoder, z: &Tensor| {
            if attn {
                e.attention_block(0, z).unwrap().0
            } else {
                e.mlp_block(0, z).unwrap().0
            }
        };
        enc.params.clear_grads();
        let dz = if attn {
            let (_, c) = enc.attention_block(0, &z).unwrap();
            enc.attention_block_backward(0, &c, &r)
        } else {
            let (_, c) = enc.mlp_block(0, &z).unwrap();
            enc.mlp_block_backward(0, &c, &r)
        };
        let mut e = worst(
            dz.data(),
            &central_diff(z.data(), |v| dot(&run(&enc, &like(&z, v)), &r)),
        );
        let owned = if attn {
            [".ln1.", ".attn."]
        } else {
            [".ln2.", ".mlp."]
        };
        let names: Vec<String> = enc
            .params
            .iter()
            .filter(|p| owned.iter().any(|o| p.name.contains(o)))
            .map(|p| p.name.clone())
            .collect();
        assert_eq!(names.len(), if attn { 10 } else { 6 }, "{names:?}");
        for name in names {
            let p = enc.params.by_name(&name).unwrap();
            let base = p.value.data().to_vec();
            let analytic = p
                .value
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; base.len()]);
            let mut probe = enc.clone();
            let numeric = central_diff(&base, |v| {
                probe
                    .params
                    .by_name_mut(&name)
                    .unwrap()
                    .value
                    .data_mut()
                    .copy_from_slice(v);
                dot(&run(&probe, &z), &r)
            });
            e = e.max(worst(&analytic, &numeric));
        }
        out.push((label, e));
    }
    out
}

pub struct Tiny {
    pub tok: MetaTokenizer,
    pub enc: Encoder,
    pub head: ClassificationHead,
    pub batch: Vec<Sample>,
}

/// L=2, D=16, h=2 over n=4 image tokens, three classes, two samples.
pub fn tiny(seed: u64) -> Tiny {
    let mut g = rng(seed ^ 0xABCD);
    let cfg = EncoderConfig {
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_dim: 32,
        n_max: 4,
    };
    let mut enc = Encoder::new(cfg, seed).unwrap();
    let mut tok = MetaTokenizer::new(16, seed).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )
    .unwrap();
    let mut head = ClassificationHead::new("head", 16, 3, None, seed).unwrap();
    jitter(&mut enc.params, &mut g, 0.3);
    jitter(&mut head.params, &mut g, 0.3);
    jitter(tok.params_mut(Modality::Image).unwrap(), &mut g, 0.3);
    let batch = (0..2)
        .map(|i| {
            let img = ImageInput::new(randn(&mut g, &[1, 4, 4], 1.0)).unwrap();
            Sample {
                input: tok.prepare(&ModalityInput::Image(img)).unwrap(),
                label: (i + seed as usize) % 3,
            }
        })
        .collect();
    Tiny {
        tok,
        enc,
        head,
        batch,
    }
}

fn tiny_loss(t: &Tiny) -> f64 {
    evaluate(&t.batch, &t.tok, &t.enc, &t.head, Pooling::Cls)
        .unwrap()
        .mean_loss
}

fn owner(t: &mut Tiny, o: usize) -> &mut ParamSet {
    match o {
        0 => &mut t.enc.params,
        1 => t.tok.params_mut(Modality::Image).unwrap(),
        _ => &mut t.head.params,
    }
}

/// Worst (name, rel err) over every trainable scalar of the tiny model.
pub fn model_error(seed: u64) -> (String, f64) {
    let mut t = tiny(seed);
    let refs: Vec<&Sample> = t.batch.iter().collect();
    accumulate_gradients(&refs, &mut t.tok, &mut t.enc, &mut t.head, Pooling::Cls).unwrap();
    let mut worst_seen = (String::new(), 0.0);
    for o in 0..3 {
        let entries: Vec<(String, Vec<f64>, Vec<f64>)> = owner(&mut t, o)
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let g = p
                    .value
                    .grad()
                    .expect("every trainable tensor gets a gradient");
                (p.name.clone(), p.value.data().to_vec(), g.to_vec())
            })
            .collect();
        for (name, base, analytic) in entries {
            let numeric = central_diff(&base, |v| {
                owner(&mut t, o)
                    .by_name_mut(&name)
                    .unwrap()
                    .value
                    .data_mut()
                    .copy_from_slice(v);
                tiny_loss(&t)
            });
            owner(&mut t, o)
                .by_name_mut(&name)
                .unwrap()
                .value
                .data_mut()
                .copy_from_slice(&base);
            let e = worst(&analytic, &numeric);
            if e > worst_seen.1 {
                worst_seen = (name, e);
            }
        }
    }
    worst_seen
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Greedy farthest point sampling by exhaustive rescan; first point is 0,
/// ties go to the lowest index.
pub fn fps_brute(pts: &[[f64; 3]], count: usize) -> Vec<usize> {
    let mut sel = vec![0usize];
    while sel.len() < count {
        let score = |i: usize| {
            sel.iter()
                .map(|&s| d2(&pts[i], &pts[s]))
                .fold(f64::INFINITY, f64::min)
        };
        let mut best = usize::MAX;
        for i in (0..pts.len()).filter(|i| !sel.contains(i)) {
            if best == usize::MAX || score(i) > score(best) {
                best = i;
            }
        }
        sel.push(best);
    }
    sel
}

/// Stable sort of every point by distance to the center, first `k` kept.
pub fn knn_sort(pts: &[[f64; 3]], center: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| d2(&pts[a], &pts[center]).total_cmp(&d2(&pts[b], &pts[center])));
    idx.truncate(k);
    idx
}

/// Half the clouds sit on a coarse lattice so distance ties are frequent.
pub fn cloud(g: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let lattice = g.gen_bool(0.5);
    (0..n)
        .map(|_| {
            [0; 3].map(|_| {
                if lattice {
                    g.gen_range(-2i32..=2) as f64
                } else {
                    g.gen_range(-1.0..1.0)
                }
            })
        })
        .collect()
}

/// Number of placements of a length-`w` window with stride `s` on `n` cells.
pub fn windows(n: usize, w: usize, s: usize) -> usize {
    (0..n).step_by(s).filter(|&start| start + w <= n).count()
}

/// A random encoder plus extra tensors, random flags and optimizer state.
pub fn random_parts(seed: u64) -> (Precision, Encoder, ParamSet, Option<Adam>) {
    let mut g = rng(seed);
    let heads = g.gen_range(1..=3);
    let cfg = EncoderConfig {
        depth: g.gen_range(1..=2),
        heads,
        dim: heads * g.gen_range(1..=4),
        mlp_dim: g.gen_range(1..=6),
        n_max: g.gen_range(1..=6),
    };
    let mut enc = Encoder::new(cfg, seed).unwrap();
    jitter(&mut enc.params, &mut g, 2.0);
    if g.gen_bool(0.5) {
        enc.freeze();
    }
    let mut extra = ParamSet::new();
    for i in 0..g.gen_range(0..5) {
        let shape: Vec<usize> = (0..g.gen_range(1..=3))
            .map(|_| g.gen_range(1..=4))
            .collect();
        let id = extra
            .add(format!("extra.{i}"), randn(&mut g, &shape, 1e3))
            .unwrap();
        extra.param_mut(id).trainable = g.gen_bool(0.5);
    }
    let precision = if g.gen_bool(0.5) {
        Precision::F32
    } else {
        Precision::F64
    };
    let opt = g.gen_bool(0.5).then(|| {
        let mut o = Adam::new(g.gen_range(1e-5..1e-1));
        o.step = g.gen_range(0..10_000);
        for p in extra.iter() {
            let n = p.value.len();
            o.moments.insert(
                p.name.clone(),
                Moments {
                    first: (0..n).map(|_| g.gen_range(-1.0..1.0)).collect(),
                    second: (0..n).map(|_| g.gen()).collect(),
                },
            );
        }
        o
    });
    (precision, enc, extra, opt)
}
