//! Built-in invariant suites behind the `selftest` command.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::head::{accumulate_gradients, evaluate, ClassificationHead, Pooling, Sample, Trainer};
use crate::ops;
use crate::optim::Adam;
use crate::tensor::{ParamSet, Precision, Tensor};
use crate::tokenizer::patch::sliding_count;
use crate::tokenizer::point::{fps_indices, knn_indices, PointCloud};
use crate::tokenizer::text::Vocabulary;
use crate::tokenizer::{
    AudioSettings, ImageInput, ImageSettings, MetaTokenizer, Modality, ModalityInput,
    PointSettings, VideoInput, VideoSettings,
};

pub const FD_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
/// Some gradients are exactly zero (a key bias only shifts every logit of a
/// softmax row), and central differences leave ~1e-10 of rounding there.
pub const FD_FLOOR: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * normal(rng)).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("valid shape")
}

/// Per-op gradient checks for one seed. Returns (label, max rel err) pairs.
pub fn layer_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let (a, b, r) = (
        randn(&mut rng, &[3, 4], 1.0),
        randn(&mut rng, &[4, 2], 1.0),
        randn(&mut rng, &[3, 2], 1.0),
    );
    let (da, db) = ops::matmul_backward(&a, &b, &r);
    let na = numeric_gradient(a.data(), |x| {
        weighted_sum(&ops::matmul(&t(&[3, 4], x), &b).unwrap(), &r)
    });
    let nb = numeric_gradient(b.data(), |x| {
        weighted_sum(&ops::matmul(&a, &t(&[4, 2], x)).unwrap(), &r)
    });
    out.push((
        "matmul",
        max_relative_error(da.data(), &na).max(max_relative_error(db.data(), &nb)),
    ));

    let (x, w, bias, r) = (
        randn(&mut rng, &[4, 3], 1.0),
        randn(&mut rng, &[3, 2], 1.0),
        randn(&mut rng, &[2], 1.0),
        randn(&mut rng, &[4, 2], 1.0),
    );
    let (dx, dw, dbias) = ops::linear_backward(&x, &w, &r);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| weighted_sum(&ops::linear(x, w, b).unwrap(), &r);
    let nx = numeric_gradient(x.data(), |v| f(&t(&[4, 3], v), &w, &bias));
    let nw = numeric_gradient(w.data(), |v| f(&x, &t(&[3, 2], v), &bias));
    let nbias = numeric_gradient(bias.data(), |v| f(&x, &w, &t(&[2], v)));
    out.push((
        "linear",
        max_relative_error(dx.data(), &nx)
            .max(max_relative_error(dw.data(), &nw))
            .max(max_relative_error(dbias.data(), &nbias)),
    ));

    let (x, g, b, r) = (
        randn(&mut rng, &[3, 6], 1.0),
        randn(&mut rng, &[6], 1.0),
        randn(&mut rng, &[6], 1.0),
        randn(&mut rng, &[3, 6], 1.0),
    );
    let eps = crate::layers::LN_EPS;
    let (_, cache) = ops::layer_norm(&x, &g, &b, eps)?;
    let (dx, dg, db) = ops::layer_norm_backward(&cache, &g, &r);
    let f = |x: &Tensor, g: &Tensor, b: &Tensor| {
        weighted_sum(&ops::layer_norm(x, g, b, eps).unwrap().0, &r)
    };
    let nx = numeric_gradient(x.data(), |v| f(&t(&[3, 6], v), &g, &b));
    let ng = numeric_gradient(g.data(), |v| f(&x, &t(&[6], v), &b));
    let nb = numeric_gradient(b.data(), |v| f(&x, &g, &t(&[6], v)));
    out.push((
        "layer_norm",
        max_relative_error(dx.data(), &nx)
            .max(max_relative_error(dg.data(), &ng))
            .max(max_relative_error(db.data(), &nb)),
    ));

    let (x, r) = (randn(&mut rng, &[5, 4], 1.5), randn(&mut rng, &[5, 4], 1.0));
    let dx = ops::gelu_backward(&x, &r);
    let nx = numeric_gradient(x.data(), |v| weighted_sum(&ops::gelu(&t(&[5, 4], v)), &r));
    out.push(("gelu", max_relative_error(dx.data(), &nx)));

    let (x, r) = (randn(&mut rng, &[3, 5], 2.0), randn(&mut rng, &[3, 5], 1.0));
    let dx = ops::softmax_rows_backward(&ops::softmax_rows(&x), &r);
    let nx = numeric_gradient(x.data(), |v| {
        weighted_sum(&ops::softmax_rows(&t(&[3, 5], v)), &r)
    });
    out.push(("softmax", max_relative_error(dx.data(), &nx)));

    let x = randn(&mut rng, &[3, 5], 2.0);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    let (_, dx) = ops::cross_entropy(&x, &labels)?;
    let nx = numeric_gradient(x.data(), |v| {
        ops::cross_entropy(&t(&[3, 5], v), &labels).unwrap().0
    });
    out.push(("cross_entropy", max_relative_error(dx.data(), &nx)));

    let cfg = EncoderConfig {
        depth: 1,
        heads: 2,
        dim: 8,
        mlp_dim: 16,
        n_max: 8,
    };
    let mut enc = Encoder::new(cfg, seed)?;
    jitter_params(&mut enc.params, &mut rng, 0.3);
    let z = randn(&mut rng, &[5, 8], 1.0);
    let r = randn(&mut rng, &[5, 8], 1.0);
    for (label, attention) in [("msa", true), ("mlp", false)] {
        enc.params.clear_grads();
        let block = |e: &Encoder, z: &Tensor| -> Tensor {
            if attention {
                e.attention_block(0, z).unwrap().0
            } else {
                e.mlp_block(0, z).unwrap().0
            }
        };
        let dz = if attention {
            let (_, c) = enc.attention_block(0, &z)?;
            enc.attention_block_backward(0, &c, &r)
        } else {
            let (_, c) = enc.mlp_block(0, &z)?;
            enc.mlp_block_backward(0, &c, &r)
        };
        let nz = numeric_gradient(z.data(), |v| weighted_sum(&block(&enc, &t(&[5, 8], v)), &r));
        let mut err = max_relative_error(dz.data(), &nz);
        let names: Vec<String> = enc
            .params
            .iter()
            .filter(|p| p.value.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)))
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let p = enc.params.by_name(&name).expect("listed");
            let analytic = p.value.grad().expect("filtered").to_vec();
            let base = p.value.data().to_vec();
            let mut probe = enc.clone();
            let numeric = numeric_gradient(&base, |v| {
                probe
                    .params
                    .by_name_mut(&name)
                    .expect("listed")
                    .value
                    .data_mut()
                    .copy_from_slice(v);
                weighted_sum(&block(&probe, &z), &r)
            });
            err = err.max(max_relative_error(&analytic, &numeric));
        }
        out.push((label, err));
    }
    Ok(out)
}

fn jitter_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v += scale * normal(rng);
        }
    }
}

/// Tiny image model: tokenizer, encoder, head, and a two-sample batch.
pub struct TinyModel {
    pub tokenizer: MetaTokenizer,
    pub encoder: Encoder,
    pub head: ClassificationHead,
    pub batch: Vec<Sample>,
}

/// L=2, D=16, h=2 backbone over 4 image tokens (4×4 pixels, 2×2 patches),
/// three classes, parameters spread away from their initial scale so that
/// every gradient is comfortably nonzero.
pub fn tiny_model(seed: u64) -> Result<TinyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_dim: 32,
        n_max: 4,
    };
    let mut encoder = Encoder::new(cfg, seed)?;
    let mut tokenizer = MetaTokenizer::new(16, seed)?;
    tokenizer.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        4,
    )?;
    let mut head = ClassificationHead::new("head", 16, 3, None, seed)?;
    jitter_params(&mut encoder.params, &mut rng, 0.3);
    jitter_params(&mut head.params, &mut rng, 0.3);
    jitter_params(
        tokenizer.params_mut(Modality::Image).expect("registered"),
        &mut rng,
        0.3,
    );
    let batch = (0..2)
        .map(|i| {
            let img = ImageInput::new(randn(&mut rng, &[1, 4, 4], 1.0))?;
            Ok(Sample {
                input: tokenizer.prepare(&ModalityInput::Image(img))?,
                label: i % 3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TinyModel {
        tokenizer,
        encoder,
        head,
        batch,
    })
}

fn model_loss(m: &TinyModel) -> f64 {
    evaluate(&m.batch, &m.tokenizer, &m.encoder, &m.head, Pooling::Cls)
        .expect("tiny model evaluates")
        .mean_loss
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Owner {
    Encoder,
    Tokenizer,
    Head,
}

fn owner_set(m: &mut TinyModel, o: Owner) -> &mut ParamSet {
    match o {
        Owner::Encoder => &mut m.encoder.params,
        Owner::Tokenizer => m.tokenizer.params_mut(Modality::Image).expect("registered"),
        Owner::Head => &mut m.head.params,
    }
}

/// Max relative error between backprop and central differences over every
/// trainable parameter of the tiny model, per parameter name.
pub fn model_gradient_errors(m: &mut TinyModel) -> Result<Vec<(String, f64)>> {
    for o in [Owner::Encoder, Owner::Tokenizer, Owner::Head] {
        owner_set(m, o).clear_grads();
    }
    let refs: Vec<&Sample> = m.batch.iter().collect();
    accumulate_gradients(
        &refs,
        &mut m.tokenizer,
        &mut m.encoder,
        &mut m.head,
        Pooling::Cls,
    )?;
    let mut out = Vec::new();
    for o in [Owner::Encoder, Owner::Tokenizer, Owner::Head] {
        let entries: Vec<(String, Vec<f64>, Vec<f64>)> = owner_set(m, o)
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.data().to_vec(),
                    p.value.grad().map(<[f64]>::to_vec).unwrap_or_default(),
                )
            })
            .collect();
        for (name, base, analytic) in entries {
            if analytic.len() != base.len() {
                out.push((name, f64::INFINITY));
                continue;
            }
            let numeric = numeric_gradient(&base, |v| {
                owner_set(m, o)
                    .by_name_mut(&name)
                    .expect("listed")
                    .value
                    .data_mut()
                    .copy_from_slice(v);
                model_loss(m)
            });
            owner_set(m, o)
                .by_name_mut(&name)
                .expect("listed")
                .value
                .data_mut()
                .copy_from_slice(&base);
            out.push((name, max_relative_error(&analytic, &numeric)));
        }
    }
    Ok(out)
}

pub fn gradient_suite(seeds: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport {
        name: "gradients",
        ..Default::default()
    };
    for seed in 0..seeds {
        match layer_gradient_errors(seed) {
            Ok(errs) => {
                for (label, e) in errs {
                    rep.check(e < LAYER_TOLERANCE, || {
                        format!("{label} seed {seed}: rel err {e:.3e}")
                    });
                }
            }
            Err(e) => rep.check(false, || format!("layer checks seed {seed}: {e}")),
        }
        let res = tiny_model(seed).and_then(|mut m| model_gradient_errors(&mut m));
        match res {
            Ok(errs) => {
                let (name, worst) =
                    errs.into_iter()
                        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
                rep.check(worst < MODEL_TOLERANCE, || {
                    format!("end-to-end seed {seed}: {name} rel err {worst:.3e}")
                });
            }
            Err(e) => rep.check(false, || format!("end-to-end seed {seed}: {e}")),
        }
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

/// Greedy FPS by exhaustive search each round.
pub fn fps_oracle(coords: &[[f64; 3]], count: usize) -> Vec<usize> {
    let d2 =
        |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>();
    let mut chosen = vec![0];
    while chosen.len() < count {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..coords.len() {
            if chosen.contains(&i) {
                continue;
            }
            let m = chosen
                .iter()
                .map(|&c| d2(&coords[i], &coords[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bm, _)| m > bm) {
                best = Some((m, i));
            }
        }
        chosen.push(best.expect("candidate left").1);
    }
    chosen
}

/// All points sorted by (squared distance, index), first `k` kept.
pub fn knn_oracle(coords: &[[f64; 3]], center: usize, k: usize) -> Vec<usize> {
    let c = coords[center];
    let mut all: Vec<(f64, usize)> = coords
        .iter()
        .enumerate()
        .map(|(i, p)| ((0..3).map(|j| (p[j] - c[j]) * (p[j] - c[j])).sum(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Coordinates on a coarse integer grid half the time, so ties are common.
pub fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let grid = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            [0; 3].map(|_| {
                if grid {
                    rng.gen_range(-2..=2) as f64
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
        })
        .collect()
}

pub fn fps_knn_suite(seeds: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport {
        name: "fps_knn",
        ..Default::default()
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.gen_range(1..=16);
        let coords = random_coords(&mut rng, p);
        let count = rng.gen_range(1..=p);
        let got = fps_indices(&coords, count).ok();
        let want = fps_oracle(&coords, count);
        rep.check(got.as_ref() == Some(&want), || {
            format!("fps seed {seed}: {got:?} != {want:?}")
        });

        let p = rng.gen_range(1..=64);
        let coords = random_coords(&mut rng, p);
        let k = rng.gen_range(1..=p);
        let mut centers: Vec<usize> = (0..p).collect();
        centers.shuffle(&mut rng);
        centers.truncate(rng.gen_range(1..=p));
        let got = knn_indices(&coords, &centers, k).ok();
        let want: Vec<Vec<usize>> = centers.iter().map(|&c| knn_oracle(&coords, c, k)).collect();
        rep.check(got.as_ref() == Some(&want), || {
            format!("knn seed {seed}: mismatch")
        });
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

/// One random valid tokenizer configuration and its expected (tokens, dim).
pub fn shape_case(seed: u64) -> Result<(Modality, usize, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 2 * rng.gen_range(1..=8);
    let mut tok = MetaTokenizer::new(d, seed)?;
    let (input, expected) = match rng.gen_range(0..5) {
        0 => {
            let (c, s) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
            let (h, w) = (s * rng.gen_range(1..=4), s * rng.gen_range(1..=4));
            tok.register_image(
                ImageSettings {
                    channels: c,
                    patch: s,
                },
                64,
            )?;
            let img = ImageInput::new(randn(&mut rng, &[c, h, w], 1.0))?;
            (ModalityInput::Image(img), h * w / (s * s))
        }
        1 => {
            let (c, st, s) = (
                rng.gen_range(1..=2),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
            );
            let (f, h, w) = (
                st * rng.gen_range(1..=3),
                s * rng.gen_range(1..=3),
                s * rng.gen_range(1..=3),
            );
            tok.register_video(
                VideoSettings {
                    channels: c,
                    t_patch: st,
                    patch: s,
                },
                128,
            )?;
            let v = VideoInput::new(randn(&mut rng, &[f, c, h, w], 1.0))?;
            (ModalityInput::Video(v), (f / st) * (h * w / (s * s)))
        }
        2 => {
            let (h, w, bands) = (
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
                rng.gen_range(1..=6),
            );
            tok.register_hyperspectral(bands, 32)?;
            (
                ModalityInput::Hyperspectral(randn(&mut rng, &[h, w, bands], 1.0)),
                h * w,
            )
        }
        3 => {
            let p = 16 * rng.gen_range(1..=4);
            let k = rng.gen_range(1..=8);
            tok.register_point_cloud(PointSettings { feature_dim: 0, k }, 8)?;
            let coords = random_coords(&mut rng, p);
            (
                ModalityInput::PointCloud(PointCloud::from_xyz(&coords)?),
                p / 16,
            )
        }
        _ => {
            let s = rng.gen_range(2..=6);
            let (ts, fs) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (frames, bins) = (s + rng.gen_range(0..12), s + rng.gen_range(0..12));
            let settings = AudioSettings {
                patch: s,
                time_stride: ts,
                freq_stride: fs,
                spectrogram: crate::tokenizer::audio::SpectrogramSpec {
                    mel_bins: bins,
                    ..Default::default()
                },
                ..Default::default()
            };
            tok.register_audio(settings, 256)?;
            let n = sliding_count(frames, s, ts) * sliding_count(bins, s, fs);
            (
                ModalityInput::Spectrogram(randn(&mut rng, &[frames, bins], 1.0)),
                n,
            )
        }
    };
    let seq = tok.tokenize(&input)?;
    if seq.dim() != d {
        return Ok((input.modality(), seq.len(), expected, usize::MAX));
    }
    Ok((input.modality(), seq.len(), expected, d))
}

pub fn shape_suite(cases: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport {
        name: "shape_laws",
        ..Default::default()
    };
    for seed in 0..cases {
        match shape_case(seed) {
            Ok((m, got, want, dim)) => rep.check(got == want && dim != usize::MAX, || {
                format!("{m} case {seed}: {got} tokens, expected {want}")
            }),
            Err(e) => rep.check(false, || format!("case {seed}: {e}")),
        }
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

/// Frozen tiny backbone trained on image, point, and text batches.
/// Returns (backbone unchanged, every tokenizer and head changed).
pub fn freeze_run(steps_per_modality: usize, seed: u64) -> Result<(bool, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        depth: 1,
        heads: 2,
        dim: 8,
        mlp_dim: 16,
        n_max: 16,
    };
    let mut encoder = Encoder::new(cfg, seed)?;
    encoder.freeze();
    let before = encoder.digest();
    let mut tok = MetaTokenizer::new(8, seed)?;
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        16,
    )?;
    tok.register_point_cloud(
        PointSettings {
            feature_dim: 0,
            k: 4,
        },
        4,
    )?;
    tok.register_text(Vocabulary::build(&["red blue", "green"], 64, "_")?, 8)?;
    let inputs: Vec<Vec<(ModalityInput, usize)>> = vec![
        (0..4)
            .map(|i| {
                Ok((
                    ModalityInput::Image(ImageInput::new(randn(&mut rng, &[1, 4, 4], 1.0))?),
                    i % 2,
                ))
            })
            .collect::<Result<_>>()?,
        (0..4)
            .map(|i| {
                Ok((
                    ModalityInput::PointCloud(PointCloud::from_xyz(&random_coords(&mut rng, 32))?),
                    i % 2,
                ))
            })
            .collect::<Result<_>>()?,
        ["red", "blue green", "green red", "blue"]
            .iter()
            .enumerate()
            .map(|(i, s)| (ModalityInput::Text(s.to_string()), i % 2))
            .collect(),
    ];
    let mut all_changed = true;
    for (idx, set) in inputs.into_iter().enumerate() {
        let data: Vec<Sample> = set
            .iter()
            .map(|(x, l)| {
                Ok(Sample {
                    input: tok.prepare(x)?,
                    label: *l,
                })
            })
            .collect::<Result<_>>()?;
        let modality = data[0].input.modality;
        let mut head = ClassificationHead::new("head", 8, 2, None, seed + idx as u64)?;
        let tok_before = tok.params(modality).expect("registered").digest();
        let head_before = head.params.digest();
        let mut opt = Adam::new(1e-2);
        Trainer {
            tokenizer: &mut tok,
            encoder: &mut encoder,
            head: &mut head,
            optimizer: &mut opt,
            pooling: Pooling::Cls,
        }
        .fit(&data, steps_per_modality, 2, seed)?;
        all_changed &= tok.params(modality).expect("registered").digest() != tok_before;
        all_changed &= head.params.digest() != head_before;
    }
    Ok((encoder.digest() == before, all_changed))
}

pub fn freeze_suite(steps_per_modality: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport {
        name: "freeze",
        ..Default::default()
    };
    match freeze_run(steps_per_modality, 5) {
        Ok((frozen_ok, trained)) => {
            rep.check(frozen_ok, || "frozen backbone digest changed".into());
            rep.check(trained, || "a tokenizer or head did not change".into());
        }
        Err(e) => rep.check(false, || format!("freeze run: {e}")),
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

/// A checkpoint with random shapes, values, flags, and optimizer state.
pub fn random_checkpoint(seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..=3);
    let cfg = EncoderConfig {
        depth: rng.gen_range(1..=2),
        heads,
        dim: heads * rng.gen_range(1..=4),
        mlp_dim: rng.gen_range(1..=8),
        n_max: rng.gen_range(1..=8),
    };
    let mut enc = Encoder::new(cfg, seed)?;
    jitter_params(&mut enc.params, &mut rng, 1.0);
    if rng.gen_bool(0.5) {
        enc.freeze();
    }
    let mut extra = ParamSet::new();
    for i in 0..rng.gen_range(0..4) {
        let rank = rng.gen_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
        let id = extra.add(format!("extra.{i}"), randn(&mut rng, &shape, 10.0))?;
        extra.param_mut(id).trainable = rng.gen_bool(0.5);
    }
    let precision = if rng.gen_bool(0.5) {
        Precision::F32
    } else {
        Precision::F64
    };
    let opt = if rng.gen_bool(0.5) {
        let mut o = Adam::new(rng.gen_range(0.0..0.1));
        o.step = rng.gen_range(0..1000);
        for p in extra.iter() {
            let n = p.value.len();
            o.moments.insert(
                p.name.clone(),
                crate::optim::Moments {
                    first: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    second: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                },
            );
        }
        Some(o.with_precision(precision))
    } else {
        None
    };
    let mut ck = Checkpoint::capture(precision, &enc, [&extra], opt.as_ref(), rng.gen())?;
    ck.rng_word_pos = rng.gen();
    Ok(ck)
}

pub fn checkpoint_suite(cases: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport {
        name: "checkpoint",
        ..Default::default()
    };
    for seed in 0..cases {
        let ok = random_checkpoint(seed).and_then(|ck| {
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes)?;
            Ok(back.to_bytes() == bytes && back == ck)
        });
        rep.check(matches!(ok, Ok(true)), || {
            format!("round trip seed {seed}: {ok:?}")
        });
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

pub fn run_all() -> Vec<SuiteReport> {
    vec![
        gradient_suite(20),
        fps_knn_suite(200),
        shape_suite(200),
        freeze_suite(20),
        checkpoint_suite(20),
    ]
}
