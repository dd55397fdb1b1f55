//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::time::Instant;

use omnitok::checkpoint::Checkpoint;
use omnitok::encoder::{Encoder, EncoderConfig};
use omnitok::harness::Stage;
use omnitok::tokenizer::audio::SpectrogramSpec;
use omnitok::tokenizer::point::{fps_indices, knn_indices, PointCloud};
use omnitok::tokenizer::text::Vocabulary;
use omnitok::tokenizer::{
    AudioSettings, ImageInput, ImageSettings, MetaTokenizer, Modality, ModalityInput,
    PointSettings, VideoInput, VideoSettings,
};
use omnitok::{
    run_transfer_experiment, Adam, ClassificationHead, ExperimentReport, Pooling, RunConfig,
    Sample, Tensor, Trainer,
};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut layer_worst, mut model_worst) = (("", 0.0f64), (String::new(), 0.0f64));
    for seed in 0..20 {
        for (label, e) in common::layer_errors(seed) {
            if e > layer_worst.1 {
                layer_worst = (label, e);
            }
        }
        let (name, e) = common::model_error(seed);
        if e > model_worst.1 {
            model_worst = (name, e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        layer_worst.1 < 1e-5 && model_worst.1 < 1e-4 && secs < 60.0,
        format!(
            "20 seeds; worst layer {} {:.2e} (< 1e-5); worst end-to-end {} {:.2e} (< 1e-4); {secs:.1} s (< 60)",
            layer_worst.0, layer_worst.1, model_worst.0, model_worst.1
        ),
    )
}

/// A random valid configuration, its token count, and the count the shape
/// law predicts.
fn shape_case(seed: u64) -> (Modality, usize, usize) {
    let mut g = common::rng(seed);
    let d = 2 * g.gen_range(1..=6);
    let mut tok = MetaTokenizer::new(d, seed).unwrap();
    let z = Tensor::zeros;
    let (input, want) = match seed % 5 {
        0 => {
            let (c, s) = (g.gen_range(1..=3), g.gen_range(1..=6));
            let (h, w) = (s * g.gen_range(1..=5), s * g.gen_range(1..=5));
            tok.register_image(
                ImageSettings {
                    channels: c,
                    patch: s,
                },
                32,
            )
            .unwrap();
            (
                ModalityInput::Image(ImageInput::new(z(&[c, h, w])).unwrap()),
                h * w / (s * s),
            )
        }
        1 => {
            let (st, s) = (g.gen_range(1..=3), g.gen_range(1..=3));
            let (f, h, w) = (
                st * g.gen_range(1..=3),
                s * g.gen_range(1..=3),
                s * g.gen_range(1..=3),
            );
            tok.register_video(
                VideoSettings {
                    channels: 1,
                    t_patch: st,
                    patch: s,
                },
                32,
            )
            .unwrap();
            (
                ModalityInput::Video(VideoInput::new(z(&[f, 1, h, w])).unwrap()),
                (f / st) * (h * w / (s * s)),
            )
        }
        2 => {
            let p = 16 * g.gen_range(1..=6);
            tok.register_point_cloud(
                PointSettings {
                    feature_dim: 0,
                    k: g.gen_range(1..=10),
                },
                8,
            )
            .unwrap();
            let cloud = PointCloud::from_xyz(&common::cloud(&mut g, p)).unwrap();
            (ModalityInput::PointCloud(cloud), p / 16)
        }
        3 => {
            let s = g.gen_range(2..=8);
            let (ts, fs) = (g.gen_range(1..=5), g.gen_range(1..=5));
            let (t, f) = (s + g.gen_range(0..20), s + g.gen_range(0..20));
            let settings = AudioSettings {
                patch: s,
                time_stride: ts,
                freq_stride: fs,
                spectrogram: SpectrogramSpec {
                    mel_bins: f,
                    ..Default::default()
                },
                ..Default::default()
            };
            tok.register_audio(settings, 512).unwrap();
            (
                ModalityInput::Spectrogram(z(&[t, f])),
                common::windows(t, s, ts) * common::windows(f, s, fs),
            )
        }
        _ => {
            let (h, w, b) = (g.gen_range(1..=6), g.gen_range(1..=6), g.gen_range(1..=8));
            tok.register_hyperspectral(b, 64).unwrap();
            (ModalityInput::Hyperspectral(z(&[h, w, b])), h * w)
        }
    };
    let seq = tok.tokenize(&input).unwrap();
    let got = if seq.dim() == d {
        seq.len()
    } else {
        usize::MAX
    };
    (input.modality(), got, want)
}

fn shape_laws() -> Outcome {
    let start = Instant::now();
    let failures: Vec<String> = (0..1000)
        .map(shape_case)
        .enumerate()
        .filter(|(_, (_, got, want))| got != want)
        .map(|(i, (m, got, want))| format!("case {i} {m}: {got} != {want}"))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 30.0,
        format!(
            "1000 configs, {} failures {:?}; {secs:.2} s (< 30)",
            failures.len(),
            failures.first()
        ),
    )
}

fn sampling_oracles() -> Outcome {
    let start = Instant::now();
    let (mut fps_bad, mut knn_bad, mut checks) = (0, 0, 0);
    for seed in 0..200 {
        let mut g = common::rng(seed);
        let n = g.gen_range(1..=16);
        let pts = common::cloud(&mut g, n);
        for count in 1..=n {
            checks += 1;
            fps_bad +=
                usize::from(fps_indices(&pts, count).unwrap() != common::fps_brute(&pts, count));
        }
        let n = g.gen_range(1..=64);
        let pts = common::cloud(&mut g, n);
        let k = g.gen_range(1..=n);
        let centers: Vec<usize> = (0..n).collect();
        let want: Vec<Vec<usize>> = centers
            .iter()
            .map(|&c| common::knn_sort(&pts, c, k))
            .collect();
        checks += 1;
        knn_bad += usize::from(knn_indices(&pts, &centers, k).unwrap() != want);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        fps_bad == 0 && knn_bad == 0 && secs < 30.0,
        format!("200 seeds, {checks} comparisons; fps mismatches {fps_bad}, knn mismatches {knn_bad}; {secs:.2} s (< 30)"),
    )
}

fn freeze_invariant() -> Outcome {
    let start = Instant::now();
    let mut g = common::rng(31);
    let d = 16;
    let cfg = EncoderConfig {
        depth: 2,
        heads: 2,
        dim: d,
        mlp_dim: 32,
        n_max: 16,
    };
    let mut enc = Encoder::new(cfg, 31).unwrap();
    enc.freeze();
    let snapshot: Vec<Vec<u64>> = enc
        .params
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let digest = enc.digest();

    let mut tok = MetaTokenizer::new(d, 31).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 1,
            patch: 2,
        },
        16,
    )
    .unwrap();
    tok.register_point_cloud(
        PointSettings {
            feature_dim: 0,
            k: 4,
        },
        4,
    )
    .unwrap();
    tok.register_text(
        Vocabulary::build(&["alpha beta gamma delta"], 32, "_").unwrap(),
        8,
    )
    .unwrap();
    let spec = SpectrogramSpec {
        mel_bins: 8,
        ..Default::default()
    };
    tok.register_audio(
        AudioSettings {
            patch: 4,
            time_stride: 2,
            freq_stride: 4,
            spectrogram: spec,
            ..Default::default()
        },
        16,
    )
    .unwrap();

    let words = ["alpha", "beta", "gamma", "delta"];
    let inputs = |g: &mut rand_chacha::ChaCha8Rng, m: usize, label: usize| match m {
        0 => ModalityInput::Image(
            ImageInput::new(common::randn(g, &[1, 4, 4], 1.0 + label as f64)).unwrap(),
        ),
        1 => ModalityInput::PointCloud(PointCloud::from_xyz(&common::cloud(g, 32)).unwrap()),
        2 => ModalityInput::Text(format!("{} {}", words[label * 2], words.choose(g).unwrap())),
        _ => ModalityInput::Spectrogram(common::randn(g, &[10, 8], 1.0 + label as f64)),
    };
    let (mut steps, mut changed, mut modalities) = (0, true, Vec::new());
    for m in 0..4 {
        let data: Vec<Sample> = (0..8)
            .map(|i| Sample {
                input: tok.prepare(&inputs(&mut g, m, i % 2)).unwrap(),
                label: i % 2,
            })
            .collect();
        let modality = data[0].input.modality;
        let mut head = ClassificationHead::new("head", d, 2, None, m as u64).unwrap();
        let (tok_before, head_before) =
            (tok.params(modality).unwrap().digest(), head.params.digest());
        let mut opt = Adam::new(1e-2);
        let run = Trainer {
            tokenizer: &mut tok,
            encoder: &mut enc,
            head: &mut head,
            optimizer: &mut opt,
            pooling: Pooling::Cls,
        }
        .fit(&data, 125, 4, m as u64)
        .unwrap();
        steps += run.history.len();
        changed &= tok.params(modality).unwrap().digest() != tok_before
            && head.params.digest() != head_before;
        modalities.push(modality.to_string());
    }
    let bitwise = enc.params.iter().zip(&snapshot).all(|(p, s)| {
        p.value
            .data()
            .iter()
            .map(|v| v.to_bits())
            .eq(s.iter().copied())
    });
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bitwise && enc.digest() == digest && changed && steps >= 500 && secs < 120.0,
        format!(
            "{steps} steps over {}; backbone bitwise unchanged {bitwise}; tokenizer and head digests changed {changed}; {secs:.1} s (< 120)",
            modalities.join("/")
        ),
    )
}

fn transfer(report: &ExperimentReport, cfg: &RunConfig) -> Outcome {
    let pre = report.stage(Stage::Pretrain, Modality::Image).unwrap();
    let mut ok = cfg.encoder.depth == 2 && cfg.encoder.dim == 64 && pre.train_accuracy >= 0.95;
    let mut parts = vec![format!(
        "L={} D={} pretrain train acc {:.3} (>= 0.95)",
        cfg.encoder.depth, cfg.encoder.dim, pre.train_accuracy
    )];
    for m in [Modality::PointCloud, Modality::Audio, Modality::Text] {
        match report.stage(Stage::Transfer, m) {
            Some(s) => {
                ok &= s.test_accuracy >= 0.80 && s.test_accuracy >= s.floor && s.freeze_held();
                parts.push(format!("{m} held-out {:.3} (>= 0.80)", s.test_accuracy));
            }
            None => {
                ok = false;
                parts.push(format!("{m} missing"));
            }
        }
    }
    ok &= report.freeze_held() && report.wall_clock_secs < 600.0;
    parts.push(format!(
        "freeze held {}; {:.1} s (< 600)",
        report.freeze_held(),
        report.wall_clock_secs
    ));
    outcome(ok, parts.join("; "))
}

fn determinism(a: &ExperimentReport, b: &ExperimentReport) -> Outcome {
    let same: Vec<bool> = a
        .stages
        .iter()
        .zip(&b.stages)
        .map(|(x, y)| x.metrics_csv().into_bytes() == y.metrics_csv().into_bytes())
        .collect();
    let ok =
        a.stages.len() == b.stages.len() && same.iter().all(|&s| s) && a.to_csv() == b.to_csv();
    let bytes: usize = a.stages.iter().map(|s| s.metrics_csv().len()).sum();
    outcome(
        ok,
        format!(
            "{} metrics CSVs ({bytes} bytes) and report CSV identical across two runs: {ok}",
            a.stages.len()
        ),
    )
}

fn checkpoints() -> Outcome {
    let start = Instant::now();
    let mut bad = 0;
    for seed in 0..50 {
        let (prec, enc, extra, opt) = common::random_parts(1000 + seed);
        let ck = Checkpoint::capture(prec, &enc, [&extra], opt.as_ref(), seed).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        bad += usize::from(
            back.to_bytes() != bytes
                || back.build_encoder().unwrap().digest() != ck.build_encoder().unwrap().digest(),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 10.0,
        format!("50 randomized parameter sets, {bad} mismatches; {secs:.2} s (< 10)"),
    )
}

fn tokenizer_fidelity() -> Outcome {
    let units = [
        "_The", "_super", "market", "_is", "_host", "ing", "_a", "_sale",
    ];
    let vocab = Vocabulary::new(units.iter().map(|s| s.to_string()).collect(), "_").unwrap();
    let pieces = vocab
        .segment("The supermarket is hosting a sale")
        .unwrap()
        .join(" ");
    let want = "_The _super market _is _host ing _a _sale";

    let mut tok = MetaTokenizer::new(8, 0).unwrap();
    tok.register_image(
        ImageSettings {
            channels: 3,
            patch: 16,
        },
        196,
    )
    .unwrap();
    let img = ImageInput::new(Tensor::zeros(&[3, 224, 224])).unwrap();
    let image_tokens = tok.tokenize(&ModalityInput::Image(img)).unwrap().len();

    tok.register_point_cloud(
        PointSettings {
            feature_dim: 0,
            k: 16,
        },
        64,
    )
    .unwrap();
    let cloud = PointCloud::from_xyz(&common::cloud(&mut common::rng(2), 1024)).unwrap();
    let point_tokens = tok
        .tokenize(&ModalityInput::PointCloud(cloud))
        .unwrap()
        .len();

    outcome(
        pieces == want && image_tokens == 196 && point_tokens == 64,
        format!(
            "\"{pieces}\"; 224x224/16 -> {image_tokens} tokens; P=1024 -> {point_tokens} tokens"
        ),
    )
}

fn fusion(report: &ExperimentReport) -> Outcome {
    match report.stage(Stage::Fusion, Modality::Fused) {
        Some(s) => {
            let floor = 1.0 / s.classes as f64 + 0.2;
            outcome(
                s.test_accuracy >= floor && s.freeze_held() && s.seconds < 300.0,
                format!(
                    "K={} held-out {:.3} (>= {floor:.2}); backbone unchanged {}; {:.1} s (< 300)",
                    s.classes,
                    s.test_accuracy,
                    s.freeze_held(),
                    s.seconds
                ),
            )
        }
        None => outcome(false, "fusion stage missing from report"),
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 gradient suite", gradients()),
        ("2 shape laws", shape_laws()),
        ("3 FPS/KNN oracles", sampling_oracles()),
        ("4 freeze invariant", freeze_invariant()),
    ];
    let cfg = RunConfig::desk();
    let first = run_transfer_experiment(&cfg).expect("transfer experiment runs");
    let second = run_transfer_experiment(&cfg).expect("transfer experiment reruns");
    results.push(("5 transfer experiment", transfer(&first, &cfg)));
    results.push(("6 determinism", determinism(&first, &second)));
    results.push(("7 checkpoint round trip", checkpoints()));
    results.push(("8 tokenizer fidelity", tokenizer_fidelity()));
    results.push(("9 multimodal fusion", fusion(&first)));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "acceptance {name}: {} - {}",
            if o.ok { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.ok);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
