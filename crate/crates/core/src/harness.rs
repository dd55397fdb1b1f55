//! Synthetic labeled datasets and the staged freeze-and-transfer experiment.
//!
//! Stage order: supervised image pretraining with the backbone trainable,
//! freeze, then one tokenizer + head per remaining modality, then optional
//! image+audio fusion. Floors are checked and reported; a missed floor is
//! not an error.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::write_atomic;
use crate::config::{AudioTaskConfig, ImageTaskConfig, PointTaskConfig, RunConfig, TextTaskConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::head::{
    evaluate, metrics_csv, ClassificationHead, Pooling, Sample, StepRecord, Trainer,
};
use crate::optim::Adam;
use crate::tensor::{Precision, Tensor};
use crate::tokenizer::audio::{compute_log_mel_spectrogram, AudioInput, SpectrogramSpec};
use crate::tokenizer::point::PointCloud;
use crate::tokenizer::text::Vocabulary;
use crate::tokenizer::{
    AudioSettings, ImageInput, ImageSettings, MetaTokenizer, Modality, ModalityInput, PointSettings,
};

/// Filled square, disc, cross, horizontal stripes.
pub const IMAGE_TEMPLATES: usize = 4;
/// Sphere, cube surface, two blobs.
pub const POINT_SHAPES: usize = 3;
/// Class `c` uses waveform `c % 3` at `AUDIO_BASE_HZ[c]`.
pub const AUDIO_BASE_HZ: [f64; 6] = [440.0, 1000.0, 300.0, 2000.0, 660.0, 1500.0];
pub const AUDIO_CLASS_LIMIT: usize = AUDIO_BASE_HZ.len();
pub const LEXICON_WORDS: usize = 8;
pub const TEXT_LEXICONS: usize = 4;

const LEXICONS: [[&str; LEXICON_WORDS]; TEXT_LEXICONS] = [
    [
        "cat", "dog", "horse", "sheep", "goat", "mouse", "tiger", "zebra",
    ],
    [
        "rain", "snow", "storm", "cloud", "wind", "frost", "hail", "mist",
    ],
    [
        "bread", "apple", "cheese", "rice", "soup", "honey", "pear", "plum",
    ],
    [
        "hammer", "saw", "drill", "wrench", "chisel", "pliers", "file", "rasp",
    ],
];
const FUNCTION_WORDS: [&str; 12] = [
    "the", "a", "of", "and", "to", "in", "is", "on", "it", "with", "at", "by",
];

pub const PRETRAIN_FLOOR: f64 = 0.95;
pub const TRANSFER_FLOOR: f64 = 0.80;
/// Closed-form baselines must clear this before a stage counts as sound.
pub const BASELINE_FLOOR: f64 = 0.95;
pub const FUSION_MARGIN: f64 = 0.2;

// Independent RNG streams per purpose so adding one draw never shifts another.
const STREAM_ENCODER: u64 = 1;
const STREAM_TOKENIZER: u64 = 2;
const STREAM_TRAIN_DATA: u64 = 10;
const STREAM_TEST_DATA: u64 = 20;
const STREAM_HEAD: u64 = 30;
const STREAM_SHUFFLE: u64 = 40;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn sub_seed(seed: u64, id: u64) -> u64 {
    stream(seed, id).next_u64()
}

fn modality_index(m: Modality) -> u64 {
    Modality::ALL.iter().position(|&x| x == m).unwrap_or(0) as u64
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn template_value(template: usize, size: usize, y: usize, x: usize) -> f64 {
    let c = (size as f64 - 1.0) / 2.0;
    let (dy, dx) = (y as f64 - c, x as f64 - c);
    let s = size as f64;
    let on = match template {
        0 => dy.abs() <= s / 4.0 && dx.abs() <= s / 4.0,
        1 => (dy * dy + dx * dx).sqrt() <= 0.35 * s,
        2 => dy.abs() <= s / 8.0 || dx.abs() <= s / 8.0,
        _ => (y / (size / 8).max(1)) % 2 == 0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

const CHANNEL_GAIN: [f64; 3] = [1.0, 0.7, 0.4];

/// `per_class` images of each class, class-major order.
pub fn gen_images(
    cfg: &ImageTaskConfig,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(ImageInput, usize)>> {
    if cfg.classes > IMAGE_TEMPLATES {
        return Err(Error::Config(format!(
            "{} image classes requested, only {IMAGE_TEMPLATES} templates",
            cfg.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, s) = (cfg.channels, cfg.size);
    let mut out = Vec::with_capacity(cfg.classes * per_class);
    for label in 0..cfg.classes {
        for _ in 0..per_class {
            let mut px = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let v = CHANNEL_GAIN[ch % 3] * template_value(label, s, y, x);
                        px.push(v + cfg.noise * gaussian(&mut rng));
                    }
                }
            }
            out.push((ImageInput::new(Tensor::new(vec![c, s, s], px)?)?, label));
        }
    }
    Ok(out)
}

fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0; 4];
    for v in &mut q {
        *v = gaussian(rng);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn shape_point<R: Rng>(shape: usize, rng: &mut R) -> [f64; 3] {
    match shape {
        0 => {
            let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.map(|a| a / n)
        }
        1 => {
            let axis = rng.gen_range(0..3);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mut p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            p[axis] = side;
            p
        }
        _ => {
            let cx = if rng.gen_bool(0.5) { 0.6 } else { -0.6 };
            [
                cx + 0.15 * gaussian(rng),
                0.15 * gaussian(rng),
                0.15 * gaussian(rng),
            ]
        }
    }
}

/// Sphere of radius 1, surface of the cube of half-side 1, or two Gaussian
/// blobs at x = ±0.6.
pub fn gen_point_clouds(
    cfg: &PointTaskConfig,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(PointCloud, usize)>> {
    if cfg.classes > POINT_SHAPES {
        return Err(Error::Config(format!(
            "{} point classes requested, only {POINT_SHAPES} shapes",
            cfg.classes
        )));
    }
    if cfg.points == 0 || cfg.points % 16 != 0 {
        return Err(Error::Config(format!(
            "{} points is not a multiple of 16",
            cfg.points
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.classes * per_class);
    for label in 0..cfg.classes {
        for _ in 0..per_class {
            let rot = cfg.rotate.then(|| random_rotation(&mut rng));
            let mut pts = Vec::with_capacity(cfg.points);
            for _ in 0..cfg.points {
                let mut p = shape_point(label, &mut rng);
                for v in &mut p {
                    *v += cfg.jitter * gaussian(&mut rng);
                }
                if let Some(r) = &rot {
                    p = [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
                }
                pts.push(p);
            }
            out.push((PointCloud::from_xyz(&pts)?, label));
        }
    }
    Ok(out)
}

/// One waveform with a given start phase, no noise.
pub fn waveform(class: usize, sample_rate: u32, samples: usize, phase: f64) -> Vec<f64> {
    let f = AUDIO_BASE_HZ[class % AUDIO_CLASS_LIMIT];
    let sr = sample_rate as f64;
    let duration = samples as f64 / sr;
    (0..samples)
        .map(|i| {
            let t = i as f64 / sr;
            match class % 3 {
                0 => 0.5 * (2.0 * PI * f * t + phase).sin(),
                1 => {
                    let s = (2.0 * PI * f * t + phase).sin();
                    if s >= 0.0 {
                        0.3
                    } else {
                        -0.3
                    }
                }
                // linear sweep from f to 2f over the clip
                _ => 0.5 * (2.0 * PI * (f * t + f * t * t / (2.0 * duration)) + phase).sin(),
            }
        })
        .collect()
}

/// Sine, square, or chirp at class-specific base frequencies with seeded
/// phase and additive Gaussian noise.
pub fn gen_audio(
    cfg: &AudioTaskConfig,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(AudioInput, usize)>> {
    if cfg.classes > AUDIO_CLASS_LIMIT {
        return Err(Error::Config(format!(
            "{} audio classes requested, limit {AUDIO_CLASS_LIMIT}",
            cfg.classes
        )));
    }
    let n = (cfg.duration_secs * cfg.sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::Config("audio clips would be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.classes * per_class);
    for label in 0..cfg.classes {
        for _ in 0..per_class {
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut samples = waveform(label, cfg.sample_rate, n, phase);
            for s in &mut samples {
                *s += cfg.noise * gaussian(&mut rng);
            }
            out.push((
                AudioInput {
                    samples,
                    sample_rate: cfg.sample_rate,
                },
                label,
            ));
        }
    }
    Ok(out)
}

/// Sentences of `words_per_sentence` words: `class_words` drawn from the
/// class lexicon at random positions, the rest shared function words.
pub fn gen_text(cfg: &TextTaskConfig, per_class: usize, seed: u64) -> Result<Vec<(String, usize)>> {
    if cfg.classes > TEXT_LEXICONS || cfg.lexicon_size > LEXICON_WORDS || cfg.lexicon_size == 0 {
        return Err(Error::Config(format!(
            "text task needs classes <= {TEXT_LEXICONS} and 1 <= lexicon_size <= {LEXICON_WORDS}"
        )));
    }
    if cfg.class_words > cfg.words_per_sentence {
        return Err(Error::Config(
            "class_words exceeds words_per_sentence".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.classes * per_class);
    for label in 0..cfg.classes {
        for _ in 0..per_class {
            let positions =
                rand::seq::index::sample(&mut rng, cfg.words_per_sentence, cfg.class_words)
                    .into_vec();
            let words: Vec<&str> = (0..cfg.words_per_sentence)
                .map(|i| {
                    if positions.contains(&i) {
                        LEXICONS[label][rng.gen_range(0..cfg.lexicon_size)]
                    } else {
                        FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())]
                    }
                })
                .collect();
            out.push((words.join(" "), label));
        }
    }
    Ok(out)
}

/// Held-out accuracy of nearest-centroid classification (squared Euclidean,
/// first class wins ties).
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let Some(dim) = train.first().map(|(f, _)| f.len()) else {
        return 0.0;
    };
    let classes = train.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (f, l) in train {
        for (s, v) in sums[*l].iter_mut().zip(f) {
            *s += v;
        }
        counts[*l] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|(f, l)| {
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in sums.iter().enumerate() {
                if counts[c] == 0 {
                    continue;
                }
                let d: f64 = centroid.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1 == *l
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

/// Held-out accuracy of multinomial naive Bayes over count features with
/// add-one smoothing and a uniform class prior.
pub fn naive_bayes_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let Some(dim) = train.first().map(|(f, _)| f.len()) else {
        return 0.0;
    };
    let classes = train.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let mut counts = vec![vec![1.0; dim]; classes];
    for (f, l) in train {
        for (c, v) in counts[*l].iter_mut().zip(f) {
            *c += v;
        }
    }
    let log_p: Vec<Vec<f64>> = counts
        .iter()
        .map(|c| {
            let total: f64 = c.iter().sum();
            c.iter().map(|v| (v / total).ln()).collect()
        })
        .collect();
    let correct = test
        .iter()
        .filter(|(f, l)| {
            let scores: Vec<f64> = log_p
                .iter()
                .map(|lp| lp.iter().zip(f).map(|(a, b)| a * b).sum())
                .collect();
            crate::ops::argmax(&scores) == *l
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

pub fn mean_distance_to_origin(cloud: &PointCloud) -> f64 {
    let pts = cloud.coords();
    pts.iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .sum::<f64>()
        / pts.len() as f64
}

/// Per-bin mean over frames.
pub fn mean_spectrum(spec: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; spec.cols()];
    for r in 0..spec.rows() {
        for (o, v) in m.iter_mut().zip(spec.row(r)) {
            *o += v;
        }
    }
    m.iter().map(|v| v / spec.rows() as f64).collect()
}

pub fn bag_of_words(text: &str, words: &BTreeMap<String, usize>) -> Vec<f64> {
    let mut v = vec![0.0; words.len()];
    for w in text.split_whitespace() {
        if let Some(&i) = words.get(w) {
            v[i] += 1.0;
        }
    }
    v
}

/// Train/test samples ready for the tokenizer, plus the closed-form baseline
/// measured on the raw inputs: nearest centroid on pixels, on mean distance
/// to the origin, or on the time-averaged spectrum; naive Bayes on word
/// counts.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub modality: Modality,
    pub classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub baseline_accuracy: f64,
}

fn prepare_all(
    tokenizer: &MetaTokenizer,
    inputs: Vec<(ModalityInput, usize)>,
) -> Result<Vec<Sample>> {
    inputs
        .into_iter()
        .map(|(x, label)| {
            Ok(Sample {
                input: tokenizer.prepare(&x)?,
                label,
            })
        })
        .collect()
}

pub fn image_settings(cfg: &ImageTaskConfig) -> ImageSettings {
    ImageSettings {
        channels: cfg.channels,
        patch: cfg.patch,
    }
}

pub fn audio_settings(cfg: &AudioTaskConfig) -> AudioSettings {
    AudioSettings {
        sample_rate: cfg.sample_rate,
        spectrogram: spectrogram_spec(cfg),
        patch: cfg.patch,
        time_stride: cfg.time_stride,
        freq_stride: cfg.freq_stride,
    }
}

pub fn spectrogram_spec(cfg: &AudioTaskConfig) -> SpectrogramSpec {
    SpectrogramSpec {
        window_secs: cfg.window_secs,
        stride_secs: cfg.stride_secs,
        mel_bins: cfg.mel_bins,
    }
}

pub fn point_settings(cfg: &PointTaskConfig) -> PointSettings {
    PointSettings {
        feature_dim: 0,
        k: cfg.k,
    }
}

/// Registers the tokenizer for a configured modality. Text needs the
/// vocabulary, so it is registered by [`build_task`] instead.
pub fn register_modality(
    tokenizer: &mut MetaTokenizer,
    cfg: &RunConfig,
    modality: Modality,
) -> Result<()> {
    if tokenizer.is_registered(modality) {
        return Ok(());
    }
    let missing = || Error::Config(format!("[{modality}] section missing from config"));
    match modality {
        Modality::Image => {
            let c = cfg.image.as_ref().ok_or_else(missing)?;
            tokenizer.register_image(image_settings(c), c.n_max)
        }
        Modality::PointCloud => {
            let c = cfg.point_cloud.as_ref().ok_or_else(missing)?;
            tokenizer.register_point_cloud(point_settings(c), c.n_max)
        }
        Modality::Audio => {
            let c = cfg.audio.as_ref().ok_or_else(missing)?;
            tokenizer.register_audio(audio_settings(c), c.n_max)
        }
        Modality::Fused => {
            let f = cfg.fusion.as_ref().ok_or_else(missing)?;
            register_modality(tokenizer, cfg, Modality::Image)?;
            register_modality(tokenizer, cfg, Modality::Audio)?;
            tokenizer.register_fused(vec![Modality::Image, Modality::Audio], f.n_max)
        }
        other => Err(Error::Config(format!("no synthetic task for {other}"))),
    }
}

fn seeds(seed: u64, modality: Modality) -> (u64, u64) {
    let m = modality_index(modality);
    (
        sub_seed(seed, STREAM_TRAIN_DATA + m),
        sub_seed(seed, STREAM_TEST_DATA + m),
    )
}

/// Generates the task for `modality`, registers its tokenizer if needed, and
/// runs the closed-form baseline.
pub fn build_task(
    cfg: &RunConfig,
    modality: Modality,
    tokenizer: &mut MetaTokenizer,
) -> Result<TaskData> {
    let (train_seed, test_seed) = seeds(cfg.seed, modality);
    let missing = || Error::Config(format!("[{modality}] section missing from config"));
    let (classes, train, test, baseline) = match modality {
        Modality::Image => {
            let c = cfg.image.as_ref().ok_or_else(missing)?;
            let tr = gen_images(c, c.train_per_class, train_seed)?;
            let te = gen_images(c, c.test_per_class, test_seed)?;
            let feat = |v: &[(ImageInput, usize)]| -> Vec<(Vec<f64>, usize)> {
                v.iter()
                    .map(|(x, l)| (x.pixels.data().to_vec(), *l))
                    .collect()
            };
            let b = nearest_centroid_accuracy(&feat(&tr), &feat(&te));
            let wrap = |v: Vec<(ImageInput, usize)>| {
                v.into_iter()
                    .map(|(x, l)| (ModalityInput::Image(x), l))
                    .collect()
            };
            (c.classes, wrap(tr), wrap(te), b)
        }
        Modality::PointCloud => {
            let c = cfg.point_cloud.as_ref().ok_or_else(missing)?;
            let tr = gen_point_clouds(c, c.train_per_class, train_seed)?;
            let te = gen_point_clouds(c, c.test_per_class, test_seed)?;
            let feat = |v: &[(PointCloud, usize)]| -> Vec<(Vec<f64>, usize)> {
                v.iter()
                    .map(|(x, l)| (vec![mean_distance_to_origin(x)], *l))
                    .collect()
            };
            let b = nearest_centroid_accuracy(&feat(&tr), &feat(&te));
            let wrap = |v: Vec<(PointCloud, usize)>| {
                v.into_iter()
                    .map(|(x, l)| (ModalityInput::PointCloud(x), l))
                    .collect()
            };
            (c.classes, wrap(tr), wrap(te), b)
        }
        Modality::Audio => {
            let c = cfg.audio.as_ref().ok_or_else(missing)?;
            let spec = spectrogram_spec(c);
            let to_spec = |v: Vec<(AudioInput, usize)>| -> Result<Vec<(Tensor, usize)>> {
                v.into_iter()
                    .map(|(a, l)| Ok((compute_log_mel_spectrogram(&a, &spec)?, l)))
                    .collect()
            };
            let tr = to_spec(gen_audio(c, c.train_per_class, train_seed)?)?;
            let te = to_spec(gen_audio(c, c.test_per_class, test_seed)?)?;
            let feat = |v: &[(Tensor, usize)]| -> Vec<(Vec<f64>, usize)> {
                v.iter().map(|(s, l)| (mean_spectrum(s), *l)).collect()
            };
            let b = nearest_centroid_accuracy(&feat(&tr), &feat(&te));
            let wrap = |v: Vec<(Tensor, usize)>| {
                v.into_iter()
                    .map(|(x, l)| (ModalityInput::Spectrogram(x), l))
                    .collect()
            };
            (c.classes, wrap(tr), wrap(te), b)
        }
        Modality::Text => {
            let c = cfg.text.as_ref().ok_or_else(missing)?;
            let tr = gen_text(c, c.train_per_class, train_seed)?;
            let te = gen_text(c, c.test_per_class, test_seed)?;
            let corpus: Vec<&str> = tr.iter().chain(&te).map(|(s, _)| s.as_str()).collect();
            if !tokenizer.is_registered(Modality::Text) {
                let vocab = Vocabulary::build(
                    &corpus,
                    c.vocab_size,
                    crate::tokenizer::text::DEFAULT_MARKER,
                )?;
                tokenizer.register_text(vocab, c.n_max)?;
            }
            let mut words = BTreeMap::new();
            for w in corpus.iter().flat_map(|s| s.split_whitespace()) {
                let next = words.len();
                words.entry(w.to_owned()).or_insert(next);
            }
            let feat = |v: &[(String, usize)]| -> Vec<(Vec<f64>, usize)> {
                v.iter()
                    .map(|(s, l)| (bag_of_words(s, &words), *l))
                    .collect()
            };
            let b = naive_bayes_accuracy(&feat(&tr), &feat(&te));
            let wrap = |v: Vec<(String, usize)>| {
                v.into_iter()
                    .map(|(x, l)| (ModalityInput::Text(x), l))
                    .collect()
            };
            (c.classes, wrap(tr), wrap(te), b)
        }
        Modality::Fused => {
            let f = cfg.fusion.as_ref().ok_or_else(missing)?;
            let (img, aud) = (
                cfg.image.as_ref().ok_or_else(missing)?,
                cfg.audio.as_ref().ok_or_else(missing)?,
            );
            let img2 = ImageTaskConfig {
                classes: 2,
                ..img.clone()
            };
            let aud2 = AudioTaskConfig {
                classes: 2,
                ..aud.clone()
            };
            let spec = spectrogram_spec(&aud2);
            let make =
                |per_class: usize,
                 seed: u64|
                 -> Result<(Vec<(ModalityInput, usize)>, Vec<(Vec<f64>, usize)>)> {
                    // 4 classes = (image class, audio class); each pair gets its own draws
                    let images = gen_images(&img2, per_class * 2, sub_seed(seed, 1))?;
                    let sounds = gen_audio(&aud2, per_class * 2, sub_seed(seed, 2))?;
                    let mut inputs = Vec::new();
                    let mut feats = Vec::new();
                    for label in 0..4 {
                        let (ic, ac) = (label / 2, label % 2);
                        for i in 0..per_class {
                            let (im, _) = &images[ic * per_class * 2 + (ac * per_class + i)];
                            let (au, _) = &sounds[ac * per_class * 2 + (ic * per_class + i)];
                            let spec_t = compute_log_mel_spectrogram(au, &spec)?;
                            let mut f = im.pixels.data().to_vec();
                            f.extend(mean_spectrum(&spec_t));
                            feats.push((f, label));
                            inputs.push((
                                ModalityInput::Fused(vec![
                                    ModalityInput::Image(im.clone()),
                                    ModalityInput::Spectrogram(spec_t),
                                ]),
                                label,
                            ));
                        }
                    }
                    Ok((inputs, feats))
                };
            let (tr, trf) = make(f.train_per_class, train_seed)?;
            let (te, tef) = make(f.test_per_class, test_seed)?;
            (4, tr, te, nearest_centroid_accuracy(&trf, &tef))
        }
        other => return Err(Error::Config(format!("no synthetic task for {other}"))),
    };
    register_modality(tokenizer, cfg, modality)?;
    Ok(TaskData {
        modality,
        classes,
        train: prepare_all(tokenizer, train)?,
        test: prepare_all(tokenizer, test)?,
        baseline_accuracy: baseline,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Transfer,
    Fusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Transfer => "transfer",
            Stage::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub modality: Modality,
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub steps: usize,
    pub trainable_params: usize,
    pub baseline_accuracy: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Minimum accuracy the stage must reach; pretraining is judged on train
    /// accuracy, the other stages on held-out accuracy.
    pub floor: f64,
    pub digest_before: String,
    pub digest_after: String,
    pub history: Vec<StepRecord>,
    /// Training plus evaluation time; kept out of every CSV.
    pub seconds: f64,
}

impl StageReport {
    pub fn judged_accuracy(&self) -> f64 {
        match self.stage {
            Stage::Pretrain => self.train_accuracy,
            _ => self.test_accuracy,
        }
    }

    pub fn baseline_ok(&self) -> bool {
        self.baseline_accuracy >= BASELINE_FLOOR
    }

    /// Frozen stages must leave the backbone digest untouched.
    pub fn freeze_held(&self) -> bool {
        self.stage == Stage::Pretrain || self.digest_before == self.digest_after
    }

    pub fn passed(&self) -> bool {
        self.judged_accuracy() >= self.floor && self.freeze_held()
    }

    pub fn metrics_file_name(&self) -> String {
        format!("metrics_{}_{}.csv", self.stage.name(), self.modality)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.history)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub precision: Precision,
    pub stages: Vec<StageReport>,
    /// Backbone digest when the frozen stages began.
    pub frozen_digest: String,
    pub wall_clock_secs: f64,
}

pub const REPORT_HEADER: &str = "stage,modality,classes,train_samples,test_samples,steps,trainable_params,baseline_accuracy,train_accuracy,test_accuracy,floor,passed,digest_before,digest_after";

impl ExperimentReport {
    pub fn all_passed(&self) -> bool {
        self.stages.iter().all(StageReport::passed)
    }

    pub fn freeze_held(&self) -> bool {
        self.stages
            .iter()
            .filter(|s| s.stage != Stage::Pretrain)
            .all(|s| s.digest_before == self.frozen_digest && s.digest_after == self.frozen_digest)
    }

    pub fn stage(&self, stage: Stage, modality: Modality) -> Option<&StageReport> {
        self.stages
            .iter()
            .find(|s| s.stage == stage && s.modality == modality)
    }

    /// Everything except wall-clock time, so reruns compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.stages {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.stage.name(),
                r.modality,
                r.classes,
                r.train_samples,
                r.test_samples,
                r.steps,
                r.trainable_params,
                r.baseline_accuracy,
                r.train_accuracy,
                r.test_accuracy,
                r.floor,
                r.passed(),
                r.digest_before,
                r.digest_after
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "experiment {} (seed {}, {}-bit)",
            self.name,
            self.seed,
            self.precision.bits()
        );
        let _ = writeln!(
            s,
            "backbone pretraining is supervised classification of synthetic images, standing in for large-scale contrastive pretraining"
        );
        let _ = writeln!(s, "frozen backbone digest {}", self.frozen_digest);
        for r in &self.stages {
            let _ = writeln!(
                s,
                "{:<8} {:<12} acc train {:.3} test {:.3} floor {:.2} baseline {:.3}{} trainable {} {:.1} s {}",
                r.stage.name(),
                r.modality.to_string(),
                r.train_accuracy,
                r.test_accuracy,
                r.floor,
                r.baseline_accuracy,
                if r.baseline_ok() { "" } else { " (baseline below sanity floor)" },
                r.trainable_params,
                r.seconds,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "freeze invariant {}",
            if self.freeze_held() {
                "held"
            } else {
                "VIOLATED"
            }
        );
        let _ = writeln!(s, "wall clock {:.1} s", self.wall_clock_secs);
        s
    }

    /// Writes `report.csv`, `summary.txt`, and one metrics CSV per stage.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, body.as_bytes())?;
            written.push(p);
            Ok(())
        };
        put("report.csv".into(), self.to_csv())?;
        put("summary.txt".into(), self.summary())?;
        for r in &self.stages {
            put(r.metrics_file_name(), r.metrics_csv())?;
        }
        Ok(written)
    }
}

/// Backbone, tokenizers, and image head after pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub tokenizer: MetaTokenizer,
    pub encoder: Encoder,
    pub head: ClassificationHead,
    pub optimizer: Adam,
    pub report: StageReport,
}

pub fn new_encoder(cfg: &RunConfig) -> Result<Encoder> {
    let mut enc = Encoder::new(cfg.encoder.clone(), sub_seed(cfg.seed, STREAM_ENCODER))?;
    enc.params.round_to(cfg.precision()?);
    Ok(enc)
}

pub fn new_tokenizer(cfg: &RunConfig) -> Result<MetaTokenizer> {
    MetaTokenizer::new(cfg.encoder.dim, sub_seed(cfg.seed, STREAM_TOKENIZER))
}

pub fn new_head(
    cfg: &RunConfig,
    stage: Stage,
    modality: Modality,
    classes: usize,
) -> Result<ClassificationHead> {
    let id = STREAM_HEAD + 10 * stage as u64 + modality_index(modality);
    let mut head = ClassificationHead::new(
        &format!("head.{modality}"),
        cfg.encoder.dim,
        classes,
        cfg.train.head_hidden,
        sub_seed(cfg.seed, id),
    )?;
    head.params.round_to(cfg.precision()?);
    Ok(head)
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    task: &TaskData,
    tokenizer: &mut MetaTokenizer,
    encoder: &mut Encoder,
    head: &mut ClassificationHead,
    optimizer: &mut Adam,
    steps: usize,
    pooling: Pooling,
    floor: f64,
) -> Result<StageReport> {
    let precision = cfg.precision()?;
    for set in tokenizer.param_sets_mut(task.modality) {
        set.round_to(precision);
    }
    let start = Instant::now();
    let digest_before = encoder.digest();
    let shuffle = sub_seed(
        cfg.seed,
        STREAM_SHUFFLE + 10 * stage as u64 + modality_index(task.modality),
    );
    let run = Trainer {
        tokenizer,
        encoder,
        head,
        optimizer,
        pooling,
    }
    .fit(&task.train, steps, cfg.train.batch_size, shuffle)?;
    let train = evaluate(&task.train, tokenizer, encoder, head, pooling)?;
    let test = evaluate(&task.test, tokenizer, encoder, head, pooling)?;
    Ok(StageReport {
        stage,
        modality: task.modality,
        classes: task.classes,
        train_samples: task.train.len(),
        test_samples: task.test.len(),
        steps,
        trainable_params: run.trainable_params,
        baseline_accuracy: task.baseline_accuracy,
        train_accuracy: train.accuracy,
        test_accuracy: test.accuracy,
        floor,
        digest_before,
        digest_after: encoder.digest(),
        history: run.history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains backbone, image tokenizer, and image head together.
pub fn pretrain(cfg: &RunConfig) -> Result<Pretrained> {
    cfg.validate()?;
    if cfg.image.is_none() {
        return Err(Error::Config("pretraining needs an [image] section".into()));
    }
    let precision = cfg.precision()?;
    let mut tokenizer = new_tokenizer(cfg)?;
    let mut encoder = new_encoder(cfg)?;
    encoder.unfreeze();
    let task = build_task(cfg, Modality::Image, &mut tokenizer)?;
    let mut head = new_head(cfg, Stage::Pretrain, Modality::Image, task.classes)?;
    let mut optimizer = Adam::new(cfg.train.lr).with_precision(precision);
    let report = train_stage(
        cfg,
        Stage::Pretrain,
        &task,
        &mut tokenizer,
        &mut encoder,
        &mut head,
        &mut optimizer,
        cfg.train.pretrain_steps,
        Pooling::Cls,
        PRETRAIN_FLOOR,
    )?;
    Ok(Pretrained {
        tokenizer,
        encoder,
        head,
        optimizer,
        report,
    })
}

/// Freezes a copy of `encoder` and trains tokenizer + head for every
/// configured non-image modality, then fusion if configured. `tokenizer`
/// supplies the pretrained image slot for fusion.
pub fn transfer(
    cfg: &RunConfig,
    tokenizer: &MetaTokenizer,
    encoder: &Encoder,
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let precision = cfg.precision()?;
    let mut encoder = encoder.clone();
    encoder.freeze();
    let mut tokenizer = tokenizer.clone();
    let mut reports = Vec::new();
    let downstream = [
        (Modality::PointCloud, cfg.point_cloud.is_some()),
        (Modality::Audio, cfg.audio.is_some()),
        (Modality::Text, cfg.text.is_some()),
    ];
    for (modality, enabled) in downstream {
        if !enabled {
            continue;
        }
        let task = build_task(cfg, modality, &mut tokenizer)?;
        let mut head = new_head(cfg, Stage::Transfer, modality, task.classes)?;
        let mut optimizer = Adam::new(cfg.train.lr).with_precision(precision);
        reports.push(train_stage(
            cfg,
            Stage::Transfer,
            &task,
            &mut tokenizer,
            &mut encoder,
            &mut head,
            &mut optimizer,
            cfg.train.transfer_steps,
            Pooling::Cls,
            TRANSFER_FLOOR,
        )?);
    }
    if let Some(f) = &cfg.fusion {
        let mut fused_tok = tokenizer.clone();
        let task = build_task(cfg, Modality::Fused, &mut fused_tok)?;
        let mut head = new_head(cfg, Stage::Fusion, Modality::Fused, task.classes)?;
        let mut optimizer = Adam::new(cfg.train.lr).with_precision(precision);
        reports.push(train_stage(
            cfg,
            Stage::Fusion,
            &task,
            &mut fused_tok,
            &mut encoder,
            &mut head,
            &mut optimizer,
            f.steps,
            Pooling::Mean,
            1.0 / task.classes as f64 + FUSION_MARGIN,
        )?);
    }
    Ok(reports)
}

/// Pretrain, freeze, transfer. Stage failures land in the report.
pub fn run_transfer_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let pre = pretrain(cfg)?;
    let mut stages = vec![pre.report.clone()];
    stages.extend(transfer(cfg, &pre.tokenizer, &pre.encoder)?);
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        precision: cfg.precision()?,
        stages,
        frozen_digest: pre.encoder.digest(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
