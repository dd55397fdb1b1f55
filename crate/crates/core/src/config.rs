//! Run configuration, parsed from TOML and validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::{AUDIO_CLASS_LIMIT, IMAGE_TEMPLATES, POINT_SHAPES, TEXT_LEXICONS};
use crate::tensor::Precision;
use crate::tokenizer::patch::sliding_count;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// 32 or 64.
    pub precision: u32,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub image: Option<ImageTaskConfig>,
    pub point_cloud: Option<PointTaskConfig>,
    pub audio: Option<AudioTaskConfig>,
    pub text: Option<TextTaskConfig>,
    pub fusion: Option<FusionTaskConfig>,
}

/// Missing modality sections stay absent; see [`RunConfig::desk`] for the
/// full default experiment.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            precision: 64,
            encoder: EncoderConfig::desk(),
            train: TrainConfig::default(),
            image: None,
            point_cloud: None,
            audio: None,
            text: None,
            fusion: None,
        }
    }
}

impl RunConfig {
    /// Image pretraining plus point cloud, audio, and text transfer.
    pub fn desk() -> Self {
        Self {
            image: Some(ImageTaskConfig::default()),
            point_cloud: Some(PointTaskConfig::default()),
            audio: Some(AudioTaskConfig::default()),
            text: Some(TextTaskConfig::default()),
            fusion: Some(FusionTaskConfig::default()),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub transfer_steps: usize,
    /// Hidden width of an MLP head; absent means a linear probe.
    pub head_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            pretrain_steps: 300,
            transfer_steps: 300,
            head_hidden: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub patch: usize,
    pub noise: f64,
    pub n_max: usize,
}

impl Default for ImageTaskConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 32,
            test_per_class: 16,
            size: 16,
            channels: 1,
            patch: 4,
            noise: 0.3,
            n_max: 64,
        }
    }
}

impl ImageTaskConfig {
    pub fn tokens(&self) -> usize {
        (self.size / self.patch).pow(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub k: usize,
    pub jitter: f64,
    pub rotate: bool,
    pub n_max: usize,
}

impl Default for PointTaskConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 32,
            test_per_class: 16,
            points: 256,
            k: 8,
            jitter: 0.02,
            rotate: false,
            n_max: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub mel_bins: usize,
    pub window_secs: f64,
    pub stride_secs: f64,
    pub patch: usize,
    pub time_stride: usize,
    pub freq_stride: usize,
    pub noise: f64,
    pub n_max: usize,
}

impl Default for AudioTaskConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 32,
            test_per_class: 16,
            duration_secs: 0.5,
            sample_rate: 16000,
            mel_bins: 64,
            window_secs: 0.025,
            stride_secs: 0.010,
            patch: 16,
            time_stride: 10,
            freq_stride: 16,
            noise: 0.05,
            n_max: 64,
        }
    }
}

impl AudioTaskConfig {
    pub fn frames(&self) -> usize {
        let hop = (self.stride_secs * self.sample_rate as f64).round() as usize;
        let samples = (self.duration_secs * self.sample_rate as f64).round() as usize;
        if hop == 0 {
            0
        } else {
            samples / hop
        }
    }

    pub fn tokens(&self) -> usize {
        sliding_count(self.frames(), self.patch, self.time_stride)
            * sliding_count(self.mel_bins, self.patch, self.freq_stride)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextTaskConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub words_per_sentence: usize,
    /// Words drawn from the class lexicon per sentence; the rest are
    /// shared function words.
    pub class_words: usize,
    pub lexicon_size: usize,
    pub vocab_size: usize,
    pub n_max: usize,
}

impl Default for TextTaskConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            train_per_class: 32,
            test_per_class: 16,
            words_per_sentence: 8,
            class_words: 2,
            lexicon_size: 6,
            vocab_size: 256,
            n_max: 64,
        }
    }
}

/// Image + audio fusion: class = (image class, audio class) over two of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionTaskConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub steps: usize,
    pub n_max: usize,
}

impl Default for FusionTaskConfig {
    fn default() -> Self {
        Self {
            train_per_class: 24,
            test_per_class: 12,
            steps: 300,
            n_max: 128,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{field} must be positive")));
    }
    Ok(())
}

fn fits(field: &str, tokens: usize, n_max: usize, encoder_max: usize) -> Result<()> {
    if tokens == 0 {
        return Err(Error::Config(format!(
            "{field}: settings produce no tokens"
        )));
    }
    if tokens > n_max {
        return Err(Error::Config(format!(
            "{field}.n_max {n_max} is below the {tokens} tokens each sample produces"
        )));
    }
    if n_max > encoder_max {
        return Err(Error::Config(format!(
            "{field}.n_max {n_max} exceeds encoder.n_max {encoder_max}"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::from_bits(self.precision).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.precision()?;
        let enc_max = self.encoder.n_max;
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::Config(format!(
                "train.lr {} must be finite and >= 0",
                t.lr
            )));
        }
        positive("train.batch_size", t.batch_size)?;
        if let Some(h) = t.head_hidden {
            positive("train.head_hidden", h)?;
        }
        if let Some(c) = &self.image {
            positive("image.classes", c.classes)?;
            positive("image.train_per_class", c.train_per_class)?;
            positive("image.test_per_class", c.test_per_class)?;
            positive("image.patch", c.patch)?;
            if c.classes > IMAGE_TEMPLATES {
                return Err(Error::Config(format!(
                    "image.classes {} exceeds the {IMAGE_TEMPLATES} shape templates",
                    c.classes
                )));
            }
            if c.channels != 1 && c.channels != 3 {
                return Err(Error::Config("image.channels must be 1 or 3".into()));
            }
            if c.size == 0 || c.size % c.patch != 0 {
                return Err(Error::Config(format!(
                    "image.size {} must be a positive multiple of image.patch {}",
                    c.size, c.patch
                )));
            }
            if !(c.noise.is_finite() && c.noise >= 0.0) {
                return Err(Error::Config("image.noise must be finite and >= 0".into()));
            }
            fits("image", c.tokens(), c.n_max, enc_max)?;
        }
        if let Some(c) = &self.point_cloud {
            positive("point_cloud.classes", c.classes)?;
            positive("point_cloud.train_per_class", c.train_per_class)?;
            positive("point_cloud.test_per_class", c.test_per_class)?;
            positive("point_cloud.k", c.k)?;
            if c.classes > POINT_SHAPES {
                return Err(Error::Config(format!(
                    "point_cloud.classes {} exceeds the {POINT_SHAPES} shape families",
                    c.classes
                )));
            }
            if c.points < 16 || c.points % 16 != 0 {
                return Err(Error::Config(format!(
                    "point_cloud.points {} must be a positive multiple of 16",
                    c.points
                )));
            }
            if self.encoder.dim % 2 != 0 {
                return Err(Error::Config(
                    "point_cloud needs an even encoder.dim".into(),
                ));
            }
            if !(c.jitter.is_finite() && c.jitter >= 0.0) {
                return Err(Error::Config(
                    "point_cloud.jitter must be finite and >= 0".into(),
                ));
            }
            fits("point_cloud", c.points / 16, c.n_max, enc_max)?;
        }
        if let Some(c) = &self.audio {
            positive("audio.classes", c.classes)?;
            positive("audio.train_per_class", c.train_per_class)?;
            positive("audio.test_per_class", c.test_per_class)?;
            positive("audio.patch", c.patch)?;
            positive("audio.time_stride", c.time_stride)?;
            positive("audio.freq_stride", c.freq_stride)?;
            if c.classes > AUDIO_CLASS_LIMIT {
                return Err(Error::Config(format!(
                    "audio.classes {} exceeds {AUDIO_CLASS_LIMIT}",
                    c.classes
                )));
            }
            if c.sample_rate == 0
                || !(c.duration_secs > 0.0)
                || !(c.window_secs > 0.0)
                || !(c.stride_secs > 0.0)
            {
                return Err(Error::Config(
                    "audio sample_rate, duration, window, and stride must be positive".into(),
                ));
            }
            if c.window_secs > c.duration_secs {
                return Err(Error::Config(
                    "audio.window_secs exceeds audio.duration_secs".into(),
                ));
            }
            if c.mel_bins < c.patch || c.frames() < c.patch {
                return Err(Error::Config(format!(
                    "audio spectrogram {}×{} is smaller than one {}×{} patch",
                    c.frames(),
                    c.mel_bins,
                    c.patch,
                    c.patch
                )));
            }
            if !(c.noise.is_finite() && c.noise >= 0.0) {
                return Err(Error::Config("audio.noise must be finite and >= 0".into()));
            }
            fits("audio", c.tokens(), c.n_max, enc_max)?;
        }
        if let Some(c) = &self.text {
            positive("text.classes", c.classes)?;
            positive("text.train_per_class", c.train_per_class)?;
            positive("text.test_per_class", c.test_per_class)?;
            positive("text.words_per_sentence", c.words_per_sentence)?;
            positive("text.class_words", c.class_words)?;
            positive("text.lexicon_size", c.lexicon_size)?;
            if c.classes > TEXT_LEXICONS {
                return Err(Error::Config(format!(
                    "text.classes {} exceeds the {TEXT_LEXICONS} lexicons",
                    c.classes
                )));
            }
            if c.class_words > c.words_per_sentence {
                return Err(Error::Config(
                    "text.class_words exceeds text.words_per_sentence".into(),
                ));
            }
            if c.lexicon_size > crate::harness::LEXICON_WORDS {
                return Err(Error::Config(format!(
                    "text.lexicon_size {} exceeds {}",
                    c.lexicon_size,
                    crate::harness::LEXICON_WORDS
                )));
            }
            positive("text.vocab_size", c.vocab_size)?;
            if c.n_max > enc_max {
                return Err(Error::Config(format!(
                    "text.n_max {} exceeds encoder.n_max {enc_max}",
                    c.n_max
                )));
            }
            if c.words_per_sentence > c.n_max {
                return Err(Error::Config(
                    "text.n_max cannot hold one token per word".into(),
                ));
            }
        }
        if let Some(f) = &self.fusion {
            positive("fusion.train_per_class", f.train_per_class)?;
            positive("fusion.test_per_class", f.test_per_class)?;
            let (Some(img), Some(aud)) = (&self.image, &self.audio) else {
                return Err(Error::Config(
                    "fusion needs both [image] and [audio]".into(),
                ));
            };
            if img.classes < 2 || aud.classes < 2 {
                return Err(Error::Config(
                    "fusion needs at least 2 image and 2 audio classes".into(),
                ));
            }
            fits("fusion", img.tokens() + aud.tokens(), f.n_max, enc_max)?;
        }
        Ok(())
    }
}
