//! Data-to-sequence tokenization.
//!
//! Every modality is turned into an `n×D` token matrix in two steps:
//! [`MetaTokenizer::prepare`] does the parameter-free grouping (patching,
//! FPS/KNN, spectrogram, subword segmentation) and [`MetaTokenizer::embed`]
//! applies the learned projection. [`MetaTokenizer::sequence`] then prepends
//! the class token and adds position embeddings, producing encoder input.

pub mod audio;
pub mod patch;
pub mod point;
pub mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{max_pool_groups, max_pool_groups_backward, Linear, INIT_STD};
use crate::ops;
use crate::tensor::{trunc_normal, ParamId, ParamSet, Tensor};

pub use audio::{compute_log_mel_spectrogram, AudioInput, MelFrontEnd, SpectrogramSpec};
pub use patch::{ImageInput, VideoInput};
pub use point::{farthest_point_sample, knn_group, PointCloud, PointGroups};
pub use text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
    PointCloud,
    Audio,
    Video,
    Infrared,
    Xray,
    Hyperspectral,
    Fused,
}

impl Modality {
    pub const ALL: [Modality; 9] = [
        Modality::Text,
        Modality::Image,
        Modality::PointCloud,
        Modality::Audio,
        Modality::Video,
        Modality::Infrared,
        Modality::Xray,
        Modality::Hyperspectral,
        Modality::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::PointCloud => "point_cloud",
            Modality::Audio => "audio",
            Modality::Video => "video",
            Modality::Infrared => "infrared",
            Modality::Xray => "xray",
            Modality::Hyperspectral => "hyperspectral",
            Modality::Fused => "fused",
        }
    }

    /// Infrared and X-ray share the image tokenizer.
    pub fn slot(self) -> Modality {
        match self {
            Modality::Infrared | Modality::Xray => Modality::Image,
            m => m,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown modality `{s}`")))
    }
}

/// `n×D` embeddings tagged with their modality; `n ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Tensor,
    modality: Modality,
}

impl TokenSequence {
    pub fn new(embeddings: Tensor, modality: Modality) -> Result<Self> {
        let (n, _) = embeddings.ensure_matrix("token sequence")?;
        if n == 0 {
            return Err(Error::Shape(
                "token sequences need at least one token".into(),
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::Data("non-finite token embedding".into()));
        }
        Ok(Self {
            embeddings,
            modality,
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Tensor {
        self.embeddings
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Stacks two sequences into one `fused` sequence.
pub fn concat_sequences(a: &TokenSequence, b: &TokenSequence) -> Result<TokenSequence> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "cannot concatenate token dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    TokenSequence::new(
        Tensor::vstack(&[&a.embeddings, &b.embeddings])?,
        Modality::Fused,
    )
}

/// `[cls; tokens] + pos[0..n+1]`.
pub fn add_position_embeddings(tokens: &Tensor, pos: &Tensor, cls: &Tensor) -> Result<Tensor> {
    let (n, d) = tokens.ensure_matrix("add_position_embeddings")?;
    if pos.cols() != d || cls.len() != d {
        return Err(Error::dim(
            "add_position_embeddings",
            tokens.shape(),
            pos.shape(),
        ));
    }
    let n_max = pos.rows() - 1;
    if n > n_max {
        return Err(Error::SequenceLength { len: n, max: n_max });
    }
    let mut z = Tensor::zeros(&[n + 1, d]);
    for (o, (c, p)) in z
        .row_mut(0)
        .iter_mut()
        .zip(cls.data().iter().zip(pos.row(0)))
    {
        *o = c + p;
    }
    for i in 0..n {
        let (t, p) = (tokens.row(i), pos.row(i + 1));
        for (j, o) in z.row_mut(i + 1).iter_mut().enumerate() {
            *o = t[j] + p[j];
        }
    }
    Ok(z)
}

/// A raw input of any supported modality.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalityInput {
    Text(String),
    Image(ImageInput),
    Infrared(ImageInput),
    Xray(ImageInput),
    Video(VideoInput),
    /// `H×W×Bands` cube.
    Hyperspectral(Tensor),
    Audio(AudioInput),
    /// A precomputed `T×F` log Mel spectrogram.
    Spectrogram(Tensor),
    PointCloud(PointCloud),
    Fused(Vec<ModalityInput>),
}

impl ModalityInput {
    pub fn modality(&self) -> Modality {
        match self {
            ModalityInput::Text(_) => Modality::Text,
            ModalityInput::Image(_) => Modality::Image,
            ModalityInput::Infrared(_) => Modality::Infrared,
            ModalityInput::Xray(_) => Modality::Xray,
            ModalityInput::Video(_) => Modality::Video,
            ModalityInput::Hyperspectral(_) => Modality::Hyperspectral,
            ModalityInput::Audio(_) | ModalityInput::Spectrogram(_) => Modality::Audio,
            ModalityInput::PointCloud(_) => Modality::PointCloud,
            ModalityInput::Fused(_) => Modality::Fused,
        }
    }
}

/// Parameter-free grouping result, ready for projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub modality: Modality,
    pub content: PreparedContent,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreparedContent {
    Ids(Vec<usize>),
    /// One flattened patch (or pixel spectrum) per row.
    Rows(Tensor),
    Points(PointGroups),
    Fused(Vec<Prepared>),
}

impl Prepared {
    /// Token count this input will produce.
    pub fn token_count(&self) -> usize {
        match &self.content {
            PreparedContent::Ids(ids) => ids.len(),
            PreparedContent::Rows(r) => r.rows(),
            PreparedContent::Points(g) => g.stage2_centers,
            PreparedContent::Fused(parts) => parts.iter().map(Prepared::token_count).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSettings {
    pub channels: usize,
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSettings {
    pub channels: usize,
    pub t_patch: usize,
    pub patch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSettings {
    pub sample_rate: u32,
    pub spectrogram: SpectrogramSpec,
    pub patch: usize,
    pub time_stride: usize,
    pub freq_stride: usize,
}

impl Default for AudioSettings {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            spectrogram: SpectrogramSpec::default(),
            patch: 16,
            time_stride: 10,
            freq_stride: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSettings {
    pub feature_dim: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Embedder {
    Text {
        vocab: Vocabulary,
        table: ParamId,
    },
    Image {
        settings: ImageSettings,
        proj: Linear,
    },
    Video {
        settings: VideoSettings,
        proj: Linear,
    },
    Hyperspectral {
        bands: usize,
        proj: Linear,
    },
    Audio {
        settings: AudioSettings,
        proj: Linear,
    },
    Point {
        settings: PointSettings,
        stage1: Linear,
        stage2: Linear,
    },
    Fused {
        parts: Vec<Modality>,
    },
}

/// Parameters of one registered modality: its embedder plus class token and
/// position table.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub params: ParamSet,
    embedder: Embedder,
    pos: ParamId,
    cls: ParamId,
    n_max: usize,
}

impl Slot {
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn pos(&self) -> ParamId {
        self.pos
    }

    pub fn cls(&self) -> ParamId {
        self.cls
    }
}

/// Per-modality tokenizers sharing one embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaTokenizer {
    dim: usize,
    seed: u64,
    slots: BTreeMap<Modality, Slot>,
}

#[derive(Clone, Debug)]
pub enum EmbedCache {
    Ids(Vec<usize>),
    Rows(Tensor),
    Points(Box<PointCache>),
    Fused(Vec<(Modality, usize, EmbedCache)>),
}

#[derive(Clone, Debug)]
pub struct PointCache {
    stage1_in: Tensor,
    stage1_pre: Tensor,
    stage1_winners: Vec<usize>,
    stage2_in: Tensor,
    stage2_pre: Tensor,
    stage2_winners: Vec<usize>,
    stage1_centers: usize,
    stage2_members: Vec<usize>,
}

/// Everything [`MetaTokenizer::backward`] needs.
#[derive(Clone, Debug)]
pub struct SequenceCache {
    modality: Modality,
    embed: EmbedCache,
    tokens: usize,
}

fn rng_for(seed: u64, modality: Modality) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(modality as u64 + 1)))
}

impl MetaTokenizer {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            seed,
            slots: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn register(
        &mut self,
        modality: Modality,
        n_max: usize,
        build: impl FnOnce(&mut ParamSet, &mut ChaCha8Rng, &str) -> Result<Embedder>,
    ) -> Result<()> {
        if modality.slot() != modality {
            return Err(Error::Config(format!(
                "{modality} shares the {} tokenizer",
                modality.slot()
            )));
        }
        if self.slots.contains_key(&modality) {
            return Err(Error::Config(format!("{modality} already registered")));
        }
        if n_max == 0 {
            return Err(Error::Config(format!("{modality}: n_max must be positive")));
        }
        let mut rng = rng_for(self.seed, modality);
        let mut params = ParamSet::new();
        let prefix = format!("tokenizer.{modality}");
        let embedder = build(&mut params, &mut rng, &prefix)?;
        let cls = params.add(
            format!("{prefix}.cls"),
            trunc_normal(&mut rng, &[1, self.dim], INIT_STD),
        )?;
        let pos = params.add(
            format!("{prefix}.pos"),
            trunc_normal(&mut rng, &[n_max + 1, self.dim], INIT_STD),
        )?;
        self.slots.insert(
            modality,
            Slot {
                params,
                embedder,
                pos,
                cls,
                n_max,
            },
        );
        Ok(())
    }

    pub fn register_text(&mut self, vocab: Vocabulary, n_max: usize) -> Result<()> {
        let dim = self.dim;
        self.register(Modality::Text, n_max, |ps, rng, prefix| {
            let table = ps.add(
                format!("{prefix}.embed"),
                trunc_normal(rng, &[vocab.len(), dim], INIT_STD),
            )?;
            Ok(Embedder::Text { vocab, table })
        })
    }

    pub fn register_image(&mut self, settings: ImageSettings, n_max: usize) -> Result<()> {
        let dim = self.dim;
        if settings.channels == 0 || settings.patch == 0 {
            return Err(Error::Config(
                "image channels and patch must be positive".into(),
            ));
        }
        self.register(Modality::Image, n_max, |ps, rng, prefix| {
            let inputs = settings.channels * settings.patch * settings.patch;
            let proj = Linear::init(ps, &format!("{prefix}.proj"), inputs, dim, rng)?;
            Ok(Embedder::Image { settings, proj })
        })
    }

    pub fn register_video(&mut self, settings: VideoSettings, n_max: usize) -> Result<()> {
        let dim = self.dim;
        if settings.channels == 0 || settings.patch == 0 || settings.t_patch == 0 {
            return Err(Error::Config(
                "video channels and patch sizes must be positive".into(),
            ));
        }
        self.register(Modality::Video, n_max, |ps, rng, prefix| {
            let inputs = settings.t_patch * settings.channels * settings.patch * settings.patch;
            let proj = Linear::init(ps, &format!("{prefix}.proj"), inputs, dim, rng)?;
            Ok(Embedder::Video { settings, proj })
        })
    }

    pub fn register_hyperspectral(&mut self, bands: usize, n_max: usize) -> Result<()> {
        let dim = self.dim;
        if bands == 0 {
            return Err(Error::Config("hyperspectral bands must be positive".into()));
        }
        self.register(Modality::Hyperspectral, n_max, |ps, rng, prefix| {
            let proj = Linear::init(ps, &format!("{prefix}.proj"), bands, dim, rng)?;
            Ok(Embedder::Hyperspectral { bands, proj })
        })
    }

    pub fn register_audio(&mut self, settings: AudioSettings, n_max: usize) -> Result<()> {
        let dim = self.dim;
        if settings.patch == 0 || settings.time_stride == 0 || settings.freq_stride == 0 {
            return Err(Error::Config(
                "audio patch and strides must be positive".into(),
            ));
        }
        if settings.spectrogram.mel_bins < settings.patch {
            return Err(Error::Config(format!(
                "{} Mel bins cannot hold a {}-bin patch",
                settings.spectrogram.mel_bins, settings.patch
            )));
        }
        self.register(Modality::Audio, n_max, |ps, rng, prefix| {
            let inputs = settings.patch * settings.patch;
            let proj = Linear::init(ps, &format!("{prefix}.proj"), inputs, dim, rng)?;
            Ok(Embedder::Audio { settings, proj })
        })
    }

    pub fn register_point_cloud(&mut self, settings: PointSettings, n_max: usize) -> Result<()> {
        let dim = self.dim;
        if dim % 2 != 0 {
            return Err(Error::Config(format!(
                "point tokenizer needs an even embedding dimension, got {dim}"
            )));
        }
        if settings.k == 0 {
            return Err(Error::Config(
                "point neighbour count must be positive".into(),
            ));
        }
        self.register(Modality::PointCloud, n_max, |ps, rng, prefix| {
            let stage1 = Linear::init(
                ps,
                &format!("{prefix}.stage1"),
                3 + settings.feature_dim,
                dim / 2,
                rng,
            )?;
            let stage2 = Linear::init(ps, &format!("{prefix}.stage2"), 3 + dim / 2, dim, rng)?;
            Ok(Embedder::Point {
                settings,
                stage1,
                stage2,
            })
        })
    }

    /// A fused slot owns only its class token and position table; token
    /// embeddings come from the part slots, which must already be registered.
    pub fn register_fused(&mut self, parts: Vec<Modality>, n_max: usize) -> Result<()> {
        if parts.len() < 2 {
            return Err(Error::Config("fusion needs at least two parts".into()));
        }
        for p in &parts {
            if *p == Modality::Fused || !self.slots.contains_key(&p.slot()) {
                return Err(Error::Config(format!("fusion part {p} is not registered")));
            }
        }
        self.register(Modality::Fused, n_max, |_, _, _| {
            Ok(Embedder::Fused { parts })
        })
    }

    pub fn is_registered(&self, modality: Modality) -> bool {
        self.slots.contains_key(&modality.slot())
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.slots.keys().copied()
    }

    fn slot_for(&self, modality: Modality) -> Result<&Slot> {
        self.slots
            .get(&modality.slot())
            .ok_or_else(|| Error::Config(format!("no tokenizer registered for {modality}")))
    }

    pub fn slot(&self, modality: Modality) -> Option<&Slot> {
        self.slots.get(&modality.slot())
    }

    pub fn params(&self, modality: Modality) -> Option<&ParamSet> {
        self.slot(modality).map(|s| &s.params)
    }

    pub fn params_mut(&mut self, modality: Modality) -> Option<&mut ParamSet> {
        self.slots.get_mut(&modality.slot()).map(|s| &mut s.params)
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        match &self.slots.get(&Modality::Text)?.embedder {
            Embedder::Text { vocab, .. } => Some(vocab),
            _ => None,
        }
    }

    /// Slots whose parameters a model for `modality` trains.
    pub fn slots_used_by(&self, modality: Modality) -> Vec<Modality> {
        let key = modality.slot();
        match self.slots.get(&key).map(|s| &s.embedder) {
            Some(Embedder::Fused { parts }) => {
                let mut v: Vec<Modality> = parts.iter().map(|p| p.slot()).collect();
                v.push(key);
                v.sort();
                v.dedup();
                v
            }
            Some(_) => vec![key],
            None => vec![],
        }
    }

    pub fn param_sets_mut(&mut self, modality: Modality) -> Vec<&mut ParamSet> {
        let used = self.slots_used_by(modality);
        self.slots
            .iter_mut()
            .filter(|(k, _)| used.contains(k))
            .map(|(_, s)| &mut s.params)
            .collect()
    }

    pub fn param_sets(&self, modality: Modality) -> Vec<&ParamSet> {
        let used = self.slots_used_by(modality);
        self.slots
            .iter()
            .filter(|(k, _)| used.contains(k))
            .map(|(_, s)| &s.params)
            .collect()
    }

    /// Scalar parameter count of every slot `modality` trains.
    pub fn scalar_count(&self, modality: Modality) -> usize {
        self.param_sets(modality)
            .iter()
            .map(|p| p.scalar_count())
            .sum()
    }

    pub fn all_param_sets(&self) -> impl Iterator<Item = (Modality, &ParamSet)> {
        self.slots.iter().map(|(m, s)| (*m, &s.params))
    }

    pub fn all_param_sets_mut(&mut self) -> impl Iterator<Item = (Modality, &mut ParamSet)> {
        self.slots.iter_mut().map(|(m, s)| (*m, &mut s.params))
    }

    /// Parameter-free grouping step.
    pub fn prepare(&self, input: &ModalityInput) -> Result<Prepared> {
        let modality = input.modality();
        let slot = self.slot_for(modality)?;
        let content = match (&slot.embedder, input) {
            (Embedder::Text { vocab, .. }, ModalityInput::Text(s)) => {
                PreparedContent::Ids(vocab.encode(s)?)
            }
            (
                Embedder::Image { settings, .. },
                ModalityInput::Image(img) | ModalityInput::Infrared(img) | ModalityInput::Xray(img),
            ) => {
                if img.dims().0 != settings.channels {
                    return Err(Error::Shape(format!(
                        "image has {} channels, tokenizer expects {}",
                        img.dims().0,
                        settings.channels
                    )));
                }
                PreparedContent::Rows(patch::patchify_image(img, settings.patch)?)
            }
            (Embedder::Video { settings, .. }, ModalityInput::Video(v)) => {
                if v.dims().1 != settings.channels {
                    return Err(Error::Shape(format!(
                        "video has {} channels, tokenizer expects {}",
                        v.dims().1,
                        settings.channels
                    )));
                }
                PreparedContent::Rows(patch::patchify_video(v, settings.t_patch, settings.patch)?)
            }
            (Embedder::Hyperspectral { bands, .. }, ModalityInput::Hyperspectral(cube)) => {
                let rows = patch::hyperspectral_rows(cube)?;
                if rows.cols() != *bands {
                    return Err(Error::Shape(format!(
                        "cube has {} bands, tokenizer expects {bands}",
                        rows.cols()
                    )));
                }
                PreparedContent::Rows(rows)
            }
            (Embedder::Audio { settings, .. }, ModalityInput::Audio(a)) => {
                let spec = MelFrontEnd::new(settings.spectrogram.clone(), settings.sample_rate)?
                    .compute(a)?;
                PreparedContent::Rows(audio_patches(&spec, settings)?)
            }
            (Embedder::Audio { settings, .. }, ModalityInput::Spectrogram(spec)) => {
                if spec.cols() != settings.spectrogram.mel_bins {
                    return Err(Error::Shape(format!(
                        "spectrogram has {} bins, tokenizer expects {}",
                        spec.cols(),
                        settings.spectrogram.mel_bins
                    )));
                }
                PreparedContent::Rows(audio_patches(spec, settings)?)
            }
            (Embedder::Point { settings, .. }, ModalityInput::PointCloud(cloud)) => {
                if cloud.feature_dim() != settings.feature_dim {
                    return Err(Error::Shape(format!(
                        "cloud has {} features per point, tokenizer expects {}",
                        cloud.feature_dim(),
                        settings.feature_dim
                    )));
                }
                PreparedContent::Points(point::group_points(cloud, settings.k)?)
            }
            (Embedder::Fused { parts }, ModalityInput::Fused(inputs)) => {
                let got: Vec<Modality> = inputs.iter().map(|i| i.modality()).collect();
                if &got != parts {
                    return Err(Error::Data(format!(
                        "fused input parts {got:?} do not match registered {parts:?}"
                    )));
                }
                PreparedContent::Fused(
                    inputs
                        .iter()
                        .map(|i| self.prepare(i))
                        .collect::<Result<_>>()?,
                )
            }
            _ => unreachable!("slot lookup is keyed by the input's modality"),
        };
        let prepared = Prepared { modality, content };
        let n = prepared.token_count();
        if n > slot.n_max {
            return Err(Error::SequenceLength {
                len: n,
                max: slot.n_max,
            });
        }
        Ok(prepared)
    }

    /// Learned projection of prepared content to `n×D` tokens.
    pub fn embed(&self, prepared: &Prepared) -> Result<(TokenSequence, EmbedCache)> {
        let slot = self.slot_for(prepared.modality)?;
        let ps = &slot.params;
        let (tokens, cache) = match (&slot.embedder, &prepared.content) {
            (Embedder::Text { table, vocab }, PreparedContent::Ids(ids)) => {
                let table = ps.value(*table);
                let mut out = Tensor::zeros(&[ids.len(), self.dim]);
                for (i, &id) in ids.iter().enumerate() {
                    if id >= vocab.len() {
                        return Err(Error::Tokenization(format!("token id {id} out of range")));
                    }
                    out.row_mut(i).copy_from_slice(table.row(id));
                }
                (out, EmbedCache::Ids(ids.clone()))
            }
            (
                Embedder::Image { proj, .. }
                | Embedder::Video { proj, .. }
                | Embedder::Hyperspectral { proj, .. }
                | Embedder::Audio { proj, .. },
                PreparedContent::Rows(rows),
            ) => (proj.forward(ps, rows)?, EmbedCache::Rows(rows.clone())),
            (Embedder::Point { stage1, stage2, .. }, PreparedContent::Points(groups)) => {
                let (out, cache) = self.embed_points(ps, stage1, stage2, groups)?;
                (out, EmbedCache::Points(Box::new(cache)))
            }
            (Embedder::Fused { .. }, PreparedContent::Fused(parts)) => {
                let mut mats = Vec::with_capacity(parts.len());
                let mut caches = Vec::with_capacity(parts.len());
                for part in parts {
                    let (seq, c) = self.embed(part)?;
                    caches.push((part.modality, seq.len(), c));
                    mats.push(seq.into_embeddings());
                }
                let refs: Vec<&Tensor> = mats.iter().collect();
                (Tensor::vstack(&refs)?, EmbedCache::Fused(caches))
            }
            _ => {
                return Err(Error::Data(format!(
                    "prepared content does not match the {} tokenizer",
                    prepared.modality
                )))
            }
        };
        Ok((TokenSequence::new(tokens, prepared.modality)?, cache))
    }

    fn embed_points(
        &self,
        ps: &ParamSet,
        stage1: &Linear,
        stage2: &Linear,
        g: &PointGroups,
    ) -> Result<(Tensor, PointCache)> {
        let pre1 = stage1.forward(ps, &g.stage1_rows)?;
        let (f1, w1) = max_pool_groups(&ops::gelu(&pre1), g.k1);
        let half = f1.cols();
        let rows2 = g.stage2_members.len();
        let mut x2 = Tensor::zeros(&[rows2, 3 + half]);
        for (r, &m) in g.stage2_members.iter().enumerate() {
            let row = x2.row_mut(r);
            row[..3].copy_from_slice(g.stage2_rel.row(r));
            row[3..].copy_from_slice(f1.row(m));
        }
        let pre2 = stage2.forward(ps, &x2)?;
        let (f2, w2) = max_pool_groups(&ops::gelu(&pre2), g.k2);
        Ok((
            f2,
            PointCache {
                stage1_in: g.stage1_rows.clone(),
                stage1_pre: pre1,
                stage1_winners: w1,
                stage2_in: x2,
                stage2_pre: pre2,
                stage2_winners: w2,
                stage1_centers: g.stage1_centers,
                stage2_members: g.stage2_members.clone(),
            },
        ))
    }

    pub fn tokenize(&self, input: &ModalityInput) -> Result<TokenSequence> {
        Ok(self.embed(&self.prepare(input)?)?.0)
    }

    /// Encoder input `[cls; tokens] + pos` for a prepared sample.
    pub fn sequence(&self, prepared: &Prepared) -> Result<(Tensor, SequenceCache)> {
        let (seq, embed) = self.embed(prepared)?;
        let slot = self.slot_for(prepared.modality)?;
        let z0 = add_position_embeddings(
            seq.embeddings(),
            slot.params.value(slot.pos),
            slot.params.value(slot.cls),
        )?;
        Ok((
            z0,
            SequenceCache {
                modality: prepared.modality,
                embed,
                tokens: seq.len(),
            },
        ))
    }

    /// Accumulates gradients for every tokenizer parameter that produced the
    /// sequence, given the gradient of the encoder input.
    pub fn backward(&mut self, cache: &SequenceCache, dz0: &Tensor) -> Result<()> {
        let key = cache.modality.slot();
        let slot = self
            .slots
            .get_mut(&key)
            .ok_or_else(|| Error::Config(format!("no tokenizer registered for {key}")))?;
        let d = dz0.cols();
        let n = cache.tokens;
        {
            let cls = slot.params.value_mut(slot.cls);
            cls.accumulate_grad(dz0.row(0));
        }
        {
            let pos = slot.params.value_mut(slot.pos);
            let g = pos.grad_mut();
            for (o, v) in g[..(n + 1) * d].iter_mut().zip(dz0.data()) {
                *o += v;
            }
        }
        let d_tokens = dz0.slice_rows(1, n + 1);
        self.embed_backward(cache.modality, &cache.embed, &d_tokens)
    }

    fn embed_backward(
        &mut self,
        modality: Modality,
        cache: &EmbedCache,
        dy: &Tensor,
    ) -> Result<()> {
        if let EmbedCache::Fused(parts) = cache {
            let mut start = 0;
            for (m, n, c) in parts {
                // part class tokens and positions are bypassed in a fused
                // sequence; their gradient is zero, not missing
                if let Some(slot) = self.slots.get_mut(&m.slot()) {
                    let (cls, pos) = (slot.cls, slot.pos);
                    slot.params.value_mut(cls).grad_mut();
                    slot.params.value_mut(pos).grad_mut();
                }
                self.embed_backward(*m, c, &dy.slice_rows(start, start + n))?;
                start += n;
            }
            return Ok(());
        }
        let slot = self
            .slots
            .get_mut(&modality.slot())
            .ok_or_else(|| Error::Config(format!("no tokenizer registered for {modality}")))?;
        let ps = &mut slot.params;
        match (&slot.embedder, cache) {
            (Embedder::Text { table, .. }, EmbedCache::Ids(ids)) => {
                let d = dy.cols();
                let g = ps.value_mut(*table).grad_mut();
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in g[id * d..(id + 1) * d].iter_mut().zip(dy.row(i)) {
                        *o += v;
                    }
                }
            }
            (
                Embedder::Image { proj, .. }
                | Embedder::Video { proj, .. }
                | Embedder::Hyperspectral { proj, .. }
                | Embedder::Audio { proj, .. },
                EmbedCache::Rows(rows),
            ) => {
                proj.backward(ps, rows, dy);
            }
            (Embedder::Point { stage1, stage2, .. }, EmbedCache::Points(c)) => {
                let d_act2 = max_pool_groups_backward(c.stage2_pre.rows(), &c.stage2_winners, dy);
                let d_pre2 = ops::gelu_backward(&c.stage2_pre, &d_act2);
                let dx2 = stage2.backward(ps, &c.stage2_in, &d_pre2);
                let half = c.stage1_pre.cols();
                let mut df1 = Tensor::zeros(&[c.stage1_centers, half]);
                for (r, &m) in c.stage2_members.iter().enumerate() {
                    for (o, v) in df1.row_mut(m).iter_mut().zip(&dx2.row(r)[3..]) {
                        *o += v;
                    }
                }
                let d_act1 = max_pool_groups_backward(c.stage1_pre.rows(), &c.stage1_winners, &df1);
                let d_pre1 = ops::gelu_backward(&c.stage1_pre, &d_act1);
                stage1.backward(ps, &c.stage1_in, &d_pre1);
            }
            _ => {
                return Err(Error::Data(format!(
                    "cache does not match the {modality} tokenizer"
                )))
            }
        }
        Ok(())
    }
}

fn audio_patches(spec: &Tensor, s: &AudioSettings) -> Result<Tensor> {
    patch::patchify_spectrogram(spec, s.patch, s.time_stride, s.freq_stride)
}
