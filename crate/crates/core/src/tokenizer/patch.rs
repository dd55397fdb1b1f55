//! Grouping of dense grids into flattened patches.
//!
//! These produce the matrix of flattened patches; the learned projection to
//! the embedding width happens in [`super::MetaTokenizer`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image as a `C×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub pixels: Tensor,
}

impl ImageInput {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "image must be C×H×W, got {:?}",
                pixels.shape()
            )));
        }
        Ok(Self { pixels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }
}

/// Video as a `Frames×C×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoInput {
    pub frames: Tensor,
}

impl VideoInput {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "video must be Frames×C×H×W, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }
}

fn check_divisible(what: &str, extent: usize, patch: usize) -> Result<()> {
    if patch == 0 || extent % patch != 0 {
        return Err(Error::Shape(format!(
            "{what} {extent} is not divisible by patch size {patch}"
        )));
    }
    Ok(())
}

/// Non-overlapping `S×S` patches in row-major patch order. Each row is one
/// patch flattened channel-major: `(c, dy, dx)`.
pub fn patchify_image(image: &ImageInput, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims();
    check_divisible("image height", h, patch)?;
    check_divisible("image width", w, patch)?;
    let (ph, pw) = (h / patch, w / patch);
    let px = image.pixels.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..ph {
        for pxi in 0..pw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + pxi * patch;
                    out.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, c * patch * patch], out)
}

/// Non-overlapping `S_t×S×S` tubes, ordered time-major then row-major in
/// space. Each row is flattened as `(t, c, dy, dx)`.
pub fn patchify_video(video: &VideoInput, t_patch: usize, patch: usize) -> Result<Tensor> {
    let (f, c, h, w) = video.dims();
    check_divisible("frame count", f, t_patch)?;
    check_divisible("video height", h, patch)?;
    check_divisible("video width", w, patch)?;
    let (pt, ph, pw) = (f / t_patch, h / patch, w / patch);
    let px = video.frames.data();
    let mut out = Vec::with_capacity(f * c * h * w);
    for ti in 0..pt {
        for py in 0..ph {
            for pxi in 0..pw {
                for dt in 0..t_patch {
                    let frame = ti * t_patch + dt;
                    for ch in 0..c {
                        for dy in 0..patch {
                            let row = ((frame * c + ch) * h + py * patch + dy) * w + pxi * patch;
                            out.extend_from_slice(&px[row..row + patch]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![pt * ph * pw, t_patch * c * patch * patch], out)
}

/// One row per pixel of an `H×W×Bands` cube.
pub fn hyperspectral_rows(cube: &Tensor) -> Result<Tensor> {
    if cube.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "hyperspectral cube must be H×W×Bands, got {:?}",
            cube.shape()
        )));
    }
    let s = cube.shape();
    Tensor::new(vec![s[0] * s[1], s[2]], cube.data().to_vec())
}

/// Number of window positions of a sliding window along one axis.
pub fn sliding_count(extent: usize, window: usize, stride: usize) -> usize {
    if extent < window || stride == 0 {
        0
    } else {
        (extent - window) / stride + 1
    }
}

/// Overlapping `S×S` patches over a `T×F` spectrogram. Patches are ordered by
/// frequency row, then time; each is flattened with time as the slow axis.
pub fn patchify_spectrogram(
    spec: &Tensor,
    patch: usize,
    time_stride: usize,
    freq_stride: usize,
) -> Result<Tensor> {
    let (t, f) = spec.ensure_matrix("patchify_spectrogram")?;
    if patch == 0 || time_stride == 0 || freq_stride == 0 {
        return Err(Error::Argument(
            "patch size and strides must be positive".into(),
        ));
    }
    if t < patch || f < patch {
        return Err(Error::Shape(format!(
            "spectrogram {t}×{f} is smaller than one {patch}×{patch} patch"
        )));
    }
    let nt = sliding_count(t, patch, time_stride);
    let nf = sliding_count(f, patch, freq_stride);
    let mut out = Vec::with_capacity(nt * nf * patch * patch);
    for fi in 0..nf {
        for ti in 0..nt {
            for dt in 0..patch {
                let row = spec.row(ti * time_stride + dt);
                let f0 = fi * freq_stride;
                out.extend_from_slice(&row[f0..f0 + patch]);
            }
        }
    }
    Tensor::new(vec![nt * nf, patch * patch], out)
}
