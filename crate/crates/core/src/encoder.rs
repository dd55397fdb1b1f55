//! Modality-agnostic pre-norm transformer encoder.
//!
//! Each block computes `z' = MSA(LN(z)) + z` then `z = MLP(LN(z')) + z'`.
//! The encoder knows nothing about modalities: it consumes any `(n+1)×D`
//! sequence whose row 0 is the class token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};
use crate::ops::{self, LayerNormCache};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub n_max: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            depth: 2,
            heads: 4,
            dim: 64,
            mlp_dim: 256,
            n_max: 256,
        }
    }

    /// ViT-Base sized backbone.
    pub fn base() -> Self {
        Self {
            depth: 12,
            heads: 12,
            dim: 768,
            mlp_dim: 3072,
            n_max: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("depth", self.depth),
            ("heads", self.heads),
            ("dim", self.dim),
            ("mlp_dim", self.mlp_dim),
            ("n_max", self.n_max),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.dim {} is not divisible by encoder.heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Number of scalar parameters, from the shapes alone.
    pub fn parameter_count(&self) -> usize {
        let (d, m) = (self.dim, self.mlp_dim);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
        self.depth * per_layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MsaCache {
    ln: LayerNormCache,
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head attention probabilities, `(n+1)×(n+1)` each.
    pub attention: Vec<Tensor>,
    concat: Tensor,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    ln: LayerNormCache,
    x: Tensor,
    hidden: Tensor,
    act: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    blocks: Vec<(MsaCache, MlpCache)>,
    final_ln: LayerNormCache,
}

impl EncodeCache {
    pub fn attention(&self, layer: usize) -> &[Tensor] {
        &self.blocks[layer].0.attention
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput {
    /// Final-normalized class token, length `D`.
    pub summary: Vec<f64>,
    /// Final-normalized hidden state of every row, `(n+1)×D`.
    pub tokens: Tensor,
}

fn columns(x: &Tensor, start: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(&[x.rows(), width]);
    for i in 0..x.rows() {
        out.row_mut(i)
            .copy_from_slice(&x.row(i)[start..start + width]);
    }
    out
}

fn add_columns(dst: &mut Tensor, src: &Tensor, start: usize) {
    let w = src.cols();
    for i in 0..src.rows() {
        for (o, v) in dst.row_mut(i)[start..start + w].iter_mut().zip(src.row(i)) {
            *o += v;
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (o, v) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    pub params: ParamSet,
    blocks: Vec<Block>,
    final_norm: Norm,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (d, m) = (config.dim, config.mlp_dim);
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("encoder.blocks.{l}");
            blocks.push(Block {
                ln1: Norm::init(&mut params, &format!("{p}.ln1"), d)?,
                q: Linear::init(&mut params, &format!("{p}.attn.q"), d, d, &mut rng)?,
                k: Linear::init(&mut params, &format!("{p}.attn.k"), d, d, &mut rng)?,
                v: Linear::init(&mut params, &format!("{p}.attn.v"), d, d, &mut rng)?,
                out: Linear::init(&mut params, &format!("{p}.attn.out"), d, d, &mut rng)?,
                ln2: Norm::init(&mut params, &format!("{p}.ln2"), d)?,
                fc1: Linear::init(&mut params, &format!("{p}.mlp.fc1"), d, m, &mut rng)?,
                fc2: Linear::init(&mut params, &format!("{p}.mlp.fc2"), m, d, &mut rng)?,
            });
        }
        let final_norm = Norm::init(&mut params, "encoder.final_ln", d)?;
        Ok(Self {
            config,
            params,
            blocks,
            final_norm,
        })
    }

    /// Builds an encoder for `config` and copies every value from `source`,
    /// which must hold exactly the expected names and shapes.
    pub fn from_params(config: EncoderConfig, source: &ParamSet) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        if source.len() != enc.params.len() {
            return Err(Error::Load {
                field: "encoder".into(),
                detail: format!(
                    "expected {} tensors, found {}",
                    enc.params.len(),
                    source.len()
                ),
            });
        }
        enc.params.load_values(source)?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// `z + MSA(LN(z))`.
    pub fn attention_block(&self, layer: usize, z: &Tensor) -> Result<(Tensor, MsaCache)> {
        let b = &self.blocks[layer];
        let ps = &self.params;
        let (x, ln) = b.ln1.forward(ps, z)?;
        let q = b.q.forward(ps, &x)?;
        let k = b.k.forward(ps, &x)?;
        let v = b.v.forward(ps, &x)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor::zeros(&[z.rows(), self.config.dim]);
        let mut attention = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (qh, kh, vh) = (
                columns(&q, h * dh, dh),
                columns(&k, h * dh, dh),
                columns(&v, h * dh, dh),
            );
            let scores = ops::matmul_nt(&qh, &kh)?.map(|s| s * scale);
            let probs = ops::softmax_rows(&scores);
            let oh = ops::matmul(&probs, &vh)?;
            add_columns(&mut concat, &oh, h * dh);
            attention.push(probs);
        }
        let mut out = b.out.forward(ps, &concat)?;
        add_into(&mut out, z);
        Ok((
            out,
            MsaCache {
                ln,
                x,
                q,
                k,
                v,
                attention,
                concat,
            },
        ))
    }

    pub fn attention_block_backward(
        &mut self,
        layer: usize,
        cache: &MsaCache,
        dout: &Tensor,
    ) -> Tensor {
        let b = self.blocks[layer].clone();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let d_concat = b.out.backward(&mut self.params, &cache.concat, dout);
        let shape = cache.q.shape().to_vec();
        let (mut dq, mut dk, mut dv) = (
            Tensor::zeros(&shape),
            Tensor::zeros(&shape),
            Tensor::zeros(&shape),
        );
        for h in 0..self.config.heads {
            let probs = &cache.attention[h];
            let d_oh = columns(&d_concat, h * dh, dh);
            let vh = columns(&cache.v, h * dh, dh);
            let (d_probs, d_vh) = ops::matmul_backward(probs, &vh, &d_oh);
            let d_scores = ops::softmax_rows_backward(probs, &d_probs).map(|g| g * scale);
            let qh = columns(&cache.q, h * dh, dh);
            let kh = columns(&cache.k, h * dh, dh);
            let (d_qh, d_kh) = ops::matmul_nt_backward(&qh, &kh, &d_scores);
            add_columns(&mut dq, &d_qh, h * dh);
            add_columns(&mut dk, &d_kh, h * dh);
            add_columns(&mut dv, &d_vh, h * dh);
        }
        let mut dx = b.q.backward(&mut self.params, &cache.x, &dq);
        add_into(&mut dx, &b.k.backward(&mut self.params, &cache.x, &dk));
        add_into(&mut dx, &b.v.backward(&mut self.params, &cache.x, &dv));
        let mut dz = b.ln1.backward(&mut self.params, &cache.ln, &dx);
        add_into(&mut dz, dout);
        dz
    }

    /// `z + MLP(LN(z))` with a GELU between the two linear layers.
    pub fn mlp_block(&self, layer: usize, z: &Tensor) -> Result<(Tensor, MlpCache)> {
        let b = &self.blocks[layer];
        let ps = &self.params;
        let (x, ln) = b.ln2.forward(ps, z)?;
        let hidden = b.fc1.forward(ps, &x)?;
        let act = ops::gelu(&hidden);
        let mut out = b.fc2.forward(ps, &act)?;
        add_into(&mut out, z);
        Ok((out, MlpCache { ln, x, hidden, act }))
    }

    pub fn mlp_block_backward(&mut self, layer: usize, cache: &MlpCache, dout: &Tensor) -> Tensor {
        let b = self.blocks[layer].clone();
        let d_act = b.fc2.backward(&mut self.params, &cache.act, dout);
        let d_hidden = ops::gelu_backward(&cache.hidden, &d_act);
        let dx = b.fc1.backward(&mut self.params, &cache.x, &d_hidden);
        let mut dz = b.ln2.backward(&mut self.params, &cache.ln, &dx);
        add_into(&mut dz, dout);
        dz
    }

    /// Runs every block without the final normalization.
    pub fn hidden_states(&self, z0: &Tensor) -> Result<(Tensor, Vec<(MsaCache, MlpCache)>)> {
        let (rows, cols) = z0.ensure_matrix("encode")?;
        if cols != self.config.dim {
            return Err(Error::dim("encode", z0.shape(), &[rows, self.config.dim]));
        }
        if rows > self.config.n_max + 1 {
            return Err(Error::SequenceLength {
                len: rows - 1,
                max: self.config.n_max,
            });
        }
        let mut z = z0.clone();
        z.clear_grad();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let (z1, c1) = self.attention_block(l, &z)?;
            let (z2, c2) = self.mlp_block(l, &z1)?;
            caches.push((c1, c2));
            z = z2;
        }
        Ok((z, caches))
    }

    pub fn encode_with_cache(&self, z0: &Tensor) -> Result<(EncodeOutput, EncodeCache)> {
        let (z, blocks) = self.hidden_states(z0)?;
        let (tokens, final_ln) = self.final_norm.forward(&self.params, &z)?;
        Ok((
            EncodeOutput {
                summary: tokens.row(0).to_vec(),
                tokens,
            },
            EncodeCache { blocks, final_ln },
        ))
    }

    pub fn encode(&self, z0: &Tensor) -> Result<EncodeOutput> {
        Ok(self.encode_with_cache(z0)?.0)
    }

    /// Backpropagates a gradient on the final-normalized rows (the summary is
    /// row 0). Accumulates parameter gradients and returns `d z0`.
    pub fn backward(&mut self, cache: &EncodeCache, d_tokens: &Tensor) -> Tensor {
        let fin = self.final_norm;
        let mut dz = fin.backward(&mut self.params, &cache.final_ln, d_tokens);
        for l in (0..self.blocks.len()).rev() {
            let (c1, c2) = &cache.blocks[l];
            dz = self.mlp_block_backward(l, c2, &dz);
            dz = self.attention_block_backward(l, c1, &dz);
        }
        dz
    }
}
