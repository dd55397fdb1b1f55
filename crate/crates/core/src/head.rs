//! Task heads and the tokenizer → encoder → head training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncodeCache, Encoder};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};
use crate::ops::{self, LayerNormCache};
use crate::optim::Adam;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::{MetaTokenizer, Modality, Prepared, SequenceCache};

/// `LN → [Linear → GELU] → Linear`. Without the hidden layer this is a
/// linear probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead {
    pub params: ParamSet,
    norm: Norm,
    hidden: Option<Linear>,
    out: Linear,
    classes: usize,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    ln: LayerNormCache,
    x: Tensor,
    hidden_pre: Option<Tensor>,
    out_in: Tensor,
}

impl ClassificationHead {
    pub fn new(
        name: &str,
        dim: usize,
        classes: usize,
        hidden: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Config(
                "head needs positive width and class count".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let norm = Norm::init(&mut params, &format!("{name}.ln"), dim)?;
        let (hidden, out_in) = match hidden {
            Some(h) if h > 0 => (
                Some(Linear::init(
                    &mut params,
                    &format!("{name}.hidden"),
                    dim,
                    h,
                    &mut rng,
                )?),
                h,
            ),
            Some(_) => return Err(Error::Config("head hidden width must be positive".into())),
            None => (None, dim),
        };
        let out = Linear::init(
            &mut params,
            &format!("{name}.out"),
            out_in,
            classes,
            &mut rng,
        )?;
        Ok(Self {
            params,
            norm,
            hidden,
            out,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn output_layer(&self) -> Linear {
        self.out
    }

    /// `x` is `B×D`; returns `B×K` logits.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let (xn, ln) = self.norm.forward(&self.params, x)?;
        let (hidden_pre, out_in) = match &self.hidden {
            Some(h) => {
                let pre = h.forward(&self.params, &xn)?;
                let act = ops::gelu(&pre);
                (Some(pre), act)
            }
            None => (None, xn.clone()),
        };
        let logits = self.out.forward(&self.params, &out_in)?;
        Ok((
            logits,
            HeadCache {
                ln,
                x: xn,
                hidden_pre,
                out_in,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache, d_logits: &Tensor) -> Tensor {
        let mut d = self.out.backward(&mut self.params, &cache.out_in, d_logits);
        if let (Some(h), Some(pre)) = (self.hidden, &cache.hidden_pre) {
            let d_pre = ops::gelu_backward(pre, &d);
            d = h.backward(&mut self.params, &cache.x, &d_pre);
        }
        let norm = self.norm;
        norm.backward(&mut self.params, &cache.ln, &d)
    }
}

/// How the encoder output is reduced to one vector for the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Final class-token state.
    #[default]
    Cls,
    /// Mean of every non-class row.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Prepared,
    pub label: usize,
}

struct ForwardTrace {
    seq: SequenceCache,
    enc: EncodeCache,
    rows: usize,
    head: HeadCache,
}

fn pool(tokens: &Tensor, pooling: Pooling) -> Tensor {
    let d = tokens.cols();
    let mut v = Tensor::zeros(&[1, d]);
    match pooling {
        Pooling::Cls => v.data_mut().copy_from_slice(tokens.row(0)),
        Pooling::Mean => {
            let n = tokens.rows() - 1;
            for i in 1..tokens.rows() {
                for (o, x) in v.data_mut().iter_mut().zip(tokens.row(i)) {
                    *o += x;
                }
            }
            for o in v.data_mut() {
                *o /= n as f64;
            }
        }
    }
    v
}

fn unpool(d_pooled: &[f64], rows: usize, pooling: Pooling) -> Tensor {
    let d = d_pooled.len();
    let mut dt = Tensor::zeros(&[rows, d]);
    match pooling {
        Pooling::Cls => dt.row_mut(0).copy_from_slice(d_pooled),
        Pooling::Mean => {
            let n = (rows - 1) as f64;
            for i in 1..rows {
                for (o, g) in dt.row_mut(i).iter_mut().zip(d_pooled) {
                    *o = g / n;
                }
            }
        }
    }
    dt
}

fn forward_trace(
    input: &Prepared,
    tokenizer: &MetaTokenizer,
    encoder: &Encoder,
    head: &ClassificationHead,
    pooling: Pooling,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let (z0, seq) = tokenizer.sequence(input)?;
    let (out, enc) = encoder.encode_with_cache(&z0)?;
    let pooled = pool(&out.tokens, pooling);
    let (logits, head_cache) = head.forward(&pooled)?;
    Ok((
        logits.into_data(),
        ForwardTrace {
            seq,
            enc,
            rows: z0.rows(),
            head: head_cache,
        },
    ))
}

/// Logits from the class-token summary.
pub fn forward(
    input: &Prepared,
    tokenizer: &MetaTokenizer,
    encoder: &Encoder,
    head: &ClassificationHead,
) -> Result<Vec<f64>> {
    Ok(forward_trace(input, tokenizer, encoder, head, Pooling::Cls)?.0)
}

/// Logits from the mean of all non-class final token states.
pub fn forward_pooled(
    input: &Prepared,
    tokenizer: &MetaTokenizer,
    encoder: &Encoder,
    head: &ClassificationHead,
) -> Result<Vec<f64>> {
    Ok(forward_trace(input, tokenizer, encoder, head, Pooling::Mean)?.0)
}

/// The pooled representation the head sees.
pub fn pooled_representation(
    input: &Prepared,
    tokenizer: &MetaTokenizer,
    encoder: &Encoder,
    pooling: Pooling,
) -> Result<Vec<f64>> {
    let (z0, _) = tokenizer.sequence(input)?;
    let out = encoder.encode(&z0)?;
    Ok(pool(&out.tokens, pooling).into_data())
}

/// Forward and backward over a single-modality batch. Gradients of the
/// mean loss are added to every trainable parameter; nothing is updated.
pub fn accumulate_gradients(
    batch: &[&Sample],
    tokenizer: &mut MetaTokenizer,
    encoder: &mut Encoder,
    head: &mut ClassificationHead,
    pooling: Pooling,
) -> Result<StepStats> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Data("empty training batch".into()))?;
    let modality = first.input.modality;
    if batch.iter().any(|s| s.input.modality != modality) {
        return Err(Error::Data("batch mixes modalities".into()));
    }
    let k = head.classes();
    if let Some(s) = batch.iter().find(|s| s.label >= k) {
        return Err(Error::Data(format!("label {} outside [0, {k})", s.label)));
    }
    let mut traces = Vec::with_capacity(batch.len());
    let mut logits = Vec::with_capacity(batch.len() * k);
    for s in batch {
        let (l, t) = forward_trace(&s.input, tokenizer, encoder, head, pooling)?;
        logits.extend(l);
        traces.push(t);
    }
    let logits = Tensor::new(vec![batch.len(), k], logits)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let (loss, d_logits) = ops::cross_entropy(&logits, &labels)?;
    let correct = (0..batch.len())
        .filter(|&i| ops::argmax(logits.row(i)) == labels[i])
        .count();
    for (i, t) in traces.iter().enumerate() {
        let d_row = d_logits.slice_rows(i, i + 1);
        let d_pooled = head.backward(&t.head, &d_row);
        let d_tokens = unpool(d_pooled.data(), t.rows, pooling);
        let dz0 = encoder.backward(&t.enc, &d_tokens);
        tokenizer.backward(&t.seq, &dz0)?;
    }
    Ok(StepStats {
        loss,
        accuracy: correct as f64 / batch.len() as f64,
    })
}

/// Mutable view of the three trainable stages for one task.
pub struct Trainer<'a> {
    pub tokenizer: &'a mut MetaTokenizer,
    pub encoder: &'a mut Encoder,
    pub head: &'a mut ClassificationHead,
    pub optimizer: &'a mut Adam,
    pub pooling: Pooling,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
}

impl Trainer<'_> {
    fn param_sets(&mut self, modality: Modality) -> Vec<&mut ParamSet> {
        let mut sets = self.tokenizer.param_sets_mut(modality);
        sets.push(&mut self.encoder.params);
        sets.push(&mut self.head.params);
        sets
    }

    /// Trainable scalars touched when training on `modality`.
    pub fn trainable_count(&mut self, modality: Modality) -> usize {
        self.param_sets(modality)
            .iter()
            .map(|p| p.trainable_scalar_count())
            .sum()
    }

    /// One optimizer step on a single-modality batch; returns the mean loss.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepStats> {
        let modality = batch
            .first()
            .ok_or_else(|| Error::Data("empty training batch".into()))?
            .input
            .modality;
        for set in self.param_sets(modality) {
            set.clear_grads();
        }
        let stats =
            accumulate_gradients(batch, self.tokenizer, self.encoder, self.head, self.pooling)?;
        let mut sets = self.tokenizer.param_sets_mut(modality);
        sets.push(&mut self.encoder.params);
        sets.push(&mut self.head.params);
        self.optimizer.apply(&mut sets)?;
        Ok(stats)
    }

    /// Runs `steps` optimizer steps over seeded shuffles of `data`.
    pub fn fit(
        &mut self,
        data: &[Sample],
        steps: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<TrainRun> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let modality = data[0].input.modality;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut epochs = 0;
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut batch = Vec::with_capacity(batch_size);
            while batch.len() < batch_size.min(data.len()) {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                    epochs += 1;
                }
                batch.push(&data[order[cursor]]);
                cursor += 1;
            }
            let stats = self.train_step(&batch)?;
            history.push(StepRecord {
                step: step + 1,
                loss: stats.loss,
                accuracy: stats.accuracy,
            });
        }
        Ok(TrainRun {
            modality,
            epochs,
            batch_size,
            seed,
            history,
            trainable_params: self.trainable_count(modality),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub modality: Modality,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub history: Vec<StepRecord>,
    pub trainable_params: usize,
}

impl TrainRun {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.history.last().map(|r| r.accuracy)
    }

    /// `step,loss,accuracy` with one row per step.
    pub fn to_csv(&self) -> String {
        metrics_csv(&self.history)
    }
}

pub fn metrics_csv(history: &[StepRecord]) -> String {
    let mut s = String::from("step,loss,accuracy\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.accuracy));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy and mean cross-entropy over `data`. Mutates nothing.
pub fn evaluate(
    data: &[Sample],
    tokenizer: &MetaTokenizer,
    encoder: &Encoder,
    head: &ClassificationHead,
    pooling: Pooling,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for s in data {
        let (logits, _) = forward_trace(&s.input, tokenizer, encoder, head, pooling)?;
        if ops::argmax(&logits) == s.label {
            correct += 1;
        }
        let t = Tensor::new(vec![1, logits.len()], logits)?;
        loss += ops::cross_entropy(&t, &[s.label])?.0;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::{ImageInput, ImageSettings, ModalityInput};

    fn setup(classes: usize) -> (MetaTokenizer, Encoder, ClassificationHead) {
        let cfg = EncoderConfig {
            depth: 1,
            heads: 2,
            dim: 8,
            mlp_dim: 16,
            n_max: 16,
        };
        let mut tok = MetaTokenizer::new(8, 1).unwrap();
        tok.register_image(
            ImageSettings {
                channels: 1,
                patch: 2,
            },
            16,
        )
        .unwrap();
        let enc = Encoder::new(cfg, 2).unwrap();
        let head = ClassificationHead::new("head", 8, classes, None, 3).unwrap();
        (tok, enc, head)
    }

    fn image_sample(tok: &MetaTokenizer, fill: f64, label: usize) -> Sample {
        let img = ImageInput::new(Tensor::filled(&[1, 4, 4], fill)).unwrap();
        Sample {
            input: tok.prepare(&ModalityInput::Image(img)).unwrap(),
            label,
        }
    }

    #[test]
    fn single_class_head_gives_one_logit() {
        let (tok, enc, head) = setup(1);
        let s = image_sample(&tok, 0.3, 0);
        assert_eq!(forward(&s.input, &tok, &enc, &head).unwrap().len(), 1);
    }

    #[test]
    fn zero_head_weights_emit_bias() {
        let (tok, enc, mut head) = setup(3);
        let out = head.output_layer();
        head.params.value_mut(out.weight).data_mut().fill(0.0);
        head.params
            .value_mut(out.bias)
            .data_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5]);
        for fill in [0.0, 1.0, -3.0] {
            let s = image_sample(&tok, fill, 0);
            assert_eq!(
                forward(&s.input, &tok, &enc, &head).unwrap(),
                [1.0, -2.0, 0.5]
            );
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut tok, mut enc, mut head) = setup(2);
        let data = vec![image_sample(&tok, 0.1, 0), image_sample(&tok, 0.9, 1)];
        let before = (tok.clone(), enc.digest(), head.params.digest());
        let mut opt = Adam::new(0.0);
        let mut tr = Trainer {
            tokenizer: &mut tok,
            encoder: &mut enc,
            head: &mut head,
            optimizer: &mut opt,
            pooling: Pooling::Cls,
        };
        let batch: Vec<&Sample> = data.iter().collect();
        let a = tr.train_step(&batch).unwrap();
        let b = tr.train_step(&batch).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(
            tok.params(Modality::Image),
            before.0.params(Modality::Image)
        );
        assert_eq!(enc.digest(), before.1);
        assert_eq!(head.params.digest(), before.2);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let (mut tok, mut enc, mut head) = setup(2);
        let s = image_sample(&tok, 0.1, 2);
        let mut opt = Adam::default();
        let mut tr = Trainer {
            tokenizer: &mut tok,
            encoder: &mut enc,
            head: &mut head,
            optimizer: &mut opt,
            pooling: Pooling::Cls,
        };
        assert!(matches!(tr.train_step(&[&s]), Err(Error::Data(_))));
    }

    #[test]
    fn evaluate_is_pure_and_rejects_empty() {
        let (tok, enc, head) = setup(2);
        let data = vec![image_sample(&tok, 0.1, 0), image_sample(&tok, 0.9, 1)];
        let a = evaluate(&data, &tok, &enc, &head, Pooling::Cls).unwrap();
        let b = evaluate(&data, &tok, &enc, &head, Pooling::Cls).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&[], &tok, &enc, &head, Pooling::Cls).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = metrics_csv(&[StepRecord {
            step: 1,
            loss: 0.5,
            accuracy: 1.0,
        }]);
        assert_eq!(csv, "step,loss,accuracy\n1,0.5,1\n");
    }
}
