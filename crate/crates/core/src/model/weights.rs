//! Weight containers and initialization.
//!
//! Every tensor has a stable dotted name; `visit_tensors` enumerates them
//! in a canonical order shared by binding, serialization and the
//! optimizer's flat parameter layout. All values are held at f32 precision
//! so serialization is lossless.

use super::ModelConfig;
use crate::attention::{AttentionWeights, BoundAttention};
use crate::error::Result;
use crate::rng::{stream, uniform, StreamKind};
use crate::tensor::{Tape, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights {
    /// 1 -> d_model linear embed of the scalar gate value.
    pub w: Tensor,
    pub b: Tensor,
    /// Sinusoidal table [gates, d_model]; fixed, not trained.
    pub pos: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockWeights {
    pub attn: AttentionWeights,
    pub ln1: LayerNormWeights,
    pub ffn: FfnWeights,
    pub ln2: LayerNormWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockWeights {
    pub self_attn: AttentionWeights,
    pub ln1: LayerNormWeights,
    pub cross_attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub ffn: FfnWeights,
    pub ln3: LayerNormWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w: Tensor,
    pub b: Tensor,
}

pub const HEAD_NAMES: [&str; 3] = ["tau1", "tau2", "ar"];

#[derive(Debug, Clone, PartialEq)]
pub struct MFliNetWeights {
    pub cfg: ModelConfig,
    pub irf_embed: EmbedWeights,
    pub tpsf_embed: EmbedWeights,
    pub encoder: Vec<EncoderBlockWeights>,
    pub decoder: Vec<DecoderBlockWeights>,
    pub heads: [HeadWeights; 3],
}

fn quantize(mut t: Tensor) -> Tensor {
    for v in &mut t.data {
        *v = *v as f32 as f64;
    }
    t
}

fn uniform_tensor(shape: Vec<usize>, lim: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| uniform(rng, -lim, lim)).collect();
    quantize(Tensor::new(shape, data).unwrap().with_grad())
}

fn sinusoidal_table(gates: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; gates * d];
    for t in 0..gates {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = t as f64 / 10_000f64.powf(pair / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    quantize(Tensor::new(vec![gates, d], data).unwrap())
}

impl EmbedWeights {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let lim = 1.0 / (d as f64).sqrt();
        EmbedWeights {
            w: uniform_tensor(vec![1, d], lim, rng),
            b: quantize(Tensor::zeros(vec![d]).with_grad()),
            pos: sinusoidal_table(cfg.gates, d),
        }
    }
}

impl LayerNormWeights {
    fn init(d: usize) -> Self {
        LayerNormWeights {
            gain: Tensor::new(vec![d], vec![1.0; d]).unwrap().with_grad(),
            bias: Tensor::zeros(vec![d]).with_grad(),
        }
    }
}

impl FfnWeights {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_width();
        let lim_in = 1.0 / (d as f64).sqrt();
        let lim_out = 1.0 / (f as f64).sqrt();
        FfnWeights {
            w1: uniform_tensor(vec![d, f], lim_in, rng),
            b1: Tensor::zeros(vec![f]).with_grad(),
            w2: uniform_tensor(vec![d, f], lim_in, rng),
            b2: Tensor::zeros(vec![f]).with_grad(),
            w3: uniform_tensor(vec![f, d], lim_out, rng),
            b3: Tensor::zeros(vec![d]).with_grad(),
        }
    }
}

fn init_attention(cfg: &ModelConfig, differential: bool, rng: &mut ChaCha8Rng) -> Result<AttentionWeights> {
    let mut w = if differential {
        AttentionWeights::differential(cfg.d_model, cfg.heads, rng)?
    } else {
        AttentionWeights::standard(cfg.d_model, cfg.heads, rng)?
    };
    for h in w.first.iter_mut().chain(w.second.iter_mut().flatten()) {
        h.wq = quantize(h.wq.clone());
        h.wk = quantize(h.wk.clone());
        h.wv = quantize(h.wv.clone());
    }
    if let Some(l) = w.lambda.take() {
        w.lambda = Some(quantize(l));
    }
    w.output = quantize(w.output.clone());
    Ok(w)
}

impl MFliNetWeights {
    /// Fresh weights seeded from the config.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut stream(cfg.seed, StreamKind::WeightInit, 0, 0);
        let differential = cfg.is_differential();
        let irf_embed = EmbedWeights::init(cfg, rng);
        let tpsf_embed = EmbedWeights::init(cfg, rng);
        let encoder = (0..cfg.encoder_blocks)
            .map(|_| {
                Ok(EncoderBlockWeights {
                    attn: init_attention(cfg, differential, rng)?,
                    ln1: LayerNormWeights::init(cfg.d_model),
                    ffn: FfnWeights::init(cfg, rng),
                    ln2: LayerNormWeights::init(cfg.d_model),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_blocks)
            .map(|_| {
                Ok(DecoderBlockWeights {
                    self_attn: init_attention(cfg, differential, rng)?,
                    ln1: LayerNormWeights::init(cfg.d_model),
                    cross_attn: init_attention(cfg, false, rng)?,
                    ln2: LayerNormWeights::init(cfg.d_model),
                    ffn: FfnWeights::init(cfg, rng),
                    ln3: LayerNormWeights::init(cfg.d_model),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lim = 1.0 / (cfg.d_model as f64).sqrt();
        let heads = [(); 3].map(|_| HeadWeights {
            w: uniform_tensor(vec![cfg.d_model, 1], lim, rng),
            b: quantize(Tensor::zeros(vec![1]).with_grad()),
        });
        Ok(MFliNetWeights {
            cfg: *cfg,
            irf_embed,
            tpsf_embed,
            encoder,
            decoder,
            heads,
        })
    }

    /// Every tensor, named, in canonical order.
    pub fn visit_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, e) in [("irf_embed", &self.irf_embed), ("tpsf_embed", &self.tpsf_embed)] {
            out.push((format!("{name}.w"), &e.w));
            out.push((format!("{name}.b"), &e.b));
            out.push((format!("{name}.pos"), &e.pos));
        }
        for (i, b) in self.encoder.iter().enumerate() {
            b.attn.visit_tensors(&format!("enc{i}.attn"), &mut out);
            out.push((format!("enc{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("enc{i}.ln1.bias"), &b.ln1.bias));
            visit_ffn(&format!("enc{i}.ffn"), &b.ffn, &mut out);
            out.push((format!("enc{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("enc{i}.ln2.bias"), &b.ln2.bias));
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.self_attn.visit_tensors(&format!("dec{i}.self"), &mut out);
            out.push((format!("dec{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("dec{i}.ln1.bias"), &b.ln1.bias));
            b.cross_attn.visit_tensors(&format!("dec{i}.cross"), &mut out);
            out.push((format!("dec{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("dec{i}.ln2.bias"), &b.ln2.bias));
            visit_ffn(&format!("dec{i}.ffn"), &b.ffn, &mut out);
            out.push((format!("dec{i}.ln3.gain"), &b.ln3.gain));
            out.push((format!("dec{i}.ln3.bias"), &b.ln3.bias));
        }
        for (h, name) in self.heads.iter().zip(HEAD_NAMES) {
            out.push((format!("head_{name}.w"), &h.w));
            out.push((format!("head_{name}.b"), &h.b));
        }
        out
    }

    pub fn visit_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, e) in [
            ("irf_embed", &mut self.irf_embed),
            ("tpsf_embed", &mut self.tpsf_embed),
        ] {
            out.push((format!("{name}.w"), &mut e.w));
            out.push((format!("{name}.b"), &mut e.b));
            out.push((format!("{name}.pos"), &mut e.pos));
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.attn.visit_tensors_mut(&format!("enc{i}.attn"), &mut out);
            out.push((format!("enc{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("enc{i}.ln1.bias"), &mut b.ln1.bias));
            visit_ffn_mut(&format!("enc{i}.ffn"), &mut b.ffn, &mut out);
            out.push((format!("enc{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("enc{i}.ln2.bias"), &mut b.ln2.bias));
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.self_attn
                .visit_tensors_mut(&format!("dec{i}.self"), &mut out);
            out.push((format!("dec{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("dec{i}.ln1.bias"), &mut b.ln1.bias));
            b.cross_attn
                .visit_tensors_mut(&format!("dec{i}.cross"), &mut out);
            out.push((format!("dec{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("dec{i}.ln2.bias"), &mut b.ln2.bias));
            visit_ffn_mut(&format!("dec{i}.ffn"), &mut b.ffn, &mut out);
            out.push((format!("dec{i}.ln3.gain"), &mut b.ln3.gain));
            out.push((format!("dec{i}.ln3.bias"), &mut b.ln3.bias));
        }
        for (h, name) in self.heads.iter_mut().zip(HEAD_NAMES) {
            out.push((format!("head_{name}.w"), &mut h.w));
            out.push((format!("head_{name}.b"), &mut h.b));
        }
        out
    }

    /// Trainable parameter count (the positional tables are fixed).
    pub fn param_count(&self) -> usize {
        self.visit_tensors()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Flat layout of trainable tensors: (name, offset, length).
    pub fn trainable_layout(&self) -> Vec<(String, usize, usize)> {
        let mut offset = 0;
        self.visit_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(name, t)| {
                let entry = (name, offset, t.numel());
                offset += t.numel();
                entry
            })
            .collect()
    }

    /// Copy all trainable values into one flat vector.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.visit_tensors() {
            if t.requires_grad {
                out.extend_from_slice(&t.data);
            }
        }
        out
    }

    /// Write a flat trainable vector back into the tensors.
    pub fn unflatten_trainable(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for (_, t) in self.visit_tensors_mut() {
            if t.requires_grad {
                let n = t.numel();
                t.data.copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }

    /// Round every tensor to f32 precision (the serialized precision).
    pub fn quantize_to_f32(&mut self) {
        for (_, t) in self.visit_tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Bind all weights into a tape. Trainable leaf ids are collected in
    /// canonical order in `BoundModel::params`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut params = Vec::new();
        let bind_embed = |tape: &mut Tape, e: &EmbedWeights, params: &mut Vec<TensorId>| {
            let w = tape.leaf(e.w.clone());
            let b = tape.leaf(e.b.clone());
            params.extend([w, b]);
            let pos = tape.leaf(e.pos.clone());
            BoundEmbed { w, b, pos }
        };
        let bind_ln = |tape: &mut Tape, l: &LayerNormWeights, params: &mut Vec<TensorId>| {
            let gain = tape.leaf(l.gain.clone());
            let bias = tape.leaf(l.bias.clone());
            params.extend([gain, bias]);
            BoundLayerNorm { gain, bias }
        };
        let bind_ffn = |tape: &mut Tape, f: &FfnWeights, params: &mut Vec<TensorId>| {
            let w1 = tape.leaf(f.w1.clone());
            let b1 = tape.leaf(f.b1.clone());
            let w2 = tape.leaf(f.w2.clone());
            let b2 = tape.leaf(f.b2.clone());
            let w3 = tape.leaf(f.w3.clone());
            let b3 = tape.leaf(f.b3.clone());
            params.extend([w1, b1, w2, b2, w3, b3]);
            BoundFfn { w1, b1, w2, b2, w3, b3 }
        };

        let irf_embed = bind_embed(tape, &self.irf_embed, &mut params);
        let tpsf_embed = bind_embed(tape, &self.tpsf_embed, &mut params);
        let encoder = self
            .encoder
            .iter()
            .map(|b| BoundEncoder {
                attn: b.attn.bind_into(tape, &mut params),
                ln1: bind_ln(tape, &b.ln1, &mut params),
                ffn: bind_ffn(tape, &b.ffn, &mut params),
                ln2: bind_ln(tape, &b.ln2, &mut params),
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .map(|b| BoundDecoder {
                self_attn: b.self_attn.bind_into(tape, &mut params),
                ln1: bind_ln(tape, &b.ln1, &mut params),
                cross_attn: b.cross_attn.bind_into(tape, &mut params),
                ln2: bind_ln(tape, &b.ln2, &mut params),
                ffn: bind_ffn(tape, &b.ffn, &mut params),
                ln3: bind_ln(tape, &b.ln3, &mut params),
            })
            .collect();
        let heads = [0, 1, 2].map(|i| {
            let w = tape.leaf(self.heads[i].w.clone());
            let b = tape.leaf(self.heads[i].b.clone());
            params.extend([w, b]);
            BoundHead { w, b }
        });
        BoundModel {
            cfg: self.cfg,
            irf_embed,
            tpsf_embed,
            encoder,
            decoder,
            heads,
            params,
        }
    }
}

fn visit_ffn<'a>(prefix: &str, f: &'a FfnWeights, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.w1"), &f.w1));
    out.push((format!("{prefix}.b1"), &f.b1));
    out.push((format!("{prefix}.w2"), &f.w2));
    out.push((format!("{prefix}.b2"), &f.b2));
    out.push((format!("{prefix}.w3"), &f.w3));
    out.push((format!("{prefix}.b3"), &f.b3));
}

fn visit_ffn_mut<'a>(prefix: &str, f: &'a mut FfnWeights, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.push((format!("{prefix}.w1"), &mut f.w1));
    out.push((format!("{prefix}.b1"), &mut f.b1));
    out.push((format!("{prefix}.w2"), &mut f.w2));
    out.push((format!("{prefix}.b2"), &mut f.b2));
    out.push((format!("{prefix}.w3"), &mut f.w3));
    out.push((format!("{prefix}.b3"), &mut f.b3));
}

pub struct BoundEmbed {
    pub w: TensorId,
    pub b: TensorId,
    pub pos: TensorId,
}

pub struct BoundLayerNorm {
    pub gain: TensorId,
    pub bias: TensorId,
}

pub struct BoundFfn {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

pub struct BoundEncoder {
    pub attn: BoundAttention,
    pub ln1: BoundLayerNorm,
    pub ffn: BoundFfn,
    pub ln2: BoundLayerNorm,
}

pub struct BoundDecoder {
    pub self_attn: BoundAttention,
    pub ln1: BoundLayerNorm,
    pub cross_attn: BoundAttention,
    pub ln2: BoundLayerNorm,
    pub ffn: BoundFfn,
    pub ln3: BoundLayerNorm,
}

pub struct BoundHead {
    pub w: TensorId,
    pub b: TensorId,
}

pub struct BoundModel {
    pub cfg: ModelConfig,
    pub irf_embed: BoundEmbed,
    pub tpsf_embed: BoundEmbed,
    pub encoder: Vec<BoundEncoder>,
    pub decoder: Vec<BoundDecoder>,
    pub heads: [BoundHead; 3],
    /// Trainable leaf ids, canonical order.
    pub params: Vec<TensorId>,
}
