//! Model building blocks over the tape.

use super::weights::{BoundDecoder, BoundEmbed, BoundEncoder, BoundFfn, BoundLayerNorm, BoundModel};
use super::LAYER_NORM_EPS;
use crate::attention::{cross_attention, diff_attention, standard_self_attention, BoundAttention};
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// One token per gate: linear embed of the scalar count plus the
/// sinusoidal positional table. Expects a peak-normalized histogram.
pub fn embed_sequence(
    tape: &mut Tape,
    hist: &[f64],
    embed: &BoundEmbed,
) -> Result<TensorId> {
    let gates = tape.shape(embed.pos)[0];
    if hist.len() != gates {
        return Err(Error::Dimension(format!(
            "histogram length {} does not match the {} model gates",
            hist.len(),
            gates
        )));
    }
    let col = tape.constant(vec![gates, 1], hist.to_vec())?;
    let lin = tape.matmul(col, embed.w)?;
    let biased = tape.add(lin, embed.b)?;
    tape.add(biased, embed.pos)
}

fn layer_norm(tape: &mut Tape, x: TensorId, ln: &BoundLayerNorm) -> Result<TensorId> {
    tape.layer_norm(x, ln.gain, ln.bias, LAYER_NORM_EPS)
}

/// (Swish(x W1 + b1) ⊙ (x W2 + b2)) W3 + b3.
pub fn swiglu_ffn(tape: &mut Tape, x: TensorId, f: &BoundFfn) -> Result<TensorId> {
    let a = tape.matmul(x, f.w1)?;
    let a = tape.add(a, f.b1)?;
    let a = tape.swish(a);
    let g = tape.matmul(x, f.w2)?;
    let g = tape.add(g, f.b2)?;
    let gated = tape.mul(a, g)?;
    let y = tape.matmul(gated, f.w3)?;
    tape.add(y, f.b3)
}

fn self_attention(
    tape: &mut Tape,
    x: TensorId,
    w: &BoundAttention,
) -> Result<TensorId> {
    if w.second.is_some() {
        diff_attention(tape, x, w)
    } else {
        standard_self_attention(tape, x, w)
    }
}

/// Self-attention, add & norm, feed-forward, add & norm.
pub fn encoder_block(tape: &mut Tape, x: TensorId, w: &BoundEncoder) -> Result<TensorId> {
    let attn = self_attention(tape, x, &w.attn)?;
    let res1 = tape.add(x, attn)?;
    let an1 = layer_norm(tape, res1, &w.ln1)?;
    let ffn = swiglu_ffn(tape, an1, &w.ffn)?;
    let res2 = tape.add(an1, ffn)?;
    layer_norm(tape, res2, &w.ln2)
}

/// Self-attention, add & norm, cross-attention to the encoder output,
/// add & norm, feed-forward, add & norm.
pub fn decoder_block(
    tape: &mut Tape,
    x: TensorId,
    enc_out: TensorId,
    w: &BoundDecoder,
) -> Result<TensorId> {
    let self_out = self_attention(tape, x, &w.self_attn)?;
    let res1 = tape.add(x, self_out)?;
    let an1 = layer_norm(tape, res1, &w.ln1)?;
    let cross = cross_attention(tape, an1, enc_out, &w.cross_attn)?;
    let res2 = tape.add(an1, cross)?;
    let an2 = layer_norm(tape, res2, &w.ln2)?;
    let ffn = swiglu_ffn(tape, an2, &w.ffn)?;
    let res3 = tape.add(an2, ffn)?;
    layer_norm(tape, res3, &w.ln3)
}

/// Full per-pixel forward pass: IRF through the encoder stack, TPSF
/// through the decoder stack cross-attending to the encoder output,
/// mean-pooled over gate tokens, then one scalar per output head
/// (ELU-activated pointwise projection). Returns raw head outputs
/// (tau1, tau2, a_r order).
pub fn forward_pixel(
    tape: &mut Tape,
    bound: &BoundModel,
    tpsf_norm: &[f64],
    irf_norm: &[f64],
) -> Result<[TensorId; 3]> {
    let mut enc = embed_sequence(tape, irf_norm, &bound.irf_embed)?;
    for block in &bound.encoder {
        enc = encoder_block(tape, enc, block)?;
    }
    let mut dec = embed_sequence(tape, tpsf_norm, &bound.tpsf_embed)?;
    for block in &bound.decoder {
        dec = decoder_block(tape, dec, enc, block)?;
    }
    let pooled = tape.mean_axis0(dec)?;
    let mut out = [TensorId(0); 3];
    for (i, head) in bound.heads.iter().enumerate() {
        let z = tape.matmul(pooled, head.w)?;
        let z = tape.add(z, head.b)?;
        out[i] = tape.elu(z);
    }
    Ok(out)
}
