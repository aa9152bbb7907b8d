//! Parameter bundles and tape-level forward blocks shared by the matcher
//! and the baselines: multi-head attention, post-LN residual blocks, the
//! feed-forward block, and the five-stage classification head.

use rand_chacha::ChaCha8Rng;

use crate::numerics::{
    gaussian_tensor, NumericsError, ParamBindings, ParamId, ParamStore, Scalar, Tape, Tensor,
    Var, LAYER_NORM_EPS,
};

/// Weight std for Gaussian init (BERT-family convention).
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Query/key/value/output projections of one attention module.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

/// One standard encoder layer: self-attention and feed-forward, each with
/// residual + layer norm (post-LN ordering).
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub attn_ln: LayerNormParams,
    pub ffn: FfnParams,
    pub ffn_ln: LayerNormParams,
}

/// One cross-modal layer: a cross-attention module shared by both
/// directions, then per-stream self-attention and feed-forward.
#[derive(Debug, Clone)]
pub struct CrossLayerParams {
    pub cross_attn: AttentionParams,
    pub cross_ln: LayerNormParams,
    pub text_self: AttentionParams,
    pub text_self_ln: LayerNormParams,
    pub obj_self: AttentionParams,
    pub obj_self_ln: LayerNormParams,
    pub text_ffn: FfnParams,
    pub text_ffn_ln: LayerNormParams,
    pub obj_ffn: FfnParams,
    pub obj_ffn_ln: LayerNormParams,
}

/// The classification head: linear, GELU, layer norm, linear, sigmoid.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub lin1: LinearParams,
    pub ln: LayerNormParams,
    pub lin2: LinearParams,
}

/// Word + learned position embedding tables with the shared layer norm.
#[derive(Debug, Clone)]
pub struct TextEmbedParams {
    pub word: ParamId,
    pub pos: ParamId,
    pub ln: LayerNormParams,
}

/// Object-level embedding: feature and box projections (no bias), each with
/// its own layer norm, averaged. No positional term.
#[derive(Debug, Clone)]
pub struct ObjectEmbedParams {
    pub feat_proj: ParamId,
    pub feat_ln: LayerNormParams,
    pub box_proj: ParamId,
    pub box_ln: LayerNormParams,
}

/// Registers parameters with Gaussian(0, 0.02) weights, zero biases and
/// unit-gamma/zero-beta layer norms, in a deterministic order driven by the
/// caller's registration sequence.
pub struct ParamBuilder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = gaussian_tensor(self.rng, vec![rows, cols], INIT_STD);
        self.store.register(name, t).expect("unique parameter name")
    }

    pub fn vector_weight(&mut self, name: &str, d: usize) -> ParamId {
        let t = gaussian_tensor(self.rng, vec![d], INIT_STD);
        self.store.register(name, t).expect("unique parameter name")
    }

    pub fn zeros(&mut self, name: &str, d: usize) -> ParamId {
        self.store
            .register(name, Tensor::zeros(vec![d]))
            .expect("unique parameter name")
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> ParamId {
        self.store
            .register(name, Tensor::scalar(T::cast(value)))
            .expect("unique parameter name")
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> LinearParams {
        let w = self.weight(&format!("{prefix}.weight"), d_in, d_out);
        let b = bias.then(|| self.zeros(&format!("{prefix}.bias"), d_out));
        LinearParams { w, b }
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> LayerNormParams {
        let gamma = self
            .store
            .register(&format!("{prefix}.gamma"), Tensor::full(vec![d], T::one()))
            .expect("unique parameter name");
        let beta = self.zeros(&format!("{prefix}.beta"), d);
        LayerNormParams { gamma, beta }
    }

    pub fn attention(&mut self, prefix: &str, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.linear(&format!("{prefix}.wq"), d, d, true),
            wk: self.linear(&format!("{prefix}.wk"), d, d, true),
            wv: self.linear(&format!("{prefix}.wv"), d, d, true),
            wo: self.linear(&format!("{prefix}.wo"), d, d, true),
        }
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfnParams {
        FfnParams {
            lin1: self.linear(&format!("{prefix}.lin1"), d, d_ff, true),
            lin2: self.linear(&format!("{prefix}.lin2"), d_ff, d, true),
        }
    }

    pub fn encoder_layer(&mut self, prefix: &str, d: usize, d_ff: usize) -> EncoderLayerParams {
        EncoderLayerParams {
            attn: self.attention(&format!("{prefix}.attn"), d),
            attn_ln: self.layer_norm(&format!("{prefix}.attn_ln"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, d_ff),
            ffn_ln: self.layer_norm(&format!("{prefix}.ffn_ln"), d),
        }
    }

    pub fn cross_layer(&mut self, prefix: &str, d: usize, d_ff: usize) -> CrossLayerParams {
        CrossLayerParams {
            cross_attn: self.attention(&format!("{prefix}.cross_attn"), d),
            cross_ln: self.layer_norm(&format!("{prefix}.cross_ln"), d),
            text_self: self.attention(&format!("{prefix}.text_self"), d),
            text_self_ln: self.layer_norm(&format!("{prefix}.text_self_ln"), d),
            obj_self: self.attention(&format!("{prefix}.obj_self"), d),
            obj_self_ln: self.layer_norm(&format!("{prefix}.obj_self_ln"), d),
            text_ffn: self.ffn(&format!("{prefix}.text_ffn"), d, d_ff),
            text_ffn_ln: self.layer_norm(&format!("{prefix}.text_ffn_ln"), d),
            obj_ffn: self.ffn(&format!("{prefix}.obj_ffn"), d, d_ff),
            obj_ffn_ln: self.layer_norm(&format!("{prefix}.obj_ffn_ln"), d),
        }
    }

    pub fn head(&mut self, prefix: &str, d: usize) -> HeadParams {
        HeadParams {
            lin1: self.linear(&format!("{prefix}.lin1"), d, d, true),
            ln: self.layer_norm(&format!("{prefix}.ln"), d),
            lin2: self.linear(&format!("{prefix}.lin2"), d, 1, true),
        }
    }

    pub fn text_embed(&mut self, prefix: &str, vocab: usize, max_len: usize, d: usize) -> TextEmbedParams {
        TextEmbedParams {
            word: self.weight(&format!("{prefix}.word"), vocab, d),
            pos: self.weight(&format!("{prefix}.pos"), max_len, d),
            ln: self.layer_norm(&format!("{prefix}.ln"), d),
        }
    }

    pub fn object_embed(&mut self, prefix: &str, d_feat: usize, d: usize) -> ObjectEmbedParams {
        ObjectEmbedParams {
            feat_proj: self.weight(&format!("{prefix}.feat_proj.weight"), d_feat, d),
            feat_ln: self.layer_norm(&format!("{prefix}.feat_ln"), d),
            box_proj: self.weight(&format!("{prefix}.box_proj.weight"), 4, d),
            box_ln: self.layer_norm(&format!("{prefix}.box_ln"), d),
        }
    }
}

/// Word embedding + position embedding, then layer norm.
pub fn text_embed_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    p: &TextEmbedParams,
    ids: &[usize],
) -> Result<Var, NumericsError> {
    let words = tape.embedding(bind.var(p.word), ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(bind.var(p.pos), &positions)?;
    let sum = tape.add(words, pos)?;
    layer_norm_fw(tape, bind, &p.ln, sum)
}

/// `(LN(feat W_f) + LN(box W_p)) / 2` per object row.
pub fn object_embed_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    p: &ObjectEmbedParams,
    boxes: &Tensor<T>,
    feats: &Tensor<T>,
) -> Result<Var, NumericsError> {
    let feats = tape.constant(feats.clone());
    let boxes = tape.constant(boxes.clone());
    let f = tape.matmul(feats, bind.var(p.feat_proj))?;
    let f = layer_norm_fw(tape, bind, &p.feat_ln, f)?;
    let b = tape.matmul(boxes, bind.var(p.box_proj))?;
    let b = layer_norm_fw(tape, bind, &p.box_ln, b)?;
    let sum = tape.add(f, b)?;
    Ok(tape.scale(sum, T::cast(0.5)))
}

/// Mean over the valid rows of `x` (mask true = valid).
pub fn masked_mean_rows<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    let rows: Vec<Var> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| tape.slice_rows(x, i, 1))
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(NumericsError::AllMaskedRow);
    }
    let valid = tape.concat_rows(&rows)?;
    tape.mean_rows(valid)
}

fn ln_eps<T: Scalar>() -> T {
    T::cast(LAYER_NORM_EPS)
}

pub fn linear_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    p: &LinearParams,
    x: Var,
) -> Result<Var, NumericsError> {
    tape.linear(x, bind.var(p.w), p.b.map(|b| bind.var(b)))
}

pub fn layer_norm_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    p: &LayerNormParams,
    x: Var,
) -> Result<Var, NumericsError> {
    tape.layer_norm(x, bind.var(p.gamma), bind.var(p.beta), ln_eps::<T>())
}

/// Multi-head scaled dot-product attention: project, split columns into
/// heads, attend per head over the key mask, concatenate, project out.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    p: &AttentionParams,
    x_q: Var,
    x_kv: Var,
    n_heads: usize,
    key_mask: &[bool],
) -> Result<Var, NumericsError> {
    let d = tape.value(x_q).cols();
    if d % n_heads != 0 {
        return Err(NumericsError::InvalidShape(format!(
            "d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let d_head = d / n_heads;
    let q = linear_fw(tape, bind, &p.wq, x_q)?;
    let k = linear_fw(tape, bind, &p.wk, x_kv)?;
    let v = linear_fw(tape, bind, &p.wv, x_kv)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        heads.push(tape.attention(qh, kh, vh, key_mask)?);
    }
    let merged = tape.concat_cols(&heads)?;
    linear_fw(tape, bind, &p.wo, merged)
}

/// `LN(x + MHA(x, x))` over the stream's own mask.
pub fn self_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    attn: &AttentionParams,
    ln: &LayerNormParams,
    x: Var,
    n_heads: usize,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    let a = multi_head_attention(tape, bind, attn, x, x, n_heads, mask)?;
    let res = tape.add(x, a)?;
    layer_norm_fw(tape, bind, ln, res)
}

/// `LN(x_q + MHA(x_q, x_kv))`: queries from one stream, keys/values from
/// the other.
pub fn cross_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    attn: &AttentionParams,
    ln: &LayerNormParams,
    x_q: Var,
    x_kv: Var,
    n_heads: usize,
    kv_mask: &[bool],
) -> Result<Var, NumericsError> {
    let a = multi_head_attention(tape, bind, attn, x_q, x_kv, n_heads, kv_mask)?;
    let res = tape.add(x_q, a)?;
    layer_norm_fw(tape, bind, ln, res)
}

/// `LN(x + W2 gelu(W1 x + b1) + b2)`.
pub fn ffn_block<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    ffn: &FfnParams,
    ln: &LayerNormParams,
    x: Var,
) -> Result<Var, NumericsError> {
    let h = linear_fw(tape, bind, &ffn.lin1, x)?;
    let h = tape.gelu(h);
    let h = linear_fw(tape, bind, &ffn.lin2, h)?;
    let res = tape.add(x, h)?;
    layer_norm_fw(tape, bind, ln, res)
}

/// One full post-LN encoder layer.
pub fn encoder_layer_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    layer: &EncoderLayerParams,
    x: Var,
    n_heads: usize,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    let h = self_attention_block(tape, bind, &layer.attn, &layer.attn_ln, x, n_heads, mask)?;
    ffn_block(tape, bind, &layer.ffn, &layer.ffn_ln, h)
}

pub fn encoder_stack_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    layers: &[EncoderLayerParams],
    x: Var,
    n_heads: usize,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    let mut h = x;
    for layer in layers {
        h = encoder_layer_fw(tape, bind, layer, h, n_heads, mask)?;
    }
    Ok(h)
}

/// The five-stage head over a pooled `[1, d]` vector; output is a `[1, 1]`
/// probability strictly inside (0, 1).
pub fn head_fw<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &ParamBindings,
    head: &HeadParams,
    pooled: Var,
) -> Result<Var, NumericsError> {
    let h = linear_fw(tape, bind, &head.lin1, pooled)?;
    let h = tape.gelu(h);
    let h = layer_norm_fw(tape, bind, &head.ln, h)?;
    let h = linear_fw(tape, bind, &head.lin2, h)?;
    Ok(tape.sigmoid(h))
}
