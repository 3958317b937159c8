use super::{AttentionAxis, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv2dSpec, Graph, HeadLayout, NodeId, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Time dilations of the five 5x5 trunk convolutions.
pub const DCNN_DILATIONS: [usize; 5] = [1, 2, 4, 8, 16];

/// `[T, F̄]` magnitudes with the embedding appended to every row: `[T, F̄ + F̈]`.
pub fn concat_inputs(mag: &Tensor, emb: &[f32]) -> Result<Tensor> {
    let &[t, fb] = mag.shape() else {
        return Err(Error::shape(format!("magnitude must be [T, F], got {:?}", mag.shape())));
    };
    let f = fb + emb.len();
    let mut data = Vec::with_capacity(t * f);
    for row in mag.data().chunks(fb.max(1)).take(t) {
        data.extend_from_slice(row);
        data.extend_from_slice(emb);
    }
    Tensor::new(vec![t, f], data)
}

/// Trunk output and its three projections, each `[d_k, T, F]`. `q` and `k`
/// are absent for models without attention.
pub struct Qkv {
    pub trunk: NodeId,
    pub q: Option<NodeId>,
    pub k: Option<NodeId>,
    pub v: NodeId,
}

/// Six-layer dilated trunk shared by the query, key and value projections.
pub fn dcnn_extract(g: &mut Graph, p: &Bound<'_>, block: usize, x: NodeId) -> Result<Qkv> {
    let pre = format!("block{block}");
    let mut h = x;
    for (j, &dil) in DCNN_DILATIONS.iter().enumerate() {
        let k = p.get(&format!("{pre}.dcnn.conv{}.kernel", j + 1))?;
        let b = p.get(&format!("{pre}.dcnn.conv{}.bias", j + 1))?;
        let y = g.conv2d(h, k, Some(b), Conv2dSpec::dilated(dil, 1))?;
        h = g.relu(y);
    }
    let k6 = p.get(&format!("{pre}.dcnn.conv6.kernel"))?;
    let b6 = p.get(&format!("{pre}.dcnn.conv6.bias"))?;
    let trunk = g.conv2d(h, k6, Some(b6), Conv2dSpec::default())?;
    let proj = |g: &mut Graph, name: &str| -> Result<Option<NodeId>> {
        match p.get(&format!("{pre}.attn.{name}")) {
            Ok(w) => Ok(Some(g.conv2d(trunk, w, None, Conv2dSpec::default())?)),
            Err(_) => Ok(None),
        }
    };
    let q = proj(g, "wq")?;
    let k = proj(g, "wk")?;
    let v = proj(g, "wv")?.ok_or_else(|| Error::invalid(format!("missing {pre}.attn.wv")))?;
    Ok(Qkv { trunk, q, k, v })
}

/// Attention output and its row-stochastic weights.
pub struct Attention {
    pub output: NodeId,
    pub weights: NodeId,
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` for `[P, D]` or batched `[B, P, D]` inputs,
/// normalized over keys.
pub fn scaled_dot_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, d_k: usize) -> Result<Attention> {
    let two_d = g.shape(q).len() == 2;
    let lift = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
        if g.shape(x).len() == 2 {
            let s = g.shape(x).to_vec();
            g.reshape(x, &[1, s[0], s[1]])
        } else {
            Ok(x)
        }
    };
    let (q, k, v) = (lift(g, q)?, lift(g, k)?, lift(g, v)?);
    if g.shape(q) != g.shape(k) || g.shape(k) != g.shape(v) {
        return Err(Error::shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let scores = g.matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d_k as f32).sqrt());
    let weights = g.softmax(scores)?;
    let mut output = g.matmul(weights, v, false)?;
    if two_d {
        let s = g.shape(output)[1..].to_vec();
        output = g.reshape(output, &s)?;
    }
    Ok(Attention { output, weights })
}

/// Channel-split heads, attention per head, concatenation, then the 3x3
/// output convolution. Returns the block output and the attention weights.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound<'_>,
    block: usize,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    cfg: &ModelConfig,
) -> Result<Attention> {
    let &[c, t, f] = g.shape(v) else {
        return Err(Error::shape(format!(
            "attention input must be [C,T,F], got {:?}",
            g.shape(v)
        )));
    };
    let layout = match cfg.attention_axis {
        AttentionAxis::Time => HeadLayout::Time,
        AttentionAxis::Freq => HeadLayout::Freq,
    };
    let qh = g.split_heads(q, cfg.n_heads, layout)?;
    let kh = g.split_heads(k, cfg.n_heads, layout)?;
    let vh = g.split_heads(v, cfg.n_heads, layout)?;
    let att = scaled_dot_attention(g, qh, kh, vh, c)?;
    let merged = g.merge_heads(att.output, (c, t, f), layout)?;
    let wo = p.get(&format!("block{block}.attn.wo"))?;
    let output = g.conv2d(merged, wo, None, Conv2dSpec::default())?;
    Ok(Attention {
        output,
        weights: att.weights,
    })
}

/// `max(0, x W1 + b1) W2 + b2` along the last axis.
pub fn feed_forward(g: &mut Graph, p: &Bound<'_>, block: usize, x: NodeId) -> Result<NodeId> {
    let pre = format!("block{block}.ffn");
    let h = g.linear(x, p.get(&format!("{pre}.w1"))?, Some(p.get(&format!("{pre}.b1"))?))?;
    let h = g.relu(h);
    g.linear(h, p.get(&format!("{pre}.w2"))?, Some(p.get(&format!("{pre}.b2"))?))
}

/// Pre-norm attention sublayer followed by a pre-norm feed-forward sublayer.
/// Block 0 takes a single-channel map, so its residual stream starts from
/// the trunk output.
pub fn attention_block(g: &mut Graph, p: &Bound<'_>, block: usize, x: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let pre = format!("block{block}");
    let channels = g.shape(x).first().copied().unwrap_or(0);
    let expected = if block == 0 { 1 } else { cfg.d_k };
    if channels != expected {
        return Err(Error::shape(format!(
            "block {block} expects {expected} input channels, got {channels}"
        )));
    }
    let ln1 = g.layer_norm(
        x,
        p.get(&format!("{pre}.ln1.gamma"))?,
        p.get(&format!("{pre}.ln1.beta"))?,
        LN_EPS,
    )?;
    let qkv = dcnn_extract(g, p, block, ln1)?;
    let attended = match (qkv.q, qkv.k) {
        (Some(q), Some(k)) if cfg.has_attention() => multi_head_attention(g, p, block, q, k, qkv.v, cfg)?.output,
        _ => qkv.v,
    };
    let stream = if block == 0 { qkv.trunk } else { x };
    let u = g.add(stream, attended)?;
    let ln2 = g.layer_norm(
        u,
        p.get(&format!("{pre}.ln2.gamma"))?,
        p.get(&format!("{pre}.ln2.beta"))?,
        LN_EPS,
    )?;
    let ff = feed_forward(g, p, block, ln2)?;
    g.add(u, ff)
}

/// Dense `F -> F̄` per channel and frame, 3x3 conv `d_k -> outputs`, sigmoid.
/// Returns one `[T, F̄]` mask node per output channel.
pub fn transform_block(g: &mut Graph, p: &Bound<'_>, x: NodeId, cfg: &ModelConfig) -> Result<Vec<NodeId>> {
    let d = g.linear(
        x,
        p.get("transform.dense.weight")?,
        Some(p.get("transform.dense.bias")?),
    )?;
    let c = g.conv2d(
        d,
        p.get("transform.conv.kernel")?,
        Some(p.get("transform.conv.bias")?),
        Conv2dSpec::default(),
    )?;
    let m = g.sigmoid(c);
    let &[n, t, fb] = g.shape(m) else {
        unreachable!("conv2d output is three-dimensional")
    };
    debug_assert_eq!(n, cfg.n_outputs());
    (0..n).map(|i| g.narrow(m, i * t * fb, &[t, fb])).collect()
}
