//! One multi-head attention block in all four variants: deterministic
//! (vanilla), logit-residual (realformer), head-colliding without cascade
//! (coda_cs) and full cascaded head-colliding attention (coda).
//!
//! Pipeline per block: scores -> compose mu (cascade / residual) ->
//! sample z = mu + eps -> mask -> row softmax -> attend. The cascade
//! consumes the previous layer's sampled logits with masked key positions
//! zeroed; the additive -1e9 sentinel is applied only after composition.

use crate::model::VariantKind;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const MASK_SENTINEL: f64 = -1e9;

/// Which cascading chain a block belongs to. Chains never mix: each threads
/// its own previous-layer logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChainTag {
    EncSelf,
    DecSelf,
    Cross,
}

impl ChainTag {
    pub fn name(self) -> &'static str {
        match self {
            ChainTag::EncSelf => "enc_self",
            ChainTag::DecSelf => "dec_self",
            ChainTag::Cross => "cross",
        }
    }
}

/// Per-block record of sampled pre-mask logits and head distributions,
/// materialized out of the graph for the analysis module.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub chain: ChainTag,
    pub layer: usize,
    /// `[b,h,n,m]`, masked key positions zeroed.
    pub pre_mask_logits: Tensor,
    /// `[b,h,n,m]`, rows stochastic over unmasked keys.
    pub heads: Tensor,
    /// Flattened `[b,n]` flags; false marks padding query rows, which the
    /// analysis module excludes.
    pub query_valid: Vec<bool>,
}

/// Projection parameters of one block, already injected into a graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Two-layer head-fusion MLP with a residual link, one per cascaded block.
#[derive(Debug, Clone, Copy)]
pub struct CascadeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub slope: f64,
}

/// Additive sentinel and multiplicative keep mask, both `[b,h,n,m]`.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub sentinel: Tensor,
    pub keep: Tensor,
    pub shape: [usize; 4],
}

impl MaskPlan {
    /// `key_valid[batch][key]` marks non-padding keys; `causal` restricts
    /// query `t` to keys `<= t`. Every query row must keep at least one key.
    pub fn build(
        b: usize,
        h: usize,
        n: usize,
        m: usize,
        causal: bool,
        key_valid: Option<&[Vec<bool>]>,
    ) -> Result<Self> {
        let mut sentinel = vec![0.0; b * h * n * m];
        let mut keep = vec![1.0; b * h * n * m];
        for bi in 0..b {
            for qi in 0..n {
                let mut allowed = 0;
                for ki in 0..m {
                    let valid = key_valid.map_or(true, |kv| kv[bi][ki]) && (!causal || ki <= qi);
                    if valid {
                        allowed += 1;
                    } else {
                        for hi in 0..h {
                            let idx = ((bi * h + hi) * n + qi) * m + ki;
                            sentinel[idx] = MASK_SENTINEL;
                            keep[idx] = 0.0;
                        }
                    }
                }
                if allowed == 0 {
                    return Err(Error::Structural(format!(
                        "query row {qi} of batch {bi} has no allowed keys"
                    )));
                }
            }
        }
        Ok(MaskPlan {
            sentinel: Tensor::new(vec![b, h, n, m], sentinel)?,
            keep: Tensor::new(vec![b, h, n, m], keep)?,
            shape: [b, h, n, m],
        })
    }
}

/// Splits `x[b,len,d_model]` into `h` per-head projections `[b,h,len,d_head]`.
/// Columns of each weight are grouped by head, so this equals per-head
/// multiplication by each `d_model x d_head` slice.
pub fn project_qkv(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    vars: &BlockVars,
    heads: usize,
) -> Result<(Var, Var, Var)> {
    let project = |g: &mut Graph, x: Var, w: Var| -> Result<Var> {
        let xs = g.shape_of(x).to_vec();
        let (b, len, d_model) = (xs[0], xs[1], xs[2]);
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, vec![b, len, heads, d_model / heads])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    Ok((
        project(g, x_q, vars.wq)?,
        project(g, x_kv, vars.wk)?,
        project(g, x_kv, vars.wv)?,
    ))
}

/// Scaled inner products `Q K^T / sqrt(d_head)`, shape `[b,h,n,m]`.
pub fn raw_scores(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d_head = *g.shape_of(q).last().unwrap();
    let s = g.matmul_ext(q, k, true)?;
    g.scale(s, 1.0 / (d_head as f64).sqrt())
}

/// Additive -1e9 sentinel at disallowed positions.
pub fn apply_mask(g: &mut Graph, scores: Var, mask: &MaskPlan) -> Result<Var> {
    if g.shape_of(scores) != mask.shape {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: g.shape_of(scores).to_vec(),
            rhs: mask.shape.to_vec(),
        });
    }
    let s = g.constant(&mask.sentinel)?;
    g.add(scores, s)
}

/// Reparameterized draw `z = mu + eps`; `None` noise is the deterministic
/// mean evaluation.
pub fn sample_logits(g: &mut Graph, mu: Var, noise: Option<&Tensor>) -> Result<Var> {
    match noise {
        None => Ok(mu),
        Some(eps) => {
            if eps.shape() != g.shape_of(mu) {
                return Err(Error::Shape {
                    op: "sample_logits",
                    lhs: g.shape_of(mu).to_vec(),
                    rhs: eps.shape().to_vec(),
                });
            }
            let e = g.constant(eps)?;
            g.add(mu, e)
        }
    }
}

/// Head-fusion transform: transpose `[b,h,n,m]` to `[b,m,n,h]`, run the
/// two-layer MLP over the head dimension, add the residual, transpose back.
pub fn cascade_transform(g: &mut Graph, net: &CascadeVars, z_prev: Var) -> Result<Var> {
    let t = g.permute(z_prev, &[0, 3, 2, 1])?;
    let pre = g.matmul(t, net.w1)?;
    let pre = g.add_bias(pre, net.b1)?;
    let hidden = g.leaky_rect(pre, net.slope)?;
    let out = g.matmul(hidden, net.w2)?;
    let out = g.add_bias(out, net.b2)?;
    let out = g.add(out, t)?;
    g.permute(out, &[0, 3, 2, 1])
}

/// Mean of the logit distribution for this block: scores plus the variant's
/// previous-layer contribution.
pub fn compose_mu(
    g: &mut Graph,
    variant: VariantKind,
    scores: Var,
    z_prev: Option<Var>,
    net: Option<&CascadeVars>,
) -> Result<Var> {
    match variant {
        VariantKind::Vanilla | VariantKind::CodaCs => Ok(scores),
        VariantKind::Realformer => match z_prev {
            None => Ok(scores),
            Some(z) => {
                check_chain_shapes(g, scores, z)?;
                g.add(scores, z)
            }
        },
        VariantKind::Coda => match z_prev {
            None => Ok(scores),
            Some(z) => {
                check_chain_shapes(g, scores, z)?;
                let net = net.ok_or_else(|| {
                    Error::Structural("coda block at layer >= 2 has no cascade network".into())
                })?;
                let sigma = cascade_transform(g, net, z)?;
                g.add(scores, sigma)
            }
        },
    }
}

fn check_chain_shapes(g: &Graph, scores: Var, z_prev: Var) -> Result<()> {
    if g.shape_of(scores) != g.shape_of(z_prev) {
        return Err(Error::Structural(format!(
            "cascade chain mismatch: scores {:?} vs previous-layer logits {:?}",
            g.shape_of(scores),
            g.shape_of(z_prev)
        )));
    }
    Ok(())
}

/// Weighted value sums per head, concatenated and projected by `wo`.
pub fn attend_and_combine(g: &mut Graph, attn: Var, values: Var, wo: Var) -> Result<Var> {
    let h_out = g.matmul(attn, values)?;
    let hs = g.shape_of(h_out).to_vec();
    let (b, h, n, dh) = (hs[0], hs[1], hs[2], hs[3]);
    let h_out = g.permute(h_out, &[0, 2, 1, 3])?;
    let h_out = g.reshape(h_out, vec![b, n, h * dh])?;
    g.matmul(h_out, wo)
}

/// Output of one full block.
pub struct BlockOutput {
    pub output: Var,
    /// Sampled pre-mask logits with masked positions zeroed; threaded to the
    /// next layer of the same chain.
    pub z_for_next: Var,
    pub state: AttentionState,
}

/// Runs the whole block. `z_prev` must come from the same chain (layer - 1)
/// or be `None` at the first layer.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    g: &mut Graph,
    variant: VariantKind,
    chain: ChainTag,
    layer: usize,
    x_q: Var,
    x_kv: Var,
    vars: &BlockVars,
    cascade: Option<&CascadeVars>,
    mask: &MaskPlan,
    heads: usize,
    noise: Option<&Tensor>,
    z_prev: Option<Var>,
) -> Result<BlockOutput> {
    if layer == 0 && z_prev.is_some() {
        return Err(Error::Structural("first layer of a chain cannot have z_prev".into()));
    }
    if layer > 0 && z_prev.is_none() && matches!(variant, VariantKind::Coda | VariantKind::Realformer)
    {
        return Err(Error::Structural(format!(
            "{} layer {layer} requires previous-layer logits",
            chain.name()
        )));
    }
    let (q, k, v) = project_qkv(g, x_q, x_kv, vars, heads)?;
    let scores = raw_scores(g, q, k)?;
    let mu = compose_mu(g, variant, scores, z_prev, cascade)?;
    let z = sample_logits(g, mu, noise)?;
    let keep = g.constant(&mask.keep)?;
    let z_zeroed = g.mul(z, keep)?;
    let masked = apply_mask(g, z, mask)?;
    let attn = g.row_softmax(masked)?;
    let output = attend_and_combine(g, attn, v, vars.wo)?;
    let [b, _, n, _] = mask.shape;
    let state = AttentionState {
        chain,
        layer,
        pre_mask_logits: g.value_tensor(z_zeroed),
        heads: g.value_tensor(attn),
        query_valid: vec![true; b * n],
    };
    Ok(BlockOutput { output, z_for_next: z_zeroed, state })
}
