//! Decoder-only LM and encoder-decoder stacks assembled from attention
//! blocks, parameterized by the architecture variant. Pre-norm residual
//! blocks, learned positional embeddings.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_block, AttentionState, BlockVars, CascadeVars, ChainTag, MaskPlan,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Vanilla,
    Realformer,
    CodaCs,
    Coda,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Vanilla,
        VariantKind::Realformer,
        VariantKind::CodaCs,
        VariantKind::Coda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Vanilla => "vanilla",
            VariantKind::Realformer => "realformer",
            VariantKind::CodaCs => "coda_cs",
            VariantKind::Coda => "coda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(VariantKind::Vanilla),
            "realformer" => Ok(VariantKind::Realformer),
            "coda_cs" => Ok(VariantKind::CodaCs),
            "coda" => Ok(VariantKind::Coda),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    /// Whether attention logits are latent variables (noise may be nonzero).
    pub fn stochastic(self) -> bool {
        matches!(self, VariantKind::CodaCs | VariantKind::Coda)
    }

    /// Whether layer `l >= 2` blocks carry a cascade network.
    pub fn has_cascade_params(self) -> bool {
        matches!(self, VariantKind::Coda)
    }

    /// Whether previous-layer logits are threaded between blocks at all.
    pub fn threads_logits(self) -> bool {
        matches!(self, VariantKind::Coda | VariantKind::Realformer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Lm,
    Seq2Seq,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lm => "lm",
            Architecture::Seq2Seq => "seq2seq",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: VariantKind,
    pub architecture: Architecture,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub alpha: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
    pub cascade_slope: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn desk_default(variant: VariantKind, architecture: Architecture, vocab: usize) -> Self {
        ModelConfig {
            variant,
            architecture,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            alpha: 2,
            dropout: 0.0,
            vocab,
            max_len: 64,
            seed: 0,
            cascade_slope: 0.01,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("alpha", self.alpha),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if ![2usize, 4, 8].contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be one of 2,4,8, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Cascading chains present in the architecture.
    pub fn chains(&self) -> Vec<ChainTag> {
        match self.architecture {
            Architecture::Lm => vec![ChainTag::DecSelf],
            Architecture::Seq2Seq => {
                vec![ChainTag::EncSelf, ChainTag::DecSelf, ChainTag::Cross]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal(u64),
    Ones,
    Zeros,
}

/// Full list of (name, shape, init) for a config, in registration order.
/// `Init::Normal` carries a scale id: 0 = embedding-scale, 1 = projection,
/// 2 = cascade.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let h = cfg.heads;
    let ah = cfg.alpha * h;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();

    specs.push(("tok_emb".into(), vec![cfg.vocab, d], Init::Normal(0)));
    match cfg.architecture {
        Architecture::Lm => {
            specs.push(("pos_emb".into(), vec![cfg.max_len, d], Init::Normal(0)))
        }
        Architecture::Seq2Seq => {
            specs.push(("enc_pos".into(), vec![cfg.max_len, d], Init::Normal(0)));
            specs.push(("dec_pos".into(), vec![cfg.max_len, d], Init::Normal(0)));
        }
    }

    let attn = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), vec![d, d], Init::Normal(1)));
        }
    };
    let cascade = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.w1"), vec![h, ah], Init::Normal(2)));
        specs.push((format!("{prefix}.b1"), vec![ah], Init::Zeros));
        specs.push((format!("{prefix}.w2"), vec![ah, h], Init::Normal(2)));
        specs.push((format!("{prefix}.b2"), vec![h], Init::Zeros));
    };
    let ln = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.g"), vec![d], Init::Ones));
        specs.push((format!("{prefix}.b"), vec![d], Init::Zeros));
    };
    let ff = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        specs.push((format!("{prefix}.w1"), vec![d, cfg.d_ff], Init::Normal(1)));
        specs.push((format!("{prefix}.b1"), vec![cfg.d_ff], Init::Zeros));
        specs.push((format!("{prefix}.w2"), vec![cfg.d_ff, d], Init::Normal(1)));
        specs.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
    };

    match cfg.architecture {
        Architecture::Lm => {
            for l in 0..cfg.layers {
                ln(&mut specs, &format!("layer{l}.ln1"));
                attn(&mut specs, &format!("layer{l}.attn"));
                if cfg.variant.has_cascade_params() && l > 0 {
                    cascade(&mut specs, &format!("layer{l}.casc"));
                }
                ln(&mut specs, &format!("layer{l}.ln2"));
                ff(&mut specs, &format!("layer{l}.ff"));
            }
        }
        Architecture::Seq2Seq => {
            for l in 0..cfg.layers {
                ln(&mut specs, &format!("enc{l}.ln1"));
                attn(&mut specs, &format!("enc{l}.attn"));
                if cfg.variant.has_cascade_params() && l > 0 {
                    cascade(&mut specs, &format!("enc{l}.casc"));
                }
                ln(&mut specs, &format!("enc{l}.ln2"));
                ff(&mut specs, &format!("enc{l}.ff"));
            }
            for l in 0..cfg.layers {
                ln(&mut specs, &format!("dec{l}.ln1"));
                attn(&mut specs, &format!("dec{l}.self_attn"));
                if cfg.variant.has_cascade_params() && l > 0 {
                    cascade(&mut specs, &format!("dec{l}.self_casc"));
                }
                ln(&mut specs, &format!("dec{l}.ln2"));
                attn(&mut specs, &format!("dec{l}.cross_attn"));
                if cfg.variant.has_cascade_params() && l > 0 {
                    cascade(&mut specs, &format!("dec{l}.cross_casc"));
                }
                ln(&mut specs, &format!("dec{l}.ln3"));
                ff(&mut specs, &format!("dec{l}.ff"));
            }
            ln(&mut specs, "enc_norm");
        }
    }
    ln(&mut specs, "final_ln");
    if !cfg.tie_embeddings {
        specs.push(("out_proj".into(), vec![d, cfg.vocab], Init::Normal(1)));
    }
    specs
}

/// Named parameter set; iteration order is the sorted name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut map = BTreeMap::new();
        for (name, shape, init) in param_specs(cfg) {
            let t = match init {
                Init::Normal(scale_id) => {
                    let std = match scale_id {
                        0 => 0.02,
                        1 => 1.0 / (cfg.d_model as f64).sqrt(),
                        _ => 0.1,
                    };
                    Tensor::randn(shape, std, rng)
                }
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Zeros => Tensor::zeros(shape),
            };
            map.insert(name, t);
        }
        Ok(ModelParams { map })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Zeroes every cascade MLP weight and bias (used by the
    /// variant-reduction oracles).
    pub fn zero_cascade(&mut self) {
        for (name, t) in self.map.iter_mut() {
            if name.contains("casc.") || name.contains("_casc.") {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Expected parameter names for a config, for checkpoint schema checks.
pub fn expected_param_names(cfg: &ModelConfig) -> Vec<String> {
    param_specs(cfg).into_iter().map(|(n, _, _)| n).collect()
}

/// Exact scalar parameter count for a config, from the shape formulas.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Output of one forward evaluation: logits plus everything the training
/// and analysis modules need.
pub struct ForwardTrace {
    pub graph: Graph,
    pub logits: Var,
    pub states: Vec<AttentionState>,
    pub param_vars: BTreeMap<String, Var>,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    g: Graph,
    vars: BTreeMap<String, Var>,
    states: Vec<AttentionState>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ModelConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let mut g = Graph::new();
        let mut vars = BTreeMap::new();
        for name in expected_param_names(cfg) {
            let v = g.leaf(params.get(&name)?, true)?;
            vars.insert(name, v);
        }
        Ok(Builder { cfg, g, vars, states: Vec::new() })
    }

    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn block_vars(&self, prefix: &str) -> BlockVars {
        BlockVars {
            wq: self.var(&format!("{prefix}.wq")),
            wk: self.var(&format!("{prefix}.wk")),
            wv: self.var(&format!("{prefix}.wv")),
            wo: self.var(&format!("{prefix}.wo")),
        }
    }

    fn cascade_vars(&self, prefix: &str) -> Option<CascadeVars> {
        self.vars.get(&format!("{prefix}.w1")).map(|&w1| CascadeVars {
            w1,
            b1: self.var(&format!("{prefix}.b1")),
            w2: self.var(&format!("{prefix}.w2")),
            b2: self.var(&format!("{prefix}.b2")),
            slope: self.cfg.cascade_slope,
        })
    }

    fn embed(&mut self, tokens: &[Vec<usize>], pos_table: &str) -> Result<Var> {
        let b = tokens.len();
        let n = tokens[0].len();
        if n > self.cfg.max_len {
            return Err(Error::Dimension {
                op: "forward",
                msg: format!("sequence length {n} exceeds max {}", self.cfg.max_len),
            });
        }
        let mut ids = Vec::with_capacity(b * n);
        let mut pos = Vec::with_capacity(b * n);
        for row in tokens {
            if row.len() != n {
                return Err(Error::Dimension {
                    op: "forward",
                    msg: "ragged token batch".into(),
                });
            }
            ids.extend_from_slice(row);
            pos.extend(0..n);
        }
        let tok = self.var("tok_emb");
        let pt = self.var(pos_table);
        let te = self.g.gather(tok, &ids, &[b, n])?;
        let pe = self.g.gather(pt, &pos, &[b, n])?;
        self.g.add(te, pe)
    }

    fn dropout(&mut self, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.cfg.dropout;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape_of(x).to_vec();
        let n: usize = shape.iter().product();
        let scale = 1.0 / (1.0 - rate);
        let data: Vec<f64> = (0..n)
            .map(|_| if rand::Rng::gen::<f64>(rng) < rate { 0.0 } else { scale })
            .collect();
        let mask = self.g.constant(&Tensor::new(shape, data)?)?;
        self.g.mul(x, mask)
    }

    fn noise(
        &mut self,
        shape: [usize; 4],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Option<Tensor> {
        if !self.cfg.variant.stochastic() {
            return None;
        }
        let rng = rng.as_deref_mut()?;
        Some(Tensor::randn(shape.to_vec(), 1.0, rng))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.var(&format!("{prefix}.g"));
        let b = self.var(&format!("{prefix}.b"));
        self.g.layer_norm(x, g, b)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.var(&format!("{prefix}.w1"));
        let b1 = self.var(&format!("{prefix}.b1"));
        let w2 = self.var(&format!("{prefix}.w2"));
        let b2 = self.var(&format!("{prefix}.b2"));
        let h = self.g.matmul(x, w1)?;
        let h = self.g.add_bias(h, b1)?;
        let h = self.g.leaky_rect(h, 0.01)?;
        let h = self.g.matmul(h, w2)?;
        self.g.add_bias(h, b2)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        chain: ChainTag,
        layer: usize,
        x: Var,
        kv: Var,
        ln_prefix: &str,
        attn_prefix: &str,
        casc_prefix: &str,
        mask: &MaskPlan,
        z_prev: Option<Var>,
        query_valid: Option<&[Vec<bool>]>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let normed = self.layer_norm(x, ln_prefix)?;
        let kv_in = if kv == x { normed } else { kv };
        let eps = self.noise(mask.shape, rng);
        let vars = self.block_vars(attn_prefix);
        let cascade = self.cascade_vars(casc_prefix);
        let out = attention_block(
            &mut self.g,
            self.cfg.variant,
            chain,
            layer,
            normed,
            kv_in,
            &vars,
            cascade.as_ref(),
            mask,
            self.cfg.heads,
            eps.as_ref(),
            z_prev,
        )?;
        let mut state = out.state;
        if let Some(valid) = query_valid {
            state.query_valid = valid.iter().flatten().copied().collect();
        }
        self.states.push(state);
        let dropped = self.dropout(out.output, rng)?;
        let res = self.g.add(x, dropped)?;
        Ok((res, out.z_for_next))
    }

    fn ff_residual(
        &mut self,
        x: Var,
        ln_prefix: &str,
        ff_prefix: &str,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let normed = self.layer_norm(x, ln_prefix)?;
        let f = self.feed_forward(normed, ff_prefix)?;
        let dropped = self.dropout(f, rng)?;
        self.g.add(x, dropped)
    }

    fn project_out(&mut self, x: Var) -> Result<Var> {
        let x = self.layer_norm(x, "final_ln")?;
        if self.cfg.tie_embeddings {
            let emb = self.var("tok_emb");
            self.g.matmul_ext(x, emb, true)
        } else {
            let w = self.var("out_proj");
            self.g.matmul(x, w)
        }
    }

    fn finish(self, logits: Var) -> ForwardTrace {
        ForwardTrace {
            graph: self.g,
            logits,
            states: self.states,
            param_vars: self.vars,
        }
    }
}

fn check_ids(cfg: &ModelConfig, tokens: &[Vec<usize>]) -> Result<()> {
    for row in tokens {
        for &id in row {
            if id >= cfg.vocab {
                return Err(Error::Index { op: "forward", index: id, extent: cfg.vocab });
            }
        }
    }
    Ok(())
}

/// Causal LM forward pass. `noise_rng = None` is deterministic evaluation
/// (zero noise, no dropout).
pub fn forward_lm(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &[Vec<usize>],
    mut noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    if cfg.architecture != Architecture::Lm {
        return Err(Error::Structural("forward_lm requires an lm architecture".into()));
    }
    check_ids(cfg, tokens)?;
    let mut bld = Builder::new(cfg, params)?;
    let b = tokens.len();
    let n = tokens[0].len();
    let mask = MaskPlan::build(b, cfg.heads, n, n, true, None)?;
    let mut x = bld.embed(tokens, "pos_emb")?;
    x = bld.dropout(x, &mut noise_rng)?;
    let mut z_prev: Option<Var> = None;
    for l in 0..cfg.layers {
        let threaded = if cfg.variant.threads_logits() { z_prev } else { None };
        let (nx, z) = bld.block(
            ChainTag::DecSelf,
            l,
            x,
            x,
            &format!("layer{l}.ln1"),
            &format!("layer{l}.attn"),
            &format!("layer{l}.casc"),
            &mask,
            threaded,
            None,
            &mut noise_rng,
        )?;
        x = bld.ff_residual(nx, &format!("layer{l}.ln2"), &format!("layer{l}.ff"), &mut noise_rng)?;
        z_prev = Some(z);
    }
    let logits = bld.project_out(x)?;
    Ok(bld.finish(logits))
}

fn valid_mask(tokens: &[Vec<usize>]) -> Vec<Vec<bool>> {
    tokens
        .iter()
        .map(|row| row.iter().map(|&id| id != PAD_ID).collect())
        .collect()
}

/// Encoder-decoder forward pass over rectangular, pad-id-0 batches.
/// `tgt_prefix` is the shifted decoder input (starts with BOS).
pub fn forward_seq2seq(
    cfg: &ModelConfig,
    params: &ModelParams,
    src: &[Vec<usize>],
    tgt_prefix: &[Vec<usize>],
    mut noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    if cfg.architecture != Architecture::Seq2Seq {
        return Err(Error::Structural("forward_seq2seq requires a seq2seq architecture".into()));
    }
    check_ids(cfg, src)?;
    check_ids(cfg, tgt_prefix)?;
    let mut bld = Builder::new(cfg, params)?;
    let b = src.len();
    let m = src[0].len();
    let n = tgt_prefix[0].len();
    let src_valid = valid_mask(src);
    let tgt_valid = valid_mask(tgt_prefix);
    let enc_mask = MaskPlan::build(b, cfg.heads, m, m, false, Some(&src_valid))?;
    let dec_mask = MaskPlan::build(b, cfg.heads, n, n, true, Some(&tgt_valid))?;
    let cross_mask = MaskPlan::build(b, cfg.heads, n, m, false, Some(&src_valid))?;

    // encoder
    let mut enc = bld.embed(src, "enc_pos")?;
    enc = bld.dropout(enc, &mut noise_rng)?;
    let mut z_enc: Option<Var> = None;
    for l in 0..cfg.layers {
        let threaded = if cfg.variant.threads_logits() { z_enc } else { None };
        let (nx, z) = bld.block(
            ChainTag::EncSelf,
            l,
            enc,
            enc,
            &format!("enc{l}.ln1"),
            &format!("enc{l}.attn"),
            &format!("enc{l}.casc"),
            &enc_mask,
            threaded,
            Some(&src_valid),
            &mut noise_rng,
        )?;
        enc = bld.ff_residual(nx, &format!("enc{l}.ln2"), &format!("enc{l}.ff"), &mut noise_rng)?;
        z_enc = Some(z);
    }
    let memory = bld.layer_norm(enc, "enc_norm")?;

    // decoder
    let mut dec = bld.embed(tgt_prefix, "dec_pos")?;
    dec = bld.dropout(dec, &mut noise_rng)?;
    let mut z_self: Option<Var> = None;
    let mut z_cross: Option<Var> = None;
    for l in 0..cfg.layers {
        let t_self = if cfg.variant.threads_logits() { z_self } else { None };
        let (nx, zs) = bld.block(
            ChainTag::DecSelf,
            l,
            dec,
            dec,
            &format!("dec{l}.ln1"),
            &format!("dec{l}.self_attn"),
            &format!("dec{l}.self_casc"),
            &dec_mask,
            t_self,
            Some(&tgt_valid),
            &mut noise_rng,
        )?;
        z_self = Some(zs);
        let t_cross = if cfg.variant.threads_logits() { z_cross } else { None };
        let (nx, zc) = bld.block(
            ChainTag::Cross,
            l,
            nx,
            memory,
            &format!("dec{l}.ln2"),
            &format!("dec{l}.cross_attn"),
            &format!("dec{l}.cross_casc"),
            &cross_mask,
            t_cross,
            Some(&tgt_valid),
            &mut noise_rng,
        )?;
        z_cross = Some(zc);
        dec = bld.ff_residual(nx, &format!("dec{l}.ln3"), &format!("dec{l}.ff"), &mut noise_rng)?;
    }
    let logits = bld.project_out(dec)?;
    Ok(bld.finish(logits))
}

/// Deterministic greedy decode with zero noise; argmax ties break toward the
/// lowest token id. Stops early at EOS.
pub fn generate_greedy(
    cfg: &ModelConfig,
    params: &ModelParams,
    src_or_prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    for _ in 0..max_new {
        let logits_row = match cfg.architecture {
            Architecture::Seq2Seq => {
                let mut prefix = vec![BOS_ID];
                prefix.extend_from_slice(&out);
                let trace = forward_seq2seq(
                    cfg,
                    params,
                    &[src_or_prompt.to_vec()],
                    &[prefix.clone()],
                    None,
                )?;
                last_row(&trace, prefix.len())
            }
            Architecture::Lm => {
                let mut prefix = src_or_prompt.to_vec();
                prefix.extend_from_slice(&out);
                let trace = forward_lm(cfg, params, &[prefix.clone()], None)?;
                last_row(&trace, prefix.len())
            }
        };
        let next = argmax_lowest(&logits_row);
        out.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(out)
}

fn last_row(trace: &ForwardTrace, n: usize) -> Vec<f64> {
    let vals = trace.graph.value(trace.logits);
    let v = vals.len() / n;
    vals[(n - 1) * v..].to_vec()
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
