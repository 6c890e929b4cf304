//! Parameter layout and the differentiable forward pieces of the agent.
//!
//! Everything is written against a [`Tape`] so the same code serves
//! training (f32), evaluation, and finite-difference checks (f64).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AgentConfig, ConcatTarget, EncoderKind, Fusion, SlotSource};
use crate::error::{Error, Result};
use crate::numcore::{Axis, ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub cross: AttnIds,
    pub ffn: FfnIds,
    /// Visual self-attention, present when imaginations join the visual
    /// stream.
    pub visual: Option<AttnIds>,
}

/// Parameter handles resolved once per store.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub(crate) word_emb: ParamId,
    pub(crate) text_attn: AttnIds,
    pub(crate) text_ffn: FfnIds,
    pub(crate) ctx_attn: AttnIds,
    pub(crate) view_proj: ParamId,
    pub(crate) view_index: ParamId,
    pub(crate) hist_init: ParamId,
    pub(crate) hist_w: ParamId,
    pub(crate) hist_u: ParamId,
    pub(crate) hist_b: ParamId,
    pub(crate) layers: Vec<LayerIds>,
    pub(crate) act_w: ParamId,
    pub(crate) act_stop: ParamId,
    pub(crate) ground_w: ParamId,
    pub(crate) im_proj: ParamId,
    pub(crate) im_type: ParamId,
    pub(crate) im_mlp: Option<[ParamId; 3]>,
    pub(crate) im_tf: Option<(AttnIds, FfnIds)>,
    pub(crate) late: Option<(ParamId, ParamId)>,
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: rng::StreamRng,
}

impl Init<'_> {
    fn add(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data: Vec<f32> = if std == 0.0 {
            vec![0.0; rows * cols]
        } else {
            let n = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..rows * cols).map(|_| n.sample(&mut self.rng) as f32).collect()
        };
        Ok(self.store.insert(name, group, Tensor::new(rows, cols, data)?)?)
    }

    fn dense(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, group, rows, cols, 1.0 / (rows as f64).sqrt())
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup, d: usize, zero_out: bool) -> Result<AttnIds> {
        Ok(AttnIds {
            q: self.dense(&format!("{prefix}.q"), group, d, d)?,
            k: self.dense(&format!("{prefix}.k"), group, d, d)?,
            v: self.dense(&format!("{prefix}.v"), group, d, d)?,
            o: if zero_out {
                self.add(&format!("{prefix}.o"), group, d, d, 0.0)?
            } else {
                self.dense(&format!("{prefix}.o"), group, d, d)?
            },
        })
    }

    fn ffn(&mut self, prefix: &str, group: ParamGroup, d: usize, hidden: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.dense(&format!("{prefix}.ff1"), group, d, hidden)?,
            b1: self.add(&format!("{prefix}.ff1_b"), group, 1, hidden, 0.0)?,
            w2: self.dense(&format!("{prefix}.ff2"), group, hidden, d)?,
        })
    }
}

/// Fresh parameters for `cfg`. Base parameters depend only on the seed and
/// the base dimensions, so a base agent and any variant built from the same
/// seed agree on them.
pub fn init_params(cfg: &AgentConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.d;
    {
        let base = ParamGroup::Base;
        let mut b = Init { store: &mut store, rng: rng::stream(seed, "init-base", 0) };
        b.add("word_emb", base, cfg.vocab, d, 1.0 / (d as f64).sqrt())?;
        b.attn("text", base, d, false)?;
        b.ffn("text", base, d, cfg.ffn_hidden)?;
        b.attn("ctx", base, d, false)?;
        b.dense("view.proj", base, cfg.d_v, d)?;
        b.add("view.index", base, cfg.k, d, 1.0 / (d as f64).sqrt())?;
        b.add("hist.init", base, 1, d, 1.0 / (d as f64).sqrt())?;
        b.dense("hist.w", base, d, d)?;
        b.dense("hist.u", base, d, d)?;
        b.add("hist.b", base, 1, d, 0.0)?;
        for l in 0..cfg.cross_layers {
            b.attn(&format!("x{l}"), base, d, false)?;
            b.ffn(&format!("x{l}"), base, d, cfg.ffn_hidden)?;
        }
        b.dense("act.w", base, 1, d)?;
        b.dense("act.stop", base, 1, d)?;
        b.dense("ground.w", base, 1, d)?;
    }
    {
        let im = ParamGroup::ImaginationEncoder;
        let mut b = Init { store: &mut store, rng: rng::stream(seed, "init-imagination", 0) };
        b.dense("im.proj", im, cfg.d_v, d)?;
        match cfg.encoder {
            EncoderKind::Mlp => {
                b.dense("im.mlp1", im, d, cfg.mlp_hidden)?;
                b.dense("im.mlp2", im, cfg.mlp_hidden, cfg.mlp_hidden)?;
                b.dense("im.mlp3", im, cfg.mlp_hidden, d)?;
            }
            EncoderKind::Transformer => {
                b.attn("im.tf", im, d, false)?;
                b.ffn("im.tf", im, d, cfg.ffn_hidden)?;
            }
        }
        if cfg.fusion == Fusion::Late {
            b.dense("late.gate", im, 1, d)?;
            b.add("late.fuse", im, d, d, 0.0)?;
        }
        if cfg.concat_target == ConcatTarget::Visual {
            for l in 0..cfg.cross_layers {
                b.attn(&format!("vs{l}"), im, d, true)?;
            }
        }
        b.add("im.type", ParamGroup::TypeEmbedding, 1, d, 1.0 / (d as f64).sqrt())?;
    }
    Ok(store)
}

fn need<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Lookup(format!("parameter {name:?} missing from store")))
}

fn attn_ids<T: Real>(s: &ParamStore<T>, p: &str) -> Result<AttnIds> {
    Ok(AttnIds {
        q: need(s, &format!("{p}.q"))?,
        k: need(s, &format!("{p}.k"))?,
        v: need(s, &format!("{p}.v"))?,
        o: need(s, &format!("{p}.o"))?,
    })
}

fn ffn_ids<T: Real>(s: &ParamStore<T>, p: &str) -> Result<FfnIds> {
    Ok(FfnIds { w1: need(s, &format!("{p}.ff1"))?, b1: need(s, &format!("{p}.ff1_b"))?, w2: need(s, &format!("{p}.ff2"))? })
}

impl ParamIds {
    pub fn resolve<T: Real>(cfg: &AgentConfig, s: &ParamStore<T>) -> Result<Self> {
        let layers = (0..cfg.cross_layers)
            .map(|l| {
                Ok(LayerIds {
                    cross: attn_ids(s, &format!("x{l}"))?,
                    ffn: ffn_ids(s, &format!("x{l}"))?,
                    visual: match cfg.concat_target {
                        ConcatTarget::Visual => Some(attn_ids(s, &format!("vs{l}"))?),
                        ConcatTarget::Text => None,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            word_emb: need(s, "word_emb")?,
            text_attn: attn_ids(s, "text")?,
            text_ffn: ffn_ids(s, "text")?,
            ctx_attn: attn_ids(s, "ctx")?,
            view_proj: need(s, "view.proj")?,
            view_index: need(s, "view.index")?,
            hist_init: need(s, "hist.init")?,
            hist_w: need(s, "hist.w")?,
            hist_u: need(s, "hist.u")?,
            hist_b: need(s, "hist.b")?,
            layers,
            act_w: need(s, "act.w")?,
            act_stop: need(s, "act.stop")?,
            ground_w: need(s, "ground.w")?,
            im_proj: need(s, "im.proj")?,
            im_type: need(s, "im.type")?,
            im_mlp: match cfg.encoder {
                EncoderKind::Mlp => Some([need(s, "im.mlp1")?, need(s, "im.mlp2")?, need(s, "im.mlp3")?]),
                EncoderKind::Transformer => None,
            },
            im_tf: match cfg.encoder {
                EncoderKind::Transformer => Some((attn_ids(s, "im.tf")?, ffn_ids(s, "im.tf")?)),
                EncoderKind::Mlp => None,
            },
            late: match cfg.fusion {
                Fusion::Late => Some((need(s, "late.gate")?, need(s, "late.fuse")?)),
                Fusion::Early => None,
            },
        })
    }
}

/// Sinusoidal position code scaled to unit row norm.
pub fn position_code<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let scale = (2.0 / d as f64).sqrt();
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            t.set(pos, 2 * i, T::of(scale * (pos as f64 * freq).sin()));
            t.set(pos, 2 * i + 1, T::of(scale * (pos as f64 * freq).cos()));
        }
    }
    t
}

/// Multi-head attention block with output projection. Returns the block
/// output and the attention node (for reading weights).
pub(crate) fn attend<T: Real>(
    tape: &mut Tape<'_, T>,
    ids: &AttnIds,
    queries: Var,
    keys: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (wq, wk, wv, wo) = (tape.param(ids.q), tape.param(ids.k), tape.param(ids.v), tape.param(ids.o));
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys, wk)?;
    let v = tape.matmul(keys, wv)?;
    let a = tape.attention(q, k, v, heads, mask)?;
    Ok((tape.matmul(a, wo)?, a))
}

pub(crate) fn feed_forward<T: Real>(tape: &mut Tape<'_, T>, ids: &FfnIds, x: Var) -> Result<Var> {
    let (w1, b1, w2) = (tape.param(ids.w1), tape.param(ids.b1), tape.param(ids.w2));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    Ok(tape.matmul(h, w2)?)
}

/// Instruction encoder: embedding, position code, one self-attention block
/// and a feed-forward block, both residual.
pub fn encode_text<T: Real>(tape: &mut Tape<'_, T>, cfg: &AgentConfig, ids: &ParamIds, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot encode an empty instruction".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Vocabulary(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
    }
    let emb = tape.param(ids.word_emb);
    let e = tape.gather(emb, tokens)?;
    let pe = tape.constant(position_code(tokens.len(), cfg.d));
    let e = tape.add(e, pe)?;
    let (a, _) = attend(tape, &ids.text_attn, e, e, cfg.heads, None)?;
    let e1 = tape.add(e, a)?;
    let f = feed_forward(tape, &ids.text_ffn, e1)?;
    Ok(tape.add(e1, f)?)
}

/// Imagination encoder: projection, type embedding, then either the
/// bias-free three-layer MLP (input dropout, ReLU after the first two
/// layers) or one transformer block over the imagination set.
pub fn encode_imaginations<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    cfg: &AgentConfig,
    ids: &ParamIds,
    features: &[Vec<f32>],
    mask: &[bool],
    train: bool,
    rng: &mut R,
) -> Result<Option<Var>> {
    if features.is_empty() {
        return Ok(None);
    }
    let mut flat = Vec::with_capacity(features.len() * cfg.d_v);
    for f in features {
        if f.len() != cfg.d_v {
            return Err(Error::Numeric(crate::numcore::NumError::Shape(format!(
                "imagination has {} features, expected {}",
                f.len(),
                cfg.d_v
            ))));
        }
        flat.extend(f.iter().map(|&x| T::of(x as f64)));
    }
    let z = tape.constant(Tensor::new(features.len(), cfg.d_v, flat)?);
    let proj = tape.param(ids.im_proj);
    let t_im = tape.param(ids.im_type);
    let x = tape.matmul(z, proj)?;
    let x = tape.add_row(x, t_im)?;
    let h = match (ids.im_mlp, &ids.im_tf) {
        (Some([w1, w2, w3]), _) => {
            let x = tape.dropout(x, cfg.dropout, rng, train)?;
            let (w1, w2, w3) = (tape.param(w1), tape.param(w2), tape.param(w3));
            let h = tape.matmul(x, w1)?;
            let h = tape.relu(h);
            let h = tape.matmul(h, w2)?;
            let h = tape.relu(h);
            tape.matmul(h, w3)?
        }
        (None, Some((attn, ffn))) => {
            let x = tape.dropout(x, cfg.dropout, rng, train)?;
            let (a, _) = attend(tape, attn, x, x, cfg.heads, Some(mask))?;
            let x1 = tape.add(x, a)?;
            let f = feed_forward(tape, ffn, x1)?;
            tape.add(x1, f)?
        }
        _ => return Err(Error::Contract("imagination encoder parameters missing".into())),
    };
    Ok(Some(h))
}

/// Mean of encoded text rows at `positions`.
pub fn mean_rows<T: Real>(tape: &mut Tape<'_, T>, text: Var, positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Contract("sub-instruction has no noun-phrase tokens".into()));
    }
    let g = tape.gather(text, positions)?;
    Ok(tape.mean(g, Axis::Rows)?)
}

/// Language-side context for one episode: the text and the imagination
/// slots after the context self-attention, with per-layer cross-attention
/// keys and values cached.
pub struct Context {
    pub text: Var,
    pub text_len: usize,
    /// Encoded imagination slots (N×d), before integration.
    pub slots: Option<Var>,
    pub slot_mask: Vec<bool>,
    /// Per-slot mean noun-phrase embeddings (N×d), when positions are known.
    pub noun_means: Option<Var>,
    /// Context rows: text, then slots when they are concatenated to text.
    pub rows: Var,
    pub key_mask: Option<Vec<bool>>,
    /// Attention node of the context self-attention.
    pub self_attn: Var,
    pub cross_k: Vec<Var>,
    pub cross_v: Vec<Var>,
    /// Mean of unmasked slots, for late fusion.
    pub pooled: Option<Var>,
}

pub struct ContextInput<'a> {
    pub tokens: &'a [usize],
    pub imaginations: &'a [Vec<f32>],
    pub noun_positions: &'a [Vec<usize>],
    pub mask: &'a [bool],
}

pub fn encode_context<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    cfg: &AgentConfig,
    ids: &ParamIds,
    input: &ContextInput<'_>,
    train: bool,
    rng: &mut R,
) -> Result<Context> {
    let n = input.imaginations.len();
    if input.mask.len() != n {
        return Err(Error::Contract(format!("{} imaginations but {} mask entries", n, input.mask.len())));
    }
    let text = encode_text(tape, cfg, ids, input.tokens)?;
    let l = input.tokens.len();
    let noun_means = if n > 0 && input.noun_positions.len() == n && input.noun_positions.iter().all(|p| !p.is_empty()) {
        let rows = input.noun_positions.iter().map(|p| mean_rows(tape, text, p)).collect::<Result<Vec<_>>>()?;
        Some(tape.concat(&rows, Axis::Rows)?)
    } else {
        None
    };
    let encoded = encode_imaginations(tape, cfg, ids, input.imaginations, input.mask, train, rng)?;
    let mut slots = match cfg.slot_source {
        SlotSource::Imagination => encoded,
        SlotSource::TextMean if n == 0 => None,
        SlotSource::TextMean => {
            Some(noun_means.ok_or_else(|| Error::Contract("text-mean slots need noun-phrase positions".into()))?)
        }
    };
    if cfg.order_encoding {
        if let Some(s) = slots {
            let pe = tape.constant(position_code(n, cfg.d));
            slots = Some(tape.add(s, pe)?);
        }
    }
    let any_live = input.mask.iter().any(|&m| m);
    let (rows, key_mask) = match (slots, cfg.fusion, cfg.concat_target) {
        (Some(s), Fusion::Early, ConcatTarget::Text) => {
            let rows = tape.concat(&[text, s], Axis::Rows)?;
            let mut mask = vec![true; l];
            mask.extend_from_slice(input.mask);
            (rows, Some(mask))
        }
        _ => (text, None),
    };
    let (a, self_attn) = attend(tape, &ids.ctx_attn, rows, rows, cfg.heads, key_mask.as_deref())?;
    let rows = tape.add(rows, a)?;
    let mut cross_k = Vec::with_capacity(cfg.cross_layers);
    let mut cross_v = Vec::with_capacity(cfg.cross_layers);
    for layer in &ids.layers {
        let (wk, wv) = (tape.param(layer.cross.k), tape.param(layer.cross.v));
        cross_k.push(tape.matmul(rows, wk)?);
        cross_v.push(tape.matmul(rows, wv)?);
    }
    let pooled = match (slots, cfg.fusion) {
        (Some(s), Fusion::Late) if any_live => {
            let live: Vec<usize> = (0..n).filter(|&i| input.mask[i]).collect();
            let g = tape.gather(s, &live)?;
            Some(tape.mean(g, Axis::Rows)?)
        }
        _ => None,
    };
    Ok(Context { text, text_len: l, slots, slot_mask: input.mask.to_vec(), noun_means, rows, key_mask, self_attn, cross_k, cross_v, pooled })
}

/// One decision step.
pub struct StepOut {
    /// 1×(navigable + 1) action logits; stop is last.
    pub logits: Var,
    /// Final visual token states, (K + 1 [+ N])×d.
    pub tokens: Var,
    /// Cross-attention nodes, one per layer.
    pub cross_attn: Vec<Var>,
}

pub fn step<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &AgentConfig,
    ids: &ParamIds,
    ctx: &Context,
    panorama: Var,
    history: Var,
    navigable_views: &[usize],
) -> Result<StepOut> {
    let k = cfg.k;
    let proj = tape.param(ids.view_proj);
    let index = tape.param(ids.view_index);
    let v = tape.matmul(panorama, proj)?;
    let v = tape.add(v, index)?;
    let mut parts = vec![v, history];
    let visual_slots = match (ctx.slots, cfg.fusion, cfg.concat_target) {
        (Some(s), Fusion::Early, ConcatTarget::Visual) => {
            parts.push(s);
            true
        }
        _ => false,
    };
    let mut x = tape.concat(&parts, Axis::Rows)?;
    let vmask: Option<Vec<bool>> = visual_slots.then(|| {
        let mut m = vec![true; k + 1];
        m.extend_from_slice(&ctx.slot_mask);
        m
    });
    let mut cross_attn = Vec::with_capacity(ids.layers.len());
    for (l, layer) in ids.layers.iter().enumerate() {
        if let Some(vs) = &layer.visual {
            let (a, _) = attend(tape, vs, x, x, cfg.heads, vmask.as_deref())?;
            x = tape.add(x, a)?;
        }
        let wq = tape.param(layer.cross.q);
        let q = tape.matmul(x, wq)?;
        let a = tape.attention(q, ctx.cross_k[l], ctx.cross_v[l], cfg.heads, ctx.key_mask.as_deref())?;
        cross_attn.push(a);
        let wo = tape.param(layer.cross.o);
        let o = tape.matmul(a, wo)?;
        x = tape.add(x, o)?;
        let f = feed_forward(tape, &layer.ffn, x)?;
        x = tape.add(x, f)?;
    }
    let hist_row = tape.gather(x, &[k])?;
    let stop_w = tape.param(ids.act_stop);
    let stop = tape.matmul_nt(stop_w, hist_row)?;
    let logits = if navigable_views.is_empty() {
        stop
    } else {
        let nav = tape.gather(x, navigable_views)?;
        let act_w = tape.param(ids.act_w);
        let mut scores = tape.matmul_nt(act_w, nav)?;
        if let (Some(p), Some((gate, fuse))) = (ctx.pooled, ids.late) {
            let gate = tape.param(gate);
            let fuse = tape.param(fuse);
            let g = tape.matmul_nt(gate, nav)?;
            let g = tape.sigmoid(g);
            let pf = tape.matmul(p, fuse)?;
            let s = tape.matmul_nt(pf, nav)?;
            let fused = tape.mul(g, s)?;
            scores = tape.add(scores, fused)?;
        }
        tape.concat(&[scores, stop], Axis::Cols)?
    };
    Ok(StepOut { logits, tokens: x, cross_attn })
}

/// Next history state from the previous one and the token of the view
/// that was taken.
pub fn update_history<T: Real>(tape: &mut Tape<'_, T>, ids: &ParamIds, history: Var, tokens: Var, taken_view: usize) -> Result<Var> {
    let taken = tape.gather(tokens, &[taken_view])?;
    let (w, u, b) = (tape.param(ids.hist_w), tape.param(ids.hist_u), tape.param(ids.hist_b));
    let a = tape.matmul(history, w)?;
    let c = tape.matmul(taken, u)?;
    let s = tape.add(a, c)?;
    let s = tape.add(s, b)?;
    Ok(tape.tanh(s))
}

/// 1×K grounding scores over all views at the stop node.
pub fn grounding_logits<T: Real>(tape: &mut Tape<'_, T>, cfg: &AgentConfig, ids: &ParamIds, tokens: Var) -> Result<Var> {
    let views: Vec<usize> = (0..cfg.k).collect();
    let rows = tape.gather(tokens, &views)?;
    let w = tape.param(ids.ground_w);
    Ok(tape.matmul_nt(w, rows)?)
}
