//! Masked generative story transformer.
//!
//! Each frame is one input sequence: `N` visual rows, `L` caption rows and,
//! in guidance mode, `n_c` character-embedding rows. Full-Layers run
//! self-attention, cross-attention over all `n` captions of the story and a
//! feed-forward block; Self-Layers skip the cross-attention. All sub-layers
//! are pre-norm with residual connections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{CaptionTokens, NULL};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::{trunc_normal, LayerNorm, Linear};
use crate::numeric::{AttnSource, Graph, NumericError, ParamId, ParameterStore, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, got {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{what} id {id} out of range (limit {limit})")]
    Id { what: &'static str, id: usize, limit: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_full: usize,
    pub n_self: usize,
    pub n_head: usize,
    /// Visual vocabulary `K`; id `K` is the MASK token.
    pub codebook_size: usize,
    /// Visual sequence length `N = (H/f)²`.
    pub seq_len: usize,
    /// Caption length `L`.
    pub caption_len: usize,
    pub text_vocab: usize,
    pub n_chars: usize,
    /// Captions per story `n`.
    pub story_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_full: 2,
            n_self: 4,
            n_head: 8,
            codebook_size: 32,
            seq_len: 64,
            caption_len: 32,
            text_vocab: 256,
            n_chars: 9,
            story_len: 5,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d,
            self.n_head,
            self.codebook_size,
            self.seq_len,
            self.caption_len,
            self.n_chars,
            self.story_len,
            self.ffn_mult,
            self.n_full + self.n_self,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("all sizes and the layer count must be positive".into()));
        }
        if self.d % self.n_head != 0 {
            return Err(ModelError::Config(format!("d = {} is not divisible by {} heads", self.d, self.n_head)));
        }
        if self.text_vocab <= NULL {
            return Err(ModelError::Config("text vocabulary must include the special tokens".into()));
        }
        Ok(())
    }

    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }

    /// Input rows per frame with or without character embeddings.
    pub fn input_len(&self, guided: bool) -> usize {
        self.seq_len + self.caption_len + if guided { self.n_chars } else { 0 }
    }

    pub fn context_len(&self) -> usize {
        self.story_len * self.caption_len
    }
}

/// Discrete description of one frame's input sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    /// Visual ids; the MASK id marks masked positions.
    pub visual: Vec<usize>,
    pub text: Vec<usize>,
    /// Presence bits selecting positive or negative character embeddings.
    pub chars: Option<Vec<bool>>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.visual.len() + self.text.len() + self.chars.as_ref().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces every caption position with the NULL token.
    pub fn apply_text_drop(&mut self) {
        self.text.iter_mut().for_each(|t| *t = NULL);
    }

    pub fn text_dropped(&self) -> Self {
        let mut s = self.clone();
        s.apply_text_drop();
        s
    }
}

/// Character-embedding row for character `c`: positive rows first.
pub fn char_row(n_chars: usize, c: usize, present: bool) -> usize {
    if present {
        c
    } else {
        n_chars + c
    }
}

/// Assembles a frame input. Positions with `mask[p]` set get the MASK id.
pub fn build_input(
    cfg: &ModelConfig,
    tokens: &[usize],
    mask: &[bool],
    caption: &CaptionTokens,
    presence: Option<&[bool]>,
) -> Result<InputSequence> {
    let check = |what, expected, found| {
        if expected == found {
            Ok(())
        } else {
            Err(ModelError::Length { what, expected, found })
        }
    };
    check("visual tokens", cfg.seq_len, tokens.len())?;
    check("mask", cfg.seq_len, mask.len())?;
    check("caption tokens", cfg.caption_len, caption.len())?;
    if let Some(p) = presence {
        check("presence vector", cfg.n_chars, p.len())?;
    }
    if let Some(&id) = tokens.iter().find(|&&t| t > cfg.codebook_size) {
        return Err(ModelError::Id {
            what: "visual",
            id,
            limit: cfg.codebook_size + 1,
        });
    }
    let visual = tokens
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { cfg.mask_id() } else { t })
        .collect();
    Ok(InputSequence {
        visual,
        text: caption.ids.clone(),
        chars: presence.map(<[bool]>::to_vec),
    })
}

/// Keys and values for cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub enum Context {
    /// All `n` captions of the story, in order.
    Captions(Vec<CaptionTokens>),
    /// All-zero caption embeddings (probe input).
    Zeros,
}

#[derive(Debug, Clone)]
struct CrossIds {
    ln: LayerNorm,
    q: Linear,
    kv: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    cross: Option<CrossIds>,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    vis_emb: ParamId,
    vis_pos: ParamId,
    txt_emb: ParamId,
    txt_pos: ParamId,
    char_emb: ParamId,
    ctx_ln: LayerNorm,
    layers: Vec<LayerIds>,
    final_ln: LayerNorm,
    head: Linear,
}

const KIND: &str = "maskgst-model";

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct MaskGst<S: Scalar> {
    cfg: ModelConfig,
    store: ParameterStore<S>,
    ids: Ids,
}

fn layer_name(i: usize) -> String {
    format!("layer{i}")
}

impl<S: Scalar> MaskGst<S> {
    /// Linear weights are Uniform(±1/√fan_in), embeddings truncated
    /// Normal(0, 0.02), biases and layer-norm offsets zero.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let mut st = ParameterStore::new();
        let d = cfg.d;
        let emb = |st: &mut ParameterStore<S>, name: &str, rows: usize, r: &mut rng::Rng| {
            st.add(name, trunc_normal(&[rows, d], 0.02, r))
        };
        emb(&mut st, "vis_emb", cfg.codebook_size + 1, &mut r)?;
        emb(&mut st, "vis_pos", cfg.seq_len, &mut r)?;
        emb(&mut st, "txt_emb", cfg.text_vocab, &mut r)?;
        emb(&mut st, "txt_pos", cfg.caption_len, &mut r)?;
        emb(&mut st, "char_emb", 2 * cfg.n_chars, &mut r)?;
        LayerNorm::new(&mut st, "ctx_ln", d)?;
        for i in 0..cfg.n_full + cfg.n_self {
            let p = layer_name(i);
            LayerNorm::new(&mut st, &format!("{p}.ln1"), d)?;
            Linear::new(&mut st, &format!("{p}.qkv"), d, 3 * d, &mut r)?;
            Linear::new(&mut st, &format!("{p}.attn_out"), d, d, &mut r)?;
            if i < cfg.n_full {
                LayerNorm::new(&mut st, &format!("{p}.cross_ln"), d)?;
                Linear::new(&mut st, &format!("{p}.cross_q"), d, d, &mut r)?;
                Linear::new(&mut st, &format!("{p}.cross_kv"), d, 2 * d, &mut r)?;
                Linear::new(&mut st, &format!("{p}.cross_out"), d, d, &mut r)?;
            }
            LayerNorm::new(&mut st, &format!("{p}.ln2"), d)?;
            Linear::new(&mut st, &format!("{p}.ff1"), d, cfg.ffn_mult * d, &mut r)?;
            Linear::new(&mut st, &format!("{p}.ff2"), cfg.ffn_mult * d, d, &mut r)?;
        }
        LayerNorm::new(&mut st, "final_ln", d)?;
        Linear::new(&mut st, "head", d, cfg.codebook_size, &mut r)?;
        let ids = Self::lookup(&cfg, &st)?;
        Ok(Self { cfg, store: st, ids })
    }

    fn lookup(cfg: &ModelConfig, st: &ParameterStore<S>) -> Result<Ids> {
        let layers = (0..cfg.n_full + cfg.n_self)
            .map(|i| {
                let p = layer_name(i);
                let cross = if i < cfg.n_full {
                    Some(CrossIds {
                        ln: LayerNorm::lookup(st, &format!("{p}.cross_ln"))?,
                        q: Linear::lookup(st, &format!("{p}.cross_q"))?,
                        kv: Linear::lookup(st, &format!("{p}.cross_kv"))?,
                        out: Linear::lookup(st, &format!("{p}.cross_out"))?,
                    })
                } else {
                    None
                };
                Ok(LayerIds {
                    ln1: LayerNorm::lookup(st, &format!("{p}.ln1"))?,
                    qkv: Linear::lookup(st, &format!("{p}.qkv"))?,
                    attn_out: Linear::lookup(st, &format!("{p}.attn_out"))?,
                    cross,
                    ln2: LayerNorm::lookup(st, &format!("{p}.ln2"))?,
                    ff1: Linear::lookup(st, &format!("{p}.ff1"))?,
                    ff2: Linear::lookup(st, &format!("{p}.ff2"))?,
                })
            })
            .collect::<std::result::Result<Vec<_>, NumericError>>()?;
        Ok(Ids {
            vis_emb: st.id("vis_emb")?,
            vis_pos: st.id("vis_pos")?,
            txt_emb: st.id("txt_emb")?,
            txt_pos: st.id("txt_pos")?,
            char_emb: st.id("char_emb")?,
            ctx_ln: LayerNorm::lookup(st, "ctx_ln")?,
            layers,
            final_ln: LayerNorm::lookup(st, "final_ln")?,
            head: Linear::lookup(st, "head")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<S> {
        &mut self.store
    }

    /// The same weights with every cross-attention sub-layer removed, so
    /// Full-Layers act as Self-Layers.
    pub fn without_cross_attention(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.ids.layers {
            l.cross = None;
        }
        m
    }

    /// Input embeddings `[Σ len, d]`. NULL caption tokens and character
    /// rows carry no positional term.
    pub fn embed_inputs(&self, g: &mut Graph<S>, inputs: &[InputSequence]) -> Result<Var> {
        self.embed_inputs_with(g, &self.store, inputs)
    }

    fn embed_inputs_with(&self, g: &mut Graph<S>, st: &ParameterStore<S>, inputs: &[InputSequence]) -> Result<Var> {
        let c = &self.cfg;
        let mut base = Vec::new();
        let mut pos = Vec::new();
        for inp in inputs {
            if inp.visual.len() != c.seq_len || inp.text.len() != c.caption_len {
                return Err(ModelError::Length {
                    what: "input sequence",
                    expected: c.input_len(inp.chars.is_some()),
                    found: inp.len(),
                });
            }
            for (p, &v) in inp.visual.iter().enumerate() {
                if v > c.codebook_size {
                    return Err(ModelError::Id {
                        what: "visual",
                        id: v,
                        limit: c.codebook_size + 1,
                    });
                }
                base.push(Some((0, v)));
                pos.push(Some((0, p)));
            }
            for (j, &t) in inp.text.iter().enumerate() {
                if t >= c.text_vocab {
                    return Err(ModelError::Id {
                        what: "text",
                        id: t,
                        limit: c.text_vocab,
                    });
                }
                base.push(Some((1, t)));
                pos.push((t != NULL).then_some((1, j)));
            }
            if let Some(chars) = &inp.chars {
                if chars.len() != c.n_chars {
                    return Err(ModelError::Length {
                        what: "presence vector",
                        expected: c.n_chars,
                        found: chars.len(),
                    });
                }
                for (ci, &present) in chars.iter().enumerate() {
                    base.push(Some((2, char_row(c.n_chars, ci, present))));
                    pos.push(None);
                }
            }
        }
        let vis = g.param(st, self.ids.vis_emb);
        let txt = g.param(st, self.ids.txt_emb);
        let chr = g.param(st, self.ids.char_emb);
        let x = g.gather_rows(&[vis, txt, chr], &base)?;
        if pos.iter().all(Option::is_none) {
            return Ok(x);
        }
        let vp = g.param(st, self.ids.vis_pos);
        let tp = g.param(st, self.ids.txt_pos);
        let p = g.gather_rows(&[vp, tp], &pos)?;
        Ok(g.add(x, p)?)
    }

    /// Normalized caption embeddings of every context, `[contexts·n·L, d]`.
    fn embed_contexts(&self, g: &mut Graph<S>, st: &ParameterStore<S>, contexts: &[Context]) -> Result<Var> {
        let c = &self.cfg;
        let mut base = Vec::new();
        let mut pos = Vec::new();
        for ctx in contexts {
            match ctx {
                Context::Captions(caps) => {
                    if caps.len() != c.story_len {
                        return Err(ModelError::Length {
                            what: "context captions",
                            expected: c.story_len,
                            found: caps.len(),
                        });
                    }
                    for cap in caps {
                        if cap.len() != c.caption_len {
                            return Err(ModelError::Length {
                                what: "context caption tokens",
                                expected: c.caption_len,
                                found: cap.len(),
                            });
                        }
                        for (j, &t) in cap.ids.iter().enumerate() {
                            if t >= c.text_vocab {
                                return Err(ModelError::Id {
                                    what: "text",
                                    id: t,
                                    limit: c.text_vocab,
                                });
                            }
                            base.push(Some((0, t)));
                            pos.push(Some((1, j)));
                        }
                    }
                }
                Context::Zeros => {
                    base.extend(std::iter::repeat_n(None, c.context_len()));
                    pos.extend(std::iter::repeat_n(None, c.context_len()));
                }
            }
        }
        let txt = g.param(st, self.ids.txt_emb);
        let tp = g.param(st, self.ids.txt_pos);
        let x = g.gather_rows(&[txt, tp], &base)?;
        let p = g.gather_rows(&[txt, tp], &pos)?;
        let x = g.add(x, p)?;
        self.ids.ctx_ln.forward(g, st, x).map_err(Into::into)
    }

    /// Logits `[Σ len, K]` for a batch of frames of equal length; frame `b`
    /// cross-attends to `contexts[ctx_index[b]]`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        inputs: &[InputSequence],
        contexts: &[Context],
        ctx_index: &[usize],
    ) -> Result<Var> {
        self.forward_with(g, &self.store, inputs, contexts, ctx_index)
    }

    /// [`Self::forward`] reading weights from `st`, which must hold the same
    /// parameter names as this model (for perturbation checks).
    pub fn forward_with(
        &self,
        g: &mut Graph<S>,
        st: &ParameterStore<S>,
        inputs: &[InputSequence],
        contexts: &[Context],
        ctx_index: &[usize],
    ) -> Result<Var> {
        let t = inputs.first().map_or(0, InputSequence::len);
        if inputs.is_empty() || inputs.iter().any(|i| i.len() != t) {
            return Err(ModelError::Config("a batch needs frames of one nonzero length".into()));
        }
        if ctx_index.len() != inputs.len() {
            return Err(ModelError::Length {
                what: "context index",
                expected: inputs.len(),
                found: ctx_index.len(),
            });
        }
        let (d, heads) = (self.cfg.d, self.cfg.n_head);
        let frames: Vec<usize> = (0..inputs.len()).collect();
        let mut h = self.embed_inputs_with(g, st, inputs)?;
        let ctx = if self.ids.layers.iter().any(|l| l.cross.is_some()) {
            Some(self.embed_contexts(g, st, contexts)?)
        } else {
            None
        };
        for l in &self.ids.layers {
            let x = l.ln1.forward(g, st, h)?;
            let qkv = l.qkv.forward(g, st, x)?;
            let a = g.attention(
                AttnSource::new(qkv, 0),
                AttnSource::new(qkv, d),
                AttnSource::new(qkv, 2 * d),
                d,
                heads,
                t,
                t,
                &frames,
            )?;
            let a = l.attn_out.forward(g, st, a)?;
            h = g.add(h, a)?;
            if let (Some(cx), Some(ctx)) = (&l.cross, ctx) {
                let x = cx.ln.forward(g, st, h)?;
                let q = cx.q.forward(g, st, x)?;
                let kv = cx.kv.forward(g, st, ctx)?;
                let a = g.attention(
                    AttnSource::new(q, 0),
                    AttnSource::new(kv, 0),
                    AttnSource::new(kv, d),
                    d,
                    heads,
                    t,
                    self.cfg.context_len(),
                    ctx_index,
                )?;
                let a = cx.out.forward(g, st, a)?;
                h = g.add(h, a)?;
            }
            let x = l.ln2.forward(g, st, h)?;
            let f = l.ff1.forward(g, st, x)?;
            let f = g.gelu(f)?;
            let f = l.ff2.forward(g, st, f)?;
            h = g.add(h, f)?;
        }
        let x = self.ids.final_ln.forward(g, st, h)?;
        Ok(self.ids.head.forward(g, st, x)?)
    }

    /// Forward pass returning a plain tensor.
    pub fn logits(&self, inputs: &[InputSequence], contexts: &[Context], ctx_index: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let y = self.forward(&mut g, inputs, contexts, ctx_index)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let meta = ModelMeta {
            kind: KIND.into(),
            config: self.cfg.clone(),
        };
        Checkpoint::from_store(serde_json::to_string(&meta).expect("plain struct"), &self.store)
    }

    /// Restores weights into a model built from `cfg`; tensor names and
    /// shapes must match that config.
    pub fn from_checkpoint_with(cfg: ModelConfig, ck: &Checkpoint<S>) -> Result<Self> {
        let mut m = Self::init(cfg, 0)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_str(&ck.meta).map_err(|e| CheckpointError::Corrupt(format!("model metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(CheckpointError::Corrupt(format!("expected a {KIND} checkpoint, found `{}`", meta.kind)).into());
        }
        Self::from_checkpoint_with(meta.config, ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Rows `b·len .. b·len + N` of a logits tensor: the visual slice of frame `b`.
pub fn visual_rows<S: Scalar>(logits: &Tensor<S>, frame: usize, frame_len: usize, n: usize) -> &[S] {
    let k = logits.cols();
    &logits.data()[frame * frame_len * k..(frame * frame_len + n) * k]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::PAD;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d: 16,
            n_full: 1,
            n_self: 1,
            n_head: 2,
            codebook_size: 6,
            seq_len: 4,
            caption_len: 3,
            text_vocab: 10,
            n_chars: 3,
            story_len: 2,
            ffn_mult: 2,
        }
    }

    fn caption(ids: &[usize]) -> CaptionTokens {
        CaptionTokens { ids: ids.to_vec() }
    }

    fn ctx() -> Context {
        Context::Captions(vec![caption(&[3, 4, PAD]), caption(&[5, 6, 7])])
    }

    #[test]
    fn input_lengths() {
        let cfg = ModelConfig::default();
        let cap = CaptionTokens::null(32);
        let toks = vec![0; 64];
        let mask = vec![false; 64];
        let with = build_input(&cfg, &toks, &mask, &cap, Some(&[true; 9])).unwrap();
        assert_eq!(with.len(), 105);
        assert!(with.chars.as_ref().unwrap().iter().all(|&b| b));
        let without = build_input(&cfg, &toks, &mask, &cap, None).unwrap();
        assert_eq!(without.len(), 96);
        assert!(build_input(&cfg, &toks, &mask, &cap, Some(&[true; 8])).is_err());
    }

    #[test]
    fn mask_positions_use_mask_id() {
        let cfg = small_cfg();
        let inp = build_input(&cfg, &[1, 2, 3, 4], &[true, false, true, false], &caption(&[3, 4, 5]), None).unwrap();
        assert_eq!(inp.visual, vec![6, 2, 6, 4]);
    }

    #[test]
    fn text_drop_rows_equal_null_embedding() {
        let cfg = small_cfg();
        let m = MaskGst::<f64>::init(cfg.clone(), 3).unwrap();
        let inp = build_input(&cfg, &[0, 1, 2, 3], &[false; 4], &caption(&[3, 4, 5]), Some(&[true, false, true])).unwrap();
        let dropped = inp.text_dropped();
        assert_eq!(dropped.text_dropped(), dropped);
        assert_eq!(dropped.visual, inp.visual);
        assert_eq!(dropped.chars, inp.chars);
        let mut g = Graph::new();
        let e = m.embed_inputs(&mut g, &[dropped]).unwrap();
        let e = g.value(e).clone();
        let null_row = m.params().value(m.params().id("txt_emb").unwrap()).row(NULL).to_vec();
        for j in 0..3 {
            assert_eq!(e.row(4 + j), &null_row[..]);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = MaskGst::<f64>::init(small_cfg(), 9).unwrap();
        let b = MaskGst::<f64>::init(small_cfg(), 9).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
        for (_, t) in a.params().iter() {
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        let c = ModelConfig::default();
        let m = MaskGst::<f32>::init(c.clone(), 0).unwrap();
        let (d, k, n, l, v, nc, f) = (64, 32, 64, 32, 256, 9, 4 * 64);
        let embeddings = (k + 1) * d + n * d + v * d + l * d + 2 * nc * d;
        let norm = 2 * d;
        let lin = |i: usize, o: usize| i * o + o;
        let self_layer = norm + lin(d, 3 * d) + lin(d, d) + norm + lin(d, f) + lin(f, d);
        let cross = norm + lin(d, d) + lin(d, 2 * d) + lin(d, d);
        let expected = embeddings + norm + 6 * self_layer + 2 * cross + norm + lin(d, k);
        assert_eq!(m.params().numel(), expected);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = small_cfg();
        let m = MaskGst::<f64>::init(cfg.clone(), 1).unwrap();
        let inp = build_input(&cfg, &[0, 1, 2, 3], &[true, false, false, true], &caption(&[3, 4, 5]), Some(&[true, false, false])).unwrap();
        let y = m.logits(&[inp.clone(), inp.clone()], &[ctx()], &[0, 0]).unwrap();
        assert_eq!(y.shape(), &[2 * 10, 6]);
        assert_eq!(y, m.logits(&[inp.clone(), inp], &[ctx()], &[0, 0]).unwrap());
    }

    #[test]
    fn self_layers_ignore_context_exactly() {
        let cfg = small_cfg();
        let m = MaskGst::<f64>::init(cfg.clone(), 2).unwrap().without_cross_attention();
        let inp = build_input(&cfg, &[0, 1, 2, 3], &[false; 4], &caption(&[3, 4, 5]), None).unwrap();
        let a = m.logits(&[inp.clone()], &[ctx()], &[0]).unwrap();
        let b = m.logits(&[inp], &[Context::Zeros], &[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn visual_logits_depend_on_every_input_position() {
        let cfg = small_cfg();
        let m = MaskGst::<f64>::init(cfg.clone(), 4).unwrap();
        let base = build_input(&cfg, &[0, 1, 2, 3], &[false; 4], &caption(&[3, 4, 5]), Some(&[true, false, true])).unwrap();
        let y0 = m.logits(&[base.clone()], &[ctx()], &[0]).unwrap();
        let len = base.len();
        for pos in 0..len {
            let mut p = base.clone();
            if pos < 4 {
                p.visual[pos] = (p.visual[pos] + 1) % 6;
            } else if pos < 7 {
                p.text[pos - 4] = 8;
            } else {
                let c = p.chars.as_mut().unwrap();
                c[pos - 7] = !c[pos - 7];
            }
            let y = m.logits(&[p], &[ctx()], &[0]).unwrap();
            // visual position 0 responds to every perturbed input position
            let diff = visual_rows(&y, 0, len, 1)
                .iter()
                .zip(visual_rows(&y0, 0, len, 1))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-12, "position {pos}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_error() {
        let cfg = small_cfg();
        let m = MaskGst::<f64>::init(cfg.clone(), 5).unwrap();
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap();
        let back = MaskGst::from_checkpoint(&ck).unwrap();
        let inp = build_input(&cfg, &[0, 1, 2, 3], &[true; 4], &caption(&[3, 4, 5]), None).unwrap();
        assert_eq!(m.logits(&[inp.clone()], &[ctx()], &[0]).unwrap(), back.logits(&[inp], &[ctx()], &[0]).unwrap());
        let wider = ModelConfig { d: 32, ..cfg };
        let err = MaskGst::<f64>::from_checkpoint_with(wider, &ck).unwrap_err();
        assert!(err.to_string().contains("vis_emb"), "{err}");
    }
}
