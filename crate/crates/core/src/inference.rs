//! Iterative parallel decoding with confidence re-masking and character
//! guidance.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeVocab, CaptionTokens};
use crate::data::{character_presence, CharacterSet, Image};
use crate::model::{build_input, visual_rows, Context, InputSequence, MaskGst, ModelError};
use crate::numeric::{Graph, Tensor};
use crate::rng;
use crate::scalar::Scalar;
use crate::training::gamma;
use crate::vq::{TokenGrid, VqError, VqTokenizer};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("guidance weight {0} outside [0, 1)")]
    Lambda(f64),
    #[error("logit shapes differ: {0:?}, {1:?}, {2:?}")]
    Shape(Vec<usize>, Vec<usize>, Vec<usize>),
    #[error("story has {found} captions, the model expects {expected}")]
    StoryLength { expected: usize, found: usize },
    #[error("invalid decoding config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    #[serde(default = "enabled")]
    pub positive_enabled: bool,
    #[serde(default = "enabled")]
    pub negative_enabled: bool,
}

fn enabled() -> bool {
    true
}

impl GuidanceConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let g = Self {
            lambda,
            positive_enabled: true,
            negative_enabled: true,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(InferenceError::Lambda(self.lambda))
        }
    }
}

/// `(1−λ)·l_tc + 2λ·l_char − λ·l_char_neg`, elementwise.
pub fn guided_logits<S: Scalar>(l_tc: &[S], l_char: &[S], l_char_neg: &[S], lambda: f64) -> Result<Vec<S>> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(InferenceError::Lambda(lambda));
    }
    if l_tc.len() != l_char.len() || l_tc.len() != l_char_neg.len() {
        return Err(InferenceError::Shape(
            vec![l_tc.len()],
            vec![l_char.len()],
            vec![l_char_neg.len()],
        ));
    }
    let lam = S::lit(lambda);
    let (a, b) = (S::one() - lam, S::lit(2.0) * lam);
    Ok(l_tc
        .iter()
        .zip(l_char)
        .zip(l_char_neg)
        .map(|((&t, &c), &n)| a * t + b * c - lam * n)
        .collect())
}

/// [`guided_logits`] over whole tensors.
pub fn guided_logits_tensor<S: Scalar>(l_tc: &Tensor<S>, l_char: &Tensor<S>, l_char_neg: &Tensor<S>, lambda: f64) -> Result<Tensor<S>> {
    if l_tc.shape() != l_char.shape() || l_tc.shape() != l_char_neg.shape() {
        return Err(InferenceError::Shape(
            l_tc.shape().to_vec(),
            l_char.shape().to_vec(),
            l_char_neg.shape().to_vec(),
        ));
    }
    let data = guided_logits(l_tc.data(), l_char.data(), l_char_neg.data(), lambda)?;
    Ok(Tensor::new(l_tc.shape(), data).expect("same length"))
}

/// Character selections for the positive prompt and its complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharPrompts {
    pub positive: Vec<bool>,
    pub complement: Vec<bool>,
}

pub fn build_char_prompts(presence: &[bool]) -> CharPrompts {
    CharPrompts {
        positive: presence.to_vec(),
        complement: presence.iter().map(|&b| !b).collect(),
    }
}

/// Canvas, mask and step counter of one frame being decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub canvas: Vec<usize>,
    /// `true` where the position is still masked.
    pub mask: Vec<bool>,
    pub step: usize,
    pub total_steps: usize,
    /// Confidence with which each kept token was selected (frozen once kept).
    pub confidences: Vec<f64>,
}

impl DecodeState {
    /// A fully masked canvas of `n` positions holding `mask_id`.
    pub fn new(n: usize, mask_id: usize, total_steps: usize) -> Self {
        Self {
            canvas: vec![mask_id; n],
            mask: vec![true; n],
            step: 0,
            total_steps,
            confidences: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn kept(&self) -> usize {
        self.mask.len() - self.masked()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }
}

/// Tokens kept in total after step `t` of `steps`:
/// `N − ceil(γ(t/T)·N)`, and all `N` at `t = T`.
pub fn keep_total(t: usize, steps: usize, n: usize) -> usize {
    if t >= steps {
        return n;
    }
    let masked = (gamma(t as f64 / steps as f64) * n as f64).ceil() as usize;
    n - masked.min(n)
}

/// Index drawn from `probs` by inverse CDF with `u ∈ [0, 1)`. The last
/// positive-probability index absorbs rounding slack.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Softmax in 64-bit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Decoding steps `T`.
    pub steps: usize,
    /// Confidence-noise temperature `τ`, annealed as `τ·(1 − t/T)`.
    pub noise_temperature: f64,
    /// Take the most probable token instead of sampling.
    pub greedy: bool,
    /// Feed character embeddings with the text-conditional input (for
    /// models trained that way). Required by guidance.
    pub char_input: bool,
    pub guidance: Option<GuidanceConfig>,
    /// Stories decoded per forward batch.
    pub batch_stories: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            noise_temperature: 1.0,
            greedy: false,
            char_input: true,
            guidance: Some(GuidanceConfig {
                lambda: 0.2,
                positive_enabled: true,
                negative_enabled: true,
            }),
            batch_stories: 4,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(InferenceError::Config("steps must be at least 1".into()));
        }
        if !(self.noise_temperature >= 0.0 && self.noise_temperature.is_finite()) {
            return Err(InferenceError::Config("noise temperature must be finite and non-negative".into()));
        }
        if self.batch_stories == 0 {
            return Err(InferenceError::Config("batch_stories must be at least 1".into()));
        }
        if let Some(g) = &self.guidance {
            g.validate()?;
            if !self.char_input {
                return Err(InferenceError::Config("guidance needs char_input".into()));
            }
        }
        Ok(())
    }
}

/// Tokenized captions and character presence for one story.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryPrompt {
    pub captions: Vec<CaptionTokens>,
    pub presence: Vec<Vec<bool>>,
}

impl StoryPrompt {
    pub fn from_text<S: AsRef<str>>(captions: &[S], vocab: &BpeVocab, caption_len: usize, characters: &CharacterSet) -> Self {
        Self {
            captions: captions.iter().map(|c| vocab.encode(c.as_ref(), caption_len)).collect(),
            presence: captions.iter().map(|c| character_presence(c.as_ref(), characters)).collect(),
        }
    }
}

/// Per-frame visual logits `[N·K]` for every frame of `states`, combining
/// the three prompts when guidance is on.
fn frame_logits<S: Scalar>(
    model: &MaskGst<S>,
    prompts: &[StoryPrompt],
    states: &[Vec<DecodeState>],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<f64>>> {
    let mcfg = model.config();
    let mut inputs: Vec<InputSequence> = Vec::new();
    let mut ctx_index = Vec::new();
    let null = CaptionTokens::null(mcfg.caption_len);
    let passes = if cfg.guidance.is_some() { 3 } else { 1 };
    for (si, (p, st)) in prompts.iter().zip(states).enumerate() {
        for (i, s) in st.iter().enumerate() {
            let presence = cfg.char_input.then_some(p.presence[i].as_slice());
            inputs.push(build_input(mcfg, &s.canvas, &s.mask, &p.captions[i], presence)?);
            ctx_index.push(si);
            if let Some(g) = &cfg.guidance {
                let cp = build_char_prompts(&p.presence[i]);
                let pos = if g.positive_enabled { Some(&cp.positive) } else { None };
                let neg = if g.negative_enabled { Some(&cp.complement) } else { None };
                for sel in [pos, neg] {
                    // disabled prompts are replaced below; the row keeps batch layout uniform
                    let sel = sel.unwrap_or(&cp.positive);
                    inputs.push(build_input(mcfg, &s.canvas, &s.mask, &null, Some(sel))?);
                    ctx_index.push(si);
                }
            }
        }
    }
    let contexts: Vec<Context> = prompts.iter().map(|p| Context::Captions(p.captions.clone())).collect();
    let mut g = Graph::no_grad();
    let y = model.forward(&mut g, &inputs, &contexts, &ctx_index)?;
    let logits = g.value(y);
    let frame_len = inputs[0].len();
    let n = mcfg.seq_len;
    let rows = |b: usize| -> Vec<f64> { visual_rows(logits, b, frame_len, n).iter().map(|v| v.as_f64()).collect() };
    let mut out = Vec::with_capacity(inputs.len() / passes);
    for f in 0..inputs.len() / passes {
        let tc = rows(f * passes);
        match &cfg.guidance {
            None => out.push(tc),
            Some(gc) => {
                let mut pos = rows(f * passes + 1);
                let mut neg = rows(f * passes + 2);
                if !gc.positive_enabled {
                    pos = tc.clone();
                }
                if !gc.negative_enabled {
                    neg = pos.clone();
                }
                out.push(guided_logits(&tc, &pos, &neg, gc.lambda)?);
            }
        }
    }
    Ok(out)
}

/// Samples tokens for the masked positions of `state` from `logits` (`[N·K]`)
/// and keeps the most confident ones so the kept total reaches
/// [`keep_total`] for the next step.
pub fn apply_step<R: Rng + ?Sized>(state: &mut DecodeState, logits: &[f64], k: usize, cfg: &DecodeConfig, rng: &mut R) {
    let n = state.mask.len();
    let t = state.step + 1;
    let target = keep_total(t, state.total_steps, n);
    let new = target.saturating_sub(state.kept());
    let anneal = cfg.noise_temperature * (1.0 - t as f64 / state.total_steps as f64);
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for p in 0..n {
        if !state.mask[p] {
            continue;
        }
        let probs = softmax(&logits[p * k..(p + 1) * k]);
        let (tok, noise) = if cfg.greedy {
            (argmax(&probs), 0.0)
        } else {
            let tok = sample_index(&probs, rng.random::<f64>());
            (tok, gumbel.sample(rng))
        };
        let conf = probs[tok].ln() + anneal * noise;
        cands.push((p, tok, conf));
    }
    // stable sort keeps lower positions first among equal confidences
    cands.sort_by(|a, b| b.2.total_cmp(&a.2));
    for &(p, tok, conf) in cands.iter().take(new) {
        state.canvas[p] = tok;
        state.mask[p] = false;
        state.confidences[p] = conf;
    }
    state.step = t;
}

/// Decodes every frame of every story in `prompts` to token ids.
pub fn decode_stories<S: Scalar>(model: &MaskGst<S>, prompts: &[StoryPrompt], cfg: &DecodeConfig, seed: u64) -> Result<Vec<Vec<Vec<usize>>>> {
    decode_stories_observed(model, prompts, cfg, seed, |_| {})
}

/// [`decode_stories`], calling `observe` with the states of the current
/// batch after every step.
pub fn decode_stories_observed<S: Scalar>(
    model: &MaskGst<S>,
    prompts: &[StoryPrompt],
    cfg: &DecodeConfig,
    seed: u64,
    mut observe: impl FnMut(&[Vec<DecodeState>]),
) -> Result<Vec<Vec<Vec<usize>>>> {
    cfg.validate()?;
    let mcfg = model.config();
    for p in prompts {
        if p.captions.len() != mcfg.story_len || p.presence.len() != mcfg.story_len {
            return Err(InferenceError::StoryLength {
                expected: mcfg.story_len,
                found: p.captions.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (bi, chunk) in prompts.chunks(cfg.batch_stories).enumerate() {
        let mut rng = rng::stream(rng::derive_seed(seed, "sampling"), &bi.to_string());
        let mut states: Vec<Vec<DecodeState>> = chunk
            .iter()
            .map(|_| (0..mcfg.story_len).map(|_| DecodeState::new(mcfg.seq_len, mcfg.mask_id(), cfg.steps)).collect())
            .collect();
        for t in 1..=cfg.steps {
            if keep_total(t, cfg.steps, mcfg.seq_len) == keep_total(t - 1, cfg.steps, mcfg.seq_len) {
                states.iter_mut().flatten().for_each(|s| s.step = t);
            } else {
                let logits = frame_logits(model, chunk, &states, cfg)?;
                for (s, l) in states.iter_mut().flatten().zip(&logits) {
                    apply_step(s, l, mcfg.codebook_size, cfg, &mut rng);
                }
            }
            observe(&states);
        }
        out.extend(states.into_iter().map(|st| st.into_iter().map(|s| s.canvas).collect()));
    }
    Ok(out)
}

/// A decoded story: token grids and rendered frames.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStory {
    pub grids: Vec<TokenGrid>,
    pub frames: Vec<Image>,
}

/// Decodes stories and renders their frames through the tokenizer.
pub fn decode_story_frames<S: Scalar>(
    model: &MaskGst<S>,
    tokenizer: &VqTokenizer<S>,
    prompts: &[StoryPrompt],
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<Vec<DecodedStory>> {
    let tokens = decode_stories(model, prompts, cfg, seed)?;
    let side = tokenizer.config().grid_side();
    let k = tokenizer.config().codebook_size;
    tokens
        .into_iter()
        .map(|story| {
            let grids = story
                .into_iter()
                .map(|ids| TokenGrid::new(side, ids, k))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let frames = tokenizer.decode(&grids)?.to_images();
            Ok(DecodedStory { grids, frames })
        })
        .collect()
}
