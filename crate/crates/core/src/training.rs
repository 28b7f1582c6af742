//! Masked visual token modeling: cosine-scheduled masks, the masked
//! cross-entropy objective and the epoch loop.

use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeVocab, CaptionTokens};
use crate::data::{pick_caption, CaptionChoice, StorySample};
use crate::model::{build_input, Context, InputSequence, MaskGst, ModelConfig, ModelError};
use crate::numeric::gradcheck::{check_parameters, GradCheckReport};
use crate::numeric::{AdamConfig, Graph, NumericError, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::vq::{VqError, VqTokenizer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("mask selects no positions")]
    EmptyMask,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (stories {stories:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        stories: Vec<String>,
    },
    #[error("stats file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mask fraction `γ(r) = cos(π r / 2)`.
pub fn gamma(r: f64) -> f64 {
    (PI * r / 2.0).cos()
}

/// `ceil(γ(r)·n)` clamped to `[1, n]`.
pub fn mask_count(r: f64, n: usize) -> usize {
    ((gamma(r) * n as f64).ceil() as usize).clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Masks `ceil(γ(r)·n)` distinct positions for a uniform `r`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, rng: &mut R) -> BinaryMask {
    let r: f64 = rng.random();
    sample_mask_at(n, r, rng)
}

/// [`sample_mask`] with a given schedule position `r`.
pub fn sample_mask_at<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> BinaryMask {
    let mut bits = vec![false; n];
    for p in sample(rng, n, mask_count(r, n)) {
        bits[p] = true;
    }
    BinaryMask { bits }
}

/// Mean cross-entropy over masked visual positions. `logits` holds frames
/// of `frame_len` rows whose first `targets[b].len()` rows are visual.
pub fn mvtm_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    frame_len: usize,
    targets: &[&[usize]],
    masks: &[BinaryMask],
) -> Result<Var> {
    let rows = g.shape(logits)[0];
    if rows != frame_len * targets.len() || masks.len() != targets.len() {
        return Err(TrainError::Config(format!(
            "{rows} logit rows for {} frames of {frame_len}",
            targets.len()
        )));
    }
    let mut row_targets = vec![None; rows];
    for (b, (t, m)) in targets.iter().zip(masks).enumerate() {
        if m.len() != t.len() || t.len() > frame_len {
            return Err(TrainError::Config("mask and target lengths differ".into()));
        }
        for (p, (&tok, &bit)) in t.iter().zip(&m.bits).enumerate() {
            if bit {
                row_targets[b * frame_len + p] = Some(tok);
            }
        }
    }
    if row_targets.iter().all(Option::is_none) {
        return Err(TrainError::EmptyMask);
    }
    Ok(g.cross_entropy(logits, &row_targets)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub text_drop_rate: f64,
    /// Stories per optimizer step; every frame of a story shares one context.
    pub batch_stories: usize,
    pub seed: u64,
    pub guidance_training: bool,
    pub augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            text_drop_rate: 0.2,
            batch_stories: 2,
            seed: 0,
            guidance_training: true,
            augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.text_drop_rate) {
            return Err(TrainError::Config(format!("text drop rate {} is outside [0, 1)", self.text_drop_rate)));
        }
        if self.batch_stories == 0 || !(self.lr > 0.0) {
            return Err(TrainError::Config("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A story with frames already tokenized and captions encoded.
#[derive(Debug, Clone)]
pub struct PreparedStory {
    /// Captions and presence; frames are dropped after tokenization.
    pub sample: StorySample,
    pub tokens: Vec<Vec<usize>>,
    pub captions: Vec<CaptionTokens>,
    pub aug_captions: Option<Vec<CaptionTokens>>,
}

impl PreparedStory {
    pub fn caption(&self, i: usize, choice: CaptionChoice) -> &CaptionTokens {
        match (choice, &self.aug_captions) {
            (CaptionChoice::Augmented, Some(aug)) => &aug[i],
            _ => &self.captions[i],
        }
    }

    pub fn context(&self) -> Context {
        Context::Captions(self.captions.clone())
    }
}

pub fn prepare_stories<S: Scalar>(
    stories: &[StorySample],
    tok: &VqTokenizer<S>,
    vocab: &BpeVocab,
    caption_len: usize,
    use_augmented: bool,
) -> Result<Vec<PreparedStory>> {
    stories
        .iter()
        .map(|s| {
            let tokens = tok.encode_images(&s.images)?.into_iter().map(|g| g.indices().to_vec()).collect();
            let enc = |caps: &[String]| caps.iter().map(|c| vocab.encode(c, caption_len)).collect::<Vec<_>>();
            let mut sample = s.clone();
            sample.images.clear();
            if !use_augmented {
                sample.aug_captions = None;
            }
            Ok(PreparedStory {
                captions: enc(&sample.captions),
                aug_captions: sample.aug_captions.as_deref().map(enc),
                sample,
                tokens,
            })
        })
        .collect()
}

/// Independent streams for data order/caption choice/text drop and masks.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub data: rng::Rng,
    pub mask: rng::Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            data: rng::stream(seed, "data"),
            mask: rng::stream(seed, "mask"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub drop_rate: f64,
    pub original_caption_rate: f64,
    pub frames: usize,
    pub masked_tokens: usize,
    /// Seconds; not persisted, so stats files stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// One pass over `data` in a shuffled order with an Adam step per batch.
pub fn train_epoch<S: Scalar>(
    model: &mut MaskGst<S>,
    data: &[PreparedStory],
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    let start = Instant::now();
    let mcfg = model.config().clone();
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rngs.data);
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    let (mut frames, mut dropped, mut originals, mut masked) = (0usize, 0usize, 0usize, 0usize);
    for (bi, chunk) in order.chunks(cfg.batch_stories).enumerate() {
        let mut inputs: Vec<InputSequence> = Vec::new();
        let mut contexts = Vec::new();
        let mut ctx_index = Vec::new();
        let mut targets: Vec<&[usize]> = Vec::new();
        let mut masks = Vec::new();
        for (si, &idx) in chunk.iter().enumerate() {
            let story = &data[idx];
            let n = story.tokens.len();
            let choices: Vec<CaptionChoice> = (0..n).map(|i| pick_caption(&story.sample, i, &mut rngs.data).1).collect();
            originals += choices.iter().filter(|&&c| c == CaptionChoice::Original).count();
            contexts.push(Context::Captions(
                choices.iter().enumerate().map(|(i, &c)| story.caption(i, c).clone()).collect(),
            ));
            for i in 0..n {
                let mask = sample_mask(mcfg.seq_len, &mut rngs.mask);
                let presence = cfg.guidance_training.then_some(story.sample.presence[i].as_slice());
                let mut inp = build_input(&mcfg, &story.tokens[i], &mask.bits, story.caption(i, choices[i]), presence)?;
                if cfg.guidance_training && rngs.data.random_bool(cfg.text_drop_rate) {
                    inp.apply_text_drop();
                    dropped += 1;
                }
                masked += mask.count();
                inputs.push(inp);
                targets.push(&story.tokens[i]);
                masks.push(mask);
                ctx_index.push(si);
            }
        }
        frames += inputs.len();
        let frame_len = inputs[0].len();
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &inputs, &contexts, &ctx_index)?;
        let loss = mvtm_loss(&mut g, logits, frame_len, &targets, &masks)?;
        let lv = g.value(loss).data()[0].as_f64();
        let fail = || TrainError::NonFinite {
            epoch,
            batch: bi,
            loss: lv,
            stories: chunk.iter().map(|&i| data[i].sample.story_id.clone()).collect(),
        };
        if !lv.is_finite() {
            return Err(fail());
        }
        g.backward(loss).map_err(|_| fail())?;
        let store = model.params_mut();
        store.accumulate(&g);
        store.adam_step(&adam, cfg.lr)?;
        loss_sum += lv;
        batches += 1;
    }
    let frac = |a: usize| if frames == 0 { 0.0 } else { a as f64 / frames as f64 };
    Ok(EpochStats {
        epoch,
        loss: loss_sum / batches.max(1) as f64,
        drop_rate: frac(dropped),
        original_caption_rate: frac(originals),
        frames,
        masked_tokens: masked,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Appends one JSON line per epoch.
pub fn append_stats(path: &Path, stats: &EpochStats) -> Result<()> {
    let io = |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    writeln!(f, "{}", serde_json::to_string(stats).expect("plain struct")).map_err(io)
}

/// Finite-difference check of the masked objective over the full model at
/// 64-bit precision: one story, guided inputs, one frame text-dropped.
pub fn model_gradcheck(cfg: ModelConfig, probes: usize, seed: u64) -> Result<GradCheckReport> {
    let model = MaskGst::<f64>::init(cfg.clone(), seed)?;
    let mut r = rng::stream(seed, "gradcheck");
    let mut caption = || CaptionTokens {
        ids: (0..cfg.caption_len).map(|_| r.random_range(0..cfg.text_vocab)).collect(),
    };
    let captions: Vec<CaptionTokens> = (0..cfg.story_len).map(|_| caption()).collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for i in 0..2.min(cfg.story_len) {
        let toks: Vec<usize> = (0..cfg.seq_len).map(|_| r.random_range(0..cfg.codebook_size)).collect();
        let presence: Vec<bool> = (0..cfg.n_chars).map(|_| r.random_bool(0.5)).collect();
        let mask = sample_mask_at(cfg.seq_len, 0.4, &mut r);
        let mut inp = build_input(&cfg, &toks, &mask.bits, &captions[i], Some(&presence))?;
        if i == 1 {
            inp.apply_text_drop();
        }
        inputs.push(inp);
        targets.push(toks);
        masks.push(mask);
    }
    let contexts = [Context::Captions(captions)];
    let ctx_index = vec![0; inputs.len()];
    let frame_len = inputs[0].len();
    let report = check_parameters("model", model.params(), probes, seed, |g, st| {
        let logits = model
            .forward_with(g, st, &inputs, &contexts, &ctx_index)
            .map_err(|e| NumericError::Invalid {
                op: "model_gradcheck",
                reason: e.to_string(),
            })?;
        let t: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        mvtm_loss(g, logits, frame_len, &t, &masks).map_err(|e| NumericError::Invalid {
            op: "model_gradcheck",
            reason: e.to_string(),
        })
    })?;
    Ok(report)
}
