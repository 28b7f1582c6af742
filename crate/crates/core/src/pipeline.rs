//! End-to-end stages shared by the command line and the acceptance runs:
//! data, tokenizer, vocabulary, classifier, model training, generation and
//! scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeError, BpeVocab};
use crate::data::{generate_synthetic, DataError, Dataset, Image, StorySample, SyntheticConfig};
use crate::eval::{evaluate_frames, story_continuation_filter, train_classifier, CharClassifier, ClassifierConfig, EvalError, MetricsReport};
use crate::inference::{decode_story_frames, DecodeConfig, DecodedStory, InferenceError, StoryPrompt};
use crate::model::{MaskGst, ModelConfig, ModelError};
use crate::training::{prepare_stories, train_epoch, EpochStats, PreparedStory, TrainConfig, TrainError, TrainRngs};
use crate::vq::{train_tokenizer, VqConfig, VqEpochStats, VqError, VqTokenizer, VqTrainConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Everything one experiment needs, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub vocab_size: usize,
    pub vq: VqConfig,
    pub vq_train: VqTrainConfig,
    /// Training frames used to fit the tokenizer (the first ones in order).
    pub vq_frames: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub decode: DecodeConfig,
    /// Test stories generated and scored.
    pub eval_stories: usize,
    /// Score frames 2..n only.
    pub continuation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vq = VqConfig {
            patch: 8,
            ..VqConfig::default()
        };
        let model = ModelConfig {
            seq_len: vq.tokens_per_frame(),
            caption_len: 16,
            text_vocab: 160,
            ..ModelConfig::default()
        };
        Self {
            data: SyntheticConfig::default(),
            vocab_size: model.text_vocab,
            vq,
            vq_train: VqTrainConfig::default(),
            vq_frames: 2000,
            model,
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            decode: DecodeConfig::default(),
            eval_stories: 40,
            continuation: false,
        }
    }
}

impl ExperimentConfig {
    /// Checks cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |s: String| Err(PipelineError::Config(s));
        if m.codebook_size != self.vq.codebook_size {
            return bad(format!("model K {} differs from tokenizer K {}", m.codebook_size, self.vq.codebook_size));
        }
        if m.seq_len != self.vq.tokens_per_frame() {
            return bad(format!("model N {} differs from tokens per frame {}", m.seq_len, self.vq.tokens_per_frame()));
        }
        if m.n_chars != self.data.n_characters || self.classifier.n_chars != self.data.n_characters {
            return bad("character counts differ between data, model and classifier".into());
        }
        if m.story_len != self.data.story_len {
            return bad(format!("model story length {} differs from data {}", m.story_len, self.data.story_len));
        }
        if self.vocab_size > m.text_vocab {
            return bad(format!("vocabulary {} exceeds model text vocabulary {}", self.vocab_size, m.text_vocab));
        }
        if self.vq.image_size != self.data.image_size || self.classifier.image_size != self.data.image_size {
            return bad("image sizes differ between data, tokenizer and classifier".into());
        }
        m.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }
}

/// Seed-independent artifacts shared by all model runs of an experiment.
#[derive(Debug, Clone)]
pub struct Assets {
    pub dataset: Dataset,
    pub vocab: BpeVocab,
    pub tokenizer: VqTokenizer<f32>,
    pub vq_stats: Vec<VqEpochStats>,
    pub classifier: CharClassifier<f32>,
    pub train: Vec<PreparedStory>,
}

pub fn all_frames(stories: &[StorySample]) -> (Vec<Image>, Vec<Vec<bool>>) {
    (
        stories.iter().flat_map(|s| s.images.iter().cloned()).collect(),
        stories.iter().flat_map(|s| s.presence.iter().cloned()).collect(),
    )
}

pub fn train_vocab(cfg: &ExperimentConfig, stories: &[StorySample]) -> Result<BpeVocab> {
    let corpus: Vec<&str> = stories
        .iter()
        .flat_map(|s| s.captions.iter().chain(s.aug_captions.iter().flatten()))
        .map(String::as_str)
        .collect();
    Ok(BpeVocab::train(&corpus, cfg.vocab_size)?)
}

pub fn fit_tokenizer(cfg: &ExperimentConfig, stories: &[StorySample]) -> Result<(VqTokenizer<f32>, Vec<VqEpochStats>)> {
    let (frames, _) = all_frames(stories);
    let frames = &frames[..cfg.vq_frames.min(frames.len())];
    let mut tok = VqTokenizer::new(cfg.vq.clone(), cfg.vq_train.seed)?;
    let stats = train_tokenizer(&mut tok, frames, &cfg.vq_train)?;
    Ok((tok, stats))
}

pub fn fit_classifier(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<CharClassifier<f32>> {
    let (tf, tl) = all_frames(&dataset.train);
    let (vf, vl) = all_frames(&dataset.val);
    let (clf, _) = train_classifier(cfg.classifier.clone(), &tf, &tl, (&vf, &vl))?;
    clf.validated_f1()?;
    Ok(clf)
}

/// Data, vocabulary, tokenizer, classifier and tokenized training stories.
pub fn build_assets(cfg: &ExperimentConfig) -> Result<Assets> {
    cfg.validate()?;
    let dataset = generate_synthetic(&cfg.data)?;
    let vocab = train_vocab(cfg, &dataset.train)?;
    let (tokenizer, vq_stats) = fit_tokenizer(cfg, &dataset.train)?;
    let classifier = fit_classifier(cfg, &dataset)?;
    let train = prepare_stories(&dataset.train, &tokenizer, &vocab, cfg.model.caption_len, cfg.train.augmentation)?;
    Ok(Assets {
        dataset,
        vocab,
        tokenizer,
        vq_stats,
        classifier,
        train,
    })
}

/// Trains a fresh model for `train.epochs` epochs, reporting each epoch.
pub fn train_model(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &[PreparedStory],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<MaskGst<f32>> {
    let mut model = MaskGst::init(model_cfg.clone(), crate::rng::derive_seed(train_cfg.seed, "init"))?;
    let mut rngs = TrainRngs::new(train_cfg.seed);
    for epoch in 0..train_cfg.epochs {
        let stats = train_epoch(&mut model, data, train_cfg, &mut rngs, epoch)?;
        on_epoch(&stats);
    }
    Ok(model)
}

pub fn prompts(assets: &Assets, cfg: &ExperimentConfig, stories: &[StorySample]) -> Vec<StoryPrompt> {
    stories
        .iter()
        .map(|s| StoryPrompt::from_text(&s.captions, &assets.vocab, cfg.model.caption_len, &assets.dataset.characters))
        .collect()
}

/// The first `eval_stories` test stories.
pub fn eval_split<'a>(assets: &'a Assets, cfg: &ExperimentConfig) -> &'a [StorySample] {
    &assets.dataset.test[..cfg.eval_stories.min(assets.dataset.test.len())]
}

/// Generates the evaluation stories and scores them against caption-derived
/// presence, with ground-truth frames as the feature reference.
pub fn generate_and_score(
    model: &MaskGst<f32>,
    assets: &Assets,
    cfg: &ExperimentConfig,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<(Vec<DecodedStory>, MetricsReport)> {
    let stories = eval_split(assets, cfg);
    let decoded = decode_story_frames(model, &assets.tokenizer, &prompts(assets, cfg, stories), decode, seed)?;
    let report = score(assets, cfg, stories, &decoded)?;
    Ok((decoded, report))
}

pub fn score(assets: &Assets, cfg: &ExperimentConfig, stories: &[StorySample], decoded: &[DecodedStory]) -> Result<MetricsReport> {
    let mut generated: Vec<Vec<Image>> = decoded.iter().map(|d| d.frames.clone()).collect();
    let mut truth: Vec<Vec<Vec<bool>>> = stories.iter().map(|s| s.presence.clone()).collect();
    let mut reference: Vec<Vec<Image>> = stories.iter().map(|s| s.images.clone()).collect();
    if cfg.continuation {
        generated = story_continuation_filter(&generated)?;
        truth = story_continuation_filter(&truth)?;
        reference = story_continuation_filter(&reference)?;
    }
    let flat = |v: Vec<Vec<Image>>| v.into_iter().flatten().collect::<Vec<_>>();
    let truth: Vec<Vec<bool>> = truth.into_iter().flatten().collect();
    Ok(evaluate_frames(&assets.classifier, &flat(generated), &truth, Some(&flat(reference)))?)
}
