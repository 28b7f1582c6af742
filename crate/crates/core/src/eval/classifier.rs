use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{char_metrics, EvalError, Result};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::Image;
use crate::nn::Linear;
use crate::numeric::{AdamConfig, Graph, ParameterStore, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::vq::{patchify, ImageBatch};

/// Held-out micro-F1 a classifier must reach before it may score anything.
pub const F1_GATE: f64 = 0.95;

const KIND: &str = "char-classifier";

/// One background-only negative is added per this many frames in a batch.
const BLANK_EVERY: usize = 8;

/// The frame filled with its most frequent color.
fn background_only(img: &Image) -> Image {
    let mut counts: std::collections::HashMap<[u8; 3], usize> = std::collections::HashMap::new();
    for px in img.rgb().chunks(3) {
        *counts.entry([px[0], px[1], px[2]]).or_default() += 1;
    }
    let (color, _) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("frames are nonempty");
    Image::filled(img.size(), color)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub patch: usize,
    pub hidden: usize,
    /// Width of the pooled feature vector.
    pub features: usize,
    pub n_chars: usize,
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            hidden: 32,
            features: 32,
            n_chars: 9,
            epochs: 12,
            batch_frames: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(EvalError::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.hidden == 0 || self.features == 0 || self.n_chars == 0 || self.batch_frames == 0 {
            return Err(EvalError::Config("widths and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStats {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    config: ClassifierConfig,
    heldout_f1: Option<f64>,
}

/// Per-patch MLP, max-pooled over the frame, then a linear layer to one
/// logit per character.
#[derive(Debug, Clone)]
pub struct CharClassifier<S: Scalar> {
    cfg: ClassifierConfig,
    store: ParameterStore<S>,
    heldout_f1: Option<f64>,
}

struct Layers {
    p1: Linear,
    p2: Linear,
    head: Linear,
}

impl<S: Scalar> CharClassifier<S> {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "classifier-init");
        let mut store = ParameterStore::new();
        let p = 3 * cfg.patch * cfg.patch;
        Linear::new(&mut store, "cls.p1", p, cfg.hidden, &mut r)?;
        Linear::new(&mut store, "cls.p2", cfg.hidden, cfg.features, &mut r)?;
        Linear::new(&mut store, "cls.head", cfg.features, cfg.n_chars, &mut r)?;
        Ok(Self {
            cfg,
            store,
            heldout_f1: None,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn layers(&self) -> Layers {
        let l = |n: &str| Linear::lookup(&self.store, n).expect("registered at construction");
        Layers {
            p1: l("cls.p1"),
            p2: l("cls.p2"),
            head: l("cls.head"),
        }
    }

    /// Pooled features `[B, F]` and logits `[B, n_c]`.
    fn forward(&self, g: &mut Graph<S>, frames: &[Image]) -> Result<(Var, Var)> {
        let batch = ImageBatch::from_images(frames)?;
        if batch.size() != self.cfg.image_size {
            return Err(EvalError::Length {
                what: "frame size",
                expected: self.cfg.image_size,
                found: batch.size(),
            });
        }
        let x = g.input(patchify(&batch, self.cfg.patch)?);
        let l = self.layers();
        let h = l.p1.forward(g, &self.store, x)?;
        let h = g.gelu(h)?;
        let h = l.p2.forward(g, &self.store, h)?;
        let h = g.gelu(h)?;
        let side = self.cfg.image_size / self.cfg.patch;
        let f = g.max_pool_rows(h, side * side)?;
        let y = l.head.forward(g, &self.store, f)?;
        Ok((f, y))
    }

    fn logits(&self, frames: &[Image]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut feats = Vec::with_capacity(frames.len());
        let mut logits = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(64) {
            let mut g = Graph::no_grad();
            let (f, y) = self.forward(&mut g, chunk)?;
            let rows = |v: Var, g: &Graph<S>| -> Vec<Vec<f64>> {
                let t = g.value(v);
                (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
            };
            feats.extend(rows(f, &g));
            logits.extend(rows(y, &g));
        }
        Ok((feats, logits))
    }

    /// Per-character presence probabilities.
    pub fn probabilities(&self, frames: &[Image]) -> Result<Vec<Vec<f64>>> {
        let (_, logits) = self.logits(frames)?;
        Ok(logits
            .into_iter()
            .map(|r| r.into_iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
            .collect())
    }

    /// Presence decisions at probability threshold 0.5.
    pub fn predict(&self, frames: &[Image]) -> Result<Vec<Vec<bool>>> {
        let (_, logits) = self.logits(frames)?;
        Ok(logits.into_iter().map(|r| r.into_iter().map(|z| z > 0.0).collect()).collect())
    }

    /// Pooled penultimate activations.
    pub fn features(&self, frames: &[Image]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(frames)?.0)
    }

    /// Scores `frames` against `labels` and records the F1 as the held-out
    /// validation result.
    pub fn validate_on(&mut self, frames: &[Image], labels: &[Vec<bool>]) -> Result<f64> {
        let f1 = char_metrics(&self.predict(frames)?, labels)?.f1();
        self.heldout_f1 = Some(f1);
        Ok(f1)
    }

    /// Held-out F1, provided it clears [`F1_GATE`].
    pub fn validated_f1(&self) -> Result<f64> {
        match self.heldout_f1 {
            None => Err(EvalError::Unvalidated),
            Some(f1) if f1 < F1_GATE => Err(EvalError::GateUnmet { f1, gate: F1_GATE }),
            Some(f1) => Ok(f1),
        }
    }

    pub fn heldout_f1(&self) -> Option<f64> {
        self.heldout_f1
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let meta = ClassifierMeta {
            kind: KIND.into(),
            config: self.cfg.clone(),
            heldout_f1: self.heldout_f1,
        };
        Checkpoint::from_store(serde_json::to_string(&meta).expect("plain struct"), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let meta: ClassifierMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| CheckpointError::Corrupt(format!("classifier metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(CheckpointError::Corrupt(format!("expected a {KIND} checkpoint, found `{}`", meta.kind)).into());
        }
        let mut c = Self::new(meta.config)?;
        ck.restore_into(&mut c.store)?;
        c.heldout_f1 = meta.heldout_f1;
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains with binary cross-entropy on labelled frames, then validates on
/// the held-out frames.
pub fn train_classifier<S: Scalar>(
    cfg: ClassifierConfig,
    frames: &[Image],
    labels: &[Vec<bool>],
    heldout: (&[Image], &[Vec<bool>]),
) -> Result<(CharClassifier<S>, Vec<ClassifierStats>)> {
    if frames.len() != labels.len() {
        return Err(EvalError::Length {
            what: "labels",
            expected: frames.len(),
            found: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != cfg.n_chars) {
        return Err(EvalError::Length {
            what: "presence vector",
            expected: cfg.n_chars,
            found: bad.len(),
        });
    }
    let mut c = CharClassifier::<S>::new(cfg)?;
    let mut r = rng::stream(c.cfg.seed, "classifier-data");
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut stats = Vec::with_capacity(c.cfg.epochs);
    for epoch in 0..c.cfg.epochs {
        order.shuffle(&mut r);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(c.cfg.batch_frames) {
            let mut imgs: Vec<Image> = chunk.iter().map(|&i| frames[i].clone()).collect();
            let mut targets: Vec<S> = chunk
                .iter()
                .flat_map(|&i| labels[i].iter().map(|&b| if b { S::one() } else { S::zero() }))
                .collect();
            // background-only negatives: no frame in the data is empty
            for &i in chunk.iter().take(chunk.len().div_ceil(BLANK_EVERY)) {
                imgs.push(background_only(&frames[i]));
                targets.extend(std::iter::repeat_n(S::zero(), c.cfg.n_chars));
            }
            let mut g = Graph::new();
            let (_, y) = c.forward(&mut g, &imgs)?;
            let loss = g.bce_with_logits(y, &targets)?;
            sum += g.value(loss).data()[0].as_f64();
            batches += 1;
            g.backward(loss)?;
            c.store.accumulate(&g);
            c.store.adam_step(&adam, c.cfg.lr)?;
        }
        stats.push(ClassifierStats {
            epoch,
            loss: sum / batches.max(1) as f64,
        });
    }
    c.validate_on(heldout.0, heldout.1)?;
    Ok((c, stats))
}
