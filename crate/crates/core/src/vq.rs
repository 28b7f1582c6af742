//! Vector-quantized patch autoencoder: frames to token grids and back.
//!
//! The encoder and decoder are stride-`f` convolutions with kernel `f`
//! (one patch per output cell) followed by a pointwise layer, so each grid
//! cell sees exactly its own `f×f` patch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::Image;
use crate::nn::Linear;
use crate::numeric::{AdamConfig, Graph, NumericError, ParameterStore, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("codebook is not initialized; train or load a tokenizer first")]
    Untrained,
    #[error("token index {index} out of range for a codebook of {k} entries")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("token grid has {found} cells, expected {expected}")]
    GridSize { found: usize, expected: usize },
    #[error("tokenizer training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("tokenizer training needs at least one frame")]
    EmptyDataset,
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, VqError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub image_size: usize,
    /// Compression factor `f`: side of the patch mapped to one token.
    pub patch: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub commitment: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            codebook_size: 32,
            latent_dim: 16,
            hidden: 64,
            commitment: 0.25,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(VqError::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch
            )));
        }
        if self.codebook_size < 2 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(VqError::Config("codebook needs K ≥ 2 and positive widths".into()));
        }
        Ok(())
    }

    /// Grid side `H/f`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    /// Tokens per frame, `(H/f)²`.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub lr: f64,
    pub seed: u64,
    /// Re-seed unused codes from badly reconstructed patches during the
    /// first three quarters of training.
    pub restart_dead: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_frames: 32,
            lr: 2e-3,
            seed: 0,
            restart_dead: true,
        }
    }
}

/// Codebook indices of one frame, row-major `side×side`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    side: usize,
    indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, indices: Vec<usize>, k: usize) -> Result<Self> {
        if indices.len() != side * side {
            return Err(VqError::GridSize {
                found: indices.len(),
                expected: side * side,
            });
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= k) {
            return Err(VqError::IndexOutOfRange { index, k });
        }
        Ok(Self { side, indices })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `B×3×H×H` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<S> {
    batch: usize,
    size: usize,
    data: Vec<S>,
}

impl<S: Scalar> ImageBatch<S> {
    /// Clamps every value into `[0, 1]`.
    pub fn new(batch: usize, size: usize, mut data: Vec<S>) -> Result<Self> {
        if data.len() != batch * 3 * size * size {
            return Err(VqError::Config(format!(
                "{} values cannot form {batch} frames of 3x{size}x{size}",
                data.len()
            )));
        }
        for v in &mut data {
            *v = v.max(S::zero()).min(S::one());
        }
        Ok(Self { batch, size, data })
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let size = images.first().map_or(0, Image::size);
        if images.iter().any(|im| im.size() != size) {
            return Err(VqError::Config("frames in a batch must share one size".into()));
        }
        let data = images.iter().flat_map(|im| im.to_chw::<S>()).collect();
        Ok(Self {
            batch: images.len(),
            size,
            data,
        })
    }

    pub fn to_images(&self) -> Vec<Image> {
        (0..self.batch)
            .map(|b| Image::from_chw(self.size, self.frame(b)).expect("frame length matches size"))
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn frame(&self, b: usize) -> &[S] {
        let n = 3 * self.size * self.size;
        &self.data[b * n..(b + 1) * n]
    }

    /// Mean squared difference over all values.
    pub fn mse(&self, other: &Self) -> f64 {
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        total / self.data.len().max(1) as f64
    }
}

/// Rows `[B·(H/f)², 3f²]`, one per `f×f` patch in raster order with
/// channel-major pixels.
pub fn patchify<S: Scalar>(batch: &ImageBatch<S>, f: usize) -> Result<Tensor<S>> {
    let h = batch.size;
    if f == 0 || h % f != 0 {
        return Err(VqError::Config(format!("frame size {h} is not a multiple of patch {f}")));
    }
    let side = h / f;
    let mut out = Vec::with_capacity(batch.batch * side * side * 3 * f * f);
    for b in 0..batch.batch {
        let fr = batch.frame(b);
        for gy in 0..side {
            for gx in 0..side {
                for c in 0..3 {
                    for dy in 0..f {
                        let row = (c * h + gy * f + dy) * h + gx * f;
                        out.extend_from_slice(&fr[row..row + f]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[batch.batch * side * side, 3 * f * f], out)?)
}

/// Nearest codebook row for every latent row by squared Euclidean distance;
/// ties go to the lowest index. Returns indices and the selected rows.
pub fn quantize<S: Scalar>(codebook: &Tensor<S>, latents: &Tensor<S>) -> (Vec<usize>, Tensor<S>) {
    let d = codebook.cols();
    assert_eq!(latents.cols(), d, "latent width must match codebook width");
    let k = codebook.rows();
    let idx: Vec<usize> = (0..latents.rows())
        .map(|r| {
            let z = latents.row(r);
            let mut best = 0;
            let mut best_d = S::infinity();
            for j in 0..k {
                let dist: S = z.iter().zip(codebook.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            best
        })
        .collect();
    let data = idx.iter().flat_map(|&i| codebook.row(i).iter().copied()).collect();
    let q = Tensor::new(&[idx.len().max(1), d], data).expect("nonempty latents");
    (idx, q)
}

struct Layers {
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    codebook: crate::numeric::ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VqMeta {
    kind: String,
    config: VqConfig,
    ready: bool,
}

const KIND: &str = "vq-tokenizer";

#[derive(Debug, Clone)]
pub struct VqTokenizer<S: Scalar> {
    cfg: VqConfig,
    store: ParameterStore<S>,
    ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqEpochStats {
    pub epoch: usize,
    pub recon_mse: f64,
    pub loss: f64,
    pub codes_used: usize,
    pub restarted: usize,
}

impl<S: Scalar> VqTokenizer<S> {
    /// Fresh weights; the codebook is initialized from data on the first
    /// training epoch.
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let mut store = ParameterStore::new();
        let p = cfg.patch_dim();
        Linear::new(&mut store, "vq.enc1", p, cfg.hidden, &mut r)?;
        Linear::new(&mut store, "vq.enc2", cfg.hidden, cfg.latent_dim, &mut r)?;
        Linear::new(&mut store, "vq.dec1", cfg.latent_dim, cfg.hidden, &mut r)?;
        Linear::new(&mut store, "vq.dec2", cfg.hidden, p, &mut r)?;
        store.add(
            "vq.codebook",
            crate::nn::fan_in_uniform(&[cfg.codebook_size, cfg.latent_dim], cfg.latent_dim, &mut r),
        )?;
        Ok(Self {
            cfg,
            store,
            ready: false,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn params(&self) -> &ParameterStore<S> {
        &self.store
    }

    fn layers(&self) -> Layers {
        let l = |n: &str| Linear::lookup(&self.store, n).expect("registered at construction");
        Layers {
            enc1: l("vq.enc1"),
            enc2: l("vq.enc2"),
            dec1: l("vq.dec1"),
            dec2: l("vq.dec2"),
            codebook: self.store.id("vq.codebook").expect("registered at construction"),
        }
    }

    pub fn codebook(&self) -> &Tensor<S> {
        self.store.value(self.layers().codebook)
    }

    fn check_size(&self, size: usize) -> Result<()> {
        if size != self.cfg.image_size {
            return Err(VqError::Config(format!(
                "frame size {size} does not match the tokenizer's {} (patch {})",
                self.cfg.image_size, self.cfg.patch
            )));
        }
        Ok(())
    }

    /// Rows `[B·N, 3f²]`, one per patch in raster order.
    pub fn patchify(&self, batch: &ImageBatch<S>) -> Result<Tensor<S>> {
        self.check_size(batch.size)?;
        patchify(batch, self.cfg.patch)
    }

    fn unpatchify(&self, patches: &Tensor<S>) -> Result<ImageBatch<S>> {
        let (h, f, side) = (self.cfg.image_size, self.cfg.patch, self.cfg.grid_side());
        let n = side * side;
        let batch = patches.rows() / n;
        let mut data = vec![S::zero(); batch * 3 * h * h];
        for b in 0..batch {
            let fr = &mut data[b * 3 * h * h..(b + 1) * 3 * h * h];
            for cell in 0..n {
                let (gy, gx) = (cell / side, cell % side);
                let src = patches.row(b * n + cell);
                for c in 0..3 {
                    for dy in 0..f {
                        let row = (c * h + gy * f + dy) * h + gx * f;
                        fr[row..row + f].copy_from_slice(&src[(c * f + dy) * f..(c * f + dy + 1) * f]);
                    }
                }
            }
        }
        ImageBatch::new(batch, h, data)
    }

    fn encoder(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let l = self.layers();
        let h = l.enc1.forward(g, &self.store, x)?;
        let h = g.gelu(h)?;
        Ok(l.enc2.forward(g, &self.store, h)?)
    }

    fn decoder(&self, g: &mut Graph<S>, z: Var) -> Result<Var> {
        let l = self.layers();
        let h = l.dec1.forward(g, &self.store, z)?;
        let h = g.gelu(h)?;
        let y = l.dec2.forward(g, &self.store, h)?;
        Ok(g.sigmoid(y)?)
    }

    /// Continuous encoder outputs `[B·N, D]`.
    pub fn latents(&self, batch: &ImageBatch<S>) -> Result<Tensor<S>> {
        let x = self.patchify(batch)?;
        let mut g = Graph::new();
        let x = g.input(x);
        let z = self.encoder(&mut g, x)?;
        Ok(g.value(z).clone())
    }

    pub fn encode(&self, batch: &ImageBatch<S>) -> Result<Vec<TokenGrid>> {
        if !self.ready {
            return Err(VqError::Untrained);
        }
        let z = self.latents(batch)?;
        let (idx, _) = quantize(self.codebook(), &z);
        let n = self.cfg.tokens_per_frame();
        idx.chunks(n)
            .map(|c| TokenGrid::new(self.cfg.grid_side(), c.to_vec(), self.cfg.codebook_size))
            .collect()
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Vec<TokenGrid>> {
        self.encode(&ImageBatch::from_images(images)?)
    }

    pub fn decode(&self, grids: &[TokenGrid]) -> Result<ImageBatch<S>> {
        let n = self.cfg.tokens_per_frame();
        let k = self.cfg.codebook_size;
        let mut map = Vec::with_capacity(grids.len() * n);
        for grid in grids {
            if grid.len() != n {
                return Err(VqError::GridSize {
                    found: grid.len(),
                    expected: n,
                });
            }
            for &i in grid.indices() {
                if i >= k {
                    return Err(VqError::IndexOutOfRange { index: i, k });
                }
                map.push(Some((0, i)));
            }
        }
        if map.is_empty() {
            return ImageBatch::new(0, self.cfg.image_size, Vec::new());
        }
        let mut g = Graph::new();
        let cb = g.input(self.codebook().clone());
        let z = g.gather_rows(&[cb], &map)?;
        let y = self.decoder(&mut g, z)?;
        self.unpatchify(g.value(y))
    }

    /// How many patches of `batch` map to each codebook entry.
    pub fn usage(&self, batch: &ImageBatch<S>) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.cfg.codebook_size];
        for grid in self.encode(batch)? {
            for &i in grid.indices() {
                counts[i] += 1;
            }
        }
        Ok(counts)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let meta = VqMeta {
            kind: KIND.into(),
            config: self.cfg.clone(),
            ready: self.ready,
        };
        Checkpoint::from_store(serde_json::to_string(&meta).expect("plain struct"), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let meta: VqMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| CheckpointError::Corrupt(format!("tokenizer metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(CheckpointError::Corrupt(format!("expected a {KIND} checkpoint, found `{}`", meta.kind)).into());
        }
        let mut tok = Self::new(meta.config, 0)?;
        ck.restore_into(&mut tok.store)?;
        tok.ready = meta.ready;
        Ok(tok)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Codebook from up to `K` distinct patches' encodings.
    fn init_codebook<R: Rng + ?Sized>(&mut self, all: &ImageBatch<S>, rng: &mut R) -> Result<()> {
        let patches = self.patchify(all)?;
        let mut order: Vec<usize> = (0..patches.rows()).collect();
        order.shuffle(rng);
        let k = self.cfg.codebook_size;
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for &r in &order {
            if chosen.len() == k {
                break;
            }
            if chosen.iter().all(|&c| patches.row(c) != patches.row(r)) {
                chosen.push(r);
            }
        }
        while chosen.len() < k {
            chosen.push(order[chosen.len() % order.len()]);
        }
        let sel = Tensor::new(
            &[k, self.cfg.patch_dim()],
            chosen.iter().flat_map(|&r| patches.row(r).iter().copied()).collect(),
        )?;
        let mut g = Graph::new();
        let x = g.input(sel);
        let z = self.encoder(&mut g, x)?;
        let z = g.value(z).clone();
        let id = self.layers().codebook;
        let d = self.cfg.latent_dim;
        let cb = self.store.value_mut(id);
        for (j, row) in cb.data_mut().chunks_mut(d).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                // jitter separates duplicates when fewer than K patches are distinct
                *v = z.row(j)[c] + S::lit(rng.random_range(-1e-3..1e-3));
            }
        }
        self.ready = true;
        Ok(())
    }
}

/// Trains encoder, decoder and codebook with reconstruction MSE, codebook
/// loss and weighted commitment loss through a straight-through estimator.
pub fn train_tokenizer<S: Scalar>(
    tok: &mut VqTokenizer<S>,
    frames: &[Image],
    tcfg: &VqTrainConfig,
) -> Result<Vec<VqEpochStats>> {
    if frames.is_empty() {
        return Err(VqError::EmptyDataset);
    }
    if tcfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut r = rng::stream(tcfg.seed, "vq");
    let all = ImageBatch::from_images(frames)?;
    tok.check_size(all.size)?;
    if !tok.ready {
        tok.init_codebook(&all, &mut r)?;
    }
    let adam = AdamConfig::default();
    let k = tok.cfg.codebook_size;
    let d = tok.cfg.latent_dim;
    let beta = S::lit(tok.cfg.commitment);
    let restart_until = tcfg.epochs * 3 / 4;
    let bs = tcfg.batch_frames.max(1);
    let mut stats = Vec::with_capacity(tcfg.epochs);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut r);
        let mut counts = vec![0usize; k];
        let (mut recon_sum, mut loss_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut worst: Vec<(f64, Vec<S>)> = Vec::new();
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let imgs: Vec<Image> = chunk.iter().map(|&i| frames[i].clone()).collect();
            let x = tok.patchify(&ImageBatch::from_images(&imgs)?)?;
            let l = tok.layers();
            let mut g = Graph::new();
            let xv = g.input(x);
            let ze = tok.encoder(&mut g, xv)?;
            let (idx, _) = quantize(tok.codebook(), g.value(ze));
            for &i in &idx {
                counts[i] += 1;
            }
            let cb = g.param(&tok.store, l.codebook);
            let map: Vec<_> = idx.iter().map(|&i| Some((0, i))).collect();
            let e = g.gather_rows(&[cb], &map)?;
            let diff = g.sub(e, ze)?;
            let diff = g.stop_grad(diff);
            let st = g.add(ze, diff)?;
            let y = tok.decoder(&mut g, st)?;
            let recon = g.mse(y, xv)?;
            let ze_sg = g.stop_grad(ze);
            let cb_loss = g.mse(ze_sg, e)?;
            let e_sg = g.stop_grad(e);
            let commit = g.mse(ze, e_sg)?;
            let commit = g.scale(commit, beta)?;
            let loss = g.add(recon, cb_loss)?;
            let loss = g.add(loss, commit)?;
            let lv = g.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(VqError::Diverged {
                    epoch,
                    batch: bi,
                    loss: lv,
                });
            }
            g.backward(loss).map_err(|_| VqError::Diverged {
                epoch,
                batch: bi,
                loss: lv,
            })?;
            tok.store.accumulate(&g);
            tok.store.adam_step(&adam, tcfg.lr)?;
            recon_sum += g.value(recon).data()[0].as_f64();
            loss_sum += lv;
            batches += 1;
            if tcfg.restart_dead && epoch < restart_until {
                let zv = g.value(ze);
                let ev = g.value(e);
                for row in 0..zv.rows() {
                    let err: f64 = zv.row(row).iter().zip(ev.row(row)).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum();
                    worst.push((err, zv.row(row).to_vec()));
                }
                worst.sort_by(|a, b| b.0.total_cmp(&a.0));
                worst.truncate(k);
            }
        }
        let dead: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        let mut restarted = 0;
        if tcfg.restart_dead && epoch < restart_until {
            let id = tok.layers().codebook;
            let cb = tok.store.value_mut(id);
            for (&j, (_, z)) in dead.iter().zip(&worst) {
                cb.data_mut()[j * d..(j + 1) * d].copy_from_slice(z);
                restarted += 1;
            }
        }
        stats.push(VqEpochStats {
            epoch,
            recon_mse: recon_sum / batches as f64,
            loss: loss_sum / batches as f64,
            codes_used: k - dead.len(),
            restarted,
        });
    }
    Ok(stats)
}

/// Trailing moving average of `values` over `window` entries.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::numeric::Tensor;
    use rand::Rng;

    fn exhaustive(codebook: &Tensor<f64>, z: &[f64]) -> usize {
        let dists: Vec<f64> = (0..codebook.rows())
            .map(|j| codebook.row(j).iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&x| x == min).unwrap()
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut r = rng::seeded(5);
        let cb = Tensor::from_fn(&[32, 16], |_| r.random_range(-1.0..1.0));
        let z = Tensor::from_fn(&[2000, 16], |_| r.random_range(-1.5..1.5));
        let (idx, q) = quantize(&cb, &z);
        for row in 0..z.rows() {
            assert_eq!(idx[row], exhaustive(&cb, z.row(row)));
            assert_eq!(q.row(row), cb.row(idx[row]));
        }
    }

    #[test]
    fn exact_row_and_ties() {
        let cb = Tensor::new(&[4, 2], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.5, 0.5]).unwrap();
        let z = Tensor::new(&[2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        assert_eq!(quantize(&cb, &z).0, vec![3, 1]);
        let z = Tensor::new(&[1, 2], vec![0.5, 0.0]).unwrap();
        // equidistant from rows 0, 1, 2 and 3
        assert_eq!(quantize(&cb, &z).0, vec![0]);
    }

    fn tiny() -> (VqTokenizer<f64>, Vec<Image>) {
        let cfg = SyntheticConfig {
            train_stories: 4,
            val_stories: 0,
            test_stories: 0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let frames: Vec<Image> = ds.train.iter().flat_map(|s| s.images.clone()).collect();
        (VqTokenizer::new(VqConfig::default(), 1).unwrap(), frames)
    }

    #[test]
    fn untrained_and_bad_sizes_are_errors() {
        let (tok, frames) = tiny();
        assert!(matches!(tok.encode_images(&frames), Err(VqError::Untrained)));
        let bad = VqConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(VqTokenizer::<f64>::new(bad, 0).is_err());
    }

    #[test]
    fn patchify_roundtrip() {
        let (tok, frames) = tiny();
        let b = ImageBatch::<f64>::from_images(&frames[..3]).unwrap();
        let p = tok.patchify(&b).unwrap();
        assert_eq!(p.shape(), &[3 * 64, 48]);
        assert_eq!(tok.unpatchify(&p).unwrap(), b);
    }

    #[test]
    fn zero_epochs_leave_weights() {
        let (mut tok, frames) = tiny();
        let before = tok.to_checkpoint();
        let stats = train_tokenizer(&mut tok, &frames, &VqTrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(stats.is_empty());
        assert_eq!(tok.to_checkpoint(), before);
        let back = VqTokenizer::<f64>::from_checkpoint(&Checkpoint::from_bytes(&before.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint(), before);
    }

    #[test]
    fn short_training_encodes_and_decodes() {
        let (mut tok, frames) = tiny();
        train_tokenizer(&mut tok, &frames, &VqTrainConfig { epochs: 3, batch_frames: 8, ..Default::default() }).unwrap();
        let grids = tok.encode_images(&frames).unwrap();
        assert_eq!(grids.len(), frames.len());
        assert_eq!(grids[0].side(), 8);
        assert_eq!(grids, tok.encode_images(&frames).unwrap());
        let out = tok.decode(&grids).unwrap();
        assert_eq!(out, tok.decode(&grids).unwrap());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let same = TokenGrid::new(8, vec![5; 64], 32).unwrap();
        assert_eq!(tok.decode(&[same]).unwrap().batch(), 1);
        let bad = TokenGrid {
            side: 8,
            indices: vec![32; 64],
        };
        assert!(matches!(tok.decode(&[bad]), Err(VqError::IndexOutOfRange { .. })));
    }
}
