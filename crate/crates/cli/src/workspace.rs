use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskgst::bpe::BpeVocab;
use maskgst::config::write_snapshot;
use maskgst::data::{generate_synthetic, load_manifest, write_manifest, Dataset, ManifestHeader};
use maskgst::eval::{CharClassifier, MetricsReport};
use maskgst::inference::{decode_story_frames, DecodeConfig, GuidanceConfig};
use maskgst::model::MaskGst;
use maskgst::pipeline::{self, Assets, ExperimentConfig};
use maskgst::training::{append_stats, prepare_stories};
use maskgst::vq::{VqEpochStats, VqTokenizer};
use serde::Serialize;

use crate::render_frame_grid;

pub const SIDECAR: &str = "aug.jsonl";
const SPLITS: [&str; 3] = ["train", "val", "test"];

/// An output directory holding the artifacts of one experiment.
pub struct Workspace {
    pub out: PathBuf,
    pub cfg: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub report: MetricsReport,
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Workspace {
    /// Validates the config, creates the directory and writes the
    /// resolved-config snapshot.
    pub fn open(out: impl Into<PathBuf>, cfg: ExperimentConfig) -> Result<Self> {
        let out = out.into();
        cfg.validate()?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_snapshot(&cfg, &out)?;
        Ok(Self { out, cfg })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    pub fn vq_path(&self) -> PathBuf {
        self.out.join("vq.ckpt")
    }
    pub fn vocab_path(&self) -> PathBuf {
        self.out.join("vocab.txt")
    }
    pub fn model_path(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }
    pub fn classifier_path(&self) -> PathBuf {
        self.out.join("classifier.ckpt")
    }
    pub fn generations_dir(&self) -> PathBuf {
        self.out.join("generations")
    }

    fn need(&self, path: &Path, step: &str) -> Result<()> {
        if !path.exists() {
            bail!("{} not found; run `{step}` first", path.display());
        }
        Ok(())
    }

    /// Renders the synthetic dataset into `data/` as manifests and PNGs.
    pub fn synth_data(&self) -> Result<Dataset> {
        let ds = generate_synthetic(&self.cfg.data)?;
        let dir = self.data_dir();
        fs::create_dir_all(&dir)?;
        for (name, split) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
            write_manifest(&dir, name, split, &ds.characters, None)?;
        }
        Ok(ds)
    }

    /// The dataset from `data/` when present, otherwise synthesized in memory.
    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self.data_dir();
        if !dir.join("train.jsonl").exists() {
            return Ok(generate_synthetic(&self.cfg.data)?);
        }
        let mut splits = Vec::new();
        let mut characters = None;
        for name in SPLITS {
            let (cs, stories) = load_manifest(&dir.join(format!("{name}.jsonl")))?;
            characters.get_or_insert(cs);
            splits.push(stories);
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Dataset {
            characters: characters.unwrap(),
            train,
            val,
            test,
        })
    }

    pub fn train_vq(&self) -> Result<Vec<VqEpochStats>> {
        let ds = self.dataset()?;
        let (tok, stats) = pipeline::fit_tokenizer(&self.cfg, &ds.train)?;
        tok.save(&self.vq_path())?;
        write_json_lines(&self.out.join("vq-stats.jsonl"), &stats)?;
        Ok(stats)
    }

    pub fn tokenizer(&self) -> Result<VqTokenizer<f32>> {
        self.need(&self.vq_path(), "train-vq")?;
        Ok(VqTokenizer::load(&self.vq_path())?)
    }

    /// Trains the caption vocabulary and the model; logs one line per epoch.
    pub fn train_model(&self) -> Result<MaskGst<f32>> {
        let ds = self.dataset()?;
        let tok = self.tokenizer()?;
        let vocab = pipeline::train_vocab(&self.cfg, &ds.train)?;
        vocab.save(&self.vocab_path())?;
        if self.cfg.train.augmentation && ds.train.iter().all(|s| s.aug_captions.is_none()) {
            log::warn!("augmentation is enabled but no augmented captions are attached; run `augment` first");
        }
        let data = prepare_stories(&ds.train, &tok, &vocab, self.cfg.model.caption_len, self.cfg.train.augmentation)?;
        let stats_path = self.out.join("train-stats.jsonl");
        let _ = fs::remove_file(&stats_path);
        let mut failed = None;
        let model = pipeline::train_model(&self.cfg.model, &self.cfg.train, &data, |s| {
            log::info!("epoch {} loss {:.4} ({:.1}s)", s.epoch, s.loss, s.wall_time);
            if let Err(e) = append_stats(&stats_path, s) {
                failed.get_or_insert(e);
            }
        })?;
        if let Some(e) = failed {
            return Err(e.into());
        }
        model.save(&self.model_path())?;
        Ok(model)
    }

    fn vocab(&self) -> Result<BpeVocab> {
        self.need(&self.vocab_path(), "train-model")?;
        Ok(BpeVocab::load(&self.vocab_path())?)
    }

    pub fn model(&self) -> Result<MaskGst<f32>> {
        self.need(&self.model_path(), "train-model")?;
        Ok(MaskGst::load(&self.model_path())?)
    }

    /// The validated classifier, trained and saved on first use.
    pub fn classifier(&self, ds: &Dataset) -> Result<CharClassifier<f32>> {
        let path = self.classifier_path();
        if path.exists() {
            let clf = CharClassifier::load(&path)?;
            if clf.config() == &self.cfg.classifier {
                return Ok(clf);
            }
            log::info!("classifier config changed; retraining");
        }
        let clf = pipeline::fit_classifier(&self.cfg, ds)?;
        clf.save(&path)?;
        Ok(clf)
    }

    fn assets(&self, with_classifier: bool) -> Result<Assets> {
        let dataset = self.dataset()?;
        let classifier = if with_classifier {
            self.classifier(&dataset)?
        } else {
            CharClassifier::new(self.cfg.classifier.clone())?
        };
        Ok(Assets {
            vocab: self.vocab()?,
            tokenizer: self.tokenizer()?,
            vq_stats: Vec::new(),
            classifier,
            train: Vec::new(),
            dataset,
        })
    }

    /// Decodes the evaluation stories into `generations/`.
    pub fn generate(&self) -> Result<PathBuf> {
        let assets = self.assets(false)?;
        let model = self.model()?;
        let stories = pipeline::eval_split(&assets, &self.cfg);
        let prompts = pipeline::prompts(&assets, &self.cfg, stories);
        let decoded = decode_story_frames(&model, &assets.tokenizer, &prompts, &self.cfg.decode, self.cfg.train.seed)?;
        let dir = self.generations_dir();
        fs::create_dir_all(&dir)?;
        let frames: Vec<_> = decoded.iter().map(|d| d.frames.clone()).collect();
        let captions: Vec<_> = stories.iter().map(|s| s.captions.clone()).collect();
        let png = dir.join("grid.png");
        render_frame_grid(&frames, &captions, &png)?;
        let tokens: Vec<Vec<&[usize]>> = decoded.iter().map(|d| d.grids.iter().map(|g| g.indices()).collect()).collect();
        fs::write(dir.join("tokens.json"), serde_json::to_string(&tokens)?)?;
        Ok(png)
    }

    fn score(&self, assets: &Assets, model: &MaskGst<f32>, decode: &DecodeConfig) -> Result<MetricsReport> {
        Ok(pipeline::generate_and_score(model, assets, &self.cfg, decode, self.cfg.train.seed)?.1)
    }

    /// Generates and scores the evaluation stories; writes `report.json`.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let assets = self.assets(true)?;
        let report = self.score(&assets, &self.model()?, &self.cfg.decode)?;
        fs::write(self.out.join("report.json"), report.to_json())?;
        Ok(report)
    }

    /// One evaluation per guidance strength; writes `sweep.jsonl`.
    pub fn sweep_lambda(&self, values: &[f64]) -> Result<Vec<SweepRow>> {
        let assets = self.assets(true)?;
        let model = self.model()?;
        let mut rows = Vec::new();
        for &lambda in values {
            let decode = DecodeConfig {
                guidance: Some(GuidanceConfig::new(lambda)?),
                ..self.cfg.decode.clone()
            };
            let report = self.score(&assets, &model, &decode)?;
            log::info!("lambda {lambda}: char_f1 {:.4}", report.char_f1);
            rows.push(SweepRow { lambda, report });
        }
        write_json_lines(&self.out.join("sweep.jsonl"), &rows)?;
        Ok(rows)
    }

    /// Points the training manifest at the sidecar in `data/`.
    pub fn attach_sidecar(&self) -> Result<()> {
        let path = self.data_dir().join("train.jsonl");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let (head, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let mut header: ManifestHeader = serde_json::from_str(head).with_context(|| format!("{}: bad header", path.display()))?;
        header.augmented_captions = Some(SIDECAR.into());
        fs::write(&path, format!("{}\n{rest}", serde_json::to_string(&header)?))?;
        Ok(())
    }

    pub fn require_data(&self) -> Result<()> {
        self.need(&self.data_dir().join("train.jsonl"), "synth-data")
    }
}

/// Metrics per guidance strength as an aligned table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda  char_f1  char_acc  ffd\n");
    for r in rows {
        let ffd = r.report.ffd.map_or("-".into(), |v| format!("{v:.3}"));
        s.push_str(&format!("{:<6}  {:.4}   {:.4}    {ffd}\n", r.lambda, r.report.char_f1, r.report.char_acc));
    }
    s
}
