//! Story datasets: samples, characters, the procedural generator, manifest
//! files and training-time caption choice.

mod image;
mod manifest;
mod presence;
mod synthetic;

pub use image::{read_png, write_png, write_png_raw, Image};
pub use manifest::{attach_augmentations, load_manifest, load_sidecar, write_manifest, write_sidecar, AugRecord, ManifestHeader, ManifestRecord};
pub use presence::character_presence;
pub use synthetic::{generate_synthetic, render_frame, Scene, SyntheticConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frames per story unless configured otherwise.
pub const DEFAULT_STORY_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Config(String),
    #[error("{path}:{line}: {reason}")]
    Record { path: String, line: usize, reason: String },
    #[error("missing image file {0}")]
    MissingImage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {reason}")]
    Png { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A recurring character: its name plus the visual identity used by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Character {
    pub name: String,
    #[serde(default)]
    pub color: [u8; 3],
    /// Quadrant (0..4) of the glyph that carries the eye mark.
    #[serde(default)]
    pub eye_quadrant: u8,
}

/// Ordered list of recurring characters; index `c` is presence bit `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSet {
    characters: Vec<Character>,
}

impl CharacterSet {
    pub fn new(characters: Vec<Character>) -> Result<Self> {
        if characters.is_empty() {
            return Err(DataError::Config("character set must not be empty".into()));
        }
        for (i, c) in characters.iter().enumerate() {
            if characters[..i].iter().any(|o| o.name.eq_ignore_ascii_case(&c.name)) {
                return Err(DataError::Config(format!("duplicate character name `{}`", c.name)));
            }
            if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_alphanumeric()) {
                return Err(DataError::Config(format!("character name `{}` must be one alphanumeric word", c.name)));
            }
        }
        Ok(Self { characters })
    }

    /// Names only, with the default palette assigned in order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let palette = default_palette();
        let characters = names
            .iter()
            .enumerate()
            .map(|(i, n)| Character {
                name: n.as_ref().to_string(),
                color: palette[i % palette.len()],
                eye_quadrant: (i % 4) as u8,
            })
            .collect();
        Self::new(characters)
    }

    /// The nine stock characters of the synthetic dataset.
    pub fn standard() -> Self {
        Self::from_names(&STANDARD_NAMES).expect("stock names are valid")
    }

    pub fn len(&self) -> usize {
        self.characters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.characters.is_empty()
    }

    pub fn get(&self, i: usize) -> &Character {
        &self.characters[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Character> {
        self.characters.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.characters.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn take(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(DataError::Config(format!("requested {n} characters, only {} available", self.len())));
        }
        Self::new(self.characters[..n].to_vec())
    }
}

pub const STANDARD_NAMES: [&str; 9] = [
    "Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta", "Iota",
];

fn default_palette() -> Vec<[u8; 3]> {
    vec![
        [230, 25, 25],
        [25, 50, 230],
        [240, 230, 25],
        [128, 25, 153],
        [255, 140, 0],
        [0, 215, 215],
        [255, 100, 180],
        [90, 50, 25],
        [150, 255, 50],
    ]
}

/// One story: `n` aligned captions, frames and presence vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StorySample {
    pub story_id: String,
    pub captions: Vec<String>,
    pub images: Vec<Image>,
    pub aug_captions: Option<Vec<String>>,
    pub presence: Vec<Vec<bool>>,
}

impl StorySample {
    /// Builds a sample and derives presence from the captions.
    pub fn new(story_id: impl Into<String>, captions: Vec<String>, images: Vec<Image>, characters: &CharacterSet) -> Result<Self> {
        let story_id = story_id.into();
        if captions.len() != images.len() || captions.is_empty() {
            return Err(DataError::Config(format!(
                "story `{story_id}`: {} captions but {} images",
                captions.len(),
                images.len()
            )));
        }
        let presence = captions.iter().map(|c| character_presence(c, characters)).collect();
        Ok(Self {
            story_id,
            captions,
            images,
            aug_captions: None,
            presence,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Train/validation/test story splits sharing one character set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub characters: CharacterSet,
    pub train: Vec<StorySample>,
    pub val: Vec<StorySample>,
    pub test: Vec<StorySample>,
}

/// Which caption a training visit used for a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionChoice {
    Original,
    Augmented,
}

/// Training-time caption choice: original or augmented with equal
/// probability when an augmented caption exists, original otherwise.
pub fn pick_caption<'a, R: Rng + ?Sized>(sample: &'a StorySample, i: usize, rng: &mut R) -> (&'a str, CaptionChoice) {
    match &sample.aug_captions {
        Some(aug) if rng.random_bool(0.5) => (aug[i].as_str(), CaptionChoice::Augmented),
        _ => (sample.captions[i].as_str(), CaptionChoice::Original),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn story(aug: bool) -> StorySample {
        let cs = CharacterSet::standard();
        let img = Image::filled(8, [0, 0, 0]);
        let mut s = StorySample::new("s0", vec!["Alpha runs".into(); 5], vec![img; 5], &cs).unwrap();
        if aug {
            s.aug_captions = Some(vec!["Alpha is running".into(); 5]);
        }
        s
    }

    #[test]
    fn without_augmentation_always_original() {
        let s = story(false);
        let mut rng = seeded(1);
        for i in 0..500 {
            assert_eq!(pick_caption(&s, i % 5, &mut rng), ("Alpha runs", CaptionChoice::Original));
        }
    }

    #[test]
    fn augmented_draws_are_balanced() {
        let s = story(true);
        let mut rng = seeded(2);
        let originals = (0..10_000)
            .filter(|i| pick_caption(&s, i % 5, &mut rng).1 == CaptionChoice::Original)
            .count();
        let frac = originals as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn draws_are_reproducible() {
        let s = story(true);
        let seq = |seed| {
            let mut rng = seeded(seed);
            (0..100).map(|i| pick_caption(&s, i % 5, &mut rng).1).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
    }

    #[test]
    fn character_set_rejects_duplicates() {
        assert!(CharacterSet::from_names(&["Alpha", "alpha"]).is_err());
        assert!(CharacterSet::from_names::<&str>(&[]).is_err());
    }
}
