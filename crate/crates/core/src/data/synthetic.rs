use rand::seq::{index::sample, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{character_presence, CharacterSet, DataError, Dataset, Image, Result, StorySample};
use crate::rng;

/// A flat background shared by every frame of a story.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_characters: usize,
    /// Optional override of the character colors, in character order.
    pub palette: Vec<[u8; 3]>,
    pub scenes: Vec<Scene>,
    pub image_size: usize,
    /// Side of a character glyph; glyphs sit on a grid of this pitch.
    pub glyph_size: usize,
    pub story_len: usize,
    pub cast_min: usize,
    pub cast_max: usize,
    pub max_per_frame: usize,
    /// Caption templates for the first frame; `{names}`, `{verb}`, `{scene}`.
    pub first_templates: Vec<String>,
    /// Caption templates for later frames; `{names}`, `{verb}`.
    pub later_templates: Vec<String>,
    /// `(singular, plural)` verb phrases.
    pub verbs: Vec<(String, String)>,
    pub train_stories: usize,
    pub val_stories: usize,
    pub test_stories: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        Self {
            n_characters: 9,
            palette: Vec::new(),
            scenes: vec![
                Scene { name: "beach".into(), color: [238, 216, 153] },
                Scene { name: "forest".into(), color: [51, 128, 64] },
                Scene { name: "house".into(), color: [178, 140, 115] },
                Scene { name: "snowfield".into(), color: [217, 230, 247] },
            ],
            image_size: 32,
            glyph_size: 8,
            story_len: 5,
            cast_min: 2,
            cast_max: 4,
            max_per_frame: 3,
            first_templates: s(&[
                "{names} {verb} at the {scene}.",
                "At the {scene}, {names} {verb}.",
                "{names} {verb} near the {scene}.",
            ]),
            later_templates: s(&["{names} {verb}.", "Then {names} {verb}.", "Later, {names} {verb}.", "Now {names} {verb} again."]),
            verbs: [
                ("jumps", "jump"),
                ("waves", "wave"),
                ("runs", "run"),
                ("sings", "sing"),
                ("laughs", "laugh"),
                ("dances", "dance"),
                ("sleeps", "sleep"),
                ("reads a book", "read a book"),
                ("eats lunch", "eat lunch"),
                ("plays a game", "play a game"),
            ]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
            train_stories: 1000,
            val_stories: 100,
            test_stories: 200,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn characters(&self) -> Result<CharacterSet> {
        let mut cs = CharacterSet::standard().take(self.n_characters)?;
        if !self.palette.is_empty() {
            if self.palette.len() != self.n_characters {
                return Err(DataError::Config(format!(
                    "palette has {} colors for {} characters",
                    self.palette.len(),
                    self.n_characters
                )));
            }
            let chars = cs
                .iter()
                .zip(&self.palette)
                .map(|(c, &color)| super::Character { color, ..c.clone() })
                .collect();
            cs = CharacterSet::new(chars)?;
        }
        Ok(cs)
    }

    fn grid(&self) -> usize {
        self.image_size / self.glyph_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.glyph_size < 2 {
            return fail(format!("glyph size {} is too small", self.glyph_size));
        }
        let cells = self.grid() * self.grid();
        if self.max_per_frame > cells || cells == 0 {
            return fail(format!(
                "image size {} fits {cells} glyphs of size {}, but up to {} characters per frame were requested",
                self.image_size, self.glyph_size, self.max_per_frame
            ));
        }
        if self.scenes.is_empty() || self.first_templates.is_empty() || self.later_templates.is_empty() || self.verbs.is_empty() {
            return fail("scenes, templates and verbs must be nonempty".into());
        }
        if self.story_len == 0 || self.max_per_frame == 0 || self.cast_min == 0 || self.cast_min > self.cast_max {
            return fail("story length, per-frame count and cast bounds must be positive and ordered".into());
        }
        if self.cast_min > self.n_characters {
            return fail(format!("cast of {} exceeds {} characters", self.cast_min, self.n_characters));
        }
        Ok(())
    }
}

/// Draws the frame for the characters whose presence bit is set.
pub fn render_frame<R: Rng + ?Sized>(
    presence: &[bool],
    scene: &Scene,
    characters: &CharacterSet,
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> Result<Image> {
    let grid = cfg.grid();
    let present: Vec<usize> = presence.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i).collect();
    if present.len() > grid * grid {
        return Err(DataError::Config(format!(
            "cannot place {} glyphs of size {} in a {}px image",
            present.len(),
            cfg.glyph_size,
            cfg.image_size
        )));
    }
    let g = cfg.glyph_size;
    let mut img = Image::filled(cfg.image_size, scene.color);
    let cells = sample(rng, grid * grid, present.len()).into_vec();
    for (&c, &cell) in present.iter().zip(&cells) {
        let ch = characters.get(c);
        let (y0, x0) = ((cell / grid) * g, (cell % grid) * g);
        img.fill_rect(y0, x0, g, g, ch.color);
        let half = g / 2;
        let eye = (g / 4).max(1);
        let q = ch.eye_quadrant as usize % 4;
        let ey = y0 + (q / 2) * half + (half - eye) / 2;
        let ex = x0 + (q % 2) * half + (half - eye) / 2;
        img.fill_rect(ey, ex, eye, eye, [255, 255, 255]);
    }
    Ok(img)
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn generate_story<R: Rng + ?Sized>(
    id: String,
    cfg: &SyntheticConfig,
    characters: &CharacterSet,
    rng: &mut R,
) -> Result<StorySample> {
    let scene = cfg.scenes.choose(rng).expect("validated nonempty");
    let cast_hi = cfg.cast_max.min(characters.len());
    let cast_size = rng.random_range(cfg.cast_min..=cast_hi);
    let cast = sample(rng, characters.len(), cast_size).into_vec();
    let mut captions = Vec::with_capacity(cfg.story_len);
    let mut images = Vec::with_capacity(cfg.story_len);
    for frame in 0..cfg.story_len {
        let k = rng.random_range(1..=cfg.max_per_frame.min(cast.len()));
        let chosen: Vec<&str> = sample(rng, cast.len(), k)
            .into_iter()
            .map(|i| characters.get(cast[i]).name.as_str())
            .collect();
        let (sing, plural) = cfg.verbs.choose(rng).expect("validated nonempty");
        let verb = if chosen.len() == 1 { sing } else { plural };
        let templates = if frame == 0 { &cfg.first_templates } else { &cfg.later_templates };
        let caption = templates
            .choose(rng)
            .expect("validated nonempty")
            .replace("{names}", &join_names(&chosen))
            .replace("{verb}", verb)
            .replace("{scene}", &scene.name);
        let presence = character_presence(&caption, characters);
        images.push(render_frame(&presence, scene, characters, cfg, rng)?);
        captions.push(caption);
    }
    StorySample::new(id, captions, images, characters)
}

/// Generates train/val/test splits. Output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let characters = cfg.characters()?;
    let split = |name: &str, count: usize| -> Result<Vec<StorySample>> {
        let mut r = rng::stream(cfg.seed, &format!("synthetic/{name}"));
        (0..count)
            .map(|i| generate_story(format!("{name}-{i:05}"), cfg, &characters, &mut r))
            .collect()
    };
    let train = split("train", cfg.train_stories)?;
    let val = split("val", cfg.val_stories)?;
    let test = split("test", cfg.test_stories)?;
    Ok(Dataset {
        characters,
        train,
        val,
        test,
    })
}
