use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskgst::data::{write_png_raw, Image};

/// Nearest-neighbour upscaling applied to every frame.
pub const SCALE: usize = 4;
/// White gap between frames, in output pixels.
pub const GAP: usize = 4;

/// Lays out one row per story and one column per frame in a single PNG and
/// writes the captions to a `.txt` file next to it. Returns the text path.
pub fn render_frame_grid(stories: &[Vec<Image>], captions: &[Vec<String>], out: &Path) -> Result<PathBuf> {
    if stories.is_empty() {
        bail!("no stories to render");
    }
    if captions.len() != stories.len() {
        bail!("{} caption lists for {} stories", captions.len(), stories.len());
    }
    let size = stories[0].first().context("story without frames")?.size();
    let cols = stories.iter().map(Vec::len).max().unwrap_or(0);
    for (i, s) in stories.iter().enumerate() {
        if s.iter().any(|f| f.size() != size) {
            bail!("story {i} mixes frame sizes");
        }
        if captions[i].len() != s.len() {
            bail!("story {i}: {} captions for {} frames", captions[i].len(), s.len());
        }
    }
    let cell = size * SCALE;
    let width = cols * cell + (cols + 1) * GAP;
    let height = stories.len() * cell + (stories.len() + 1) * GAP;
    let mut rgb = vec![255u8; width * height * 3];
    for (row, story) in stories.iter().enumerate() {
        for (col, frame) in story.iter().enumerate() {
            let (oy, ox) = (GAP + row * (cell + GAP), GAP + col * (cell + GAP));
            for y in 0..cell {
                for x in 0..cell {
                    let px = frame.pixel(y / SCALE, x / SCALE);
                    let at = ((oy + y) * width + ox + x) * 3;
                    rgb[at..at + 3].copy_from_slice(&px);
                }
            }
        }
    }
    write_png_raw(out, width as u32, height as u32, &rgb).with_context(|| format!("writing {}", out.display()))?;
    let mut text = String::new();
    for (i, caps) in captions.iter().enumerate() {
        writeln!(text, "story {}", i + 1).unwrap();
        for (j, c) in caps.iter().enumerate() {
            writeln!(text, "  {}. {c}", j + 1).unwrap();
        }
    }
    let txt = out.with_extension("txt");
    std::fs::write(&txt, text).with_context(|| format!("writing {}", txt.display()))?;
    Ok(txt)
}
