use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use maskgst::data::{AugRecord, CharacterSet, StorySample};

use crate::{build_prompt, parse_numbered_response, AugmentError, Backend, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Stories in flight at once.
    pub concurrency: usize,
    /// Keep complete stories already in the sidecar and skip them.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            resume: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoverageReport {
    pub stories: usize,
    /// Complete stories found in the sidecar before this run.
    pub skipped: usize,
    pub augmented: usize,
    pub failed: Vec<String>,
}

impl CoverageReport {
    /// Fraction of stories fully covered by the sidecar.
    pub fn coverage(&self) -> f64 {
        if self.stories == 0 {
            1.0
        } else {
            (self.skipped + self.augmented) as f64 / self.stories as f64
        }
    }
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "augmented {} of {} stories ({:.1}% covered; {} already present, {} failed)",
            self.augmented,
            self.stories,
            100.0 * self.coverage(),
            self.skipped,
            self.failed.len()
        )
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> AugmentError + '_ {
    move |source| AugmentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Complete stories already in `path`. A torn last line and stories with
/// missing frames are dropped and the file is rewritten without them.
fn recover_existing(path: &Path, stories: &[StorySample]) -> Result<HashSet<String>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let text = fs::read_to_string(path).map_err(io(path))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut by_story: BTreeMap<String, BTreeMap<usize, AugRecord>> = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<AugRecord>(line) {
            Ok(r) => {
                by_story.entry(r.story_id.clone()).or_default().insert(r.frame_index, r);
            }
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("{}: dropping incomplete last line", path.display());
            }
            Err(e) => {
                return Err(AugmentError::Sidecar(format!("{}:{}: {e}", path.display(), i + 1)));
            }
        }
    }
    let lengths: BTreeMap<&str, usize> = stories.iter().map(|s| (s.story_id.as_str(), s.len())).collect();
    let mut keep = Vec::new();
    let mut done = HashSet::new();
    for (id, frames) in by_story {
        let complete = lengths.get(id.as_str()).is_some_and(|&n| (0..n).all(|k| frames.contains_key(&k)) && frames.len() == n);
        if complete {
            keep.extend(frames.into_values());
            done.insert(id);
        }
    }
    let mut out = String::new();
    for r in &keep {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    if out != text {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &out).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))?;
    }
    Ok(done)
}

/// Augments one story, retrying once with a corrective instruction when
/// the reply cannot be parsed.
pub fn augment_story(backend: &dyn Backend, story: &StorySample, characters: &CharacterSet) -> Result<Vec<String>> {
    let prompt = build_prompt(&story.captions, characters)?;
    let first = backend.complete(&story.story_id, &prompt, false)?;
    match parse_numbered_response(&first, prompt.n) {
        Ok(c) => Ok(c),
        Err(e) => {
            log::warn!("story {}: {e}; retrying with a corrective instruction", story.story_id);
            let second = backend.complete(&story.story_id, &prompt, true)?;
            parse_numbered_response(&second, prompt.n)
        }
    }
}

/// Writes one augmented caption per (story, frame) to the sidecar at `out`.
/// Requests run on `concurrency` workers; a single writer appends each
/// finished story. Failed stories are logged and left out.
pub fn run_augmentation(
    stories: &[StorySample],
    characters: &CharacterSet,
    backend: &dyn Backend,
    out: &Path,
    opts: RunOptions,
) -> Result<CoverageReport> {
    let done = if opts.resume {
        recover_existing(out, stories)?
    } else {
        HashSet::new()
    };
    let mut file = OpenOptions::new()
        .create(true)
        .append(opts.resume)
        .write(true)
        .truncate(!opts.resume)
        .open(out)
        .map_err(io(out))?;
    let todo: Vec<&StorySample> = stories.iter().filter(|s| !done.contains(&s.story_id)).collect();
    let mut report = CoverageReport {
        stories: stories.len(),
        skipped: stories.len() - todo.len(),
        ..Default::default()
    };
    let workers = opts.concurrency.clamp(1, todo.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<Vec<String>>)>(workers);
    let mut write_err = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, todo) = (&next, &todo);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(story) = todo.get(i) else { break };
                if tx.send((i, augment_story(backend, story, characters))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, res) in rx {
            let story = todo[i];
            match res {
                Ok(captions) if write_err.is_none() => {
                    let mut block = String::new();
                    for (frame_index, text) in captions.into_iter().enumerate() {
                        let r = AugRecord {
                            story_id: story.story_id.clone(),
                            frame_index,
                            text,
                        };
                        block.push_str(&serde_json::to_string(&r).expect("record serializes"));
                        block.push('\n');
                    }
                    match file.write_all(block.as_bytes()).and_then(|_| file.flush()) {
                        Ok(()) => report.augmented += 1,
                        Err(e) => {
                            write_err = Some(e);
                            next.store(usize::MAX / 2, Ordering::Relaxed);
                        }
                    }
                }
                Ok(_) => {}
                Err(e) => {
                    log::warn!("story {} skipped: {e}", story.story_id);
                    report.failed.push(story.story_id.clone());
                }
            }
        }
    });
    if let Some(e) = write_err {
        return Err(io(out)(e));
    }
    report.failed.sort();
    Ok(report)
}
