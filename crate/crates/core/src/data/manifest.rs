//! Line-delimited JSON manifests and augmented-caption sidecars.
//!
//! A manifest starts with one header line naming the characters (and
//! optionally a sidecar file), followed by one record per story:
//!
//! ```text
//! {"characters":[{"name":"Alpha"},...],"augmented_captions":"aug.jsonl"}
//! {"story_id":"train-00000","captions":[...],"image_paths":["images/train-00000_0.png",...]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, read_png, write_png, Character, CharacterSet, DataError, Result, StorySample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub characters: Vec<Character>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented_captions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub story_id: String,
    pub captions: Vec<String>,
    pub image_paths: Vec<String>,
}

/// One augmented caption, keyed by story and frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugRecord {
    pub story_id: String,
    pub frame_index: usize,
    pub text: String,
}

fn record_err(path: &Path, line: usize, reason: impl Into<String>) -> DataError {
    DataError::Record {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Writes frames as PNG under `dir/images/` and the manifest to `dir/<name>.jsonl`.
pub fn write_manifest(
    dir: &Path,
    name: &str,
    stories: &[StorySample],
    characters: &CharacterSet,
    sidecar: Option<&str>,
) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut out = String::new();
    let header = ManifestHeader {
        characters: characters.iter().cloned().collect(),
        augmented_captions: sidecar.map(str::to_string),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for story in stories {
        let mut image_paths = Vec::with_capacity(story.len());
        for (i, img) in story.images.iter().enumerate() {
            let rel = format!("images/{}_{i}.png", story.story_id);
            write_png(&dir.join(&rel), img)?;
            image_paths.push(rel);
        }
        let rec = ManifestRecord {
            story_id: story.story_id.clone(),
            captions: story.captions.clone(),
            image_paths,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(&path, out).map_err(io_err(&path))?;
    Ok(path)
}

/// Loads and validates a manifest, its images and (if referenced) its sidecar.
pub fn load_manifest(path: &Path) -> Result<(CharacterSet, Vec<StorySample>)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: ManifestHeader = loop {
        match lines.next() {
            None => return Err(record_err(path, 1, "missing header line")),
            Some((i, line)) => {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| record_err(path, i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    let characters = CharacterSet::new(header.characters).map_err(|e| record_err(path, 1, e.to_string()))?;
    let mut stories = Vec::new();
    let mut seen = HashSet::new();
    let mut story_len = None;
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| record_err(path, lineno, e.to_string()))?;
        if rec.captions.len() != rec.image_paths.len() {
            return Err(record_err(
                path,
                lineno,
                format!("{} captions but {} images", rec.captions.len(), rec.image_paths.len()),
            ));
        }
        if rec.captions.is_empty() {
            return Err(record_err(path, lineno, "story has no frames"));
        }
        if *story_len.get_or_insert(rec.captions.len()) != rec.captions.len() {
            return Err(record_err(path, lineno, "stories must all have the same length"));
        }
        if !seen.insert(rec.story_id.clone()) {
            return Err(record_err(path, lineno, format!("duplicate story_id `{}`", rec.story_id)));
        }
        let images = rec
            .image_paths
            .iter()
            .map(|p| read_png(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if images.iter().any(|im| im.size() != images[0].size()) {
            return Err(record_err(path, lineno, "frames differ in size"));
        }
        stories.push(StorySample::new(rec.story_id, rec.captions, images, &characters)?);
    }
    if let Some(side) = header.augmented_captions {
        let records = load_sidecar(&base.join(side))?;
        attach_augmentations(&mut stories, &records);
    }
    Ok((characters, stories))
}

/// Sets `aug_captions` on every story whose frames are all covered.
pub fn attach_augmentations(stories: &mut [StorySample], records: &[AugRecord]) {
    let mut by_story: BTreeMap<&str, BTreeMap<usize, &str>> = BTreeMap::new();
    for r in records {
        by_story.entry(&r.story_id).or_default().insert(r.frame_index, &r.text);
    }
    for story in stories {
        story.aug_captions = by_story.get(story.story_id.as_str()).and_then(|frames| {
            (0..story.len())
                .map(|i| frames.get(&i).map(|t| t.to_string()))
                .collect::<Option<Vec<_>>>()
        });
    }
}

/// Reads a sidecar, rejecting duplicate `(story_id, frame_index)` keys.
pub fn load_sidecar(path: &Path) -> Result<Vec<AugRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AugRecord = serde_json::from_str(line).map_err(|e| record_err(path, i + 1, e.to_string()))?;
        if !seen.insert((rec.story_id.clone(), rec.frame_index)) {
            return Err(record_err(
                path,
                i + 1,
                format!("duplicate record for story `{}` frame {}", rec.story_id, rec.frame_index),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_sidecar(path: &Path, records: &[AugRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny() -> crate::data::Dataset {
        generate_synthetic(&SyntheticConfig {
            train_stories: 4,
            val_stories: 0,
            test_stories: 0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn write_then_load_is_identity() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "train", &data.train, &data.characters, None).unwrap();
        let (cs, stories) = load_manifest(&p).unwrap();
        assert_eq!(cs, data.characters);
        assert_eq!(stories, data.train);
    }

    #[test]
    fn mismatched_record_reports_line() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "train", &data.train, &data.characters, None).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: ManifestRecord = serde_json::from_str(&lines[2]).unwrap();
        rec.captions.pop();
        lines[2] = serde_json::to_string(&rec).unwrap();
        fs::write(&p, lines.join("\n")).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, DataError::Record { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("4 captions but 5 images"));
    }

    #[test]
    fn missing_image_names_path() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "train", &data.train, &data.characters, None).unwrap();
        fs::remove_file(dir.path().join("images/train-00001_3.png")).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("train-00001_3.png"), "{err}");
    }

    #[test]
    fn sidecar_populates_every_story() {
        let data = tiny();
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<AugRecord> = data
            .train
            .iter()
            .flat_map(|s| {
                (0..s.len()).map(move |i| AugRecord {
                    story_id: s.story_id.clone(),
                    frame_index: i,
                    text: format!("retold: {}", s.captions[i]),
                })
            })
            .collect();
        write_sidecar(&dir.path().join("aug.jsonl"), &records).unwrap();
        let p = write_manifest(dir.path(), "train", &data.train, &data.characters, Some("aug.jsonl")).unwrap();
        let (_, stories) = load_manifest(&p).unwrap();
        for s in &stories {
            let aug = s.aug_captions.as_ref().expect("augmented");
            assert_eq!(aug[2], format!("retold: {}", s.captions[2]));
        }
    }

    #[test]
    fn sidecar_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = AugRecord {
            story_id: "a".into(),
            frame_index: 0,
            text: "x".into(),
        };
        let p = dir.path().join("aug.jsonl");
        write_sidecar(&p, &[r.clone(), r]).unwrap();
        assert!(load_sidecar(&p).is_err());
    }
}
