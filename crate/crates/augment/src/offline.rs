use std::path::PathBuf;

use crate::{parse_numbered_response, AugmentError, AugmentPrompt, Backend, Result};

/// Canned replies read from `{dir}/{story_id}.txt`. A corrective request
/// reads `{story_id}.retry.txt` when present.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    dir: PathBuf,
}

impl FixtureBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Backend for FixtureBackend {
    fn complete(&self, story_id: &str, _prompt: &AugmentPrompt, corrective: bool) -> Result<String> {
        let retry = self.dir.join(format!("{story_id}.retry.txt"));
        let path = if corrective && retry.exists() {
            retry
        } else {
            self.dir.join(format!("{story_id}.txt"))
        };
        std::fs::read_to_string(&path).map_err(|e| AugmentError::Fixture {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

const PHRASES: [(&str, &str); 22] = [
    ("Later, ", "Some time later, "),
    ("Then ", "After that, "),
    ("Now ", "At this point "),
    ("At the ", "Over at the "),
    (" near the ", " close to the "),
    (" at the ", " by the "),
    (" again", " once more"),
    (" jumps", " leaps"),
    (" jump", " leap"),
    (" waves", " waves hello"),
    (" wave", " wave hello"),
    (" runs", " dashes"),
    (" run", " dash"),
    (" sings", " sings a song"),
    (" sing", " sing a song"),
    (" laughs", " giggles"),
    (" laugh", " giggle"),
    (" sleeps", " naps"),
    (" sleep", " nap"),
    (" reads a book", " looks through a book"),
    (" eats lunch", " has lunch"),
    (" plays a game", " enjoys a game"),
];

/// Rule-based paraphrase: phrase substitutions applied left to right
/// without rewriting replaced text, or a framing prefix when no rule fires.
pub fn paraphrase(caption: &str) -> String {
    let mut out = String::with_capacity(caption.len() + 16);
    let mut rest = caption;
    let mut changed = false;
    'outer: while !rest.is_empty() {
        for (from, to) in PHRASES {
            if let Some(tail) = rest.strip_prefix(from) {
                let at_boundary = tail.chars().next().is_none_or(|c| !c.is_alphanumeric());
                if at_boundary || from.ends_with(' ') {
                    out.push_str(to);
                    rest = tail;
                    changed = true;
                    continue 'outer;
                }
            }
        }
        let c = rest.chars().next().expect("nonempty");
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    if changed {
        out
    } else {
        format!("In this scene, {caption}")
    }
}

/// Offline augmenter answering in the numbered reply format.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateBackend;

impl Backend for TemplateBackend {
    fn complete(&self, _story_id: &str, prompt: &AugmentPrompt, _corrective: bool) -> Result<String> {
        let captions = parse_numbered_response(&prompt.user_message, prompt.n)?;
        Ok(captions
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, paraphrase(c)))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paraphrases_keep_names() {
        assert_eq!(paraphrase("Then Alpha and Beta jump."), "After that, Alpha and Beta leap.");
        assert_eq!(paraphrase("Alpha runs at the beach."), "Alpha dashes by the beach.");
        assert_eq!(paraphrase("Alpha jumpstarts."), "In this scene, Alpha jumpstarts.");
        assert_eq!(paraphrase("Now Delta sleeps again."), "At this point Delta naps once more.");
    }
}
