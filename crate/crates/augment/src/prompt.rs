use maskgst::data::{Character, CharacterSet};
use serde::{Deserialize, Serialize};

use crate::{AugmentError, Result};

/// Appended to the user message when a response could not be parsed.
pub const CORRECTIVE_INSTRUCTION: &str =
    "Your previous reply could not be read. Reply with exactly one line per caption, numbered 1. to N. in the same order, and nothing else.";

const ROLE: &str = "You are a caption augmentation assistant for a picture-story dataset. \
You receive the numbered captions of one story. For each caption write one alternative caption \
that keeps its meaning, keeps every character name exactly as written, and does not add or \
remove characters. Reply with the alternative captions numbered in the same way, one per line.";

/// A system message (role and character dossier) and the numbered captions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPrompt {
    pub system_message: String,
    pub user_message: String,
    /// Number of captions in the user message.
    pub n: usize,
}

impl AugmentPrompt {
    /// The user message followed by the corrective instruction.
    pub fn corrected_user_message(&self) -> String {
        format!(
            "{}\n\n{}",
            self.user_message,
            CORRECTIVE_INSTRUCTION.replace("N.", &format!("{}.", self.n))
        )
    }
}

const QUADRANTS: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];

fn describe(c: &Character) -> String {
    let [r, g, b] = c.color;
    let q = QUADRANTS[c.eye_quadrant as usize % 4];
    format!("{}: a recurring character drawn as a #{r:02x}{g:02x}{b:02x} figure with its eye in the {q}.", c.name)
}

/// Builds the prompt for one story. The output depends only on the inputs.
pub fn build_prompt<S: AsRef<str>>(captions: &[S], characters: &CharacterSet) -> Result<AugmentPrompt> {
    if captions.is_empty() {
        return Err(AugmentError::Prompt("a story needs at least one caption".into()));
    }
    let mut user = String::new();
    for (i, c) in captions.iter().enumerate() {
        let c = c.as_ref().trim();
        if c.is_empty() {
            return Err(AugmentError::Prompt(format!("caption {} is empty", i + 1)));
        }
        if c.contains('\n') {
            return Err(AugmentError::Prompt(format!("caption {} spans several lines", i + 1)));
        }
        if i > 0 {
            user.push('\n');
        }
        user.push_str(&format!("{}.{c}", i + 1));
    }
    let mut system = format!("{ROLE}\n\nCharacters:");
    for c in characters.iter() {
        system.push('\n');
        system.push_str(&describe(c));
    }
    Ok(AugmentPrompt {
        system_message: system,
        user_message: user,
        n: captions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_lines_and_full_dossier() {
        let cs = CharacterSet::standard();
        let caps = ["a", "b", "c", "d", "e"];
        let p = build_prompt(&caps, &cs).unwrap();
        let lines: Vec<&str> = p.user_message.lines().collect();
        assert_eq!(lines, ["1.a", "2.b", "3.c", "4.d", "5.e"]);
        for name in cs.names() {
            assert_eq!(p.system_message.lines().filter(|l| l.starts_with(&format!("{name}:"))).count(), 1);
        }
        assert_eq!(build_prompt(&caps, &cs).unwrap(), p);
        assert!(p.corrected_user_message().contains("1. to 5."));
    }

    #[test]
    fn single_and_invalid_captions() {
        let cs = CharacterSet::standard();
        assert_eq!(build_prompt(&["only"], &cs).unwrap().user_message, "1.only");
        assert!(build_prompt::<&str>(&[], &cs).is_err());
        assert!(build_prompt(&["ok", "  "], &cs).is_err());
    }
}
