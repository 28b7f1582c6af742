use super::CharacterSet;

/// Bit `c` is set iff character `c`'s name occurs in `caption` as a whole
/// word, compared case-insensitively. Word characters are alphanumerics.
pub fn character_presence(caption: &str, characters: &CharacterSet) -> Vec<bool> {
    let words: Vec<String> = caption
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    characters
        .iter()
        .map(|c| {
            let name = c.name.to_lowercase();
            words.iter().any(|w| *w == name)
        })
        .collect()
}
