//! Caption augmentation: every story's captions go to a chat-completion
//! service (or an offline stand-in) as one numbered prompt, and the numbered
//! reply becomes one alternative caption per frame in a sidecar file.
//! Only caption text is ever sent.

mod client;
mod offline;
mod parse;
mod prompt;
mod run;

use thiserror::Error;

pub use client::{extract_reply, request_augmentations, HttpBackend, LlmEndpointConfig};
pub use offline::{paraphrase, FixtureBackend, TemplateBackend};
pub use parse::parse_numbered_response;
pub use prompt::{build_prompt, AugmentPrompt, CORRECTIVE_INSTRUCTION};
pub use run::{augment_story, run_augmentation, CoverageReport, RunOptions};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation config: {0}")]
    Config(String),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("unparseable reply: {reason}")]
    Parse { reason: String, raw: String },
    #[error("endpoint rejected the credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Response(String),
    #[error("fixture {path}: {reason}")]
    Fixture { path: String, reason: String },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// Something that answers an augmentation prompt with reply text.
/// `corrective` marks the second request after an unparseable reply.
pub trait Backend: Sync {
    fn complete(&self, story_id: &str, prompt: &AugmentPrompt, corrective: bool) -> Result<String>;
}
