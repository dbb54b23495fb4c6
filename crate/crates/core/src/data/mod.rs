//! Behavior logs: ingestion, vocabulary, window splitting, and the
//! planted-topic synthetic generator.

mod dataset;
mod synth;
mod vocab;
mod window;

pub use dataset::{
    prepare_users, read_jsonl, read_labels, write_jsonl, write_labels, Payload, RawBehavior, UserLog,
};
pub use synth::{generate_synthetic, token_name, SyntheticConfig, SyntheticDataset};
pub use vocab::{encode_behavior_text, encode_tokens, tokenize, Vocabulary, UNKNOWN_ID, UNKNOWN_TOKEN};
pub use window::{window_split, Behavior, Interval, Mode, Truncation, WindowBounds, WindowedUser};
