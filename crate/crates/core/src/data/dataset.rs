use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{encode_tokens, Vocabulary};
use super::window::{window_split, Behavior, Truncation, WindowBounds, WindowedUser};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Tokens(Vec<String>),
    /// A structured id (item or category) used in place of text.
    Id(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawBehavior {
    pub ts: i64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserLog {
    pub user_id: String,
    pub behaviors: Vec<RawBehavior>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireBehavior {
    ts: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    tokens: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    id: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireUser {
    user_id: String,
    behaviors: Vec<WireBehavior>,
}

impl UserLog {
    fn from_wire(w: WireUser, line: usize) -> Result<Self> {
        let mut behaviors = Vec::with_capacity(w.behaviors.len());
        for b in w.behaviors {
            let payload = match (b.tokens, b.id) {
                (Some(t), None) => Payload::Tokens(t),
                (None, Some(id)) => Payload::Id(id),
                _ => {
                    return Err(Error::data(format!(
                        "line {line}: behavior at ts {} needs exactly one of \"tokens\" or \"id\"",
                        b.ts
                    )))
                }
            };
            behaviors.push(RawBehavior { ts: b.ts, payload });
        }
        let log = UserLog {
            user_id: w.user_id,
            behaviors,
        };
        log.check_uniform_payload()
            .map_err(|e| Error::data(format!("line {line}: {e}")))?;
        Ok(log)
    }

    fn to_wire(&self) -> WireUser {
        WireUser {
            user_id: self.user_id.clone(),
            behaviors: self
                .behaviors
                .iter()
                .map(|b| match &b.payload {
                    Payload::Tokens(t) => WireBehavior {
                        ts: b.ts,
                        tokens: Some(t.clone()),
                        id: None,
                    },
                    Payload::Id(id) => WireBehavior {
                        ts: b.ts,
                        tokens: None,
                        id: Some(id.clone()),
                    },
                })
                .collect(),
        }
    }

    /// A user's behaviors are either all token lists or all structured ids.
    pub fn check_uniform_payload(&self) -> Result<()> {
        let tokens = self.behaviors.iter().filter(|b| matches!(b.payload, Payload::Tokens(_))).count();
        if tokens != 0 && tokens != self.behaviors.len() {
            return Err(Error::data(format!(
                "user {} mixes token and id behaviors",
                self.user_id
            )));
        }
        Ok(())
    }

    /// Every vocabulary item this user contributes, in order.
    pub fn corpus_tokens(&self) -> impl Iterator<Item = &str> {
        self.behaviors.iter().flat_map(|b| match &b.payload {
            Payload::Tokens(t) => t.iter().map(String::as_str).collect::<Vec<_>>(),
            Payload::Id(id) => vec![id.as_str()],
        })
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<UserLog>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut users = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireUser = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        users.push(UserLog::from_wire(wire, i + 1)?);
    }
    Ok(users)
}

pub fn write_jsonl(path: &Path, users: &[UserLog]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in users {
        serde_json::to_writer(&mut w, &u.to_wire())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `user_id<TAB>label` per line.
pub fn write_labels(path: &Path, labels: &BTreeMap<String, usize>) -> Result<()> {
    let mut s = String::new();
    for (id, label) in labels {
        s.push_str(&format!("{id}\t{label}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("{}:{}: expected user_id<TAB>label", path.display(), i + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("{}:{}: bad label {label:?}", path.display(), i + 1)))?;
        out.insert(id.to_string(), label);
    }
    Ok(out)
}

/// Encode and window every user. Users keep their input order.
pub fn prepare_users(
    logs: &[UserLog],
    bounds: &WindowBounds,
    vocab: &Vocabulary,
    truncation: &Truncation,
) -> Result<Vec<WindowedUser>> {
    bounds.validate()?;
    logs.iter()
        .map(|log| {
            log.check_uniform_payload()?;
            let behaviors: Vec<Behavior> = log
                .behaviors
                .iter()
                .map(|b| Behavior {
                    ts: b.ts,
                    tokens: match &b.payload {
                        Payload::Tokens(t) => encode_tokens(t, vocab, truncation.max_words),
                        Payload::Id(id) => vec![vocab.id(id)],
                    },
                })
                .collect();
            window_split(&log.user_id, &behaviors, bounds, truncation.max_behaviors)
        })
        .collect()
}
