use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which target window a model contrasts the history against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// History vs the near-future window.
    Short,
    /// History vs the long-horizon window.
    Long,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Mode::Short),
            "long" => Ok(Mode::Long),
            other => Err(Error::config(format!("unknown mode {other:?} (expected short|long)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Short => "short",
            Mode::Long => "long",
        })
    }
}

/// One encoded behavior: token ids (or a single structured id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Behavior {
    pub ts: i64,
    pub tokens: Vec<u32>,
}

/// Closed time interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
}

impl Interval {
    pub fn new(start: i64, end: i64) -> Self {
        Interval { start, end }
    }

    pub fn contains(&self, ts: i64) -> bool {
        self.start <= ts && ts <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowBounds {
    pub history: Interval,
    pub short: Interval,
    pub long: Interval,
}

impl WindowBounds {
    /// History first, then two target windows that start together; the
    /// short window is a prefix of the long one.
    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("history", self.history), ("short", self.short), ("long", self.long)] {
            if iv.start > iv.end {
                return Err(Error::config(format!("{name} window is empty: {iv:?}")));
            }
        }
        if self.history.end >= self.short.start || self.history.end >= self.long.start {
            return Err(Error::config(format!(
                "history window {:?} overlaps a target window (short {:?}, long {:?})",
                self.history, self.short, self.long
            )));
        }
        if self.short.start != self.long.start || self.short.end > self.long.end {
            return Err(Error::config(format!(
                "short window {:?} must be a prefix of the long window {:?}",
                self.short, self.long
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Truncation {
    /// Behaviors kept per window (the most recent ones).
    pub max_behaviors: usize,
    /// Words kept per behavior (the first ones).
    pub max_words: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            max_behaviors: 25,
            max_words: 35,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedUser {
    pub user_id: String,
    pub history: Vec<Behavior>,
    pub short: Vec<Behavior>,
    pub long: Vec<Behavior>,
}

impl WindowedUser {
    pub fn target(&self, mode: Mode) -> &[Behavior] {
        match mode {
            Mode::Short => &self.short,
            Mode::Long => &self.long,
        }
    }

    /// Both the history and the mode's target window are non-empty.
    pub fn eligible(&self, mode: Mode) -> bool {
        !self.history.is_empty() && !self.target(mode).is_empty()
    }
}

fn most_recent(mut v: Vec<Behavior>, keep: usize) -> Vec<Behavior> {
    if v.len() > keep {
        v.drain(..v.len() - keep);
    }
    v
}

/// Assign behaviors to windows by timestamp and keep the most recent
/// `max_behaviors` of each. Behaviors with no tokens are dropped.
pub fn window_split(
    user_id: &str,
    behaviors: &[Behavior],
    bounds: &WindowBounds,
    max_behaviors: usize,
) -> Result<WindowedUser> {
    bounds.validate()?;
    if max_behaviors == 0 {
        return Err(Error::config("max_behaviors must be positive"));
    }
    let mut sorted: Vec<&Behavior> = behaviors.iter().filter(|b| !b.tokens.is_empty()).collect();
    sorted.sort_by_key(|b| b.ts);
    let pick = |iv: Interval| -> Vec<Behavior> {
        sorted.iter().filter(|b| iv.contains(b.ts)).map(|b| (*b).clone()).collect()
    };
    Ok(WindowedUser {
        user_id: user_id.to_string(),
        history: most_recent(pick(bounds.history), max_behaviors),
        short: most_recent(pick(bounds.short), max_behaviors),
        long: most_recent(pick(bounds.long), max_behaviors),
    })
}
