use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic name {0:?} contains a wildcard")]
    WildcardInName(String),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("topic contains a NUL character")]
    Nul,
}

/// A concrete topic a message is published to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        if s.is_empty() {
            return Err(TopicError::Empty);
        }
        if s.contains('\0') {
            return Err(TopicError::Nul);
        }
        if s.contains(['+', '#']) {
            return Err(TopicError::WildcardInName(s));
        }
        Ok(TopicName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Level {
    Exact(String),
    /// `+`
    Single,
    /// `#`, only ever last
    Multi,
}

/// A subscription pattern; `+` matches one level, a trailing `#` the rest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<Level>,
}

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let raw = s.into();
        if raw.is_empty() {
            return Err(TopicError::Empty);
        }
        if raw.contains('\0') {
            return Err(TopicError::Nul);
        }
        let parts: Vec<&str> = raw.split('/').collect();
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "+" => Level::Single,
                "#" if i == parts.len() - 1 => Level::Multi,
                p if p.contains(['+', '#']) => return Err(TopicError::InvalidFilter(raw)),
                p => Level::Exact(p.to_string()),
            };
            levels.push(level);
        }
        Ok(TopicFilter { raw, levels })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        match_topic(self, topic)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Standard MQTT matching. Topics starting with `$` are not matched by a
/// leading wildcard.
pub fn match_topic(filter: &TopicFilter, topic: &TopicName) -> bool {
    if topic.as_str().starts_with('$') && matches!(filter.levels.first(), Some(Level::Single | Level::Multi)) {
        return false;
    }
    let mut names = topic.levels();
    for level in &filter.levels {
        match level {
            Level::Multi => return true,
            Level::Single => {
                if names.next().is_none() {
                    return false;
                }
            }
            Level::Exact(want) => match names.next() {
                Some(got) if got == want => {}
                _ => return false,
            },
        }
    }
    names.next().is_none()
}
