// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

/// Exit-code class of a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: Kind,
    pub key: Option<String>,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            key: Some(key.into()),
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            key: None,
            message: message.into(),
        }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key.get_or_insert_with(|| key.into());
        self
    }

    /// Single-line JSON form written to stderr.
    pub fn to_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("error".into(), self.kind.as_str().into());
        if let Some(k) = &self.key {
            obj.insert("key".into(), k.clone().into());
        }
        obj.insert("message".into(), self.message.clone().into());
        serde_json::Value::Object(obj).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{} error at {k}: {}", self.kind.as_str(), self.message),
            None => write!(f, "{} error: {}", self.kind.as_str(), self.message),
        }
    }
}

impl From<stitchkit::Error> for CliError {
    fn from(e: stitchkit::Error) -> Self {
        use stitchkit::Error as E;
        let kind = match &e {
            E::Validation(_) => Kind::Config,
            E::Numerical(_) => Kind::Numerical,
            _ => Kind::Data,
        };
        Self {
            kind,
            key: None,
            message: e.to_string(),
        }
    }
}
