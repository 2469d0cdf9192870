//! Plain-text `key = value` files. Blank lines and `#` comments are ignored.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Config {
                line,
                message: format!("expected key=value, got {body:?}"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                message: "empty key".into(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::Config {
                line,
                message: format!("duplicate key {key:?}"),
            });
        }
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    parse(&std::fs::read_to_string(path)?)
}

impl Entry {
    pub fn parse_value<T: FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: T::Err| Error::Config {
            line: self.line,
            message: format!("bad value {:?} for {}: {e}", self.value, self.key),
        })
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            message: message.into(),
        }
    }
}
