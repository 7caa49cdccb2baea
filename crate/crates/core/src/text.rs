//! Small helpers for the line-oriented text formats.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// The `key=value` fields of one manifest line, in order.
pub(crate) struct Fields<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    pub fn parse(line: usize, text: &'a str) -> Result<Self> {
        let pairs = text
            .split_whitespace()
            .map(|tok| {
                tok.split_once('=')
                    .ok_or_else(|| Error::Load(format!("line {line}: expected key=value, got `{tok}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Fields { line, pairs })
    }

    pub fn str(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Load(format!("line {}: missing `{key}=`", self.line)))
    }

    pub fn num<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self.str(key)?;
        v.parse().map_err(|_| Error::Load(format!("line {}: bad value `{v}` for `{key}`", self.line)))
    }

    pub fn path(&self, key: &str, base: &Path) -> Result<PathBuf> {
        Ok(resolve(base, self.str(key)?))
    }
}

/// Non-empty, non-comment lines with 1-based line numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
