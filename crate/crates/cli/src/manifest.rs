//! Tab-separated dataset listings: `path<TAB>label<TAB>split`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// As written in the manifest.
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Relative entry paths resolve against this directory.
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    /// Parses manifest text. Blank lines and lines starting with `#` are
    /// skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            let [path, label, split] = fields[..] else {
                return Err(CliError::Data(format!(
                    "manifest line {lineno}: expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            };
            let (path, label) = (path.trim(), label.trim());
            if path.is_empty() || label.is_empty() {
                return Err(CliError::Data(format!("manifest line {lineno}: empty path or label")));
            }
            let split = match split.trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(CliError::Data(format!(
                        "manifest line {lineno}: split must be 'train' or 'test', got '{other}'"
                    )))
                }
            };
            if !seen.insert(path.to_string()) {
                return Err(CliError::Data(format!("manifest line {lineno}: duplicate path '{path}'")));
            }
            entries.push(Entry {
                path: path.to_string(),
                label: label.to_string(),
                split,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Train entries, or a data error when there are none.
    pub fn training(&self) -> Result<Vec<&Entry>> {
        let train = self.split(Split::Train);
        if train.is_empty() {
            return Err(CliError::Data("manifest has no train entries".into()));
        }
        Ok(train)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.path, e.label, e.split))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let m = DatasetManifest::parse("# header\na.pgm\tcat\ttrain\n\nsub/b.pgm\tdog\ttest\n", "/data").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/data/sub/b.pgm"));
        assert_eq!(m.training().unwrap().len(), 1);
        assert_eq!(DatasetManifest::parse(&m.to_text(), "/data").unwrap(), m);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in [
            "a.pgm\tcat\n",
            "a.pgm\t\ttrain\n",
            "a.pgm\tcat\tval\n",
            "a.pgm\tcat\ttrain\na.pgm\tdog\ttest\n",
        ] {
            assert!(matches!(DatasetManifest::parse(text, "."), Err(CliError::Data(_))), "{text:?}");
        }
        let only_test = DatasetManifest::parse("a.pgm\tcat\ttest\n", ".").unwrap();
        assert!(only_test.training().is_err());
    }
}
