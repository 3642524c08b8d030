use std::path::Path;

use sha2::{Digest, Sha256};

use super::SearchSpace;
use crate::error::{Error, Result};

/// Byte offset to 1-based (line, column).
pub(crate) fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Deserializes any TOML document, mapping errors to [`Error::Parse`] with
/// line and column.
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_owned(),
        location: e.span().map(|s| line_col(text, s.start)),
        message: e.message().to_owned(),
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses and validates a search-space document.
pub fn parse_space(text: &str, origin: &str) -> Result<SearchSpace> {
    let space: SearchSpace = parse_toml(text, origin)?;
    space.validate()?;
    Ok(space)
}

pub fn load_space(path: impl AsRef<Path>) -> Result<SearchSpace> {
    let path = path.as_ref();
    parse_space(&read_text(path)?, &path.display().to_string())
}

/// Stable 64-bit digest of the canonical serialization of a space. Comments
/// and formatting in the source file do not affect it.
pub fn space_hash(space: &SearchSpace) -> u64 {
    let canonical = toml::to_string(space).expect("search space serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
