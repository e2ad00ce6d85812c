//! Lexical path handling for exported trees.

use super::proto::FsErrorCode;

/// Splits `path` into components with "." and ".." collapsed. Leading and
/// repeated slashes are ignored, so "a/b" and "/a//b/" are the same path.
/// A ".." that would climb above the root is reported as not-found, as is any
/// component containing NUL.
pub fn normalize(path: &str) -> Result<Vec<String>, FsErrorCode> {
    let mut parts: Vec<String> = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(FsErrorCode::NotFound);
                }
            }
            name if name.contains('\0') => return Err(FsErrorCode::NotFound),
            name => parts.push(name.to_string()),
        }
    }
    Ok(parts)
}

/// Absolute text form of normalized components.
pub fn join(parts: &[String]) -> String {
    format!("/{}", parts.join("/"))
}
