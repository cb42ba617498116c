//! Flat `key=value` text files used for configs and manifests.

use std::collections::BTreeMap;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// later keys override earlier ones.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got `{line}`", lineno + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, String> {
    let raw = map.get(key).ok_or_else(|| format!("missing key `{key}`"))?;
    raw.parse()
        .map_err(|_| format!("key `{key}`: cannot parse `{raw}`"))
}
