//! `--set key=value` overrides applied to a TOML config before parsing.

use anyhow::{anyhow, bail, Result};
use toml::{Table, Value};

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets the dotted `key` (e.g. `loss.margin`) in `table`, creating tables on the way.
pub fn set(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key {key:?}");
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!("{p} in {key:?} is not a table"))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Applies `key=value` pairs in order.
pub fn apply(table: &mut Table, pairs: &[String]) -> Result<()> {
    for pair in pairs {
        let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {pair:?}"))?;
        set(table, k.trim(), v.trim())?;
    }
    Ok(())
}
