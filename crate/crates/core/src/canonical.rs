//! Canonical JSON: object keys sorted, no insignificant whitespace.
//!
//! Every persisted artifact (chromosomes, checkpoints, exported networks) goes
//! through here so that equal values always serialize to equal bytes.

use serde::Serialize;

pub fn to_canonical_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<serde_json::Value> {
    // `serde_json::Map` is a BTreeMap unless `preserve_order` is enabled,
    // which this crate never does.
    serde_json::to_value(value)
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&to_canonical_value(value)?)
}

pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    Ok(to_canonical_string(value)?.into_bytes())
}
