//! JSON encoding of tensors that round-trips bit-exactly.
//!
//! Floats are written with 17 significant digits, which is enough to
//! reconstruct every finite `f64` exactly.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Formats a finite float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `{"shape":[..],"data":[..]}` as a raw JSON fragment.
pub fn tensor_to_raw(t: &Tensor) -> Result<Box<RawValue>> {
    t.check_finite("serialized tensor")?;
    let mut s = String::with_capacity(32 + t.numel() * 24);
    s.push_str("{\"shape\":");
    s.push_str(&serde_json::to_string(t.shape())?);
    s.push_str(",\"data\":[");
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&fmt_f64(*v));
    }
    s.push_str("]}");
    Ok(RawValue::from_string(s)?)
}

#[derive(Deserialize, Serialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn tensor_from_raw(raw: &RawValue) -> Result<Tensor> {
    let r: TensorRepr = serde_json::from_str(raw.get())?;
    Tensor::new(r.shape, r.data)
}

/// Serializes a named map of tensors as one JSON object.
pub fn tensor_map_to_string<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut map = IndexMap::new();
    for (k, t) in entries {
        map.insert(k.to_string(), tensor_to_raw(t)?);
    }
    Ok(serde_json::to_string(&map)?)
}

pub fn tensor_map_from_str(s: &str) -> Result<IndexMap<String, Tensor>> {
    let raw: IndexMap<String, Box<RawValue>> = serde_json::from_str(s)?;
    raw.into_iter()
        .map(|(k, v)| {
            let t = tensor_from_raw(&v).map_err(|e| Error::data(format!("tensor `{k}`: {e}")))?;
            Ok((k, t))
        })
        .collect()
}
