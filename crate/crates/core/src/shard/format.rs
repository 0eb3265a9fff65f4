//! Binary shard layout (all integers little-endian):
//!
//! ```text
//! offset  size         field
//! 0       8            magic "CRTPRB01"
//! 8       4            header_len: u32
//! 12      header_len   UTF-8 JSON header
//! 12+hl   payload      num_records * hidden_dim f32 values, row-major
//! ```
//!
//! The JSON header carries the [`ShardHeader`] fields, the declared
//! `payload_bytes`, and the per-record `example_ids` and `labels` arrays.
//! A file is accepted only if its total length is exactly
//! `12 + header_len + payload_bytes` and every declared length agrees.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{validate, ActivationRecord, ActivationShard, Dtype, Label, LabelSemantics, ShardHeader, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CRTPRB01";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE_LEN: usize = MAGIC.len() + 4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderBlock {
    format_version: u32,
    model_id: String,
    dataset_id: String,
    split: Split,
    layer_index: usize,
    hidden_dim: usize,
    num_records: usize,
    dtype: Dtype,
    label_semantics: LabelSemantics,
    payload_bytes: u64,
    example_ids: Vec<String>,
    labels: Vec<u8>,
}

/// Serializes a shard to its file representation.
pub fn encode_shard(header: &ShardHeader, records: &[ActivationRecord]) -> Result<Vec<u8>> {
    validate(header, records)?;
    let payload_bytes = header
        .payload_bytes()
        .ok_or_else(|| Error::MalformedHeader("payload length overflows u64".into()))?;
    let block = HeaderBlock {
        format_version: header.format_version,
        model_id: header.model_id.clone(),
        dataset_id: header.dataset_id.clone(),
        split: header.split,
        layer_index: header.layer_index,
        hidden_dim: header.hidden_dim,
        num_records: header.num_records,
        dtype: header.dtype,
        label_semantics: header.label_semantics,
        payload_bytes,
        example_ids: records.iter().map(|r| r.example_id.clone()).collect(),
        labels: records.iter().map(|r| r.label.bit()).collect(),
    };
    let json = serde_json::to_vec(&block).map_err(|e| Error::json("shard header", e))?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::MalformedHeader("header longer than u32::MAX bytes".into()))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + payload_bytes as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for record in records {
        for v in &record.hidden_state {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates the file representation of a shard.
pub fn decode_shard(bytes: &[u8]) -> Result<ActivationShard> {
    let magic_len = bytes.len().min(MAGIC.len());
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(Error::BadMagic {
            found: bytes[..magic_len].to_vec(),
        });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::TruncatedPayload {
            expected: PREAMBLE_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    let header_end = PREAMBLE_LEN + header_len;
    if bytes.len() < header_end {
        return Err(Error::TruncatedPayload {
            expected: header_end as u64,
            found: bytes.len() as u64,
        });
    }

    // Version is checked before the full schema so future layouts report
    // VersionUnsupported rather than a schema error.
    let value: Value = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    match value.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::VersionUnsupported(v.min(u32::MAX as u64) as u32)),
        None => return Err(Error::MalformedHeader("missing format_version".into())),
    }
    let block: HeaderBlock = serde_json::from_value(value)
        .map_err(|e| Error::MalformedHeader(format!("header schema: {e}")))?;

    if block.hidden_dim == 0 {
        return Err(Error::MalformedHeader("hidden_dim must be positive".into()));
    }
    let header = ShardHeader {
        format_version: block.format_version,
        model_id: block.model_id,
        dataset_id: block.dataset_id,
        split: block.split,
        layer_index: block.layer_index,
        hidden_dim: block.hidden_dim,
        num_records: block.num_records,
        dtype: block.dtype,
        label_semantics: block.label_semantics,
    };
    let expected_payload = header
        .payload_bytes()
        .ok_or_else(|| Error::MalformedHeader("payload length overflows u64".into()))?;
    if expected_payload != block.payload_bytes {
        return Err(Error::MalformedHeader(format!(
            "payload_bytes {} != num_records * hidden_dim * 4 = {}",
            block.payload_bytes, expected_payload
        )));
    }
    if block.example_ids.len() != header.num_records || block.labels.len() != header.num_records {
        return Err(Error::MalformedHeader(format!(
            "num_records {} but {} example ids and {} labels",
            header.num_records,
            block.example_ids.len(),
            block.labels.len()
        )));
    }

    let payload = &bytes[header_end..];
    if (payload.len() as u64) < expected_payload {
        return Err(Error::TruncatedPayload {
            expected: (header_end as u64) + expected_payload,
            found: bytes.len() as u64,
        });
    }
    if (payload.len() as u64) > expected_payload {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after payload",
            payload.len() as u64 - expected_payload
        )));
    }

    let dim = header.hidden_dim;
    let mut records = Vec::with_capacity(header.num_records);
    let rows = payload.chunks_exact(dim * 4);
    for (i, ((row, example_id), bit)) in rows
        .zip(block.example_ids)
        .zip(block.labels)
        .enumerate()
    {
        let label = Label::from_bit(bit)
            .ok_or_else(|| Error::MalformedHeader(format!("label {bit} of record {i} is not 0 or 1")))?;
        let hidden_state: Vec<f32> = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(j) = hidden_state.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { record: i, feature: j });
        }
        records.push(ActivationRecord {
            example_id,
            hidden_state,
            label,
        });
    }
    ActivationShard::new(header, records)
}

pub fn write_shard(header: &ShardHeader, records: &[ActivationRecord], path: &Path) -> Result<()> {
    let bytes = encode_shard(header, records)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<ActivationShard> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_shard(&bytes)
}
