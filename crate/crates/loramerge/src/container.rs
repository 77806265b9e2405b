//! Binary tensor container: the on-disk format for adapters, merged deltas,
//! base weights, and probe sets.
//!
//! Layout (bit-exact): bytes 0-7 hold an unsigned 64-bit little-endian header
//! length `H`; bytes `8..8+H` hold a UTF-8 JSON object mapping tensor name to
//! `{"dtype": "F32"|"F16", "shape": [..], "data_offsets": [begin, end]}` with
//! offsets relative to the first byte after the header; the rest of the file
//! is the concatenated row-major little-endian tensor payloads. An optional
//! `"__metadata__"` string-to-string map is tolerated and preserved.
//!
//! Writers lay tensors out in name order, so identical contents always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{MergeError, Result};

pub const METADATA_KEY: &str = "__metadata__";

/// Storage precision of a tensor payload. Values are widened to f32 in
/// memory; f16 exists on disk only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            other => Err(MergeError::MalformedHeader(format!(
                "unsupported dtype {other:?}"
            ))),
        }
    }
}

/// One named tensor. `data` is row-major and holds `product(shape)` values;
/// for `Dtype::F16` the values are expected to be exactly representable in
/// half precision (anything loaded from disk is).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let record = Self {
            name: name.into(),
            dtype,
            shape,
            data,
        };
        debug_assert_eq!(record.element_count(), record.data.len());
        record
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// In-memory image of one container file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: TensorRecord) {
        self.tensors.insert(record.name.clone(), record);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }
}

fn product_checked(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Serialize to the container byte layout. Tensors are emitted in name order
/// and the header JSON keys are sorted, so the bytes are a pure function of
/// the contents.
pub fn serialize_tensor_file(file: &TensorFile) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !file.metadata.is_empty() {
        let meta: Map<String, Value> = file
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }

    let mut payload = Vec::new();
    for (name, record) in &file.tensors {
        if record.element_count() != record.data.len() {
            return Err(MergeError::ShapeMismatch(format!(
                "tensor {name}: shape {:?} implies {} elements, data holds {}",
                record.shape,
                record.element_count(),
                record.data.len()
            )));
        }
        let begin = payload.len();
        match record.dtype {
            Dtype::F32 => {
                for &v in &record.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in &record.data {
                    payload.extend_from_slice(&f32_to_half(v).to_le_bytes());
                }
            }
        }
        let end = payload.len();
        let entry = serde_json::json!({
            "dtype": record.dtype.as_str(),
            "shape": record.shape,
            "data_offsets": [begin, end],
        });
        header.insert(name.clone(), entry);
    }

    let header_bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| MergeError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse container bytes. Payload values are widened to f32; the on-disk
/// bytes are never altered by loading.
pub fn deserialize_tensor_file(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 8 {
        return Err(MergeError::MalformedHeader(format!(
            "file too short for length prefix ({} bytes)",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_len: usize = header_len
        .try_into()
        .map_err(|_| MergeError::MalformedHeader("header length overflows usize".to_string()))?;
    if header_len > bytes.len() - 8 {
        return Err(MergeError::MalformedHeader(format!(
            "header length {header_len} exceeds file size"
        )));
    }
    let header_bytes = &bytes[8..8 + header_len];
    let payload = &bytes[8 + header_len..];

    let header: Value = serde_json::from_slice(header_bytes)
        .map_err(|e| MergeError::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    let header = header.as_object().ok_or_else(|| {
        MergeError::MalformedHeader("header JSON is not an object".to_string())
    })?;

    let mut file = TensorFile::new();
    for (name, entry) in header {
        if name == METADATA_KEY {
            let meta = entry.as_object().ok_or_else(|| {
                MergeError::MalformedHeader("__metadata__ is not an object".to_string())
            })?;
            for (k, v) in meta {
                let v = v.as_str().ok_or_else(|| {
                    MergeError::MalformedHeader(format!("__metadata__.{k} is not a string"))
                })?;
                file.metadata.insert(k.clone(), v.to_string());
            }
            continue;
        }
        file.insert(parse_tensor_entry(name, entry, payload)?);
    }
    Ok(file)
}

fn parse_tensor_entry(name: &str, entry: &Value, payload: &[u8]) -> Result<TensorRecord> {
    let obj = entry.as_object().ok_or_else(|| {
        MergeError::MalformedHeader(format!("tensor {name}: entry is not an object"))
    })?;
    let dtype_str = obj.get("dtype").and_then(Value::as_str).ok_or_else(|| {
        MergeError::MalformedHeader(format!("tensor {name}: missing dtype"))
    })?;
    let dtype = Dtype::parse(dtype_str)?;

    let shape_val = obj.get("shape").and_then(Value::as_array).ok_or_else(|| {
        MergeError::MalformedHeader(format!("tensor {name}: missing shape"))
    })?;
    let mut shape = Vec::with_capacity(shape_val.len());
    for d in shape_val {
        let d = d.as_u64().ok_or_else(|| {
            MergeError::MalformedHeader(format!("tensor {name}: non-integer dimension"))
        })?;
        shape.push(d as usize);
    }
    let elements = product_checked(&shape).ok_or_else(|| {
        MergeError::MalformedHeader(format!("tensor {name}: shape product overflows"))
    })?;

    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| MergeError::MalformedHeader(format!("tensor {name}: missing data_offsets")))?;
    if offsets.len() != 2 {
        return Err(MergeError::MalformedHeader(format!(
            "tensor {name}: data_offsets must have two entries"
        )));
    }
    let begin = offsets[0].as_u64().ok_or_else(|| {
        MergeError::MalformedHeader(format!("tensor {name}: non-integer offset"))
    })? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| {
        MergeError::MalformedHeader(format!("tensor {name}: non-integer offset"))
    })? as usize;
    if begin > end || end > payload.len() {
        return Err(MergeError::MalformedHeader(format!(
            "tensor {name}: data_offsets [{begin}, {end}] out of bounds (payload {} bytes)",
            payload.len()
        )));
    }
    let expected = elements
        .checked_mul(dtype.byte_size())
        .ok_or_else(|| MergeError::MalformedHeader(format!("tensor {name}: size overflows")))?;
    if end - begin != expected {
        return Err(MergeError::MalformedHeader(format!(
            "tensor {name}: payload is {} bytes, shape {:?} with dtype {} needs {expected}",
            end - begin,
            shape,
            dtype.as_str()
        )));
    }

    let raw = &payload[begin..end];
    let data = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| half_to_f32(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };

    Ok(TensorRecord {
        name: name.to_string(),
        dtype,
        shape,
        data,
    })
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let bytes = std::fs::read(path.as_ref())?;
    deserialize_tensor_file(&bytes)
}

/// Write via a temp file plus rename so a failed write never leaves a
/// partial file at `path`.
pub fn write_tensor_file(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_tensor_file(file)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

/// Widen an IEEE 754 half-precision bit pattern to f32.
pub fn half_to_f32(bits: u16) -> f32 {
    let sign = ((bits >> 15) & 1) as u32;
    let exp = ((bits >> 10) & 0x1F) as u32;
    let frac = (bits & 0x3FF) as u32;

    if exp == 0 {
        if frac == 0 {
            f32::from_bits(sign << 31)
        } else {
            // subnormal: renormalize
            let mut e = -14i32;
            let mut f = frac;
            while (f & 0x400) == 0 {
                f <<= 1;
                e -= 1;
            }
            f &= 0x3FF;
            let new_exp = ((127 + e) as u32) & 0xFF;
            f32::from_bits((sign << 31) | (new_exp << 23) | (f << 13))
        }
    } else if exp == 31 {
        if frac == 0 {
            f32::from_bits((sign << 31) | 0x7F80_0000)
        } else {
            f32::from_bits((sign << 31) | 0x7FC0_0000 | (frac << 13))
        }
    } else {
        let new_exp = (exp + 127 - 15) & 0xFF;
        f32::from_bits((sign << 31) | (new_exp << 23) | (frac << 13))
    }
}

/// Narrow f32 to an IEEE 754 half-precision bit pattern with
/// round-to-nearest-even. Values already representable in half precision
/// (in particular anything produced by `half_to_f32`) convert exactly.
pub fn f32_to_half(value: f32) -> u16 {
    let bits = value.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let frac = bits & 0x007F_FFFF;

    if exp == 0xFF {
        // inf or NaN; keep NaN quiet with some payload
        return if frac == 0 {
            sign | 0x7C00
        } else {
            sign | 0x7C00 | 0x0200 | ((frac >> 13) as u16 & 0x03FF)
        };
    }

    let unbiased = exp - 127;
    if unbiased >= 16 {
        return sign | 0x7C00; // overflow to infinity
    }
    if unbiased >= -14 {
        // normal range
        let mut mant = frac >> 13;
        let round = frac & 0x1FFF;
        if round > 0x1000 || (round == 0x1000 && (mant & 1) == 1) {
            mant += 1;
        }
        let mut e = (unbiased + 15) as u32;
        if mant == 0x400 {
            mant = 0;
            e += 1;
            if e >= 31 {
                return sign | 0x7C00;
            }
        }
        return sign | ((e << 10) as u16) | (mant as u16);
    }
    if unbiased >= -25 {
        // subnormal range
        let full = frac | 0x0080_0000;
        let shift = (-1 - unbiased) as u32;
        let mant = full >> shift;
        let rem = full & ((1u32 << shift) - 1);
        let half_point = 1u32 << (shift - 1);
        let mut m = mant;
        if rem > half_point || (rem == half_point && (m & 1) == 1) {
            m += 1;
        }
        return sign | (m as u16);
    }
    sign // underflow to signed zero
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> TensorFile {
        let mut file = TensorFile::new();
        file.insert(TensorRecord::new(
            "a.lora_up.weight",
            Dtype::F32,
            vec![2, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ));
        file.insert(TensorRecord::new(
            "a.alpha",
            Dtype::F32,
            vec![1],
            vec![2.0],
        ));
        file.metadata
            .insert("concept_id".to_string(), "a-concept".to_string());
        file
    }

    #[test]
    fn round_trip_preserves_everything() {
        let file = sample_file();
        let bytes = serialize_tensor_file(&file).unwrap();
        let loaded = deserialize_tensor_file(&bytes).unwrap();
        assert_eq!(file, loaded);
    }

    #[test]
    fn serialization_is_deterministic() {
        let file = sample_file();
        let a = serialize_tensor_file(&file).unwrap();
        let b = serialize_tensor_file(&file).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout_matches_format() {
        let file = sample_file();
        let bytes = serialize_tensor_file(&file).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        let obj = header.as_object().unwrap();
        assert!(obj.contains_key("a.lora_up.weight"));
        assert_eq!(
            obj["a.lora_up.weight"]["dtype"],
            Value::String("F32".to_string())
        );
        assert_eq!(obj[METADATA_KEY]["concept_id"], "a-concept");
        // offsets are relative to the first byte after the header
        let offs = obj["a.alpha"]["data_offsets"].as_array().unwrap();
        let begin = offs[0].as_u64().unwrap() as usize;
        let end = offs[1].as_u64().unwrap() as usize;
        let raw = &bytes[8 + header_len..];
        let v = f32::from_le_bytes(raw[begin..end].try_into().unwrap());
        assert_eq!(v, 2.0);
    }

    #[test]
    fn truncated_prefix_is_malformed() {
        let err = deserialize_tensor_file(&[1, 2, 3]).unwrap_err();
        assert!(matches!(err, MergeError::MalformedHeader(_)));
    }

    #[test]
    fn oversized_header_length_is_malformed() {
        let mut bytes = vec![0u8; 16];
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        let err = deserialize_tensor_file(&bytes).unwrap_err();
        assert!(matches!(err, MergeError::MalformedHeader(_)));
    }

    #[test]
    fn invalid_json_is_malformed() {
        let header = b"not json";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        let err = deserialize_tensor_file(&bytes).unwrap_err();
        assert!(matches!(err, MergeError::MalformedHeader(_)));
    }

    #[test]
    fn payload_size_mismatch_is_malformed() {
        let header = br#"{"t": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 4]);
        let err = deserialize_tensor_file(&bytes).unwrap_err();
        assert!(matches!(err, MergeError::MalformedHeader(_)));
    }

    #[test]
    fn f16_payload_widens_on_load() {
        let mut file = TensorFile::new();
        file.insert(TensorRecord::new(
            "h",
            Dtype::F16,
            vec![3],
            vec![1.0, -2.0, 0.5],
        ));
        let bytes = serialize_tensor_file(&file).unwrap();
        let loaded = deserialize_tensor_file(&bytes).unwrap();
        let rec = loaded.get("h").unwrap();
        assert_eq!(rec.dtype, Dtype::F16);
        assert_eq!(rec.data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn half_conversion_round_trips_all_finite_patterns() {
        for bits in 0..=u16::MAX {
            let wide = half_to_f32(bits);
            if wide.is_nan() {
                assert!(half_to_f32(f32_to_half(wide)).is_nan());
            } else {
                assert_eq!(f32_to_half(wide), bits, "bit pattern {bits:#06x}");
            }
        }
    }

    #[test]
    fn half_known_values() {
        assert_eq!(half_to_f32(0x3C00), 1.0);
        assert_eq!(half_to_f32(0xC000), -2.0);
        assert_eq!(half_to_f32(0x3800), 0.5);
        assert!(half_to_f32(0x7C00).is_infinite());
        assert!(half_to_f32(0x7E00).is_nan());
        assert_eq!(f32_to_half(1.0), 0x3C00);
        assert_eq!(f32_to_half(65504.0), 0x7BFF);
        assert_eq!(f32_to_half(1e6), 0x7C00); // overflow
        assert_eq!(f32_to_half(1e-10), 0x0000); // underflow
    }

    #[test]
    fn loading_twice_yields_identical_structures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.st");
        write_tensor_file(&path, &sample_file()).unwrap();
        let before = std::fs::read(&path).unwrap();
        let a = read_tensor_file(&path).unwrap();
        let b = read_tensor_file(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, std::fs::read(&path).unwrap());
    }
}
