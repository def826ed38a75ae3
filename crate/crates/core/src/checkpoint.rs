//! Reading and writing safetensors containers, and turning adapter
//! checkpoints into aligned sets of LoRA factor pairs.
//!
//! Container layout: an 8-byte little-endian header length `N`, `N` bytes of
//! JSON mapping tensor names to `{dtype, shape, data_offsets}`, then the
//! payload buffer. Offsets are relative to the start of the buffer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use half::{bf16, f16};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, ParseErrorKind, Result};
use crate::linalg::TaskMatrix;

/// Tensor element types this crate reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::F64, Dtype::F32, Dtype::F16, Dtype::BF16];

    /// Bytes per element.
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F64" => Ok(Dtype::F64),
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            _ => Err(Error::Parameter(format!("unsupported dtype {s:?}"))),
        }
    }
}

/// Picks the correctly rounded (nearest, ties to even) 16-bit encoding of
/// `x`. `approx` may be off by one ulp; its two neighbours are checked too.
/// Infinity takes part as `inf_proxy`, the value one ulp past the largest
/// finite, so values at or beyond the midpoint overflow as IEEE requires.
fn nearest_16bit(x: f64, approx: u16, inf_proxy: f64, decode: impl Fn(u16) -> f64) -> u16 {
    let decode = |b: u16| {
        let v = decode(b);
        if v.is_infinite() {
            v.signum() * inf_proxy
        } else {
            v
        }
    };
    let step = |bits: u16, up: bool| -> u16 {
        // move one ulp away from / toward zero within the sign-magnitude encoding
        let mag = bits & 0x7fff;
        let sign = bits & 0x8000;
        let away = up == (sign == 0);
        if away {
            sign | (mag + 1).min(0x7fff)
        } else if mag == 0 {
            (sign ^ 0x8000) | 1
        } else {
            sign | (mag - 1)
        }
    };
    let mut best = approx;
    let mut best_err = (decode(approx) - x).abs();
    for cand in [step(approx, true), step(approx, false)] {
        let v = decode(cand);
        if v.is_nan() {
            continue;
        }
        let err = (v - x).abs();
        if err < best_err || (err == best_err && cand & 1 == 0 && best & 1 == 1) {
            best = cand;
            best_err = err;
        }
    }
    best
}

fn f64_to_f16_bits(x: f64) -> u16 {
    nearest_16bit(x, f16::from_f64(x).to_bits(), 65536.0, |b| f16::from_bits(b).to_f64())
}

fn f64_to_bf16_bits(x: f64) -> u16 {
    nearest_16bit(x, bf16::from_f64(x).to_bits(), 2f64.powi(128), |b| bf16::from_bits(b).to_f64())
}

/// One named tensor: dtype, shape and its raw little-endian payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorRecord {
    pub fn new(dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let expected = shape.iter().product::<usize>() * dtype.width();
        if bytes.len() != expected {
            return Err(Error::dim(format!(
                "{} payload bytes for {dtype} tensor of shape {shape:?} (expected {expected})",
                bytes.len()
            )));
        }
        Ok(Self { dtype, shape, bytes })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Encodes `values` at `dtype`, rounding to nearest-even for narrower
    /// types. Values that overflow the target type are rejected.
    pub fn from_f64(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::dim(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        let mut bytes = Vec::with_capacity(values.len() * dtype.width());
        for (i, &x) in values.iter().enumerate() {
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => {
                    let v = x as f32;
                    if x.is_finite() && !v.is_finite() {
                        return Err(overflow(i, x, dtype));
                    }
                    bytes.extend_from_slice(&v.to_le_bytes())
                }
                Dtype::F16 => {
                    let b = f64_to_f16_bits(x);
                    if x.is_finite() && !f16::from_bits(b).is_finite() {
                        return Err(overflow(i, x, dtype));
                    }
                    bytes.extend_from_slice(&b.to_le_bytes())
                }
                Dtype::BF16 => {
                    let b = f64_to_bf16_bits(x);
                    if x.is_finite() && !bf16::from_bits(b).is_finite() {
                        return Err(overflow(i, x, dtype));
                    }
                    bytes.extend_from_slice(&b.to_le_bytes())
                }
            }
        }
        Ok(Self { dtype, shape, bytes })
    }

    /// Decodes the payload, upcasting to `f64` exactly.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            Dtype::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F16 => self
                .bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::BF16 => self
                .bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        }
    }

    /// Interprets a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<TaskMatrix> {
        match self.shape[..] {
            [rows, cols] => TaskMatrix::new(rows, cols, self.to_f64()),
            _ => Err(Error::dim(format!(
                "expected a 2-D tensor, found shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn from_matrix(w: &TaskMatrix, dtype: Dtype) -> Result<Self> {
        Self::from_f64(dtype, vec![w.rows(), w.cols()], w.data())
    }
}

fn overflow(index: usize, value: f64, dtype: Dtype) -> Error {
    Error::Parameter(format!(
        "value {value} at element {index} overflows {dtype}"
    ))
}

/// A parsed container: tensors by name plus the optional string metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, record: TensorRecord) {
        self.tensors.insert(key.into(), record);
    }

    pub fn get(&self, key: &str) -> Option<&TensorRecord> {
        self.tensors.get(key)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Header entries in file order, so duplicate keys can be reported rather
/// than silently collapsed.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

const METADATA_KEY: &str = "__metadata__";

fn byte_offset_of(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

/// Parses a container held in memory.
pub fn parse_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    if buf.len() < 8 {
        return Err(Error::parse(0, ParseErrorKind::MissingLengthPrefix));
    }
    let header_len = u64::from_le_bytes(buf[..8].try_into().unwrap());
    let available = (buf.len() - 8) as u64;
    if header_len > available {
        return Err(Error::parse(
            0,
            ParseErrorKind::HeaderTooLong { declared: header_len, available },
        ));
    }
    let header_end = 8 + header_len as usize;
    let header_bytes = &buf[8..header_end];
    let header_text = std::str::from_utf8(header_bytes).map_err(|e| {
        Error::parse(
            8 + e.valid_up_to() as u64,
            ParseErrorKind::MalformedHeader("header is not valid UTF-8".into()),
        )
    })?;
    let raw: RawHeader = serde_json::from_str(header_text).map_err(|e| {
        Error::parse(
            8 + byte_offset_of(header_text, e.line(), e.column()) as u64,
            ParseErrorKind::MalformedHeader(e.to_string()),
        )
    })?;
    let data = &buf[header_end..];
    let data_len = data.len() as u64;
    let key_pos = |key: &str| -> u64 {
        let quoted = serde_json::to_string(key).unwrap_or_default();
        8 + header_text.find(&quoted).unwrap_or(0) as u64
    };

    let mut ckpt = Checkpoint::new();
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (key, value) in raw.0 {
        if !seen.insert(key.clone()) {
            return Err(Error::parse(
                key_pos(&key),
                ParseErrorKind::MalformedHeader(format!("duplicate key {key:?}")),
            ));
        }
        if key == METADATA_KEY {
            ckpt.metadata = serde_json::from_value(value).map_err(|e| {
                Error::parse(
                    key_pos(&key),
                    ParseErrorKind::MalformedHeader(format!("__metadata__: {e}")),
                )
            })?;
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value).map_err(|e| {
            Error::parse(
                key_pos(&key),
                ParseErrorKind::InvalidTensor { key: key.clone(), reason: e.to_string() },
            )
        })?;
        let dtype = Dtype::from_str(&info.dtype)
            .map_err(|_| Error::parse(key_pos(&key), ParseErrorKind::UnknownDtype(info.dtype.clone())))?;
        let [begin, end] = info.data_offsets;
        let payload_pos = 8 + header_len + begin;
        if end < begin {
            return Err(Error::parse(
                key_pos(&key),
                ParseErrorKind::InvalidTensor { key: key.clone(), reason: format!("end offset {end} before begin {begin}") },
            ));
        }
        let numel = info
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width() as u64))
            .ok_or_else(|| Error::parse(key_pos(&key), ParseErrorKind::OffsetOverflow { key: key.clone() }))?;
        if end > data_len {
            return Err(Error::parse(
                payload_pos,
                ParseErrorKind::Truncated { key: key.clone(), begin, end, len: data_len },
            ));
        }
        if end - begin != numel {
            return Err(Error::parse(
                payload_pos,
                ParseErrorKind::SizeMismatch { key: key.clone(), expected: numel, actual: end - begin },
            ));
        }
        let shape: Vec<usize> = info
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(key_pos(&key), ParseErrorKind::OffsetOverflow { key: key.clone() }))?;
        let bytes = data[begin as usize..end as usize].to_vec();
        spans.push((begin, end, key.clone()));
        ckpt.tensors.insert(key, TensorRecord { dtype, shape, bytes });
    }

    spans.retain(|(b, e, _)| e > b);
    spans.sort();
    for pair in spans.windows(2) {
        let (_, end0, ref k0) = pair[0];
        let (begin1, _, ref k1) = pair[1];
        if begin1 < end0 {
            return Err(Error::parse(
                8 + header_len + begin1,
                ParseErrorKind::Overlap { first: k0.clone(), second: k1.clone() },
            ));
        }
    }
    Ok(ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&buf)
}

/// Serializes with keys in sorted order and the header padded with spaces
/// to an 8-byte boundary.
pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if !ckpt.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&ckpt.metadata).expect("string map serializes"),
        );
    }
    let mut offset = 0u64;
    for (key, rec) in &ckpt.tensors {
        let end = offset + rec.bytes.len() as u64;
        header.insert(
            key.clone(),
            serde_json::json!({
                "dtype": rec.dtype.as_str(),
                "shape": rec.shape,
                "data_offsets": [offset, end],
            }),
        );
        offset = end;
    }
    let mut text = serde_json::to_string(&header).expect("header serializes");
    while !text.len().is_multiple_of(8) {
        text.push(' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + offset as usize);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for rec in ckpt.tensors.values() {
        out.extend_from_slice(&rec.bytes);
    }
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename. Refuses to replace an existing file unless
/// `overwrite` is set.
pub fn write_atomic(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output exists (pass --force to overwrite)",
            ),
        ));
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>, overwrite: bool) -> Result<()> {
    write_atomic(path.as_ref(), &serialize_checkpoint(ckpt), overwrite)
}

/// Glob pattern over checkpoint keys. `*` matches any run of characters,
/// `?` exactly one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPattern {
    raw: String,
}

impl KeyPattern {
    pub fn new(raw: &str) -> Result<Self> {
        if !raw.contains('*') {
            return Err(Error::Parameter(format!(
                "key pattern {raw:?} needs a '*' marking the layer name"
            )));
        }
        Ok(Self { raw: raw.to_string() })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    /// Returns the layer key if `key` matches: everything the pattern covers
    /// up to the end of its first `*`.
    pub fn layer_key(&self, key: &str) -> Option<String> {
        let p: Vec<char> = self.raw.chars().collect();
        let k: Vec<char> = key.chars().collect();
        let mut first_star_end = None;
        if glob_match(&p, &k, 0, 0, &mut first_star_end) {
            let end = first_star_end.expect("pattern has a star");
            Some(k[..end].iter().collect())
        } else {
            None
        }
    }
}

/// Backtracking glob match, shortest expansion first. Records where the
/// first `*` stopped consuming on the successful path.
fn glob_match(p: &[char], k: &[char], pi: usize, ki: usize, first_star: &mut Option<usize>) -> bool {
    if pi == p.len() {
        return ki == k.len();
    }
    match p[pi] {
        '*' => {
            let is_first = !p[..pi].contains(&'*');
            for end in ki..=k.len() {
                if glob_match(p, k, pi + 1, end, first_star) {
                    if is_first {
                        *first_star = Some(end);
                    }
                    return true;
                }
            }
            false
        }
        '?' => ki < k.len() && glob_match(p, k, pi + 1, ki + 1, first_star),
        c => ki < k.len() && k[ki] == c && glob_match(p, k, pi + 1, ki + 1, first_star),
    }
}

/// One layer of one adapter: `ΔW = scaling · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub layer_key: String,
    /// `m × r`
    pub b: TaskMatrix,
    /// `r × n`
    pub a: TaskMatrix,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraLayer {
    pub fn new(layer_key: impl Into<String>, b: TaskMatrix, a: TaskMatrix, scaling: f64) -> Result<Self> {
        let layer_key = layer_key.into();
        if b.cols() != a.rows() {
            return Err(Error::dim(format!(
                "layer {layer_key:?}: B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let rank = b.cols();
        if rank == 0 || rank > b.rows().min(a.cols()) {
            return Err(Error::dim(format!(
                "layer {layer_key:?}: rank {rank} exceeds min({}, {})",
                b.rows(),
                a.cols()
            )));
        }
        if !(scaling.is_finite() && scaling > 0.0) {
            return Err(Error::Parameter(format!(
                "layer {layer_key:?}: scaling must be positive, got {scaling}"
            )));
        }
        Ok(Self { layer_key, b, a, rank, scaling })
    }

    /// Shape of the full-rank product.
    pub fn full_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// `B` with the scaling factor folded in.
    pub fn scaled_b(&self) -> TaskMatrix {
        if self.scaling == 1.0 {
            self.b.clone()
        } else {
            self.b.scale(self.scaling)
        }
    }
}

/// Where to find one adapter and how to scale it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSource {
    pub path: PathBuf,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_scaling")]
    pub scaling: f64,
}

fn default_scaling() -> f64 {
    1.0
}

impl AdapterSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), name: None, scaling: 1.0 }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.path.display().to_string())
        })
    }
}

/// Reads an adapter manifest: a JSON list of `{path, name, scaling}`.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<AdapterSource>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sources: Vec<AdapterSource> = serde_json::from_str(&text).map_err(|e| {
        Error::parse(
            byte_offset_of(&text, e.line(), e.column()) as u64,
            ParseErrorKind::MalformedHeader(format!("manifest: {e}")),
        )
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    for s in &mut sources {
        if s.path.is_relative() {
            s.path = base.join(&s.path);
        }
    }
    Ok(sources)
}

/// Key patterns and alignment policy for [`extract_adapters`].
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub a_pattern: KeyPattern,
    pub b_pattern: KeyPattern,
    /// Fail on layers missing from some adapter instead of dropping them.
    pub strict: bool,
}

pub const DEFAULT_A_PATTERN: &str = "*.lora_A.weight";
pub const DEFAULT_B_PATTERN: &str = "*.lora_B.weight";

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            a_pattern: KeyPattern::new(DEFAULT_A_PATTERN).unwrap(),
            b_pattern: KeyPattern::new(DEFAULT_B_PATTERN).unwrap(),
            strict: true,
        }
    }
}

/// Pairs A/B tensors in one checkpoint by layer key.
pub fn adapter_layers(ckpt: &Checkpoint, scaling: f64, opts: &ExtractOptions) -> Result<BTreeMap<String, LoraLayer>> {
    let mut a_keys: BTreeMap<String, &str> = BTreeMap::new();
    let mut b_keys: BTreeMap<String, &str> = BTreeMap::new();
    for key in ckpt.tensors.keys() {
        if let Some(layer) = opts.a_pattern.layer_key(key) {
            if let Some(prev) = a_keys.insert(layer.clone(), key) {
                return Err(Error::Alignment(format!(
                    "layer {layer:?} has two A tensors: {prev:?} and {key:?}"
                )));
            }
        } else if let Some(layer) = opts.b_pattern.layer_key(key) {
            if let Some(prev) = b_keys.insert(layer.clone(), key) {
                return Err(Error::Alignment(format!(
                    "layer {layer:?} has two B tensors: {prev:?} and {key:?}"
                )));
            }
        }
    }
    for layer in b_keys.keys() {
        if !a_keys.contains_key(layer) {
            return Err(Error::Alignment(format!("layer {layer:?} has a B tensor but no A tensor")));
        }
    }
    let mut layers = BTreeMap::new();
    for (layer, a_key) in a_keys {
        let b_key = b_keys
            .get(&layer)
            .ok_or_else(|| Error::Alignment(format!("layer {layer:?} has an A tensor but no B tensor")))?;
        let a = ckpt.tensors[a_key].to_matrix()?;
        let b = ckpt.tensors[*b_key].to_matrix()?;
        let lora = LoraLayer::new(layer.clone(), b, a, scaling)?;
        layers.insert(layer, lora);
    }
    Ok(layers)
}

/// LoRA factor pairs for `n` adapters, aligned by layer key.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub names: Vec<String>,
    pub adapters: Vec<BTreeMap<String, LoraLayer>>,
    /// Layers dropped during lenient alignment.
    pub warnings: Vec<String>,
}

impl AdapterSet {
    /// Aligns per-adapter layer maps. Strict mode requires identical key sets
    /// and full-rank shapes; lenient mode keeps the common, shape-consistent
    /// layers and records the rest in `warnings`.
    pub fn align(names: Vec<String>, adapters: Vec<BTreeMap<String, LoraLayer>>, strict: bool) -> Result<Self> {
        if names.len() != adapters.len() {
            return Err(Error::Config("adapter names and layer maps differ in length".into()));
        }
        if adapters.is_empty() {
            return Ok(Self { names, adapters, warnings: Vec::new() });
        }
        let all_keys: BTreeSet<String> = adapters.iter().flat_map(|a| a.keys().cloned()).collect();
        let mut dropped = BTreeMap::new();
        for key in &all_keys {
            let mut shape = None;
            for (name, adapter) in names.iter().zip(&adapters) {
                match adapter.get(key) {
                    None => {
                        let why = format!("layer {key:?} missing from adapter {name:?}");
                        if strict {
                            return Err(Error::Alignment(why));
                        }
                        dropped.entry(key.clone()).or_insert(why);
                        break;
                    }
                    Some(layer) => match shape {
                        None => shape = Some(layer.full_shape()),
                        Some(s) if s != layer.full_shape() => {
                            let (m, n) = layer.full_shape();
                            let why = format!(
                                "layer {key:?} is {m}x{n} in adapter {name:?} but {}x{} elsewhere",
                                s.0, s.1
                            );
                            if strict {
                                return Err(Error::Alignment(why));
                            }
                            dropped.entry(key.clone()).or_insert(why);
                            break;
                        }
                        Some(_) => {}
                    },
                }
            }
        }
        let mut adapters = adapters;
        for a in &mut adapters {
            a.retain(|k, _| !dropped.contains_key(k));
        }
        let warnings: Vec<String> = dropped.into_values().map(|w| format!("dropped {w}")).collect();
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(Self { names, adapters, warnings })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Matched layer keys in sorted order.
    pub fn layer_keys(&self) -> Vec<String> {
        self.adapters
            .first()
            .map(|a| a.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// The layer `key` from every adapter, in adapter order.
    pub fn layer_group(&self, key: &str) -> Result<Vec<&LoraLayer>> {
        self.adapters
            .iter()
            .zip(&self.names)
            .map(|(a, name)| {
                a.get(key)
                    .ok_or_else(|| Error::Alignment(format!("layer {key:?} missing from adapter {name:?}")))
            })
            .collect()
    }
}

/// Loads every source (in parallel when enabled) and aligns the adapters.
pub fn extract_adapters(sources: &[AdapterSource], opts: &ExtractOptions) -> Result<AdapterSet> {
    let loaded = crate::par::map(sources, |src| -> Result<BTreeMap<String, LoraLayer>> {
        let ckpt = load_checkpoint(&src.path)?;
        adapter_layers(&ckpt, src.scaling, opts)
    });
    let adapters = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let names = sources.iter().map(AdapterSource::display_name).collect();
    AdapterSet::align(names, adapters, opts.strict)
}

/// Packs adapter layers back into a checkpoint under PEFT-style keys.
pub fn adapter_checkpoint(layers: &BTreeMap<String, LoraLayer>, dtype: Dtype) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for (key, layer) in layers {
        ckpt.insert(format!("{key}.lora_A.weight"), TensorRecord::from_matrix(&layer.a, dtype)?);
        ckpt.insert(format!("{key}.lora_B.weight"), TensorRecord::from_matrix(&layer.b, dtype)?);
    }
    Ok(ckpt)
}

/// Pre-trained weights addressed by layer key.
#[derive(Debug, Clone, Default)]
pub struct BaseCheckpoint {
    pub source: Checkpoint,
}

impl BaseCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { source: load_checkpoint(path)? })
    }

    pub fn from_checkpoint(source: Checkpoint) -> Self {
        Self { source }
    }

    /// Tensor name holding the weights of `layer_key`: tries `<layer>.weight`,
    /// `<layer>`, then both again with a leading `base_model.model.` removed.
    pub fn resolve_key(&self, layer_key: &str) -> Option<String> {
        let stripped = layer_key.strip_prefix("base_model.model.");
        let mut candidates = vec![format!("{layer_key}.weight"), layer_key.to_string()];
        if let Some(s) = stripped {
            candidates.push(format!("{s}.weight"));
            candidates.push(s.to_string());
        }
        candidates.into_iter().find(|c| self.source.tensors.contains_key(c))
    }

    pub fn layer(&self, layer_key: &str) -> Result<(String, TaskMatrix)> {
        let key = self
            .resolve_key(layer_key)
            .ok_or_else(|| Error::Alignment(format!("base checkpoint has no weights for layer {layer_key:?}")))?;
        let w = self.source.tensors[&key].to_matrix()?;
        Ok((key, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, trial_rng};

    fn raw_container(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn minimal_container() {
        let payload: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        let buf = raw_container(r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#, &payload);
        let ckpt = parse_checkpoint(&buf).unwrap();
        assert_eq!(ckpt.len(), 1);
        let w = &ckpt.tensors["w"];
        assert_eq!(w.shape, vec![2, 2]);
        assert_eq!(w.to_f64(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn header_length_past_end() {
        let mut buf = raw_container("{}", &[]);
        buf[..8].copy_from_slice(&1000u64.to_le_bytes());
        let err = parse_checkpoint(&buf).unwrap_err();
        assert!(matches!(
            err,
            Error::Parse { position: 0, kind: ParseErrorKind::HeaderTooLong { declared: 1000, .. } }
        ));
        assert!(matches!(
            parse_checkpoint(&[1, 2, 3]),
            Err(Error::Parse { kind: ParseErrorKind::MissingLengthPrefix, .. })
        ));
    }

    #[test]
    fn overlapping_offsets() {
        let header = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let buf = raw_container(header, &[0u8; 12]);
        match parse_checkpoint(&buf).unwrap_err() {
            Error::Parse { position, kind: ParseErrorKind::Overlap { first, second } } => {
                assert_eq!((first.as_str(), second.as_str()), ("a", "b"));
                assert_eq!(position, 8 + header.len() as u64 + 4);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn distinct_parse_errors() {
        let kind = |header: &str, payload: &[u8]| match parse_checkpoint(&raw_container(header, payload)) {
            Err(Error::Parse { kind, .. }) => kind,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert!(matches!(kind("{not json", &[]), ParseErrorKind::MalformedHeader(_)));
        assert!(matches!(
            kind(r#"{"w":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#, &[0]),
            ParseErrorKind::UnknownDtype(d) if d == "I8"
        ));
        assert!(matches!(
            kind(r#"{"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, &[0; 8]),
            ParseErrorKind::Truncated { .. }
        ));
        assert!(matches!(
            kind(r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &[0; 8]),
            ParseErrorKind::SizeMismatch { expected: 12, actual: 8, .. }
        ));
        assert!(matches!(
            kind(
                r#"{"w":{"dtype":"F64","shape":[4294967296,4294967296],"data_offsets":[0,8]}}"#,
                &[0; 8]
            ),
            ParseErrorKind::OffsetOverflow { .. }
        ));
        assert!(matches!(
            kind(
                r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &[0; 8]
            ),
            ParseErrorKind::MalformedHeader(m) if m.contains("duplicate")
        ));
    }

    #[test]
    fn malformed_header_reports_position() {
        let header = r#"{"w": nope}"#;
        match parse_checkpoint(&raw_container(header, &[])).unwrap_err() {
            // somewhere inside the offending token
            Error::Parse { position, .. } => assert!((8 + 6..8 + 10).contains(&position), "{position}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_map_roundtrip() {
        let bytes = serialize_checkpoint(&Checkpoint::new());
        assert_eq!(&bytes[8..10], b"{}");
        assert_eq!((bytes.len() - 8) % 8, 0);
        assert_eq!(parse_checkpoint(&bytes).unwrap(), Checkpoint::new());
    }

    #[test]
    fn serialization_is_sorted_and_deterministic() {
        let mut c = Checkpoint::new();
        c.insert("z", TensorRecord::from_f64(Dtype::F32, vec![1], &[1.0]).unwrap());
        c.insert("a", TensorRecord::from_f64(Dtype::F16, vec![2], &[1.0, 2.0]).unwrap());
        c.metadata.insert("format".into(), "pt".into());
        let s1 = serialize_checkpoint(&c);
        let s2 = serialize_checkpoint(&c.clone());
        assert_eq!(s1, s2);
        let n = u64::from_le_bytes(s1[..8].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&s1[8..8 + n]).unwrap();
        assert!(text.find("\"a\"").unwrap() < text.find("\"z\"").unwrap());
        assert_eq!(parse_checkpoint(&s1).unwrap(), c);
    }

    #[test]
    fn save_refuses_to_clobber_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        save_checkpoint(&Checkpoint::new(), &path, false).unwrap();
        let err = save_checkpoint(&Checkpoint::new(), &path, false).unwrap_err();
        assert!(matches!(err, Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::AlreadyExists));
        save_checkpoint(&Checkpoint::new(), &path, true).unwrap();
    }

    #[test]
    fn half_precision_rounds_to_nearest_even() {
        // 1 + 2^-11 is exactly halfway between f16 1.0 and 1 + 2^-10: ties to even (1.0)
        let tie = 1.0 + 2f64.powi(-11);
        assert_eq!(f64_to_f16_bits(tie), f16::from_f64(1.0).to_bits());
        // a hair above the tie must round up; the low-word sticky bit matters here
        let above = tie + 2f64.powi(-40);
        assert_eq!(f16::from_bits(f64_to_f16_bits(above)).to_f64(), 1.0 + 2f64.powi(-10));
        // bf16 has 7 mantissa bits
        let tie = 1.0 + 2f64.powi(-8);
        assert_eq!(bf16::from_bits(f64_to_bf16_bits(tie)).to_f64(), 1.0);
        let above = tie + 2f64.powi(-45);
        assert_eq!(bf16::from_bits(f64_to_bf16_bits(above)).to_f64(), 1.0 + 2f64.powi(-7));
        let odd_tie = 1.0 + 3.0 * 2f64.powi(-8);
        assert_eq!(bf16::from_bits(f64_to_bf16_bits(odd_tie)).to_f64(), 1.0 + 2f64.powi(-6));
        assert_eq!(f64_to_bf16_bits(-0.0), 0x8000);
        assert!(TensorRecord::from_f64(Dtype::F16, vec![1], &[1e6]).is_err());
        assert!(TensorRecord::from_f64(Dtype::F16, vec![1], &[65520.0]).is_err());
        assert_eq!(f16::from_bits(f64_to_f16_bits(65519.0)).to_f64(), 65504.0);
    }

    #[test]
    fn narrow_dtype_cycle_is_idempotent() {
        let mut rng = trial_rng(9, 0);
        let w = gaussian_matrix(&mut rng, 8, 8);
        for dtype in Dtype::ALL {
            let first = TensorRecord::from_matrix(&w, dtype).unwrap();
            let second = TensorRecord::from_f64(dtype, first.shape.clone(), &first.to_f64()).unwrap();
            assert_eq!(first, second, "{dtype}");
        }
    }

    #[test]
    fn key_patterns() {
        let p = KeyPattern::new("*.lora_A.weight").unwrap();
        assert_eq!(p.layer_key("model.q_proj.lora_A.weight").as_deref(), Some("model.q_proj"));
        assert_eq!(p.layer_key("model.q_proj.lora_B.weight"), None);
        let p = KeyPattern::new("*.lora_A.*.weight").unwrap();
        assert_eq!(p.layer_key("m.v.lora_A.default.weight").as_deref(), Some("m.v"));
        let p = KeyPattern::new("base.*_a").unwrap();
        assert_eq!(p.layer_key("base.l0_a").as_deref(), Some("base.l0"));
        assert!(KeyPattern::new("no_star").is_err());
    }

    fn layer(rng: &mut rand_chacha::ChaCha8Rng, key: &str, m: usize, n: usize, r: usize) -> LoraLayer {
        LoraLayer::new(key, gaussian_matrix(rng, m, r), gaussian_matrix(rng, r, n), 1.0).unwrap()
    }

    #[test]
    fn adapter_layer_pairing() {
        let mut rng = trial_rng(5, 0);
        let mut layers = BTreeMap::new();
        layers.insert("q_proj".to_string(), layer(&mut rng, "q_proj", 64, 64, 8));
        let ckpt = adapter_checkpoint(&layers, Dtype::F64).unwrap();
        let parsed = adapter_layers(&ckpt, 1.0, &ExtractOptions::default()).unwrap();
        assert_eq!(parsed, layers);
        assert_eq!(parsed["q_proj"].rank, 8);

        let mut broken = ckpt.clone();
        broken.tensors.remove("q_proj.lora_B.weight");
        assert!(matches!(adapter_layers(&broken, 1.0, &ExtractOptions::default()), Err(Error::Alignment(_))));

        let mut bad_shape = ckpt.clone();
        bad_shape.insert(
            "q_proj.lora_B.weight",
            TensorRecord::from_matrix(&TaskMatrix::zeros(64, 4), Dtype::F32).unwrap(),
        );
        assert!(matches!(adapter_layers(&bad_shape, 1.0, &ExtractOptions::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn rank_must_fit() {
        let err = LoraLayer::new("x", TaskMatrix::zeros(2, 3), TaskMatrix::zeros(3, 8), 1.0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(LoraLayer::new("x", TaskMatrix::zeros(4, 2), TaskMatrix::zeros(2, 4), 0.0).is_err());
    }

    #[test]
    fn strict_and_lenient_alignment() {
        let mut rng = trial_rng(6, 0);
        let mut a1 = BTreeMap::new();
        a1.insert("l0".to_string(), layer(&mut rng, "l0", 8, 8, 2));
        a1.insert("l1".to_string(), layer(&mut rng, "l1", 8, 8, 2));
        let mut a2 = BTreeMap::new();
        a2.insert("l0".to_string(), layer(&mut rng, "l0", 8, 8, 4));
        let names = vec!["one".to_string(), "two".to_string()];

        let err = AdapterSet::align(names.clone(), vec![a1.clone(), a2.clone()], true).unwrap_err();
        assert!(matches!(err, Error::Alignment(ref m) if m.contains("l1") && m.contains("two")));

        let set = AdapterSet::align(names, vec![a1, a2], false).unwrap();
        assert_eq!(set.layer_keys(), vec!["l0".to_string()]);
        assert_eq!(set.warnings.len(), 1);
        assert!(set.warnings[0].contains("l1"));
        // ranks may differ across adapters
        assert_eq!(set.layer_group("l0").unwrap().iter().map(|l| l.rank).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn extraction_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = trial_rng(7, 0);
        let mut sources = Vec::new();
        for i in 0..2 {
            let mut layers = BTreeMap::new();
            layers.insert("q_proj".to_string(), layer(&mut rng, "q_proj", 64, 64, 8));
            let path = dir.path().join(format!("a{i}.safetensors"));
            save_checkpoint(&adapter_checkpoint(&layers, Dtype::F32).unwrap(), &path, false).unwrap();
            sources.push(AdapterSource::new(path));
        }
        let set = extract_adapters(&sources, &ExtractOptions::default()).unwrap();
        assert_eq!((set.len(), set.layer_keys().len()), (2, 1));
        assert_eq!(set.names, vec!["a0".to_string(), "a1".to_string()]);
        assert_eq!(set.layer_group("q_proj").unwrap()[1].rank, 8);

        let manifest = dir.path().join("m.json");
        std::fs::write(&manifest, r#"[{"path":"a1.safetensors","name":"second","scaling":0.5},{"path":"a0.safetensors"}]"#).unwrap();
        let srcs = load_manifest(&manifest).unwrap();
        assert_eq!(srcs[0].display_name(), "second");
        assert_eq!(srcs[1].scaling, 1.0);
        let set = extract_adapters(&srcs, &ExtractOptions::default()).unwrap();
        assert_eq!(set.layer_group("q_proj").unwrap()[0].scaling, 0.5);
    }

    #[test]
    fn base_key_resolution() {
        let mut c = Checkpoint::new();
        c.insert("model.layers.0.q_proj.weight", TensorRecord::from_matrix(&TaskMatrix::identity(2), Dtype::F32).unwrap());
        let base = BaseCheckpoint::from_checkpoint(c);
        assert_eq!(
            base.resolve_key("base_model.model.model.layers.0.q_proj").as_deref(),
            Some("model.layers.0.q_proj.weight")
        );
        assert!(base.layer("missing").is_err());
    }
}
