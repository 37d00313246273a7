//! Per-layer, per-token hidden states and the document embedding store.
//!
//! Hidden states are kept raw (un-normalized). Cosine similarity normalizes
//! on the fly, and the token-contrast scorer needs raw L2 distances.
//!
//! Store file layout (little-endian throughout):
//!
//! ```text
//! "CRLE" | version u32 | doc count u64 |
//!   per doc: id len u32 | id bytes | layers u16 | tokens u32 | dim u32 |
//!            layers*tokens*dim f32 in [layer][token][dim] order
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::{HttpTransport, UreqTransport};
use crate::limit::InFlightLimit;

pub const STORE_MAGIC: &[u8; 4] = b"CRLE";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("encoder provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("token {token} out of range 0..{max}")]
    TokenOutOfRange { token: usize, max: usize },
    #[error("bad embedding shape: {0}")]
    Shape(String),
    #[error("non-finite value in hidden states")]
    NonFinite,
    #[error("store mismatch: {0}")]
    Mismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("file is truncated")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Hidden states for one text: `layers` encoder layers (numbered 1..=layers,
/// the last one being the output layer), `tokens` positions with CLS at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredEmbeddings {
    layers: usize,
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LayeredEmbeddings {
    pub fn new(
        layers: usize,
        tokens: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, EmbeddingError> {
        if layers == 0 || layers > u16::MAX as usize {
            return Err(EmbeddingError::Shape(format!("layer count {layers}")));
        }
        if tokens == 0 || dim == 0 {
            return Err(EmbeddingError::Shape(format!(
                "tokens={tokens}, dim={dim}; both must be >= 1"
            )));
        }
        if data.len() != layers * tokens * dim {
            return Err(EmbeddingError::Shape(format!(
                "expected {} values, got {}",
                layers * tokens * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(LayeredEmbeddings {
            layers,
            tokens,
            dim,
            data,
        })
    }

    /// Builds from a nested `[layer][token][dim]` array.
    pub fn from_nested(nested: &[Vec<Vec<f32>>]) -> Result<Self, EmbeddingError> {
        let layers = nested.len();
        let tokens = nested.first().map_or(0, Vec::len);
        let dim = nested
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(layers * tokens * dim);
        for (li, layer) in nested.iter().enumerate() {
            if layer.len() != tokens {
                return Err(EmbeddingError::Shape(format!(
                    "layer {} has {} tokens, expected {tokens}",
                    li + 1,
                    layer.len()
                )));
            }
            for row in layer {
                if row.len() != dim {
                    return Err(EmbeddingError::Shape(format!(
                        "row of width {} in layer {}, expected {dim}",
                        row.len(),
                        li + 1
                    )));
                }
                data.extend_from_slice(row);
            }
        }
        LayeredEmbeddings::new(layers, tokens, dim, data)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row `[layer][token]`. Layer is 1-based; panics when out of range.
    #[inline]
    pub fn row(&self, layer: usize, token: usize) -> &[f32] {
        assert!(layer >= 1 && layer <= self.layers, "layer {layer} out of range");
        assert!(token < self.tokens, "token {token} out of range");
        let start = ((layer - 1) * self.tokens + token) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn try_row(&self, layer: usize, token: usize) -> Result<&[f32], EmbeddingError> {
        if layer == 0 || layer > self.layers {
            return Err(EmbeddingError::LayerOutOfRange {
                layer,
                max: self.layers,
            });
        }
        if token >= self.tokens {
            return Err(EmbeddingError::TokenOutOfRange {
                token,
                max: self.tokens,
            });
        }
        Ok(self.row(layer, token))
    }

    /// Keeps at most `max_tokens` leading positions in every layer.
    pub fn truncated(mut self, max_tokens: usize) -> Self {
        let keep = max_tokens.max(1);
        if self.tokens <= keep {
            return self;
        }
        let mut data = Vec::with_capacity(self.layers * keep * self.dim);
        for l in 0..self.layers {
            let start = l * self.tokens * self.dim;
            data.extend_from_slice(&self.data[start..start + keep * self.dim]);
        }
        self.data = data;
        self.tokens = keep;
        self
    }

    /// Nested `[layer][token][dim]` copy, as used in the JSON fixture format.
    pub fn to_nested(&self) -> Vec<Vec<Vec<f32>>> {
        (1..=self.layers)
            .map(|l| (0..self.tokens).map(|t| self.row(l, t).to_vec()).collect())
            .collect()
    }
}

/// CLS row of the given 1-based layer.
pub fn cls_vector(e: &LayeredEmbeddings, layer: usize) -> Result<&[f32], EmbeddingError> {
    e.try_row(layer, 0)
}

/// Something that turns text into all-layer hidden states.
pub trait EncoderProvider: Send + Sync {
    fn name(&self) -> &str;
    fn encode_raw(&self, text: &str) -> Result<LayeredEmbeddings, EmbeddingError>;
}

/// Encodes `text`, truncating to `max_seq_len` token positions (CLS included).
pub fn encode(
    text: &str,
    provider: &dyn EncoderProvider,
    max_seq_len: usize,
) -> Result<LayeredEmbeddings, EmbeddingError> {
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    Ok(provider.encode_raw(text)?.truncated(max_seq_len))
}

pub(crate) fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// JSON body shared by the HTTP encoder service and on-disk fixtures.
#[derive(Debug, Serialize, Deserialize)]
pub struct HiddenStatesPayload {
    pub hidden_states: Vec<Vec<Vec<f32>>>,
}

/// Looks up precomputed tensors by exact text. Fixtures live in memory or in
/// a directory of `<sha256(text)>.json` files holding `{"hidden_states": ...}`.
#[derive(Debug, Default)]
pub struct FixtureEncoder {
    entries: HashMap<String, LayeredEmbeddings>,
    dir: Option<PathBuf>,
}

impl FixtureEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        FixtureEncoder {
            entries: HashMap::new(),
            dir: Some(dir.into()),
        }
    }

    pub fn insert(&mut self, text: &str, emb: LayeredEmbeddings) {
        self.entries.insert(text_key(text), emb);
    }

    pub fn fixture_path(dir: &Path, text: &str) -> PathBuf {
        dir.join(format!("{}.json", text_key(text)))
    }

    /// Writes `emb` as a fixture file for `text` under `dir`.
    pub fn write_fixture(
        dir: &Path,
        text: &str,
        emb: &LayeredEmbeddings,
    ) -> Result<PathBuf, EmbeddingError> {
        let path = Self::fixture_path(dir, text);
        let payload = HiddenStatesPayload {
            hidden_states: emb.to_nested(),
        };
        let json = serde_json::to_vec(&payload).map_err(|e| EmbeddingError::Format(e.to_string()))?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}

impl EncoderProvider for FixtureEncoder {
    fn name(&self) -> &str {
        "fixture"
    }

    fn encode_raw(&self, text: &str) -> Result<LayeredEmbeddings, EmbeddingError> {
        let key = text_key(text);
        if let Some(e) = self.entries.get(&key) {
            return Ok(e.clone());
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            if path.exists() {
                let bytes = std::fs::read(&path)?;
                let payload: HiddenStatesPayload = serde_json::from_slice(&bytes)
                    .map_err(|e| EmbeddingError::Format(format!("{}: {e}", path.display())))?;
                return LayeredEmbeddings::from_nested(&payload.hidden_states);
            }
        }
        Err(EmbeddingError::ProviderUnavailable(format!(
            "no fixture for text with key {key}"
        )))
    }
}

/// Deterministic lexical encoder for offline runs and tests.
///
/// Each lowercase alphanumeric word gets two pseudo-random vectors seeded by
/// its hash: a surface vector and a semantic vector. Layer `l` of `L` blends
/// them as `(1 - l/L) * surface + (l/L) * semantic`, plus a small shared
/// context term at upper layers. CLS is the mean of the word rows, so
/// final-layer CLS cosine tracks vocabulary overlap.
#[derive(Debug, Clone)]
pub struct HashingEncoder {
    layers: usize,
    dim: usize,
}

const MAX_HASHED_WORDS: usize = 4096;

impl HashingEncoder {
    pub fn new(layers: usize, dim: usize) -> Self {
        HashingEncoder {
            layers: layers.max(2),
            dim: dim.max(1),
        }
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn seeded_vector(&self, salt: &str, word: &str) -> Vec<f64> {
        let digest = Sha256::digest(format!("{salt}\u{1f}{word}").as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }
}

impl EncoderProvider for HashingEncoder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn encode_raw(&self, text: &str) -> Result<LayeredEmbeddings, EmbeddingError> {
        let mut words = Self::tokenize(text);
        if words.is_empty() {
            words.push(text.trim().to_string());
        }
        words.truncate(MAX_HASHED_WORDS);
        let surface: Vec<Vec<f64>> = words.iter().map(|w| self.seeded_vector("surf", w)).collect();
        let semantic: Vec<Vec<f64>> = words.iter().map(|w| self.seeded_vector("sem", w)).collect();
        let n = words.len() as f64;
        let context: Vec<f64> = (0..self.dim)
            .map(|k| semantic.iter().map(|v| v[k]).sum::<f64>() / n)
            .collect();

        let tokens = words.len() + 1;
        let mut data = Vec::with_capacity(self.layers * tokens * self.dim);
        for l in 1..=self.layers {
            let t = l as f64 / self.layers as f64;
            let rows: Vec<Vec<f64>> = (0..words.len())
                .map(|w| {
                    (0..self.dim)
                        .map(|k| (1.0 - t) * surface[w][k] + t * semantic[w][k] + 0.1 * t * context[k])
                        .collect()
                })
                .collect();
            for k in 0..self.dim {
                data.push((rows.iter().map(|r| r[k]).sum::<f64>() / n) as f32);
            }
            for r in &rows {
                data.extend(r.iter().map(|&x| x as f32));
            }
        }
        LayeredEmbeddings::new(self.layers, tokens, self.dim, data)
    }
}

/// Calls an embedding service:
/// `POST {"text", "output_hidden_states": true}` → `{"hidden_states": [[[f32]]]}`.
pub struct HttpEncoder {
    url: String,
    transport: Arc<dyn HttpTransport>,
    limit: Arc<InFlightLimit>,
    /// Drop `hidden_states[0]` (the embedding-layer output) when present.
    skip_embedding_layer: bool,
}

impl HttpEncoder {
    pub fn new(url: impl Into<String>, timeout: std::time::Duration, max_in_flight: usize) -> Self {
        Self::with_transport(
            url,
            Arc::new(UreqTransport::new(timeout)),
            Arc::new(InFlightLimit::new(max_in_flight)),
        )
    }

    pub fn with_transport(
        url: impl Into<String>,
        transport: Arc<dyn HttpTransport>,
        limit: Arc<InFlightLimit>,
    ) -> Self {
        HttpEncoder {
            url: url.into(),
            transport,
            limit,
            skip_embedding_layer: true,
        }
    }

    pub fn skip_embedding_layer(mut self, skip: bool) -> Self {
        self.skip_embedding_layer = skip;
        self
    }
}

impl EncoderProvider for HttpEncoder {
    fn name(&self) -> &str {
        "http"
    }

    fn encode_raw(&self, text: &str) -> Result<LayeredEmbeddings, EmbeddingError> {
        let body = serde_json::json!({ "text": text, "output_hidden_states": true });
        let resp = {
            let _permit = self.limit.acquire();
            self.transport
                .post_json(&self.url, &[], &body)
                .map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?
        };
        if !(200..300).contains(&resp.status) {
            return Err(EmbeddingError::ProviderUnavailable(format!(
                "encoder service returned HTTP {}",
                resp.status
            )));
        }
        let mut payload: HiddenStatesPayload = serde_json::from_str(&resp.body)
            .map_err(|e| EmbeddingError::ProviderUnavailable(format!("bad response body: {e}")))?;
        if self.skip_embedding_layer && payload.hidden_states.len() > 1 {
            payload.hidden_states.remove(0);
        }
        LayeredEmbeddings::from_nested(&payload.hidden_states)
    }
}

/// Hidden states for every corpus document, keyed by document id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    entries: BTreeMap<String, LayeredEmbeddings>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a document; all documents must share layer count and width.
    pub fn insert(&mut self, id: impl Into<String>, emb: LayeredEmbeddings) -> Result<(), EmbeddingError> {
        let id = id.into();
        if id.is_empty() {
            return Err(EmbeddingError::Mismatch("empty document id".into()));
        }
        if let Some((layers, dim)) = self.shape() {
            if emb.layers() != layers || emb.dim() != dim {
                return Err(EmbeddingError::Mismatch(format!(
                    "document {id} has (layers={}, dim={}), store has (layers={layers}, dim={dim})",
                    emb.layers(),
                    emb.dim()
                )));
            }
        }
        self.entries.insert(id, emb);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&LayeredEmbeddings> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(layers, dim)` shared by all entries.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.entries.values().next().map(|e| (e.layers(), e.dim()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayeredEmbeddings)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), EmbeddingError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (id, e) in &self.entries {
            write_id(w, id)?;
            w.write_all(&(e.layers() as u16).to_le_bytes())?;
            w.write_all(&(e.tokens() as u32).to_le_bytes())?;
            w.write_all(&(e.dim() as u32).to_le_bytes())?;
            for v in e.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(EmbeddingError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != STORE_VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let count = read_u64(r)?;
        let mut store = EmbeddingStore::new();
        for _ in 0..count {
            let id = read_id(r)?;
            let layers = read_u16(r)? as usize;
            let tokens = read_u32(r)? as usize;
            let dim = read_u32(r)? as usize;
            let n = layers
                .checked_mul(tokens)
                .and_then(|x| x.checked_mul(dim))
                .ok_or_else(|| EmbeddingError::Format("tensor size overflows".into()))?;
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let emb = LayeredEmbeddings::new(layers, tokens, dim, data)
                .map_err(|e| EmbeddingError::Format(format!("document {id}: {e}")))?;
            if store.entries.contains_key(&id) {
                return Err(EmbeddingError::Format(format!("duplicate document id {id}")));
            }
            store
                .insert(id, emb)
                .map_err(|e| EmbeddingError::Format(e.to_string()))?;
        }
        Ok(store)
    }
}

pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<(), EmbeddingError> {
    let mut w = BufWriter::new(File::create(path)?);
    store.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore, EmbeddingError> {
    let mut r = BufReader::new(File::open(path)?);
    EmbeddingStore::read_from(&mut r)
}

pub(crate) fn write_id<W: Write>(w: &mut W, id: &str) -> io::Result<()> {
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id.as_bytes())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EmbeddingError::TruncatedFile,
        _ => EmbeddingError::Io(e),
    })
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16, EmbeddingError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32, EmbeddingError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64, EmbeddingError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_id<R: Read>(r: &mut R) -> Result<String, EmbeddingError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| EmbeddingError::Format("document id is not UTF-8".into()))
}
