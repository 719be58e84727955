//! On-disk model bundles.
//!
//! A bundle is a directory holding:
//!
//! - `config.json`: architecture hyperparameters ([`ModelConfig`])
//! - `vocab.json` / `merges.txt`: byte-level BPE tokenizer files
//! - `model.tensors`: named fp32 tensors in a safetensors-compatible container
//!   (8-byte little-endian header length, JSON header, raw payload)
//! - `manifest.json`: per-tensor checksums ([`Manifest`])
//!
//! Tensors are stored in math orientation (`x · W`), so the engine never
//! transposes at load time. Fused QKV is kept as one `d × 3d` matrix and
//! per-head slices are cut from it on demand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{gemm_into, Matrix, View};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const TENSORS_FILE: &str = "model.tensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f32,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_mlp: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            layer_norm_eps: 1e-5,
            tied_embeddings: true,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_attention_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// A named fp32 tensor as stored in the container.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    fn from_matrix(m: &Matrix) -> Self {
        Self::new(vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    fn from_vec(v: &[f32]) -> Self {
        Self::new(vec![v.len()], v.to_vec())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn read_header<R: Read>(reader: &mut R) -> Result<(u64, BTreeMap<String, HeaderEntry>)> {
    let mut len = [0u8; 8];
    reader.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 100 << 20 {
        return Err(Error::Config(format!("container header of {len} bytes is implausible")));
    }
    let mut raw = vec![0u8; len as usize];
    reader.read_exact(&mut raw)?;
    let mut value: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&raw)?;
    value.remove("__metadata__");
    let mut entries = BTreeMap::new();
    for (name, v) in value {
        let entry: HeaderEntry = serde_json::from_value(v)
            .map_err(|e| Error::validation(&name, format!("bad header entry: {e}")))?;
        entries.insert(name, entry);
    }
    Ok((8 + len, entries))
}

/// Reads every tensor of a container.
pub fn read_tensors<R: Read + Seek>(mut reader: R) -> Result<BTreeMap<String, Tensor>> {
    let total = reader.seek(SeekFrom::End(0))?;
    reader.seek(SeekFrom::Start(0))?;
    let (data_start, header) = read_header(&mut reader)?;
    let mut out = BTreeMap::new();
    for (name, entry) in header {
        if entry.dtype != "F32" {
            return Err(Error::validation(
                &name,
                format!("unsupported dtype {}", entry.dtype),
            ));
        }
        let [begin, end] = entry.data_offsets;
        let numel: usize = entry.shape.iter().product();
        if end < begin || end - begin != numel as u64 * 4 {
            return Err(Error::validation(
                &name,
                format!(
                    "byte range {begin}..{end} does not match shape {:?}",
                    entry.shape
                ),
            ));
        }
        if data_start + end > total {
            return Err(Error::validation(
                &name,
                format!(
                    "payload ends at byte {} but the container has {total} bytes",
                    data_start + end
                ),
            ));
        }
        reader.seek(SeekFrom::Start(data_start + begin))?;
        let mut raw = vec![0u8; numel * 4];
        reader.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::new(entry.shape, data));
    }
    Ok(out)
}

/// Writes tensors in name order with an 8-byte aligned header.
pub fn write_tensors<W: Write>(mut writer: W, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut header = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        let bytes = t.data.len() as u64 * 4;
        header.insert(
            name.clone(),
            serde_json::to_value(HeaderEntry {
                dtype: "F32".into(),
                shape: t.shape.clone(),
                data_offsets: [offset, offset + bytes],
            })?,
        );
        offset += bytes;
    }
    let mut raw = serde_json::to_vec(&header)?;
    while raw.len() % 8 != 0 {
        raw.push(b' ');
    }
    writer.write_all(&(raw.len() as u64).to_le_bytes())?;
    writer.write_all(&raw)?;
    for t in tensors.values() {
        for v in &t.data {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    /// `d × 3d`, columns ordered query | key | value, each split by head.
    pub w_qkv: Matrix,
    pub b_qkv: Vec<f32>,
    /// `d × d`; rows `h·d_head..(h+1)·d_head` form head `h`'s output matrix.
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    /// FF input matrix, `d × d_mlp`; column `i` is neuron `i`'s key.
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// FF output matrix, `d_mlp × d`; row `i` is neuron `i`'s value vector.
    pub w_ff_out: Matrix,
    pub b_ff_out: Vec<f32>,
}

#[derive(Clone, Debug)]
pub enum Unembedding {
    /// `W_U = W_Eᵀ`.
    Tied,
    /// Explicit `d × |V|` matrix.
    Separate(Matrix),
}

#[derive(Clone, Debug)]
pub struct Weights {
    pub config: ModelConfig,
    /// Token embedding, `|V| × d`.
    pub wte: Matrix,
    /// Learned absolute positions, `max_positions × d`.
    pub wpe: Matrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f_gamma: Vec<f32>,
    pub ln_f_beta: Vec<f32>,
    pub unembed: Unembedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Weights {
    fn take(
        tensors: &mut BTreeMap<String, Tensor>,
        name: &str,
        shape: &[usize],
    ) -> Result<Vec<f32>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::validation(name, "missing from container"))?;
        if t.shape != shape {
            return Err(Error::validation(
                name,
                format!("expected shape {shape:?}, found {:?}", t.shape),
            ));
        }
        Ok(t.data)
    }

    fn take_matrix(
        tensors: &mut BTreeMap<String, Tensor>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<Matrix> {
        let data = Self::take(tensors, name, &[rows, cols])?;
        Matrix::new(rows, cols, data)
    }

    /// Builds weights from container tensors, validating every shape.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let t = &mut tensors;
        let wte = Self::take_matrix(t, "wte", v, d)?;
        let wpe = Self::take_matrix(t, "wpe", config.max_positions, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            layers.push(LayerWeights {
                ln1_gamma: Self::take(t, &p("ln1.gamma"), &[d])?,
                ln1_beta: Self::take(t, &p("ln1.beta"), &[d])?,
                w_qkv: Self::take_matrix(t, &p("attn.w_qkv"), d, 3 * d)?,
                b_qkv: Self::take(t, &p("attn.b_qkv"), &[3 * d])?,
                w_out: Self::take_matrix(t, &p("attn.w_out"), d, d)?,
                b_out: Self::take(t, &p("attn.b_out"), &[d])?,
                ln2_gamma: Self::take(t, &p("ln2.gamma"), &[d])?,
                ln2_beta: Self::take(t, &p("ln2.beta"), &[d])?,
                w_in: Self::take_matrix(t, &p("mlp.w_in"), d, config.d_mlp)?,
                b_in: Self::take(t, &p("mlp.b_in"), &[config.d_mlp])?,
                w_ff_out: Self::take_matrix(t, &p("mlp.w_out"), config.d_mlp, d)?,
                b_ff_out: Self::take(t, &p("mlp.b_out"), &[d])?,
            });
        }
        let ln_f_gamma = Self::take(t, "ln_f.gamma", &[d])?;
        let ln_f_beta = Self::take(t, "ln_f.beta", &[d])?;
        let unembed = if config.tied_embeddings {
            if let Some(u) = t.remove("unembed") {
                if u.shape != [d, v] {
                    return Err(Error::validation(
                        "unembed",
                        format!("expected shape {:?}, found {:?}", [d, v], u.shape),
                    ));
                }
                let u = Matrix::new(d, v, u.data)?;
                let mismatch = (0..v).any(|tok| (0..d).any(|k| u.get(k, tok) != wte.get(tok, k)));
                if mismatch {
                    return Err(Error::validation(
                        "unembed",
                        "declared tied but differs from the transposed token embedding",
                    ));
                }
            }
            Unembedding::Tied
        } else {
            Unembedding::Separate(Self::take_matrix(t, "unembed", d, v)?)
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::validation(extra, "unexpected tensor in container"));
        }
        let w = Self {
            config,
            wte,
            wpe,
            layers,
            ln_f_gamma,
            ln_f_beta,
            unembed,
        };
        Ok(w)
    }

    /// Inverse of [`Weights::from_tensors`].
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut t = BTreeMap::new();
        t.insert("wte".into(), Tensor::from_matrix(&self.wte));
        t.insert("wpe".into(), Tensor::from_matrix(&self.wpe));
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            t.insert(p("ln1.gamma"), Tensor::from_vec(&layer.ln1_gamma));
            t.insert(p("ln1.beta"), Tensor::from_vec(&layer.ln1_beta));
            t.insert(p("attn.w_qkv"), Tensor::from_matrix(&layer.w_qkv));
            t.insert(p("attn.b_qkv"), Tensor::from_vec(&layer.b_qkv));
            t.insert(p("attn.w_out"), Tensor::from_matrix(&layer.w_out));
            t.insert(p("attn.b_out"), Tensor::from_vec(&layer.b_out));
            t.insert(p("ln2.gamma"), Tensor::from_vec(&layer.ln2_gamma));
            t.insert(p("ln2.beta"), Tensor::from_vec(&layer.ln2_beta));
            t.insert(p("mlp.w_in"), Tensor::from_matrix(&layer.w_in));
            t.insert(p("mlp.b_in"), Tensor::from_vec(&layer.b_in));
            t.insert(p("mlp.w_out"), Tensor::from_matrix(&layer.w_ff_out));
            t.insert(p("mlp.b_out"), Tensor::from_vec(&layer.b_ff_out));
        }
        t.insert("ln_f.gamma".into(), Tensor::from_vec(&self.ln_f_gamma));
        t.insert("ln_f.beta".into(), Tensor::from_vec(&self.ln_f_beta));
        if let Unembedding::Separate(u) = &self.unembed {
            t.insert("unembed".into(), Tensor::from_matrix(u));
        }
        t
    }

    /// Random weights for tests and demos. `scale` is the std-dev-like spread
    /// of the uniform draws for projection matrices.
    pub fn random(config: ModelConfig, seed: u64, scale: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut mat = |rows: usize, cols: usize, s: f32| {
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
        };
        let wte = mat(config.vocab_size, d, scale);
        let wpe = mat(config.max_positions, d, scale);
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: mat(1, d, 0.2).into_vec().iter().map(|v| 1.0 + v).collect(),
                ln1_beta: mat(1, d, 0.1).into_vec(),
                w_qkv: mat(d, 3 * d, scale),
                b_qkv: mat(1, 3 * d, 0.1).into_vec(),
                w_out: mat(d, d, scale),
                b_out: mat(1, d, 0.1).into_vec(),
                ln2_gamma: mat(1, d, 0.2).into_vec().iter().map(|v| 1.0 + v).collect(),
                ln2_beta: mat(1, d, 0.1).into_vec(),
                w_in: mat(d, config.d_mlp, scale),
                b_in: mat(1, config.d_mlp, 0.1).into_vec(),
                w_ff_out: mat(config.d_mlp, d, scale),
                b_ff_out: mat(1, d, 0.1).into_vec(),
            });
        }
        let ln_f_gamma = mat(1, d, 0.2).into_vec().iter().map(|v| 1.0 + v).collect();
        let ln_f_beta = mat(1, d, 0.1).into_vec();
        let unembed = if config.tied_embeddings {
            Unembedding::Tied
        } else {
            Unembedding::Separate(mat(d, config.vocab_size, scale))
        };
        Ok(Self {
            config,
            wte,
            wpe,
            layers,
            ln_f_gamma,
            ln_f_beta,
            unembed,
        })
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::Index(format!("head L{layer}H{head}")));
        }
        Ok(())
    }

    /// Per-head `d × d_head` slice of the fused QKV matrix.
    pub fn head_projection(&self, layer: usize, head: usize, which: Projection) -> Result<Matrix> {
        self.check_head(layer, head)?;
        let d = self.config.d_model;
        let dh = self.config.d_head();
        let block = match which {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
        };
        self.layers[layer].w_qkv.columns(block * d + head * dh, dh)
    }

    /// Per-head `d_head × d` output matrix.
    pub fn head_output_matrix(&self, layer: usize, head: usize) -> Result<Matrix> {
        self.check_head(layer, head)?;
        let dh = self.config.d_head();
        self.layers[layer].w_out.row_block(head * dh, dh)
    }

    /// Value vector `v_i` of FF neuron `i` (a row of the FF output matrix).
    pub fn neuron_value(&self, layer: usize, neuron: usize) -> Result<&[f32]> {
        if layer >= self.config.n_layers || neuron >= self.config.d_mlp {
            return Err(Error::Index(format!("neuron L{layer}N{neuron}")));
        }
        Ok(self.layers[layer].w_ff_out.row(neuron))
    }

    pub(crate) fn unembed_view(&self) -> View<'_> {
        match &self.unembed {
            Unembedding::Tied => View::transposed(&self.wte),
            Unembedding::Separate(u) => View::of(u),
        }
    }

    /// Materialised `d × |V|` unembedding matrix.
    pub fn unembedding_matrix(&self) -> Matrix {
        match &self.unembed {
            Unembedding::Tied => self.wte.transpose(),
            Unembedding::Separate(u) => u.clone(),
        }
    }

    /// Projects each row of `rows` (`n × d`, row-major) to vocabulary logits,
    /// returning an `n × |V|` matrix. No LayerNorm is applied.
    pub fn project_rows(&self, rows: &[f32]) -> Result<Matrix> {
        let d = self.config.d_model;
        if rows.len() % d != 0 {
            return Err(Error::Dimension(format!(
                "{} values are not a whole number of {d}-vectors",
                rows.len()
            )));
        }
        let n = rows.len() / d;
        let mut out = Matrix::zeros(n, self.config.vocab_size);
        gemm_into(View::rows_of(rows, n, d), self.unembed_view(), out.as_mut_slice());
        Ok(out)
    }
}

/// Reads `config.json` from a bundle directory.
pub fn read_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(CONFIG_FILE);
    let file = File::open(&path).map_err(|e| Error::bundle(&path, e.to_string()))?;
    let config: ModelConfig = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::bundle(&path, e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Loads and validates the model in a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(ModelConfig, Weights)> {
    let dir = dir.as_ref();
    for f in [CONFIG_FILE, VOCAB_FILE, MERGES_FILE, TENSORS_FILE] {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(Error::bundle(p, "missing bundle file"));
        }
    }
    let config = read_config(dir)?;
    let path = dir.join(TENSORS_FILE);
    let file = File::open(&path).map_err(|e| Error::bundle(&path, e.to_string()))?;
    let tensors = read_tensors(BufReader::with_capacity(1 << 20, file))?;
    let weights = Weights::from_tensors(config.clone(), tensors)?;
    Ok((config, weights))
}

/// Loads a model from in-memory file contents.
pub fn load_from_bytes(config_json: &[u8], tensors: &[u8]) -> Result<Weights> {
    let config: ModelConfig = serde_json::from_slice(config_json)?;
    let tensors = read_tensors(std::io::Cursor::new(tensors))?;
    Weights::from_tensors(config, tensors)
}

/// Writes `config.json` and `model.tensors` (plus the manifest) into `dir`.
/// Tokenizer files are copied by the caller.
pub fn save_model(dir: impl AsRef<Path>, weights: &Weights) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let cfg = serde_json::to_string_pretty(&weights.config)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg + "\n")?;
    let file = File::create(dir.join(TENSORS_FILE))?;
    write_tensors(BufWriter::new(file), &weights.to_tensors())?;
    let manifest = checksum_manifest(dir)?;
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDigest {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Per-tensor checksums of a bundle's container, sorted by tensor name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorDigest>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::bundle(path, e.to_string()))?;
        let mut m: Manifest = serde_json::from_reader(BufReader::new(file))?;
        m.tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }

    /// Names of tensors whose record differs or exists on one side only.
    pub fn differences(&self, other: &Manifest) -> Vec<String> {
        let a: BTreeMap<_, _> = self.tensors.iter().map(|t| (&t.name, t)).collect();
        let b: BTreeMap<_, _> = other.tensors.iter().map(|t| (&t.name, t)).collect();
        let mut names: Vec<String> = a
            .keys()
            .chain(b.keys())
            .filter(|n| a.get(*n) != b.get(*n))
            .map(|n| n.to_string())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Hash over all tensor digests; identifies a bundle in run records.
    pub fn bundle_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update([0]);
            h.update(t.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Computes the checksum manifest of the container in bundle `dir`.
pub fn checksum_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path: PathBuf = dir.as_ref().join(TENSORS_FILE);
    let mut file = BufReader::new(File::open(&path).map_err(|e| Error::bundle(&path, e.to_string()))?);
    let total = file.seek(SeekFrom::End(0))?;
    file.seek(SeekFrom::Start(0))?;
    let (data_start, header) = read_header(&mut file)?;
    let mut tensors = Vec::with_capacity(header.len());
    let mut buf = vec![0u8; 1 << 20];
    for (name, entry) in header {
        let [begin, end] = entry.data_offsets;
        if end < begin || data_start + end > total {
            return Err(Error::validation(&name, "payload outside container"));
        }
        file.seek(SeekFrom::Start(data_start + begin))?;
        let mut left = (end - begin) as usize;
        let mut h = Sha256::new();
        while left > 0 {
            let n = left.min(buf.len());
            file.read_exact(&mut buf[..n])?;
            h.update(&buf[..n]);
            left -= n;
        }
        tensors.push(TensorDigest {
            name,
            dtype: entry.dtype,
            shape: entry.shape,
            sha256: hex::encode(h.finalize()),
        });
    }
    Ok(Manifest { tensors })
}
