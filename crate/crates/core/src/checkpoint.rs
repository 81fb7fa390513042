//! Checkpoint files: a plain-text manifest `<prefix>.manifest` and a payload
//! `<prefix>.bin` of little-endian `f64` values in manifest order.
//!
//! ```text
//! rdn-checkpoint 1
//! variant full
//! dims region=20 embed=32 hidden=64 attention=32 vocab=31
//! iteration 3000
//! seed 1
//! fingerprint 5f0c6e1d2a9b7c44
//! vocab ["<pad>","<bos>","<eos>","<unk>","a",...]
//! param embedding.table 32 31
//! param lstm1.w_input 256 116
//! ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelDims, RdnParams, Variant};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const MAGIC: &str = "rdn-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: RdnParams,
    pub vocab: Vocabulary,
    /// Number of completed training iterations.
    pub iteration: usize,
    pub seed: u64,
}

pub fn manifest_path(prefix: impl AsRef<Path>) -> PathBuf {
    with_suffix(prefix.as_ref(), ".manifest")
}

pub fn payload_path(prefix: impl AsRef<Path>) -> PathBuf {
    with_suffix(prefix.as_ref(), ".bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn manifest(&self) -> Result<String> {
        let d = self.params.dims;
        let mut out = format!(
            "{MAGIC}\nvariant {}\ndims region={} embed={} hidden={} attention={} vocab={}\n\
             iteration {}\nseed {}\nfingerprint {}\nvocab {}\n",
            self.params.variant,
            d.region,
            d.embed,
            d.hidden,
            d.attention,
            d.vocab,
            self.iteration,
            self.seed,
            self.vocab.fingerprint(),
            serde_json::to_string(&self.vocab)?,
        );
        for (name, t) in self.params.weights.named() {
            out.push_str("param ");
            out.push_str(&name);
            for s in t.shape() {
                out.push_str(&format!(" {s}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.num_parameters() * 8);
        for (_, t) in self.params.weights.named() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let (m, p) = (manifest_path(prefix), payload_path(prefix));
        fs::write(&m, self.manifest()?).map_err(|e| Error::io(&m, e))?;
        fs::write(&p, self.payload()).map_err(|e| Error::io(&p, e))
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let (m, p) = (manifest_path(prefix), payload_path(prefix));
        let manifest = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let payload = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Self::from_parts(&manifest, &payload)
    }

    pub fn from_parts(manifest: &str, payload: &[u8]) -> Result<Self> {
        let header = parse_manifest(manifest)?;
        let vocab = Vocabulary::from_tokens(header.vocab)
            .map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        if vocab.fingerprint() != header.fingerprint {
            return Err(Error::Load(format!(
                "vocabulary fingerprint {} does not match recorded {}",
                vocab.fingerprint(),
                header.fingerprint
            )));
        }
        if vocab.len() != header.dims.vocab {
            return Err(Error::Load(format!(
                "vocabulary has {} tokens but dims say {}",
                vocab.len(),
                header.dims.vocab
            )));
        }
        header
            .dims
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;

        let needed: usize = header
            .params
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() * 8)
            .sum();
        if payload.len() != needed {
            return Err(Error::Format(format!(
                "payload has {} bytes, manifest describes {needed}",
                payload.len()
            )));
        }
        let expected = RdnParams::expected_shapes(header.dims);
        for (i, (name, shape)) in header.params.iter().enumerate() {
            match expected.get(i) {
                Some((n, s)) if n == name && s == shape => {}
                Some((n, s)) => {
                    return Err(Error::Load(format!(
                        "parameter {name} {shape:?} where {n} {s:?} was expected"
                    )))
                }
                None => return Err(Error::Load(format!("unexpected parameter {name}"))),
            }
        }
        if let Some((n, _)) = expected.get(header.params.len()) {
            return Err(Error::Load(format!("parameter {n} is missing")));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let tensors = header
            .params
            .iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                Tensor::new(shape.clone(), values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let template = RdnParams::init(header.dims, header.variant, 0)?;
        let params = RdnParams {
            dims: header.dims,
            variant: header.variant,
            weights: template.weights.from_ordered(tensors)?,
        };
        Ok(Checkpoint {
            params,
            vocab,
            iteration: header.iteration,
            seed: header.seed,
        })
    }

    /// Checks that every parameter has the shape `dims` calls for, naming
    /// the first one that does not.
    pub fn check_dims(&self, dims: ModelDims) -> Result<()> {
        dims.validate()?;
        let actual = self.params.weights.named();
        for ((name, shape), (_, t)) in RdnParams::expected_shapes(dims).iter().zip(&actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        let actual = self.vocab.fingerprint();
        if actual != expected {
            return Err(Error::Config(format!(
                "vocabulary fingerprint {actual} does not match expected {expected}"
            )));
        }
        Ok(())
    }
}

struct Header {
    variant: Variant,
    dims: ModelDims,
    iteration: usize,
    seed: u64,
    fingerprint: String,
    vocab: Vec<String>,
    params: Vec<(String, Vec<usize>)>,
}

fn parse_manifest(text: &str) -> Result<Header> {
    let bad = |line: usize, msg: &str| Error::Format(format!("manifest line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, l)) => l
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|rest| (n, rest.to_string()))
                .ok_or_else(|| bad(n, &format!("expected `{key}`"))),
            None => Err(bad(0, &format!("missing `{key}`"))),
        }
    };
    let num = |n: usize, s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad number"));

    let (n, v) = field("variant")?;
    let variant: Variant = v.parse().map_err(|_| bad(n, "unknown variant"))?;
    let (n, d) = field("dims")?;
    let mut dims = [0usize; 5];
    let keys = ["region", "embed", "hidden", "attention", "vocab"];
    let parts: Vec<&str> = d.split(' ').collect();
    if parts.len() != keys.len() {
        return Err(bad(n, "expected five dimensions"));
    }
    for ((slot, key), part) in dims.iter_mut().zip(keys).zip(parts) {
        let value = part
            .strip_prefix(key)
            .and_then(|p| p.strip_prefix('='))
            .ok_or_else(|| bad(n, &format!("expected {key}=")))?;
        *slot = num(n, value)?;
    }
    let (n, it) = field("iteration")?;
    let iteration = num(n, &it)?;
    let (n, s) = field("seed")?;
    let seed = s.parse::<u64>().map_err(|_| bad(n, "bad seed"))?;
    let (_, fingerprint) = field("fingerprint")?;
    let (n, v) = field("vocab")?;
    let vocab: Vec<String> = serde_json::from_str(&v).map_err(|e| bad(n, &e.to_string()))?;

    let mut params = Vec::new();
    for (n, l) in lines {
        if l.is_empty() {
            continue;
        }
        let mut parts = l.split(' ');
        if parts.next() != Some("param") {
            return Err(bad(n, "expected `param`"));
        }
        let name = parts
            .next()
            .ok_or_else(|| bad(n, "missing parameter name"))?;
        let shape = parts.map(|p| num(n, p)).collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(bad(n, "bad shape"));
        }
        params.push((name.to_string(), shape));
    }
    Ok(Header {
        variant,
        dims: ModelDims {
            region: dims[0],
            embed: dims[1],
            hidden: dims[2],
            attention: dims[3],
            vocab: dims[4],
        },
        iteration,
        seed,
        fingerprint,
        vocab,
        params,
    })
}
