//! Synthetic captioning corpus.
//!
//! A scene is a handful of attributed objects plus a spatial relation between
//! the first two. Each object becomes one region vector made of one-hot
//! attribute blocks and Gaussian noise. The caption template repeats the first
//! object's category and color at the end, so predicting the final color token
//! benefits from looking back at the third word.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::EOS_TOKEN;

/// Mixed into a record seed to obtain its noise stream.
const NOISE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub sizes: Vec<String>,
    pub relations: Vec<String>,
    pub k_min: usize,
    pub k_max: usize,
    pub noise_sigma: f64,
    pub region_dim: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            categories: strings(&["box", "ball", "cup", "book", "lamp", "chair", "vase", "hat"]),
            colors: strings(&["red", "blue", "green", "yellow", "white", "black"]),
            sizes: strings(&["small", "medium", "big"]),
            relations: strings(&["left-of", "right-of", "above", "below"]),
            k_min: 2,
            k_max: 5,
            noise_sigma: 0.1,
            region_dim: 20,
            train_count: 200,
            val_count: 50,
            test_count: 50,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    /// Width of the one-hot attribute blocks.
    pub fn encoding_width(&self) -> usize {
        self.categories.len() + self.colors.len() + self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, inv) in [
            ("categories", &self.categories),
            ("colors", &self.colors),
            ("sizes", &self.sizes),
            ("relations", &self.relations),
        ] {
            if inv.is_empty() {
                return Err(Error::Config(format!("inventory `{name}` is empty")));
            }
            let unique: HashSet<&String> = inv.iter().collect();
            if unique.len() != inv.len() {
                return Err(Error::Config(format!("inventory `{name}` has duplicates")));
            }
        }
        if self.k_min < 2 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "object count range [{}, {}] must satisfy 2 <= k_min <= k_max",
                self.k_min, self.k_max
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.region_dim < self.encoding_width() {
            return Err(Error::Config(format!(
                "region_dim {} is smaller than the attribute encoding width {}",
                self.region_dim,
                self.encoding_width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyObject {
    pub category: String,
    pub color: String,
    pub size: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyScene {
    pub objects: Vec<ToyObject>,
    /// Relation of object 0 to object 1.
    pub relation: String,
}

impl ToyScene {
    /// The attributes that determine the caption.
    pub fn caption_key(&self) -> [&str; 6] {
        let (a, b) = (&self.objects[0], &self.objects[1]);
        [
            &a.size,
            &a.color,
            &a.category,
            &self.relation,
            &b.color,
            &b.category,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub regions: Vec<Vec<f64>>,
    pub caption: Vec<String>,
    pub scene: ToyScene,
}

impl DatasetRecord {
    pub fn region_tensors(&self) -> Result<Vec<Tensor>> {
        if self.regions.is_empty() {
            return Err(Error::Domain("record has no regions".into()));
        }
        self.regions
            .iter()
            .map(|r| Tensor::new(vec![r.len()], r.clone()))
            .collect()
    }

    /// Caption without the trailing end token.
    pub fn words(&self) -> &[String] {
        match self.caption.split_last() {
            Some((last, rest)) if last == EOS_TOKEN => rest,
            _ => &self.caption,
        }
    }
}

pub fn gen_scene(seed: u64, config: &GeneratorConfig) -> Result<ToyScene> {
    config.validate()?;
    let mut r = rng::seeded(seed);
    let k = config.k_min + rng::index(&mut r, config.k_max - config.k_min + 1);
    let mut pick = |inv: &[String]| inv[rng::index(&mut r, inv.len())].clone();
    let objects = (0..k)
        .map(|_| ToyObject {
            category: pick(&config.categories),
            color: pick(&config.colors),
            size: pick(&config.sizes),
        })
        .collect();
    let relation = pick(&config.relations);
    Ok(ToyScene { objects, relation })
}

fn position(inv: &[String], item: &str, what: &str) -> Result<usize> {
    inv.iter()
        .position(|s| s == item)
        .ok_or_else(|| Error::Config(format!("{what} {item:?} is not in the inventory")))
}

/// One region vector per object: one-hot category, color and size blocks,
/// zero padding up to `region_dim`, plus `noise_sigma` Gaussian noise drawn
/// from a stream derived from `seed`.
pub fn encode_scene(
    scene: &ToyScene,
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let (nc, nk) = (config.categories.len(), config.colors.len());
    let mut noise = rng::seeded(seed ^ NOISE_SALT);
    scene
        .objects
        .iter()
        .map(|obj| {
            let mut v = vec![0.0; config.region_dim];
            v[position(&config.categories, &obj.category, "category")?] = 1.0;
            v[nc + position(&config.colors, &obj.color, "color")?] = 1.0;
            v[nc + nk + position(&config.sizes, &obj.size, "size")?] = 1.0;
            if config.noise_sigma > 0.0 {
                for x in &mut v {
                    *x += config.noise_sigma * rng::standard_normal(&mut noise);
                }
            }
            Ok(v)
        })
        .collect()
}

/// `a <size₀> <color₀> <cat₀> <relation> a <color₁> <cat₁> and the <cat₀> is <color₀>`
pub fn render_caption(scene: &ToyScene) -> Vec<String> {
    let [size0, color0, cat0, rel, color1, cat1] = scene.caption_key();
    [
        "a", size0, color0, cat0, rel, "a", color1, cat1, "and", "the", cat0, "is", color0,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn make_record(seed: u64, config: &GeneratorConfig) -> Result<DatasetRecord> {
    let scene = gen_scene(seed, config)?;
    let regions = encode_scene(&scene, config, seed)?;
    let mut caption = render_caption(&scene);
    caption.push(EOS_TOKEN.to_string());
    Ok(DatasetRecord {
        regions,
        caption,
        scene,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

/// Generates train, validation and test records with pairwise distinct
/// caption keys, so no caption appears twice anywhere. Record `i` of the
/// underlying stream uses seed `config.seed ^ i`.
pub fn generate_splits(config: &GeneratorConfig) -> Result<Splits> {
    config.validate()?;
    let wanted = config.train_count + config.val_count + config.test_count;
    let max_attempts = 100 * wanted as u64 + 1000;
    let mut seen: HashSet<[String; 6]> = HashSet::new();
    let mut records = Vec::with_capacity(wanted);
    let mut i = 0u64;
    while records.len() < wanted {
        if i >= max_attempts {
            return Err(Error::Config(format!(
                "could only generate {} distinct scenes out of {wanted} requested",
                records.len()
            )));
        }
        let record = make_record(config.seed ^ i, config)?;
        i += 1;
        if seen.insert(record.scene.caption_key().map(String::from)) {
            records.push(record);
        }
    }
    let test = records.split_off(config.train_count + config.val_count);
    let val = records.split_off(config.train_count);
    Ok(Splits {
        train: records,
        val,
        test,
    })
}

pub fn to_jsonl(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON lines; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<DatasetRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_jsonl(records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}
