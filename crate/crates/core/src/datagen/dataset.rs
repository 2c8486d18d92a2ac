//! On-disk dataset: `manifest.json` plus one raw little-endian f32 file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Condition, ExampleMeta, UtteranceExample, DVECTOR_DIM};
use crate::error::{Error, Result};
use crate::features::{read_f32_le, FeatureDomain, FeatureMatrix, Matrix, HOP_MS};

const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<UtteranceExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn by_condition(&self, condition: Condition) -> impl Iterator<Item = &UtteranceExample> {
        self.examples.iter().filter(move |e| e.condition == condition)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_dataset(&self.examples, dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_dataset(dir).map(|examples| Dataset { examples })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    examples: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: String,
    condition: String,
    snr_db: Option<f64>,
    speaker_id: u32,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

const TENSORS: [&str; 7] = [
    "noisy_lfbe",
    "reference_lfbe",
    "context_lfbe",
    "speaker_embedding",
    "irm_target",
    "noisy_mel_linear",
    "clean_lfbe",
];

fn view(f: &FeatureMatrix) -> ((usize, usize), &[f32]) {
    (f.values.shape(), f.values.values.as_slice())
}

fn tensors_of(ex: &UtteranceExample) -> [(&'static str, (usize, usize), &[f32]); 7] {
    let emb = ((1, ex.speaker_embedding.len()), ex.speaker_embedding.as_slice());
    let parts = [
        view(&ex.noisy_lfbe),
        view(&ex.reference_lfbe),
        view(&ex.context_lfbe),
        emb,
        (ex.irm_target.shape(), ex.irm_target.values.as_slice()),
        view(&ex.noisy_mel_linear),
        view(&ex.clean_lfbe),
    ];
    std::array::from_fn(|i| (TENSORS[i], parts[i].0, parts[i].1))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn write_dataset(examples: &[UtteranceExample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let stem = format!("{i:06}-{}", file_stem(&ex.meta.id));
        let mut tensors = Vec::with_capacity(TENSORS.len());
        for (name, (rows, cols), data) in tensors_of(ex) {
            let file = format!("{stem}.{name}.f32");
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                file,
                shape: [rows, cols],
            });
        }
        entries.push(Entry {
            id: ex.meta.id.clone(),
            condition: ex.condition.to_string(),
            snr_db: ex.meta.snr_db,
            speaker_id: ex.meta.speaker_id,
            seed: ex.meta.seed,
            tensors,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        examples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<UtteranceExample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            manifest.version
        )));
    }
    manifest.examples.into_iter().map(|e| read_entry(dir, e)).collect()
}

fn read_entry(dir: &Path, entry: Entry) -> Result<UtteranceExample> {
    let condition: Condition = entry.condition.parse()?;
    let mut mats: Vec<Option<Matrix>> = vec![None; TENSORS.len()];
    for t in &entry.tensors {
        let slot = TENSORS
            .iter()
            .position(|n| *n == t.name)
            .ok_or_else(|| Error::Dataset(format!("{}: unknown tensor `{}`", entry.id, t.name)))?;
        let path = dir.join(&t.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let data = read_f32_le(&bytes, &path)?;
        let [rows, cols] = t.shape;
        if data.len() != rows * cols {
            return Err(Error::Dataset(format!(
                "{}: {} values, manifest shape {rows}x{cols}",
                path.display(),
                data.len()
            )));
        }
        mats[slot] = Some(Matrix::new(rows, cols, data)?);
    }
    let mut take = |i: usize| {
        mats[i]
            .take()
            .ok_or_else(|| Error::Dataset(format!("{}: missing tensor `{}`", entry.id, TENSORS[i])))
    };
    let log = |m: Matrix| FeatureMatrix::new(m, FeatureDomain::LogMel, HOP_MS);
    let noisy_lfbe = log(take(0)?)?;
    let reference_lfbe = log(take(1)?)?;
    let context_lfbe = log(take(2)?)?;
    let emb = take(3)?;
    if emb.shape() != (1, DVECTOR_DIM) {
        return Err(Error::Dataset(format!(
            "{}: speaker_embedding shape {:?}",
            entry.id,
            emb.shape()
        )));
    }
    let irm_target = take(4)?;
    let noisy_mel_linear = FeatureMatrix::new(take(5)?, FeatureDomain::LinearMel, HOP_MS)?;
    let clean_lfbe = log(take(6)?)?;
    let ex = UtteranceExample {
        noisy_lfbe,
        reference_lfbe,
        context_lfbe,
        speaker_embedding: emb.values,
        irm_target,
        noisy_mel_linear,
        clean_lfbe,
        condition,
        meta: ExampleMeta {
            id: entry.id,
            snr_db: entry.snr_db,
            speaker_id: entry.speaker_id,
            seed: entry.seed,
        },
    };
    ex.validate()?;
    Ok(ex)
}
