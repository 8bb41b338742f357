//! Versioned little-endian file formats.
//!
//! A matrix file is laid out as
//!
//! ```text
//! "DTRK" | version u16 | role u16 | rows u64 | cols u64 | dtype u16
//! | rows * cols values, row-major | metadata length u64 | metadata JSON
//! ```
//!
//! Datasets are a JSON manifest plus a sibling raw `f64` file. Every write
//! goes to a temporary file that is then renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::attribution::AttributionScoreMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::LdsBenchmark;
use crate::features::GradientFeatureMatrix;
use crate::linalg::Matrix;
use crate::model::ModelParams;
use crate::training::{Checkpoint, SubsetModelBank};

pub const MAGIC: [u8; 4] = *b"DTRK";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 8 + 8 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Features = 1,
    Scores = 2,
    OutputTensor = 3,
    Masks = 4,
    Checkpoint = 5,
}

impl Role {
    fn from_tag(tag: u16) -> Result<Self> {
        Ok(match tag {
            1 => Role::Features,
            2 => Role::Scores,
            3 => Role::OutputTensor,
            4 => Role::Masks,
            5 => Role::Checkpoint,
            _ => return Err(Error::Validation(format!("unknown role tag {tag}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_tag(tag: u16) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            _ => Err(Error::Validation(format!("unknown dtype tag {tag}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub role: Role,
    pub dtype: Dtype,
    pub matrix: Matrix,
    pub meta: serde_json::Value,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::param(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_matrix(role: Role, dtype: Dtype, m: &Matrix, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let meta_bytes = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.data.len() * dtype.size() + 8 + meta_bytes.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(role as u16).to_le_bytes());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    out.extend_from_slice(&(dtype as u16).to_le_bytes());
    match dtype {
        Dtype::F32 => m.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => m.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Validation("file is truncated".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u16_at(bytes: &[u8], pos: &mut usize) -> Result<u16> {
    Ok(u16::from_le_bytes(take(bytes, pos, 2)?.try_into().unwrap()))
}

fn u64_at(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap()))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<MatrixFile> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::Validation("bad magic: not a DTRK matrix file".into()));
    }
    let version = u16_at(bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let role = Role::from_tag(u16_at(bytes, &mut pos)?)?;
    let rows = u64_at(bytes, &mut pos)? as usize;
    let cols = u64_at(bytes, &mut pos)? as usize;
    let dtype = Dtype::from_tag(u16_at(bytes, &mut pos)?)?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Validation("matrix dimensions overflow".into()))?;
    let payload = take(
        bytes,
        &mut pos,
        count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Validation("matrix dimensions overflow".into()))?,
    )?;
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let meta_len = u64_at(bytes, &mut pos)? as usize;
    let meta = serde_json::from_slice(take(bytes, &mut pos, meta_len)?)?;
    if pos != bytes.len() {
        return Err(Error::Validation("trailing bytes after metadata".into()));
    }
    Ok(MatrixFile {
        role,
        dtype,
        matrix: Matrix::from_vec(rows, cols, data)?,
        meta,
    })
}

pub fn write_matrix_file(
    path: &Path,
    role: Role,
    dtype: Dtype,
    m: &Matrix,
    meta: &serde_json::Value,
) -> Result<()> {
    write_atomic(path, &encode_matrix(role, dtype, m, meta)?)
}

pub fn read_matrix_file(path: &Path) -> Result<MatrixFile> {
    decode_matrix(&read_bytes(path)?)
}

fn read_role(path: &Path, role: Role) -> Result<MatrixFile> {
    let f = read_matrix_file(path)?;
    if f.role != role {
        return Err(Error::Validation(format!(
            "{} holds {:?} data, expected {:?}",
            path.display(),
            f.role,
            role
        )));
    }
    Ok(f)
}

fn meta_field<T: DeserializeOwned>(meta: &serde_json::Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Validation(format!("metadata lacks '{key}'")))?;
    Ok(serde_json::from_value(v.clone())?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: crate::model::DenoiserArch,
    epoch: usize,
    train_config_hash: String,
    dataset_hash: String,
    subset_mask: Option<Vec<bool>>,
    model_digest: String,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let meta = CheckpointMeta {
        arch: ck.params.arch.clone(),
        epoch: ck.epoch,
        train_config_hash: ck.train_config_hash.clone(),
        dataset_hash: ck.dataset_hash.clone(),
        subset_mask: ck.subset_mask.clone(),
        model_digest: ck.params.digest(),
    };
    let theta = Matrix::from_vec(1, ck.params.theta.len(), ck.params.theta.clone())?;
    write_matrix_file(path, Role::Checkpoint, Dtype::F64, &theta, &serde_json::to_value(meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = read_role(path, Role::Checkpoint)?;
    if f.dtype != Dtype::F64 {
        return Err(Error::Validation("checkpoints must be stored as f64".into()));
    }
    let meta: CheckpointMeta = serde_json::from_value(f.meta)?;
    let params = ModelParams::from_flat(meta.arch, f.matrix.data)
        .map_err(|e| Error::Validation(format!("checkpoint parameters: {e}")))?;
    if params.digest() != meta.model_digest {
        return Err(Error::Validation("checkpoint digest mismatch".into()));
    }
    Ok(Checkpoint {
        params,
        epoch: meta.epoch,
        train_config_hash: meta.train_config_hash,
        dataset_hash: meta.dataset_hash,
        subset_mask: meta.subset_mask,
    })
}

pub fn save_features(path: &Path, f: &GradientFeatureMatrix, dtype: Dtype) -> Result<()> {
    let mut meta = serde_json::to_value(&f.meta)?;
    meta["dtype"] = serde_json::to_value(dtype)?;
    write_matrix_file(path, Role::Features, dtype, &f.phi, &meta)
}

pub fn load_features(path: &Path) -> Result<GradientFeatureMatrix> {
    let f = read_role(path, Role::Features)?;
    let meta: crate::features::FeatureMeta = serde_json::from_value(f.meta)?;
    if meta.sample_ids.len() != f.matrix.rows || meta.k != f.matrix.cols {
        return Err(Error::Validation("feature metadata disagrees with matrix shape".into()));
    }
    Ok(GradientFeatureMatrix {
        phi: f.matrix,
        meta,
    })
}

pub fn save_scores(path: &Path, s: &AttributionScoreMatrix, dtype: Dtype) -> Result<()> {
    let mut meta = serde_json::to_value(&s.meta)?;
    meta["dtype"] = serde_json::to_value(dtype)?;
    write_matrix_file(path, Role::Scores, dtype, &s.scores, &meta)
}

pub fn load_scores(path: &Path) -> Result<AttributionScoreMatrix> {
    let f = read_role(path, Role::Scores)?;
    let meta: crate::attribution::ScoreMeta = serde_json::from_value(f.meta)?;
    if meta.query_ids.len() != f.matrix.rows || meta.train_ids.len() != f.matrix.cols {
        return Err(Error::Validation("score metadata disagrees with matrix shape".into()));
    }
    Ok(AttributionScoreMatrix {
        scores: f.matrix,
        meta,
    })
}

fn masks_matrix(masks: &[Vec<bool>]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    Matrix::from_rows(&rows)
}

fn matrix_masks(m: &Matrix) -> Result<Vec<Vec<bool>>> {
    (0..m.rows)
        .map(|r| {
            m.row(r)
                .iter()
                .map(|&v| {
                    if v == 1.0 {
                        Ok(true)
                    } else if v == 0.0 {
                        Ok(false)
                    } else {
                        Err(Error::Validation(format!("mask entry {v} is not 0 or 1")))
                    }
                })
                .collect()
        })
        .collect()
}

pub const BENCH_MASKS: &str = "masks.dtrk";
pub const BENCH_OUTPUTS: &str = "outputs.dtrk";
pub const BENCH_META: &str = "benchmark.json";

/// Saves a benchmark as a directory holding the masks, the output tensor
/// (rows are `(subset, seed)` pairs, columns are queries) and a JSON file.
pub fn save_benchmark(dir: &Path, b: &LdsBenchmark) -> Result<()> {
    b.validate()?;
    let seeds = b.num_seeds();
    let meta = serde_json::json!({
        "query_ids": b.query_ids,
        "output_spec": b.output_spec,
        "orientation": b.orientation,
        "output_seed": b.output_seed,
        "subsets": b.num_subsets(),
        "seeds": seeds,
        "train_size": b.num_train(),
        "config_digest": b.config_digest,
    });
    write_matrix_file(&dir.join(BENCH_MASKS), Role::Masks, Dtype::F64, &masks_matrix(&b.masks)?, &meta)?;
    let rows: Vec<Vec<f64>> = b.outputs.iter().flatten().cloned().collect();
    write_matrix_file(
        &dir.join(BENCH_OUTPUTS),
        Role::OutputTensor,
        Dtype::F64,
        &Matrix::from_rows(&rows)?,
        &meta,
    )?;
    write_atomic(&dir.join(BENCH_META), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn load_benchmark(dir: &Path) -> Result<LdsBenchmark> {
    let meta: serde_json::Value = serde_json::from_slice(&read_bytes(&dir.join(BENCH_META))?)?;
    let masks = matrix_masks(&read_role(&dir.join(BENCH_MASKS), Role::Masks)?.matrix)?;
    let out = read_role(&dir.join(BENCH_OUTPUTS), Role::OutputTensor)?.matrix;
    let seeds: usize = meta_field(&meta, "seeds")?;
    if seeds == 0 || out.rows != masks.len() * seeds {
        return Err(Error::Validation("output tensor does not match subsets x seeds".into()));
    }
    let rows = out.row_vecs();
    let outputs = rows.chunks(seeds).map(|c| c.to_vec()).collect();
    let b = LdsBenchmark {
        masks,
        outputs,
        query_ids: meta_field(&meta, "query_ids")?,
        output_spec: meta_field(&meta, "output_spec")?,
        orientation: meta_field(&meta, "orientation")?,
        output_seed: meta_field(&meta, "output_seed")?,
        config_digest: meta.get("config_digest").and_then(|v| v.as_str()).map(str::to_string),
    };
    b.validate()?;
    Ok(b)
}

const BANK_MASKS: &str = "masks.dtrk";

fn bank_model_path(dir: &Path, m: usize, s: usize) -> PathBuf {
    dir.join(format!("subset{m:04}_seed{s}.dtrk"))
}

pub fn save_bank(dir: &Path, bank: &SubsetModelBank) -> Result<()> {
    let seeds = bank.models.first().map_or(0, Vec::len);
    let meta = serde_json::json!({ "subsets": bank.masks.len(), "seeds": seeds });
    write_matrix_file(&dir.join(BANK_MASKS), Role::Masks, Dtype::F64, &masks_matrix(&bank.masks)?, &meta)?;
    for (m, replicates) in bank.models.iter().enumerate() {
        for (s, ck) in replicates.iter().enumerate() {
            save_checkpoint(&bank_model_path(dir, m, s), ck)?;
        }
    }
    Ok(())
}

pub fn load_bank(dir: &Path) -> Result<SubsetModelBank> {
    let f = read_role(&dir.join(BANK_MASKS), Role::Masks)?;
    let seeds: usize = meta_field(&f.meta, "seeds")?;
    let masks = matrix_masks(&f.matrix)?;
    let models = (0..masks.len())
        .map(|m| (0..seeds).map(|s| load_checkpoint(&bank_model_path(dir, m, s))).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok(SubsetModelBank { masks, models })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    n: usize,
    dim: usize,
    dtype: Dtype,
    train: Vec<usize>,
    validation: Vec<usize>,
    labels: Vec<u32>,
    data_file: String,
    digest: String,
}

fn data_file_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (JSON manifest) and `<path>.bin` with extension replaced.
pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    d.validate()?;
    let bin = data_file_for(path);
    let bytes: Vec<u8> = d.vectors.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = DatasetManifest {
        name: d.name.clone(),
        n: d.len(),
        dim: d.dim,
        dtype: Dtype::F64,
        train: d.train.clone(),
        validation: d.validation.clone(),
        labels: d.labels.clone(),
        data_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
        digest: crate::training::sha256_hex(&bytes),
    };
    write_atomic(&bin, &bytes)?;
    write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&read_bytes(path)?)?;
    if manifest.dtype != Dtype::F64 {
        return Err(Error::Validation("dataset payload must be f64".into()));
    }
    let bin = path.with_file_name(&manifest.data_file);
    let bytes = read_bytes(&bin)?;
    if bytes.len() != manifest.n * manifest.dim * 8 {
        return Err(Error::Validation(format!(
            "{} holds {} bytes, expected {}",
            bin.display(),
            bytes.len(),
            manifest.n * manifest.dim * 8
        )));
    }
    if crate::training::sha256_hex(&bytes) != manifest.digest {
        return Err(Error::Validation("dataset payload digest mismatch".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let vectors = if manifest.dim == 0 {
        vec![Vec::new(); manifest.n]
    } else {
        values.chunks(manifest.dim).map(<[f64]>::to_vec).collect()
    };
    let d = Dataset {
        name: manifest.name,
        dim: manifest.dim,
        vectors,
        labels: manifest.labels,
        train: manifest.train,
        validation: manifest.validation,
    };
    d.validate()?;
    Ok(d)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, DenoiserArch};

    fn sample_matrix() -> Matrix {
        Matrix::from_rows(&[vec![1.0, -2.5, 3.25], vec![0.1, 1e-300, f64::MAX]]).unwrap()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = sample_matrix();
        let meta = serde_json::json!({"method": "trak", "lambda": 0.1});
        let bytes = encode_matrix(Role::Scores, Dtype::F64, &m, &meta).unwrap();
        let back = decode_matrix(&bytes).unwrap();
        assert_eq!(back.matrix, m);
        assert_eq!(back.meta, meta);
        assert_eq!(back.role, Role::Scores);
        assert_eq!(encode_matrix(Role::Scores, Dtype::F64, &back.matrix, &back.meta).unwrap(), bytes);
    }

    #[test]
    fn f32_storage_is_stable_after_first_rounding() {
        let m = Matrix::from_rows(&[vec![0.1, 1.0 / 3.0]]).unwrap();
        let meta = serde_json::json!({});
        let once = decode_matrix(&encode_matrix(Role::Features, Dtype::F32, &m, &meta).unwrap()).unwrap();
        assert_eq!(once.matrix.data[0], 0.1f32 as f64);
        let twice = decode_matrix(&encode_matrix(Role::Features, Dtype::F32, &once.matrix, &meta).unwrap()).unwrap();
        assert_eq!(once.matrix, twice.matrix);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_matrix(Role::Features, Dtype::F32, &sample_matrix(), &serde_json::json!({})).unwrap();
        assert_eq!(&bytes[..4], b"DTRK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), Role::Features as u16);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes([bytes[24], bytes[25]]), 1);
        assert_eq!(bytes.len(), HEADER_LEN + 6 * 4 + 8 + 2);
    }

    #[test]
    fn corrupt_and_version_errors() {
        let mut bytes = encode_matrix(Role::Scores, Dtype::F64, &sample_matrix(), &serde_json::json!({})).unwrap();
        assert!(matches!(decode_matrix(&bytes[..10]), Err(Error::Validation(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix(&bad), Err(Error::Validation(_))));
        bytes[4] = 9;
        let err = decode_matrix(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
        assert!(err.to_string().contains('9') && err.to_string().contains('1'));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint {
            params: init_params(&DenoiserArch::new(3, 4, vec![5]), 2).unwrap(),
            epoch: 7,
            train_config_hash: "abc".into(),
            dataset_hash: "def".into(),
            subset_mask: Some(vec![true, false, true]),
        };
        let p = dir.path().join("ck.dtrk");
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        assert!(matches!(load_features(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = crate::data::generate(&crate::data::DataSpec::default(), 1).unwrap();
        let p = dir.path().join("data.json");
        save_dataset(&p, &d).unwrap();
        assert!(dir.path().join("data.bin").exists());
        assert_eq!(load_dataset(&p).unwrap(), d);
    }
}
