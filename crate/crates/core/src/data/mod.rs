//! Cohort representation and IO: manifest parsing, the SVOL volume
//! format, deterministic splits, and batch-ready volume loading
//! (center crop/pad to the configured input size, then per-volume
//! z-score normalization computed on the original voxels).

mod svol;
pub mod synthetic;

pub use svol::{decode_volume, encode_volume, read_volume, write_volume};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::tensor::{elem, Element, Tensor};

/// One subject as listed in a manifest: volume paths, optional clinical
/// vector, and observed outcome.
#[derive(Clone, Debug)]
pub struct CohortRecord {
    pub subject_id: String,
    pub ct_path: PathBuf,
    pub pet_path: PathBuf,
    pub clinical: Option<Vec<f64>>,
    pub time: f64,
    pub event: bool,
}

const MANIFEST_COLUMNS: [&str; 5] = ["subject_id", "ct_path", "pet_path", "time", "event"];

/// Parses a manifest CSV (`subject_id,ct_path,pet_path,time,event
/// [,clin_1..clin_f]`) and validates every row: volume files must exist
/// under `volume_dir`, times must be positive, events must be 0 or 1.
pub fn load_cohort(manifest: &Path, volume_dir: &Path) -> Result<Vec<CohortRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest)
        .map_err(|e| Error::SchemaError(format!("{}: {e}", manifest.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::SchemaError(format!("{}: {e}", manifest.display())))?
        .clone();
    if headers.len() < MANIFEST_COLUMNS.len() {
        return Err(Error::SchemaError(format!(
            "expected at least {} columns, got {}",
            MANIFEST_COLUMNS.len(),
            headers.len()
        )));
    }
    for (i, want) in MANIFEST_COLUMNS.iter().enumerate() {
        if &headers[i] != *want {
            return Err(Error::SchemaError(format!(
                "column {} must be '{want}', got '{}'",
                i + 1,
                &headers[i]
            )));
        }
    }
    let clinical_cols = headers.len() - MANIFEST_COLUMNS.len();
    for k in 0..clinical_cols {
        let want = format!("clin_{}", k + 1);
        let got = &headers[MANIFEST_COLUMNS.len() + k];
        if got != want {
            return Err(Error::SchemaError(format!("clinical column {} must be '{want}', got '{got}'", k + 1)));
        }
    }

    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row_no = row_idx + 2; // 1-based, after the header
        let row = row.map_err(|e| Error::SchemaError(format!("row {row_no}: {e}")))?;
        if row.len() != headers.len() {
            return Err(Error::SchemaError(format!(
                "row {row_no}: {} fields, expected {}",
                row.len(),
                headers.len()
            )));
        }
        let subject_id = row[0].to_string();
        if seen.insert(subject_id.clone(), row_no).is_some() {
            return Err(Error::SchemaError(format!("row {row_no}: duplicate subject_id '{subject_id}'")));
        }
        let time: f64 = row[3]
            .parse()
            .map_err(|_| Error::SchemaError(format!("row {row_no}: time '{}' is not a number", &row[3])))?;
        if !time.is_finite() || time <= 0.0 {
            return Err(Error::NonPositiveTime { context: format!("manifest row {row_no}") });
        }
        let event = match &row[4] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::SchemaError(format!("row {row_no}: event '{other}' must be 0 or 1")))
            }
        };
        let mut clinical = Vec::with_capacity(clinical_cols);
        for k in 0..clinical_cols {
            let raw = &row[MANIFEST_COLUMNS.len() + k];
            let v: f64 = raw.parse().map_err(|_| {
                Error::SchemaError(format!("row {row_no}: clin_{} '{raw}' is not a number", k + 1))
            })?;
            clinical.push(v);
        }
        let ct_path = volume_dir.join(&row[1]);
        let pet_path = volume_dir.join(&row[2]);
        for p in [&ct_path, &pet_path] {
            if !p.is_file() {
                return Err(Error::MissingVolume { path: p.clone(), row: row_no });
            }
        }
        records.push(CohortRecord {
            subject_id,
            ct_path,
            pet_path,
            clinical: (clinical_cols > 0).then_some(clinical),
            time,
            event,
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::ConfigError(format!("unknown split '{other}'"))),
        }
    }
}

/// Disjoint, exhaustive subject assignment at 80/10/10 proportions
/// (train receives the rounding remainder).
#[derive(Clone, Debug)]
pub struct SplitAssignment {
    assignment: HashMap<String, Split>,
}

impl SplitAssignment {
    pub fn of(&self, subject_id: &str) -> Option<Split> {
        self.assignment.get(subject_id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }

    /// Indices of `records` assigned to `split`, in record order.
    pub fn indices(&self, records: &[CohortRecord], split: Split) -> Vec<usize> {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.of(&r.subject_id) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Builds an assignment placing every record in `split` (used for
    /// deliberate overfit runs on a whole cohort).
    pub fn all_in(records: &[CohortRecord], split: Split) -> Self {
        SplitAssignment {
            assignment: records.iter().map(|r| (r.subject_id.clone(), split)).collect(),
        }
    }
}

/// Seeded shuffle followed by proportional assignment. The same seed
/// always produces the same assignment.
pub fn split_cohort(records: &[CohortRecord], seed: u64) -> Result<SplitAssignment> {
    let n = records.len();
    if n < 10 {
        return Err(Error::CohortTooSmall { n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let val = n / 10;
    let test = n / 10;
    let train = n - val - test;
    let mut assignment = HashMap::with_capacity(n);
    for (pos, &idx) in order.iter().enumerate() {
        let split = if pos < train {
            Split::Train
        } else if pos < train + val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(records[idx].subject_id.clone(), split);
    }
    Ok(SplitAssignment { assignment })
}

/// A subject with its volumes loaded, resized, and normalized, ready
/// for batching.
pub struct LoadedSubject<T: Element> {
    pub subject_id: String,
    pub ct: Tensor<T>,  // [1,D,H,W]
    pub pet: Tensor<T>, // [1,D,H,W]
    pub clinical: Option<Vec<T>>,
    pub time: f64,
    pub event: bool,
}

/// Loads every subject's volumes, center-crops/pads them to
/// `input_dims`, and z-scores each volume. When `require_clinical` is
/// set, rows without clinical values are rejected.
pub fn load_volumes<T: Element>(
    records: &[CohortRecord],
    input_dims: (usize, usize, usize),
    require_clinical: bool,
) -> Result<Vec<LoadedSubject<T>>> {
    let mut subjects = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        if require_clinical && rec.clinical.is_none() {
            return Err(Error::MissingClinical { row: i + 2 });
        }
        let ct = prepare_volume(read_volume::<T>(&rec.ct_path)?, input_dims);
        let pet = prepare_volume(read_volume::<T>(&rec.pet_path)?, input_dims);
        subjects.push(LoadedSubject {
            subject_id: rec.subject_id.clone(),
            ct,
            pet,
            clinical: rec.clinical.as_ref().map(|c| c.iter().map(|&v| elem::<T>(v)).collect()),
            time: rec.time,
            event: rec.event,
        });
    }
    Ok(subjects)
}

/// z-score on the original voxels, then center crop/pad with zeros
/// (zero is the post-normalization mean).
fn prepare_volume<T: Element>(volume: Tensor<T>, target: (usize, usize, usize)) -> Tensor<T> {
    let normalized = zscore(&volume);
    fit_to(&normalized, target)
}

fn zscore<T: Element>(volume: &Tensor<T>) -> Tensor<T> {
    let n = volume.numel() as f64;
    let mean = volume.data().iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let var = volume
        .data()
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let denom = if std < 1e-12 { 1.0 } else { std };
    let data = volume
        .data()
        .iter()
        .map(|v| elem::<T>((v.to_f64().unwrap() - mean) / denom))
        .collect();
    Tensor::new_unchecked(volume.shape().to_vec(), data)
}

fn fit_to<T: Element>(volume: &Tensor<T>, (td, th, tw): (usize, usize, usize)) -> Tensor<T> {
    let (d, h, w) = match volume.shape() {
        [1, d, h, w] => (*d, *h, *w),
        _ => unreachable!("read_volume returns [1,D,H,W]"),
    };
    if (d, h, w) == (td, th, tw) {
        return volume.clone();
    }
    let mut out = vec![T::zero(); td * th * tw];
    // source start when cropping, destination start when padding
    let (sd, dd) = offsets(d, td);
    let (sh, dh) = offsets(h, th);
    let (sw, dw) = offsets(w, tw);
    let copy_d = d.min(td);
    let copy_h = h.min(th);
    let copy_w = w.min(tw);
    for z in 0..copy_d {
        for y in 0..copy_h {
            for x in 0..copy_w {
                out[((dd + z) * th + (dh + y)) * tw + (dw + x)] =
                    volume.data()[((sd + z) * h + (sh + y)) * w + (sw + x)];
            }
        }
    }
    Tensor::new_unchecked(vec![1, td, th, tw], out)
}

fn offsets(cur: usize, target: usize) -> (usize, usize) {
    if cur >= target {
        ((cur - target) / 2, 0)
    } else {
        (0, (target - cur) / 2)
    }
}

/// Stacks a batch of loaded subjects into per-modality input tensors.
pub fn batch_inputs<T: Element>(
    subjects: &[&LoadedSubject<T>],
    modalities: &[Modality],
) -> Result<Vec<(Modality, Tensor<T>)>> {
    if subjects.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let n = subjects.len();
    let mut out = Vec::with_capacity(modalities.len());
    for &m in modalities {
        let tensor = match m {
            Modality::Ct | Modality::Pet => {
                let pick = |s: &LoadedSubject<T>| if m == Modality::Ct { s.ct.clone() } else { s.pet.clone() };
                let dims = pick(subjects[0]).shape()[1..].to_vec();
                let mut data = Vec::with_capacity(n * dims.iter().product::<usize>());
                for s in subjects {
                    let v = pick(s);
                    if v.shape()[1..] != dims[..] {
                        return Err(Error::shape(
                            "batch_inputs",
                            format!("volume dims {:?} vs {:?}", &v.shape()[1..], dims),
                        ));
                    }
                    data.extend_from_slice(v.data());
                }
                Tensor::new_unchecked(vec![n, 1, dims[0], dims[1], dims[2]], data)
            }
            Modality::Clinical => {
                let f = subjects[0].clinical.as_ref().map(|c| c.len()).unwrap_or(0);
                let mut data = Vec::with_capacity(n * f);
                for (i, s) in subjects.iter().enumerate() {
                    let c = s.clinical.as_ref().ok_or(Error::MissingClinical { row: i })?;
                    if c.len() != f {
                        return Err(Error::SchemaError(format!(
                            "clinical width {} vs {f} for subject {}",
                            c.len(),
                            s.subject_id
                        )));
                    }
                    data.extend_from_slice(c);
                }
                Tensor::new_unchecked(vec![n, f], data)
            }
        };
        out.push((m, tensor));
    }
    Ok(out)
}
