//! Deterministic synthetic-cohort generator.
//!
//! Each subject carries a latent risk `rho ~ U(-1, 1)`. The CT volume
//! holds a spherical blob whose radius scales with `(1 + rho)`, the PET
//! volume one whose peak intensity scales with `(1 + rho)`, both over
//! Gaussian noise. Event times follow a discrete-time process with
//! hazard `sigmoid(alpha + signal * rho)` on a fixed ten-interval grid,
//! with `alpha` set so the horizon event fraction is about 60% at zero
//! signal. Subjects surviving the horizon are censored there; on top of
//! that, each subject is independently censored early with probability
//! `censor_rate` at a uniform fraction of its observed time.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::CohortRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GENERATOR_INTERVALS: usize = 10;
const NOISE_STD: f64 = 0.15;
const EDGE_SOFTNESS: f64 = 0.75;

#[derive(Clone, Debug)]
pub struct GenerateParams {
    pub n: usize,
    pub dims: (usize, usize, usize),
    pub signal: f64,
    pub censor_rate: f64,
    pub seed: u64,
}

pub struct SyntheticCohort {
    pub records: Vec<CohortRecord>,
    /// Hidden per-subject risk, for oracle evaluation only.
    pub truth: Vec<(String, f64)>,
}

/// Writes `volumes/`, `manifest.csv`, and `truth.csv` under `out_dir`
/// and returns the records plus the hidden risks. Identical parameters
/// produce byte-identical outputs.
pub fn generate_synthetic(out_dir: &Path, params: &GenerateParams) -> Result<SyntheticCohort> {
    let (d, h, w) = params.dims;
    if d < 8 || h < 8 || w < 8 {
        return Err(Error::BadDims { dims: params.dims });
    }
    if !(0.0..1.0).contains(&params.censor_rate) {
        return Err(Error::ConfigError(format!(
            "censor_rate must be in [0, 1), got {}",
            params.censor_rate
        )));
    }
    if params.signal < 0.0 {
        return Err(Error::ConfigError(format!("signal must be >= 0, got {}", params.signal)));
    }
    let volume_dir = out_dir.join("volumes");
    fs::create_dir_all(&volume_dir).map_err(|e| Error::io(&volume_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    // horizon event fraction 0.6 at zero signal: (1 - h0)^10 = 0.4
    let h0 = 1.0 - 0.4f64.powf(0.1);
    let alpha = (h0 / (1.0 - h0)).ln();

    let min_dim = d.min(h).min(w) as f64;
    let center = ((d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);

    let mut records = Vec::with_capacity(params.n);
    let mut truth = Vec::with_capacity(params.n);
    let mut manifest = String::from("subject_id,ct_path,pet_path,time,event\n");
    let mut truth_csv = String::from("subject_id,rho\n");

    for i in 0..params.n {
        let subject_id = format!("sub{:04}", i + 1);
        let rho = rng.random_range(-1.0..1.0);

        let ct_radius = 0.18 * min_dim * (1.0 + rho);
        let ct = blob_volume(params.dims, center, ct_radius, 1.0, &noise, &mut rng);
        let pet_radius = 0.16 * min_dim;
        let pet_peak = 0.9 * (1.0 + rho);
        let pet = blob_volume(params.dims, center, pet_radius, pet_peak, &noise, &mut rng);

        let ct_name = format!("{subject_id}_ct.svol");
        let pet_name = format!("{subject_id}_pet.svol");
        super::write_volume(&volume_dir.join(&ct_name), &ct)?;
        super::write_volume(&volume_dir.join(&pet_name), &pet)?;

        let (mut time, mut event) = draw_outcome(alpha, params.signal * rho, &mut rng);
        if rng.random_range(0.0..1.0) < params.censor_rate {
            time *= open_unit(&mut rng);
            event = false;
        }

        manifest.push_str(&format!(
            "{subject_id},volumes/{ct_name},volumes/{pet_name},{time},{}\n",
            u8::from(event)
        ));
        truth_csv.push_str(&format!("{subject_id},{rho}\n"));
        records.push(CohortRecord {
            subject_id: subject_id.clone(),
            ct_path: volume_dir.join(&ct_name),
            pet_path: volume_dir.join(&pet_name),
            clinical: None,
            time,
            event,
        });
        truth.push((subject_id, rho));
    }

    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let truth_path = out_dir.join("truth.csv");
    fs::write(&truth_path, truth_csv).map_err(|e| Error::io(&truth_path, e))?;
    Ok(SyntheticCohort { records, truth })
}

/// Noise plus a soft-edged sphere of the given radius and amplitude.
fn blob_volume(
    (d, h, w): (usize, usize, usize),
    center: (f64, f64, f64),
    radius: f64,
    amplitude: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = z as f64 - center.0;
                let dy = y as f64 - center.1;
                let dx = x as f64 - center.2;
                let dist = (dz * dz + dy * dy + dx * dx).sqrt();
                let shell = 1.0 / (1.0 + ((dist - radius) / EDGE_SOFTNESS).exp());
                data.push(amplitude * shell + noise.sample(rng));
            }
        }
    }
    Tensor::new_unchecked(vec![1, d, h, w], data)
}

/// Walks the ten-interval hazard process; events land uniformly inside
/// their interval, survivors are censored at the horizon.
fn draw_outcome(alpha: f64, risk_shift: f64, rng: &mut ChaCha8Rng) -> (f64, bool) {
    let hazard = 1.0 / (1.0 + (-(alpha + risk_shift)).exp());
    for j in 1..=GENERATOR_INTERVALS {
        if rng.random_range(0.0..1.0) < hazard {
            let within = open_unit(rng);
            return ((j - 1) as f64 + within, true);
        }
    }
    (GENERATOR_INTERVALS as f64, false)
}

/// Uniform draw from the open-above, closed-below flipped to (0, 1].
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random_range(0.0..1.0)
}
