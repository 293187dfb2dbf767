//! Paired-eye synthetic datasets with known regression functions and a known
//! label copula.
//!
//! Each patient has a shared severity `u ~ N(0, 1)` and per-eye perturbations
//! `v_e = asymmetry_strength · N(0, 1)`. An eye's severity `s_e = u + v_e`
//! sets both its image and its label means:
//!
//! * `g1 = al_center + al_slope · s_os`, `g2` likewise with `s_od`;
//! * `g3 = logit(base_p3) + hm_slope · s_os`, `g4 = logit(base_p4) + hm_slope · s_od`.
//!
//! Images are background noise plus an elliptical radial-basis blob whose
//! radius, peak intensity and elongation grow smoothly with `s_e`. The OD
//! image is the horizontal mirror of the OS layout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::copula::{sample_copula_one, sigmoid, CopulaMarginals, CopulaParams, CorrelationMatrix4, LabelVector};
use crate::error::{Error, Result};
use crate::io_util::build_dir_atomic;
use crate::nn::{Eye, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const IMAGES_MAGIC: &[u8; 8] = b"BICOPIMG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub image_size: usize,
    pub channels: usize,
    pub signal_strength: f64,
    pub asymmetry_strength: f64,
    pub noise_std: f64,
    pub true_gamma: CorrelationMatrix4,
    pub true_sigma1: f64,
    pub true_sigma2: f64,
    pub base_p3: f64,
    pub base_p4: f64,
    pub al_center: f64,
    pub al_slope: f64,
    pub hm_slope: f64,
    pub seed: u64,
}

/// The strongly coupled default: `γ12 = γ34 = 0.7`, cross terms `0.4`.
pub fn default_gamma() -> CorrelationMatrix4 {
    CorrelationMatrix4::from_offdiag([0.7, 0.4, 0.4, 0.4, 0.4, 0.7]).expect("default correlation is PD")
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 2000,
            image_size: 32,
            channels: 1,
            signal_strength: 1.0,
            asymmetry_strength: 0.5,
            noise_std: 0.2,
            true_gamma: default_gamma(),
            true_sigma1: 0.5,
            true_sigma2: 0.5,
            base_p3: 0.3,
            base_p4: 0.3,
            al_center: 24.0,
            al_slope: 1.0,
            hm_slope: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return fail("n_patients must be at least 1".into());
        }
        if self.image_size < 4 {
            return fail(format!("image_size must be at least 4, got {}", self.image_size));
        }
        if !matches!(self.channels, 1 | 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        for (name, p) in [("base_p3", self.base_p3), ("base_p4", self.base_p4)] {
            if !(p > 0.0 && p < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        if !(self.asymmetry_strength >= 0.0) || !(self.noise_std >= 0.0) {
            return fail("asymmetry_strength and noise_std must be non-negative".into());
        }
        if !(self.true_sigma1 > 0.0 && self.true_sigma2 > 0.0) {
            return fail("true sigmas must be positive".into());
        }
        if ![self.signal_strength, self.al_center, self.al_slope, self.hm_slope]
            .iter()
            .all(|v| v.is_finite())
        {
            return fail("signal parameters must be finite".into());
        }
        Ok(())
    }

    pub fn true_params(&self) -> Result<CopulaParams> {
        CopulaParams::new(self.true_gamma, self.true_sigma1, self.true_sigma2)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Short content hash of the configuration; identifies the dataset.
    pub fn dataset_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Hidden factors kept for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub u: f64,
    pub v_os: f64,
    pub v_od: f64,
    /// Regression means `g1, g2` and classification logits `g3, g4`.
    pub g: [f64; 4],
    /// The latent normal vector behind the labels.
    pub z: [f64; 4],
}

impl LatentRecord {
    pub fn true_prediction(&self) -> crate::copula::MarginalPrediction {
        crate::copula::MarginalPrediction {
            mu1: self.g[0],
            mu2: self.g[1],
            logit3: self.g[2],
            logit4: self.g[3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSample {
    pub image_os: Tensor,
    pub image_od: Tensor,
    pub labels: LabelVector,
    pub latent: LatentRecord,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Noise-free image for severity `s`, `channels × size × size`.
pub fn render_signal(cfg: &SynthConfig, s: f64, eye: Eye) -> Vec<f64> {
    let n = cfg.image_size as f64;
    let t = (s / 1.5).tanh();
    let radius = n * (0.14 + 0.05 * t);
    let amp = cfg.signal_strength * (1.0 + 0.5 * t);
    let elong = 1.0 + 0.3 * t;
    let cx = match eye {
        Eye::Os => 0.38 * n,
        Eye::Od => n - 1.0 - 0.38 * n,
    };
    let cy = 0.5 * (n - 1.0);
    let (rx, ry) = (radius * elong, radius / elong);
    let mut plane = Vec::with_capacity(cfg.image_size * cfg.image_size);
    for y in 0..cfg.image_size {
        for x in 0..cfg.image_size {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            plane.push(amp * (-0.5 * (dx * dx + dy * dy)).exp());
        }
    }
    const CHANNEL_GAIN: [f64; 3] = [1.0, 0.7, 0.4];
    (0..cfg.channels)
        .flat_map(|c| plane.iter().map(move |v| v * CHANNEL_GAIN[c]))
        .collect()
}

/// Deterministic given `(cfg.seed, index)`: each patient draws from its own
/// ChaCha stream.
pub fn generate_patient(cfg: &SynthConfig, index: usize) -> Result<PatientSample> {
    if index >= cfg.n_patients {
        return Err(Error::Config(format!(
            "patient index {index} out of range for {} patients",
            cfg.n_patients
        )));
    }
    let params = cfg.true_params()?;
    generate_with(cfg, &params, &params.gamma.cholesky(), index)
}

fn generate_with(cfg: &SynthConfig, params: &CopulaParams, chol: &[[f64; 4]; 4], index: usize) -> Result<PatientSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let u = draw();
    let v_os = cfg.asymmetry_strength * draw();
    let v_od = cfg.asymmetry_strength * draw();
    let (s_os, s_od) = (u + v_os, u + v_od);
    let g = [
        cfg.al_center + cfg.al_slope * s_os,
        cfg.al_center + cfg.al_slope * s_od,
        logit(cfg.base_p3) + cfg.hm_slope * s_os,
        logit(cfg.base_p4) + cfg.hm_slope * s_od,
    ];
    let shape = vec![cfg.channels, cfg.image_size, cfg.image_size];
    let mut images = [Eye::Os, Eye::Od].map(|eye| {
        let s = if eye == Eye::Os { s_os } else { s_od };
        render_signal(cfg, s, eye)
    });
    for img in images.iter_mut() {
        for p in img.iter_mut() {
            *p += cfg.noise_std * draw();
        }
    }
    let marg = CopulaMarginals {
        mu1: g[0],
        mu2: g[1],
        p3: sigmoid(g[2]),
        p4: sigmoid(g[3]),
    };
    let (labels, z) = sample_copula_one(params, chol, &marg, &mut rng);
    let [os, od] = images;
    Ok(PatientSample {
        image_os: Tensor::new(shape.clone(), os)?,
        image_od: Tensor::new(shape, od)?,
        labels,
        latent: LatentRecord { u, v_os, v_od, g, z },
    })
}

/// All patients in memory. Images are stored patient-major, OS before OD.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    images: Vec<f64>,
    pub labels: Vec<LabelVector>,
    pub latents: Vec<LatentRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dataset_id: String,
    config: SynthConfig,
    image_shape: Vec<usize>,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.true_params()?;
        let chol = params.gamma.cholesky();
        let mut images = Vec::with_capacity(cfg.n_patients * 2 * cfg.image_len());
        let mut labels = Vec::with_capacity(cfg.n_patients);
        let mut latents = Vec::with_capacity(cfg.n_patients);
        for i in 0..cfg.n_patients {
            let p = generate_with(cfg, &params, &chol, i)?;
            images.extend_from_slice(p.image_os.data());
            images.extend_from_slice(p.image_od.data());
            labels.push(p.labels);
            latents.push(p.latent);
        }
        Ok(Dataset {
            config: cfg.clone(),
            images,
            labels,
            latents,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.config.image_len()
    }

    pub fn image(&self, patient: usize, eye: Eye) -> &[f64] {
        let len = self.image_len();
        &self.images[(2 * patient + eye.index()) * len..][..len]
    }

    /// Concatenated images of the listed patients for one eye.
    pub fn gather(&self, patients: &[usize], eye: Eye) -> Vec<f64> {
        let mut out = Vec::with_capacity(patients.len() * self.image_len());
        for &p in patients {
            out.extend_from_slice(self.image(p, eye));
        }
        out
    }

    pub fn dataset_id(&self) -> String {
        self.config.dataset_id()
    }

    /// Writes `manifest.json`, `images.bin`, `labels.csv` and `latent.csv`
    /// into a fresh directory, renamed into place once complete.
    pub fn write(&self, dir: &Path) -> Result<()> {
        build_dir_atomic(dir, |tmp| {
            let c = &self.config;
            let manifest = Manifest {
                format_version: FORMAT_VERSION,
                dataset_id: self.dataset_id(),
                config: c.clone(),
                image_shape: vec![self.len(), 2, c.channels, c.image_size, c.image_size],
            };
            let path = tmp.join("manifest.json");
            fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;

            let mut bin = Vec::with_capacity(self.images.len() * 8 + 64);
            bin.extend_from_slice(IMAGES_MAGIC);
            bin.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            bin.extend_from_slice(&(manifest.image_shape.len() as u32).to_le_bytes());
            for d in &manifest.image_shape {
                bin.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &self.images {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            let path = tmp.join("images.bin");
            fs::write(&path, bin).map_err(|e| Error::io(&path, e))?;

            let mut csv = String::from("patient_id,al_os,al_od,hm_os,hm_od\n");
            for (i, l) in self.labels.iter().enumerate() {
                writeln!(csv, "{i},{},{},{},{}", l.y1, l.y2, u8::from(l.y3), u8::from(l.y4)).expect("string write");
            }
            let path = tmp.join("labels.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

            let mut csv = String::from("patient_id,u,v_os,v_od,g1,g2,g3,g4,z1,z2,z3,z4\n");
            for (i, r) in self.latents.iter().enumerate() {
                write!(csv, "{i},{},{},{}", r.u, r.v_os, r.v_od).expect("string write");
                for v in r.g.iter().chain(&r.z) {
                    write!(csv, ",{v}").expect("string write");
                }
                csv.push('\n');
            }
            let path = tmp.join("latent.csv");
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        let c = manifest.config;
        c.validate()?;
        let n = c.n_patients;
        let expect_shape = vec![n, 2, c.channels, c.image_size, c.image_size];
        if manifest.image_shape != expect_shape {
            return Err(Error::format(&path, "image shape disagrees with config"));
        }

        let path = dir.join("images.bin");
        let bin = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let images = parse_images(&bin, &expect_shape).map_err(|r| Error::format(&path, r))?;

        let path = dir.join("labels.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels = parse_labels(&text, n).map_err(|r| Error::format(&path, r))?;

        let path = dir.join("latent.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let latents = parse_latents(&text, n).map_err(|r| Error::format(&path, r))?;

        let ds = Dataset {
            config: c,
            images,
            labels,
            latents,
        };
        if ds.dataset_id() != manifest.dataset_id {
            return Err(Error::format(dir.join("manifest.json"), "dataset_id does not match config"));
        }
        Ok(ds)
    }
}

fn parse_images(bin: &[u8], shape: &[usize]) -> std::result::Result<Vec<f64>, String> {
    let header = 8 + 4 + 4 + 8 * shape.len();
    if bin.len() < header {
        return Err("truncated header".into());
    }
    if &bin[..8] != IMAGES_MAGIC {
        return Err("bad magic".into());
    }
    let version = u32::from_le_bytes(bin[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = u32::from_le_bytes(bin[12..16].try_into().expect("4 bytes")) as usize;
    if rank != shape.len() {
        return Err(format!("rank {rank}, expected {}", shape.len()));
    }
    for (i, d) in shape.iter().enumerate() {
        let got = u64::from_le_bytes(bin[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes"));
        if got != *d as u64 {
            return Err(format!("dimension {i} is {got}, expected {d}"));
        }
    }
    let n: usize = shape.iter().product();
    let body = &bin[header..];
    if body.len() != n * 8 {
        return Err(format!("expected {} data bytes, found {}", n * 8, body.len()));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn rows(text: &str, header: &str, n: usize, width: usize) -> std::result::Result<Vec<Vec<String>>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err("unexpected header".into());
    }
    let out: Vec<Vec<String>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    if out.len() != n {
        return Err(format!("expected {n} rows, found {}", out.len()));
    }
    for (i, r) in out.iter().enumerate() {
        if r.len() != width || r[0] != i.to_string() {
            return Err(format!("malformed row {i}"));
        }
    }
    Ok(out)
}

fn num(s: &str) -> std::result::Result<f64, String> {
    s.parse().map_err(|_| format!("bad number {s:?}"))
}

fn flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad binary label {s:?}")),
    }
}

fn parse_labels(text: &str, n: usize) -> std::result::Result<Vec<LabelVector>, String> {
    rows(text, "patient_id,al_os,al_od,hm_os,hm_od", n, 5)?
        .iter()
        .map(|r| {
            Ok(LabelVector {
                y1: num(&r[1])?,
                y2: num(&r[2])?,
                y3: flag(&r[3])?,
                y4: flag(&r[4])?,
            })
        })
        .collect()
}

fn parse_latents(text: &str, n: usize) -> std::result::Result<Vec<LatentRecord>, String> {
    rows(text, "patient_id,u,v_os,v_od,g1,g2,g3,g4,z1,z2,z3,z4", n, 12)?
        .iter()
        .map(|r| {
            let v: Vec<f64> = r[1..].iter().map(|s| num(s)).collect::<std::result::Result<_, _>>()?;
            Ok(LatentRecord {
                u: v[0],
                v_os: v[1],
                v_od: v[2],
                g: [v[3], v[4], v[5], v[6]],
                z: [v[7], v[8], v[9], v[10]],
            })
        })
        .collect()
}
