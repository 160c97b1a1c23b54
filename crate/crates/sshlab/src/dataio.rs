//! Dataset construction and bit-exact on-disk formats.
//!
//! A sample is the 2N x 2N matrix of squared eigenstate moduli of an open
//! chain, columns sorted by energy, labeled with the winding number of the
//! same chain under periodic boundaries. Training and validation draw v/w
//! from (0, 0.8) u (1.2, 2), excluding the transition band; test covers the
//! full (0, 2) range. Each role offsets its v-grid start so the three sets
//! never share a v value.
//!
//! Tensor file layout (little-endian): magic "SSHD", u16 version = 1,
//! u16 flags, u32 sample count, u32 rows, u32 cols, then per sample
//! rows*cols f64 row-major plus one label byte, then a CRC32 of everything
//! preceding it. A JSON manifest with all generation parameters sits next to
//! the tensor file.

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SshError};
use crate::rng::{mix2, mix3, shuffle};
use crate::ssh::{self, Boundary, HamiltonianSpec};
use crate::topology;

pub const MAGIC: &[u8; 4] = b"SSHD";
pub const VERSION: u16 = 1;

/// Largest disorder amplitude for which clean labels are still trusted.
pub const PERTURBATIVE_MAX_W: f64 = 0.05;

/// Transition band excluded from training and validation v-grids.
pub const EXCLUDED_BAND: (f64, f64) = (0.8, 1.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Validation,
    Test,
    Sweep,
}

impl Role {
    pub fn v_offset(&self) -> f64 {
        match self {
            Role::Train => 0.001,
            Role::Validation => 0.002,
            Role::Test => 0.003,
            Role::Sweep => 0.004,
        }
    }

    /// Training-side roles exclude the transition band and must keep
    /// disorder in the perturbative labeling regime.
    pub fn is_training_side(&self) -> bool {
        !matches!(self, Role::Test)
    }

    fn id(&self) -> u64 {
        match self {
            Role::Train => 0,
            Role::Validation => 1,
            Role::Test => 2,
            Role::Sweep => 3,
        }
    }
}

/// One eigenstate image with its label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSample {
    /// Row-major rows x cols, every entry in [0, 1].
    pub pixels: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub label: u8,
    pub v: f64,
    pub disorder_amplitude: f64,
    pub disorder_seed: Option<u64>,
}

impl EigenSample {
    pub fn pixel(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }
}

/// Diagonalize the open chain for `spec` and square its eigenstates.
pub fn eigen_image(spec: &HamiltonianSpec) -> Result<(Vec<f64>, usize)> {
    let (h, _) = ssh::build_hamiltonian(spec)?;
    let sp = ssh::diagonalize(&h)?;
    let dim = spec.dim();
    let mut pixels = vec![0.0; dim * dim];
    for r in 0..dim {
        for c in 0..dim {
            let x = sp.states[(r, c)];
            pixels[r * dim + c] = x * x;
        }
    }
    Ok((pixels, dim))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub v: f64,
    pub disorder_amplitude: f64,
    pub disorder_seed: Option<u64>,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub role: Role,
    pub n_cells: usize,
    pub n_clean: usize,
    /// (W, count) strata beyond the clean stratum.
    pub disordered_plan: Vec<(f64, usize)>,
    pub v_offset: f64,
    pub excluded_v_band: Option<(f64, f64)>,
    pub master_seed: u64,
    pub tensor_file: PathBuf,
    /// Per-sample provenance in on-disk (post-shuffle) order.
    pub samples: Vec<SampleMeta>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<EigenSample>,
}

/// Equally spaced points over the allowed v-union of a role, starting near
/// the role's offset; counts split across intervals in proportion to their
/// length.
///
/// The step is the role-independent total-length / count quantized to a 1e-6
/// lattice, while the offset carries an extra 1e-9 residue unique to the
/// role. Every emitted point is therefore congruent to the role index modulo
/// the lattice, so no two roles can ever share a v value — an arithmetic
/// guarantee, not a floating-point accident.
pub fn v_grid(role: Role, count: usize) -> Vec<f64> {
    const NANO: f64 = 1e-9;
    let intervals: &[(f64, f64)] = if role.is_training_side() {
        &[(0.0, EXCLUDED_BAND.0), (EXCLUDED_BAND.1, 2.0)]
    } else {
        &[(0.0, 2.0)]
    };
    let total: f64 = intervals.iter().map(|(a, b)| b - a).sum();
    let total_nano = (total / NANO).round() as u64;
    let step_nano = (total_nano / count as u64 / 1000).max(1) * 1000;
    let offset_nano = (role.id() as u64 + 1) * 1_000_001;
    (0..count)
        .map(|i| {
            // Cyclic wrap keeps the last points inside the union when the
            // offset pushes them past its end.
            let mut u = (offset_nano + i as u64 * step_nano) % total_nano;
            for &(a, b) in intervals {
                let len = ((b - a) / NANO).round() as u64;
                if u < len {
                    return a + u as f64 * NANO;
                }
                u -= len;
            }
            unreachable!("u is reduced modulo the union length");
        })
        .collect()
}

/// Generate one dataset. Clean samples are labeled by the winding number of
/// the matching periodic chain; slightly disordered samples inherit the clean
/// label of the same v (perturbative labeling).
pub fn generate_dataset(
    role: Role,
    n_cells: usize,
    n_clean: usize,
    disordered_plan: &[(f64, usize)],
    master_seed: u64,
    tensor_file: PathBuf,
) -> Result<Dataset> {
    if n_clean == 0 || n_clean % 2 != 0 {
        return Err(SshError::Policy(format!(
            "clean sample count must be even and positive, got {n_clean}"
        )));
    }
    for &(amp, count) in disordered_plan {
        if role.is_training_side() && amp > PERTURBATIVE_MAX_W {
            return Err(SshError::Policy(format!(
                "disordered training data at W/w = {amp} is outside the perturbative labeling regime (max {PERTURBATIVE_MAX_W})"
            )));
        }
        if count > n_clean {
            return Err(SshError::Policy(
                "disordered stratum larger than the clean grid it reuses".into(),
            ));
        }
    }

    let vs = v_grid(role, n_clean);
    let clean_labels: Vec<u8> = vs
        .par_iter()
        .map(|&v| {
            let spec = HamiltonianSpec::clean(n_cells, v, Boundary::Periodic);
            topology::winding_number(&spec, 256).map(|w| w.rounded.clamp(0, 1) as u8)
        })
        .collect::<Result<_>>()?;

    let mut jobs: Vec<(f64, f64, Option<u64>, u8)> = Vec::new();
    for (i, &v) in vs.iter().enumerate() {
        jobs.push((v, 0.0, None, clean_labels[i]));
    }
    for (stratum, &(amp, count)) in disordered_plan.iter().enumerate() {
        for i in 0..count {
            // Subsample the clean v-grid evenly so perturbative labels align.
            let idx = i * n_clean / count;
            let seed = mix3(master_seed, stratum as u64 + 1, i as u64);
            jobs.push((vs[idx], amp, Some(seed), clean_labels[idx]));
        }
    }

    let mut samples: Vec<EigenSample> = jobs
        .par_iter()
        .map(|&(v, amp, seed, label)| {
            let spec = HamiltonianSpec {
                n_cells,
                v,
                w: 1.0,
                disorder_amplitude: amp,
                boundary: Boundary::Open,
                disorder_seed: seed,
            };
            let (pixels, dim) = eigen_image(&spec)?;
            Ok(EigenSample {
                pixels,
                rows: dim,
                cols: dim,
                label,
                v,
                disorder_amplitude: amp,
                disorder_seed: spec.disorder_seed,
            })
        })
        .collect::<Result<_>>()?;

    shuffle(&mut samples, mix2(master_seed, role.id()));

    let manifest = DatasetManifest {
        role,
        n_cells,
        n_clean,
        disordered_plan: disordered_plan.to_vec(),
        v_offset: role.v_offset(),
        excluded_v_band: role.is_training_side().then_some(EXCLUDED_BAND),
        master_seed,
        tensor_file,
        samples: samples
            .iter()
            .map(|s| SampleMeta {
                v: s.v,
                disorder_amplitude: s.disorder_amplitude,
                disorder_seed: s.disorder_seed,
                label: s.label,
            })
            .collect(),
    };
    Ok(Dataset { manifest, samples })
}

/// The default training plan: 5000 clean plus 1000 at W/w = 0.01 and 1000 at
/// W/w = 0.05.
pub fn default_train_plan() -> (usize, Vec<(f64, usize)>) {
    (5000, vec![(0.01, 1000), (0.05, 1000)])
}

/// The default validation plan: 1000 clean plus 250 + 250 disordered.
pub fn default_validation_plan() -> (usize, Vec<(f64, usize)>) {
    (1000, vec![(0.01, 250), (0.05, 250)])
}

fn manifest_path(tensor_path: &Path) -> PathBuf {
    let mut p = tensor_path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

/// Serialize the tensor block (everything the CRC covers).
fn tensor_bytes(samples: &[EigenSample], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + samples.len() * (rows * cols * 8 + 1));
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LittleEndian>(VERSION)?;
    buf.write_u16::<LittleEndian>(0)?;
    buf.write_u32::<LittleEndian>(samples.len() as u32)?;
    buf.write_u32::<LittleEndian>(rows as u32)?;
    buf.write_u32::<LittleEndian>(cols as u32)?;
    for s in samples {
        if s.rows != rows || s.cols != cols {
            return Err(SshError::Shape(format!(
                "sample is {}x{}, dataset is {}x{}",
                s.rows, s.cols, rows, cols
            )));
        }
        for &px in &s.pixels {
            buf.write_f64::<LittleEndian>(px)?;
        }
        buf.push(s.label);
    }
    Ok(buf)
}

/// Write tensor file + JSON manifest sidecar.
pub fn write_dataset(ds: &Dataset, tensor_path: &Path) -> Result<()> {
    let (rows, cols) = ds
        .samples
        .first()
        .map(|s| (s.rows, s.cols))
        .unwrap_or((2 * ds.manifest.n_cells, 2 * ds.manifest.n_cells));
    let mut bytes = tensor_bytes(&ds.samples, rows, cols)?;
    let crc = crc32fast::hash(&bytes);
    bytes.write_u32::<LittleEndian>(crc)?;
    std::fs::write(tensor_path, &bytes)?;

    let mut manifest = ds.manifest.clone();
    manifest.tensor_file = tensor_path
        .file_name()
        .map(PathBuf::from)
        .unwrap_or_else(|| tensor_path.to_path_buf());
    std::fs::write(
        manifest_path(tensor_path),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Read a dataset back; fails on magic, version, truncation, or CRC errors.
pub fn read_dataset(tensor_path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(tensor_path)?;
    if bytes.len() < 20 {
        return Err(SshError::Format("file shorter than header".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = (&crc_bytes[..]).read_u32::<LittleEndian>()?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(SshError::Checksum { stored, computed });
    }

    let mut rd = body;
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SshError::Format(format!("bad magic {magic:?}")));
    }
    let version = rd.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(SshError::Format(format!("unsupported version {version}")));
    }
    let _flags = rd.read_u16::<LittleEndian>()?;
    let count = rd.read_u32::<LittleEndian>()? as usize;
    let rows = rd.read_u32::<LittleEndian>()? as usize;
    let cols = rd.read_u32::<LittleEndian>()? as usize;
    let expected = count * (rows * cols * 8 + 1);
    if rd.len() != expected {
        return Err(SshError::Format(format!(
            "truncated payload: {} bytes, expected {expected}",
            rd.len()
        )));
    }

    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(manifest_path(tensor_path))?)?;
    if manifest.samples.len() != count {
        return Err(SshError::Format(format!(
            "manifest lists {} samples, tensor holds {count}",
            manifest.samples.len()
        )));
    }

    let mut samples = Vec::with_capacity(count);
    for meta in &manifest.samples {
        let mut pixels = vec![0.0f64; rows * cols];
        rd.read_f64_into::<LittleEndian>(&mut pixels)?;
        let label = rd.read_u8()?;
        if label != meta.label {
            return Err(SshError::Format(
                "manifest/tensor label disagreement".into(),
            ));
        }
        samples.push(EigenSample {
            pixels,
            rows,
            cols,
            label,
            v: meta.v,
            disorder_amplitude: meta.disorder_amplitude,
            disorder_seed: meta.disorder_seed,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Cumulative "mercury" binarization: channel b is 1 wherever the pixel is at
/// least b/bins. Channel 0 (threshold 0) is always filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thermometer {
    pub bins: usize,
    pub rows: usize,
    pub cols: usize,
    /// Channel-major: data[b * rows * cols + r * cols + c].
    pub data: Vec<u8>,
}

pub fn thermometer_encode(
    pixels: &[f64],
    rows: usize,
    cols: usize,
    bins: usize,
) -> Result<Thermometer> {
    if bins < 2 {
        return Err(SshError::Policy(format!("bins must be >= 2, got {bins}")));
    }
    for &px in pixels {
        if !(0.0..=1.0).contains(&px) {
            return Err(SshError::PixelRange(px));
        }
    }
    let plane = rows * cols;
    let mut data = vec![0u8; bins * plane];
    for b in 0..bins {
        let threshold = b as f64 / bins as f64;
        for (i, &px) in pixels.iter().enumerate() {
            data[b * plane + i] = (px >= threshold) as u8;
        }
    }
    Ok(Thermometer {
        bins,
        rows,
        cols,
        data,
    })
}

impl Thermometer {
    /// Decode one pixel back to the midpoint of its occupied bin.
    pub fn decode_midpoint(&self, r: usize, c: usize) -> f64 {
        let plane = self.rows * self.cols;
        let idx = r * self.cols + c;
        let top = (0..self.bins)
            .rev()
            .find(|b| self.data[b * plane + idx] == 1)
            .unwrap_or(0);
        (top as f64 + 0.5) / self.bins as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn v_grids_respect_band_and_offsets() {
        let train = v_grid(Role::Train, 200);
        assert!(train
            .iter()
            .all(|&v| (v > 0.0 && v < 0.8) || (v > 1.2 && v < 2.0)));
        let test = v_grid(Role::Test, 200);
        assert!(test.iter().all(|&v| v > 0.0 && v < 2.0));

        // Offsets keep the roles' v-sets pairwise disjoint.
        let val = v_grid(Role::Validation, 200);
        for &a in &train {
            assert!(!val.contains(&a));
            assert!(!test.contains(&a));
        }
        for &a in &val {
            assert!(!test.contains(&a));
        }
    }

    #[test]
    fn tiny_dataset_labels_and_balance() {
        let dir = tempdir().unwrap();
        let ds = generate_dataset(
            Role::Test,
            4,
            2,
            &[],
            7,
            dir.path().join("t.sshd"),
        )
        .unwrap();
        let mut by_v: Vec<(f64, u8)> = ds.samples.iter().map(|s| (s.v, s.label)).collect();
        by_v.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(by_v[0].1, 1, "v = {} should be topological", by_v[0].0);
        assert_eq!(by_v[1].1, 0, "v = {} should be trivial", by_v[1].0);
    }

    #[test]
    fn sample_columns_are_normalized() {
        let dir = tempdir().unwrap();
        let ds = generate_dataset(
            Role::Train,
            4,
            4,
            &[(0.05, 2)],
            3,
            dir.path().join("t.sshd"),
        )
        .unwrap();
        for s in &ds.samples {
            for c in 0..s.cols {
                let sum: f64 = (0..s.rows).map(|r| s.pixel(r, c)).sum();
                assert!((sum - 1.0).abs() < 1e-10);
                for r in 0..s.rows {
                    assert!((0.0..=1.0).contains(&s.pixel(r, c)));
                }
            }
        }
    }

    #[test]
    fn nonperturbative_training_disorder_rejected() {
        let dir = tempdir().unwrap();
        let err = generate_dataset(
            Role::Train,
            4,
            4,
            &[(0.5, 2)],
            3,
            dir.path().join("t.sshd"),
        );
        assert!(matches!(err, Err(SshError::Policy(_))));
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.sshd");
        let ds = Dataset {
            manifest: DatasetManifest {
                role: Role::Test,
                n_cells: 4,
                n_clean: 0,
                disordered_plan: vec![],
                v_offset: 0.003,
                excluded_v_band: None,
                master_seed: 0,
                tensor_file: path.clone(),
                samples: vec![],
            },
            samples: vec![],
        };
        write_dataset(&ds, &path).unwrap();
        // header (magic 4 + version 2 + flags 2 + three u32 dims) + crc
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
        let back = read_dataset(&path).unwrap();
        assert!(back.samples.is_empty());
    }

    #[test]
    fn one_sample_file_size() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("one.sshd");
        let ds = generate_dataset(Role::Test, 4, 2, &[], 1, path.clone()).unwrap();
        let one = Dataset {
            manifest: DatasetManifest {
                samples: ds.manifest.samples[..1].to_vec(),
                ..ds.manifest.clone()
            },
            samples: ds.samples[..1].to_vec(),
        };
        write_dataset(&one, &path).unwrap();
        let dim = 8u64;
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            20 + dim * dim * 8 + 1 + 4
        );
    }

    #[test]
    fn corrupted_and_truncated_files_fail() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.sshd");
        let ds = generate_dataset(Role::Test, 4, 2, &[], 1, path.clone()).unwrap();
        write_dataset(&ds, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[30] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(SshError::Checksum { .. })
        ));

        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn thermometer_hand_cases() {
        let enc = |x: f64| {
            thermometer_encode(&[x], 1, 1, 4)
                .unwrap()
                .data
        };
        assert_eq!(enc(0.0), vec![1, 0, 0, 0]);
        assert_eq!(enc(1.0 - 1e-15), vec![1, 1, 1, 1]);
        assert_eq!(enc(0.35), vec![1, 1, 0, 0]);
        assert!(thermometer_encode(&[1.5], 1, 1, 4).is_err());
        assert!(thermometer_encode(&[-0.1], 1, 1, 4).is_err());
    }

    #[test]
    fn thermometer_monotone_and_midpoint_bound() {
        let bins = 8;
        let values: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let enc = thermometer_encode(&values, 1, 100, bins).unwrap();
        for i in 1..values.len() {
            for b in 0..bins {
                let plane = 100;
                assert!(enc.data[b * plane + i] >= enc.data[b * plane + i - 1]);
            }
        }
        for (i, &x) in values.iter().enumerate() {
            let decoded = enc.decode_midpoint(0, i);
            assert!((decoded - x).abs() <= 0.5 / bins as f64 + 1e-12);
        }
    }

    #[test]
    fn plan_defaults_match_tables() {
        assert_eq!(default_train_plan(), (5000, vec![(0.01, 1000), (0.05, 1000)]));
        assert_eq!(
            default_validation_plan(),
            (1000, vec![(0.01, 250), (0.05, 250)])
        );
    }
}
