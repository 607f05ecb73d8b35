//! Procedural multi-contrast phantom volumes: one seeded tissue-label field
//! per subject, rendered through per-modality intensity lookup tables with
//! Gaussian smoothing and seeded noise, plus the dataset manifest and split.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VoxError};
use crate::tensor::array::Array;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_WHITE: u8 = 1;
pub const CLASS_GRAY: u8 = 2;
pub const CLASS_LESION: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    pub classes: usize,
    pub modalities: Vec<String>,
    /// Per-modality intensity per class, all in [0,1].
    pub lut: Vec<Vec<f64>>,
    /// Odd tap count of the separable Gaussian; 1 disables smoothing.
    pub smooth_width: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Three contrasts over four classes. The lesion class is bright in B
    /// and suppressed in C, so cross-modality mappings are non-trivial.
    pub fn desk() -> PhantomSpec {
        PhantomSpec {
            extent: [32, 32, 32],
            classes: 4,
            modalities: vec!["A".into(), "B".into(), "C".into()],
            lut: vec![
                vec![0.05, 0.75, 0.45, 0.65],
                vec![0.05, 0.35, 0.65, 0.95],
                vec![0.05, 0.55, 0.75, 0.10],
            ],
            smooth_width: 3,
            noise_std: 0.01,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e < 8) {
            return Err(VoxError::config(format!(
                "phantom extent must be at least 8 per axis, got {:?}",
                self.extent
            )));
        }
        if self.classes < 2 {
            return Err(VoxError::config("phantom needs at least 2 tissue classes"));
        }
        if self.modalities.is_empty() {
            return Err(VoxError::config("phantom needs at least one modality"));
        }
        if self.lut.len() != self.modalities.len() {
            return Err(VoxError::config(format!(
                "lookup table has {} rows but {} modalities are declared",
                self.lut.len(),
                self.modalities.len()
            )));
        }
        for (m, row) in self.lut.iter().enumerate() {
            if row.len() != self.classes {
                return Err(VoxError::config(format!(
                    "lookup row {m} has {} entries, expected {}",
                    row.len(),
                    self.classes
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(VoxError::config(format!(
                    "lookup row {m} has values outside [0,1]"
                )));
            }
        }
        if self.smooth_width == 0 || self.smooth_width % 2 == 0 {
            return Err(VoxError::config(format!(
                "smoothing width must be odd and positive, got {}",
                self.smooth_width
            )));
        }
        if !(0.0..0.5).contains(&self.noise_std) {
            return Err(VoxError::config(format!(
                "noise std must be in [0, 0.5), got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Stable content hash over every generation-relevant field.
    pub fn content_hash(&self) -> u64 {
        let mut canon = format!(
            "extent={:?};classes={};smooth={};noise={:.17e};seed={}",
            self.extent, self.classes, self.smooth_width, self.noise_std, self.seed
        );
        for (name, row) in self.modalities.iter().zip(&self.lut) {
            canon.push_str(&format!(";{name}="));
            for v in row {
                canon.push_str(&format!("{v:.17e},"));
            }
        }
        fnv1a64(canon.as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct VolumeSet {
    pub subject: String,
    pub modalities: Vec<String>,
    /// Row-major tissue classes, same extent as the volumes.
    pub labels: Vec<u8>,
    pub volumes: Vec<Array<f32>>,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    class: u8,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            s += d * d;
        }
        s <= 1.0
    }
}

fn label_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let ext = spec.extent;
    let ef = [ext[0] as f64, ext[1] as f64, ext[2] as f64];
    let mut shapes: Vec<Ellipsoid> = Vec::new();
    let head = Ellipsoid {
        center: [
            ef[0] * (0.48 + 0.04 * rng.random::<f64>()),
            ef[1] * (0.48 + 0.04 * rng.random::<f64>()),
            ef[2] * (0.48 + 0.04 * rng.random::<f64>()),
        ],
        semi: [
            ef[0] * (0.34 + 0.06 * rng.random::<f64>()),
            ef[1] * (0.34 + 0.06 * rng.random::<f64>()),
            ef[2] * (0.34 + 0.06 * rng.random::<f64>()),
        ],
        class: CLASS_WHITE,
    };
    let inner = |rng: &mut ChaCha8Rng, head: &Ellipsoid, frac: (f64, f64), class: u8| {
        let dir = [
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        ];
        Ellipsoid {
            center: [
                head.center[0] + dir[0] * head.semi[0] * 0.45,
                head.center[1] + dir[1] * head.semi[1] * 0.45,
                head.center[2] + dir[2] * head.semi[2] * 0.45,
            ],
            semi: [
                head.semi[0] * (frac.0 + (frac.1 - frac.0) * rng.random::<f64>()),
                head.semi[1] * (frac.0 + (frac.1 - frac.0) * rng.random::<f64>()),
                head.semi[2] * (frac.0 + (frac.1 - frac.0) * rng.random::<f64>()),
            ],
            class,
        }
    };
    let n_gray = 2 + (rng.random::<f64>() * 2.0) as usize;
    let mut grays = Vec::new();
    for _ in 0..n_gray {
        grays.push(inner(rng, &head, (0.25, 0.45), CLASS_GRAY));
    }
    let lesion = inner(rng, &head, (0.18, 0.30), CLASS_LESION);
    shapes.push(head);
    shapes.extend(grays);
    if spec.classes > CLASS_LESION as usize {
        shapes.push(lesion);
    }
    let mut labels = vec![CLASS_BACKGROUND; ext.iter().product()];
    let mut i = 0usize;
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let mut c = CLASS_BACKGROUND;
                for s in &shapes {
                    if (s.class as usize) < spec.classes && s.contains(p) {
                        c = s.class;
                    }
                }
                labels[i] = c;
                i += 1;
            }
        }
    }
    labels
}

fn gaussian_kernel(width: usize) -> Vec<f64> {
    let r = (width / 2) as i64;
    let sigma = (width as f64 / 4.0).max(0.5);
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn smooth_separable(vol: &[f64], ext: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let idx = |z: usize, y: usize, x: usize| (z * ext[1] + y) * ext[2] + x;
    let mut a = vol.to_vec();
    let mut b = vec![0.0f64; vol.len()];
    for axis in 0..3 {
        for z in 0..ext[0] {
            for y in 0..ext[1] {
                for x in 0..ext[2] {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as i64 - r;
                        let (mut zz, mut yy, mut xx) = (z as i64, y as i64, x as i64);
                        match axis {
                            0 => zz += off,
                            1 => yy += off,
                            _ => xx += off,
                        }
                        let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
                        acc += kv
                            * a[idx(
                                clamp(zz, ext[0]),
                                clamp(yy, ext[1]),
                                clamp(xx, ext[2]),
                            )];
                    }
                    b[idx(z, y, x)] = acc;
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Renders one subject: seeded label field, one smoothed+noised volume per
/// modality, all values clamped to [0,1]. Same (spec, seed) is bitwise
/// reproducible.
pub fn generate_phantom(spec: &PhantomSpec, subject_seed: u64) -> Result<VolumeSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let labels = label_field(spec, &mut rng);
    let ext = spec.extent;
    let kernel = gaussian_kernel(spec.smooth_width);
    let mut volumes = Vec::with_capacity(spec.modalities.len());
    for row in &spec.lut {
        let mapped: Vec<f64> = labels.iter().map(|&c| row[c as usize]).collect();
        let smoothed = if spec.smooth_width > 1 {
            smooth_separable(&mapped, ext, &kernel)
        } else {
            mapped
        };
        let mut vol = Array::<f32>::zeros(ext.to_vec());
        for (i, v) in smoothed.iter().enumerate() {
            let noise: f64 = if spec.noise_std > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                spec.noise_std * n
            } else {
                0.0
            };
            vol.data_mut()[i] = (v + noise).clamp(0.0, 1.0) as f32;
        }
        volumes.push(vol);
    }
    Ok(VolumeSet {
        subject: format!("s{subject_seed:05}"),
        modalities: spec.modalities.clone(),
        labels,
        volumes,
    })
}

pub fn subject_seed(spec: &PhantomSpec, index: usize) -> u64 {
    spec.seed
        .wrapping_add((index as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub modalities: Vec<String>,
    pub subjects: Vec<SubjectRecord>,
    pub spec_hash: u64,
}

impl DatasetManifest {
    pub fn new(spec: &PhantomSpec, n_subjects: usize) -> Result<DatasetManifest> {
        spec.validate()?;
        if n_subjects < 2 {
            return Err(VoxError::config(format!(
                "dataset needs at least 2 subjects, got {n_subjects}"
            )));
        }
        let subjects = (0..n_subjects)
            .map(|i| {
                let seed = subject_seed(spec, i);
                SubjectRecord {
                    id: format!("s{seed:05}"),
                    seed,
                    split: Split::Train,
                }
            })
            .collect();
        Ok(DatasetManifest {
            modalities: spec.modalities.clone(),
            subjects,
            spec_hash: spec.content_hash(),
        })
    }

    pub fn split_ids(&self, split: Split) -> Vec<&SubjectRecord> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }
}

/// Seeded shuffle, then the first `round(n * train_fraction)` subjects
/// (clamped so both splits stay non-empty) become the training split.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(VoxError::config(format!(
            "train fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let n = manifest.subjects.len();
    if n < 2 {
        return Err(VoxError::config("cannot split fewer than 2 subjects"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    for (rank, &ix) in order.iter().enumerate() {
        manifest.subjects[ix].split = if rank < n_train {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("# phantom dataset manifest v1\n");
    out.push_str(&format!("spec_hash = {:016x}\n", manifest.spec_hash));
    out.push_str(&format!(
        "modalities = {}\n",
        manifest.modalities.join(",")
    ));
    for s in &manifest.subjects {
        let sp = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push_str(&format!("subject {} seed={} split={}\n", s.id, s.seed, sp));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: &std::path::Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let bad = |reason: String| VoxError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut spec_hash = None;
    let mut modalities = Vec::new();
    let mut subjects = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(v) = line.strip_prefix("spec_hash = ") {
            spec_hash = Some(
                u64::from_str_radix(v, 16)
                    .map_err(|e| bad(format!("line {}: bad spec hash: {e}", ln + 1)))?,
            );
        } else if let Some(v) = line.strip_prefix("modalities = ") {
            modalities = v.split(',').map(|s| s.to_string()).collect();
        } else if let Some(v) = line.strip_prefix("subject ") {
            let parts: Vec<&str> = v.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(bad(format!("line {}: malformed subject record", ln + 1)));
            }
            let seed = parts[1]
                .strip_prefix("seed=")
                .ok_or_else(|| bad(format!("line {}: missing seed", ln + 1)))?
                .parse::<u64>()
                .map_err(|e| bad(format!("line {}: bad seed: {e}", ln + 1)))?;
            let split = match parts[2].strip_prefix("split=") {
                Some("train") => Split::Train,
                Some("test") => Split::Test,
                _ => return Err(bad(format!("line {}: bad split", ln + 1))),
            };
            subjects.push(SubjectRecord {
                id: parts[0].to_string(),
                seed,
                split,
            });
        } else {
            return Err(bad(format!("line {}: unrecognized record", ln + 1)));
        }
    }
    Ok(DatasetManifest {
        modalities,
        subjects,
        spec_hash: spec_hash.ok_or_else(|| bad("missing spec_hash".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = PhantomSpec::desk();
        let a = generate_phantom(&spec, 11).unwrap();
        let b = generate_phantom(&spec, 11).unwrap();
        let c = generate_phantom(&spec, 12).unwrap();
        assert_eq!(a.labels, b.labels);
        for m in 0..3 {
            assert_eq!(a.volumes[m].data(), b.volumes[m].data());
        }
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn identical_lookup_rows_give_identical_volumes() {
        let mut spec = PhantomSpec::desk();
        spec.noise_std = 0.0;
        spec.lut[1] = spec.lut[0].clone();
        let set = generate_phantom(&spec, 3).unwrap();
        assert_eq!(set.volumes[0].data(), set.volumes[1].data());
        assert_ne!(set.volumes[0].data(), set.volumes[2].data());
    }

    #[test]
    fn volumes_live_in_unit_range_and_share_extent() {
        let set = generate_phantom(&PhantomSpec::desk(), 5).unwrap();
        for v in &set.volumes {
            assert_eq!(v.shape(), &[32, 32, 32]);
            assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let classes: std::collections::HashSet<u8> = set.labels.iter().copied().collect();
        assert!(classes.contains(&CLASS_BACKGROUND));
        assert!(classes.contains(&CLASS_WHITE));
        assert!(classes.contains(&CLASS_LESION));
    }

    #[test]
    fn inverted_lesion_contrast_anticorrelates_inside_mask() {
        let mut spec = PhantomSpec::desk();
        spec.noise_std = 0.0;
        let set = generate_phantom(&spec, 9).unwrap();
        let mask: Vec<usize> = set
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == CLASS_LESION)
            .map(|(i, _)| i)
            .collect();
        assert!(mask.len() > 10, "lesion too small: {}", mask.len());
        let b: Vec<f64> = mask.iter().map(|&i| set.volumes[1].data()[i] as f64).collect();
        let c: Vec<f64> = mask.iter().map(|&i| set.volumes[2].data()[i] as f64).collect();
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let mc = c.iter().sum::<f64>() / c.len() as f64;
        let cov: f64 = b.iter().zip(&c).map(|(x, y)| (x - mb) * (y - mc)).sum();
        let vb: f64 = b.iter().map(|x| (x - mb) * (x - mb)).sum();
        let vc: f64 = c.iter().map(|x| (x - mc) * (x - mc)).sum();
        let corr = cov / (vb.sqrt() * vc.sqrt());
        assert!(corr < 0.0, "lesion-region correlation {corr} not negative");
    }

    #[test]
    fn spec_validation_rejects_malformed_tables() {
        let mut spec = PhantomSpec::desk();
        spec.lut.pop();
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::desk();
        spec.lut[0][1] = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::desk();
        spec.smooth_width = 4;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn content_hash_changes_iff_spec_changes() {
        let spec = PhantomSpec::desk();
        assert_eq!(spec.content_hash(), PhantomSpec::desk().content_hash());
        let mut other = PhantomSpec::desk();
        other.noise_std = 0.02;
        assert_ne!(spec.content_hash(), other.content_hash());
        let mut other = PhantomSpec::desk();
        other.lut[2][3] = 0.11;
        assert_ne!(spec.content_hash(), other.content_hash());
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let spec = PhantomSpec::desk();
        let mut m = DatasetManifest::new(&spec, 10).unwrap();
        split_dataset(&mut m, 0.8, 99).unwrap();
        assert_eq!(m.split_ids(Split::Train).len(), 8);
        assert_eq!(m.split_ids(Split::Test).len(), 2);
        let mut m2 = DatasetManifest::new(&spec, 10).unwrap();
        split_dataset(&mut m2, 0.8, 99).unwrap();
        for (a, b) in m.subjects.iter().zip(&m2.subjects) {
            assert_eq!(a.split, b.split);
        }
        let mut m3 = DatasetManifest::new(&spec, 10).unwrap();
        split_dataset(&mut m3, 0.8, 100).unwrap();
        let same = m
            .subjects
            .iter()
            .zip(&m3.subjects)
            .all(|(a, b)| a.split == b.split);
        assert!(!same, "different seeds should usually differ");
        assert!(split_dataset(&mut m, 0.0, 1).is_err());
        assert!(split_dataset(&mut m, 1.0, 1).is_err());
        assert!(DatasetManifest::new(&spec, 1).is_err());
    }

    #[test]
    fn manifest_round_trips_through_text() {
        let dir = std::env::temp_dir().join("voxtrans-manifest-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.txt");
        let spec = PhantomSpec::desk();
        let mut m = DatasetManifest::new(&spec, 6).unwrap();
        split_dataset(&mut m, 0.67, 3).unwrap();
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.spec_hash, m.spec_hash);
        assert_eq!(loaded.modalities, m.modalities);
        assert_eq!(loaded.subjects.len(), 6);
        for (a, b) in m.subjects.iter().zip(&loaded.subjects) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.split, b.split);
        }
        std::fs::write(&path, "garbage line\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
