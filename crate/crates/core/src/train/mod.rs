//! Training loops for both stages, the phantom-backed data pool, and loss
//! logging.

mod stage1;
mod stage2;

pub use stage1::{LossReport, Stage1Trainer};
pub use stage2::{Stage2Report, Stage2Trainer};

use std::path::{Path, PathBuf};

use crate::error::{Result, VoxError};
use crate::phantom::{generate_phantom, load_manifest, DatasetManifest, PhantomSpec, Split, VolumeSet};
use crate::tensor::array::Array;
use crate::volume::load_raw;

enum PoolSource {
    /// Subjects regenerated on demand; generation is cheap and bitwise
    /// reproducible per (spec, subject seed), so nothing is cached.
    Generated(PhantomSpec),
    /// Subjects read from `<dir>/volumes/<id>/<modality>.rvol`.
    Directory(PathBuf),
}

/// Deterministic access to dataset subjects, either generated in memory or
/// read from a directory tree written by the dataset export command.
pub struct DataPool {
    pub manifest: DatasetManifest,
    source: PoolSource,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DataPool {
    pub fn new(spec: PhantomSpec, manifest: DatasetManifest) -> Result<DataPool> {
        if manifest.spec_hash != spec.content_hash() {
            return Err(VoxError::data(format!(
                "manifest hash {:016x} does not match the phantom spec hash {:016x}",
                manifest.spec_hash,
                spec.content_hash()
            )));
        }
        Ok(DataPool {
            manifest,
            source: PoolSource::Generated(spec),
        })
    }

    pub fn from_dir(dir: &Path) -> Result<DataPool> {
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
        if manifest.subjects.is_empty() {
            return Err(VoxError::data(format!(
                "manifest in {} lists no subjects",
                dir.display()
            )));
        }
        Ok(DataPool {
            manifest,
            source: PoolSource::Directory(dir.to_path_buf()),
        })
    }

    fn record(&self, seed: u64) -> Result<&crate::phantom::SubjectRecord> {
        self.manifest
            .subjects
            .iter()
            .find(|s| s.seed == seed)
            .ok_or_else(|| VoxError::data(format!("no subject with seed {seed} in the manifest")))
    }

    pub fn subject(&self, seed: u64) -> Result<VolumeSet> {
        match &self.source {
            PoolSource::Generated(spec) => generate_phantom(spec, seed),
            PoolSource::Directory(dir) => {
                let rec = self.record(seed)?;
                let sub_dir = dir.join("volumes").join(&rec.id);
                let mut volumes = Vec::with_capacity(self.manifest.modalities.len());
                for m in &self.manifest.modalities {
                    volumes.push(load_raw(&sub_dir.join(format!("{m}.rvol")))?);
                }
                Ok(VolumeSet {
                    subject: rec.id.clone(),
                    modalities: self.manifest.modalities.clone(),
                    labels: Vec::new(),
                    volumes,
                })
            }
        }
    }

    pub fn seeds(&self, split: Split) -> Vec<u64> {
        self.manifest
            .split_ids(split)
            .iter()
            .map(|s| s.seed)
            .collect()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.manifest.modalities
    }
}

/// Writes every subject of `pool` under `dir` in the layout `from_dir`
/// reads back: the manifest plus one raw volume per modality.
pub fn export_pool(pool: &DataPool, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("volumes"))?;
    crate::phantom::save_manifest(&pool.manifest, &dir.join(MANIFEST_FILE))?;
    for rec in &pool.manifest.subjects {
        let set = pool.subject(rec.seed)?;
        let sub_dir = dir.join("volumes").join(&rec.id);
        std::fs::create_dir_all(&sub_dir)?;
        for (m, vol) in set.modalities.iter().zip(&set.volumes) {
            crate::volume::save_raw(vol, &sub_dir.join(format!("{m}.rvol")))?;
        }
    }
    Ok(())
}

/// `[e,e,e]` volume as a batch-1 single-channel model input.
pub fn as_input(vol: &Array<f32>) -> Result<Array<f32>> {
    let sh = vol.shape().to_vec();
    if sh.len() != 3 {
        return Err(VoxError::shape(format!("expected a rank-3 volume, got {sh:?}")));
    }
    vol.clone().reshaped(vec![1, 1, sh[0], sh[1], sh[2]])
}

/// Inverse of [`as_input`] for single-channel batch-1 outputs.
pub fn as_volume(t: &Array<f32>) -> Result<Array<f32>> {
    let sh = t.shape().to_vec();
    if sh.len() != 5 || sh[0] != 1 || sh[1] != 1 {
        return Err(VoxError::shape(format!(
            "expected a [1,1,d,h,w] tensor, got {sh:?}"
        )));
    }
    t.clone().reshaped(sh[2..].to_vec())
}

pub fn write_csv(path: &std::path::Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::split_dataset;

    #[test]
    fn pool_checks_manifest_hash_and_serves_subjects() {
        let spec = PhantomSpec::desk();
        let mut manifest = DatasetManifest::new(&spec, 4).unwrap();
        split_dataset(&mut manifest, 0.5, 1).unwrap();
        let pool = DataPool::new(spec.clone(), manifest.clone()).unwrap();
        assert_eq!(pool.seeds(Split::Train).len(), 2);
        let seed = pool.seeds(Split::Train)[0];
        let a = pool.subject(seed).unwrap();
        let b = pool.subject(seed).unwrap();
        assert_eq!(a.volumes[0].data(), b.volumes[0].data());

        let mut other = spec;
        other.seed += 1;
        assert!(DataPool::new(other, manifest).is_err());
    }

    #[test]
    fn exported_tree_round_trips_through_directory_pool() {
        let mut spec = PhantomSpec::desk();
        spec.extent = [8, 8, 8];
        let mut manifest = DatasetManifest::new(&spec, 3).unwrap();
        split_dataset(&mut manifest, 0.67, 2).unwrap();
        let pool = DataPool::new(spec, manifest).unwrap();
        let dir = std::env::temp_dir().join("voxtrans-pool-test");
        let _ = std::fs::remove_dir_all(&dir);
        export_pool(&pool, &dir).unwrap();

        let disk = DataPool::from_dir(&dir).unwrap();
        assert_eq!(disk.modality_names(), pool.modality_names());
        assert_eq!(disk.seeds(Split::Train), pool.seeds(Split::Train));
        let seed = pool.seeds(Split::Test)[0];
        let a = pool.subject(seed).unwrap();
        let b = disk.subject(seed).unwrap();
        for (x, y) in a.volumes.iter().zip(&b.volumes) {
            assert_eq!(x.shape(), y.shape());
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        assert!(disk.subject(12345).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn input_round_trip_preserves_layout() {
        let vol = Array::<f32>::from_fn(vec![4, 4, 4], |i| i as f32);
        let t = as_input(&vol).unwrap();
        assert_eq!(t.shape(), &[1, 1, 4, 4, 4]);
        let back = as_volume(&t).unwrap();
        assert_eq!(back.shape(), &[4, 4, 4]);
        assert_eq!(back.data(), vol.data());
    }
}
