//! On-disk dataset format.
//!
//! Layout: `manifest.json` plus `samples/NNNN.bin`. Each sample file
//! is a little-endian container of shape-tagged f64 arrays
//! ("structure", "dose", "body"); the manifest records the version,
//! the generation spec, split membership, and a SHA-256 checksum per
//! file. Rebuilding with the same arguments reproduces every byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_phantom, DoseMap, Phantom, PhantomSpec, StructureImage, STRUCTURE_CHANNELS};
use crate::error::{Error, Result};
use crate::util::{sha256_hex, write_atomic};

const SAMPLE_MAGIC: &[u8; 4] = b"DPHS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub file: String,
    pub seed: u64,
    pub split: Split,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub base_seed: u64,
    pub spec: PhantomSpec,
    pub splits: SplitLists,
    pub samples: Vec<SampleEntry>,
}

// ── array container ──────────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_array(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, dims.len() as u32);
    for &d in dims {
        put_u32(buf, d as u32);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Dataset(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Writes a standalone shape-tagged array container (same envelope as
/// dataset samples); used for prediction files.
pub fn write_array_file(path: &Path, arrays: &[(&str, Vec<usize>, &[f64])]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SAMPLE_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, arrays.len() as u32);
    for (name, dims, data) in arrays {
        write_array(&mut buf, name, dims, data);
    }
    write_atomic(path, &buf)
}

/// Reads a shape-tagged array container back as (name, dims, data)
/// triples.
pub fn read_array_file(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(Error::Dataset(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n_arrays = r.u32()?;
    let mut out = Vec::with_capacity(n_arrays as usize);
    for _ in 0..n_arrays {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Dataset(format!("{}: bad array name", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        out.push((name, dims, r.f64_vec(numel)?));
    }
    Ok(out)
}

pub(crate) fn encode_sample(p: &Phantom) -> Vec<u8> {
    let (h, w) = (p.structure.height, p.structure.width);
    let mut buf = Vec::new();
    buf.extend_from_slice(SAMPLE_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, 3);
    write_array(
        &mut buf,
        "structure",
        &[STRUCTURE_CHANNELS, h, w],
        &p.structure.data,
    );
    write_array(&mut buf, "dose", &[1, h, w], &p.dose.data);
    write_array(&mut buf, "body", &[1, h, w], &p.body);
    buf
}

pub(crate) fn decode_sample(bytes: &[u8], path: &Path) -> Result<Phantom> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(Error::Dataset(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let n_arrays = r.u32()?;
    let mut structure: Option<(Vec<usize>, Vec<f64>)> = None;
    let mut dose: Option<(Vec<usize>, Vec<f64>)> = None;
    let mut body: Option<(Vec<usize>, Vec<f64>)> = None;
    for _ in 0..n_arrays {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Dataset(format!("{}: bad array name", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f64_vec(numel)?;
        match name.as_str() {
            "structure" => structure = Some((dims, data)),
            "dose" => dose = Some((dims, data)),
            "body" => body = Some((dims, data)),
            other => {
                return Err(Error::Dataset(format!(
                    "{}: unexpected array '{other}'",
                    path.display()
                )))
            }
        }
    }
    let (sdims, sdata) = structure
        .ok_or_else(|| Error::Dataset(format!("{}: missing structure array", path.display())))?;
    let (ddims, ddata) =
        dose.ok_or_else(|| Error::Dataset(format!("{}: missing dose array", path.display())))?;
    let (_bdims, bdata) =
        body.ok_or_else(|| Error::Dataset(format!("{}: missing body array", path.display())))?;
    if sdims.len() != 3 || sdims[0] != STRUCTURE_CHANNELS {
        return Err(Error::Dataset(format!(
            "{}: structure dims {sdims:?}",
            path.display()
        )));
    }
    let (h, w) = (sdims[1], sdims[2]);
    if ddims != [1, h, w] {
        return Err(Error::Dataset(format!(
            "{}: dose dims {ddims:?}",
            path.display()
        )));
    }
    Ok(Phantom {
        structure: StructureImage {
            data: sdata,
            height: h,
            width: w,
        },
        dose: DoseMap {
            data: ddata,
            height: h,
            width: w,
        },
        body: bdata,
    })
}

// ── dataset build / open ─────────────────────────────────────────────

fn sample_rel_path(id: usize) -> String {
    format!("samples/{id:04}.bin")
}

/// Generates and persists a dataset with disjoint per-split seed
/// ranges (`base_seed + id`). Refuses to touch an existing dataset
/// directory unless `force` is set.
pub fn build_dataset(
    dir: &Path,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base_seed: u64,
    template: &PhantomSpec,
    force: bool,
) -> Result<Manifest> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Dataset(
            "every split needs at least one sample".into(),
        ));
    }
    template.validate()?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Dataset(format!(
            "{} already holds a dataset; pass force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir.join("samples"))?;

    let total = n_train + n_val + n_test;
    let mut samples = Vec::with_capacity(total);
    let mut splits = SplitLists {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for id in 0..total {
        let split = if id < n_train {
            Split::Train
        } else if id < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let seed = base_seed + id as u64;
        let phantom = generate_phantom(&template.with_seed(seed))?;
        let bytes = encode_sample(&phantom);
        let rel = sample_rel_path(id);
        write_atomic(&dir.join(&rel), &bytes)?;
        match split {
            Split::Train => splits.train.push(id),
            Split::Val => splits.val.push(id),
            Split::Test => splits.test.push(id),
        }
        samples.push(SampleEntry {
            id,
            file: rel,
            seed,
            split,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        base_seed,
        spec: template.with_seed(base_seed),
        splits,
        samples,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&manifest_path, &json)?;
    Ok(manifest)
}

/// Handle over a persisted dataset directory.
#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let bytes = fs::read(&manifest_path).map_err(|e| {
            Error::Dataset(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {}",
                manifest.version
            )));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        }
    }

    /// Loads one sample by id, verifying its checksum.
    pub fn load(&self, id: usize) -> Result<Phantom> {
        let entry = self
            .manifest
            .samples
            .get(id)
            .filter(|e| e.id == id)
            .ok_or_else(|| Error::Dataset(format!("sample id {id} out of range")))?;
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::ChecksumMismatch {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        decode_sample(&bytes, &path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn spec() -> PhantomSpec {
        PhantomSpec::desk(0)
    }

    #[test]
    fn split_counts_and_ratio() {
        let tmp = TempDir::new().unwrap();
        let m = build_dataset(tmp.path(), 10, 1, 4, 7, &spec(), false).unwrap();
        assert_eq!(m.splits.train.len(), 10);
        assert_eq!(m.splits.val.len(), 1);
        assert_eq!(m.splits.test.len(), 4);
        assert_eq!(m.samples.len(), 15);
        // disjoint seed ranges per split
        let seeds: Vec<u64> = m.samples.iter().map(|s| s.seed).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len(), "duplicate seeds across splits");
    }

    #[test]
    fn single_train_sample_manifest() {
        let tmp = TempDir::new().unwrap();
        let m = build_dataset(tmp.path(), 1, 1, 1, 0, &spec(), false).unwrap();
        assert_eq!(m.splits.train, vec![0]);
    }

    #[test]
    fn rebuild_with_same_seed_is_byte_identical() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let ma = build_dataset(a.path(), 3, 1, 1, 99, &spec(), false).unwrap();
        let mb = build_dataset(b.path(), 3, 1, 1, 99, &spec(), false).unwrap();
        for (x, y) in ma.samples.iter().zip(mb.samples.iter()) {
            assert_eq!(x.sha256, y.sha256);
        }
        let ja = std::fs::read(a.path().join("manifest.json")).unwrap();
        let jb = std::fs::read(b.path().join("manifest.json")).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn existing_dataset_requires_force() {
        let tmp = TempDir::new().unwrap();
        build_dataset(tmp.path(), 1, 1, 1, 0, &spec(), false).unwrap();
        let err = build_dataset(tmp.path(), 1, 1, 1, 0, &spec(), false).unwrap_err();
        assert!(err.to_string().contains("force"), "{err}");
        build_dataset(tmp.path(), 1, 1, 1, 0, &spec(), true).unwrap();
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let tmp = TempDir::new().unwrap();
        build_dataset(tmp.path(), 2, 1, 1, 5, &spec(), false).unwrap();
        let ds = Dataset::open(tmp.path()).unwrap();
        let loaded = ds.load(0).unwrap();
        let regenerated = generate_phantom(&spec().with_seed(5)).unwrap();
        assert_eq!(loaded, regenerated);

        assert!(ds.load(99).is_err());
    }

    #[test]
    fn checksum_mismatch_is_reported_as_corruption() {
        let tmp = TempDir::new().unwrap();
        build_dataset(tmp.path(), 1, 1, 1, 0, &spec(), false).unwrap();
        let ds = Dataset::open(tmp.path()).unwrap();
        let path = tmp.path().join("samples/0000.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = ds.load(0).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
    }

    #[test]
    fn split_parsing() {
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert!("training".parse::<Split>().is_err());
    }
}
