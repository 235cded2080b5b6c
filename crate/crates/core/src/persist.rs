//! Binary checkpoints and dataset directories.
//!
//! Every binary file uses one framing:
//!
//! ```text
//! "PFT1" | version u16 | payload_len u64 | payload | crc32(payload) u32
//! ```
//!
//! and every payload is a list of named entries:
//!
//! ```text
//! count u32 | { name_len u32 | name | frozen u8 | rank u32 | extents u32.. | values f64.. }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::models::Network;
use crate::pipeline::RunConfig;
use crate::synthdata::{Dataset, DatasetSpec, Population, Sample, SubjectProfile, TargetSplit, LANDMARKS};

pub const MAGIC: &[u8; 4] = b"PFT1";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            frozen: false,
            shape,
            values,
        }
    }

    fn bit_eq(&self, other: &Entry) -> bool {
        self.name == other.name
            && self.frozen == other.frozen
            && self.shape == other.shape
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named parameter entries of one or more networks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_networks(nets: &[&dyn Network]) -> Self {
        let entries = nets
            .iter()
            .flat_map(|n| n.named_params())
            .map(|(name, t)| Entry {
                name,
                frozen: !t.requires_grad(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect();
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| FormatError::Missing(name.to_string()).into())
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.bit_eq(b))
    }

    /// Copies stored values and frozen flags into `net`. Every parameter
    /// of `net` must be present with the same shape; nothing is written
    /// unless all of them match.
    pub fn restore_into(&self, net: &mut dyn Network) -> Result<()> {
        let mut found = Vec::new();
        for (name, t) in net.named_params() {
            let e = self.require(&name)?;
            if e.shape != t.shape() {
                return Err(FormatError::Dimension {
                    name,
                    expected: t.shape().to_vec(),
                    found: e.shape.clone(),
                }
                .into());
            }
            found.push(e);
        }
        for (t, e) in net.params_mut().into_iter().zip(found) {
            t.values_mut().copy_from_slice(&e.values);
            t.set_requires_grad(!e.frozen);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        put_u32(&mut payload, self.entries.len());
        for e in &self.entries {
            put_u32(&mut payload, e.name.len());
            payload.extend_from_slice(e.name.as_bytes());
            payload.push(e.frozen as u8);
            put_u32(&mut payload, e.shape.len());
            for &s in &e.shape {
                put_u32(&mut payload, s);
            }
            for v in &e.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        frame(&payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = unframe(bytes)?;
        let mut r = Reader { buf: payload, pos: 0 };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| FormatError::Malformed("entry name is not UTF-8".into()))?;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(FormatError::Malformed(format!("frozen flag {b} in `{name}`")).into()),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| FormatError::Malformed(format!("extents of `{name}` overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| FormatError::Malformed("size overflow".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { name, frozen, shape, values });
        }
        if r.pos != payload.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing payload bytes",
                payload.len() - r.pos
            ))
            .into());
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("entry field exceeds u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out
}

fn unframe(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 6 {
        return Err(FormatError::Truncated(format!("{} header bytes", bytes.len())).into());
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated(format!("{} header bytes", bytes.len())).into());
    }
    let len = u64::from_le_bytes(bytes[6..HEADER].try_into().unwrap());
    let expected = (HEADER as u64).saturating_add(len).saturating_add(4);
    if (bytes.len() as u64) < expected {
        return Err(FormatError::Truncated(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        ))
        .into());
    }
    if (bytes.len() as u64) > expected {
        return Err(FormatError::Malformed(format!(
            "{} bytes after checksum",
            bytes.len() as u64 - expected
        ))
        .into());
    }
    let end = HEADER + len as usize;
    let payload = &bytes[HEADER..end];
    let stored = u32::from_le_bytes(bytes[end..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::Crc { stored, computed }.into());
    }
    Ok(payload)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            FormatError::Malformed(format!("entry runs past payload end at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a run config file; unknown keys and invalid values are rejected
/// before anything is computed.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

// ---- dataset directories ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub source_subjects: Vec<u32>,
    pub target_subjects: Vec<u32>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const PROFILES_FILE: &str = "profiles.bin";

pub fn samples_file(subject_id: u32) -> String {
    format!("samples-{subject_id}.bin")
}

fn profile_entries(p: &SubjectProfile) -> Vec<Entry> {
    let d = p.input_dim();
    let id = p.subject_id;
    let pop = match p.population {
        Population::Source => 0.0,
        Population::Target => 1.0,
    };
    vec![
        Entry::new(format!("{id}.meta"), vec![4], vec![id as f64, pop, p.age, p.gender as f64]),
        Entry::new(format!("{id}.latent"), vec![p.latent.len()], p.latent.clone()),
        Entry::new(format!("{id}.gain"), vec![d], p.style_gain.clone()),
        Entry::new(format!("{id}.offset"), vec![d], p.style_offset.clone()),
        Entry::new(format!("{id}.mixing"), vec![d, d], p.mixing.clone()),
        Entry::new(
            format!("{id}.landmarks"),
            vec![LANDMARKS, 2],
            p.landmarks.iter().flatten().copied().collect(),
        ),
        Entry::new(format!("{id}.pose"), vec![3], p.pose.to_vec()),
    ]
}

fn shaped<'a>(ck: &'a Checkpoint, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
    let e = ck.require(name)?;
    if e.shape != shape {
        return Err(FormatError::Dimension {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: e.shape.clone(),
        }
        .into());
    }
    Ok(&e.values)
}

fn as_index(v: f64, what: &str) -> Result<u32> {
    if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
        Ok(v as u32)
    } else {
        Err(FormatError::Malformed(format!("{what} is not an integer: {v}")).into())
    }
}

fn read_profile(ck: &Checkpoint, id: u32, spec: &DatasetSpec) -> Result<SubjectProfile> {
    let d = spec.input_dim;
    let meta = shaped(ck, &format!("{id}.meta"), &[4])?;
    if as_index(meta[0], "subject id")? != id {
        return Err(FormatError::Malformed(format!("profile {id} stores id {}", meta[0])).into());
    }
    let population = match meta[1] {
        0.0 => Population::Source,
        1.0 => Population::Target,
        v => return Err(FormatError::Malformed(format!("population code {v}")).into()),
    };
    let gender = as_index(meta[3], "gender")?;
    let lm = shaped(ck, &format!("{id}.landmarks"), &[LANDMARKS, 2])?;
    let mut landmarks = [[0.0; 2]; LANDMARKS];
    for (i, p) in landmarks.iter_mut().enumerate() {
        *p = [lm[2 * i], lm[2 * i + 1]];
    }
    let pose = shaped(ck, &format!("{id}.pose"), &[3])?;
    Ok(SubjectProfile {
        subject_id: id,
        population,
        latent: shaped(ck, &format!("{id}.latent"), &[spec.style.latent_dim])?.to_vec(),
        style_gain: shaped(ck, &format!("{id}.gain"), &[d])?.to_vec(),
        style_offset: shaped(ck, &format!("{id}.offset"), &[d])?.to_vec(),
        mixing: shaped(ck, &format!("{id}.mixing"), &[d, d])?.to_vec(),
        landmarks,
        pose: [pose[0], pose[1], pose[2]],
        age: meta[2],
        gender: u8::try_from(gender)
            .map_err(|_| FormatError::Malformed(format!("gender code {gender}")))?,
    })
}

fn split_entries(split: &str, samples: &[Sample], d: usize) -> Vec<Entry> {
    let n = samples.len();
    vec![
        Entry::new(format!("{split}.x"), vec![n, d], samples.iter().flat_map(|s| s.x.iter().copied()).collect()),
        Entry::new(format!("{split}.label"), vec![n], samples.iter().map(|s| s.label as f64).collect()),
        Entry::new(format!("{split}.frame_id"), vec![n], samples.iter().map(|s| s.frame_id as f64).collect()),
    ]
}

fn read_split(ck: &Checkpoint, split: &str, subject_id: u32, spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let labels = ck.require(&format!("{split}.label"))?;
    let n = labels.values.len();
    let x = shaped(ck, &format!("{split}.x"), &[n, spec.input_dim])?;
    let frames = shaped(ck, &format!("{split}.frame_id"), &[n])?;
    (0..n)
        .map(|i| {
            let label = as_index(labels.values[i], "label")? as usize;
            if label >= spec.classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: spec.classes,
                });
            }
            Ok(Sample {
                x: x[i * spec.input_dim..(i + 1) * spec.input_dim].to_vec(),
                label,
                subject_id,
                frame_id: as_index(frames[i], "frame id")?,
            })
        })
        .collect()
}

fn by_subject(samples: &[Sample], id: u32) -> Vec<Sample> {
    samples.iter().filter(|s| s.subject_id == id).cloned().collect()
}

/// Writes `manifest.json`, `profiles.bin` and one samples file per subject.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let spec = &data.spec;
    let d = spec.input_dim;
    let ids = |pop| {
        data.profiles
            .iter()
            .filter(|p| p.population == pop)
            .map(|p| p.subject_id)
            .collect::<Vec<_>>()
    };
    let manifest = DatasetManifest {
        spec: spec.clone(),
        source_subjects: ids(Population::Source),
        target_subjects: ids(Population::Target),
    };
    save_json(&manifest, &dir.join(DATASET_MANIFEST))?;

    let mut profiles = Checkpoint::default();
    profiles.entries.push(Entry::new(
        "prototypes",
        vec![data.prototypes.len(), d],
        data.prototypes.iter().flatten().copied().collect(),
    ));
    for p in &data.profiles {
        profiles.entries.extend(profile_entries(p));
    }
    profiles.save(&dir.join(PROFILES_FILE))?;

    for &id in &manifest.source_subjects {
        let mut ck = Checkpoint::default();
        ck.entries.extend(split_entries("train", &by_subject(&data.source_train, id), d));
        ck.entries.extend(split_entries("val", &by_subject(&data.source_val, id), d));
        ck.save(&dir.join(samples_file(id)))?;
    }
    for t in &data.targets {
        let mut ck = Checkpoint::default();
        ck.entries.extend(split_entries("adapt", &t.adapt, d));
        ck.entries.extend(split_entries("oracle_train", &t.oracle_train, d));
        ck.entries.extend(split_entries("test", &t.test, d));
        ck.save(&dir.join(samples_file(t.subject_id)))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let spec = manifest.spec;
    spec.validate()?;

    let profiles_ck = Checkpoint::load(&dir.join(PROFILES_FILE))?;
    let protos = shaped(&profiles_ck, "prototypes", &[spec.classes, spec.input_dim])?;
    let prototypes = protos.chunks(spec.input_dim).map(<[f64]>::to_vec).collect();
    let mut profiles = Vec::new();
    for &id in manifest.source_subjects.iter().chain(&manifest.target_subjects) {
        profiles.push(read_profile(&profiles_ck, id, &spec)?);
    }

    let (mut source_train, mut source_val) = (Vec::new(), Vec::new());
    for &id in &manifest.source_subjects {
        let ck = Checkpoint::load(&dir.join(samples_file(id)))?;
        source_train.extend(read_split(&ck, "train", id, &spec)?);
        source_val.extend(read_split(&ck, "val", id, &spec)?);
    }
    let targets = manifest
        .target_subjects
        .iter()
        .map(|&id| {
            let ck = Checkpoint::load(&dir.join(samples_file(id)))?;
            Ok(TargetSplit {
                subject_id: id,
                adapt: read_split(&ck, "adapt", id, &spec)?,
                oracle_train: read_split(&ck, "oracle_train", id, &spec)?,
                test: read_split(&ck, "test", id, &spec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec,
        prototypes,
        profiles,
        source_train,
        source_val,
        targets,
    })
}

/// Path of a required input, or a dependency error naming it.
pub fn require_file(path: &Path, produced_by: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Dependency {
            path: path.to_path_buf(),
            produced_by: produced_by.to_string(),
        })
    }
}
