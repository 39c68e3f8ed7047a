//! Trial data model and the EEGB interchange format.
//!
//! EEGB layout, all integers little-endian:
//!
//! ```text
//! "EEGB"            4 bytes magic
//! version           u16 (= 1)
//! n_trials          u32
//! channels          u16
//! samples_per_trial u32
//! sampling_rate     f32
//! subject_id        u32
//! session length    u16, followed by that many UTF-8 bytes
//! labels            n_trials x u8
//! data              n_trials x channels x samples f32, channel-major per trial
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const EEGB_MAGIC: &[u8; 4] = b"EEGB";
pub const EEGB_VERSION: u16 = 1;

/// Binary class label: 0 = left hand, 1 = right hand.
pub type Label = u8;

pub const LEFT_HAND: Label = 0;
pub const RIGHT_HAND: Label = 1;

/// One labeled `channels x samples` recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub data: Mat<f64>,
    pub label: Label,
}

impl Trial {
    pub fn new(data: Mat<f64>, label: Label) -> Result<Self> {
        let trial = Trial { data, label };
        trial.validate()?;
        Ok(trial)
    }

    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn samples(&self) -> usize {
        self.data.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels() == 0 || self.samples() == 0 {
            return Err(Error::invalid("trial must have at least one channel and one sample"));
        }
        if self.label > 1 {
            return Err(Error::invalid(format!("label {} is not binary", self.label)));
        }
        if !self.data.is_finite() {
            return Err(Error::invalid("trial contains non-finite samples"));
        }
        Ok(())
    }
}

/// A subject's trials in acquisition order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub subject_id: u32,
    pub session_id: String,
    pub fs: f64,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(subject_id: u32, session_id: impl Into<String>, fs: f64, trials: Vec<Trial>) -> Result<Self> {
        let set = TrialSet {
            subject_id,
            session_id: session_id.into(),
            fs,
            trials,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// `(channels, samples)` of the first trial, if any.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.trials.first().map(|t| (t.channels(), t.samples()))
    }

    pub fn labels(&self) -> Vec<Label> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for t in &self.trials {
            counts[t.label as usize] += 1;
        }
        counts
    }

    /// Same metadata, different trials.
    pub fn with_trials(&self, trials: Vec<Trial>) -> TrialSet {
        TrialSet {
            subject_id: self.subject_id,
            session_id: self.session_id.clone(),
            fs: self.fs,
            trials,
        }
    }

    /// Subset by index, keeping the given order.
    pub fn select(&self, indices: &[usize]) -> TrialSet {
        self.with_trials(indices.iter().map(|&i| self.trials[i].clone()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) || !self.fs.is_finite() {
            return Err(Error::invalid(format!("sampling rate {} must be positive", self.fs)));
        }
        if let Some((c, t)) = self.shape() {
            for (i, trial) in self.trials.iter().enumerate() {
                trial.validate()?;
                if trial.channels() != c || trial.samples() != t {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{c}x{t}"),
                        got: format!("{}x{} at trial {i}", trial.channels(), trial.samples()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Writes a trial set as EEGB.
///
/// `channels` and `samples` are recorded even for an empty set, so they are
/// passed explicitly when the set has no trials to infer them from.
pub fn write_eegb_with_shape(set: &TrialSet, shape: (usize, usize), path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_eegb(set, shape)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes a non-empty trial set as EEGB.
pub fn write_eegb(set: &TrialSet, path: impl AsRef<Path>) -> Result<()> {
    let shape = set
        .shape()
        .ok_or_else(|| Error::invalid("empty trial set: use write_eegb_with_shape"))?;
    write_eegb_with_shape(set, shape, path)
}

pub fn encode_eegb(set: &TrialSet, (channels, samples): (usize, usize)) -> Result<Vec<u8>> {
    set.validate()?;
    if let Some(shape) = set.shape() {
        if shape != (channels, samples) {
            return Err(Error::DimensionMismatch {
                expected: format!("{channels}x{samples}"),
                got: format!("{}x{}", shape.0, shape.1),
            });
        }
    }
    let n = u32::try_from(set.len()).map_err(|_| Error::invalid("too many trials"))?;
    let c = u16::try_from(channels).map_err(|_| Error::invalid("too many channels"))?;
    let t = u32::try_from(samples).map_err(|_| Error::invalid("too many samples"))?;
    let session = set.session_id.as_bytes();
    let session_len = u16::try_from(session.len()).map_err(|_| Error::invalid("session id too long"))?;

    let mut out = Vec::with_capacity(26 + session.len() + set.len() * (1 + 4 * channels * samples));
    out.extend_from_slice(EEGB_MAGIC);
    out.extend_from_slice(&EEGB_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&(set.fs as f32).to_le_bytes());
    out.extend_from_slice(&set.subject_id.to_le_bytes());
    out.extend_from_slice(&session_len.to_le_bytes());
    out.extend_from_slice(session);
    out.extend(set.trials.iter().map(|t| t.label));
    for trial in &set.trials {
        for &x in trial.data.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated while reading {what}"))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decoded EEGB contents. `shape` survives even when there are no trials.
#[derive(Clone, Debug, PartialEq)]
pub struct EegbFile {
    pub set: TrialSet,
    pub channels: usize,
    pub samples: usize,
}

pub fn decode_eegb(buf: &[u8]) -> Result<EegbFile> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != EEGB_MAGIC {
        return Err(Error::Format("bad magic, expected EEGB".into()));
    }
    let version = cur.u16("version")?;
    if version != EEGB_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = cur.u32("trial count")? as usize;
    let c = cur.u16("channel count")? as usize;
    let t = cur.u32("sample count")? as usize;
    let fs = cur.f32("sampling rate")?;
    let subject_id = cur.u32("subject id")?;
    let session_len = cur.u16("session length")? as usize;
    let session = std::str::from_utf8(cur.take(session_len, "session id")?)
        .map_err(|_| Error::Format("session id is not UTF-8".into()))?
        .to_string();
    let labels = cur.take(n, "labels")?.to_vec();
    let per_trial = c
        .checked_mul(t)
        .ok_or_else(|| Error::Format("trial size overflows".into()))?;
    let mut trials = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let raw = cur.take(per_trial * 4, "trial data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("non-finite sample in trial {i}")));
        }
        if label > 1 {
            return Err(Error::Format(format!("label {label} in trial {i} is not binary")));
        }
        trials.push(Trial {
            data: Mat::from_vec(c, t, data)?,
            label,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    if n > 0 && (c == 0 || t == 0) {
        return Err(Error::Format("zero-sized trials".into()));
    }
    let set = TrialSet {
        subject_id,
        session_id: session,
        fs: fs as f64,
        trials,
    };
    set.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(EegbFile {
        set,
        channels: c,
        samples: t,
    })
}

pub fn read_eegb_file(path: impl AsRef<Path>) -> Result<EegbFile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_eegb(&buf)
}

pub fn read_eegb(path: impl AsRef<Path>) -> Result<TrialSet> {
    Ok(read_eegb_file(path)?.set)
}

/// Rounds every sample to the nearest `f32`, the precision EEGB stores.
pub fn quantize_to_storage(set: &mut TrialSet) {
    set.fs = set.fs as f32 as f64;
    for trial in &mut set.trials {
        for x in trial.data.as_mut_slice() {
            *x = *x as f32 as f64;
        }
    }
}

/// Drops trials at random so the count becomes a multiple of `m`, keeping
/// class proportions. Survivors keep their order.
pub fn trim_to_multiple(set: &TrialSet, m: usize, rng_seed: u64) -> Result<TrialSet> {
    Ok(set.select(&trim_indices(set, m, rng_seed)?))
}

/// Indices kept by [`trim_to_multiple`], ascending.
pub fn trim_indices(set: &TrialSet, m: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::invalid("group size must be positive"));
    }
    let n = set.len();
    if n < m {
        return Err(Error::invalid(format!("{n} trials is fewer than group size {m}")));
    }
    let counts = set.class_counts();
    if counts.contains(&0) {
        return Err(Error::invalid("trimming needs both classes present"));
    }
    let remove = n % m;
    if remove == 0 {
        return Ok((0..n).collect());
    }
    let mut per_class = [remove * counts[0] / n, remove * counts[1] / n];
    let leftover = remove - per_class[0] - per_class[1];
    if leftover > 0 {
        // The odd trial goes to the majority class; class 0 on a tie.
        let majority = if counts[1] > counts[0] { 1 } else { 0 };
        per_class[majority] += leftover;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut drop = vec![false; n];
    for class in 0..2 {
        let members: Vec<usize> = (0..n).filter(|&i| set.trials[i].label as usize == class).collect();
        for k in sample(&mut rng, members.len(), per_class[class]) {
            drop[members[k]] = true;
        }
    }
    Ok((0..n).filter(|&i| !drop[i]).collect())
}

/// Random disjoint `(train, val)` index split with `|val| = round(frac * n)`.
/// Both halves are returned in ascending order.
pub fn split_indices(n: usize, frac: f64, rng_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!("validation fraction {frac} outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::invalid("cannot split an empty pool"));
    }
    let n_val = (frac * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut is_val = vec![false; n];
    for i in sample(&mut rng, n, n_val) {
        is_val[i] = true;
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_val[i]);
    Ok((train, val))
}

pub fn split_train_val(set: &TrialSet, frac: f64, rng_seed: u64) -> Result<(TrialSet, TrialSet)> {
    let (train, val) = split_indices(set.len(), frac, rng_seed)?;
    Ok((set.select(&train), set.select(&val)))
}

/// A named multi-subject collection sharing one trial shape and rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub subjects: Vec<TrialSet>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, subjects: Vec<TrialSet>) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut common: Option<(usize, usize, f64)> = None;
        for s in &self.subjects {
            s.validate()?;
            if !seen.insert(s.subject_id) {
                return Err(Error::invalid(format!("duplicate subject id {}", s.subject_id)));
            }
            if let Some((c, t)) = s.shape() {
                match common {
                    None => common = Some((c, t, s.fs)),
                    Some(k) if k == (c, t, s.fs) => {}
                    Some((c0, t0, fs0)) => {
                        return Err(Error::DimensionMismatch {
                            expected: format!("{c0}x{t0} @ {fs0} Hz"),
                            got: format!("{c}x{t} @ {} Hz for subject {}", s.fs, s.subject_id),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: u32) -> Option<&TrialSet> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.subjects.iter().find_map(TrialSet::shape)
    }

    pub fn fs(&self) -> Option<f64> {
        self.subjects.first().map(|s| s.fs)
    }

    /// Writes one EEGB file per subject plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (channels, samples) = self.shape().unwrap_or((0, 0));
        let mut entries = Vec::new();
        for s in &self.subjects {
            let file = format!("subject_{:03}.eegb", s.subject_id);
            write_eegb_with_shape(s, (channels, samples), dir.join(&file))?;
            entries.push(ManifestEntry {
                subject_id: s.subject_id,
                session_id: s.session_id.clone(),
                file,
                n_trials: s.len(),
            });
        }
        let manifest = DatasetManifest {
            name: self.name.clone(),
            channels,
            samples,
            fs: self.fs().unwrap_or(0.0) as f32 as f64,
            subjects: entries,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }

    /// Loads a dataset from its manifest. Entries sharing a subject id (one per
    /// session) are concatenated in manifest order.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut merged: BTreeMap<u32, TrialSet> = BTreeMap::new();
        let mut order = Vec::new();
        for entry in &manifest.subjects {
            let file = read_eegb_file(base.join(&entry.file))?;
            if file.set.subject_id != entry.subject_id {
                return Err(Error::Format(format!(
                    "{} holds subject {}, manifest says {}",
                    entry.file, file.set.subject_id, entry.subject_id
                )));
            }
            if file.set.len() != entry.n_trials {
                return Err(Error::Format(format!(
                    "{} holds {} trials, manifest says {}",
                    entry.file,
                    file.set.len(),
                    entry.n_trials
                )));
            }
            if !file.set.is_empty() && (file.channels, file.samples) != (manifest.channels, manifest.samples) {
                return Err(Error::Format(format!("{} shape disagrees with manifest", entry.file)));
            }
            match merged.get_mut(&entry.subject_id) {
                Some(existing) => {
                    existing.session_id = format!("{}+{}", existing.session_id, file.set.session_id);
                    existing.trials.extend(file.set.trials);
                }
                None => {
                    order.push(entry.subject_id);
                    merged.insert(entry.subject_id, file.set);
                }
            }
        }
        let subjects = order.iter().map(|id| merged.remove(id).unwrap()).collect();
        Dataset::new(manifest.name, subjects)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: u32,
    pub session_id: String,
    pub file: String,
    pub n_trials: usize,
}

/// JSON manifest listing a dataset's EEGB files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub subjects: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with_labels(labels: &[Label]) -> TrialSet {
        let trials = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Trial::new(Mat::from_fn(2, 3, |r, c| (i * 6 + r * 3 + c) as f64), l).unwrap())
            .collect();
        TrialSet::new(1, "s", 250.0, trials).unwrap()
    }

    fn labels(n0: usize, n1: usize) -> Vec<Label> {
        // Interleave so both classes are spread through the set.
        let mut out = Vec::new();
        let (mut a, mut b) = (n0, n1);
        while a + b > 0 {
            if a > 0 {
                out.push(0);
                a -= 1;
            }
            if b > 0 {
                out.push(1);
                b -= 1;
            }
        }
        out
    }

    #[test]
    fn empty_set_round_trips_with_header() {
        let set = TrialSet::new(3, "T", 250.0, vec![]).unwrap();
        let bytes = encode_eegb(&set, (2, 4)).unwrap();
        let back = decode_eegb(&bytes).unwrap();
        assert_eq!(back.set, set);
        assert_eq!((back.channels, back.samples), (2, 4));
        assert_eq!(&bytes[..4], b"EEGB");
    }

    #[test]
    fn zero_trial_round_trips() {
        let set = TrialSet::new(1, "", 128.0, vec![Trial::new(Mat::zeros(3, 5), 1).unwrap()]).unwrap();
        let back = decode_eegb(&encode_eegb(&set, (3, 5)).unwrap()).unwrap().set;
        assert_eq!(back, set);
    }

    #[test]
    fn header_layout_is_exact() {
        let set = TrialSet::new(7, "ab", 250.0, vec![Trial::new(Mat::from_vec(1, 1, vec![1.5]).unwrap(), 1).unwrap()])
            .unwrap();
        let bytes = encode_eegb(&set, (1, 1)).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"EEGB");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&250f32.to_le_bytes());
        expected.extend_from_slice(&7u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn decode_rejects_corruption() {
        let set = set_with_labels(&[0, 1]);
        let good = encode_eegb(&set, (2, 3)).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_eegb(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_eegb(&bad_version), Err(Error::Format(_))));

        assert!(matches!(decode_eegb(&good[..good.len() - 1]), Err(Error::Format(_))));

        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_eegb(&nan), Err(Error::Format(_))));
    }

    #[test]
    fn write_rejects_invalid_sets() {
        let mut set = set_with_labels(&[0, 1]);
        set.trials[1].data[(0, 0)] = f64::INFINITY;
        assert!(encode_eegb(&set, (2, 3)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let ok = set_with_labels(&[0]);
        assert!(matches!(
            write_eegb(&ok, dir.path().join("missing/dir/x.eegb")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn trim_already_multiple_is_unchanged() {
        let set = set_with_labels(&labels(24, 24));
        assert_eq!(trim_to_multiple(&set, 24, 1).unwrap(), set);
    }

    #[test]
    fn trim_balanced_removes_one_per_class() {
        let set = set_with_labels(&labels(25, 25));
        let out = trim_to_multiple(&set, 24, 1).unwrap();
        assert_eq!(out.len(), 48);
        assert_eq!(out.class_counts(), [24, 24]);
    }

    #[test]
    fn trim_odd_removes_from_majority() {
        let set = set_with_labels(&labels(25, 24));
        let out = trim_to_multiple(&set, 24, 1).unwrap();
        assert_eq!(out.class_counts(), [24, 24]);
    }

    #[test]
    fn trim_preserves_order_and_errors() {
        let set = set_with_labels(&labels(30, 23));
        let out = trim_to_multiple(&set, 24, 9).unwrap();
        assert_eq!(out.len(), 48);
        // Survivors appear in their original relative order.
        let firsts: Vec<f64> = out.trials.iter().map(|t| t.data[(0, 0)]).collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        assert!(trim_to_multiple(&set_with_labels(&labels(5, 5)), 24, 0).is_err());
        assert!(trim_to_multiple(&set_with_labels(&labels(30, 0)), 24, 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (train, val) = split_indices(10, 0.2, 4).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert!(train.iter().all(|i| !val.contains(i)));
        assert_eq!(split_indices(10, 0.2, 4).unwrap(), (train, val));

        let a = split_indices(100, 0.2, 1).unwrap();
        let b = split_indices(100, 0.2, 2).unwrap();
        assert_eq!(a.1.len(), 20);
        assert_eq!(b.1.len(), 20);
        assert_ne!(a.1, b.1);

        assert!(split_indices(10, 0.0, 1).is_err());
        assert!(split_indices(10, 1.0, 1).is_err());
        assert!(split_indices(0, 0.2, 1).is_err());
    }

    #[test]
    fn dataset_rejects_duplicates_and_shape_mismatch() {
        let a = set_with_labels(&[0, 1]);
        assert!(Dataset::new("d", vec![a.clone(), a.clone()]).is_err());
        let mut b = a.clone();
        b.subject_id = 2;
        b.fs = 128.0;
        assert!(Dataset::new("d", vec![a, b]).is_err());
    }

    #[test]
    fn dataset_save_load_merges_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let a = set_with_labels(&[0, 1, 1]);
        let mut b = set_with_labels(&[1, 0]);
        b.subject_id = 2;
        let ds = Dataset::new("toy", vec![a.clone(), b.clone()]).unwrap();
        let manifest = ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(&manifest).unwrap(), ds);

        // Two files for subject 1 are merged in manifest order.
        let mut m = DatasetManifest::read(&manifest).unwrap();
        let mut second = a.clone();
        second.session_id = "E".into();
        write_eegb(&second, dir.path().join("s1_e.eegb")).unwrap();
        m.subjects.push(ManifestEntry {
            subject_id: 1,
            session_id: "E".into(),
            file: "s1_e.eegb".into(),
            n_trials: 3,
        });
        m.write(&manifest).unwrap();
        let loaded = Dataset::load(&manifest).unwrap();
        assert_eq!(loaded.subjects[0].len(), 6);
        assert_eq!(loaded.subjects[0].session_id, "s+E");
    }
}
