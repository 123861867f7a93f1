//! WAV decode/encode, corpus manifests, stratified splits, and seeded
//! batch iteration.
//!
//! Only PCM16 mono WAV is accepted; no resampling. Manifests are
//! line-delimited JSON objects with keys {"path","speaker","split",
//! "duration_s"}.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a WAV file: {0}")]
    NotWav(String),
    #[error("unsupported WAV format: {0} (only PCM16 mono is accepted)")]
    UnsupportedFormat(String),
    #[error("truncated WAV: {0}")]
    Truncated(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at line {line}: {detail}")]
    ParseError { line: usize, detail: String },
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(String),
    #[error("class {label} has only {count} entries; stratified split needs at least 3")]
    ClassTooSmall { label: String, count: usize },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios([f64; 3]),
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("sample {0} outside [-1, 1]")]
    SampleOutOfRange(f64),
}

/// Mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_path: Option<String>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> AudioClip {
        assert!(sample_rate > 0);
        debug_assert!(samples.iter().all(|s| (-1.0..=1.0).contains(s)));
        AudioClip {
            samples,
            sample_rate,
            source_path: None,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub speaker: String,
    pub split: Split,
    pub duration_s: f64,
}

/// A corpus description: entries plus the label -> class-id bijection
/// (sorted order of distinct speaker labels).
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub label_index: BTreeMap<String, usize>,
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>, root: PathBuf) -> Result<Manifest, AudioError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(AudioError::DuplicatePath(e.path.clone()));
            }
            if e.duration_s <= 0.0 {
                return Err(AudioError::ParseError {
                    line: 0,
                    detail: format!("non-positive duration for {}", e.path),
                });
            }
        }
        let mut label_index = BTreeMap::new();
        for e in &entries {
            label_index.insert(e.speaker.clone(), 0usize);
        }
        let keys: Vec<String> = label_index.keys().cloned().collect();
        for (i, k) in keys.iter().enumerate() {
            label_index.insert(k.clone(), i);
        }
        Ok(Manifest {
            entries,
            label_index,
            root,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.label_index.len()
    }

    pub fn class_id(&self, speaker: &str) -> Option<usize> {
        self.label_index.get(speaker).copied()
    }

    /// Class labels in id order.
    pub fn labels(&self) -> Vec<String> {
        let mut v: Vec<(usize, String)> = self
            .label_index
            .iter()
            .map(|(k, &i)| (i, k.clone()))
            .collect();
        v.sort();
        v.into_iter().map(|(_, k)| k).collect()
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn resolve(&self, entry_path: &str) -> PathBuf {
        let p = Path::new(entry_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> AudioError {
    AudioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Decode a RIFF/WAVE PCM16 mono file. Amplitude = raw_i16 / 32768.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let clip = decode_wav(&bytes)?;
    Ok(AudioClip {
        source_path: Some(path.display().to_string()),
        ..clip
    })
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::NotWav("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::NotWav("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav("missing WAVE magic".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::Truncated(format!(
                "chunk {:?} claims {} bytes past end of file",
                String::from_utf8_lossy(id),
                size
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Truncated("fmt chunk shorter than 16 bytes".into()));
                }
                let tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::NotWav("missing fmt chunk".into()))?;
    if tag != 1 || bits != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "format tag {tag}, {bits}-bit"
        )));
    }
    if channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!("{channels} channels")));
    }
    if rate == 0 {
        return Err(AudioError::UnsupportedFormat("zero sample rate".into()));
    }
    let data = data.ok_or_else(|| AudioError::NotWav("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(AudioError::Truncated("data chunk has odd byte length".into()));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: rate,
        source_path: None,
    })
}

/// Encode PCM16 mono: amplitude a -> round(a * 32768) clamped to i16,
/// the exact inverse of the decode scale so grid-aligned samples round
/// trip losslessly; +1.0 clamps to 32767.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    for &s in &clip.samples {
        if !(-1.0..=1.0).contains(&s) {
            return Err(AudioError::SampleOutOfRange(s));
        }
    }
    let bytes = encode_wav(clip);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<Manifest, AudioError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let root = path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| AudioError::ParseError {
                line: i + 1,
                detail: e.to_string(),
            })?;
        entries.push(entry);
    }
    Manifest::from_entries(entries, root)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), AudioError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reassign splits per class: seeded shuffle, then largest-remainder
/// apportionment of (train, val, test) counts. Deterministic for a
/// fixed seed; per-class counts stay within 1 of count * ratio.
pub fn stratified_split(
    manifest: &Manifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Manifest, AudioError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(AudioError::BadRatios(r));
    }
    let mut by_class: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(e.speaker.clone()).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for (ci, (label, mut group)) in by_class.into_iter().enumerate() {
        if group.len() < 3 {
            return Err(AudioError::ClassTooSmall {
                label,
                count: group.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        group.shuffle(&mut rng);
        let counts = apportion(group.len(), &r);
        let mut idx = 0;
        for (si, split) in Split::all().into_iter().enumerate() {
            for _ in 0..counts[si] {
                let mut e = group[idx].clone();
                e.split = split;
                out.push(e);
                idx += 1;
            }
        }
    }
    // keep original manifest order for determinism of downstream listings
    let order: BTreeMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.path.as_str(), i))
        .collect();
    out.sort_by_key(|e| order[e.path.as_str()]);
    Manifest::from_entries(out, manifest.root.clone())
}

/// Largest-remainder apportionment; ties broken toward the earlier split.
fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = exact
        .iter()
        .enumerate()
        .map(|(i, &e)| (i, e - e.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let assigned: usize = counts.iter().sum();
    for k in 0..(n - assigned) {
        counts[rem[k % 3].0] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// One mini-batch: zero-padded waveforms plus per-clip valid lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row-major [batch, max_len] waveform samples.
    pub waveforms: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Seeded single-epoch batch iterator. Train-split clips longer than
/// `max_len_s` are truncated to a seeded random window; val/test clips
/// always take the leading window so evaluation stays deterministic.
pub struct BatchIter {
    plan: Vec<(PathBuf, String, usize)>, // resolved path, manifest path, class id
    batch_size: usize,
    max_len: usize,
    cursor: usize,
    rng: ChaCha8Rng,
    random_window: bool,
}

pub fn batch_iter(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    max_len_s: f64,
    seed: u64,
) -> Result<BatchIter, AudioError> {
    assert!(batch_size >= 1);
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(AudioError::EmptySplit(split));
    }
    let mut plan: Vec<(PathBuf, String, usize)> = entries
        .iter()
        .map(|e| {
            (
                manifest.resolve(&e.path),
                e.path.clone(),
                manifest.class_id(&e.speaker).expect("label in index"),
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6261_7463);
    plan.shuffle(&mut rng);
    Ok(BatchIter {
        plan,
        batch_size,
        max_len: (max_len_s * DEFAULT_SAMPLE_RATE as f64).round() as usize,
        cursor: 0,
        rng,
        random_window: split == Split::Train,
    })
}

impl Iterator for BatchIter {
    type Item = Result<Batch, AudioError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.plan.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.plan.len());
        let mut waveforms = Vec::new();
        let mut lengths = Vec::new();
        let mut labels = Vec::new();
        let mut paths = Vec::new();
        for (resolved, mpath, cid) in &self.plan[self.cursor..end] {
            let clip = match read_wav(resolved) {
                Ok(c) => c,
                Err(e) => return Some(Err(e)),
            };
            let mut samples = clip.samples;
            if samples.len() > self.max_len {
                let start = if self.random_window {
                    self.rng.gen_range(0..=samples.len() - self.max_len)
                } else {
                    0
                };
                samples = samples[start..start + self.max_len].to_vec();
            }
            lengths.push(samples.len());
            waveforms.push(samples);
            labels.push(*cid);
            paths.push(mpath.clone());
        }
        self.cursor = end;
        let max = *lengths.iter().max().unwrap();
        for w in waveforms.iter_mut() {
            w.resize(max, 0.0);
        }
        Some(Ok(Batch {
            waveforms,
            lengths,
            labels,
            paths,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn entry(path: &str, speaker: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            path: path.into(),
            speaker: speaker.into(),
            split,
            duration_s: 1.0,
        }
    }

    #[test]
    fn raw_zero_maps_to_zero_and_min_to_minus_one() {
        let clip = AudioClip::new(vec![0.0, -1.0], 16_000);
        let bytes = encode_wav(&clip);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.samples[0], 0.0);
        assert_eq!(back.samples[1], -1.0); // raw -32768 decodes to -1.0
    }

    #[test]
    fn write_endpoints() {
        let clip = AudioClip::new(vec![1.0, 0.0], 16_000);
        let bytes = encode_wav(&clip);
        let data = &bytes[44..];
        assert_eq!(i16::from_le_bytes([data[0], data[1]]), 32767);
        assert_eq!(i16::from_le_bytes([data[2], data[3]]), 0);
    }

    #[test]
    fn one_second_data_chunk_is_32000_bytes() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000);
        let bytes = encode_wav(&clip);
        let size = u32::from_le_bytes(bytes[40..44].try_into().unwrap());
        assert_eq!(size, 32_000);
    }

    #[test]
    fn round_trip_on_quantized_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..1000)
            .map(|_| {
                let q: i16 = rng.gen_range(-32768..=32767);
                q as f64 / 32768.0
            })
            .collect();
        // grid-aligned samples round-trip exactly through PCM16
        let clip = AudioClip::new(samples.clone(), 16_000);
        let back = decode_wav(&encode_wav(&clip)).unwrap();
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn bad_magic_is_not_wav() {
        assert!(matches!(
            decode_wav(b"RIFXxxxxWAVE"),
            Err(AudioError::NotWav(_))
        ));
    }

    #[test]
    fn truncated_data_chunk_detected() {
        let clip = AudioClip::new(vec![0.1; 100], 16_000);
        let mut bytes = encode_wav(&clip);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(decode_wav(&bytes), Err(AudioError::Truncated(_))));
    }

    #[test]
    fn stereo_rejected() {
        let clip = AudioClip::new(vec![0.0; 4], 16_000);
        let mut bytes = encode_wav(&clip);
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            decode_wav(&bytes),
            Err(AudioError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn label_index_is_sorted_and_contiguous() {
        let m = Manifest::from_entries(
            vec![
                entry("a.wav", "R02", Split::Train),
                entry("b.wav", "R01", Split::Train),
            ],
            PathBuf::from("."),
        )
        .unwrap();
        assert_eq!(m.class_id("R01"), Some(0));
        assert_eq!(m.class_id("R02"), Some(1));
        assert_eq!(m.labels(), vec!["R01", "R02"]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let r = Manifest::from_entries(
            vec![
                entry("a.wav", "R01", Split::Train),
                entry("a.wav", "R02", Split::Train),
            ],
            PathBuf::from("."),
        );
        assert!(matches!(r, Err(AudioError::DuplicatePath(_))));
    }

    #[test]
    fn empty_manifest_loads() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        let m = load_manifest(&p).unwrap();
        assert!(m.entries.is_empty());
        assert!(m.label_index.is_empty());
    }

    #[test]
    fn manifest_parse_error_carries_line() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"path\":\"a.wav\",\"speaker\":\"R01\",\"split\":\"train\",\"duration_s\":1.0}\nnot json\n",
        )
        .unwrap();
        match load_manifest(&p) {
            Err(AudioError::ParseError { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn balanced_manifest(per_class: usize, classes: usize) -> Manifest {
        let mut entries = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                entries.push(entry(
                    &format!("R{c:02}/{i}.wav"),
                    &format!("R{c:02}"),
                    Split::Train,
                ));
            }
        }
        Manifest::from_entries(entries, PathBuf::from(".")).unwrap()
    }

    #[test]
    fn split_100_per_class_is_80_10_10() {
        let m = balanced_manifest(100, 3);
        let s = stratified_split(&m, (0.8, 0.1, 0.1), 42).unwrap();
        for c in 0..3 {
            let label = format!("R{c:02}");
            let count = |sp: Split| {
                s.entries
                    .iter()
                    .filter(|e| e.speaker == label && e.split == sp)
                    .count()
            };
            assert_eq!(count(Split::Train), 80);
            assert_eq!(count(Split::Val), 10);
            assert_eq!(count(Split::Test), 10);
        }
    }

    #[test]
    fn split_of_ten_is_8_1_1() {
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1]), [8, 1, 1]);
    }

    #[test]
    fn split_preserves_totals_per_class() {
        let m = balanced_manifest(13, 4);
        let s = stratified_split(&m, (0.6, 0.2, 0.2), 1).unwrap();
        for c in 0..4 {
            let label = format!("R{c:02}");
            let total: usize = Split::all()
                .iter()
                .map(|&sp| {
                    s.entries
                        .iter()
                        .filter(|e| e.speaker == label && e.split == sp)
                        .count()
                })
                .sum();
            assert_eq!(total, 13);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let m = balanced_manifest(20, 2);
        let a = stratified_split(&m, (0.8, 0.1, 0.1), 5).unwrap();
        let b = stratified_split(&m, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn class_too_small_rejected() {
        let m = balanced_manifest(2, 1);
        assert!(matches!(
            stratified_split(&m, (0.8, 0.1, 0.1), 0),
            Err(AudioError::ClassTooSmall { .. })
        ));
    }

    fn corpus_on_disk(clips: usize) -> (TempDir, Manifest) {
        let dir = TempDir::new().unwrap();
        let mut entries = Vec::new();
        for i in 0..clips {
            let rel = format!("{i}.wav");
            let clip = AudioClip::new(vec![0.25; 1600 + 10 * i], 16_000);
            write_wav(&clip, &dir.path().join(&rel)).unwrap();
            entries.push(ManifestEntry {
                path: rel,
                speaker: format!("R{:02}", i % 5),
                split: Split::Train,
                duration_s: clip.duration_s(),
            });
        }
        let m = Manifest::from_entries(entries, dir.path().to_path_buf()).unwrap();
        (dir, m)
    }

    #[test]
    fn batches_cover_split_exactly_once() {
        let (_dir, m) = corpus_on_disk(25);
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        for b in batch_iter(&m, Split::Train, 10, 1.0, 3).unwrap() {
            let b = b.unwrap();
            sizes.push(b.len());
            seen.extend(b.paths);
        }
        assert_eq!(sizes, vec![10, 10, 5]);
        seen.sort();
        let mut want: Vec<String> = (0..25).map(|i| format!("{i}.wav")).collect();
        want.sort();
        assert_eq!(seen, want);
    }

    #[test]
    fn batch_truncation_and_padding() {
        let (_dir, m) = corpus_on_disk(4);
        for b in batch_iter(&m, Split::Train, 4, 0.05, 9).unwrap() {
            let b = b.unwrap();
            for (w, &l) in b.waveforms.iter().zip(&b.lengths) {
                assert!(l <= 800);
                assert_eq!(w.len(), *b.lengths.iter().max().unwrap());
            }
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let (_dir, m) = corpus_on_disk(12);
        let collect = |seed| -> Vec<Vec<String>> {
            batch_iter(&m, Split::Train, 5, 1.0, seed)
                .unwrap()
                .map(|b| b.unwrap().paths)
                .collect()
        };
        assert_eq!(collect(11), collect(11));
        assert_ne!(collect(11), collect(12));
    }

    #[test]
    fn empty_split_errors() {
        let (_dir, m) = corpus_on_disk(4);
        assert!(matches!(
            batch_iter(&m, Split::Test, 2, 1.0, 0),
            Err(AudioError::EmptySplit(Split::Test))
        ));
    }
}
