//! Dataset indexing: manifest CSV parsing, audio loading, and the "LMSP"
//! on-disk spectrogram cache keyed by a content hash of the DSP settings.

use crate::audio::{resample_linear, AudioClip, CANONICAL_SR};
use crate::dsp::{LogMelSpec, MelConfig};
use crate::error::{Error, Result};
use crate::wav::read_wav;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub enum ClipSource {
    File(PathBuf),
    Memory(AudioClip),
}

#[derive(Debug, Clone)]
pub struct DatasetClip {
    pub source: ClipSource,
    /// Class indices this clip carries (>= 1 entry).
    pub labels: Vec<usize>,
    pub fold: Option<i64>,
    pub group: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub clips: Vec<DatasetClip>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Multi-hot target vector for one clip.
    pub fn target_vec(&self, clip: usize) -> Vec<f32> {
        let mut t = vec![0.0f32; self.classes.len()];
        for &l in &self.clips[clip].labels {
            t[l] = 1.0;
        }
        t
    }

    /// Decode (or copy) the audio of one clip at the canonical sample rate,
    /// with its multi-hot labels attached.
    pub fn load_audio(&self, clip: usize) -> Result<AudioClip> {
        let c = &self.clips[clip];
        let audio = match &c.source {
            ClipSource::File(path) => {
                let a = read_wav(path)?;
                if a.sample_rate == CANONICAL_SR {
                    a
                } else {
                    resample_linear(&a, CANONICAL_SR)?
                }
            }
            ClipSource::Memory(a) => a.clone(),
        };
        audio.with_labels(self.target_vec(clip))
    }

    pub fn fold_labels(&self) -> Result<Vec<i64>> {
        self.clips
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.fold.ok_or_else(|| {
                    Error::Manifest(format!("clip {i} has no fold id, required by the fold plan"))
                })
            })
            .collect()
    }

    pub fn group_keys(&self) -> Result<Vec<String>> {
        self.clips
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.group
                    .clone()
                    .ok_or_else(|| Error::Manifest(format!("clip {i} has no group key")))
            })
            .collect()
    }
}

/// Parse manifest text: header `path,labels,fold,group`, one clip per row,
/// labels separated by '|'. Relative paths resolve against `base_dir`.
/// `check_files` additionally requires every path to exist.
pub fn parse_manifest(
    text: &str,
    class_list: &[String],
    base_dir: &Path,
    check_files: bool,
) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l.trim(),
            None => return Err(Error::Manifest("empty manifest".into())),
        }
    };
    if header != "path,labels,fold,group" {
        return Err(Error::Manifest(format!(
            "bad header '{header}', expected 'path,labels,fold,group'"
        )));
    }
    let class_index = |name: &str| class_list.iter().position(|c| c == name);
    let mut clips = Vec::new();
    let mut seen_paths: HashSet<PathBuf> = HashSet::new();
    for (lineno, line) in lines {
        let row = lineno + 1; // 1-based, matches editors
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest(format!(
                "row {row}: expected 4 comma-separated fields, got {}",
                fields.len()
            )));
        }
        let (path_s, labels_s, fold_s, group_s) =
            (fields[0].trim(), fields[1].trim(), fields[2].trim(), fields[3].trim());
        if path_s.is_empty() {
            return Err(Error::Manifest(format!("row {row}: empty path")));
        }
        let path = base_dir.join(path_s);
        if !seen_paths.insert(path.clone()) {
            return Err(Error::Manifest(format!("row {row}: duplicate path '{path_s}'")));
        }
        if check_files && !path.is_file() {
            return Err(Error::Manifest(format!(
                "row {row}: file not found: {}",
                path.display()
            )));
        }
        if labels_s.is_empty() {
            return Err(Error::Manifest(format!("row {row}: no labels")));
        }
        let mut labels = Vec::new();
        for name in labels_s.split('|') {
            let name = name.trim();
            let idx = class_index(name).ok_or_else(|| {
                Error::Manifest(format!("row {row}: unknown label '{name}'"))
            })?;
            if !labels.contains(&idx) {
                labels.push(idx);
            }
        }
        let fold = if fold_s.is_empty() {
            None
        } else {
            Some(fold_s.parse::<i64>().map_err(|_| {
                Error::Manifest(format!("row {row}: fold '{fold_s}' is not an integer"))
            })?)
        };
        let group = if group_s.is_empty() { None } else { Some(group_s.to_string()) };
        clips.push(DatasetClip { source: ClipSource::File(path), labels, fold, group });
    }
    Ok(Dataset { classes: class_list.to_vec(), clips })
}

/// Load a manifest file against an explicit class list.
pub fn load_manifest(path: &Path, class_list: &[String]) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, class_list, base, true)
}

/// The sorted set of label names appearing in a manifest (for runs without
/// an explicit class list).
pub fn scan_classes(text: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest(format!("row {}: expected 4 fields", i + 1)));
        }
        for name in fields[1].trim().split('|') {
            let name = name.trim().to_string();
            if !name.is_empty() && !names.contains(&name) {
                names.push(name);
            }
        }
    }
    names.sort();
    Ok(names)
}

// ---- LMSP spectrogram cache ----

const LMSP_MAGIC: &[u8; 4] = b"LMSP";
const LMSP_VERSION: u32 = 1;
const LMSP_MAX_DIM: u32 = 1 << 24;

pub fn lmsp_to_bytes(spec: &LogMelSpec, mel_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + spec.values.len() * 4);
    out.extend_from_slice(LMSP_MAGIC);
    out.extend_from_slice(&LMSP_VERSION.to_le_bytes());
    out.extend_from_slice(mel_hash);
    out.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(spec.t_s as u32).to_le_bytes());
    out.extend_from_slice(&(spec.t_seconds as u32).to_le_bytes());
    for &v in &spec.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn lmsp_from_bytes(bytes: &[u8]) -> Result<([u8; 32], LogMelSpec)> {
    let fail = |m: &str| Error::Cache(m.to_string());
    if bytes.len() < 56 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != LMSP_MAGIC {
        return Err(fail("bad magic (not an LMSP cache file)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("sized"));
    if version != LMSP_VERSION {
        return Err(Error::Cache(format!("unsupported cache version {version}")));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&bytes[8..40]);
    let n_mels = u32::from_le_bytes(bytes[40..44].try_into().expect("sized"));
    let t_s = u32::from_le_bytes(bytes[44..48].try_into().expect("sized"));
    let t_seconds = u32::from_le_bytes(bytes[48..52].try_into().expect("sized"));
    if n_mels == 0 || t_s == 0 || n_mels > LMSP_MAX_DIM || t_s > LMSP_MAX_DIM {
        return Err(Error::Cache(format!("implausible dims {n_mels}x{t_s}")));
    }
    let numel = (n_mels as usize)
        .checked_mul(t_s as usize)
        .ok_or_else(|| fail("dimension overflow"))?;
    let need = numel.checked_mul(4).ok_or_else(|| fail("size overflow"))?;
    let data = &bytes[52..];
    if data.len() != need {
        return Err(Error::Cache(format!("expected {need} data bytes, found {}", data.len())));
    }
    let values: Vec<f32> =
        data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunked"))).collect();
    Ok((
        hash,
        LogMelSpec { n_mels: n_mels as usize, t_s: t_s as usize, t_seconds: t_seconds as usize, values },
    ))
}

/// Cache path for a clip: `<dir>/<stem>-<8 hex of path hash>.lmsp`.
pub fn cache_path_for(cache_dir: &Path, clip_path: &Path) -> PathBuf {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(clip_path.to_string_lossy().as_bytes());
    let digest = h.finalize();
    let stem = clip_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    cache_dir.join(format!("{stem}-{tag}.lmsp"))
}

/// Read a cached spectrogram if present and produced under the same mel
/// settings; Ok(None) means "compute it".
pub fn read_cached(path: &Path, mel: &MelConfig) -> Result<Option<LogMelSpec>> {
    if !path.is_file() {
        return Ok(None);
    }
    let bytes = std::fs::read(path)?;
    match lmsp_from_bytes(&bytes) {
        Ok((hash, spec)) if hash == mel.content_hash() => Ok(Some(spec)),
        Ok(_) => Ok(None),  // stale: different DSP settings
        Err(_) => Ok(None), // unreadable: recompute and overwrite
    }
}

pub fn write_cached(path: &Path, spec: &LogMelSpec, mel: &MelConfig) -> Result<()> {
    std::fs::write(path, lmsp_to_bytes(spec, &mel.content_hash()))?;
    Ok(())
}
