//! On-disk dataset: one binary signal file and one CSV event table per run,
//! plus a JSON manifest carrying the generator settings and SHA-256 hashes.
//!
//! Signal file layout (little endian): magic `EEGR`, `u16` version,
//! `u32` channels, `u64` samples, `f32` sampling rate, then channel-major
//! `f32` samples.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_run, GeneratorConfig};
use crate::data::{RawRun, StimulusEvent};
use crate::dsp::RunId;
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"EEGR";
pub const RAW_VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 + 8 + 4;
const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;
const EVENTS_HEADER: &str = "onset_sample,item_index,is_target,block_index";

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn encode_raw_run(run: &RawRun) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + run.channels() * run.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(run.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(run.len() as u64).to_le_bytes());
    out.extend_from_slice(&(run.fs as f32).to_le_bytes());
    for ch in &run.samples {
        for &v in ch {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Signal part of a run (events come from the CSV table).
pub fn decode_raw_run(bytes: &[u8], path: &Path) -> Result<(f64, Vec<Vec<f64>>)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected \"EEGR\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RAW_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let channels = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let samples = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let fs = f32::from_le_bytes(bytes[18..22].try_into().expect("4 bytes")) as f64;
    let expected = channels
        .checked_mul(samples)
        .and_then(|n| n.checked_mul(4))
        .map(|n| n + HEADER);
    if expected != Some(bytes.len()) {
        return Err(bad(format!(
            "truncated or oversized: {} bytes for {channels} channels × {samples} samples",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let out = if samples == 0 {
        vec![Vec::new(); channels]
    } else {
        data.chunks(samples).map(<[f64]>::to_vec).collect()
    };
    Ok((fs, out))
}

pub fn encode_events(events: &[StimulusEvent]) -> String {
    let mut s = String::from(EVENTS_HEADER);
    s.push('\n');
    for e in events {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.onset_sample,
            e.item_index,
            u8::from(e.is_target),
            e.block_index
        ));
    }
    s
}

pub fn decode_events(text: &str, path: &Path) -> Result<Vec<StimulusEvent>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(EVENTS_HEADER) {
        return Err(Error::format(
            path,
            format!("missing header `{EVENTS_HEADER}`"),
        ));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::format(path, format!("line {}: malformed event `{line}`", i + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let is_target = match f[2] {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad()),
            };
            Ok(StimulusEvent {
                onset_sample: f[0].parse().map_err(|_| bad())?,
                item_index: f[1]
                    .parse()
                    .ok()
                    .filter(|&i: &u8| (i as usize) < crate::data::ITEMS)
                    .ok_or_else(bad)?,
                is_target,
                block_index: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_raw_run(path: &Path, run: &RawRun) -> Result<()> {
    write(path, &encode_raw_run(run))
}

pub fn read_raw_run(path: &Path, events: Vec<StimulusEvent>) -> Result<RawRun> {
    let (fs, samples) = decode_raw_run(&read(path)?, path)?;
    RawRun::new(fs, samples, events).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_events(path: &Path, events: &[StimulusEvent]) -> Result<()> {
    write(path, encode_events(events).as_bytes())
}

pub fn read_events(path: &Path) -> Result<Vec<StimulusEvent>> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    decode_events(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub subject: u32,
    pub session: u32,
    pub run: u32,
    /// Paths relative to the dataset directory.
    pub signal: String,
    pub events: String,
    pub signal_sha256: String,
    pub events_sha256: String,
    pub blocks: u32,
    pub target_item: u8,
}

impl RunEntry {
    pub fn id(&self) -> RunId {
        RunId {
            subject: self.subject,
            session: self.session,
            run: self.run,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: Option<GeneratorConfig>,
    /// SHA-256 of the generator settings as JSON.
    pub config_hash: String,
    pub seed: u64,
    pub runs: Vec<RunEntry>,
    /// SHA-256 over every file hash, in run order.
    pub dataset_hash: String,
}

impl DatasetManifest {
    fn new(generator: Option<GeneratorConfig>, mut runs: Vec<RunEntry>) -> Self {
        runs.sort_by_key(RunEntry::id);
        let config_hash = sha256_hex(
            serde_json::to_string(&generator)
                .expect("config serializes")
                .as_bytes(),
        );
        let joined: String = runs
            .iter()
            .map(|r| format!("{}{}", r.signal_sha256, r.events_sha256))
            .collect();
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            seed: generator.as_ref().map_or(0, |g| g.seed),
            generator,
            config_hash,
            dataset_hash: sha256_hex(joined.as_bytes()),
            runs,
        }
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.runs.iter().map(|r| r.subject).collect();
        s.dedup();
        s.sort();
        s.dedup();
        s
    }
}

fn run_paths(id: RunId) -> (String, String) {
    let stem = format!(
        "s{:02}/session{}/run{}",
        id.subject + 1,
        id.session + 1,
        id.run + 1
    );
    (format!("{stem}.eegr"), format!("{stem}.events.csv"))
}

fn store_run(dir: &Path, id: RunId, run: &RawRun) -> Result<RunEntry> {
    let (signal, events) = run_paths(id);
    let sig_bytes = encode_raw_run(run);
    let ev_text = encode_events(&run.events);
    write(&dir.join(&signal), &sig_bytes)?;
    write(&dir.join(&events), ev_text.as_bytes())?;
    Ok(RunEntry {
        subject: id.subject,
        session: id.session,
        run: id.run,
        signal,
        events,
        signal_sha256: sha256_hex(&sig_bytes),
        events_sha256: sha256_hex(ev_text.as_bytes()),
        blocks: run.blocks() as u32,
        target_item: run.target_item().unwrap_or(0),
    })
}

fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)
        .map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    text.push('\n');
    write(&dir.join(MANIFEST), text.as_bytes())
}

/// Write `runs` under `dir` with a manifest.
pub fn save_dataset(
    dir: &Path,
    generator: Option<GeneratorConfig>,
    runs: impl IntoIterator<Item = (RunId, RawRun)>,
) -> Result<DatasetManifest> {
    let entries = runs
        .into_iter()
        .map(|(id, run)| store_run(dir, id, &run))
        .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest::new(generator, entries);
    write_manifest(dir, &m)?;
    Ok(m)
}

/// Generate every run of `cfg` straight to disk (runs are independent, so
/// `parallel` only changes speed, never content).
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    dir: &Path,
    parallel: bool,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let ids: Vec<RunId> = (0..cfg.subjects)
        .flat_map(|subject| {
            (0..cfg.sessions).flat_map(move |session| {
                (0..cfg.runs_per_session).map(move |run| RunId {
                    subject,
                    session,
                    run,
                })
            })
        })
        .collect();
    let make = |id: &RunId| -> Result<RunEntry> {
        let run = generate_run(cfg, id.subject, id.session, id.run)?;
        store_run(dir, *id, &run)
    };
    let entries: Vec<RunEntry> = if parallel {
        ids.par_iter().map(make).collect::<Result<_>>()?
    } else {
        ids.iter().map(make).collect::<Result<_>>()?
    };
    let m = DatasetManifest::new(Some(cfg.clone()), entries);
    write_manifest(dir, &m)?;
    Ok(m)
}

/// A dataset directory whose manifest has been read and checked.
#[derive(Clone, Debug)]
pub struct SessionDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl SessionDataset {
    /// Read one run, verifying both file hashes against the manifest.
    pub fn load_run(&self, entry: &RunEntry) -> Result<RawRun> {
        let sig_path = self.dir.join(&entry.signal);
        let ev_path = self.dir.join(&entry.events);
        let sig = read(&sig_path)?;
        if sha256_hex(&sig) != entry.signal_sha256 {
            return Err(Error::format(
                &sig_path,
                "content hash does not match the manifest",
            ));
        }
        let ev = read(&ev_path)?;
        if sha256_hex(&ev) != entry.events_sha256 {
            return Err(Error::format(
                &ev_path,
                "content hash does not match the manifest",
            ));
        }
        let text = String::from_utf8(ev).map_err(|_| Error::format(&ev_path, "not UTF-8"))?;
        let events = decode_events(&text, &ev_path)?;
        let (fs, samples) = decode_raw_run(&sig, &sig_path)?;
        RawRun::new(fs, samples, events).map_err(|e| Error::format(&sig_path, e.to_string()))
    }

    pub fn runs(&self) -> &[RunEntry] {
        &self.manifest.runs
    }

    /// Re-hash every file.
    pub fn verify(&self) -> Result<()> {
        for e in &self.manifest.runs {
            self.load_run(e)?;
        }
        Ok(())
    }
}

/// Open a dataset: parse and check the manifest and that every listed file
/// exists with a plausible size. File hashes are checked as runs are read.
pub fn load_dataset(dir: &Path) -> Result<SessionDataset> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read(&path)?).map_err(|_| Error::format(&path, "not UTF-8"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    let joined: String = manifest
        .runs
        .iter()
        .map(|r| format!("{}{}", r.signal_sha256, r.events_sha256))
        .collect();
    if sha256_hex(joined.as_bytes()) != manifest.dataset_hash {
        return Err(Error::format(
            &path,
            "dataset hash does not match the listed file hashes",
        ));
    }
    for e in &manifest.runs {
        let sig = dir.join(&e.signal);
        let len = fs::metadata(&sig)
            .map_err(|err| Error::io(&sig, err))?
            .len() as usize;
        if len < HEADER {
            return Err(Error::format(
                &sig,
                format!("truncated header ({len} bytes)"),
            ));
        }
        let ev = dir.join(&e.events);
        fs::metadata(&ev).map_err(|err| Error::io(&ev, err))?;
    }
    Ok(SessionDataset {
        dir: dir.to_path_buf(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SnrPreset;

    fn tiny(seed: u64) -> GeneratorConfig {
        let mut c = GeneratorConfig::preset(SnrPreset::High, seed);
        c.subjects = 1;
        c.sessions = 2;
        c.runs_per_session = 1;
        c.blocks_min = 2;
        c.blocks_max = 3;
        c
    }

    fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(dir).unwrap().to_path_buf(),
                        fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny(1), a.path(), false).unwrap();
        let ds = load_dataset(a.path()).unwrap();
        let runs: Vec<_> = ds
            .runs()
            .iter()
            .map(|e| (e.id(), ds.load_run(e).unwrap()))
            .collect();
        assert_eq!(runs[0].1, generate_run(&tiny(1), 0, 0, 0).unwrap());
        let m2 = save_dataset(b.path(), m.generator.clone(), runs).unwrap();
        assert_eq!(m, m2);
        assert_eq!(tree(a.path()), tree(b.path()));
    }

    #[test]
    fn same_seed_same_hash() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&tiny(4), a.path(), false).unwrap();
        let mb = generate_dataset(&tiny(4), b.path(), true).unwrap();
        assert_eq!(ma.dataset_hash, mb.dataset_hash);
        let c = tempfile::tempdir().unwrap();
        assert_ne!(
            generate_dataset(&tiny(5), c.path(), false)
                .unwrap()
                .dataset_hash,
            ma.dataset_hash
        );
    }

    #[test]
    fn corruption_is_reported_with_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny(2), dir.path(), false).unwrap();
        let sig = dir.path().join(&m.runs[0].signal);
        let mut bytes = fs::read(&sig).unwrap();
        bytes[0] = b'X';
        fs::write(&sig, &bytes).unwrap();
        let err = decode_raw_run(&bytes, &sig).unwrap_err().to_string();
        assert!(err.contains("run1.eegr") && err.contains("magic"), "{err}");
        let ds = load_dataset(dir.path()).unwrap();
        let err = ds.load_run(&ds.runs()[0]).unwrap_err().to_string();
        assert!(err.contains("run1.eegr") && err.contains("hash"), "{err}");

        bytes[0] = b'E';
        let err = decode_raw_run(&bytes[..bytes.len() - 3], &sig)
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(decode_raw_run(&v2, &sig)
            .unwrap_err()
            .to_string()
            .contains("version 9"));
    }

    #[test]
    fn tampered_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny(3), dir.path(), false).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("manifest.json") && err.contains("version 7"),
            "{err}"
        );
    }

    #[test]
    fn events_round_trip_and_reject_garbage() {
        let ev = vec![
            StimulusEvent {
                onset_sample: 4800,
                item_index: 3,
                is_target: true,
                block_index: 0,
            },
            StimulusEvent {
                onset_sample: 5760,
                item_index: 1,
                is_target: false,
                block_index: 0,
            },
        ];
        let p = Path::new("x.events.csv");
        assert_eq!(decode_events(&encode_events(&ev), p).unwrap(), ev);
        assert!(decode_events(
            "onset_sample,item_index,is_target,block_index\n1,9,0,0\n",
            p
        )
        .is_err());
        assert!(decode_events("nope\n", p).is_err());
    }
}
