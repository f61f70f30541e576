//! On-disk corpus formats.
//!
//! - text corpus: `language_code<TAB>text` per line, UTF-8, LF.
//! - registry: `code<TAB>id<TAB>role,role,...` per line.
//! - feature container: `TTSF` magic, u32 version, u32 T, u32 D, u32 dtype
//!   (1 = little-endian f32), then T*D row-major f32 frames.
//! - oracle container: `TTSO` magic, u32 version, u32 inventory, u32 D,
//!   f64 noise_sigma, inventory u32 durations, inventory*D f64 templates.
//! - paired corpus: `index.tsv` with
//!   `idx<TAB>code<TAB>speaker_id<TAB>phonemes<TAB>text` plus one feature
//!   container per utterance under `feat/`.
//! - speakers: `code<TAB>speaker_id<TAB>v0 v1 ...` per line.

use super::oracle::AcousticOracle;
use super::{LanguageRegistry, PairedUtterance, RoleSets, SpeakerTable, Utterance};
use crate::error::{Error, Result};
use crate::Real;
use ndarray::Array2;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 4] = b"TTSF";
pub const ORACLE_MAGIC: &[u8; 4] = b"TTSO";
const DTYPE_F32LE: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

pub fn save_text_corpus(path: &Path, corpus: &[Utterance], registry: &LanguageRegistry) -> Result<()> {
    let mut out = String::new();
    for utt in corpus {
        let code = registry.code(utt.language_id).ok_or_else(|| {
            Error::Registry(format!("unregistered language id {}", utt.language_id))
        })?;
        if utt.text.contains('\t') || utt.text.contains('\n') {
            return Err(Error::Corpus("utterance text contains TSV separators".into()));
        }
        writeln!(out, "{code}\t{}", utt.text).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn save_registry(path: &Path, registry: &LanguageRegistry) -> Result<()> {
    let mut out = String::new();
    for (code, id) in registry.codes() {
        let mut role_names = Vec::new();
        if registry.roles.text.contains(&id) {
            role_names.push("text");
        }
        if registry.roles.paired.contains(&id) {
            role_names.push("paired");
        }
        if registry.roles.seen.contains(&id) {
            role_names.push("seen");
        }
        if registry.roles.unseen.contains(&id) {
            role_names.push("unseen");
        }
        if registry.roles.synthesis.contains(&id) {
            role_names.push("syn");
        }
        writeln!(out, "{code}\t{id}\t{}", role_names.join(",")).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_registry(path: &Path) -> Result<LanguageRegistry> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut codes = Vec::new();
    let mut roles = RoleSets::default();
    for (idx, line) in content.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "expected `code<TAB>id<TAB>roles`".into(),
            });
        }
        let id: usize = parts[1].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad id `{}`", parts[1]),
        })?;
        if id != idx {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("ids must be dense; got {id}"),
            });
        }
        codes.push(parts[0].to_string());
        for role in parts[2].split(',').filter(|r| !r.is_empty()) {
            let set: &mut BTreeSet<usize> = match role {
                "text" => &mut roles.text,
                "paired" => &mut roles.paired,
                "seen" => &mut roles.seen,
                "unseen" => &mut roles.unseen,
                "syn" => &mut roles.synthesis,
                other => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("unknown role `{other}`"),
                    })
                }
            };
            set.insert(id);
        }
    }
    LanguageRegistry::new(codes, roles)
}

/// Write one feature matrix in the binary frame container.
pub fn write_feature_matrix(path: &Path, features: &Array2<Real>) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(20 + features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(features.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u32).to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32LE.to_le_bytes());
    for &v in features.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Read a feature matrix written by [`write_feature_matrix`].
pub fn read_feature_matrix(path: &Path) -> Result<Array2<Real>> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Corpus(format!(
            "{} is not a feature container",
            path.display()
        )));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = read_u32(4);
    let t = read_u32(8) as usize;
    let d = read_u32(12) as usize;
    let dtype = read_u32(16);
    if version != 1 || dtype != DTYPE_F32LE {
        return Err(Error::Corpus(format!(
            "unsupported feature container version {version} / dtype {dtype}"
        )));
    }
    if bytes.len() != 20 + t * d * 4 {
        return Err(Error::Corpus(format!(
            "feature container payload is {} bytes; expected {}",
            bytes.len() - 20,
            t * d * 4
        )));
    }
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let off = 20 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as Real);
    }
    Array2::from_shape_vec((t, d), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Persist a paired corpus as an index plus one feature container per row.
pub fn save_paired_corpus(
    dir: &Path,
    corpus: &[PairedUtterance],
    registry: &LanguageRegistry,
) -> Result<()> {
    let feat_dir = dir.join("feat");
    std::fs::create_dir_all(&feat_dir).map_err(|e| io_err(&feat_dir, e))?;
    let mut index = String::new();
    for (i, utt) in corpus.iter().enumerate() {
        let code = registry.code(utt.language_id).ok_or_else(|| {
            Error::Registry(format!("unregistered language id {}", utt.language_id))
        })?;
        let phonemes = utt
            .phonemes
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(index, "{i}\t{code}\t{}\t{phonemes}\t{}", utt.speaker_id, utt.text)
            .expect("string write");
        write_feature_matrix(&feat_dir.join(format!("{i:05}.bin")), &utt.features)?;
    }
    let index_path = dir.join("index.tsv");
    std::fs::write(&index_path, index).map_err(|e| io_err(&index_path, e))
}

/// Load a paired corpus written by [`save_paired_corpus`].
pub fn load_paired_corpus(dir: &Path, registry: &LanguageRegistry) -> Result<Vec<PairedUtterance>> {
    let index_path = dir.join("index.tsv");
    let content = std::fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut corpus = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let parts: Vec<&str> = line.splitn(5, '\t').collect();
        if parts.len() != 5 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "expected 5 tab-separated fields".into(),
            });
        }
        let i: usize = parts[0].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad index `{}`", parts[0]),
        })?;
        let language_id = registry.id(parts[1]).ok_or_else(|| Error::UnknownLanguage {
            code: parts[1].to_string(),
            line: idx + 1,
        })?;
        let speaker_id: usize = parts[2].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad speaker id `{}`", parts[2]),
        })?;
        let phonemes: Vec<usize> = parts[3]
            .split_whitespace()
            .map(|p| {
                p.parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("bad phoneme id `{p}`"),
                })
            })
            .collect::<Result<_>>()?;
        let features = read_feature_matrix(&dir.join("feat").join(format!("{i:05}.bin")))?;
        corpus.push(PairedUtterance {
            language_id,
            text: parts[4].to_string(),
            phonemes,
            speaker_id,
            features,
        });
    }
    Ok(corpus)
}

pub fn save_oracle(path: &Path, oracle: &AcousticOracle<Real>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ORACLE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(oracle.inventory_size() as u32).to_le_bytes());
    buf.extend_from_slice(&(oracle.feature_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&oracle.noise_sigma().to_le_bytes());
    for &d in oracle.durations() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in oracle.templates().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn load_oracle(path: &Path) -> Result<AcousticOracle<Real>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 24 || &bytes[0..4] != ORACLE_MAGIC {
        return Err(Error::Corpus(format!(
            "{} is not an oracle container",
            path.display()
        )));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if read_u32(4) != 1 {
        return Err(Error::Corpus("unsupported oracle container version".into()));
    }
    let inventory = read_u32(8) as usize;
    let d = read_u32(12) as usize;
    let noise_sigma = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = 24 + inventory * 4 + inventory * d * 8;
    if bytes.len() != expected {
        return Err(Error::Corpus(format!(
            "oracle container is {} bytes; expected {expected}",
            bytes.len()
        )));
    }
    let mut durations = Vec::with_capacity(inventory);
    for i in 0..inventory {
        durations.push(read_u32(24 + i * 4) as usize);
    }
    let base = 24 + inventory * 4;
    let mut data = Vec::with_capacity(inventory * d);
    for i in 0..inventory * d {
        let off = base + i * 8;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let templates = Array2::from_shape_vec((inventory, d), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    AcousticOracle::new(templates, durations, noise_sigma)
}

/// Persist per-language phoneme-to-grapheme rules
/// (`code<TAB>phoneme<TAB>grapheme` lines).
pub fn save_orthographies(
    path: &Path,
    orthographies: &[std::collections::BTreeMap<usize, String>],
    registry: &LanguageRegistry,
) -> Result<()> {
    let mut out = String::new();
    for (lang, table) in orthographies.iter().enumerate() {
        let code = registry
            .code(lang)
            .ok_or_else(|| Error::Registry(format!("unregistered language id {lang}")))?;
        for (phoneme, grapheme) in table {
            writeln!(out, "{code}\t{phoneme}\t{grapheme}").expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Load rule tables written by [`save_orthographies`].
pub fn load_orthographies(
    path: &Path,
    registry: &LanguageRegistry,
) -> Result<Vec<std::collections::BTreeMap<usize, String>>> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut tables = vec![std::collections::BTreeMap::new(); registry.len()];
    for (idx, line) in content.lines().enumerate() {
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "expected `code<TAB>phoneme<TAB>grapheme`".into(),
            });
        }
        let lang = registry.id(parts[0]).ok_or_else(|| Error::UnknownLanguage {
            code: parts[0].to_string(),
            line: idx + 1,
        })?;
        let phoneme: usize = parts[1].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad phoneme id `{}`", parts[1]),
        })?;
        tables[lang].insert(phoneme, parts[2].to_string());
    }
    Ok(tables)
}

pub fn save_speakers(path: &Path, speakers: &SpeakerTable, registry: &LanguageRegistry) -> Result<()> {
    let mut out = String::new();
    for (lang, spk, vector) in speakers.iter() {
        let code = registry
            .code(lang)
            .ok_or_else(|| Error::Registry(format!("unregistered language id {lang}")))?;
        let values = vector
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "{code}\t{spk}\t{values}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_speakers(path: &Path, registry: &LanguageRegistry) -> Result<SpeakerTable> {
    let content = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut table = SpeakerTable::default();
    for (idx, line) in content.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "expected `code<TAB>speaker<TAB>values`".into(),
            });
        }
        let lang = registry.id(parts[0]).ok_or_else(|| Error::UnknownLanguage {
            code: parts[0].to_string(),
            line: idx + 1,
        })?;
        let spk: usize = parts[1].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad speaker id `{}`", parts[1]),
        })?;
        let vector: Vec<Real> = parts[2]
            .split_whitespace()
            .map(|v| {
                v.parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("bad float `{v}`"),
                })
            })
            .collect::<Result<_>>()?;
        table.insert(lang, spk, vector);
    }
    Ok(table)
}
