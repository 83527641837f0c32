//! File formats: JSONL splits and translation records, checkpoints and
//! vocabulary files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use comve_core::checkpoint::Checkpoint;
use comve_core::data::{ComveInstance, DatasetSplit, SplitName, TranslationRecord};
use comve_core::tokenizer::Vocab;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| comve_core::Error::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Guesses the split name from a file stem such as `dev.jsonl`; anything
/// unrecognized is treated as training data.
pub fn split_name_of(path: &Path) -> SplitName {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    if stem.starts_with("dev") || stem.starts_with("valid") {
        SplitName::Dev
    } else if stem.starts_with("test") {
        SplitName::Test
    } else {
        SplitName::Train
    }
}

pub fn load_split(path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let instances: Vec<ComveInstance> = read_jsonl(path)?;
    Ok(DatasetSplit::new(name, instances).with_context(|| format!("validating {}", path.display()))?)
}

pub fn save_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    write_jsonl(path, split.instances())
}

pub fn read_translations(path: &Path) -> Result<Vec<TranslationRecord>> {
    read_jsonl(path)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?)
}

/// `vocab.txt` and `merges.txt` inside `dir`.
pub fn vocab_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("vocab.txt"), dir.join("merges.txt"))
}

pub fn save_vocab(dir: &Path, vocab: &Vocab) -> Result<()> {
    let (v, m) = vocab_paths(dir);
    fs::write(&v, vocab.to_vocab_text()).with_context(|| format!("writing {}", v.display()))?;
    fs::write(&m, vocab.to_merges_text()).with_context(|| format!("writing {}", m.display()))?;
    Ok(())
}

/// Reads `vocab.txt` from `path` (a file, or a directory holding both
/// files) and `merges.txt` next to it.
pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let (v, m) = if path.is_dir() {
        vocab_paths(path)
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join("merges.txt"))
    };
    let vt = fs::read_to_string(&v).with_context(|| format!("reading {}", v.display()))?;
    let mt = fs::read_to_string(&m).with_context(|| format!("reading {}", m.display()))?;
    Ok(Vocab::from_texts(&vt, &mt)?)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text) {
        Ok(v) => Ok(v),
        Err(e) => bail!(comve_core::Error::Config(format!("{}: {e}", path.display()))),
    }
}
