use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::Failure;

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm", "pgm", "pnm"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// A single image file, or every image directly inside a directory, sorted
/// by name.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::data(format!("no images in {}", path.display())));
    }
    Ok(out)
}

/// File stem with a trailing `_x<s>` removed.
pub fn stem(path: &Path, s: usize) -> String {
    let raw = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match raw.strip_suffix(&format!("_x{s}")) {
        Some(base) if !base.is_empty() => base.to_string(),
        _ => raw,
    }
}

/// Images under `path` keyed by their scale-stripped stem.
pub fn by_stem(path: &Path, s: usize) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let mut out = BTreeMap::new();
    for p in list_images(path)? {
        let key = stem(&p, s);
        if let Some(prev) = out.insert(key.clone(), p.clone()) {
            return Err(Failure::data(format!(
                "{} and {} share the stem `{key}`",
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs two stem maps; unmatched stems are reported on stderr.
pub fn pair_up(
    left: &BTreeMap<String, PathBuf>,
    right: &BTreeMap<String, PathBuf>,
    what: (&str, &str),
) -> Vec<(String, PathBuf, PathBuf)> {
    for k in left.keys().filter(|k| !right.contains_key(*k)) {
        eprintln!("warning: {} `{k}` has no matching {} image; skipped", what.0, what.1);
    }
    for k in right.keys().filter(|k| !left.contains_key(*k)) {
        eprintln!("warning: {} `{k}` has no matching {} image; skipped", what.1, what.0);
    }
    left.iter()
        .filter_map(|(k, a)| right.get(k).map(|b| (k.clone(), a.clone(), b.clone())))
        .collect()
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::data(format!("cannot create {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::usage(format!("missing {what}")))
}
