//! Paired dataset on disk: `<root>/rainy/<id>.png` next to `<root>/clean/<id>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{load_image, ImagePair};
use crate::error::{Error, Result};

/// PNG files directly inside `dir`, keyed and sorted by file stem.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Dataset {
        root: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Matches two directories by id; any id present on only one side is an error.
pub fn pair_dirs(a: &Path, b: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let left = list_pngs(a)?;
    let right = list_pngs(b)?;
    let unpaired: Vec<String> = left
        .keys()
        .filter(|k| !right.contains_key(*k))
        .chain(right.keys().filter(|k| !left.contains_key(*k)))
        .cloned()
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Unpaired { ids: unpaired });
    }
    Ok(left
        .into_iter()
        .map(|(id, p)| {
            let q = right[&id].clone();
            (id, p, q)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    entries: Vec<(String, PathBuf, PathBuf)>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = pair_dirs(&root.join("rainy"), &root.join("clean"))?;
        if entries.is_empty() {
            return Err(Error::Dataset {
                root: root.to_path_buf(),
                reason: "no image pairs found".into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _, _)| id.as_str())
    }

    /// Loads pair `index` without any preprocessing.
    pub fn load(&self, index: usize) -> Result<ImagePair> {
        let (id, rainy, clean) = &self.entries[index];
        let pair = ImagePair::new(load_image(rainy)?, load_image(clean)?, id.clone());
        if pair.rainy.shape() != pair.clean.shape() {
            return Err(Error::Dataset {
                root: self.root.clone(),
                reason: format!(
                    "{id}: rainy {:?} and clean {:?} differ in size",
                    pair.rainy.shape(),
                    pair.clean.shape()
                ),
            });
        }
        Ok(pair)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub streak_count: usize,
    pub angle: f64,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "id\tseed\tstreak_count\tangle")?;
    for r in rows {
        writeln!(
            f,
            "{}\t{}\t{}\t{:.3}",
            r.id, r.seed, r.streak_count, r.angle
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_image;
    use crate::tensor::Tensor;

    #[test]
    fn pairs_by_stem_and_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("rainy")).unwrap();
        fs::create_dir_all(root.join("clean")).unwrap();
        let img = Tensor::full(&[3, 4, 4], 0.5);
        for id in ["b", "a"] {
            save_image(&img, &root.join("rainy").join(format!("{id}.png"))).unwrap();
            save_image(&img, &root.join("clean").join(format!("{id}.png"))).unwrap();
        }
        let ds = Dataset::open(root).unwrap();
        assert_eq!(ds.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(ds.load(1).unwrap().id, "b");

        save_image(&img, &root.join("rainy").join("c.png")).unwrap();
        save_image(&img, &root.join("clean").join("d.png")).unwrap();
        let err = Dataset::open(root).unwrap_err().to_string();
        assert_eq!(err, "unpaired files: c, d");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rainy")).unwrap();
        fs::create_dir_all(dir.path().join("clean")).unwrap();
        assert!(Dataset::open(dir.path()).is_err());
        assert!(Dataset::open(&dir.path().join("missing")).is_err());
    }
}
