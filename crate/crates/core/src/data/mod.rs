//! Dataset manifests and in-memory datasets.
//!
//! A manifest is a CSV file with columns `path,label[,pa_type][,split]`
//! and an optional header row. Relative paths resolve against the
//! manifest's directory; labels are `live` or `pa`.

pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging;
use crate::model::{LIVE, PA};
use crate::parallel::{map_indexed, Parallelism};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Live,
    Pa,
}

impl Label {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Some(Label::Live),
            "pa" => Some(Label::Pa),
            _ => None,
        }
    }

    pub fn class_index(self) -> usize {
        match self {
            Label::Live => LIVE,
            Label::Pa => PA,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Live => "live",
            Label::Pa => "pa",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Path as written in the manifest.
    pub path: String,
    pub label: Label,
    pub pa_type: Option<String>,
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

fn non_empty(s: Option<&str>) -> Option<String> {
    s.map(str::trim).filter(|s| !s.is_empty()).map(str::to_string)
}

impl Manifest {
    pub fn resolve(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Records of one split; records without a split tag count as `train`.
    pub fn split(&self, name: &str) -> Vec<&Record> {
        self.records
            .iter()
            .filter(|r| r.split.as_deref().unwrap_or("train") == name)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path,label,pa_type,split")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{}",
                r.path,
                r.label,
                r.pa_type.as_deref().unwrap_or(""),
                r.split.as_deref().unwrap_or("")
            )?;
        }
        Ok(())
    }
}

/// Parses and validates a manifest. Every referenced image must exist;
/// errors carry the 1-based row number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::data(path, format!("cannot open manifest: {e}")))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::data(path, format!("row {row_no}: {e}")))?;
        if i == 0 && row.get(0) == Some("path") {
            continue;
        }
        if row.len() < 2 {
            return Err(Error::data(path, format!("row {row_no}: expected at least path,label")));
        }
        let label = Label::parse(&row[1]).ok_or_else(|| {
            Error::data(path, format!("row {row_no}: unknown label {:?}", &row[1]))
        })?;
        let record = Record {
            path: row[0].to_string(),
            label,
            pa_type: non_empty(row.get(2)),
            split: non_empty(row.get(3)),
        };
        if record.path.is_empty() {
            return Err(Error::data(path, format!("row {row_no}: empty path")));
        }
        if !seen.insert(record.path.clone()) {
            return Err(Error::data(path, format!("row {row_no}: duplicate path {}", record.path)));
        }
        let manifest = Manifest {
            root: root.clone(),
            records: Vec::new(),
        };
        if !manifest.resolve(&record).is_file() {
            return Err(Error::data(path, format!("row {row_no}: missing image {}", record.path)));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::data(path, "no records"));
    }
    Ok(Manifest { root, records })
}

/// Decoded images with class indices, ready for training or scoring.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pa = self.labels.iter().filter(|&&l| l == PA).count();
        [self.labels.len() - pa, pa]
    }

    /// Loads the images of `records`, converted to `channels` and resized
    /// to `size×size`.
    pub fn load(
        manifest: &Manifest,
        records: &[&Record],
        channels: usize,
        size: usize,
        par: Parallelism,
    ) -> Result<Self> {
        let images = map_indexed(par, records.len(), |i| {
            imaging::load_image(manifest.resolve(records[i]), channels, size)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            labels: records.iter().map(|r| r.label.class_index()).collect(),
            paths: records.iter().map(|r| r.path.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(dir: &Path, name: &str) {
        imaging::save_gray_png(dir.join(name), &Tensor::full([1, 4, 4], 0.5)).unwrap();
    }

    #[test]
    fn parses_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "b.png");
        let m = dir.path().join("m.csv");
        fs::write(&m, "path,label,pa_type,split\na.png,live,,train\nb.png,PA,lattice_overlay,test\n").unwrap();
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.records.len(), 2);
        assert_eq!(man.records[1].label, Label::Pa);
        assert_eq!(man.records[1].pa_type.as_deref(), Some("lattice_overlay"));
        assert_eq!(man.split("train").len(), 1);
        let ds = Dataset::load(&man, &man.split("test"), 1, 8, Parallelism::Sequential).unwrap();
        assert_eq!(ds.images[0].shape(), &[1, 8, 8]);
        assert_eq!(ds.labels, vec![PA]);
    }

    #[test]
    fn headerless_two_columns() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "b.png");
        let m = dir.path().join("m.csv");
        fs::write(&m, "a.png,live\nb.png,pa\n").unwrap();
        let man = load_manifest(&m).unwrap();
        assert_eq!(man.records.len(), 2);
        assert!(man.records.iter().all(|r| r.split.is_none()));
        assert_eq!(man.split("train").len(), 2);
    }

    #[test]
    fn reports_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let m = dir.path().join("m.csv");

        fs::write(&m, "").unwrap();
        assert!(load_manifest(&m).unwrap_err().to_string().contains("no records"));

        fs::write(&m, "a.png,live\na.png,spoof\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("spoof"), "{err}");

        fs::write(&m, "a.png,live\nzz.png,pa\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("missing"), "{err}");

        fs::write(&m, "a.png,live\na.png,pa\n").unwrap();
        assert!(load_manifest(&m).unwrap_err().to_string().contains("duplicate"));

        assert!(load_manifest(dir.path().join("nope.csv")).is_err());
    }

    #[test]
    fn undecodable_image_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.png"), b"not an image").unwrap();
        let m = dir.path().join("m.csv");
        fs::write(&m, "bad.png,live\n").unwrap();
        let man = load_manifest(&m).unwrap();
        let err = Dataset::load(&man, &man.split("train"), 1, 8, Parallelism::Sequential).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
