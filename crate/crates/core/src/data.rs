//! Domain types and the dataset manifest / prediction CSV formats.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::tensor::Tensor3;

/// Planar RGB image, `[3, H, W]`, values in `[0, 1]`.
pub type Image = Tensor3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("line {line}: bad value {value:?} for column `{column}`")]
    BadEnumValue {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },
    #[error("line {line}: method must be present for fakes and absent for reals")]
    InconsistentMethod { line: u64 },
    #[error("missing image file {0}")]
    MissingImageFile(PathBuf),
    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },
    #[error("image {id}: expected {expected}x{expected}x3, found {found:?}")]
    ShapeMismatch {
        id: String,
        expected: usize,
        found: (usize, usize, usize),
    },
    #[error("image {0}: pixel values outside [0, 1]")]
    PixelOutOfRange(String),
    #[error("line {line}: score {score} is not a finite value in [0, 1]")]
    BadScore { line: u64, score: f64 },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!("unknown {} {:?}", stringify!($name), other)),
                }
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_enum!(Gender { M => "M", F => "F" });
string_enum!(Race { A => "A", B => "B", W => "W", O => "O" });
string_enum!(
    /// Forgery method tag carried by fake samples.
    Method { DF => "DF", F2F => "F2F", FS => "FS", NT => "NT", FST => "FST", SYNTH => "SYNTH" }
);
string_enum!(Split { Train => "train", Val => "val", Test => "test" });

/// Binary authenticity label; `Fake` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom(format!("bad label {v}")))
    }
}

/// Gender x race intersection, written `"<gender>-<race>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DemographicKey {
    pub gender: Gender,
    pub race: Race,
}

impl DemographicKey {
    pub const fn new(gender: Gender, race: Race) -> Self {
        Self { gender, race }
    }

    /// The eight keys in a fixed order (gender-major).
    pub fn all() -> Vec<DemographicKey> {
        Gender::ALL
            .iter()
            .flat_map(|&g| Race::ALL.iter().map(move |&r| DemographicKey::new(g, r)))
            .collect()
    }

    /// Dense index in `0..8`, matching [`DemographicKey::all`].
    pub fn index(self) -> usize {
        (self.gender as usize) * Race::ALL.len() + self.race as usize
    }
}

impl fmt::Display for DemographicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.gender, self.race)
    }
}

impl FromStr for DemographicKey {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (g, r) = s
            .split_once('-')
            .ok_or_else(|| format!("bad demographic key {s:?}"))?;
        Ok(DemographicKey::new(g.parse()?, r.parse()?))
    }
}

impl Serialize for DemographicKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DemographicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One face image with its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Arc<Image>,
    pub label: Label,
    pub subgroup: DemographicKey,
    pub method: Option<Method>,
    pub split: Split,
}

impl Sample {
    /// Checks the image shape/range and the method-iff-fake rule.
    pub fn validate(&self, input_size: usize) -> Result<()> {
        let shape = self.image.shape();
        if shape != (3, input_size, input_size) {
            return Err(DataError::ShapeMismatch {
                id: self.id.clone(),
                expected: input_size,
                found: (shape.1, shape.2, shape.0),
            });
        }
        if !self.image.data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(DataError::PixelOutOfRange(self.id.clone()));
        }
        if self.method.is_some() != self.label.is_fake() {
            return Err(DataError::InconsistentMethod { line: 0 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest root unless absolute.
    pub path: PathBuf,
    pub label: Label,
    pub subgroup: DemographicKey,
    pub method: Option<Method>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_COLUMNS: [&str; 7] = ["id", "path", "label", "gender", "race", "method", "split"];

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

fn parse_field<T: FromStr>(value: &str, line: u64, column: &str) -> Result<T> {
    value.trim().parse().map_err(|_| DataError::BadEnumValue {
        line,
        column: column.to_string(),
        value: value.to_string(),
    })
}

fn parse_label(value: &str, line: u64) -> Result<Label> {
    value
        .trim()
        .parse::<u8>()
        .ok()
        .and_then(Label::from_u8)
        .ok_or_else(|| DataError::BadEnumValue {
            line,
            column: "label".into(),
            value: value.to_string(),
        })
}

fn parse_method(value: &str, line: u64) -> Result<Option<Method>> {
    if value.trim().is_empty() {
        Ok(None)
    } else {
        parse_field(value, line, "method").map(Some)
    }
}

/// Reads and validates a manifest CSV; image files must exist.
pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = parse_manifest_rows(path)?;
    manifest.check_files()?;
    Ok(manifest)
}

/// Parses rows without touching the referenced image files.
pub fn parse_manifest_rows(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = MANIFEST_COLUMNS
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<_>>()?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| record.get(idx[i]).unwrap_or("");
        let id = get(0).trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line, id });
        }
        let label = parse_label(get(2), line)?;
        let gender: Gender = parse_field(get(3), line, "gender")?;
        let race: Race = parse_field(get(4), line, "race")?;
        let method = parse_method(get(5), line)?;
        let split: Split = parse_field(get(6), line, "split")?;
        if method.is_some() != label.is_fake() {
            return Err(DataError::InconsistentMethod { line });
        }
        entries.push(ManifestEntry {
            id,
            path: PathBuf::from(get(1).trim()),
            label,
            subgroup: DemographicKey::new(gender, race),
            method,
            split,
        });
    }
    Ok(DatasetManifest { root, entries })
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            let p = self.resolve(e);
            if !p.is_file() {
                return Err(DataError::MissingImageFile(p));
            }
        }
        Ok(())
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Decodes every image of `split` (manifest order) and validates it.
    pub fn load_split(&self, split: Split, input_size: usize) -> Result<Vec<Sample>> {
        self.split_entries(split)
            .map(|e| {
                let image = load_image(&self.resolve(e))?;
                let sample = Sample {
                    id: e.id.clone(),
                    image: Arc::new(image),
                    label: e.label,
                    subgroup: e.subgroup,
                    method: e.method,
                    split: e.split,
                };
                sample.validate(input_size)?;
                Ok(sample)
            })
            .collect()
    }

    /// Canonical CSV text: fixed header, rows sorted by id.
    pub fn to_csv_string(&self) -> String {
        let mut rows: Vec<&ManifestEntry> = self.entries.iter().collect();
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(MANIFEST_COLUMNS).expect("in-memory write");
        for e in rows {
            let label = e.label.as_u8().to_string();
            let path = e.path.to_string_lossy();
            let method = e.method.map(Method::as_str).unwrap_or("");
            w.write_record([
                e.id.as_str(),
                &path,
                &label,
                e.subgroup.gender.as_str(),
                e.subgroup.race.as_str(),
                method,
                e.split.as_str(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_csv_string()).map_err(io_err(path))
}

/// Per-subgroup entry counts for one split; all eight keys are present.
pub fn subgroup_counts(manifest: &DatasetManifest, split: Split) -> BTreeMap<DemographicKey, usize> {
    let mut counts: BTreeMap<DemographicKey, usize> =
        DemographicKey::all().into_iter().map(|k| (k, 0)).collect();
    for e in manifest.split_entries(split) {
        *counts.entry(e.subgroup).or_default() += 1;
    }
    counts
}

pub fn load_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(DataError::MissingImageFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| DataError::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(image_from_rgb8(&img.to_rgb8()))
}

pub fn image_from_rgb8(rgb: &image::RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Tensor3::zeros(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            *out.at_mut(c, y as usize, x as usize) = p[c] as f64 / 255.0;
        }
    }
    out
}

pub fn image_to_rgb8(img: &Image) -> image::RgbImage {
    let (h, w) = (img.height, img.width);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    image_to_rgb8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => DataError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => DataError::ImageDecode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Per-sample detector output; the unit of all metric computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub score: f64,
    pub label: Label,
    pub subgroup: DemographicKey,
    pub method: Option<Method>,
}

pub const PREDICTION_COLUMNS: [&str; 6] = ["sample_id", "score", "label", "gender", "race", "method"];

/// Canonical prediction CSV text (rows sorted by sample id).
pub fn predictions_to_csv_string(records: &[PredictionRecord]) -> String {
    let mut rows: Vec<&PredictionRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(PREDICTION_COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.sample_id.as_str(),
            &r.score.to_string(),
            &r.label.as_u8().to_string(),
            r.subgroup.gender.as_str(),
            r.subgroup.race.as_str(),
            r.method.map(Method::as_str).unwrap_or(""),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(predictions_to_csv_string(records).as_bytes())
        .map_err(io_err(path))
}

pub fn parse_predictions_str(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = PREDICTION_COLUMNS
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let get = |i: usize| record.get(idx[i]).unwrap_or("");
        let score: f64 = parse_field(get(1), line, "score")?;
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(DataError::BadScore { line, score });
        }
        out.push(PredictionRecord {
            sample_id: get(0).to_string(),
            score,
            label: parse_label(get(2), line)?,
            subgroup: DemographicKey::new(
                parse_field(get(3), line, "gender")?,
                parse_field(get(4), line, "race")?,
            ),
            method: parse_method(get(5), line)?,
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_predictions_str(&text)
}
