//! On-disk formats: dataset JSONL, binary PPM images, foil and VSR item
//! files, split lists and vocabulary files.
//!
//! Images are binary PPM (`P6`) with a six-line ASCII header:
//!
//! ```text
//! P6
//! # rgvp
//! # id <record id>
//! # channels 3
//! <width> <height>
//! 255
//! ```
//!
//! followed by `width × height × 3` bytes, row-major RGB. The reader accepts
//! any `P6` header with comments and a maxval of 255.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rgvp_core::scene::{EntityBox, ImageRecord, RelationTriplet, RelationVocab};
use rgvp_core::synth::{FoilPair, Split, SynthCorpus, VsrItem};
use rgvp_core::tokenizer::Tokenizer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const FOILS_FILE: &str = "foils.jsonl";
pub const VSR_FILE: &str = "vsr.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const RELATIONS_FILE: &str = "relations.txt";
pub const TOKENS_FILE: &str = "tokens.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityLine {
    pub label: String,
    pub bbox: [f32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletLine {
    pub s: usize,
    pub r: String,
    pub o: usize,
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub id: String,
    pub width: u32,
    pub height: u32,
    /// Image path, relative to the dataset file's directory unless absolute.
    pub image: String,
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntityLine>,
    #[serde(default)]
    pub triplets: Vec<TripletLine>,
}

impl RecordLine {
    pub fn from_record(r: &ImageRecord, image: String) -> Self {
        Self {
            id: r.id.clone(),
            width: r.width,
            height: r.height,
            image,
            captions: r.captions.clone(),
            entities: r
                .entities
                .iter()
                .map(|e| EntityLine { label: e.label.clone(), bbox: [e.xmin, e.ymin, e.xmax, e.ymax] })
                .collect(),
            triplets: r
                .triplets
                .iter()
                .map(|t| TripletLine { s: t.subject, r: t.relation.clone(), o: t.object })
                .collect(),
        }
    }

    pub fn into_record(self, pixels: Vec<f32>) -> ImageRecord {
        ImageRecord {
            id: self.id,
            width: self.width,
            height: self.height,
            pixels,
            captions: self.captions,
            entities: self
                .entities
                .iter()
                .map(|e| EntityBox::new(&e.label, e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3]))
                .collect(),
            triplets: self.triplets.iter().map(|t| RelationTriplet::new(t.s, &t.r, t.o)).collect(),
        }
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        line: 0,
        source: e,
    })?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Json { path: path.into(), line: e.line(), source: e })
}

/// Parses one JSON value per non-blank line. Errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, limit: Option<usize>) -> Result<Vec<T>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Json { path: path.into(), line: i + 1, source: e })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::Json { path: path.into(), line: 0, source: e })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one JSON line and flushes.
pub struct JsonlAppender {
    path: PathBuf,
    w: BufWriter<fs::File>,
}

impl JsonlAppender {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { path: path.into(), w: create(path)? })
    }

    pub fn push<T: Serialize>(&mut self, item: &T) -> Result<()> {
        let p = &self.path;
        serde_json::to_writer(&mut self.w, item).map_err(|e| Error::Json { path: p.clone(), line: 0, source: e })?;
        self.w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
        self.w.flush().map_err(|e| Error::io(p, e))
    }
}

/// Encodes `[0, 1]` RGB floats as a P6 image.
pub fn encode_ppm(id: &str, width: u32, height: u32, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n# rgvp\n# id {id}\n# channels 3\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Decodes a P6 image into `(width, height, pixels)`.
pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(u32, u32, Vec<f32>)> {
    let bad = |reason: &str| Error::format(path, format!("ppm: {reason}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        match bytes.get(pos) {
            None => return Err(bad("truncated header")),
            Some(b'#') => {
                while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                    pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                    pos += 1;
                }
                fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
            }
        }
    }
    if fields[0] != "P6" {
        return Err(bad("magic is not P6"));
    }
    let num = |s: &str| s.parse::<u32>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let n = w as usize * h as usize * 3;
    if data.len() != n {
        return Err(bad(&format!("raster has {} bytes, expected {n}", data.len())));
    }
    Ok((w, h, data.iter().map(|b| *b as f32 / 255.0).collect()))
}

pub fn read_ppm(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(path, &bytes)
}

fn resolve(base: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.into()
    } else {
        base.join(p)
    }
}

/// Loads and validates a dataset file, in file order.
pub fn load_dataset(path: &Path, limit: Option<usize>) -> Result<Vec<ImageRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let lines: Vec<RecordLine> = read_jsonl(path, limit)?;
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let img = resolve(base, &line.image);
        let (w, h, pixels) = read_ppm(&img)?;
        if (w, h) != (line.width, line.height) {
            return Err(Error::format(
                &img,
                format!("image is {w}×{h}, record {} declares {}×{}", line.id, line.width, line.height),
            ));
        }
        let mut r = line.into_record(pixels);
        r.normalize_and_validate()?;
        out.push(r);
    }
    Ok(out)
}

/// Writes the dataset file plus one PPM per record under `images/`.
pub fn save_dataset(dir: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut lines = Vec::with_capacity(records.len());
    for r in records {
        let rel = format!("{IMAGES_DIR}/{}.ppm", r.id);
        let bytes = encode_ppm(&r.id, r.width, r.height, &r.pixels);
        let mut w = create(&dir.join(&rel))?;
        w.write_all(&bytes).map_err(|e| Error::io(dir.join(&rel), e))?;
        w.flush().map_err(|e| Error::io(dir.join(&rel), e))?;
        lines.push(RecordLine::from_record(r, rel));
    }
    write_jsonl(&dir.join(DATASET_FILE), &lines)
}

/// Record ids per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitLists {
    pub fn from_assignment(records: &[ImageRecord], splits: &[Split]) -> Self {
        let mut s = Self::default();
        for (r, sp) in records.iter().zip(splits) {
            match sp {
                Split::Train => s.train.push(r.id.clone()),
                Split::Dev => s.dev.push(r.id.clone()),
                Split::Test => s.test.push(r.id.clone()),
            }
        }
        s
    }

    /// Split of each record; ids not listed anywhere are training records.
    pub fn assign(&self, records: &[ImageRecord]) -> Vec<Split> {
        let dev: std::collections::HashSet<&str> = self.dev.iter().map(String::as_str).collect();
        let test: std::collections::HashSet<&str> = self.test.iter().map(String::as_str).collect();
        records
            .iter()
            .map(|r| {
                if dev.contains(r.id.as_str()) {
                    Split::Dev
                } else if test.contains(r.id.as_str()) {
                    Split::Test
                } else {
                    Split::Train
                }
            })
            .collect()
    }
}

/// Writes a synthetic corpus directory.
pub fn save_synth(dir: &Path, corpus: &SynthCorpus) -> Result<()> {
    save_dataset(dir, &corpus.records)?;
    write_jsonl(&dir.join(FOILS_FILE), &corpus.foils)?;
    write_jsonl(&dir.join(VSR_FILE), &corpus.vsr)?;
    write_json(&dir.join(SPLITS_FILE), &SplitLists::from_assignment(&corpus.records, &corpus.splits))
}

/// Reads a data directory. Foil, VSR and split files are optional.
pub fn load_data_dir(dir: &Path) -> Result<SynthCorpus> {
    let records = load_dataset(&dir.join(DATASET_FILE), None)?;
    fn opt_jsonl<T: DeserializeOwned>(p: PathBuf) -> Result<Vec<T>> {
        if p.exists() {
            read_jsonl(&p, None)
        } else {
            Ok(Vec::new())
        }
    }
    let foils: Vec<FoilPair> = opt_jsonl(dir.join(FOILS_FILE))?;
    let vsr: Vec<VsrItem> = opt_jsonl(dir.join(VSR_FILE))?;
    let sp = dir.join(SPLITS_FILE);
    let splits = if sp.exists() {
        read_json::<SplitLists>(&sp)?.assign(&records)
    } else {
        vec![Split::Train; records.len()]
    };
    Ok(SynthCorpus { records, splits, foils, vsr })
}

/// Accepts either a data directory or a path to its dataset file.
pub fn data_dir_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.into()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    }
}

fn write_lines<'a, I: IntoIterator<Item = &'a str>>(path: &Path, lines: I) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(s.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub fn save_relation_vocab(path: &Path, vocab: &RelationVocab) -> Result<()> {
    write_lines(path, vocab.entries().iter().map(String::as_str))
}

pub fn load_relation_vocab(path: &Path) -> Result<RelationVocab> {
    Ok(RelationVocab::from_entries(read_lines(path)?))
}

pub fn save_tokens(path: &Path, tok: &Tokenizer) -> Result<()> {
    write_lines(path, tok.tokens().iter().map(String::as_str))
}

pub fn load_tokens(path: &Path) -> Result<Tokenizer> {
    Ok(Tokenizer::from_tokens(read_lines(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rgvp_core::synth::{generate, SynthConfig};

    #[test]
    fn ppm_round_trip_and_header_shape() {
        let px: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 255.0).collect();
        let bytes = encode_ppm("x", 2, 3, &px);
        let header: Vec<&[u8]> = bytes.splitn(7, |b| *b == b'\n').take(6).collect();
        assert_eq!(header[0], b"P6");
        assert_eq!(header[4], b"2 3");
        assert_eq!(header[5], b"255");
        let (w, h, back) = decode_ppm(Path::new("x"), &bytes).unwrap();
        assert_eq!((w, h), (2, 3));
        assert_eq!(back, px);
    }

    proptest::proptest! {
        #[test]
        fn ppm_round_trips_any_byte_image(w in 1u32..9, h in 1u32..9, seed in proptest::prelude::any::<u64>()) {
            let n = (w * h * 3) as usize;
            let px: Vec<f32> = (0..n).map(|i| ((seed >> (i % 57)) as u8 ^ i as u8) as f32 / 255.0).collect();
            let (w2, h2, back) = decode_ppm(Path::new("p"), &encode_ppm("p", w, h, &px)).unwrap();
            proptest::prop_assert_eq!((w2, h2), (w, h));
            proptest::prop_assert_eq!(back, px);
        }
    }

    #[test]
    fn ppm_rejects_bad_input() {
        let p = Path::new("x");
        assert!(decode_ppm(p, b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(p, b"P6\n1 1\n255\n\0\0").is_err());
        assert!(decode_ppm(p, b"P6\n1 1\n65535\n\0\0\0").is_err());
        assert!(decode_ppm(p, b"P6\n1").is_err());
        assert!(decode_ppm(p, b"P6 1 1 255 abc").is_ok());
    }

    #[test]
    fn synth_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(20, 3, &SynthConfig::default());
        save_synth(dir.path(), &c).unwrap();
        let back = load_data_dir(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn jsonl_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"a\": 1}\n\n{oops\n").unwrap();
        match read_jsonl::<serde_json::Value>(&p, None) {
            Err(Error::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
