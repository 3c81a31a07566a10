//! Datasets on disk: PPM images plus `labels.csv` and `landmarks.csv`.
//!
//! ```text
//! labels.csv      path,expression            expression in 0..=5
//! landmarks.csv   path,x0,y0,...,x67,y67     normalized, 6 decimals
//! images/         binary PPM, 3x64x64
//! ```

pub mod ppm;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::expression::{Expression, LANDMARK_DIM, NUM_CLASSES, NUM_LANDMARKS};
use crate::rng;

pub use synth::{SyntheticFaceParams, IMAGE_SIZE};

pub const LABELS_FILE: &str = "labels.csv";
pub const LANDMARKS_FILE: &str = "landmarks.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Image path relative to the dataset root.
    pub path: String,
    pub image: Tensor<f32>,
    pub expression: Expression,
    /// 68 normalized `(x, y)` points.
    pub landmarks: Vec<[f32; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.expression.index()] += 1;
        }
        counts
    }

    /// Samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<DatasetManifest> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::usage(format!("index {i} out of range for {} samples", self.len())))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest {
            root: self.root.clone(),
            samples,
        })
    }

    /// One line per class, e.g. `anger: 100`.
    pub fn summary(&self) -> String {
        let counts = self.class_counts();
        let mut out = format!("{} samples\n", self.len());
        for e in Expression::ALL {
            out.push_str(&format!("{}: {}\n", e.name(), counts[e.index()]));
        }
        if counts.iter().all(|&c| c == counts[0]) {
            out.push_str(&format!("{} per class\n", counts[0]));
        }
        out
    }
}

/// Stacks images of `samples` into an N×3×H×W batch.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

/// Flattens landmarks of `samples` into an N×136 target.
pub fn landmark_batch(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let data = samples
        .iter()
        .flat_map(|s| s.landmarks.iter().flat_map(|p| [p[0], p[1]]))
        .collect();
    Tensor::new(vec![samples.len(), LANDMARK_DIM], data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::load(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `n` procedurally generated faces under `out_dir` and returns the
/// in-memory manifest, identical to what [`load_manifest`] reads back.
pub fn generate_synthetic_dataset(n: usize, seed: u64, out_dir: &Path, exec: Exec) -> Result<DatasetManifest> {
    if n == 0 || n % NUM_CLASSES != 0 {
        return Err(Error::usage(format!(
            "sample count must be a positive multiple of {NUM_CLASSES}, got {n}"
        )));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let rendered = exec.map_range(n, |i| {
        let expression = Expression::from_index(i % NUM_CLASSES).expect("class index in range");
        let mut r = rng::stream(seed, "sample", i as u64);
        let params = SyntheticFaceParams::sample(expression, &mut r);
        let landmarks = params.landmarks(&mut r);
        let image = synth::render(&params, &landmarks, &mut r);
        let path = format!("images/{i:06}.ppm");
        let bytes = ppm::encode(&image);
        let text: Vec<String> = landmarks
            .iter()
            .flat_map(|p| [format!("{:.6}", p[0]), format!("{:.6}", p[1])])
            .collect();
        (path, expression, bytes, text)
    });

    let labels_path = out_dir.join(LABELS_FILE);
    let landmarks_path = out_dir.join(LANDMARKS_FILE);
    let mut labels = csv_writer(&labels_path)?;
    let mut marks = csv_writer(&landmarks_path)?;
    labels
        .write_record(["path", "expression"])
        .map_err(|e| csv_error(&labels_path, e))?;
    let mut header = vec!["path".to_string()];
    for k in 0..NUM_LANDMARKS {
        header.push(format!("x{k}"));
        header.push(format!("y{k}"));
    }
    marks.write_record(&header).map_err(|e| csv_error(&landmarks_path, e))?;

    let mut samples = Vec::with_capacity(n);
    for (path, expression, bytes, text) in rendered {
        write_file(&out_dir.join(&path), &bytes)?;
        labels
            .write_record([path.as_str(), &expression.index().to_string()])
            .map_err(|e| csv_error(&labels_path, e))?;
        let mut row = vec![path.clone()];
        row.extend(text.iter().cloned());
        marks.write_record(&row).map_err(|e| csv_error(&landmarks_path, e))?;
        // keep exactly what a reader would see
        let landmarks = text
            .chunks_exact(2)
            .map(|xy| [xy[0].parse().expect("formatted float"), xy[1].parse().expect("formatted float")])
            .collect();
        samples.push(Sample {
            path,
            image: ppm::decode(&bytes)?,
            expression,
            landmarks,
        });
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    marks.flush().map_err(|e| Error::io(&landmarks_path, e))?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        samples,
    })
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    reader
        .records()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn expect_header(path: &Path, found: &[&str], expected: &[String]) -> Result<()> {
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(Error::load(format!(
            "{}: unexpected header `{}`",
            path.display(),
            found.join(",")
        )));
    }
    Ok(())
}

fn header(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    Ok(reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect())
}

/// Reads and validates a dataset written in the on-disk layout.
pub fn load_manifest(root: &Path, exec: Exec) -> Result<DatasetManifest> {
    let labels_path = root.join(LABELS_FILE);
    let landmarks_path = root.join(LANDMARKS_FILE);

    let labels_header = header(&labels_path)?;
    let found: Vec<&str> = labels_header.iter().map(String::as_str).collect();
    expect_header(&labels_path, &found, &["path".into(), "expression".into()])?;

    let mut records: Vec<(String, Expression)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in read_rows(&labels_path)?.iter().enumerate() {
        let line = i + 2;
        let at = || format!("{} row {line}", labels_path.display());
        if row.len() != 2 {
            return Err(Error::load(format!("{}: expected 2 fields, found {}", at(), row.len())));
        }
        let path = row[0].to_string();
        let expression = row[1]
            .trim()
            .parse::<usize>()
            .ok()
            .and_then(Expression::from_index)
            .ok_or_else(|| {
                Error::load(format!("{}: class id `{}` is not in 0..={}", at(), &row[1], NUM_CLASSES - 1))
            })?;
        if !seen.insert(path.clone()) {
            return Err(Error::load(format!("{}: duplicate path `{path}`", at())));
        }
        records.push((path, expression));
    }

    let landmark_header = header(&landmarks_path)?;
    let found: Vec<&str> = landmark_header.iter().map(String::as_str).collect();
    let mut expected = vec!["path".to_string()];
    for k in 0..NUM_LANDMARKS {
        expected.push(format!("x{k}"));
        expected.push(format!("y{k}"));
    }
    expect_header(&landmarks_path, &found, &expected)?;

    let mut table: BTreeMap<String, Vec<[f32; 2]>> = BTreeMap::new();
    for (i, row) in read_rows(&landmarks_path)?.iter().enumerate() {
        let line = i + 2;
        let at = || format!("{} row {line}", landmarks_path.display());
        let values = row.len().saturating_sub(1);
        if values != LANDMARK_DIM {
            return Err(Error::load(format!(
                "{}: expected {LANDMARK_DIM} coordinates, found {values}",
                at()
            )));
        }
        let mut coords = Vec::with_capacity(LANDMARK_DIM);
        for field in row.iter().skip(1) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::load(format!("{}: `{field}` is not a number", at())))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::load(format!("{}: coordinate {v} outside [0, 1]", at())));
            }
            coords.push(v);
        }
        let points = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        if table.insert(row[0].to_string(), points).is_some() {
            return Err(Error::load(format!("{}: duplicate path `{}`", at(), &row[0])));
        }
    }

    for (i, (path, _)) in records.iter().enumerate() {
        if !table.contains_key(path) {
            return Err(Error::load(format!(
                "{} row {}: no landmark row for `{path}`",
                labels_path.display(),
                i + 2
            )));
        }
    }

    let images = exec.map(records.iter().map(|(p, _)| p.clone()).collect(), |rel| {
        let file = root.join(&rel);
        let bytes = fs::read(&file).map_err(|e| Error::load(format!("image `{rel}` unreadable: {e}")))?;
        let image = ppm::decode(&bytes).map_err(|e| Error::load(format!("image `{rel}`: {e}")))?;
        if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::load(format!(
                "image `{rel}` is {:?}, expected 3x{IMAGE_SIZE}x{IMAGE_SIZE}",
                image.shape()
            )));
        }
        Ok(image)
    });

    let mut samples = Vec::with_capacity(records.len());
    for ((path, expression), image) in records.into_iter().zip(images) {
        let landmarks = table.remove(&path).expect("checked above");
        samples.push(Sample {
            path,
            image: image?,
            expression,
            landmarks,
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        samples,
    })
}

/// Stratified split: each class sends `round(val_fraction * count)` of its
/// samples to validation. Both halves keep the manifest's sample order.
pub fn split_train_val(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::usage(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class[s.expression.index()].push(i);
    }
    let mut is_val = vec![false; manifest.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = (val_fraction * members.len() as f64).round() as usize;
        if take == 0 || take == members.len() {
            return Err(Error::usage(format!(
                "class {} has {} samples, too few for a nonempty split at val_fraction {val_fraction}",
                Expression::ALL[c],
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, "split", c as u64));
        for &i in &members[..take] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..manifest.len()).partition(|&i| is_val[i]);
    Ok((manifest.subset(&train)?, manifest.subset(&val)?))
}
