//! Datasets: IDX files, a synthetic factor-grid image generator, and splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Full,
    Train,
    Test,
}

/// One named column of integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelColumn {
    pub name: String,
    pub values: Vec<usize>,
}

impl LabelColumn {
    /// Number of distinct label values (max + 1).
    pub fn cardinality(&self) -> usize {
        self.values.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, width * height)` pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<LabelColumn>,
    pub split: Split,
    pub width: usize,
    pub height: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.last_dim()
    }

    pub fn label(&self, name: &str) -> Option<&LabelColumn> {
        self.labels.iter().find(|c| c.name == name)
    }

    /// Rows `indices`, with labels, tagged `split`.
    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: self
                .labels
                .iter()
                .map(|c| LabelColumn {
                    name: c.name.clone(),
                    values: indices.iter().map(|&i| c.values[i]).collect(),
                })
                .collect(),
            split,
            width: self.width,
            height: self.height,
        }
    }

    /// First `n` examples (or all if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `(n, rows, cols, pixels / 255)`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(buf, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "images: bad magic {:02x?} (expected 00 00 08 03)",
            &buf[..4]
        )));
    }
    let n = be_u32(buf, 4, "images")? as usize;
    let rows = be_u32(buf, 8, "images")? as usize;
    let cols = be_u32(buf, 12, "images")? as usize;
    let need = n * rows * cols;
    let payload = &buf[16..];
    if payload.len() != need {
        return Err(Error::Format(format!(
            "images: expected {need} pixel bytes, found {}",
            payload.len()
        )));
    }
    Ok((
        n,
        rows,
        cols,
        payload.iter().map(|&p| p as f64 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "labels: bad magic {:02x?} (expected 00 00 08 01)",
            &buf[..4]
        )));
    }
    let n = be_u32(buf, 4, "labels")? as usize;
    let payload = &buf[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "labels: expected {n} bytes, found {}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image file and, optionally, its label file (column `label`).
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let mut labels = Vec::new();
    if let Some(p) = labels_path {
        let values = parse_idx_labels(&fs::read(p)?)?;
        if values.len() != n {
            return Err(Error::Format(format!(
                "{} labels for {n} images",
                values.len()
            )));
        }
        labels.push(LabelColumn {
            name: "label".into(),
            values,
        });
    }
    Ok(Dataset {
        images: Tensor::matrix(n, rows * cols, pixels),
        labels,
        split: Split::Full,
        width: cols,
        height: rows,
    })
}

/// Writes images (and optionally one label column) as IDX files. Pixels are
/// rounded to the nearest multiple of 1/255.
pub fn write_idx(data: &Dataset, images_path: &Path, labels: Option<(&str, &Path)>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + data.images.len());
    for v in [
        IDX_IMAGES,
        data.len() as u32,
        data.height as u32,
        data.width as u32,
    ] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(
        data.images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images_path, buf)?;
    if let Some((column, path)) = labels {
        let col = data
            .label(column)
            .ok_or_else(|| Error::InvalidInput(format!("no label column '{column}'")))?;
        let mut buf = Vec::with_capacity(8 + col.values.len());
        buf.extend_from_slice(&IDX_LABELS.to_be_bytes());
        buf.extend_from_slice(&(col.values.len() as u32).to_be_bytes());
        for &v in &col.values {
            buf.push(
                u8::try_from(v).map_err(|_| {
                    Error::InvalidInput(format!("label {v} does not fit in a byte"))
                })?,
            );
        }
        fs::write(path, buf)?;
    }
    Ok(())
}

/// Factor grid for [`synth_generate`].
///
/// Factor 0 picks a glyph shape, factor 1 the foreground intensity, and an
/// optional factor 2 places the glyph in one of four quadrants.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFactorSpec {
    pub factors: Vec<(String, usize)>,
    pub image_side: usize,
    pub noise_sigma: f64,
    pub samples_per_combo: usize,
}

impl SynthFactorSpec {
    /// 4 shapes x 3 intensities, 16x16, 50 images per combination.
    pub fn shapes_intensities() -> Self {
        Self {
            factors: vec![("shape".into(), 4), ("intensity".into(), 3)],
            image_side: 16,
            noise_sigma: 0.1,
            samples_per_combo: 50,
        }
    }
}

/// Number of glyphs the generator can draw.
pub const NUM_STENCILS: usize = 6;

/// Whether the unit-square point `(u, v)` (each in `[-1, 1]`) is inside glyph `shape`.
/// Glyph membership on `[-1, 1]^2`. The first four glyphs differ pairwise in
/// at least a third of their pixels at 16x16, so small shape counts stay
/// visually distinct.
fn stencil(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() <= 0.8 && v.abs() <= 0.8,                            // filled square
        1 => u.abs() <= 0.25 || v.abs() <= 0.25,                          // plus
        2 => (0.5..=0.95).contains(&(u * u + v * v).sqrt()),              // ring
        3 => (u - v).abs() <= 0.3 || (u + v).abs() <= 0.3,                // diagonal cross
        4 => v >= -0.8 && v <= 0.9 && u.abs() <= (v + 0.8) / 1.7 * 0.9, // triangle
        _ => (u * u + v * v).sqrt() <= 0.9,                               // disc
    }
}

fn intensity(level: usize, levels: usize) -> f64 {
    if levels == 1 {
        1.0
    } else {
        0.3 + 0.7 * level as f64 / (levels - 1) as f64
    }
}

/// Noise-free rendering of one factor combination.
pub fn render_combo(spec: &SynthFactorSpec, combo: &[usize]) -> Vec<f64> {
    let side = spec.image_side;
    let levels = spec.factors.get(1).map_or(1, |f| f.1);
    let fg = intensity(combo.get(1).copied().unwrap_or(0), levels);
    // glyph box: whole image, or one quadrant when a position factor exists
    let (x0, y0, size) = match combo.get(2) {
        Some(&q) => ((q % 2) * side / 2, (q / 2) * side / 2, side / 2),
        None => (0, 0, side),
    };
    let mut img = vec![0.0; side * side];
    for y in 0..size {
        for x in 0..size {
            let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
            if stencil(combo[0], u, v) {
                img[(y0 + y) * side + x0 + x] = fg;
            }
        }
    }
    img
}

fn combos(cards: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &k in cards {
        out = out
            .into_iter()
            .flat_map(|p| (0..k).map(move |c| [p.clone(), vec![c]].concat()))
            .collect();
    }
    out
}

/// Renders every factor combination `samples_per_combo` times with clamped
/// Gaussian pixel noise.
pub fn synth_generate<R: Rng + ?Sized>(spec: &SynthFactorSpec, rng: &mut R) -> Result<Dataset> {
    let f = spec.factors.len();
    if !(1..=3).contains(&f) {
        return Err(Error::InvalidInput(format!(
            "the generator supports 1 to 3 factors, got {f}"
        )));
    }
    if spec.image_side < 8 || spec.image_side % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "image side must be even and >= 8, got {}",
            spec.image_side
        )));
    }
    let limits = [NUM_STENCILS, 8, 4];
    for ((name, card), limit) in spec.factors.iter().zip(limits) {
        if *card == 0 || *card > limit {
            return Err(Error::InvalidInput(format!(
                "factor '{name}' has {card} values; at most {limit} supported"
            )));
        }
    }
    if spec.samples_per_combo == 0 || !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidInput(
            "need samples_per_combo >= 1 and noise_sigma >= 0".into(),
        ));
    }
    let cards: Vec<usize> = spec.factors.iter().map(|f| f.1).collect();
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let d = spec.image_side * spec.image_side;
    let mut pixels = Vec::new();
    let mut columns: Vec<Vec<usize>> = vec![Vec::new(); f];
    for combo in combos(&cards) {
        let base = render_combo(spec, &combo);
        for _ in 0..spec.samples_per_combo {
            pixels.extend(base.iter().map(|p| {
                if spec.noise_sigma == 0.0 {
                    *p
                } else {
                    (p + noise.sample(rng)).clamp(0.0, 1.0)
                }
            }));
            for (col, c) in columns.iter_mut().zip(&combo) {
                col.push(*c);
            }
        }
    }
    let n = pixels.len() / d;
    Ok(Dataset {
        images: Tensor::matrix(n, d, pixels),
        labels: spec
            .factors
            .iter()
            .zip(columns)
            .map(|((name, _), values)| LabelColumn {
                name: name.clone(),
                values,
            })
            .collect(),
        split: Split::Full,
        width: spec.image_side,
        height: spec.image_side,
    })
}

/// Seeded train/test split. With labels present the split is stratified by
/// the joint label tuple: each group contributes `round(train_frac * size)`
/// examples to the training side.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must be in (0, 1), got {train_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        groups
            .entry(data.labels.iter().map(|c| c.values[i]).collect())
            .or_default()
            .push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        let cut = (train_frac * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(format!(
            "split of {} examples at {train_frac} leaves an empty side",
            data.len()
        )));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        data.subset(&train, Split::Train),
        data.subset(&test, Split::Test),
    ))
}
