use std::path::{Path, PathBuf};

use forge_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

fn default_test_fraction() -> f64 {
    0.2
}

fn one() -> f64 {
    1.0
}

fn ten() -> usize {
    10
}

fn hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetDescriptor {
    /// Gaussian clusters around random class centers.
    SyntheticBlobs {
        classes: usize,
        features: usize,
        n: usize,
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "one")]
        spread: f64,
    },
    /// Regression onto the outputs of a frozen random tanh network.
    SyntheticTeacher {
        inputs: usize,
        outputs: usize,
        n: usize,
        seed: u64,
        #[serde(default = "hidden")]
        hidden: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        noise: f64,
    },
    /// IDX files: unsigned-byte images and labels.
    IdxImages {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "ten")]
        classes: usize,
    },
    /// Numeric rows; the last column is an integer label.
    CsvTable {
        train: PathBuf,
        test: PathBuf,
        features: usize,
        classes: usize,
        #[serde(default)]
        header: bool,
    },
}

impl DatasetDescriptor {
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetDescriptor::IdxImages {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetDescriptor::CsvTable { train, test, .. } => {
                fix(train);
                fix(test);
            }
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(TrainError::invalid(format!("dataset.{field}"), reason))
        };
        let exists = |field: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                bad(field, format!("{} does not exist", p.display()))
            }
        };
        match self {
            DatasetDescriptor::SyntheticBlobs {
                classes,
                features,
                n,
                test_fraction,
                spread,
                ..
            } => {
                if *classes < 2 {
                    return bad("classes", "must be >= 2".into());
                }
                if *features == 0 {
                    return bad("features", "must be >= 1".into());
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    return bad("spread", "must be positive".into());
                }
                check_split("dataset", *n, *test_fraction)
            }
            DatasetDescriptor::SyntheticTeacher {
                inputs,
                outputs,
                n,
                hidden,
                test_fraction,
                noise,
                ..
            } => {
                if *inputs == 0 || *outputs == 0 || *hidden == 0 {
                    return bad("inputs", "inputs, outputs and hidden must be >= 1".into());
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return bad("noise", "must be non-negative".into());
                }
                check_split("dataset", *n, *test_fraction)
            }
            DatasetDescriptor::IdxImages {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                if *classes < 2 {
                    return bad("classes", "must be >= 2".into());
                }
                exists("train_images", train_images)?;
                exists("train_labels", train_labels)?;
                exists("test_images", test_images)?;
                exists("test_labels", test_labels)
            }
            DatasetDescriptor::CsvTable {
                train,
                test,
                features,
                classes,
                ..
            } => {
                if *features == 0 {
                    return bad("features", "must be >= 1".into());
                }
                if *classes < 2 {
                    return bad("classes", "must be >= 2".into());
                }
                exists("train", train)?;
                exists("test", test)
            }
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, DatasetDescriptor::SyntheticTeacher { .. })
    }
}

fn check_split(prefix: &str, n: usize, test_fraction: f64) -> Result<()> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(TrainError::invalid(
            format!("{prefix}.test_fraction"),
            "must lie in (0, 1)",
        ));
    }
    let test = test_count(n, test_fraction);
    if test < 1 || n - test < 2 {
        return Err(TrainError::invalid(
            format!("{prefix}.n"),
            format!("{n} samples cannot be split"),
        ));
    }
    Ok(())
}

fn test_count(n: usize, test_fraction: f64) -> usize {
    (n as f64 * test_fraction).round() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Tensor<f32>),
}

/// One split: inputs shaped `[n, ...]` and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor<f32>,
    pub targets: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_len(&self) -> usize {
        self.inputs.shape()[1..].iter().product()
    }

    /// Gathers the examples at `indices` with per-example shape `shape`.
    pub fn batch(&self, indices: &[usize], shape: &[usize]) -> Result<(Tensor<f32>, Targets)> {
        let width = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * width..(i + 1) * width]);
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        let x = Tensor::new(&full, data)?;
        let t = match &self.targets {
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(v) => {
                let d = v.shape()[1];
                let mut out = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
                }
                Targets::Values(Tensor::new(&[indices.len(), d], out)?)
            }
        };
        Ok((x, t))
    }

    /// Raw little-endian bytes of inputs and targets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self
            .inputs
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        match &self.targets {
            Targets::Classes { labels, .. } => {
                out.extend(labels.iter().flat_map(|&l| (l as u32).to_le_bytes()))
            }
            Targets::Values(v) => out.extend(v.data().iter().flat_map(|x| x.to_le_bytes())),
        }
        out
    }
}

/// Loads or generates `(train, test)`.
pub fn load_dataset(desc: &DatasetDescriptor) -> Result<(Split, Split)> {
    match desc {
        &DatasetDescriptor::SyntheticBlobs {
            classes,
            features,
            n,
            seed,
            test_fraction,
            spread,
        } => Ok(blobs(classes, features, n, seed, test_fraction, spread)),
        &DatasetDescriptor::SyntheticTeacher {
            inputs,
            outputs,
            n,
            seed,
            hidden,
            test_fraction,
            noise,
        } => Ok(teacher(
            inputs,
            outputs,
            hidden,
            n,
            seed,
            test_fraction,
            noise,
        )),
        DatasetDescriptor::IdxImages {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => Ok((
            idx_split(train_images, train_labels, *classes)?,
            idx_split(test_images, test_labels, *classes)?,
        )),
        DatasetDescriptor::CsvTable {
            train,
            test,
            features,
            classes,
            header,
        } => Ok((
            csv_split(train, *features, *classes, *header)?,
            csv_split(test, *features, *classes, *header)?,
        )),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn split_rows(inputs: Vec<f32>, width: usize, targets: Targets, n_train: usize) -> (Split, Split) {
    let n = inputs.len() / width;
    let (a, b) = inputs.split_at(n_train * width);
    let tensor =
        |d: &[f32]| Tensor::new(&[d.len() / width, width], d.to_vec()).expect("row-major split");
    let (ta, tb) = match targets {
        Targets::Classes { labels, classes } => (
            Targets::Classes {
                labels: labels[..n_train].to_vec(),
                classes,
            },
            Targets::Classes {
                labels: labels[n_train..].to_vec(),
                classes,
            },
        ),
        Targets::Values(v) => {
            let d = v.len() / n;
            let (va, vb) = v.data().split_at(n_train * d);
            (
                Targets::Values(Tensor::new(&[n_train, d], va.to_vec()).expect("row-major split")),
                Targets::Values(
                    Tensor::new(&[n - n_train, d], vb.to_vec()).expect("row-major split"),
                ),
            )
        }
    };
    (
        Split {
            inputs: tensor(a),
            targets: ta,
        },
        Split {
            inputs: tensor(b),
            targets: tb,
        },
    )
}

fn blobs(
    classes: usize,
    features: usize,
    n: usize,
    seed: u64,
    test_fraction: f64,
    spread: f64,
) -> (Split, Split) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * features)
        .map(|_| 2.0 * normal(&mut rng))
        .collect();
    let mut inputs = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        labels.push(c);
        for f in 0..features {
            inputs.push((centers[c * features + f] + spread * normal(&mut rng)) as f32);
        }
    }
    let n_train = n - test_count(n, test_fraction);
    split_rows(
        inputs,
        features,
        Targets::Classes { labels, classes },
        n_train,
    )
}

fn teacher(
    inputs: usize,
    outputs: usize,
    hidden: usize,
    n: usize,
    seed: u64,
    test_fraction: f64,
    noise: f64,
) -> (Split, Split) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1: Vec<f64> = (0..inputs * hidden)
        .map(|_| normal(&mut rng) / (inputs as f64).sqrt())
        .collect();
    let w2: Vec<f64> = (0..hidden * outputs)
        .map(|_| normal(&mut rng) / (hidden as f64).sqrt())
        .collect();
    let mut xs = Vec::with_capacity(n * inputs);
    let mut ys = Vec::with_capacity(n * outputs);
    let mut h = vec![0.0; hidden];
    for _ in 0..n {
        let x: Vec<f64> = (0..inputs).map(|_| normal(&mut rng)).collect();
        for (j, hj) in h.iter_mut().enumerate() {
            *hj = (0..inputs)
                .map(|i| x[i] * w1[i * hidden + j])
                .sum::<f64>()
                .tanh();
        }
        for o in 0..outputs {
            let y: f64 = (0..hidden).map(|j| h[j] * w2[j * outputs + o]).sum();
            ys.push((y + noise * normal(&mut rng)) as f32);
        }
        xs.extend(x.iter().map(|&v| v as f32));
    }
    let n_train = n - test_count(n, test_fraction);
    let targets = Targets::Values(Tensor::new(&[n, outputs], ys).expect("teacher targets"));
    split_rows(xs, inputs, targets, n_train)
}

/// Parses an IDX file of unsigned bytes: `00 00 08 ndim`, big-endian u32
/// dims, then the payload.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(TrainError::io(path))?;
    parse_idx(path, &bytes)
}

pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(TrainError::format(path, "bad IDX magic number"));
    }
    if bytes[2] != 0x08 {
        return Err(TrainError::format(
            path,
            format!(
                "unsupported IDX element type 0x{:02x}, only unsigned bytes are read",
                bytes[2]
            ),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(TrainError::format(path, "IDX file has no dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(TrainError::format(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() - header != len {
        return Err(TrainError::format(
            path,
            format!(
                "IDX payload has {} bytes, dims {dims:?} need {len}",
                bytes.len() - header
            ),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    assert_eq!(
        dims.iter().product::<usize>(),
        data.len(),
        "write_idx: payload length"
    );
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    std::fs::write(path, out).map_err(TrainError::io(path))
}

fn idx_split(images: &Path, labels: &Path, classes: usize) -> Result<Split> {
    let (dims, pixels) = read_idx(images)?;
    let (ldims, raw_labels) = read_idx(labels)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(TrainError::format(
            labels,
            format!("label dims {ldims:?} do not match {} images", dims[0]),
        ));
    }
    if let Some(i) = raw_labels.iter().position(|&l| l as usize >= classes) {
        return Err(TrainError::format(
            labels,
            format!(
                "label {} at index {i} out of range for {classes} classes",
                raw_labels[i]
            ),
        ));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Split {
        inputs: Tensor::new(&dims, data)?,
        targets: Targets::Classes {
            labels: raw_labels.iter().map(|&l| l as usize).collect(),
            classes,
        },
    })
}

fn csv_split(path: &Path, features: usize, classes: usize, header: bool) -> Result<Split> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| TrainError::format(path, e.to_string()))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| TrainError::format(path, e.to_string()))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let err = |reason: String| TrainError::Row {
            path: path.to_path_buf(),
            row,
            reason,
        };
        if record.len() != features + 1 {
            return Err(err(format!(
                "expected {features} features and a label, found {} columns",
                record.len()
            )));
        }
        for (j, field) in record.iter().take(features).enumerate() {
            let v: f32 = field
                .parse()
                .map_err(|_| err(format!("column {}: `{field}` is not a number", j + 1)))?;
            inputs.push(v);
        }
        let raw = &record[features];
        let label: usize = raw
            .parse()
            .map_err(|_| err(format!("label `{raw}` is not an integer")))?;
        if label >= classes {
            return Err(err(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(TrainError::format(path, "no rows"));
    }
    Ok(Split {
        inputs: Tensor::new(&[labels.len(), features], inputs)?,
        targets: Targets::Classes { labels, classes },
    })
}

/// Deterministic batch order for one epoch.
pub fn epoch_order(n: usize, data_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(data_seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

const GLYPH_SIDE: usize = 14;

/// Writes a synthetic 14×14 ten-class image task as four IDX files and
/// returns the matching descriptor.
///
/// Each class is a fixed set of strokes; examples are shifted, rescaled,
/// blended with a second class and corrupted with pixel noise.
pub fn generate_idx_task(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetDescriptor> {
    std::fs::create_dir_all(dir).map_err(TrainError::io(dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..10).map(|_| glyph_template(&mut rng)).collect();
    let mut write = |n: usize, images: &str, labels: &str| -> Result<(PathBuf, PathBuf)> {
        let mut pixels = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
        let mut ls = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen_range(0..10usize);
            ls.push(c as u8);
            pixels.extend(render_example(&templates, c, &mut rng));
        }
        let (ip, lp) = (dir.join(images), dir.join(labels));
        write_idx(&ip, &[n, GLYPH_SIDE, GLYPH_SIDE], &pixels)?;
        write_idx(&lp, &[n], &ls)?;
        Ok((ip, lp))
    };
    let (train_images, train_labels) = write(
        n_train,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
    )?;
    let (test_images, test_labels) =
        write(n_test, "test-images-idx3-ubyte", "test-labels-idx1-ubyte")?;
    Ok(DatasetDescriptor::IdxImages {
        train_images,
        train_labels,
        test_images,
        test_labels,
        classes: 10,
    })
}

/// Three random strokes drawn as soft line segments on a 14×14 canvas.
fn glyph_template(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; GLYPH_SIDE * GLYPH_SIDE];
    let point = |rng: &mut ChaCha8Rng| (rng.gen_range(2.5..11.5), rng.gen_range(2.5..11.5));
    for _ in 0..3 {
        let (a, b) = (point(rng), point(rng));
        for y in 0..GLYPH_SIDE {
            for x in 0..GLYPH_SIDE {
                let d = segment_distance((x as f64, y as f64), a, b);
                let v = (-d * d / 1.2).exp();
                let p = &mut img[y * GLYPH_SIDE + x];
                *p = f64::max(*p, v);
            }
        }
    }
    img
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn bilinear(img: &[f64], x: f64, y: f64) -> f64 {
    let max = (GLYPH_SIDE - 1) as f64;
    if x < 0.0 || y < 0.0 || x > max || y > max {
        return 0.0;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(GLYPH_SIDE - 1), (y0 + 1).min(GLYPH_SIDE - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| img[yy * GLYPH_SIDE + xx];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
        + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

fn render_example(templates: &[Vec<f64>], class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let other = (class + rng.gen_range(1..templates.len())) % templates.len();
    let blend = rng.gen_range(0.0..0.45);
    let scale = rng.gen_range(0.85..1.15);
    let angle: f64 = rng.gen_range(-0.25..0.25);
    let (tx, ty) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let (sin, cos) = angle.sin_cos();
    let mid = (GLYPH_SIDE - 1) as f64 / 2.0;
    let mut out = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE);
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            // inverse transform into template coordinates
            let (px, py) = (x as f64 - mid - tx, y as f64 - mid - ty);
            let sx = (cos * px + sin * py) / scale + mid;
            let sy = (-sin * px + cos * py) / scale + mid;
            let v = (1.0 - blend) * bilinear(&templates[class], sx, sy)
                + blend * bilinear(&templates[other], sx, sy);
            let v = v + 0.15 * normal(rng);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
