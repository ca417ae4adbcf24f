//! Datasets and on-disk formats: IDX (MNIST), synthetic Gaussian blobs,
//! metrics CSV, model checkpoints and per-sample gradient exports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Dense, Label, Model, ModelSpec, OutputHead};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// Labels are `+1` / `-1`.
    Binary,
    /// Labels are class indices `0..k`.
    Classes(usize),
}

impl LabelSpace {
    fn contains(self, y: Label) -> bool {
        match self {
            LabelSpace::Binary => y == 1 || y == -1,
            LabelSpace::Classes(k) => y >= 0 && (y as usize) < k,
        }
    }
}

/// Original class → new label, for relabeled subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub pairs: Vec<(i64, Label)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Array2<f64>,
    labels: Vec<Label>,
    label_space: LabelSpace,
    class_map: Option<ClassMap>,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<Label>, label_space: LabelSpace) -> Result<Self> {
        if images.nrows() == 0 {
            return Err(Error::arg("dataset", "must contain at least one sample"));
        }
        if images.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.nrows(),
                labels: labels.len(),
            });
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("dataset", "pixels must lie in [0, 1]"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| !label_space.contains(y)) {
            return Err(Error::InvalidLabel {
                label: bad,
                context: "dataset label space",
            });
        }
        Ok(Self {
            images,
            labels,
            label_space,
            class_map: None,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "image shape",
                expected: self.dim(),
                actual: rows * cols,
            });
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn images(&self) -> &Array2<f64> {
        &self.images
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn class_map(&self) -> Option<&ClassMap> {
        self.class_map.as_ref()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::arg("dataset", "selection is empty"));
        }
        let images = self.images.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            images,
            labels,
            label_space: self.label_space,
            class_map: self.class_map.clone(),
            image_shape: self.image_shape,
        })
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Zero-pads square-ish images symmetrically to `pad_to × pad_to`.
    pub fn pad_to(&self, pad_to: usize) -> Result<Dataset> {
        let (rows, cols) = self
            .image_shape
            .ok_or_else(|| Error::arg("pad_to", "dataset has no image shape"))?;
        if pad_to < rows || pad_to < cols {
            return Err(Error::arg(
                "pad_to",
                format!("{pad_to} is smaller than the {rows}x{cols} images"),
            ));
        }
        if pad_to == rows && pad_to == cols {
            return Ok(self.clone());
        }
        let top = (pad_to - rows) / 2;
        let left = (pad_to - cols) / 2;
        let n = self.len();
        let mut out = Array2::zeros((n, pad_to * pad_to));
        for (src, mut dst) in self.images.rows().into_iter().zip(out.rows_mut()) {
            for r in 0..rows {
                let from = src.slice(s![r * cols..(r + 1) * cols]);
                let start = (r + top) * pad_to + left;
                dst.slice_mut(s![start..start + cols]).assign(&from);
            }
        }
        Ok(Dataset {
            images: out,
            labels: self.labels.clone(),
            label_space: self.label_space,
            class_map: self.class_map.clone(),
            image_shape: Some((pad_to, pad_to)),
        })
    }
}

/// Raw IDX image file contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count · rows · cols` bytes, row-major per image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len().checked_div(self.rows * self.cols).unwrap_or(0)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok((0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let dims = read_header(path, &bytes, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let dims = read_header(path, &bytes, IDX_LABELS_MAGIC, 1)?;
    let expected = 8 + dims[0];
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        buf.write_u32::<BigEndian>(v).map_err(|e| Error::io(path, e))?;
    }
    buf.extend_from_slice(&images.pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        buf.write_u32::<BigEndian>(v).map_err(|e| Error::io(path, e))?;
    }
    buf.extend_from_slice(labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image/label pair; pixels are scaled by `1/255`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count(),
            labels: labels.len(),
        });
    }
    let d = images.rows * images.cols;
    let pixels = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let matrix = Array2::from_shape_vec((labels.len(), d), pixels)
        .map_err(|e| Error::arg("idx", e.to_string()))?;
    let classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    Dataset::new(
        matrix,
        labels.into_iter().map(Label::from).collect(),
        LabelSpace::Classes(classes),
    )?
    .with_image_shape(images.rows, images.cols)
}

/// Standard MNIST file names under `dir`.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(Error::MissingData(format!("{} not found", p.display())));
        }
    }
    load_idx(images, labels)
}

/// Keeps classes `class_a` (→ `+1`) and `class_b` (→ `-1`) and zero-pads the
/// images to `pad_to × pad_to`.
pub fn select_binary_task(ds: &Dataset, class_a: i64, class_b: i64, pad_to: usize) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::arg("classes", "class_a and class_b must differ"));
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let (mut na, mut nb) = (0usize, 0usize);
    for (i, &y) in ds.labels().iter().enumerate() {
        if y == class_a {
            indices.push(i);
            labels.push(1);
            na += 1;
        } else if y == class_b {
            indices.push(i);
            labels.push(-1);
            nb += 1;
        }
    }
    if na == 0 {
        return Err(Error::EmptyClass(class_a));
    }
    if nb == 0 {
        return Err(Error::EmptyClass(class_b));
    }
    let mut subset = ds.select(&indices)?;
    subset.labels = labels;
    subset.label_space = LabelSpace::Binary;
    subset.class_map = Some(ClassMap {
        pairs: vec![(class_a, 1), (class_b, -1)],
    });
    if subset.image_shape.is_some() {
        subset.pad_to(pad_to)
    } else {
        Ok(subset)
    }
}

/// Two unit-covariance Gaussians at `±(separation/2)·e₁`, mapped into `[0, 1]`
/// by `x ↦ 1/2 + x/(separation + 8)` and clipped. The `+` blob is labeled `+1`.
pub fn synthetic_blobs(seed: u64, n_per_class: usize, d: usize, separation: f64) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::arg("d", "must be >= 1"));
    }
    if n_per_class == 0 {
        return Err(Error::arg("n_per_class", "must be >= 1"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::arg("separation", format!("must be finite and > 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (separation + 8.0);
    let n = 2 * n_per_class;
    let mut images = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in images.rows_mut().into_iter().enumerate() {
        let y: Label = if i < n_per_class { 1 } else { -1 };
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let center = if j == 0 { 0.5 * separation * y as f64 } else { 0.0 };
            *v = (0.5 + (center + z) * scale).clamp(0.0, 1.0);
        }
        labels.push(y);
    }
    Dataset::new(images, labels, LabelSpace::Binary)
}

/// One metrics CSV row. Optional fields serialize as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub method: String,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: f64,
    pub std_acc: f64,
    pub adv_acc: f64,
    pub mean_mu: f64,
    pub mean_phi: f64,
    pub mean_lambda_star: Option<f64>,
    pub lr: f64,
    pub branch_projected: usize,
    pub branch_standard: usize,
    pub branch_fallback: usize,
}

pub const METRICS_HEADER: &str = "run_id,epoch,method,lambda,gamma,delta,std_acc,adv_acc,mean_mu,mean_phi,mean_lambda_star,lr,branch_projected,branch_standard,branch_fallback";

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(METRICS_HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CAAT";
const CHECKPOINT_VERSION: u16 = 1;

/// `"CAAT"`, u16 version, u16 layer count, per-layer u32 `(out, in)`, then
/// parameters as little-endian f64 in canonical order.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let spec = model.spec();
    let params = model.to_params();
    let mut buf = Vec::with_capacity(8 + 8 * spec.num_layers() + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.num_layers() as u16).to_le_bytes());
    for (out, inp) in spec.layer_shapes() {
        buf.extend_from_slice(&(out as u32).to_le_bytes());
        buf.extend_from_slice(&(inp as u32).to_le_bytes());
    }
    for v in params.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes a checkpoint. The format does not store the hidden activation, so
/// the caller supplies it; a final width of 1 means a single-logit head.
pub fn decode_checkpoint(bytes: &[u8], activation: Activation) -> Result<Model> {
    let mut cur = std::io::Cursor::new(bytes);
    let short = |_| Error::BadCheckpoint("truncated header".into());
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut cur, &mut magic).map_err(short)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint(format!("bad magic {magic:?}")));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(short)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let n_layers = cur.read_u16::<LittleEndian>().map_err(short)? as usize;
    if n_layers == 0 {
        return Err(Error::BadCheckpoint("zero layers".into()));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let out = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        let inp = cur.read_u32::<LittleEndian>().map_err(short)? as usize;
        shapes.push((out, inp));
    }
    for w in shapes.windows(2) {
        if w[0].0 != w[1].1 {
            return Err(Error::BadCheckpoint(format!(
                "layer widths do not chain: {:?} then {:?}",
                w[0], w[1]
            )));
        }
    }
    let mut dims = vec![shapes[0].1];
    dims.extend(shapes.iter().map(|s| s.0));
    let head = if dims[dims.len() - 1] == 1 {
        OutputHead::SingleLogit
    } else {
        OutputHead::MultiLogit
    };
    let spec = ModelSpec::new(dims, activation, head)?;
    let body = &bytes[cur.position() as usize..];
    let expected = 8 * spec.param_count();
    if body.len() != expected {
        return Err(Error::BadCheckpoint(format!(
            "expected {expected} parameter bytes, found {}",
            body.len()
        )));
    }
    let mut values = body.chunks_exact(8).map(LittleEndian::read_f64);
    let mut layers = Vec::with_capacity(n_layers);
    for &(out, inp) in &shapes {
        let w: Vec<f64> = values.by_ref().take(out * inp).collect();
        let b: Vec<f64> = values.by_ref().take(out).collect();
        layers.push(Dense {
            weights: Array2::from_shape_vec((out, inp), w)
                .map_err(|e| Error::BadCheckpoint(e.to_string()))?,
            bias: Array1::from(b),
        });
    }
    Model::from_layers(spec, layers, 0)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>, activation: Activation) -> Result<Model> {
    decode_checkpoint(&read_bytes(path.as_ref())?, activation)
}

/// Which gradient a row of the per-sample export holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientKind {
    Standard,
    Adversarial,
}

/// Writes per-sample gradients as `sample,label,kind,g0,…`; `kind` is `c`
/// for the standard gradient and `a` for the adversarial one.
pub fn write_gradient_csv(
    path: impl AsRef<Path>,
    labels: &[Label],
    g_c: &Array2<f64>,
    g_a: &Array2<f64>,
) -> Result<()> {
    let path = path.as_ref();
    if g_c.dim() != g_a.dim() || g_c.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient export",
            expected: labels.len(),
            actual: g_c.nrows(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "sample,label,kind").map_err(io)?;
    for j in 0..g_c.ncols() {
        write!(w, ",g{j}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (i, &y) in labels.iter().enumerate() {
        for (kind, rows) in [(GradientKind::Standard, g_c), (GradientKind::Adversarial, g_a)] {
            let tag = match kind {
                GradientKind::Standard => "c",
                GradientKind::Adversarial => "a",
            };
            write!(w, "{i},{y},{tag}").map_err(io)?;
            for v in rows.row(i) {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
