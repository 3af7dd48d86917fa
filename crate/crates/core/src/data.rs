//! MNIST IDX ingestion and a seeded teacher-generator dataset.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::fsio::{read_text, write_atomic};
use crate::linalg::DenseMatrix;
use crate::network::{Activation, DenseLayer, DenseNet};
use crate::rng::{stream, Purpose};
use crate::sensing::SamplingMatrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Samples stored as rows, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    x: DenseMatrix,
    labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: DenseMatrix, labels: Option<Vec<u8>>) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::invalid("dataset", "needs at least one sample of positive length"));
        }
        if x.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("dataset", "values must lie in [0, 1]"));
        }
        if let Some(l) = &labels {
            check_len("labels", x.rows(), l.len())?;
        }
        Ok(Dataset {
            name: name.into(),
            x,
            labels,
        })
    }

    pub fn count(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn samples(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// `Φxᵢ` for every sample, as a `count x m` matrix.
    pub fn sensed(&self, phi: &SamplingMatrix) -> Result<DenseMatrix> {
        check_len("mask ambient dimension", self.dim(), phi.ambient_dim())?;
        Ok(self.x.select_columns(phi.selected()))
    }
}

/// Latent codes paired one-to-one with a dataset's samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    z: DenseMatrix,
}

impl LatentSet {
    pub fn new(z: DenseMatrix) -> Result<Self> {
        if z.rows() == 0 || z.cols() == 0 {
            return Err(Error::invalid("latent set", "is empty"));
        }
        Ok(LatentSet { z })
    }

    pub fn count(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn codes(&self) -> &DenseMatrix {
        &self.z
    }

    pub fn code(&self, i: usize) -> &[f64] {
        self.z.row(i)
    }

    /// Header `latents <count> <k>` then one code per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("latents {} {}\n", self.count(), self.dim());
        for i in 0..self.count() {
            for (j, v) in self.code(i).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let (count, k) = match header.as_slice() {
            ["latents", c, k] => (
                c.parse::<usize>().map_err(|e| err(1, format!("count: {e}")))?,
                k.parse::<usize>().map_err(|e| err(1, format!("dim: {e}")))?,
            ),
            _ => return Err(err(1, "expected `latents <count> <k>`".into())),
        };
        let mut data = Vec::with_capacity(count * k);
        for i in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| err(i + 2, format!("expected {count} codes, found {i}")))?;
            let before = data.len();
            for t in line.split_whitespace() {
                let v: f64 = t.parse().map_err(|e| err(i + 2, format!("`{t}`: {e}")))?;
                if !v.is_finite() {
                    return Err(err(i + 2, "non-finite value".into()));
                }
                data.push(v);
            }
            if data.len() - before != k {
                return Err(err(i + 2, format!("expected {k} values, found {}", data.len() - before)));
            }
        }
        LatentSet::new(DenseMatrix::new(count, k, data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?, path)
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: format!("file ends inside the header (needs {} bytes)", offset + 4),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file (and optionally its label file), scaling pixels
/// by 1/255 and keeping the first `limit` samples.
pub fn load_mnist_idx(images: &Path, labels: Option<&Path>, limit: Option<usize>) -> Result<Dataset> {
    let bytes = read_file(images)?;
    let idx_err = |offset: usize, reason: String| Error::Idx {
        path: images.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let magic = read_u32(&bytes, 0, images)?;
    if magic != IMAGE_MAGIC {
        return Err(idx_err(0, format!("bad magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = read_u32(&bytes, 4, images)? as usize;
    let rows = read_u32(&bytes, 8, images)? as usize;
    let cols = read_u32(&bytes, 12, images)? as usize;
    let dim = rows * cols;
    if count == 0 || dim == 0 {
        return Err(idx_err(4, format!("empty image set ({count} images of {rows}x{cols})")));
    }
    let needed = 16 + count * dim;
    if bytes.len() < needed {
        return Err(idx_err(
            bytes.len(),
            format!("truncated: header declares {count} images of {rows}x{cols} ({needed} bytes)"),
        ));
    }
    let keep = limit.map_or(count, |l| l.min(count));
    if keep == 0 {
        return Err(Error::invalid("limit", "must be at least 1"));
    }
    let pixels = bytes[16..16 + keep * dim].iter().map(|&b| b as f64 / 255.0).collect();
    let x = DenseMatrix::new(keep, dim, pixels)?;

    let labels = match labels {
        None => None,
        Some(path) => {
            let lb = read_file(path)?;
            let lerr = |offset: usize, reason: String| Error::Idx {
                path: path.to_path_buf(),
                offset: offset as u64,
                reason,
            };
            let magic = read_u32(&lb, 0, path)?;
            if magic != LABEL_MAGIC {
                return Err(lerr(0, format!("bad magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
            }
            let n = read_u32(&lb, 4, path)? as usize;
            if n != count {
                return Err(lerr(4, format!("label count {n} does not match image count {count}")));
            }
            if lb.len() < 8 + n {
                return Err(lerr(lb.len(), format!("truncated: header declares {n} labels")));
            }
            Some(lb[8..8 + keep].to_vec())
        }
    };
    let name = images
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, x, labels)
}

/// Fixed random teacher `x = sigmoid(A·tanh(B·z))` with zero biases.
#[derive(Clone, Debug)]
pub struct SyntheticTeacher {
    net: DenseNet,
    seed: u64,
}

impl SyntheticTeacher {
    /// Hidden width `2k`. `B` has N(0, 1/k) entries and `A` has N(0, 4/h)
    /// entries, which keeps the outputs spread over the sigmoid's range.
    pub fn new(k: usize, n: usize, seed: u64) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(Error::invalid("synthetic dims", format!("need 0 < k < n, got k={k}, n={n}")));
        }
        let h = 2 * k;
        let mut rng = stream(seed, Purpose::Data, 0);
        let b_dist = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("positive scale");
        let a_dist = Normal::new(0.0, (4.0 / h as f64).sqrt()).expect("positive scale");
        let b = DenseMatrix::from_fn(h, k, |_, _| b_dist.sample(&mut rng));
        let a = DenseMatrix::from_fn(n, h, |_, _| a_dist.sample(&mut rng));
        let net = DenseNet::new(vec![
            DenseLayer::new(b, vec![0.0; h], Activation::Tanh)?,
            DenseLayer::new(a, vec![0.0; n], Activation::Sigmoid)?,
        ])?;
        Ok(SyntheticTeacher { net, seed })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// `count` pairs with `z ~ N(0, I)` drawn from sub-stream `split`.
    pub fn sample(&self, count: usize, split: u64) -> Result<(Dataset, LatentSet)> {
        if count == 0 {
            return Err(Error::invalid("count", "must be at least 1"));
        }
        let mut rng = stream(self.seed, Purpose::Data, 1 + split);
        let k = self.net.input_dim();
        let z = DenseMatrix::from_fn(count, k, |_, _| StandardNormal.sample(&mut rng));
        let x = self.net.output_batch(&z)?;
        Ok((
            Dataset::new(format!("synthetic-{}", self.seed), x, None)?,
            LatentSet::new(z)?,
        ))
    }
}

/// Exact `(x, z)` pairs from a seeded [`SyntheticTeacher`].
pub fn synthetic_dataset(k: usize, n: usize, count: usize, seed: u64) -> Result<(Dataset, LatentSet)> {
    SyntheticTeacher::new(k, n, seed)?.sample(count, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, name: &str, header: &[u32], payload: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        for h in header {
            f.write_all(&h.to_be_bytes()).unwrap();
        }
        f.write_all(payload).unwrap();
        p
    }

    #[test]
    fn header_arithmetic_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..5 * 4).map(|i| (i * 12) as u8).collect();
        let img = write_idx(dir.path(), "img", &[IMAGE_MAGIC, 5, 2, 2], &payload);
        let lab = write_idx(dir.path(), "lab", &[LABEL_MAGIC, 5], &[3, 1, 4, 1, 5]);
        let d = load_mnist_idx(&img, Some(&lab), Some(3)).unwrap();
        assert_eq!((d.count(), d.dim()), (3, 4));
        assert_eq!(d.labels().unwrap(), &[3, 1, 4]);
        assert_eq!(d.sample(1)[0], 48.0 / 255.0);
        let all = load_mnist_idx(&img, None, None).unwrap();
        assert_eq!(all.count(), 5);
    }

    #[test]
    fn zero_image_is_zero_vector() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_idx(dir.path(), "img", &[IMAGE_MAGIC, 1, 28, 28], &[0; 784]);
        let d = load_mnist_idx(&img, None, None).unwrap();
        assert!(d.sample(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malformed_files_name_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write_idx(dir.path(), "bad", &[0x0000_0801, 1, 2, 2], &[0; 4]);
        assert!(matches!(load_mnist_idx(&bad, None, None), Err(Error::Idx { offset: 0, .. })));
        let short = write_idx(dir.path(), "short", &[IMAGE_MAGIC, 3, 2, 2], &[0; 7]);
        assert!(matches!(load_mnist_idx(&short, None, None), Err(Error::Idx { offset: 23, .. })));
        let stub = write_idx(dir.path(), "stub", &[IMAGE_MAGIC], &[]);
        assert!(matches!(load_mnist_idx(&stub, None, None), Err(Error::Idx { offset: 4, .. })));
        let img = write_idx(dir.path(), "img", &[IMAGE_MAGIC, 2, 1, 1], &[1, 2]);
        let lab = write_idx(dir.path(), "lab", &[LABEL_MAGIC, 3], &[0, 1, 2]);
        assert!(matches!(
            load_mnist_idx(&img, Some(&lab), None),
            Err(Error::Idx { offset: 4, .. })
        ));
        let missing = dir.path().join("missing");
        assert!(matches!(load_mnist_idx(&missing, None, None), Err(Error::Io { .. })));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let (a, za) = synthetic_dataset(3, 10, 1, 42).unwrap();
        let (b, zb) = synthetic_dataset(3, 10, 1, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(za, zb);
        let (c, _) = synthetic_dataset(3, 10, 1, 43).unwrap();
        assert_ne!(a, c);
        assert!(synthetic_dataset(5, 5, 1, 1).is_err());
    }

    #[test]
    fn synthetic_origin_maps_to_half() {
        let t = SyntheticTeacher::new(4, 12, 9).unwrap();
        assert!(t.net().output(&[0.0; 4]).unwrap().iter().all(|&v| v == 0.5));
        let (d, z) = t.sample(20, 0).unwrap();
        for i in 0..20 {
            let x = t.net().output(z.code(i)).unwrap();
            assert!(d.sample(i).iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn latent_round_trip() {
        let (_, z) = synthetic_dataset(3, 10, 4, 1).unwrap();
        let back = LatentSet::from_text(&z.to_text(), Path::new("z")).unwrap();
        assert_eq!(back, z);
        let text = z.to_text().replacen("latents 4", "latents 5", 1);
        assert!(matches!(
            LatentSet::from_text(&text, Path::new("z")),
            Err(Error::Parse { line: 6, .. })
        ));
    }
}
