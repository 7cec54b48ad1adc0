//! Dataset ingestion: IDX files (gzip handled transparently), CIFAR-10
//! binary batches, and the named datasets the CLI understands.
//!
//! All pixel bytes scale to [0, 1]; parsing is explicit about endianness so
//! loader output is bit-identical across platforms.

use std::io::Read;
use std::path::{Path, PathBuf};

use rst_core::{DataSplit, Tensor};

use crate::error::{Result, WorkbenchError};

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "RST_DATA_DIR";

/// A named dataset: train/test splits in [0,1], class count, input geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: DataSplit,
    pub test: DataSplit,
    pub classes: usize,
    pub input: (usize, usize, usize),
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| WorkbenchError::io(path, e))?;
    // Gzip is detected by magic, not extension.
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| WorkbenchError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Resolves `name[.gz]`, preferring the plain file.
fn resolve(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(WorkbenchError::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file missing"),
    ))
}

fn be_u32(bytes: &[u8], pos: usize, path: &Path) -> Result<u32> {
    let end = pos + 4;
    if end > bytes.len() {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: format!("truncated header: wanted 4 bytes, {} remain", bytes.len() - pos),
            offset: pos,
        });
    }
    Ok(u32::from_be_bytes(bytes[pos..end].try_into().expect("4 bytes")))
}

/// Parses an IDX image file (magic 0x00000803): big-endian dims, u8 pixels
/// scaled to [0, 1], shaped `[n, 1, rows, cols]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: format!("bad image magic {magic:#010x}, expected 0x00000803"),
            offset: 0,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() != expected {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: format!(
                "payload holds {} bytes but dims {n}x{rows}x{cols} need {expected}",
                payload.len()
            ),
            offset: 16,
        });
    }
    let data: Vec<rst_core::Real> = payload
        .iter()
        .map(|&b| b as rst_core::Real / 255.0)
        .collect();
    Tensor::new(&[n, 1, rows, cols], data).map_err(|e| WorkbenchError::Core {
        stage: "dataset",
        source: e,
    })
}

/// Parses an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: format!("bad label magic {magic:#010x}, expected 0x00000801"),
            offset: 0,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() != n {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: format!("payload holds {} labels but header says {n}", payload.len()),
            offset: 8,
        });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx_pair(dir: &Path, images: &str, labels: &str, classes: usize) -> Result<DataSplit> {
    let ipath = resolve(dir, images)?;
    let lpath = resolve(dir, labels)?;
    let tensor = parse_idx_images(&read_file(&ipath)?, &ipath)?;
    let labels = parse_idx_labels(&read_file(&lpath)?, &lpath)?;
    DataSplit::new(tensor, labels, classes).map_err(|e| WorkbenchError::Core {
        stage: "dataset",
        source: e,
    })
}

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<rst_core::Real>, Vec<usize>)> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: format!(
                "batch of {} bytes is not a whole number of {RECORD}-byte records",
                bytes.len()
            ),
            offset: bytes.len() - bytes.len() % RECORD,
        });
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as rst_core::Real / 255.0));
    }
    Ok((pixels, labels))
}

fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for batch in 1..=5 {
        let path = resolve(dir, &format!("data_batch_{batch}.bin"))?;
        let (p, l) = parse_cifar_batch(&read_file(&path)?, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let train = DataSplit::new(
        Tensor::new(&[labels.len(), 3, 32, 32], pixels).map_err(|e| WorkbenchError::Core {
            stage: "dataset",
            source: e,
        })?,
        labels,
        10,
    )
    .map_err(|e| WorkbenchError::Core {
        stage: "dataset",
        source: e,
    })?;

    let tpath = resolve(dir, "test_batch.bin")?;
    let (p, l) = parse_cifar_batch(&read_file(&tpath)?, &tpath)?;
    let test = DataSplit::new(
        Tensor::new(&[l.len(), 3, 32, 32], p).map_err(|e| WorkbenchError::Core {
            stage: "dataset",
            source: e,
        })?,
        l,
        10,
    )
    .map_err(|e| WorkbenchError::Core {
        stage: "dataset",
        source: e,
    })?;

    Ok(Dataset {
        name: "cifar10".into(),
        input: (3, 32, 32),
        classes: 10,
        train,
        test,
    })
}

fn limit(split: DataSplit, n: usize) -> Result<DataSplit> {
    if n == 0 || n >= split.len() {
        return Ok(split);
    }
    split.range(0, n).map_err(|e| WorkbenchError::Core {
        stage: "dataset",
        source: e,
    })
}

/// Loads a dataset by name from `root`. Known names: `desk-digits` (bundled
/// 8x8 handwritten digits), `mnist`, `fashion-mnist`, `cifar10`.
/// `train_limit`/`test_limit` of 0 keep the full split.
pub fn load(root: &Path, name: &str, train_limit: usize, test_limit: usize) -> Result<Dataset> {
    let ds = match name {
        "desk-digits" => {
            let dir = root.join("desk-digits");
            let train = load_idx_pair(
                &dir,
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                10,
            )?;
            let test = load_idx_pair(&dir, "test-images-idx3-ubyte", "test-labels-idx1-ubyte", 10)?;
            Dataset {
                name: name.into(),
                input: (1, 8, 8),
                classes: 10,
                train,
                test,
            }
        }
        "mnist" | "fashion-mnist" => {
            let dir = root.join(name);
            let train = load_idx_pair(
                &dir,
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                10,
            )?;
            let test = load_idx_pair(&dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10)?;
            Dataset {
                name: name.into(),
                input: (1, 28, 28),
                classes: 10,
                train,
                test,
            }
        }
        "cifar10" => {
            let mut ds = load_cifar10(&root.join("cifar-10-batches-bin"))?;
            ds.name = name.into();
            ds
        }
        other => return Err(WorkbenchError::UnknownDataset(other.into())),
    };
    Ok(Dataset {
        train: limit(ds.train, train_limit)?,
        test: limit(ds.test, test_limit)?,
        ..ds
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend(std::iter::repeat(fill).take((n * rows * cols) as usize));
        b
    }

    #[test]
    fn idx_header_shapes_tensor() {
        // The spec's canonical header: 10000 x 28 x 28 images.
        let bytes = idx_images(100, 28, 28, 7);
        let t = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        assert_eq!(t.shape(), &[100, 1, 28, 28]);
    }

    #[test]
    fn pixel_255_scales_to_one() {
        let bytes = idx_images(1, 2, 2, 255);
        let t = parse_idx_images(&bytes, Path::new("mem")).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let mut bytes = idx_images(4, 3, 3, 1);
        bytes.truncate(bytes.len() - 5);
        match parse_idx_images(&bytes, Path::new("mem")) {
            Err(WorkbenchError::BadFormat { what, offset, .. }) => {
                assert_eq!(offset, 16);
                assert!(what.contains("31") && what.contains("36"), "{what}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = idx_images(1, 2, 2, 0);
        bytes[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bytes, Path::new("mem")),
            Err(WorkbenchError::BadFormat { offset: 0, .. })
        ));
        // Image magic on the label parser is rejected too.
        let imgs = idx_images(1, 2, 2, 0);
        assert!(parse_idx_labels(&imgs, Path::new("mem")).is_err());
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = std::env::temp_dir().join(format!("rst-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bytes = idx_images(3, 2, 2, 128);
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        let gz = enc.finish().unwrap();
        // Note: gz extension present but detection is by magic.
        std::fs::write(dir.join("imgs.gz"), &gz).unwrap();
        let resolved = resolve(&dir, "imgs").unwrap();
        let t = parse_idx_images(&read_file(&resolved).unwrap(), &resolved).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2, 2]);
        assert!((t.data()[0] - 128.0 / 255.0).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cifar_record_arithmetic() {
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[0] = 3;
        bytes[3073] = 9;
        let (pixels, labels) = parse_cifar_batch(&bytes, Path::new("mem")).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(pixels.len(), 2 * 3072);
        let bad = vec![0u8; 3072];
        assert!(parse_cifar_batch(&bad, Path::new("mem")).is_err());
    }

    #[test]
    fn bundled_desk_digits_load() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
        let ds = load(&root, "desk-digits", 0, 0).unwrap();
        assert_eq!(ds.train.len(), 1500);
        assert_eq!(ds.test.len(), 297);
        assert_eq!(ds.train.images.shape(), &[1500, 1, 8, 8]);
        assert_eq!(ds.classes, 10);
        assert!(ds
            .train
            .images
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // Limits take deterministic prefixes.
        let small = load(&root, "desk-digits", 100, 50).unwrap();
        assert_eq!(small.train.len(), 100);
        assert_eq!(small.test.len(), 50);
        assert_eq!(
            small.train.images.data(),
            &ds.train.images.data()[..100 * 64]
        );
    }
}
