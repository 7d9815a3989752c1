//! Readers and writers for on-disk image corpora: IDX (MNIST layout) and the
//! CIFAR-10 binary batches. Files are expected decompressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Raw IDX image file: returns (rows, cols, pixel bytes per image in order).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {:#010x}",
            path.display(),
            magic
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let rows = read_u32_be(&mut r)? as usize;
    let cols = read_u32_be(&mut r)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    r.read_exact(&mut pixels).map_err(|e| {
        Error::format(format!("{}: truncated image payload: {}", path.display(), e))
    })?;
    Ok((rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32_be(&mut r)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {:#010x}",
            path.display(),
            magic
        )));
    }
    let n = read_u32_be(&mut r)? as usize;
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels).map_err(|e| {
        Error::format(format!("{}: truncated label payload: {}", path.display(), e))
    })?;
    Ok(labels)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::input("pixel buffer is not a whole number of images"));
    }
    let n = pixels.len() / (rows * cols);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(n as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

fn idx_pair_to_dataset(
    name: &str,
    images: &Path,
    labels: &Path,
    classes: usize,
) -> Result<Dataset> {
    let (rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if pixels.len() != raw_labels.len() * rows * cols {
        return Err(Error::format(format!(
            "{}: {} images but {} labels",
            images.display(),
            pixels.len() / (rows * cols),
            raw_labels.len()
        )));
    }
    let f: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let l: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    Dataset::new(name, (1, rows, cols), classes, f, l)
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Loads the standard four-file MNIST layout from `dir` (either the
/// `-idx3-ubyte` or `.idx3-ubyte` spelling). Pixels land in [0, 1].
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let tri = first_existing(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])
        .ok_or_else(|| Error::format(format!("{}: no train image file", dir.display())))?;
    let trl = first_existing(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])
        .ok_or_else(|| Error::format(format!("{}: no train label file", dir.display())))?;
    let tei = first_existing(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])
        .ok_or_else(|| Error::format(format!("{}: no test image file", dir.display())))?;
    let tel = first_existing(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])
        .ok_or_else(|| Error::format(format!("{}: no test label file", dir.display())))?;
    Ok((
        idx_pair_to_dataset("mnist_train", &tri, &trl, 10)?,
        idx_pair_to_dataset("mnist_test", &tei, &tel, 10)?,
    ))
}

/// One CIFAR-10 binary batch: 3073-byte records, label then RGB planes.
pub fn read_cifar_batch(path: &Path, pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    const REC: usize = 3073;
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.len() % REC != 0 {
        return Err(Error::format(format!(
            "{}: size {} is not a whole number of 3073-byte records",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(REC) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(format!("{}: label byte {}", path.display(), label)));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

pub fn write_cifar_batch(path: &Path, images: &[[u8; 3072]], labels: &[u8]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::input("image/label count mismatch"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (img, &l) in images.iter().zip(labels) {
        w.write_all(&[l])?;
        w.write_all(img)?;
    }
    Ok(())
}

/// Loads the five CIFAR-10 training batches plus the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        read_cifar_batch(&dir.join(format!("data_batch_{}.bin", i)), &mut pixels, &mut labels)?;
    }
    let train = Dataset::new("cifar10_train", (3, 32, 32), 10, pixels, labels)?;
    let mut tp = Vec::new();
    let mut tl = Vec::new();
    read_cifar_batch(&dir.join("test_batch.bin"), &mut tp, &mut tl)?;
    let test = Dataset::new("cifar10_test", (3, 32, 32), 10, tp, tl)?;
    Ok((train, test))
}

/// Root directory for real corpora, from `FEDLEAK_DATA_DIR`.
pub fn data_dir() -> Option<PathBuf> {
    std::env::var_os("FEDLEAK_DATA_DIR").map(PathBuf::from)
}

fn try_dirs(root: &Path, subdirs: &[&str]) -> Vec<PathBuf> {
    std::iter::once(root.to_path_buf())
        .chain(subdirs.iter().map(|s| root.join(s)))
        .collect()
}

/// Best-effort MNIST discovery under `FEDLEAK_DATA_DIR`; `None` when the
/// variable is unset or no complete copy is found.
pub fn try_load_mnist() -> Option<(Dataset, Dataset)> {
    let root = data_dir()?;
    try_dirs(&root, &["mnist", "MNIST/raw", "MNIST"])
        .iter()
        .find_map(|d| load_mnist(d).ok())
}

/// Best-effort CIFAR-10 discovery under `FEDLEAK_DATA_DIR`.
pub fn try_load_cifar10() -> Option<(Dataset, Dataset)> {
    let root = data_dir()?;
    try_dirs(&root, &["cifar10", "cifar-10-batches-bin"])
        .iter()
        .find_map(|d| load_cifar10(d).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn idx_roundtrip_preserves_bytes() {
        let dir = tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11 % 256) as u8).collect();
        let img_path = dir.path().join("imgs");
        write_idx_images(&img_path, 3, 4, &pixels).unwrap();
        let (rows, cols, back) = read_idx_images(&img_path).unwrap();
        assert_eq!((rows, cols), (3, 4));
        assert_eq!(back, pixels);

        let labels = vec![0u8, 5, 9];
        let lab_path = dir.path().join("labels");
        write_idx_labels(&lab_path, &labels).unwrap();
        assert_eq!(read_idx_labels(&lab_path).unwrap(), labels);
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_labels(&path, &[1, 2, 3]).unwrap();
        let err = read_idx_images(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{}", err);
    }

    #[test]
    fn mnist_layout_loads_and_scales() {
        let dir = tempdir().unwrap();
        let n = 4usize;
        let pix: Vec<u8> = (0..n * 28 * 28).map(|i| (i % 256) as u8).collect();
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), 28, 28, &pix).unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[0, 1, 2, 3]).unwrap();
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), 28, 28, &pix[..28 * 28]).unwrap();
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[7]).unwrap();
        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 1);
        assert_eq!(train.input, (1, 28, 28));
        assert_eq!(train.image(0)[255], 255.0 / 255.0);
        assert_eq!(test.label(0), 7);
    }

    #[test]
    fn cifar_roundtrip() {
        let dir = tempdir().unwrap();
        let mut img = [0u8; 3072];
        for (i, b) in img.iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        for i in 1..=5 {
            write_cifar_batch(&dir.path().join(format!("data_batch_{}.bin", i)), &[img], &[i as u8])
                .unwrap();
        }
        write_cifar_batch(&dir.path().join("test_batch.bin"), &[img, img], &[0, 9]).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(test.len(), 2);
        assert_eq!(train.input, (3, 32, 32));
        assert_eq!(train.label(2), 3);
        assert_eq!(train.image(0)[10], 10.0 / 255.0);
    }

    #[test]
    fn truncated_cifar_batch_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        std::fs::write(&path, vec![0u8; 3072]).unwrap();
        let mut p = Vec::new();
        let mut l = Vec::new();
        assert!(read_cifar_batch(&path, &mut p, &mut l).is_err());
    }
}
