//! Dataset ingestion and synthesis: IDX image files, seeded synthetic
//! continuous and categorical generators, deterministic splits, and
//! reproducible batch iteration.

use crate::rng::{Rng, Stream};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Continuous samples live in `[0, 1]^D`; categorical samples hold class
/// ids in `[0, classes)` per position.
#[derive(Debug, Clone)]
pub enum Samples {
    Continuous(Vec<f64>),
    Categorical(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Samples,
    pub n: usize,
    /// Flattened sample dimension D.
    pub dim: usize,
    /// Class count for categorical data.
    pub classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.samples, Samples::Categorical(_))
    }

    /// Continuous rows for the given sample indices, stacked `[len, D]`.
    pub fn continuous_rows(&self, idx: &[usize]) -> Result<Vec<f64>> {
        match &self.samples {
            Samples::Continuous(data) => {
                let mut out = Vec::with_capacity(idx.len() * self.dim);
                for &i in idx {
                    out.extend_from_slice(&data[i * self.dim..(i + 1) * self.dim]);
                }
                Ok(out)
            }
            Samples::Categorical(_) => {
                Err(Error::Contract("continuous rows from a categorical dataset".into()))
            }
        }
    }

    /// Class-id rows for the given sample indices, stacked.
    pub fn categorical_rows(&self, idx: &[usize]) -> Result<Vec<usize>> {
        match &self.samples {
            Samples::Categorical(data) => {
                let mut out = Vec::with_capacity(idx.len() * self.dim);
                for &i in idx {
                    out.extend_from_slice(&data[i * self.dim..(i + 1) * self.dim]);
                }
                Ok(out)
            }
            Samples::Continuous(_) => {
                Err(Error::Contract("categorical rows from a continuous dataset".into()))
            }
        }
    }

    fn check_invariants(&self) -> Result<()> {
        let covered = self.train.len() + self.val.len() + self.test.len();
        if covered != self.n {
            return Err(Error::Contract(format!(
                "splits cover {covered} of {} samples",
                self.n
            )));
        }
        let mut seen = vec![false; self.n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if seen[i] {
                return Err(Error::Contract(format!("sample {i} appears in two splits")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

// ── IDX files ──────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("truncated IDX header at offset {offset}")));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse a big-endian IDX image file: magic 0x00000803, dims (N, rows,
/// cols), then raw bytes scaled to `[0, 1]` by /255.
pub fn read_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x} at offset 0, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX payload holds {} bytes, header promises {}",
            payload.len(),
            n * rows * cols
        )));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, n, rows, cols))
}

/// Parse a big-endian IDX label file: magic 0x00000801, dim (N), raw bytes.
pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x} at offset 0, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload holds {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Serialize pixel bytes as an IDX image file (inverse of
/// [`read_idx_images`], bit-exact round trip).
pub fn write_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Fraction of the tail of an MNIST-style training set reserved for
/// validation, by fixed rule rather than by random draw.
pub const MNIST_VAL_TAIL: usize = 10_000;

/// Load an IDX image file (plus optional labels, parsed but unused by
/// training) and split deterministically: the last 10,000 training rows
/// become the validation set when a separate test file is not supplied.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    test_images_path: Option<&Path>,
) -> Result<Dataset> {
    let bytes = std::fs::read(images_path)?;
    let (mut data, mut n, rows, cols) = read_idx_images(&bytes)?;
    if let Some(lp) = labels_path {
        let lbytes = std::fs::read(lp)?;
        let labels = read_idx_labels(&lbytes)?;
        if labels.len() != n {
            return Err(Error::Format(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
    }
    let train_n = n;
    let mut test = Vec::new();
    if let Some(tp) = test_images_path {
        let tbytes = std::fs::read(tp)?;
        let (tdata, tn, tr, tc) = read_idx_images(&tbytes)?;
        if (tr, tc) != (rows, cols) {
            return Err(Error::Format(format!(
                "test image shape {tr}x{tc} differs from train {rows}x{cols}"
            )));
        }
        data.extend(tdata);
        test = (n..n + tn).collect();
        n += tn;
    }
    let val_len = MNIST_VAL_TAIL.min(train_n / 6);
    let split_at = train_n - val_len;
    let ds = Dataset {
        samples: Samples::Continuous(data),
        n,
        dim: rows * cols,
        classes: 0,
        train: (0..split_at).collect(),
        val: (split_at..train_n).collect(),
        test,
    };
    ds.check_invariants()?;
    Ok(ds)
}

// ── synthetic generators ───────────────────────────────────────────────

/// Deterministic 80/10/10 split by index order.
fn split_fractions(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let train_end = n * 8 / 10;
    let val_end = train_end + (n - train_end) / 2;
    (
        (0..train_end).collect(),
        (train_end..val_end).collect(),
        (val_end..n).collect(),
    )
}

/// `n` images of `side x side` pixels, each the sum of 1-3 axis-aligned
/// Gaussian blobs at seeded positions, clamped to `[0, 1]`.
pub fn synth_continuous(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if n < 1 || side < 4 {
        return Err(Error::Contract(format!(
            "synth_continuous needs n >= 1 and side >= 4, got n={n} side={side}"
        )));
    }
    let mut rng = Rng::stream(seed, Stream::Data, 0);
    let dim = side * side;
    let mut data = vec![0.0; n * dim];
    for s in 0..n {
        let img = &mut data[s * dim..(s + 1) * dim];
        let blobs = 1 + rng.below(3);
        for _ in 0..blobs {
            let cx = rng.uniform() * side as f64;
            let cy = rng.uniform() * side as f64;
            let sx = side as f64 * (0.1 + 0.15 * rng.uniform());
            let sy = side as f64 * (0.1 + 0.15 * rng.uniform());
            let amp = 0.5 + 0.5 * rng.uniform();
            for py in 0..side {
                for px in 0..side {
                    let dx = (px as f64 - cx) / sx;
                    let dy = (py as f64 - cy) / sy;
                    img[py * side + px] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let (train, val, test) = split_fractions(n);
    let ds = Dataset {
        samples: Samples::Continuous(data),
        n,
        dim,
        classes: 0,
        train,
        val,
        test,
    };
    ds.check_invariants()?;
    Ok(ds)
}

/// `n` Voronoi label maps: `classes` seeded sites per image, every pixel
/// labeled by its nearest site (ties to the lowest site index).
pub fn synth_categorical(n: usize, side: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=256).contains(&classes) {
        return Err(Error::Contract(format!(
            "synth_categorical needs 2 <= classes <= 256, got {classes}"
        )));
    }
    if n < 1 || side < 4 {
        return Err(Error::Contract(format!(
            "synth_categorical needs n >= 1 and side >= 4, got n={n} side={side}"
        )));
    }
    let mut rng = Rng::stream(seed, Stream::Data, 1);
    let dim = side * side;
    let mut data = vec![0usize; n * dim];
    for s in 0..n {
        let sites: Vec<(f64, f64)> = (0..classes)
            .map(|_| (rng.uniform() * side as f64, rng.uniform() * side as f64))
            .collect();
        let img = &mut data[s * dim..(s + 1) * dim];
        for py in 0..side {
            for px in 0..side {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, &(sx, sy)) in sites.iter().enumerate() {
                    let d = (px as f64 - sx).powi(2) + (py as f64 - sy).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                img[py * side + px] = best;
            }
        }
    }
    let (train, val, test) = split_fractions(n);
    let ds = Dataset {
        samples: Samples::Categorical(data),
        n,
        dim,
        classes,
        train,
        val,
        test,
    };
    ds.check_invariants()?;
    Ok(ds)
}

// ── batching ───────────────────────────────────────────────────────────

/// Seeded per-epoch shuffle of a split into batches; the final short batch
/// is kept. The sequence is a pure function of `(seed, epoch)`.
pub fn batches(
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    master_seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let idx = ds.split(split);
    if idx.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    let mut rng = Rng::stream(master_seed, Stream::Shuffle, epoch);
    let perm = rng.permutation(idx.len());
    let shuffled: Vec<usize> = perm.into_iter().map(|p| idx[p]).collect();
    Ok(shuffled.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Write a continuous dataset's pixels (rounded back to bytes) as IDX.
/// Exists for round-trip verification and for exporting fixtures.
pub fn dataset_to_idx_bytes(ds: &Dataset, side: usize) -> Result<Vec<u8>> {
    match &ds.samples {
        Samples::Continuous(data) => {
            let pixels: Vec<u8> =
                data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            Ok(write_idx_images(&pixels, ds.n, side, side))
        }
        Samples::Categorical(_) => {
            Err(Error::Contract("IDX export of a categorical dataset".into()))
        }
    }
}

/// Convenience for tests: write IDX bytes to a file.
pub fn write_idx_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Convenience: read a whole file.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_image_fixture_parses_to_scaled_pixels() {
        // magic 0x00000803, dims (1, 2, 2), bytes [0, 128, 255, 64]
        let bytes = write_idx_images(&[0, 128, 255, 64], 1, 2, 2);
        let (data, n, rows, cols) = read_idx_images(&bytes).unwrap();
        assert_eq!((n, rows, cols), (1, 2, 2));
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (g, w) in data.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        // Quoted to 5 decimals: [0, 0.50196, 1, 0.25098]
        assert!((data[1] - 0.50196).abs() < 1e-5);
        assert!((data[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn idx_label_fixture() {
        let bytes = write_idx_labels(&[7]);
        assert_eq!(read_idx_labels(&bytes).unwrap(), vec![7]);
    }

    #[test]
    fn idx_bad_magic_is_a_format_error_naming_the_offset() {
        let mut bytes = write_idx_images(&[0, 0, 0, 0], 1, 2, 2);
        bytes[3] = 0x99;
        match read_idx_images(&bytes) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("magic"), "{msg}");
                assert!(msg.contains("offset 0"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_is_a_format_error() {
        let mut bytes = write_idx_images(&[1, 2, 3, 4], 1, 2, 2);
        bytes.pop();
        assert!(matches!(read_idx_images(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn idx_round_trip_is_bit_identical() {
        let ds = synth_continuous(10, 8, 3).unwrap();
        let bytes = dataset_to_idx_bytes(&ds, 8).unwrap();
        let (data, n, rows, cols) = read_idx_images(&bytes).unwrap();
        let again = write_idx_images(
            &data.iter().map(|&v| (v * 255.0).round() as u8).collect::<Vec<_>>(),
            n,
            rows,
            cols,
        );
        assert_eq!(bytes, again);
    }

    #[test]
    fn synth_continuous_is_seed_deterministic_and_bounded() {
        let a = synth_continuous(20, 8, 7).unwrap();
        let b = synth_continuous(20, 8, 7).unwrap();
        let c = synth_continuous(20, 8, 8).unwrap();
        let (Samples::Continuous(av), Samples::Continuous(bv), Samples::Continuous(cv)) =
            (&a.samples, &b.samples, &c.samples)
        else {
            unreachable!()
        };
        assert!(av.iter().zip(bv).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(av.iter().zip(cv).any(|(x, y)| x != y));
        assert!(av.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_categorical_labels_in_range_and_contract_checked() {
        let ds = synth_categorical(5, 8, 4, 1).unwrap();
        let Samples::Categorical(v) = &ds.samples else { unreachable!() };
        assert!(v.iter().all(|&c| c < 4));
        assert!(synth_categorical(5, 8, 1, 1).is_err());
    }

    #[test]
    fn voronoi_classes_form_connected_regions() {
        // Voronoi cells are convex in the plane; rasterization onto a
        // coarse grid occasionally splits a sliver cell, so connectivity is
        // checked statistically over 100 seeds.
        let side = 12;
        let mut present = 0usize;
        let mut connected = 0usize;
        for seed in 0..100u64 {
            let ds = synth_categorical(1, side, 5, seed).unwrap();
            let Samples::Categorical(img) = &ds.samples else { unreachable!() };
            for class in 0..5usize {
                let mask: Vec<bool> = img.iter().map(|&c| c == class).collect();
                let total = mask.iter().filter(|&&m| m).count();
                if total == 0 {
                    continue;
                }
                present += 1;
                // Flood fill from the first pixel of the class.
                let start = mask.iter().position(|&m| m).unwrap();
                let mut seen = vec![false; mask.len()];
                let mut stack = vec![start];
                seen[start] = true;
                let mut reached = 0;
                while let Some(p) = stack.pop() {
                    reached += 1;
                    let (x, y) = (p % side, p / side);
                    let mut push = |q: usize| {
                        if mask[q] && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    };
                    if x > 0 {
                        push(p - 1);
                    }
                    if x + 1 < side {
                        push(p + 1);
                    }
                    if y > 0 {
                        push(p - side);
                    }
                    if y + 1 < side {
                        push(p + side);
                    }
                }
                if reached == total {
                    connected += 1;
                }
            }
        }
        assert!(present >= 490, "classes almost always present, got {present}");
        let rate = connected as f64 / present as f64;
        assert!(rate >= 0.95, "connectivity rate {rate}");
    }

    #[test]
    fn batches_partition_the_split_and_are_reproducible() {
        let ds = synth_continuous(50, 8, 2).unwrap();
        let b1 = batches(&ds, Split::Train, 8, 11, 3).unwrap();
        let b2 = batches(&ds, Split::Train, 8, 11, 3).unwrap();
        assert_eq!(b1, b2);
        let b3 = batches(&ds, Split::Train, 8, 11, 4).unwrap();
        assert_ne!(b1, b3);

        let mut all: Vec<usize> = b1.into_iter().flatten().collect();
        all.sort_unstable();
        let mut want = ds.train.clone();
        want.sort_unstable();
        assert_eq!(all, want);

        // batch_size >= split size -> one batch with every index once.
        let single = batches(&ds, Split::Val, 1000, 11, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), ds.val.len());
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = synth_continuous(25, 8, 0).unwrap();
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 25);
        assert!(ds.train.len() >= 19);
        assert!(!ds.val.is_empty());
        assert!(!ds.test.is_empty());
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut ds = synth_continuous(10, 8, 0).unwrap();
        ds.val.clear();
        assert!(batches(&ds, Split::Val, 4, 0, 0).is_err());
    }
}
