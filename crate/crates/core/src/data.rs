//! MNIST (IDX), CIFAR-10 (binary batches) and MultiMNIST synthesis.
//!
//! Pixels are kept as bytes and converted to `[0, 1]` floats on access, so
//! a full training split fits comfortably in memory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const MULTIMNIST_CANVAS: usize = 36;
pub const MULTIMNIST_MAX_SHIFT: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One or two class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelSet {
    classes: [u8; 2],
    len: u8,
}

impl LabelSet {
    pub fn single(class: u8) -> Self {
        LabelSet {
            classes: [class, class],
            len: 1,
        }
    }

    /// Two distinct classes.
    pub fn pair(a: u8, b: u8) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidArgument(format!("label pair must be distinct, got {a} twice")));
        }
        Ok(LabelSet {
            classes: [a, b],
            len: 2,
        })
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes().iter().any(|&c| c as usize == class)
    }

    pub fn targets(&self, num_classes: usize) -> Vec<bool> {
        (0..num_classes).map(|k| self.contains(k)).collect()
    }

    pub fn first(&self) -> u8 {
        self.classes[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<LabelSet>,
}

impl Dataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        split: Split,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<LabelSet>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            split,
            channels,
            height,
            width,
            num_classes,
            pixels,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.pixels.len() != self.labels.len() * self.image_len() {
            return Err(Error::InvalidArgument(format!(
                "{}: {} pixel bytes for {} images of {} bytes",
                self.name,
                self.pixels.len(),
                self.labels.len(),
                self.image_len()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|l| l.classes().iter().any(|&c| c as usize >= self.num_classes)) {
            return Err(Error::InvalidArgument(format!(
                "{}: label {:?} outside [0, {})",
                self.name,
                bad.classes(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as a `C×H×W` tensor scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.raw_image(i).iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new(self.image_shape().to_vec(), data).expect("image shape matches stored length")
    }

    /// All images stacked as `N×C×H×W`.
    pub fn images(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![self.len(), c, h, w], data).expect("stored length matches shape")
    }

    pub fn label(&self, i: usize) -> LabelSet {
        self.labels[i]
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                what: "dataset",
                index: bad,
                len: self.len(),
            });
        }
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.raw_image(i));
        }
        Dataset::new(
            self.name.clone(),
            self.split,
            self.channels,
            self.height,
            self.width,
            self.num_classes,
            pixels,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// The first `n` items of each class (by first label), in original order.
    pub fn first_per_class(&self, n: usize) -> Result<Dataset> {
        let mut counts = vec![0usize; self.num_classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i].first() as usize;
                counts[c] += 1;
                counts[c] <= n
            })
            .collect();
        self.subset(&idx)
    }

    /// `total` items drawn round-robin across classes so every class is
    /// represented as evenly as the data allows.
    pub fn stratified(&self, total: usize) -> Result<Dataset> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for i in 0..self.len() {
            by_class[self.labels[i].first() as usize].push(i);
        }
        let mut idx = Vec::with_capacity(total);
        let mut round = 0;
        while idx.len() < total.min(self.len()) {
            for class in &by_class {
                if let Some(&i) = class.get(round) {
                    if idx.len() < total {
                        idx.push(i);
                    }
                }
            }
            round += 1;
        }
        idx.sort_unstable();
        self.subset(&idx)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingData(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(Error::format("IDX", path, "file shorter than the 16-byte image header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format("IDX", path, format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let expected = n * rows * cols;
    if bytes.len() - 16 < expected {
        return Err(Error::format(
            "IDX",
            path,
            format!("truncated: header promises {expected} pixel bytes, found {}", bytes.len() - 16),
        ));
    }
    Ok((n, rows, cols, bytes[16..16 + expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::format("IDX", path, "file shorter than the 8-byte label header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format("IDX", path, format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 < n {
        return Err(Error::format("IDX", path, format!("truncated: header promises {n} labels, found {}", bytes.len() - 8)));
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn mnist_files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads one MNIST split from a directory holding the four IDX files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img_path, lbl_path) = mnist_files(dir, split);
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read_file(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::format(
            "IDX",
            lbl_path,
            format!("{} labels for {n} images in {}", labels.len(), img_path.display()),
        ));
    }
    Dataset::new(
        "mnist",
        split,
        1,
        rows,
        cols,
        10,
        pixels,
        labels.into_iter().map(LabelSet::single).collect(),
    )
}

pub fn cifar10_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    let base = if dir.join("cifar-10-batches-bin").is_dir() {
        dir.join("cifar-10-batches-bin")
    } else {
        dir.to_path_buf()
    };
    match split {
        Split::Train => (1..=5).map(|b| base.join(format!("data_batch_{b}.bin"))).collect(),
        Split::Test => vec![base.join("test_batch.bin")],
    }
}

/// Parses CIFAR-10 binary records (label byte, then 1024 R, 1024 G, 1024 B).
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            "CIFAR-10",
            path,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (k, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format("CIFAR-10", path, format!("record {k} has label {}", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in cifar10_files(dir, split) {
        let (l, p) = parse_cifar10(&read_file(&path)?, &path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    Dataset::new(
        "cifar10",
        split,
        3,
        32,
        32,
        10,
        pixels,
        labels.into_iter().map(LabelSet::single).collect(),
    )
}

/// Copies a `C×h×w` image onto a zeroed `C×H×W` canvas at `(top, left)`,
/// merging by pixelwise max.
fn paste_max(src: &[u8], channels: usize, h: usize, w: usize, canvas: &mut [u8], size: usize, top: usize, left: usize) {
    for c in 0..channels {
        for y in 0..h {
            let row = &src[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = &mut canvas[(c * size + top + y) * size + left..][..w];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d = (*d).max(s);
            }
        }
    }
}

/// Overlays pairs of digits of different classes on a 36×36 canvas.
///
/// For every source image, `per_image` items are produced: the source digit
/// plus a randomly drawn digit of another class, each shifted independently
/// by up to 4 pixels in each direction and merged by pixelwise max.
pub fn synthesize_multimnist(mnist: &Dataset, per_image: usize, seed: u64) -> Result<Dataset> {
    if per_image == 0 {
        return Err(Error::InvalidArgument("per_image must be at least 1".into()));
    }
    if mnist.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w, ch) = (mnist.height, mnist.width, mnist.channels);
    let margin = MULTIMNIST_MAX_SHIFT as usize;
    if h + 2 * margin != MULTIMNIST_CANVAS || w + 2 * margin != MULTIMNIST_CANVAS {
        return Err(Error::InvalidArgument(format!("MultiMNIST needs 28x28 digits, got {h}x{w}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); mnist.num_classes];
    for i in 0..mnist.len() {
        by_class[mnist.label(i).first() as usize].push(i);
    }
    if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(Error::InvalidArgument("MultiMNIST needs digits of at least two classes".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = MULTIMNIST_CANVAS;
    let total = mnist.len() * per_image;
    let mut pixels = vec![0u8; total * ch * size * size];
    let mut labels = Vec::with_capacity(total);
    let mut offset = || (rng.random_range(-MULTIMNIST_MAX_SHIFT..=MULTIMNIST_MAX_SHIFT) + MULTIMNIST_MAX_SHIFT) as usize;
    let mut item = 0;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for i in 0..mnist.len() {
        let class = mnist.label(i).first();
        for _ in 0..per_image {
            let other = loop {
                let c = pick_rng.random_range(0..mnist.num_classes);
                if c != class as usize && !by_class[c].is_empty() {
                    break c;
                }
            };
            let j = *by_class[other].choose(&mut pick_rng).expect("non-empty class");
            let canvas = &mut pixels[item * ch * size * size..(item + 1) * ch * size * size];
            let (t1, l1, t2, l2) = (offset(), offset(), offset(), offset());
            paste_max(mnist.raw_image(i), ch, h, w, canvas, size, t1, l1);
            paste_max(mnist.raw_image(j), ch, h, w, canvas, size, t2, l2);
            labels.push(LabelSet::pair(class, other as u8)?);
            item += 1;
        }
    }
    Dataset::new("multimnist", mnist.split, ch, size, size, mnist.num_classes, pixels, labels)
}

/// Shifts a `C×H×W` image by `(dy, dx)` pixels, filling with zeros.
pub fn shift_image(image: &Tensor, dy: i32, dx: i32) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1] as i32, s[2] as i32);
    let mut out = Tensor::zeros(s);
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if sx >= 0 && sx < w {
                    dst[(ch * h as usize + y as usize) * w as usize + x as usize] =
                        src[(ch * h as usize + sy as usize) * w as usize + sx as usize];
                }
            }
        }
    }
    out
}

/// Random translation by up to `max_shift` pixels in each direction.
pub fn random_shift<R: Rng + ?Sized>(image: &Tensor, max_shift: i32, rng: &mut R) -> Tensor {
    if max_shift == 0 {
        return image.clone();
    }
    let dy = rng.random_range(-max_shift..=max_shift);
    let dx = rng.random_range(-max_shift..=max_shift);
    shift_image(image, dy, dx)
}
