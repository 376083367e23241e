//! Hyperspectral cubes, label maps and patch extraction.
//!
//! Cube files (little-endian): magic `HSIC`, `u32` version 1, `u32` H, W, L,
//! then `H*W*L` `f32` values, band-major. Label files: magic `HSIL`, `u32`
//! version 1, `u32` H, W, then `H*W` `i32` class ids, row-major, `0` meaning
//! unlabeled.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const CUBE_MAGIC: [u8; 4] = *b"HSIC";
pub const LABEL_MAGIC: [u8; 4] = *b"HSIL";
pub const FORMAT_VERSION: u32 = 1;

/// `bands x height x width` raster, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(shape_err!("cube dims {height}x{width}x{bands} must be positive"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| shape_err!("cube dims overflow"))?;
        if data.len() != n {
            return Err(shape_err!("{} values for a {height}x{width}x{bands} cube", data.len()));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, v: f32) {
        self.data[(band * self.height + row) * self.width + col] = v;
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(b, row, col)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major class ids; `0` is unlabeled, classes are `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<i32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<i32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("label map {height}x{width} must be non-empty"));
        }
        if ids.len() != height * width {
            return Err(shape_err!("{} ids for a {height}x{width} label map", ids.len()));
        }
        if let Some(bad) = ids.iter().find(|&&v| v < 0) {
            return Err(Error::InvalidArgument(format!("negative class id {bad}")));
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[i32] {
        &self.ids
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.ids[row * self.width + col]
    }

    /// Largest class id present.
    pub fn classes(&self) -> usize {
        self.ids.iter().copied().max().unwrap_or(0) as usize
    }

    /// `(row, col, class - 1)` of every labeled pixel, row-major.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                if v > 0 {
                    out.push((r, c, v as usize - 1));
                }
            }
        }
        out
    }
}

fn read_exact_or<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("file ended inside {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_header<R: Read>(r: &mut R, magic: [u8; 4], path: &Path, dims: usize) -> Result<Vec<usize>> {
    let found: [u8; 4] = read_exact_or(r, 4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    let raw = read_exact_or(r, 4 * (dims + 1), "header")?;
    let words: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if words[0] != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: words[0],
        });
    }
    Ok(words[1..].iter().map(|&w| w as usize).collect())
}

fn checked_volume(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .map(|n| n / 4)
        .ok_or_else(|| shape_err!("dims {dims:?} overflow"))
}

pub fn read_cube<R: Read>(mut r: R, path: &Path) -> Result<HsiCube> {
    let d = read_header(&mut r, CUBE_MAGIC, path, 3)?;
    let n = checked_volume(&d)?;
    let raw = read_exact_or(&mut r, n * 4, "cube values")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    HsiCube::new(d[0], d[1], d[2], data)
}

pub fn write_cube<W: Write>(cube: &HsiCube, mut w: W) -> Result<()> {
    w.write_all(&CUBE_MAGIC)?;
    for v in [FORMAT_VERSION, cube.height as u32, cube.width as u32, cube.bands as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_labels<R: Read>(mut r: R, path: &Path) -> Result<LabelMap> {
    let d = read_header(&mut r, LABEL_MAGIC, path, 2)?;
    let n = checked_volume(&d)?;
    let raw = read_exact_or(&mut r, n * 4, "label values")?;
    let ids = raw
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelMap::new(d[0], d[1], ids)
}

pub fn write_labels<W: Write>(labels: &LabelMap, mut w: W) -> Result<()> {
    w.write_all(&LABEL_MAGIC)?;
    for v in [FORMAT_VERSION, labels.height as u32, labels.width as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(labels.ids.len() * 4);
    for v in &labels.ids {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    read_cube(std::io::BufReader::new(std::fs::File::open(path)?), path)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    read_labels(std::io::BufReader::new(std::fs::File::open(path)?), path)
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_cube(cube, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_labels(labels, &mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    #[default]
    Zero,
    /// Reflect about the edge pixel without repeating it.
    Mirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// One patch per labeled pixel, plus its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatchSet {
    /// `[B, 1, L, M, M]`.
    pub patches: Tensor,
    /// Zero-based class ids.
    pub labels: Vec<usize>,
    pub positions: Vec<(usize, usize)>,
    pub splits: Vec<Split>,
    pub classes: usize,
    pub block: usize,
    pub pad: usize,
}

impl LabeledPatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_extent(&self) -> [usize; 3] {
        let s = self.patches.shape();
        [s[2], s[3], s[4]]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Stacks the selected samples into `[b, 1, L, M, M]` with their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.patches.len() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.patches.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.patches.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(&shape, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn padded_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if (0..n as isize).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Mirror => {
            let r = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
            (0..n as isize).contains(&r).then_some(r as usize)
        }
    }
}

/// Cuts an `M x M x L` block around every labeled pixel of the padded image.
/// Every sample starts in the training split.
pub fn pad_and_extract(
    cube: &HsiCube,
    labels: &LabelMap,
    block: usize,
    mode: PadMode,
) -> Result<LabeledPatchSet> {
    if block % 2 == 0 {
        return Err(Error::InvalidArgument(format!("block size {block} must be odd")));
    }
    if (labels.height, labels.width) != (cube.height, cube.width) {
        return Err(shape_err!(
            "labels {}x{} do not match cube {}x{}",
            labels.height,
            labels.width,
            cube.height,
            cube.width
        ));
    }
    let pad = (block - 1) / 2;
    if block > cube.height + 2 * pad || block > cube.width + 2 * pad {
        return Err(Error::InvalidArgument(format!("block {block} exceeds the padded image")));
    }
    if mode == PadMode::Mirror && (pad >= cube.height || pad >= cube.width) {
        return Err(Error::InvalidArgument(format!("mirror padding {pad} needs a wider image")));
    }
    let pixels = labels.labeled_pixels();
    if pixels.is_empty() {
        return Err(Error::Empty("label map has no labeled pixels".into()));
    }
    let l = cube.bands;
    let per = l * block * block;
    let mut data = vec![0.0; pixels.len() * per];
    for (s, &(r, c, _)) in pixels.iter().enumerate() {
        let dst = &mut data[s * per..(s + 1) * per];
        for dy in 0..block {
            let Some(y) = padded_index(r as isize + dy as isize - pad as isize, cube.height, mode) else {
                continue;
            };
            for dx in 0..block {
                let Some(x) = padded_index(c as isize + dx as isize - pad as isize, cube.width, mode) else {
                    continue;
                };
                for b in 0..l {
                    dst[(b * block + dy) * block + dx] = cube.get(b, y, x) as f64;
                }
            }
        }
    }
    Ok(LabeledPatchSet {
        patches: Tensor::new(&[pixels.len(), 1, l, block, block], data)?,
        labels: pixels.iter().map(|p| p.2).collect(),
        positions: pixels.iter().map(|p| (p.0, p.1)).collect(),
        splits: vec![Split::Train; pixels.len()],
        classes: labels.classes(),
        block,
        pad,
    })
}

/// Per-class seeded assignment following `ratios` (train, val, test). Counts
/// per class are `round(n * r_val)` and `round(n * r_test)`, the remainder
/// going to training.
pub fn stratified_split(labels: &[usize], classes: usize, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios[0] <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative with a positive training share"
        )));
    }
    let total: f64 = ratios.iter().sum();
    let [_, rv, rt] = ratios.map(|r| r / total);
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    for k in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < nonzero {
            log::warn!("class {} has {} samples, fewer than {nonzero} splits; all go to training", k + 1, idx.len());
            continue;
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let nv = (n * rv).round() as usize;
        let nt = ((n * rt).round() as usize).min(idx.len() - nv);
        for &i in &idx[..nv] {
            out[i] = Split::Val;
        }
        for &i in &idx[nv..nv + nt] {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

/// Per-band mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    /// Statistics over the given pixels. Constant bands get unit deviation.
    pub fn from_pixels(cube: &HsiCube, pixels: &[(usize, usize)]) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Empty("no pixels for band statistics".into()));
        }
        let n = pixels.len() as f64;
        let mut mean = vec![0.0; cube.bands];
        let mut std = vec![0.0; cube.bands];
        for b in 0..cube.bands {
            let m = pixels.iter().map(|&(r, c)| cube.get(b, r, c) as f64).sum::<f64>() / n;
            let v = pixels
                .iter()
                .map(|&(r, c)| (cube.get(b, r, c) as f64 - m).powi(2))
                .sum::<f64>()
                / n;
            mean[b] = m;
            std[b] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, cube: &HsiCube) -> Result<HsiCube> {
        let mut out = cube.clone();
        let plane = cube.height * cube.width;
        for b in 0..cube.bands {
            for v in &mut out.data[b * plane..(b + 1) * plane] {
                *v = ((*v as f64 - self.mean[b]) / self.std[b]) as f32;
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFinite("normalized cube".into()));
        }
        Ok(out)
    }
}

/// Extracts, splits, normalizes with training-pixel statistics, and
/// re-extracts so that padding stays exactly zero.
pub fn prepare(
    cube: &HsiCube,
    labels: &LabelMap,
    block: usize,
    mode: PadMode,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(LabeledPatchSet, BandStats)> {
    let pixels = labels.labeled_pixels();
    let ids: Vec<usize> = pixels.iter().map(|p| p.2).collect();
    let splits = stratified_split(&ids, labels.classes(), ratios, seed)?;
    let train: Vec<(usize, usize)> = pixels
        .iter()
        .zip(&splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(p, _)| (p.0, p.1))
        .collect();
    let stats = BandStats::from_pixels(cube, &train)?;
    let mut set = pad_and_extract(&stats.apply(cube)?, labels, block, mode)?;
    set.splits = splits;
    Ok((set, stats))
}

/// Smooth, mutually distinct class spectra in `[0.1, 0.9]`.
pub fn class_signature(class: usize, bands: usize) -> Vec<f64> {
    (0..bands)
        .map(|b| {
            let t = (b as f64 + 0.5) / bands as f64;
            0.5 + 0.4 * (std::f64::consts::PI * (class + 1) as f64 * t).sin()
        })
        .collect()
}

/// Seeded Voronoi regions, one class per site, every class owning at least
/// one site; each pixel is its class signature plus white noise.
pub fn gen_synthetic(
    classes: usize,
    height: usize,
    width: usize,
    bands: usize,
    noise: f64,
    seed: u64,
) -> Result<(HsiCube, LabelMap)> {
    if classes < 2 {
        return Err(Error::InvalidArgument("at least two classes are required".into()));
    }
    if height == 0 || width == 0 || bands == 0 {
        return Err(shape_err!("synthetic dims {height}x{width}x{bands} must be positive"));
    }
    if classes > bands {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes need at least as many bands, got {bands}"
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise {noise} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64, usize)> = (0..2 * classes)
        .map(|i| {
            let class = if i < classes { i } else { rng.random_range(0..classes) };
            (rng.random_range(0.0..height as f64), rng.random_range(0.0..width as f64), class)
        })
        .collect();
    let mut ids = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            ids.push(nearest.2 as i32 + 1);
        }
    }
    let sigs: Vec<Vec<f64>> = (0..classes).map(|k| class_signature(k, bands)).collect();
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = vec![0f32; height * width * bands];
    for r in 0..height {
        for c in 0..width {
            let k = ids[r * width + c] as usize - 1;
            for b in 0..bands {
                let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data[(b * height + r) * width + c] = (sigs[k][b] + n) as f32;
            }
        }
    }
    Ok((HsiCube::new(height, width, bands, data)?, LabelMap::new(height, width, ids)?))
}

/// Accuracy of a nearest-centroid classifier on centre-pixel spectra, fitted
/// on the training split and scored on the test split.
pub fn nearest_centroid_accuracy(set: &LabeledPatchSet) -> Result<f64> {
    let [l, m, n] = set.patch_extent();
    let per = l * m * n;
    let centre = |i: usize| -> Vec<f64> {
        let p = &set.patches.data()[i * per..(i + 1) * per];
        (0..l).map(|b| p[(b * m + m / 2) * n + n / 2]).collect()
    };
    let mut sums = vec![vec![0.0; l]; set.classes];
    let mut counts = vec![0usize; set.classes];
    for i in set.indices(Split::Train) {
        let s = centre(i);
        sums[set.labels[i]].iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        counts[set.labels[i]] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.iter().map(|v| v / c as f64).collect()))
        .collect();
    let test = set.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Empty("test split".into()));
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let s = centre(i);
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(k, c)| c.as_ref().map(|c| (k, c)))
                .map(|(k, c)| (k, c.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(set.labels[i])
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
