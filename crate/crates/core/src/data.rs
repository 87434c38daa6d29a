//! Hyperspectral scenes: loading, per-band standardization, mirror-padded
//! patch extraction, and per-class train/test splitting.
//!
//! ## HSICUBE file format
//!
//! A UTF-8 JSON header line terminated by `'\n'` with fields
//! `{"h":H,"w":W,"s":S,"k":K,"class_names":[...]}`, followed by `H*W*S`
//! little-endian 32-bit floats (row-major, band innermost), followed by
//! `H*W` little-endian 16-bit signed integers for the label grid
//! (0 = unlabeled, 1..K = classes).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::mirror_index;
use crate::tensor::Tensor;

/// A labeled hyperspectral scene: an `H x W` pixel grid with `S` bands per
/// pixel and a per-pixel class-label grid.
#[derive(Clone, Debug)]
pub struct HyperCube {
    h: usize,
    w: usize,
    s: usize,
    k: usize,
    radiance: Tensor<f32>,
    labels: Vec<i16>,
    class_names: Vec<String>,
}

impl HyperCube {
    pub fn new(
        radiance: Tensor<f32>,
        labels: Vec<i16>,
        k: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let shape = radiance.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidShape(format!(
                "radiance must be [H, W, S], got {shape:?}"
            )));
        }
        let (h, w, s) = (shape[0], shape[1], shape[2]);
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label grid has {} entries for a {h} x {w} scene",
                labels.len()
            )));
        }
        if k == 0 {
            return Err(Error::InvalidArg("class count must be >= 1".into()));
        }
        if !class_names.is_empty() && class_names.len() != k {
            return Err(Error::InvalidArg(format!(
                "{} class names for {k} classes",
                class_names.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 || l as usize > k {
                return Err(Error::Format(format!(
                    "label {l} at pixel {i} outside 0..={k}"
                )));
            }
        }
        let class_names = if class_names.is_empty() {
            (1..=k).map(|c| format!("class{c}")).collect()
        } else {
            class_names
        };
        Ok(HyperCube { h, w, s, k, radiance, labels, class_names })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bands(&self) -> usize {
        self.s
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn radiance(&self) -> &Tensor<f32> {
        &self.radiance
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn label(&self, row: usize, col: usize) -> i16 {
        self.labels[row * self.w + col]
    }

    pub fn labels(&self) -> &[i16] {
        &self.labels
    }

    /// Row-major coordinates of every labeled pixel, per class (1..=K).
    pub fn class_populations(&self) -> BTreeMap<u16, Vec<(usize, usize)>> {
        let mut map: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
        for row in 0..self.h {
            for col in 0..self.w {
                let l = self.label(row, col);
                if l > 0 {
                    map.entry(l as u16).or_default().push((row, col));
                }
            }
        }
        map
    }
}

/// An `s x s x L` cube centered on a labeled pixel, carrying that pixel's
/// label.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub cube: Tensor<f32>,
    pub label: u16,
    pub center: (usize, usize),
}

/// Per-class training counts and the sampling seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_class_train: BTreeMap<u16, usize>,
    pub seed: u64,
}

impl SplitSpec {
    /// Same training count for every class.
    pub fn uniform(k: usize, count: usize, seed: u64) -> Self {
        SplitSpec {
            per_class_train: (1..=k as u16).map(|c| (c, count)).collect(),
            seed,
        }
    }

    /// The sampling protocol used for scarce-class scenes: `count` samples
    /// per class, but `small_count` for classes whose total population is
    /// below `small_threshold`.
    pub fn thresholded(
        cube: &HyperCube,
        count: usize,
        small_threshold: usize,
        small_count: usize,
        seed: u64,
    ) -> Self {
        let pops = cube.class_populations();
        let per_class_train = (1..=cube.num_classes() as u16)
            .map(|c| {
                let total = pops.get(&c).map_or(0, Vec::len);
                let want = if total < small_threshold { small_count } else { count };
                (c, want)
            })
            .collect();
        SplitSpec { per_class_train, seed }
    }
}

// ── HSICUBE io ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    h: usize,
    w: usize,
    s: usize,
    k: usize,
    class_names: Vec<String>,
}

pub fn save_hypercube<P: AsRef<Path>>(cube: &HyperCube, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = CubeHeader {
        h: cube.h,
        w: cube.w,
        s: cube.s,
        k: cube.k,
        class_names: cube.class_names.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for &v in cube.radiance.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &l in &cube.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_hypercube<P: AsRef<Path>>(path: P) -> Result<HyperCube> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    if !header_line.ends_with('\n') {
        return Err(Error::Format("missing newline after HSICUBE header".into()));
    }
    let header: CubeHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| Error::Format(format!("bad HSICUBE header: {e}")))?;
    let (h, w, s) = (header.h, header.w, header.s);
    if h == 0 || w == 0 || s == 0 {
        return Err(Error::Format(format!("degenerate dims {h} x {w} x {s}")));
    }

    let n_floats = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(s))
        .ok_or_else(|| Error::Format("dims overflow".into()))?;
    let mut payload = vec![0u8; n_floats * 4];
    r.read_exact(&mut payload).map_err(|_| {
        Error::Format(format!(
            "radiance payload too short: header claims {n_floats} floats"
        ))
    })?;
    let radiance: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut label_bytes = vec![0u8; h * w * 2];
    r.read_exact(&mut label_bytes)
        .map_err(|_| Error::Format(format!("label payload too short: expected {} labels", h * w)))?;
    let labels: Vec<i16> = label_bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes beyond declared payload".into()));
    }

    HyperCube::new(
        Tensor::from_vec(&[h, w, s], radiance)?,
        labels,
        header.k,
        header.class_names,
    )
}

/// Ingests the plain-text triplet form: a dims file whose first line is
/// `H W S K` (optionally followed by K class-name lines), a radiance CSV
/// with one row per pixel in row-major order and `S` columns, and a label
/// CSV with `H` rows of `W` integers.
pub fn ingest_triplet<P: AsRef<Path>>(dims: P, radiance_csv: P, labels_csv: P) -> Result<HyperCube> {
    let dims_text = std::fs::read_to_string(dims)?;
    let mut lines = dims_text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty dims file".into()))?;
    let nums: Vec<usize> = first
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad dims token '{t}'")))
        })
        .collect::<Result<_>>()?;
    let [h, w, s, k] = nums[..] else {
        return Err(Error::Format(format!(
            "dims line must be 'H W S K', got '{first}'"
        )));
    };
    let class_names: Vec<String> = lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if !class_names.is_empty() && class_names.len() != k {
        return Err(Error::Format(format!(
            "{} class-name lines for {k} classes",
            class_names.len()
        )));
    }

    let rad_text = std::fs::read_to_string(radiance_csv)?;
    let mut radiance = Vec::with_capacity(h * w * s);
    for (i, line) in rad_text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<f32> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Format(format!("bad float '{t}' in radiance row {i}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != s {
            return Err(Error::Format(format!(
                "radiance row {i} has {} bands, expected {s}",
                row.len()
            )));
        }
        radiance.extend(row);
    }
    if radiance.len() != h * w * s {
        return Err(Error::Format(format!(
            "radiance CSV holds {} pixels, expected {}",
            radiance.len() / s,
            h * w
        )));
    }

    let label_text = std::fs::read_to_string(labels_csv)?;
    let mut labels = Vec::with_capacity(h * w);
    for (i, line) in label_text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<i16> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<i16>()
                    .map_err(|_| Error::Format(format!("bad label '{t}' in row {i}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != w {
            return Err(Error::Format(format!(
                "label row {i} has {} columns, expected {w}",
                row.len()
            )));
        }
        labels.extend(row);
    }
    if labels.len() != h * w {
        return Err(Error::Format(format!(
            "label CSV holds {} rows, expected {h}",
            labels.len() / w
        )));
    }

    HyperCube::new(Tensor::from_vec(&[h, w, s], radiance)?, labels, k, class_names)
}

// ── Preprocessing ───────────────────────────────────────────────────────

/// Standardizes each spectral band to mean 0 / population std 1, with the
/// statistics taken over labeled pixels only; zero-variance bands map to
/// all-zeros. The transformation applies to every pixel of the band.
pub fn standardize_bands(cube: &HyperCube) -> HyperCube {
    let (h, w, s) = (cube.h, cube.w, cube.s);
    let labeled: Vec<usize> = (0..h * w).filter(|&p| cube.labels[p] > 0).collect();
    // A scene with no labeled pixels keeps its raw radiance.
    if labeled.is_empty() {
        return cube.clone();
    }
    let x = cube.radiance.data();
    let n = labeled.len() as f64;
    let mut out = x.to_vec();
    for band in 0..s {
        let mut mean = 0.0f64;
        for &p in &labeled {
            mean += x[p * s + band] as f64;
        }
        mean /= n;
        let mut var = 0.0f64;
        for &p in &labeled {
            let d = x[p * s + band] as f64 - mean;
            var += d * d;
        }
        var /= n;
        if var == 0.0 {
            for p in 0..h * w {
                out[p * s + band] = 0.0;
            }
        } else {
            let inv_std = 1.0 / var.sqrt();
            for p in 0..h * w {
                out[p * s + band] = ((x[p * s + band] as f64 - mean) * inv_std) as f32;
            }
        }
    }
    HyperCube {
        radiance: Tensor::from_vec(&[h, w, s], out).expect("same size"),
        ..cube.clone()
    }
}

// ── Patch extraction ────────────────────────────────────────────────────

/// Extracts the `s x s x L` cube centered on a labeled pixel, mirror-padding
/// where the window exceeds the scene bounds.
pub fn extract_patch(cube: &HyperCube, row: usize, col: usize, s: usize) -> Result<PatchSample> {
    if s % 2 == 0 {
        return Err(Error::InvalidArg(format!("patch size must be odd, got {s}")));
    }
    if row >= cube.h || col >= cube.w {
        return Err(Error::InvalidArg(format!(
            "center ({row}, {col}) outside {} x {} scene",
            cube.h, cube.w
        )));
    }
    let label = cube.label(row, col);
    if label <= 0 {
        return Err(Error::InvalidArg(format!(
            "center pixel ({row}, {col}) is unlabeled"
        )));
    }
    let bands = cube.s;
    let half = (s / 2) as isize;
    let x = cube.radiance.data();
    let mut data = Vec::with_capacity(s * s * bands);
    for dr in -half..=half {
        let sr = mirror_index(row as isize + dr, cube.h);
        for dc in -half..=half {
            let sc = mirror_index(col as isize + dc, cube.w);
            let base = (sr * cube.w + sc) * bands;
            data.extend_from_slice(&x[base..base + bands]);
        }
    }
    Ok(PatchSample {
        cube: Tensor::from_vec(&[s, s, bands], data)?,
        label: label as u16,
        center: (row, col),
    })
}

// ── Train/test splitting ────────────────────────────────────────────────

/// For each class draws exactly `per_class_train[k]` pixels uniformly
/// without replacement under the spec's seed; all remaining labeled pixels
/// go to the test set. The two sets partition the labeled pixels.
pub fn split_train_test(
    cube: &HyperCube,
    spec: &SplitSpec,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let populations = cube.class_populations();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&class, pixels) in &populations {
        let want = spec.per_class_train.get(&class).copied().unwrap_or(0);
        if want > pixels.len() {
            return Err(Error::InvalidArg(format!(
                "class {class} has {} pixels, cannot draw {want} for training",
                pixels.len()
            )));
        }
        let chosen = rand::seq::index::sample(&mut rng, pixels.len(), want);
        let mut mask = vec![false; pixels.len()];
        for i in chosen {
            mask[i] = true;
        }
        for (i, &px) in pixels.iter().enumerate() {
            if mask[i] {
                train.push(px);
            } else {
                test.push(px);
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;
    use proptest::prelude::*;

    fn toy_cube() -> HyperCube {
        // 4 x 4 scene, 3 bands, 2 classes; pixel value = row*10 + col + band/10
        let mut radiance = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                for b in 0..3 {
                    radiance.push((r * 10 + c) as f32 + b as f32 / 10.0);
                }
            }
        }
        let labels = vec![
            1, 1, 2, 0, //
            1, 2, 2, 0, //
            0, 1, 2, 1, //
            2, 0, 1, 2,
        ];
        HyperCube::new(
            Tensor::from_vec(&[4, 4, 3], radiance).unwrap(),
            labels,
            2,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_through_file() {
        let cube = toy_cube();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.hsicube");
        save_hypercube(&cube, &path).unwrap();
        let loaded = load_hypercube(&path).unwrap();
        assert_eq!(loaded.height(), 4);
        assert_eq!(loaded.width(), 4);
        assert_eq!(loaded.bands(), 3);
        assert_eq!(loaded.num_classes(), 2);
        assert_eq!(loaded.radiance().data(), cube.radiance().data());
        assert_eq!(loaded.labels(), cube.labels());
        assert_eq!(loaded.class_names(), cube.class_names());
    }

    #[test]
    fn short_payload_rejected() {
        let cube = toy_cube();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.hsicube");
        save_hypercube(&cube, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_hypercube(&path), Err(Error::Format(_))));
    }

    #[test]
    fn label_beyond_k_rejected() {
        let radiance = Tensor::from_vec(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            HyperCube::new(radiance, vec![1, 3], 2, vec![]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn standardize_constant_band_becomes_zero() {
        let mut radiance = Vec::new();
        for p in 0..4 {
            radiance.push(5.0f32); // band 0 constant
            radiance.push(p as f32); // band 1 varies
        }
        let cube = HyperCube::new(
            Tensor::from_vec(&[2, 2, 2], radiance).unwrap(),
            vec![1, 1, 1, 1],
            1,
            vec![],
        )
        .unwrap();
        let out = standardize_bands(&cube);
        for p in 0..4 {
            assert_eq!(out.radiance().data()[p * 2], 0.0);
        }
    }

    #[test]
    fn standardize_two_pixel_band() {
        // band values 1 and 3 over the two labeled pixels: mean 2, std 1
        let cube = HyperCube::new(
            Tensor::from_vec(&[1, 2, 1], vec![1.0, 3.0]).unwrap(),
            vec![1, 1],
            1,
            vec![],
        )
        .unwrap();
        let out = standardize_bands(&cube);
        assert_eq!(out.radiance().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardize_moments_recomputed() {
        let radiance =
            Tensor::<f32>::new(&[6, 5, 4], Fill::Uniform { seed: 5, lo: 0.0, hi: 100.0 }).unwrap();
        let labels: Vec<i16> = (0..30).map(|i| if i % 3 == 0 { 0 } else { 1 }).collect();
        let cube = HyperCube::new(radiance, labels, 1, vec![]).unwrap();
        let out = standardize_bands(&cube);
        let labeled: Vec<usize> = (0..30).filter(|&p| cube.labels[p] > 0).collect();
        for band in 0..4 {
            let vals: Vec<f64> =
                labeled.iter().map(|&p| out.radiance().data()[p * 4 + band] as f64).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "band {band} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-4, "band {band} std {}", var.sqrt());
        }
    }

    #[test]
    fn unlabeled_pixels_do_not_shift_statistics() {
        // Label only the two pixels with values 1 and 3; the huge unlabeled
        // pixel must not contaminate the moments.
        let cube = HyperCube::new(
            Tensor::from_vec(&[1, 3, 1], vec![1.0, 3.0, 1000.0]).unwrap(),
            vec![1, 1, 0],
            1,
            vec![],
        )
        .unwrap();
        let out = standardize_bands(&cube);
        assert_eq!(out.radiance().data()[0], -1.0);
        assert_eq!(out.radiance().data()[1], 1.0);
    }

    #[test]
    fn patch_of_one_is_the_pixel_spectrum() {
        let cube = toy_cube();
        let p = extract_patch(&cube, 2, 1, 1).unwrap();
        assert_eq!(p.cube.shape(), &[1, 1, 3]);
        assert_eq!(p.label, 1);
        assert_eq!(p.cube.data(), &[21.0, 21.1, 21.2]);
    }

    #[test]
    fn corner_patch_mirrors() {
        let cube = toy_cube();
        // At corner (0,0), patch coordinate (0,0) reflects to scene (1,1).
        let p = extract_patch(&cube, 0, 0, 3).unwrap();
        assert_eq!(p.cube.shape(), &[3, 3, 3]);
        let band0 = |pr: usize, pc: usize| p.cube.data()[(pr * 3 + pc) * 3];
        assert_eq!(band0(0, 0), 11.0); // scene (1,1)
        assert_eq!(band0(0, 1), 10.0); // scene (1,0)
        assert_eq!(band0(1, 0), 1.0); // scene (0,1)
        assert_eq!(band0(1, 1), 0.0); // scene (0,0)
        assert_eq!(band0(2, 2), 11.0); // scene (1,1)
    }

    #[test]
    fn interior_patch_has_no_padding() {
        let h = 145;
        let radiance =
            Tensor::<f32>::new(&[h, h, 3], Fill::Uniform { seed: 9, lo: 0.0, hi: 1.0 }).unwrap();
        let labels = vec![1i16; h * h];
        let cube = HyperCube::new(radiance, labels, 1, vec![]).unwrap();
        let p = extract_patch(&cube, 72, 72, 27).unwrap();
        assert_eq!(p.cube.shape(), &[27, 27, 3]);
        for dr in 0..27 {
            for dc in 0..27 {
                for b in 0..3 {
                    let want = cube.radiance().data()[((72 - 13 + dr) * h + 72 - 13 + dc) * 3 + b];
                    assert_eq!(p.cube.data()[(dr * 27 + dc) * 3 + b], want);
                }
            }
        }
    }

    #[test]
    fn even_patch_and_unlabeled_center_rejected() {
        let cube = toy_cube();
        assert!(extract_patch(&cube, 1, 1, 2).is_err());
        assert!(extract_patch(&cube, 0, 3, 3).is_err()); // label 0
    }

    #[test]
    fn label_preserving() {
        let cube = toy_cube();
        for r in 0..4 {
            for c in 0..4 {
                if cube.label(r, c) > 0 {
                    let p = extract_patch(&cube, r, c, 3).unwrap();
                    assert_eq!(p.label as i16, cube.label(r, c));
                    assert_eq!(p.center, (r, c));
                }
            }
        }
    }

    #[test]
    fn interior_extraction_commutes_with_translation() {
        // Build a scene and its (+1, +1) translate; interior patches of the
        // translate at shifted coordinates match the original's.
        let h = 8;
        let base =
            Tensor::<f32>::new(&[h, h, 2], Fill::Uniform { seed: 13, lo: -1.0, hi: 1.0 }).unwrap();
        let mut shifted = vec![0.0f32; h * h * 2];
        for r in 0..h - 1 {
            for c in 0..h - 1 {
                for b in 0..2 {
                    shifted[((r + 1) * h + c + 1) * 2 + b] = base.data()[(r * h + c) * 2 + b];
                }
            }
        }
        let cube_a =
            HyperCube::new(base.clone(), vec![1; h * h], 1, vec![]).unwrap();
        let cube_b = HyperCube::new(
            Tensor::from_vec(&[h, h, 2], shifted).unwrap(),
            vec![1; h * h],
            1,
            vec![],
        )
        .unwrap();
        let pa = extract_patch(&cube_a, 3, 3, 3).unwrap();
        let pb = extract_patch(&cube_b, 4, 4, 3).unwrap();
        assert_eq!(pa.cube.data(), pb.cube.data());
    }

    #[test]
    fn split_counts_and_disjointness() {
        let cube = toy_cube(); // class 1: 6 pixels, class 2: 6 pixels
        let mut spec = SplitSpec::uniform(2, 2, 7);
        spec.per_class_train.insert(2, 3);
        let (train, test) = split_train_test(&cube, &spec).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(test.len(), 7);
        for px in &train {
            assert!(!test.contains(px));
        }
        let count_class = |set: &[(usize, usize)], k: i16| {
            set.iter().filter(|&&(r, c)| cube.label(r, c) == k).count()
        };
        assert_eq!(count_class(&train, 1), 2);
        assert_eq!(count_class(&train, 2), 3);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let cube = toy_cube();
        let spec = SplitSpec::uniform(2, 3, 99);
        let (a_train, a_test) = split_train_test(&cube, &spec).unwrap();
        let (b_train, b_test) = split_train_test(&cube, &spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let other = SplitSpec::uniform(2, 3, 100);
        let (c_train, _) = split_train_test(&cube, &other).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn split_rejects_overdraw() {
        let cube = toy_cube();
        let spec = SplitSpec::uniform(2, 7, 1);
        assert!(split_train_test(&cube, &spec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn split_partitions_labeled_pixels(seed in 0u64..500, grid in 2usize..7) {
            let n = grid * grid;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<i16> = (0..n)
                .map(|_| rand::Rng::random_range(&mut rng, 0i16..4))
                .collect();
            let radiance = Tensor::<f32>::zeros(&[grid, grid, 1]).unwrap();
            let cube = match HyperCube::new(radiance, labels, 3, vec![]) {
                Ok(c) => c,
                Err(_) => return Ok(()),
            };
            let pops = cube.class_populations();
            let spec = SplitSpec {
                per_class_train: pops.iter().map(|(&k, v)| (k, v.len() / 2)).collect(),
                seed,
            };
            let (train, test) = split_train_test(&cube, &spec).unwrap();
            let labeled: usize = pops.values().map(Vec::len).sum();
            prop_assert_eq!(train.len() + test.len(), labeled);
            for px in &train {
                prop_assert!(!test.contains(px));
            }
            for (&k, v) in &pops {
                let got = train.iter().filter(|&&(r, c)| cube.label(r, c) as u16 == k).count();
                prop_assert_eq!(got, v.len() / 2);
            }
        }
    }
}
