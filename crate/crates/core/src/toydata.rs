// SPDX-License-Identifier: Apache-2.0

//! Procedural shapes dataset: one discrete factor (shape) and four
//! continuous ones (position, scale, rotation).
//!
//! File layout, all integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `NCTD` |
//! | 4 | 4 | version (`u32`, currently 1) |
//! | 8 | 4 | image count `N` (`u32`) |
//! | 12 | 4 | image side `S` (`u32`) |
//! | 16 | `N·S²` | pixels, `u8`, image-major then row-major |
//! | … | `N·40` | labels, five `f64` per image: shape index, x, y, scale, rotation |

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::rng;

pub const MAGIC: [u8; 4] = *b"NCTD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const FACTOR_COUNT: usize = 5;
pub const MIN_SIDE: usize = 12;

pub const POSITION_RANGE: (f64, f64) = (0.15, 0.85);
pub const SCALE_RANGE: (f64, f64) = (0.3, 0.7);
/// Circumradius of a shape at scale 1, as a fraction of the image side.
pub const RADIUS_PER_SCALE: f64 = 0.21;
/// Minor-to-major axis ratio of the ellipse.
pub const ELLIPSE_ASPECT: f64 = 0.55;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Ellipse,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Triangle];

    pub fn index(self) -> usize {
        match self {
            Shape::Square => 0,
            Shape::Ellipse => 1,
            Shape::Triangle => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Shape::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("shape index {i}")))
    }
}

/// Ground-truth factors of one image. Positions are fractions of the side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorSpec {
    pub shape: Shape,
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !within(self.x, POSITION_RANGE) || !within(self.y, POSITION_RANGE) {
            return Err(Error::invalid(format!(
                "position ({}, {}) outside {POSITION_RANGE:?}",
                self.x, self.y
            )));
        }
        if !within(self.scale, SCALE_RANGE) {
            return Err(Error::invalid(format!(
                "scale {} outside {SCALE_RANGE:?}",
                self.scale
            )));
        }
        if !(self.rotation >= 0.0 && self.rotation < 2.0 * PI) {
            return Err(Error::invalid(format!(
                "rotation {} outside [0, 2π)",
                self.rotation
            )));
        }
        Ok(())
    }

    /// `[shape index, x, y, scale, rotation]`.
    pub fn to_row(&self) -> [f64; FACTOR_COUNT] {
        [
            self.shape.index() as f64,
            self.x,
            self.y,
            self.scale,
            self.rotation,
        ]
    }

    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() != FACTOR_COUNT {
            return Err(Error::dim(format!("label row of length {}", row.len())));
        }
        let shape = row[0];
        if shape.fract() != 0.0 || shape < 0.0 {
            return Err(Error::Format(format!("shape label {shape}")));
        }
        Ok(Self {
            shape: Shape::from_index(shape as usize)?,
            x: row[1],
            y: row[2],
            scale: row[3],
            rotation: row[4],
        })
    }

    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            x: rng.random_range(POSITION_RANGE.0..=POSITION_RANGE.1),
            y: rng.random_range(POSITION_RANGE.0..=POSITION_RANGE.1),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            rotation: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Whether the point `(px, py)`, in pixel units, lies inside the shape.
    fn contains(&self, px: f64, py: f64, side: f64) -> bool {
        let r = RADIUS_PER_SCALE * self.scale * side;
        let (dx, dy) = (px - self.x * side, py - self.y * side);
        let (s, c) = self.rotation.sin_cos();
        // Object frame: undo the rotation about the centre.
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.shape {
            Shape::Square => {
                let half = r / std::f64::consts::SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            Shape::Ellipse => {
                let b = r * ELLIPSE_ASPECT;
                (u / r).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Triangle => {
                // Equilateral, apex along −v, circumradius r.
                (0..3).all(|k| {
                    let a = 2.0 * PI * k as f64 / 3.0;
                    let (sa, ca) = a.sin_cos();
                    sa * u + ca * v <= r / 2.0
                })
            }
        }
    }
}

/// Anti-aliased coverage image, row-major `side × side`, values in `[0, 1]`.
pub fn render_sample(spec: &FactorSpec, side: usize) -> Result<Vec<f64>> {
    if side < MIN_SIDE {
        return Err(Error::invalid(format!("side {side} is below {MIN_SIDE}")));
    }
    spec.validate()?;
    let s = side as f64;
    let sub = SUPERSAMPLE as f64;
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let mut hits = 0usize;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let px = col as f64 + (b as f64 + 0.5) / sub;
                    let py = row as f64 + (a as f64 + 0.5) / sub;
                    if spec.contains(px, py, s) {
                        hits += 1;
                    }
                }
            }
            out.push(hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64);
        }
    }
    Ok(out)
}

/// `round(255 · v)` per pixel.
pub fn quantize(image: &[f64]) -> Vec<u8> {
    image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Images with their ground-truth factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    side: usize,
    pixels: Vec<u8>,
    factors: Vec<FactorSpec>,
}

impl Dataset {
    /// Factors drawn uniformly from their ranges; image `k` uses its own
    /// stream so generation order does not matter.
    pub fn generate(count: usize, side: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("dataset count must be ≥ 1"));
        }
        if count > u32::MAX as usize || side > u32::MAX as usize {
            return Err(Error::invalid("dataset too large for the file header"));
        }
        let mut pixels = Vec::with_capacity(count * side * side);
        let mut factors = Vec::with_capacity(count);
        for k in 0..count {
            let spec = FactorSpec::sample(&mut rng::stream(seed, rng::DATASET, k as u64));
            pixels.extend(quantize(&render_sample(&spec, side)?));
            factors.push(spec);
        }
        Ok(Self {
            side,
            pixels,
            factors,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn image_pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn raw_image(&self, k: usize) -> &[u8] {
        let p = self.image_pixels();
        &self.pixels[k * p..(k + 1) * p]
    }

    /// Image `k` as `value / 255`.
    pub fn image(&self, k: usize) -> Vec<f64> {
        self.raw_image(k)
            .iter()
            .map(|v| *v as f64 / 255.0)
            .collect()
    }

    /// Images at `indices` as a `[b, S²]` batch.
    pub fn batch(&self, indices: &[usize]) -> Array {
        let data = indices.iter().flat_map(|k| self.image(*k)).collect();
        Array::new(vec![indices.len(), self.image_pixels()], data).expect("shape")
    }

    /// Label table, `[N, 5]`.
    pub fn labels(&self) -> Array {
        let data = self.factors.iter().flat_map(|f| f.to_row()).collect();
        Array::new(vec![self.len(), FACTOR_COUNT], data).expect("shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + self.len() * 40);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.side as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        for f in &self.factors {
            for v in f.to_row() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
            return Err(Error::Format("not a shapes dataset file".into()));
        }
        let word =
            |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let version = word(1);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let (count, side) = (word(2) as usize, word(3) as usize);
        let n_pixels = count * side * side;
        let expected = HEADER_LEN + n_pixels + count * FACTOR_COUNT * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "dataset file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let pixels = bytes[HEADER_LEN..HEADER_LEN + n_pixels].to_vec();
        let labels: Vec<f64> = bytes[HEADER_LEN + n_pixels..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let factors = labels
            .chunks_exact(FACTOR_COUNT)
            .map(FactorSpec::from_row)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            side,
            pixels,
            factors,
        })
    }

    /// Writes via a sibling temporary file so a failed write leaves nothing
    /// behind at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised file, lowercase hex.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.partial", name.to_string_lossy()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn spec(shape: Shape, scale: f64, rotation: f64) -> FactorSpec {
        FactorSpec {
            shape,
            x: 0.5,
            y: 0.5,
            scale,
            rotation,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec(Shape::Triangle, 0.5, 1.0);
        assert_eq!(
            render_sample(&s, 16).unwrap(),
            render_sample(&s, 16).unwrap()
        );
    }

    #[test]
    fn larger_scale_covers_more_pixels() {
        for shape in Shape::ALL {
            let count = |scale| {
                render_sample(&spec(shape, scale, 0.3), 16)
                    .unwrap()
                    .iter()
                    .filter(|v| **v > 0.0)
                    .count()
            };
            assert!(count(0.7) > count(0.3), "{shape:?}");
        }
    }

    #[test]
    fn square_has_quarter_turn_symmetry() {
        let a = quantize(&render_sample(&spec(Shape::Square, 0.6, 0.0), 16).unwrap());
        let b = quantize(&render_sample(&spec(Shape::Square, 0.6, PI / 2.0), 16).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((*u as i32 - *v as i32).abs() <= 1);
        }
    }

    #[test]
    fn rotation_changes_non_symmetric_shapes() {
        let a = render_sample(&spec(Shape::Ellipse, 0.6, 0.0), 16).unwrap();
        let b = render_sample(&spec(Shape::Ellipse, 0.6, PI / 2.0), 16).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_factors_are_rejected() {
        assert!(render_sample(&spec(Shape::Square, 0.9, 0.0), 16).is_err());
        assert!(render_sample(&spec(Shape::Square, 0.5, 7.0), 16).is_err());
        assert!(render_sample(&spec(Shape::Square, 0.5, 0.0), 8).is_err());
        let mut s = spec(Shape::Square, 0.5, 0.0);
        s.x = 0.95;
        assert!(matches!(render_sample(&s, 16), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn generation_is_reproducible_and_round_trips() {
        let a = Dataset::generate(64, 12, 7).unwrap();
        let b = Dataset::generate(64, 12, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.checksum(), b.checksum());
        let c = Dataset::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.labels().shape(), &[64, FACTOR_COUNT]);
        assert_ne!(
            a.checksum(),
            Dataset::generate(64, 12, 8).unwrap().checksum()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Dataset::generate(4, 12, 1).unwrap().to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(Dataset::from_bytes(&bad).is_err());
    }

    #[test]
    fn shape_frequencies_are_near_uniform() {
        let ds = Dataset::generate(2048, 12, 7).unwrap();
        let mut counts = [0usize; 3];
        for f in ds.factors() {
            counts[f.shape.index()] += 1;
        }
        // Binomial(2048, 1/3): mean 682.67, sd 21.33.
        let mean = 2048.0 / 3.0;
        let sd = (2048.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
        for f in ds.factors() {
            f.validate().unwrap();
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shapes.bin");
        let ds = Dataset::generate(8, 12, 3).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        let missing = dir.path().join("no/such/dir/file.bin");
        assert!(ds.save(&missing).is_err());
        assert!(!missing.exists());
    }

    proptest! {
        #[test]
        fn in_range_shapes_stay_inside_the_frame(
            shape in 0usize..3,
            x in 0.15f64..=0.85,
            y in 0.15f64..=0.85,
            scale in 0.3f64..=0.7,
            rotation in 0.0f64..std::f64::consts::TAU,
            side in prop::sample::select(vec![12usize, 16, 20]),
        ) {
            let s = FactorSpec { shape: Shape::from_index(shape).unwrap(), x, y, scale, rotation };
            let img = render_sample(&s, side).unwrap();
            let total: f64 = img.iter().sum();
            prop_assert!(total > 0.0);
            // The circumscribed disc fits in the frame.
            let r = RADIUS_PER_SCALE * scale * side as f64;
            let (cx, cy) = (x * side as f64, y * side as f64);
            prop_assert!(cx - r >= 0.0 && cx + r <= side as f64);
            prop_assert!(cy - r >= 0.0 && cy + r <= side as f64);
            prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
