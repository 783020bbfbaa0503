//! Procedural factor-labeled shapes dataset.
//!
//! A full factorial grid over five generative factors: shape (the physical
//! identity factor), object hue, background hue, scale, and orientation.
//! Images are flat-shaded anti-aliased silhouettes rendered from signed
//! distance functions, quantized to uint8, and stored in a single binary
//! container with the factor-index table.
//!
//! Container layout (little-endian): magic `IMNDS1`, u32 JSON header length,
//! JSON manifest, contiguous uint8 image block (N*H*W*3), then the factor
//! table (N rows of 5 uint16 factor indices).

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::rng::child_rng;

pub const NUM_SHAPE_KINDS: usize = 4;
pub const SHAPE_NAMES: [&str; NUM_SHAPE_KINDS] = ["square", "circle", "triangle", "capsule"];

const MAGIC: &[u8; 6] = b"IMNDS1";
const FORMAT_VERSION: u32 = 1;
/// Fraction of the grid held out for evaluation.
const TEST_FRACTION: f64 = 0.1;

/// Ground-truth generative factors of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorTuple {
    pub shape_id: usize,
    pub object_hue: f64,
    pub background_hue: f64,
    pub scale: f64,
    pub orientation: f64,
}

impl FactorTuple {
    pub fn validate(&self) -> Result<()> {
        if self.shape_id >= NUM_SHAPE_KINDS {
            return Err(Error::invalid(format!(
                "shape_id {} out of range (have {NUM_SHAPE_KINDS} shapes)",
                self.shape_id
            )));
        }
        for (name, v, lo, hi) in [
            ("object_hue", self.object_hue, 0.0, 1.0),
            ("background_hue", self.background_hue, 0.0, 1.0),
            ("orientation", self.orientation, 0.0, std::f64::consts::TAU),
        ] {
            if !(v >= lo && v < hi + 1e-12) {
                return Err(Error::invalid(format!("{name} = {v} outside [{lo}, {hi})")));
            }
        }
        if !(0.5..=1.0).contains(&self.scale) {
            return Err(Error::invalid(format!(
                "scale = {} outside [0.5, 1.0]",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Grid sizes per factor, in (shape, object hue, background hue, scale,
/// orientation) order. The container stores factor indices in this order.
pub type GridSizes = [usize; 5];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_shape: [usize; 3],
    pub grid: GridSizes,
    pub count: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(grid: GridSizes, side: usize, seed: u64) -> Result<Self> {
        if side != 32 && side != 64 {
            return Err(Error::invalid("image side must be 32 or 64"));
        }
        if grid.iter().any(|&g| g == 0) {
            return Err(Error::invalid("every grid size must be at least 1"));
        }
        if grid[0] > NUM_SHAPE_KINDS {
            return Err(Error::invalid(format!(
                "at most {NUM_SHAPE_KINDS} shapes available, grid asks for {}",
                grid[0]
            )));
        }
        let count = grid.iter().product();
        Ok(Self {
            version: FORMAT_VERSION,
            image_shape: [side, side, 3],
            grid,
            count,
            seed,
        })
    }

    /// Factor values at a grid coordinate.
    pub fn factors_at(&self, idx: [usize; 5]) -> FactorTuple {
        let frac = |i: usize, size: usize| i as f64 / size as f64;
        let scale = if self.grid[3] == 1 {
            0.75
        } else {
            0.5 + 0.5 * idx[3] as f64 / (self.grid[3] - 1) as f64
        };
        FactorTuple {
            shape_id: idx[0],
            object_hue: frac(idx[1], self.grid[1]),
            background_hue: frac(idx[2], self.grid[2]),
            scale,
            orientation: std::f64::consts::TAU * frac(idx[4], self.grid[4]),
        }
    }

    /// Row-major flat index of a grid coordinate.
    pub fn flat_index(&self, idx: [usize; 5]) -> usize {
        let mut flat = 0;
        for d in 0..5 {
            flat = flat * self.grid[d] + idx[d];
        }
        flat
    }
}

pub fn default_grid() -> GridSizes {
    [4, 6, 6, 4, 8]
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn sd_circle(x: f64, y: f64, r: f64) -> f64 {
    (x * x + y * y).sqrt() - r
}

fn sd_square(x: f64, y: f64, half: f64) -> f64 {
    let dx = x.abs() - half;
    let dy = y.abs() - half;
    let ox = dx.max(0.0);
    let oy = dy.max(0.0);
    (ox * ox + oy * oy).sqrt() + dx.max(dy).min(0.0)
}

fn sd_equilateral_triangle(x: f64, y: f64, r: f64) -> f64 {
    // Circumradius r, centroid at origin, one vertex pointing up (-y).
    let k = 3.0_f64.sqrt();
    let mut px = x.abs();
    let mut py = y + r / 2.0;
    if px + k * py > 0.0 {
        let nx = (px - k * py) / 2.0;
        py = (-k * px - py) / 2.0;
        px = nx;
    }
    px -= px.clamp(-r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

fn sd_capsule(x: f64, y: f64, half_len: f64, radius: f64) -> f64 {
    let cx = x.clamp(-half_len, half_len);
    let dx = x - cx;
    (dx * dx + y * y).sqrt() - radius
}

fn shape_distance(shape_id: usize, x: f64, y: f64, r: f64) -> f64 {
    match shape_id {
        0 => sd_square(x, y, r * 0.82),
        1 => sd_circle(x, y, r),
        2 => sd_equilateral_triangle(x, y, r * 1.12),
        3 => sd_capsule(x, y, r * 0.72, r * 0.52),
        _ => f64::INFINITY,
    }
}

/// Anti-aliased coverage mask of the shape: 1 inside, 0 outside, a one-pixel
/// smooth ramp at the boundary. Discs ignore orientation by construction.
pub fn silhouette(factors: &FactorTuple, side: usize) -> Result<Array2<f64>> {
    factors.validate()?;
    let center = side as f64 / 2.0;
    let base_radius = side as f64 * 0.30;
    let r = base_radius * factors.scale;
    let (sin_t, cos_t) = factors.orientation.sin_cos();
    let mut mask = Array2::<f64>::zeros((side, side));
    for py in 0..side {
        for px in 0..side {
            let qx = px as f64 + 0.5 - center;
            let qy = py as f64 + 0.5 - center;
            // Rotate into shape-local coordinates.
            let lx = cos_t * qx + sin_t * qy;
            let ly = -sin_t * qx + cos_t * qy;
            let d = shape_distance(factors.shape_id, lx, ly, r);
            mask[[py, px]] = (0.5 - d).clamp(0.0, 1.0);
        }
    }
    Ok(mask)
}

/// Render one sample to (H, W, 3) uint8. Deterministic in the factors.
pub fn render(factors: &FactorTuple, side: usize) -> Result<Array3<u8>> {
    let mask = silhouette(factors, side)?;
    let obj = hsv_to_rgb(factors.object_hue, 0.9, 0.95);
    let bg = hsv_to_rgb(factors.background_hue, 0.45, 0.55);
    let mut img = Array3::<u8>::zeros((side, side, 3));
    for py in 0..side {
        for px in 0..side {
            let a = mask[[py, px]];
            for c in 0..3 {
                let v = a * obj[c] + (1.0 - a) * bg[c];
                img[[py, px, c]] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

/// Generate the full factorial grid and write the container to `path`.
pub fn generate_grid(manifest: &DatasetManifest, path: &std::path::Path) -> Result<()> {
    let side = manifest.image_shape[0];
    let g = manifest.grid;
    let mut images: Vec<u8> = Vec::with_capacity(manifest.count * side * side * 3);
    let mut table: Vec<u16> = Vec::with_capacity(manifest.count * 5);
    for s in 0..g[0] {
        for oh in 0..g[1] {
            for bh in 0..g[2] {
                for sc in 0..g[3] {
                    for or_ in 0..g[4] {
                        let idx = [s, oh, bh, sc, or_];
                        let factors = manifest.factors_at(idx);
                        let img = render(&factors, side)?;
                        images.extend(img.iter().copied());
                        table.extend(idx.iter().map(|&v| v as u16));
                    }
                }
            }
        }
    }
    let header = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut buf = Vec::with_capacity(6 + 4 + header.len() + images.len() + table.len() * 2);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&images);
    for v in table {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Loaded dataset with random access by index and the deterministic
/// train/test split.
pub struct Dataset {
    manifest: DatasetManifest,
    images: Vec<u8>,
    factor_table: Vec<u16>,
}

impl Dataset {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        if data.len() < 10 || &data[..6] != MAGIC {
            return Err(Error::format("not a dataset container (bad magic)"));
        }
        let header_len = u32::from_le_bytes(data[6..10].try_into().unwrap()) as usize;
        if data.len() < 10 + header_len {
            return Err(Error::format("dataset header truncated"));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&data[10..10 + header_len])
            .map_err(|e| Error::format(format!("dataset manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "dataset format version {} unsupported (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let side = manifest.image_shape[0];
        let image_bytes = manifest.count * side * side * 3;
        let table_bytes = manifest.count * 5 * 2;
        let expected = 10 + header_len + image_bytes + table_bytes;
        if data.len() != expected {
            return Err(Error::format(format!(
                "dataset length {} does not match manifest (expected {expected})",
                data.len()
            )));
        }
        let images = data[10 + header_len..10 + header_len + image_bytes].to_vec();
        let factor_table: Vec<u16> = data[10 + header_len + image_bytes..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            manifest,
            images,
            factor_table,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::invalid(format!(
                "sample index {index} out of range ({} samples)",
                self.len()
            )));
        }
        Ok(())
    }

    /// Raw uint8 image bytes (H*W*3) of one sample.
    pub fn image_bytes(&self, index: usize) -> Result<&[u8]> {
        self.check_index(index)?;
        let side = self.manifest.image_shape[0];
        let stride = side * side * 3;
        Ok(&self.images[index * stride..(index + 1) * stride])
    }

    /// Image as (3, H, W) float64 in [0, 1] — the model's input layout.
    pub fn image(&self, index: usize) -> Result<Array3<f64>> {
        let side = self.manifest.image_shape[0];
        let bytes = self.image_bytes(index)?;
        let mut out = Array3::<f64>::zeros((3, side, side));
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    out[[c, y, x]] = bytes[(y * side + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Ok(out)
    }

    pub fn factor_indices(&self, index: usize) -> Result<[usize; 5]> {
        self.check_index(index)?;
        let row = &self.factor_table[index * 5..(index + 1) * 5];
        Ok([
            row[0] as usize,
            row[1] as usize,
            row[2] as usize,
            row[3] as usize,
            row[4] as usize,
        ])
    }

    pub fn factors(&self, index: usize) -> Result<FactorTuple> {
        Ok(self.manifest.factors_at(self.factor_indices(index)?))
    }

    pub fn shape_id(&self, index: usize) -> Result<usize> {
        Ok(self.factor_indices(index)?[0])
    }

    /// Deterministic 90/10 split derived from the manifest seed.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rng = child_rng(self.manifest.seed, "split", &[]);
        let order = crate::objective::shuffle_indices(self.len(), &mut rng);
        let test_count = ((self.len() as f64 * TEST_FRACTION).round() as usize)
            .clamp(1, self.len().saturating_sub(1).max(1));
        let test = order[..test_count].to_vec();
        let train = order[test_count..].to_vec();
        (train, test)
    }

    /// Export samples as PNG files named `sample_{index}_{shape}.png`.
    pub fn export_pngs(&self, dir: &std::path::Path, limit: Option<usize>) -> Result<usize> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        let side = self.manifest.image_shape[0] as u32;
        let count = limit.unwrap_or(self.len()).min(self.len());
        for index in 0..count {
            let bytes = self.image_bytes(index)?.to_vec();
            let img = image::RgbImage::from_raw(side, side, bytes)
                .expect("buffer length matches dims");
            let name = format!("sample_{index:05}_{}.png", SHAPE_NAMES[self.shape_id(index)?]);
            let path = dir.join(name);
            img.save(&path)
                .map_err(|e| Error::format(format!("png encode {}: {e}", path.display())))?;
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_manifest() -> DatasetManifest {
        DatasetManifest::new([4, 2, 2, 2, 3], 32, 7).unwrap()
    }

    fn mid_factors(shape_id: usize) -> FactorTuple {
        FactorTuple {
            shape_id,
            object_hue: 0.1,
            background_hue: 0.6,
            scale: 1.0,
            orientation: 0.7,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let f = mid_factors(2);
        let a = render(&f, 32).unwrap();
        let b = render(&f, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_factors_rejected() {
        let mut f = mid_factors(0);
        f.scale = 0.3;
        assert!(render(&f, 32).is_err());
        let mut f = mid_factors(0);
        f.shape_id = 9;
        assert!(render(&f, 32).is_err());
        let mut f = mid_factors(0);
        f.object_hue = 1.5;
        assert!(render(&f, 32).is_err());
    }

    #[test]
    fn area_quadruples_from_half_to_full_scale() {
        for shape_id in 0..NUM_SHAPE_KINDS {
            let mut small = mid_factors(shape_id);
            small.scale = 0.5;
            let mut large = mid_factors(shape_id);
            large.scale = 1.0;
            let count = |f: &FactorTuple| {
                silhouette(f, 64)
                    .unwrap()
                    .iter()
                    .filter(|&&a| a >= 0.5)
                    .count() as f64
            };
            let ratio = count(&large) / count(&small);
            assert!(
                (3.5..=4.5).contains(&ratio),
                "shape {shape_id}: area ratio {ratio}"
            );
        }
    }

    #[test]
    fn circle_silhouette_ignores_orientation() {
        let mut a = mid_factors(1);
        a.orientation = 0.3;
        let mut b = mid_factors(1);
        b.orientation = 2.9;
        assert_eq!(silhouette(&a, 32).unwrap(), silhouette(&b, 32).unwrap());
    }

    #[test]
    fn distinct_shapes_render_distinct_images() {
        for a in 0..NUM_SHAPE_KINDS {
            for b in (a + 1)..NUM_SHAPE_KINDS {
                let ia = render(&mid_factors(a), 32).unwrap();
                let ib = render(&mid_factors(b), 32).unwrap();
                let diff: u64 = ia
                    .iter()
                    .zip(ib.iter())
                    .map(|(x, y)| (*x as i64 - *y as i64).unsigned_abs())
                    .sum();
                assert!(diff > 0, "shapes {a} and {b} identical");
            }
        }
    }

    #[test]
    fn labels_recoverable_by_nearest_template_oracle() {
        // For every sample of a small grid, rendering all four shapes at the
        // sample's factors and taking the nearest template must recover the
        // labeled shape.
        let manifest = small_manifest();
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.bin");
        generate_grid(&manifest, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        for idx in 0..ds.len() {
            let factors = ds.factors(idx).unwrap();
            let img = ds.image_bytes(idx).unwrap();
            let mut best = (usize::MAX, u64::MAX);
            for shape in 0..NUM_SHAPE_KINDS {
                let mut t = factors;
                t.shape_id = shape;
                let template = render(&t, 32).unwrap();
                let dist: u64 = template
                    .iter()
                    .zip(img.iter())
                    .map(|(a, b)| {
                        let d = *a as i64 - *b as i64;
                        (d * d) as u64
                    })
                    .sum();
                if dist < best.1 {
                    best = (shape, dist);
                }
            }
            assert_eq!(best.0, factors.shape_id, "sample {idx} misclassified");
        }
    }

    #[test]
    fn grid_count_matches_product() {
        let manifest = DatasetManifest::new([4, 3, 3, 2, 4], 32, 0).unwrap();
        assert_eq!(manifest.count, 288);
        assert_eq!(DatasetManifest::new(default_grid(), 32, 0).unwrap().count, 4608);
    }

    #[test]
    fn container_round_trip_is_lossless() {
        let manifest = small_manifest();
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.bin");
        generate_grid(&manifest, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.manifest(), &manifest);
        assert_eq!(ds.len(), 96);
        for idx in [0usize, 17, 95] {
            let coords = ds.factor_indices(idx).unwrap();
            assert_eq!(ds.manifest().flat_index(coords), idx);
            let expected = render(&manifest.factors_at(coords), 32).unwrap();
            let expected_bytes: Vec<u8> = expected.iter().copied().collect();
            assert_eq!(ds.image_bytes(idx).unwrap(), &expected_bytes[..]);
        }
        let img = ds.image(3).unwrap();
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let manifest = small_manifest();
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        generate_grid(&manifest, &p1).unwrap();
        generate_grid(&manifest, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let manifest = small_manifest();
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.bin");
        generate_grid(&manifest, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        let (train1, test1) = ds.split();
        let (train2, test2) = ds.split();
        assert_eq!(train1, train2);
        assert_eq!(test1, test2);
        assert_eq!(train1.len() + test1.len(), ds.len());
        assert_eq!(test1.len(), 10); // 10% of 96, rounded
        for t in &test1 {
            assert!(!train1.contains(t));
        }
    }

    #[test]
    fn out_of_range_and_corrupt_files_error() {
        let manifest = small_manifest();
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.bin");
        generate_grid(&manifest, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert!(ds.image(96).is_err());
        assert!(ds.factors(1000).is_err());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format(_))));

        let garbage = dir.path().join("garbage.bin");
        std::fs::write(&garbage, b"not a dataset").unwrap();
        assert!(matches!(Dataset::load(&garbage), Err(Error::Format(_))));
    }

    #[test]
    fn png_export_writes_files() {
        let manifest = small_manifest();
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.bin");
        generate_grid(&manifest, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();
        let out = dir.path().join("pngs");
        let written = ds.export_pngs(&out, Some(5)).unwrap();
        assert_eq!(written, 5);
        assert_eq!(std::fs::read_dir(&out).unwrap().count(), 5);
    }
}
