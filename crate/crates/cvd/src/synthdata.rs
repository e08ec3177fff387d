//! Procedural cross-view scenes with ground-truth content and viewpoint
//! factors, plus the CVDS on-disk dataset format.
//!
//! Content is a sparse object layout on a coarse grid; the satellite view
//! is the canonical nadir rasterization and drone views are affine-warped
//! (rotation, anisotropic scale, shear) with a linear shading field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CvdError, Result};

pub const GRID: usize = 6;
pub const OBJECTS_PER_SCENE: usize = 5;
pub const DATASET_MAGIC: [u8; 4] = *b"CVDS";
pub const DATASET_VERSION: u32 = 1;

const SPLIT_SEED: u64 = 0x5eed_5e11;

/// World-frame sun direction and per-view jitter (radians).
pub const SUN_DIR: f64 = 1.0;
pub const SUN_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub cell: (u8, u8),
    pub shape: ShapeKind,
    pub tone: f64,
}

/// The view-agnostic factor: what is in the scene and where.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFactor {
    pub scene_id: u32,
    pub layout: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Satellite,
    Drone,
}

impl ViewKind {
    pub fn to_byte(self) -> u8 {
        match self {
            ViewKind::Satellite => 0,
            ViewKind::Drone => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<ViewKind> {
        match b {
            0 => Some(ViewKind::Satellite),
            1 => Some(ViewKind::Drone),
            _ => None,
        }
    }
}

/// The view-specific factor: camera geometry and illumination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewpointFactor {
    pub view_kind: ViewKind,
    pub azimuth: f64,
    pub tilt: f64,
    pub scale: f64,
    pub shading_dir: f64,
    pub shading_mag: f64,
}

impl ViewpointFactor {
    /// Canonical nadir frame: identity transform, no shading.
    pub fn satellite() -> ViewpointFactor {
        ViewpointFactor {
            view_kind: ViewKind::Satellite,
            azimuth: 0.0,
            tilt: 0.0,
            scale: 1.0,
            shading_dir: 0.0,
            shading_mag: 0.0,
        }
    }

    pub fn sample_drone(rng: &mut ChaCha8Rng) -> ViewpointFactor {
        // Quantize through f32 so the in-memory factors equal what the
        // CVDS file stores and round-trips stay bitwise lossless.
        let mut q = |lo: f64, hi: f64| rng.gen_range(lo..hi) as f32 as f64;
        let azimuth = q(0.0, std::f64::consts::TAU);
        // World-anchored illumination: the sun direction is fixed in the
        // scene, so the shading gradient co-rotates with the camera
        // azimuth (up to atmospheric jitter). Viewpoint therefore shows
        // up as appearance, not only geometry.
        let jitter = q(-SUN_JITTER, SUN_JITTER);
        ViewpointFactor {
            view_kind: ViewKind::Drone,
            azimuth,
            tilt: q(0.0, 0.5),
            scale: q(0.8, 1.25),
            shading_dir: ((SUN_DIR - azimuth + jitter).rem_euclid(std::f64::consts::TAU)) as f32
                as f64,
            shading_mag: q(0.25, 0.3),
        }
    }

    fn is_identity(&self) -> bool {
        self.azimuth == 0.0 && self.tilt == 0.0 && self.scale == 1.0
    }
}

/// One stored image with its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub scene_id: u32,
    pub view_kind: ViewKind,
    pub vp: ViewpointFactor,
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: u32,
    pub channels: u32,
    pub records: Vec<DatasetRecord>,
}

/// A drone record paired with its scene's satellite record.
#[derive(Debug, Clone, Copy)]
pub struct ScenePair {
    pub scene_id: u32,
    pub satellite: usize,
    pub drone: usize,
}

impl Dataset {
    pub fn n_scenes(&self) -> usize {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.scene_id).collect();
        ids.dedup();
        ids.len()
    }

    /// All (satellite, drone) index pairs, ordered by (scene_id, drone order).
    pub fn pairs(&self) -> Vec<ScenePair> {
        let mut sat_of = std::collections::BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.view_kind == ViewKind::Satellite {
                sat_of.insert(r.scene_id, i);
            }
        }
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.view_kind == ViewKind::Drone)
            .map(|(i, r)| ScenePair {
                scene_id: r.scene_id,
                satellite: sat_of[&r.scene_id],
                drone: i,
            })
            .collect()
    }
}

/// Draw a scene layout: distinct grid cells, uniform shapes and tones.
pub fn sample_scene(scene_id: u32, rng: &mut ChaCha8Rng) -> Result<ContentFactor> {
    sample_scene_with(scene_id, rng, OBJECTS_PER_SCENE, GRID)
}

pub fn sample_scene_with(scene_id: u32, rng: &mut ChaCha8Rng, m: usize, grid: usize) -> Result<ContentFactor> {
    if m > grid * grid {
        return Err(CvdError::Config(format!(
            "{m} objects do not fit a {grid}x{grid} grid"
        )));
    }
    // Partial Fisher-Yates over all cells keeps the draw uniform.
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    for i in 0..m {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let layout = cells[..m]
        .iter()
        .map(|&c| {
            let shape = match rng.gen_range(0..3u8) {
                0 => ShapeKind::Square,
                1 => ShapeKind::Disc,
                _ => ShapeKind::Cross,
            };
            let tone = rng.gen_range(0.2..=1.0);
            SceneObject {
                cell: ((c / grid) as u8, (c % grid) as u8),
                shape,
                tone,
            }
        })
        .collect();
    Ok(ContentFactor { scene_id, layout })
}

fn rasterize(content: &ContentFactor, size: usize) -> Vec<f64> {
    let mut img = vec![0.0f64; size * size];
    let cell = size as f64 / GRID as f64;
    for obj in &content.layout {
        let (r, c) = (obj.cell.0 as f64, obj.cell.1 as f64);
        let cy = (r + 0.5) * cell;
        let cx = (c + 0.5) * cell;
        let y0 = (r * cell).floor().max(0.0) as usize;
        let y1 = (((r + 1.0) * cell).ceil() as usize).min(size);
        let x0 = (c * cell).floor().max(0.0) as usize;
        let x1 = (((c + 1.0) * cell).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = (y as f64 + 0.5) - cy;
                let dx = (x as f64 + 0.5) - cx;
                let inside = match obj.shape {
                    ShapeKind::Square => dx.abs() <= 0.40 * cell && dy.abs() <= 0.40 * cell,
                    ShapeKind::Disc => dx * dx + dy * dy <= (0.42 * cell) * (0.42 * cell),
                    ShapeKind::Cross => {
                        (dx.abs() <= 0.15 * cell && dy.abs() <= 0.42 * cell)
                            || (dy.abs() <= 0.15 * cell && dx.abs() <= 0.42 * cell)
                    }
                };
                if inside {
                    img[y * size + x] = obj.tone;
                }
            }
        }
    }
    img
}

fn bilinear(img: &[f64], size: usize, x: f64, y: f64) -> f64 {
    // Continuous coords where pixel (i,j) is centered at (j+0.5, i+0.5);
    // zero outside the canvas.
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let wx = fx - x0;
    let wy = fy - y0;
    let mut acc = 0.0;
    for (dy, wyv) in [(0i64, 1.0 - wy), (1, wy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= size as i64 || wyv == 0.0 {
            continue;
        }
        for (dx, wxv) in [(0i64, 1.0 - wx), (1, wx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= size as i64 || wxv == 0.0 {
                continue;
            }
            acc += wyv * wxv * img[yy as usize * size + xx as usize];
        }
    }
    acc
}

/// Render one view of a scene: rasterize the canonical layout, apply the
/// viewpoint's affine warp, add the shading field, clamp to [0,1].
pub fn render(content: &ContentFactor, vp: &ViewpointFactor, size: usize) -> Vec<f32> {
    assert!(size >= 16, "render size must be >= 16");
    let canonical = rasterize(content, size);
    let mut out = vec![0.0f64; size * size];
    if vp.is_identity() {
        out.copy_from_slice(&canonical);
    } else {
        // A = R(azimuth) . Shear(tilt) . diag(scale, 1); inverse-map each
        // output pixel center back into the canonical frame.
        let (s, c) = vp.azimuth.sin_cos();
        let a = [
            [c * vp.scale, c * vp.tilt - s],
            [s * vp.scale, s * vp.tilt + c],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        let center = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let ux = (x as f64 + 0.5) - center;
                let uy = (y as f64 + 0.5) - center;
                let sx = inv[0][0] * ux + inv[0][1] * uy + center;
                let sy = inv[1][0] * ux + inv[1][1] * uy + center;
                out[y * size + x] = bilinear(&canonical, size, sx, sy);
            }
        }
    }
    if vp.shading_mag != 0.0 {
        let (sd, cd) = vp.shading_dir.sin_cos();
        let denom = cd.abs() + sd.abs();
        let half = (size - 1) as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let ux = (x as f64 - half) / (size - 1) as f64;
                let uy = (y as f64 - half) / (size - 1) as f64;
                let t = (ux * cd + uy * sd) / denom;
                out[y * size + x] += vp.shading_mag * (t + 0.5);
            }
        }
    }
    out.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// Build a dataset: one satellite view plus `views_per_scene` drone views
/// for each scene. Per-scene rng streams keep generation order-free.
pub fn generate_dataset(n_scenes: usize, views_per_scene: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n_scenes < 2 {
        return Err(CvdError::Config("need at least 2 scenes".into()));
    }
    let mut records = Vec::with_capacity(n_scenes * (views_per_scene + 1));
    for scene_id in 0..n_scenes as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(scene_id));
        let content = sample_scene(scene_id, &mut rng)?;
        let sat_vp = ViewpointFactor::satellite();
        records.push(DatasetRecord {
            scene_id,
            view_kind: ViewKind::Satellite,
            vp: sat_vp,
            pixels: render(&content, &sat_vp, size),
        });
        for _ in 0..views_per_scene {
            let vp = ViewpointFactor::sample_drone(&mut rng);
            records.push(DatasetRecord {
                scene_id,
                view_kind: ViewKind::Drone,
                vp,
                pixels: render(&content, &vp, size),
            });
        }
    }
    Ok(Dataset {
        size: size as u32,
        channels: 1,
        records,
    })
}

/// Scene-id split with no leakage: shuffle ids with a fixed stream, even
/// positions train, odd positions test.
pub fn split_scene_ids(n_scenes: usize) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = (0..n_scenes as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED);
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (pos, id) in ids.into_iter().enumerate() {
        if pos % 2 == 0 {
            train.push(id);
        } else {
            test.push(id);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Keep only records whose scene_id is in `ids`.
pub fn filter_by_scene(ds: &Dataset, ids: &[u32]) -> Dataset {
    let keep: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
    Dataset {
        size: ds.size,
        channels: ds.channels,
        records: ds
            .records
            .iter()
            .filter(|r| keep.contains(&r.scene_id))
            .cloned()
            .collect(),
    }
}

pub fn dataset_file_len(n_records: usize, size: usize, channels: usize) -> u64 {
    20 + n_records as u64 * (4 + 1 + 5 * 4 + (channels * size * size) as u64 * 4)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.records.len() as u32).to_le_bytes())?;
    w.write_all(&ds.size.to_le_bytes())?;
    w.write_all(&ds.channels.to_le_bytes())?;
    for r in &ds.records {
        w.write_all(&r.scene_id.to_le_bytes())?;
        w.write_all(&[r.view_kind.to_byte()])?;
        for v in [r.vp.azimuth, r.vp.tilt, r.vp.scale, r.vp.shading_dir, r.vp.shading_mag] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for p in &r.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct TrackedReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> TrackedReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| CvdError::Format {
            offset: at,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, what)?;
        Ok(b[0])
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = TrackedReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(CvdError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(CvdError::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {DATASET_VERSION}"),
        });
    }
    let n_records = r.u32("record count")? as usize;
    let size = r.u32("image size")?;
    let channels = r.u32("channel count")?;
    if size == 0 || channels == 0 {
        return Err(CvdError::Format {
            offset: 12,
            msg: format!("degenerate dims {size}x{size}x{channels}"),
        });
    }
    let npix = (size * size * channels) as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let scene_id = r.u32("scene id")?;
        let kind_at = r.offset;
        let kind_byte = r.u8("view kind")?;
        let view_kind = ViewKind::from_byte(kind_byte).ok_or(CvdError::Format {
            offset: kind_at,
            msg: format!("invalid view kind {kind_byte}"),
        })?;
        let azimuth = r.f32("azimuth")? as f64;
        let tilt = r.f32("tilt")? as f64;
        let scale = r.f32("scale")? as f64;
        let shading_dir = r.f32("shading dir")? as f64;
        let shading_mag = r.f32("shading mag")? as f64;
        let mut pixels = vec![0f32; npix];
        let mut buf = vec![0u8; npix * 4];
        r.take(&mut buf, "pixels")?;
        for (p, chunk) in pixels.iter_mut().zip(buf.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        records.push(DatasetRecord {
            scene_id,
            view_kind,
            vp: ViewpointFactor {
                view_kind,
                azimuth,
                tilt,
                scale,
                shading_dir,
                shading_mag,
            },
            pixels,
        });
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(CvdError::Format {
            offset: r.offset,
            msg: "trailing bytes after final record".into(),
        });
    }
    Ok(Dataset {
        size,
        channels,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_sampling_is_seeded_and_distinct() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_scene(0, &mut r1).unwrap();
        let b = sample_scene(0, &mut r2).unwrap();
        assert_eq!(a, b);
        let mut cells: Vec<_> = a.layout.iter().map(|o| o.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), OBJECTS_PER_SCENE);
    }

    #[test]
    fn single_cell_grid_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_scene_with(0, &mut rng, 1, 1).unwrap();
        assert_eq!(s.layout[0].cell, (0, 0));
        assert!(sample_scene_with(0, &mut rng, 2, 1).is_err());
    }

    #[test]
    fn cell_occupancy_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut counts = vec![0u32; GRID * GRID];
        let draws = 10_000;
        for i in 0..draws {
            for o in sample_scene(i, &mut rng).unwrap().layout {
                counts[o.cell.0 as usize * GRID + o.cell.1 as usize] += 1;
            }
        }
        let n = (draws as usize * OBJECTS_PER_SCENE) as f64;
        let p = 1.0 / (GRID * GRID) as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - n * p).abs();
            assert!(dev < 4.0 * sigma, "cell count {c} deviates {dev} (> 4 sigma {sigma})");
        }
    }

    #[test]
    fn satellite_render_is_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let content = sample_scene(0, &mut rng).unwrap();
        let sat = render(&content, &ViewpointFactor::satellite(), 32);
        let raster: Vec<f32> = rasterize(&content, 32)
            .iter()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect();
        assert_eq!(sat, raster);
    }

    #[test]
    fn half_turn_on_symmetric_layout_matches_canonical() {
        // Layout closed under 180-degree rotation of the grid.
        let layout = vec![
            SceneObject { cell: (1, 2), shape: ShapeKind::Disc, tone: 0.8 },
            SceneObject { cell: (4, 3), shape: ShapeKind::Disc, tone: 0.8 },
            SceneObject { cell: (0, 0), shape: ShapeKind::Square, tone: 0.5 },
            SceneObject { cell: (5, 5), shape: ShapeKind::Square, tone: 0.5 },
        ];
        let content = ContentFactor { scene_id: 0, layout };
        let canonical = render(&content, &ViewpointFactor::satellite(), 48);
        let mut vp = ViewpointFactor::satellite();
        vp.view_kind = ViewKind::Drone;
        vp.azimuth = std::f64::consts::PI;
        let rotated = render(&content, &vp, 48);
        for (a, b) in canonical.iter().zip(&rotated) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn shading_span_equals_magnitude() {
        let content = ContentFactor { scene_id: 0, layout: vec![] };
        let mut vp = ViewpointFactor::satellite();
        vp.view_kind = ViewKind::Drone;
        vp.shading_dir = 1.1;
        vp.shading_mag = 0.3;
        let size = 32;
        let img = render(&content, &vp, size);
        let max = img.iter().cloned().fold(f32::MIN, f32::max);
        let min = img.iter().cloned().fold(f32::MAX, f32::min);
        assert!(((max - min) as f64 - 0.3).abs() < 1.0 / size as f64);
    }

    #[test]
    fn generate_counts_and_determinism() {
        let a = generate_dataset(2, 1, 16, 7).unwrap();
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.pairs().len(), 2);
        let b = generate_dataset(2, 1, 16, 7).unwrap();
        assert_eq!(a, b);
        let big = generate_dataset(10, 4, 16, 7).unwrap();
        assert_eq!(big.pairs().len(), 40);
        assert_eq!(
            big.records.iter().filter(|r| r.view_kind == ViewKind::Satellite).count(),
            10
        );
    }

    #[test]
    fn satellite_invariant_to_drone_viewpoints() {
        let a = generate_dataset(3, 1, 16, 100).unwrap();
        let b = generate_dataset(3, 5, 16, 100).unwrap();
        for (ra, rb) in a
            .records
            .iter()
            .filter(|r| r.view_kind == ViewKind::Satellite)
            .zip(b.records.iter().filter(|r| r.view_kind == ViewKind::Satellite))
        {
            assert_eq!(ra.pixels, rb.pixels);
        }
    }

    #[test]
    fn split_is_leak_free_and_exhaustive() {
        let (train, test) = split_scene_ids(11);
        assert_eq!(train.len() + test.len(), 11);
        for id in &train {
            assert!(!test.contains(id));
        }
        let (t2, _) = split_scene_ids(11);
        assert_eq!(train, t2);
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cvds");
        let ds = generate_dataset(3, 2, 16, 42).unwrap();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
        let expect = dataset_file_len(ds.records.len(), 16, 1);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expect);
        // write -> read -> write is byte-identical
        let path2 = dir.path().join("d2.cvds");
        write_dataset(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_fails_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cvds");
        let ds = generate_dataset(2, 1, 16, 1).unwrap();
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(CvdError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cvds");
        let ds = generate_dataset(2, 1, 16, 1).unwrap();
        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_dataset(&path), Err(CvdError::Format { .. })));
    }
}
