//! Dataset and model persistence: a JSON index plus raw little-endian
//! binary grids with a magic/dimension header, chosen for bit-exact round
//! trips without heavy dependencies.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CramError, Result};
use crate::geometry::{CameraModel, RadarModel};
use crate::learner::{Affine, TinyHead};
use crate::scene::{
    generate_scene, render_frame, Scene, SceneConfig, SensorFrame,
};
use crate::types::{child_seed, BoolGrid, Grid};

/// Magic for dataset grids.
pub const GRID_MAGIC: &[u8; 4] = b"CRMF";
/// Magic for serialized model heads.
pub const HEAD_MAGIC: &[u8; 4] = b"CRMH";

/// One stored frame: the ground-truth scene, its renderings, and the seed
/// they were rendered with.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub scene: Scene,
    pub frame: SensorFrame,
    pub seed: u64,
}

/// A rendered dataset: generation settings, sensor models, and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub camera: CameraModel,
    pub radar: RadarModel,
    pub seed: u64,
    pub frames: Vec<DatasetFrame>,
}

/// Round every grid value to f32 precision, matching what the binary
/// format stores. Synthesized datasets are quantized at creation so the
/// save/load round trip is exact.
pub fn quantize_grid(g: &Grid) -> Grid {
    g.map(|v| v as f32 as f64)
}

fn quantize_frame(f: &mut SensorFrame) {
    f.camera_image = quantize_grid(&f.camera_image);
    f.true_depth = quantize_grid(&f.true_depth);
    f.radar_rf = quantize_grid(&f.radar_rf);
}

/// Generate and render `num_frames` scenes from a root seed, with per-frame
/// child seeds so the dataset is reproducible frame by frame.
pub fn synth_dataset(
    seed: u64,
    num_frames: usize,
    config: &SceneConfig,
    camera: &CameraModel,
    radar: &RadarModel,
) -> Result<Dataset> {
    let mut frames = Vec::with_capacity(num_frames);
    for i in 0..num_frames {
        let scene_seed = child_seed(seed, 2 * i as u64);
        let render_seed = child_seed(seed, 2 * i as u64 + 1);
        let scene = generate_scene(scene_seed, config)?;
        let mut frame = render_frame(&scene, camera, radar, config, render_seed)?;
        quantize_frame(&mut frame);
        frames.push(DatasetFrame { scene, frame, seed: render_seed });
    }
    Ok(Dataset {
        config: config.clone(),
        camera: camera.clone(),
        radar: radar.clone(),
        seed,
        frames,
    })
}

/// Write a grid: magic, u32 rows, u32 cols, then row-major f32 values,
/// all little-endian.
pub fn write_grid_bin(path: &Path, grid: &Grid) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + grid.data.len() * 4);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&(grid.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.cols as u32).to_le_bytes());
    for &v in &grid.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn parse_err(path: &Path, msg: impl Into<String>) -> CramError {
    CramError::Parse { location: path.display().to_string(), message: msg.into() }
}

/// Read a grid written by [`write_grid_bin`]. Malformed or truncated files
/// give a parse error naming the file and offset.
pub fn read_grid_bin(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path)?;
    read_grid_bytes(&bytes, path, GRID_MAGIC)
}

fn read_grid_bytes(bytes: &[u8], path: &Path, magic: &[u8; 4]) -> Result<Grid> {
    if bytes.len() < 12 {
        return Err(parse_err(path, format!("file too short ({} bytes) for header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(parse_err(path, format!("bad magic {:?} at offset 0", &bytes[..4])));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + rows * cols * 4;
    if bytes.len() != need {
        return Err(parse_err(
            path,
            format!("expected {need} bytes for {rows}x{cols} grid, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        let off = 12 + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok(Grid { rows, cols, data })
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    scene: Scene,
    seed: u64,
    camera_image: String,
    true_depth: String,
    depth_valid: String,
    radar_rf: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    config: SceneConfig,
    camera: CameraModel,
    radar: RadarModel,
    seed: u64,
    frames: Vec<FrameEntry>,
}

fn bool_to_grid(b: &BoolGrid) -> Grid {
    Grid {
        rows: b.rows,
        cols: b.cols,
        data: b.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    }
}

fn grid_to_bool(g: &Grid, path: &Path) -> Result<BoolGrid> {
    let mut data = Vec::with_capacity(g.data.len());
    for &v in &g.data {
        if v == 1.0 {
            data.push(true);
        } else if v == 0.0 {
            data.push(false);
        } else {
            return Err(parse_err(path, format!("mask value {v} is not 0 or 1")));
        }
    }
    Ok(BoolGrid { rows: g.rows, cols: g.cols, data })
}

/// Save a dataset as `index.json` plus one `.bin` per grid.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.frames.len());
    for (i, f) in ds.frames.iter().enumerate() {
        let names = [
            format!("frame_{i:04}_camera.bin"),
            format!("frame_{i:04}_depth.bin"),
            format!("frame_{i:04}_valid.bin"),
            format!("frame_{i:04}_rf.bin"),
        ];
        write_grid_bin(&dir.join(&names[0]), &f.frame.camera_image)?;
        write_grid_bin(&dir.join(&names[1]), &f.frame.true_depth)?;
        write_grid_bin(&dir.join(&names[2]), &bool_to_grid(&f.frame.depth_valid))?;
        write_grid_bin(&dir.join(&names[3]), &f.frame.radar_rf)?;
        let [camera_image, true_depth, depth_valid, radar_rf] = names;
        entries.push(FrameEntry {
            scene: f.scene.clone(),
            seed: f.seed,
            camera_image,
            true_depth,
            depth_valid,
            radar_rf,
        });
    }
    let index = IndexFile {
        config: ds.config.clone(),
        camera: ds.camera.clone(),
        radar: ds.radar.clone(),
        seed: ds.seed,
        frames: entries,
    };
    let file = fs::File::create(dir.join("index.json"))?;
    serde_json::to_writer_pretty(file, &index)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    let mut text = String::new();
    fs::File::open(&index_path)?.read_to_string(&mut text)?;
    let index: IndexFile = serde_json::from_str(&text)
        .map_err(|e| parse_err(&index_path, e.to_string()))?;
    let mut frames = Vec::with_capacity(index.frames.len());
    for e in index.frames {
        let valid_path: PathBuf = dir.join(&e.depth_valid);
        let frame = SensorFrame {
            camera_image: read_grid_bin(&dir.join(&e.camera_image))?,
            true_depth: read_grid_bin(&dir.join(&e.true_depth))?,
            depth_valid: grid_to_bool(&read_grid_bin(&valid_path)?, &valid_path)?,
            radar_rf: read_grid_bin(&dir.join(&e.radar_rf))?,
        };
        frames.push(DatasetFrame { scene: e.scene, frame, seed: e.seed });
    }
    Ok(Dataset {
        config: index.config,
        camera: index.camera,
        radar: index.radar,
        seed: index.seed,
        frames,
    })
}

/// Serialize heads to one file: the `CRMH` magic, a head count, then per
/// head its affine layers as (rows, cols, row-major f32 weights, f32 bias).
pub fn save_heads(heads: &[TinyHead], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(HEAD_MAGIC)?;
    f.write_all(&(heads.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for head in heads {
        buf.extend_from_slice(&(head.layers.len() as u32).to_le_bytes());
        for layer in &head.layers {
            buf.extend_from_slice(&(layer.w.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.w.ncols() as u32).to_le_bytes());
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    buf.extend_from_slice(&(layer.w[(r, c)] as f32).to_le_bytes());
                }
            }
            for &v in layer.b.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(parse_err(
                self.path,
                format!("truncated at offset {} (needed {n} more bytes)", self.off),
            ));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

/// Load heads written by [`save_heads`]. Weights come back at f32
/// precision.
pub fn load_heads(path: &Path) -> Result<Vec<TinyHead>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, off: 0, path };
    let magic = cur.take(4)?;
    if magic != HEAD_MAGIC {
        return Err(parse_err(path, format!("bad magic {magic:?} at offset 0")));
    }
    let num_heads = cur.u32()?;
    let mut heads = Vec::with_capacity(num_heads);
    for _ in 0..num_heads {
        let num_layers = cur.u32()?;
        if num_layers == 0 || num_layers > 8 {
            return Err(parse_err(path, format!("implausible layer count {num_layers}")));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let rows = cur.u32()?;
            let cols = cur.u32()?;
            let mut w = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    w[(r, c)] = cur.f32()?;
                }
            }
            let mut b = DVector::zeros(rows);
            for r in 0..rows {
                b[r] = cur.f32()?;
            }
            layers.push(Affine { w, b });
        }
        heads.push(TinyHead { layers });
    }
    if cur.off != bytes.len() {
        return Err(parse_err(path, format!("{} trailing bytes", bytes.len() - cur.off)));
    }
    Ok(heads)
}
