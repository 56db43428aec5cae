//! On-disk formats: 8-bit grayscale PNGs, scene directories and the
//! dataset index.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::postprocess::InstanceSegResult;
use crate::synth::{Scene, SceneSpec};
use crate::tensor::Tensor;

pub const DATASET_INDEX: &str = "dataset.json";
pub const SCENE_META: &str = "scene.json";
pub const IMAGE_FILE: &str = "image.png";
pub const RESULT_FILE: &str = "result.json";

/// `round(255 * v)` with halves rounded up, after clamping to `[0, 1]`.
pub fn to_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn write_gray_png(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    w.write_image_data(pixels)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    w.finish().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Reads an 8-bit grayscale PNG as `(height, width, pixels)`.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let err = |e: png::DecodingError| Error::Png(format!("{}: {e}", path.display()));
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "{}: expected 8-bit grayscale, got {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_gray_png(path, mask.width(), mask.height(), &px)
}

pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (h, w, px) = read_gray_png(path)?;
    if let Some(v) = px.iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Dataset(format!("{}: non-binary mask value {v}", path.display())));
    }
    Mask::from_vec(h, w, px.into_iter().map(|v| v == 255).collect())
}

pub fn write_image_png(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let px: Vec<u8> = image.data().iter().map(|&v| to_u8(v as f64)).collect();
    write_gray_png(path, w, h, &px)
}

/// Reads a grayscale PNG as an `[H, W]` image scaled to `[0, 1]`.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let (h, w, px) = read_gray_png(path)?;
    Tensor::new(vec![h, w], px.into_iter().map(|v| v as f32 / 255.0).collect())
}

pub fn instance_file(i: usize) -> String {
    format!("inst_{i:03}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub height: usize,
    pub width: usize,
    pub instance_count: usize,
    pub generator_spec: Option<SceneSpec>,
    pub seed: Option<u64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn write_masks(dir: &Path, masks: &[Mask]) -> Result<()> {
    for (i, m) in masks.iter().enumerate() {
        write_mask_png(dir.join(instance_file(i)), m)?;
    }
    Ok(())
}

fn read_masks(dir: &Path, count: usize, dims: (usize, usize)) -> Result<Vec<Mask>> {
    (0..count)
        .map(|i| {
            let m = read_mask_png(dir.join(instance_file(i)))?;
            if m.dims() != dims {
                return Err(Error::Dataset(format!(
                    "{}: mask {:?} does not match scene {:?}",
                    dir.join(instance_file(i)).display(),
                    m.dims(),
                    dims
                )));
            }
            Ok(m)
        })
        .collect()
}

pub fn write_scene(dir: impl AsRef<Path>, scene: &Scene, meta: &SceneMeta) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_image_png(dir.join(IMAGE_FILE), &scene.image)?;
    write_masks(dir, &scene.instances)?;
    write_json(&dir.join(SCENE_META), meta)
}

pub fn read_scene(dir: impl AsRef<Path>) -> Result<(Scene, SceneMeta)> {
    let dir = dir.as_ref();
    let meta: SceneMeta = read_json(&dir.join(SCENE_META))?;
    let image = read_image_png(dir.join(IMAGE_FILE))?;
    if image.shape() != [meta.height, meta.width] {
        return Err(Error::Dataset(format!(
            "{}: image is {:?}, metadata says {}x{}",
            dir.display(),
            image.shape(),
            meta.height,
            meta.width
        )));
    }
    let instances = read_masks(dir, meta.instance_count, (meta.height, meta.width))?;
    Ok((Scene { image, instances }, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub count: usize,
    pub seed: Option<u64>,
    pub generator_spec: Option<SceneSpec>,
    /// Scene directory names relative to the dataset root.
    pub scenes: Vec<String>,
}

pub fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn write_index(root: impl AsRef<Path>, index: &DatasetIndex) -> Result<()> {
    write_json(&root.as_ref().join(DATASET_INDEX), index)
}

pub fn read_index(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let index: DatasetIndex = read_json(&root.as_ref().join(DATASET_INDEX))?;
    if index.count != index.scenes.len() {
        return Err(Error::Dataset(format!(
            "index lists {} scenes but count is {}",
            index.scenes.len(),
            index.count
        )));
    }
    Ok(index)
}

/// Loads every scene listed in the dataset index, in index order.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let root = root.as_ref();
    let index = read_index(root)?;
    index
        .scenes
        .iter()
        .map(|name| read_scene(root.join(name)).map(|(s, _)| s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub layer: usize,
    pub pixel_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub instance_count: usize,
    pub instances: Vec<InstanceSummary>,
}

impl From<&InstanceSegResult> for ResultSummary {
    fn from(r: &InstanceSegResult) -> Self {
        Self {
            instance_count: r.len(),
            instances: r
                .instances
                .iter()
                .map(|i| InstanceSummary {
                    layer: i.layer,
                    pixel_count: i.mask.count(),
                })
                .collect(),
        }
    }
}

/// Writes predicted instances as `inst_XXX.png` plus `result.json`.
pub fn write_result(dir: impl AsRef<Path>, result: &InstanceSegResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_masks(dir, &result.masks())?;
    write_json(&dir.join(RESULT_FILE), &ResultSummary::from(result))
}

/// Reads predicted masks written by [`write_result`].
pub fn read_result_masks(dir: impl AsRef<Path>) -> Result<Vec<Mask>> {
    let dir = dir.as_ref();
    let summary: ResultSummary = read_json(&dir.join(RESULT_FILE))?;
    (0..summary.instance_count)
        .map(|i| read_mask_png(dir.join(instance_file(i))))
        .collect()
}

pub fn write_json_file(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    write_json(path.as_ref(), value)
}

pub fn read_json_file<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    read_json(path.as_ref())
}

/// Sorted subdirectory names of `root`.
pub fn list_subdirs(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}
