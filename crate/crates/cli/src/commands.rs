use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use layerseg::io::{self, DatasetIndex, SceneMeta};
use layerseg::pipeline::infer as infer_image;
use layerseg::synth::{generate_dataset, scene_seed};
use layerseg::train::{train_phase1, train_phase2, EpochEvent};
use layerseg::{Checkpoint, Mask, ParameterSet, PostprocessParams, SceneSpec, Tensor, TrainConfig};

use crate::manifest::RunManifest;

pub const PHASE1_CKPT: &str = "phase1_best.ckpt";
pub const PHASE2_CKPT: &str = "phase2_best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn gen_data(spec_path: &Path, count: usize, out: &Path, seed: u64) -> Result<()> {
    let spec: SceneSpec = io::read_json_file(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    spec.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let generated = generate_dataset(&spec, count, seed)?;
    let mut names = Vec::with_capacity(count);
    for (i, g) in generated.iter().enumerate() {
        if g.truncated {
            log::warn!("scene {i}: placed {} of {} objects", g.scene.instances.len(), g.requested);
        }
        let name = io::scene_dir_name(i);
        let s = scene_seed(seed, i);
        let meta = SceneMeta {
            height: spec.height,
            width: spec.width,
            instance_count: g.scene.instances.len(),
            generator_spec: Some(spec.with_seed(s)),
            seed: Some(s),
        };
        io::write_scene(out.join(&name), &g.scene, &meta)?;
        names.push(name);
    }
    io::write_index(
        out,
        &DatasetIndex {
            count,
            seed: Some(seed),
            generator_spec: Some(spec),
            scenes: names,
        },
    )?;

    // read everything back so a broken dataset fails here, not in training
    let scenes = io::read_dataset(out)?;
    for (i, (back, g)) in scenes.iter().zip(&generated).enumerate() {
        ensure!(back.instances == g.scene.instances, "scene {i}: masks changed on disk");
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn train(data: &Path, config_path: &Path, out: &Path, seed: u64, resume_phase1: Option<&Path>) -> Result<()> {
    let mut config: TrainConfig =
        io::read_json_file(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    config.seed = seed;
    config.validate()?;
    let scenes = io::read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    ensure!(!scenes.is_empty(), "dataset {} is empty", data.display());
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json_file(out.join(CONFIG_FILE), &config)?;

    let mut manifest = RunManifest::new(out, data, &config);
    manifest.phase1_checkpoint = Some(PHASE1_CKPT.into());
    manifest.phase2_checkpoint = Some(PHASE2_CKPT.into());
    manifest.log = Some(LOG_FILE.into());
    let result = run_phases(&scenes, &config, out, resume_phase1, &mut manifest);
    manifest.write()?;
    result
}

fn run_phases(
    scenes: &[layerseg::Scene],
    config: &TrainConfig,
    out: &Path,
    resume_phase1: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<()> {
    let mut log = BufWriter::new(File::create(out.join(LOG_FILE))?);
    let network = config.network;
    let mut observer = |e: EpochEvent<'_>| -> layerseg::Result<()> {
        serde_json::to_writer(&mut log, e.log)?;
        log.write_all(b"\n")?;
        log.flush()?;
        if let Some(best) = e.best {
            let name = if e.log.phase.number() == 1 { PHASE1_CKPT } else { PHASE2_CKPT };
            Checkpoint {
                config: network,
                params: best.clone(),
            }
            .save(out.join(name))?;
        }
        Ok(())
    };

    let phase1: ParameterSet = match resume_phase1 {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ensure!(
                ck.config == network,
                "checkpoint network {:?} differs from config network {:?}",
                ck.config,
                network
            );
            let target = out.join(PHASE1_CKPT);
            if std::fs::canonicalize(path).ok() != std::fs::canonicalize(&target).ok() {
                ck.save(&target)?;
            }
            ck.params
        }
        None => train_phase1(scenes, config, &mut observer).context("phase 1")?.best_params,
    };
    manifest.phases_completed.push(1);
    manifest.write()?;

    train_phase2(scenes, &phase1, config, &mut observer).context("phase 2")?;
    manifest.phases_completed.push(2);
    Ok(())
}

fn load_image(input: &Path) -> Result<Tensor<f32>> {
    let path = if input.is_dir() { input.join(io::IMAGE_FILE) } else { input.to_path_buf() };
    io::read_image_png(&path).with_context(|| format!("reading image {}", path.display()))
}

pub fn infer(ckpt: &Path, input: &Path, out: &Path, post: &PostprocessParams) -> Result<()> {
    post.validate()?;
    let ck = load_checkpoint(ckpt)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if input.join(io::DATASET_INDEX).is_file() {
        io::read_index(input)?
            .scenes
            .iter()
            .map(|name| (input.join(name), out.join(name)))
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    for (src, dst) in jobs {
        let image = load_image(&src)?;
        let result =
            infer_image(&image, &ck.params, &ck.config, post).with_context(|| format!("segmenting {}", src.display()))?;
        io::write_result(&dst, &result)?;
    }
    Ok(())
}

/// Predicted masks of one scene: listed in `result.json` when present,
/// otherwise every consecutive `inst_XXX.png`.
fn read_prediction(dir: &Path) -> Result<Vec<Mask>> {
    if dir.join(io::RESULT_FILE).is_file() {
        return Ok(io::read_result_masks(dir)?);
    }
    let mut masks = Vec::new();
    while dir.join(io::instance_file(masks.len())).is_file() {
        masks.push(io::read_mask_png(dir.join(io::instance_file(masks.len())))?);
    }
    Ok(masks)
}

pub fn eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let index = io::read_index(gt).with_context(|| format!("reading dataset {}", gt.display()))?;
    let gt_names: BTreeSet<&String> = index.scenes.iter().collect();
    let pred_names = io::list_subdirs(pred).with_context(|| format!("listing {}", pred.display()))?;
    let pred_set: BTreeSet<&String> = pred_names.iter().collect();
    let missing: Vec<_> = gt_names.difference(&pred_set).collect();
    let extra: Vec<_> = pred_set.difference(&gt_names).collect();
    if !missing.is_empty() || !extra.is_empty() {
        bail!("scene sets differ: missing predictions for {missing:?}; unexpected prediction dirs {extra:?}");
    }

    let mut preds = Vec::with_capacity(index.count);
    let mut gts = Vec::with_capacity(index.count);
    for name in &index.scenes {
        let (scene, _) = io::read_scene(gt.join(name))?;
        let p = read_prediction(&pred.join(name))?;
        if let Some(m) = p.iter().find(|m| m.dims() != (scene.height(), scene.width())) {
            bail!("{name}: predicted mask {:?} does not match scene {:?}", m.dims(), (scene.height(), scene.width()));
        }
        preds.push(p);
        gts.push(scene.instances);
    }
    let report = layerseg::metrics::evaluate_dataset(&preds, &gts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    io::write_json_file(out, &report)?;
    Ok(())
}

pub fn viz(ckpt: &Path, scene: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let image = load_image(scene)?;
    let pred = layerseg::model::forward(&image, &ck.params, &ck.config)?;
    let (h, w, n) = (pred.height(), pred.width(), pred.channels());
    std::fs::create_dir_all(out)?;
    for k in 0..n {
        let px: Vec<u8> = (0..h * w).map(|p| io::to_u8(pred.embedding(p)[k])).collect();
        io::write_gray_png(out.join(format!("layer_{k}.png")), w, h, &px)?;
    }
    let px: Vec<u8> = pred.foreground.data().iter().map(|&v| io::to_u8(v)).collect();
    io::write_gray_png(out.join("foreground.png"), w, h, &px)?;
    Ok(())
}
