//! Command-line front end. Every subcommand takes `--seed` and `--config`
//! and writes its artifacts atomically.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3
//! numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use image::{ImageEncoder, ImageReader};
use serde_json::json;

use crate::config::RunConfig;
use crate::duet::{ddim_sample, synth_panorama, SynthParams, ToyDenoiser, TrainSample};
use crate::eppa::{build_attention_masks, build_spe_maps, SpeConfig};
use crate::error::{Error, Result};
use crate::image::{ErpImage, Planar, PerspImage};
use crate::layout::{iou_2d, iou_3d, render_distance_map, RoomLayout};
use crate::metrics::{
    frechet_distance, gaussian_stats, overlap_consistency, repetition_score, seam_score, EmbeddingProvider, FlattenDownsample,
    RandomProjection,
};
use crate::ntf::{ntf_read, ntf_write, write_atomic, NtfTensor};
use crate::resample::{backproject_persp_to_erp, project_to_rig, SampleMode};
use crate::sphere::{icosahedron_rig, CameraIntrinsics, CameraRig, ErpGrid};

#[derive(Parser, Debug)]
#[command(name = "panoduet", version, about = "Panorama projection geometry and a toy dual-branch diffusion model")]
struct Cli {
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Project an ERP image (PNG or NTF) onto the 20-view rig.
    Project {
        input: PathBuf,
        #[arg(long, default_value = "bilinear")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Blend a `views.ntf` stack back into an ERP image.
    Backproject {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the camera rig as JSON.
    Rig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write spherical positional encoding maps at a feature level.
    Spe {
        /// Downsampling factor of the feature grid.
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the panorama-to-views attention mask at a feature level.
    Mask {
        #[arg(long, default_value_t = 4)]
        level: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render synthetic training panoramas.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy model; writes a checkpoint bundle and the loss curve.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a panorama (fresh model unless a checkpoint is given).
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        condition: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a layout JSON as a distance map.
    LayoutRender {
        layout: PathBuf,
        /// Store the `[-1, 1]` normalised map in the NTF output.
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print 2D and 3D IoU of two layout JSON files.
    LayoutIou {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seam, repetition, overlap and Fréchet metrics as a JSON report.
    Eval {
        #[arg(required = true)]
        panos: Vec<PathBuf>,
        /// Reference panoramas for the Fréchet distance.
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
        /// A `views.ntf` stack for overlap consistency.
        #[arg(long)]
        views: Option<PathBuf>,
        #[arg(long, default_value = "flatten")]
        provider: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("panoduet: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let dest = |o: &Option<PathBuf>, name: &str| o.clone().unwrap_or_else(|| cfg.out.join(name));
    match &cli.cmd {
        Cmd::Project { input, mode, out } => cmd_project(&cfg, input, mode.parse()?, &dest(out, "project")),
        Cmd::Backproject { input, out } => cmd_backproject(&cfg, input, &dest(out, "backproject")),
        Cmd::Rig { out } => {
            let rig = rig_for(&cfg, cfg.grid_height / 2)?;
            let text = serde_json::to_string_pretty(&rig.to_json()).expect("json") + "\n";
            match out {
                Some(p) => write_atomic(p, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Cmd::Spe { level, channels, out } => cmd_spe(&cfg, *level, *channels, &dest(out, "spe")),
        Cmd::Mask { level, out } => cmd_mask(&cfg, *level, &dest(out, "mask")),
        Cmd::Synth { count, out } => cmd_synth(&cfg, *count, &dest(out, "synth")),
        Cmd::Train { out } => cmd_train(&cfg, &dest(out, "checkpoint")),
        Cmd::Sample { checkpoint, condition, out } => cmd_sample(&cfg, checkpoint.as_deref(), *condition, &dest(out, "sample")),
        Cmd::LayoutRender { layout, normalize, out } => cmd_layout_render(&cfg, layout, *normalize, &dest(out, "layout")),
        Cmd::LayoutIou { a, b, out } => {
            let (a, b) = (read_layout(a)?, read_layout(b)?);
            let text = serde_json::to_string_pretty(&json!({ "iou_2d": iou_2d(&a, &b), "iou_3d": iou_3d(&a, &b) })).expect("json") + "\n";
            print!("{text}");
            match out {
                Some(p) => write_atomic(p, text.as_bytes()),
                None => Ok(()),
            }
        }
        Cmd::Eval { panos, reference, views, provider, out } => {
            cmd_eval(&cfg, panos, reference, views.as_deref(), provider, &dest(out, "eval"))
        }
    }
}

/// Icosahedral rig with the configured field of view.
pub fn rig_for(cfg: &RunConfig, side: usize) -> Result<CameraRig> {
    let rig = icosahedron_rig(side)?;
    Ok(CameraRig::new(rig.poses, CameraIntrinsics::square(cfg.rig_fov, side)?))
}

fn flip_rows(p: &Planar) -> Planar {
    let (c, h, w) = (p.channels, p.height, p.width);
    let mut out = p.clone();
    for ch in 0..c {
        for r in 0..h {
            let src = (ch * h + r) * w;
            let dst = (ch * h + (h - 1 - r)) * w;
            out.data[dst..dst + w].copy_from_slice(&p.data[src..src + w]);
        }
    }
    out
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads a PNG (any colour type, as RGB in `[0, 1]`, top row north) or an
/// NTF tensor into internal row order.
pub fn read_image(path: &Path) -> Result<Planar> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ntf")) {
        return ntf_read(path)?.to_planar();
    }
    let img = ImageReader::open(path)?.with_guessed_format()?.decode().map_err(|e| format_err(path, e))?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut p = Planar::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            p.data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64;
        }
    }
    Ok(flip_rows(&p))
}

fn encode_png(buf: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(buf, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("PNG encoding: {e}")))?;
    Ok(out)
}

/// 8-bit PNG of a 1- or 3-channel image with values in `[0, 1]`, written
/// north-up.
pub fn write_png(path: &Path, p: &Planar) -> Result<()> {
    let img = flip_rows(p);
    let (c, h, w) = (img.channels, img.height, img.width);
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("PNG needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            buf.push((img.data[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_atomic(path, &encode_png(&buf, w, h, color)?)
}

/// 16-bit grayscale PNG in millimetres, saturating at 65535.
pub fn write_png_mm(path: &Path, metres: &Planar) -> Result<()> {
    let img = flip_rows(metres);
    let mut buf = Vec::with_capacity(2 * img.data.len());
    for v in &img.plane(0)[..] {
        let mm = (v * 1000.0).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&mm.to_ne_bytes());
    }
    write_atomic(path, &encode_png(&buf, img.width, img.height, image::ExtendedColorType::L16)?)
}

fn stack_views(views: &[PerspImage]) -> NtfTensor {
    let p = &views[0].pixels;
    let data: Vec<f64> = views.iter().flat_map(|v| v.pixels.data.iter().copied()).collect();
    NtfTensor::from_f64(vec![views.len(), p.channels, p.height, p.width], &data).expect("views share a shape")
}

fn unstack_views(t: &NtfTensor, rig: &CameraRig) -> Result<Vec<PerspImage>> {
    let [n, c, h, w] = t.shape()[..] else {
        return Err(Error::Shape(format!("views tensor must be rank 4, got {:?}", t.shape())));
    };
    if n != rig.len() {
        return Err(Error::Shape(format!("expected {} views, got {n}", rig.len())));
    }
    let data = t.to_f64();
    let per = c * h * w;
    rig.poses.iter().enumerate().map(|(i, pose)| PerspImage::new(Planar::new(c, h, w, data[i * per..(i + 1) * per].to_vec())?, *pose, rig.intrinsics)).collect()
}

fn write_views(dir: &Path, views: &[PerspImage]) -> Result<()> {
    ntf_write(&stack_views(views), &dir.join("views.ntf"))?;
    for (i, v) in views.iter().enumerate() {
        write_png(&dir.join(format!("view_{i:02}.png")), &v.pixels)?;
    }
    Ok(())
}

fn cmd_project(cfg: &RunConfig, input: &Path, mode: SampleMode, out: &Path) -> Result<()> {
    let pano = ErpImage::new(read_image(input)?)?;
    let rig = rig_for(cfg, pano.height / 2)?;
    let views = project_to_rig(&pano, &rig, mode)?;
    write_views(out, &views)?;
    write_atomic(&out.join("rig.json"), (serde_json::to_string_pretty(&rig.to_json()).expect("json") + "\n").as_bytes())
}

fn cmd_backproject(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let t = ntf_read(input)?;
    let side = *t.shape().get(2).ok_or_else(|| Error::Shape("views tensor must be rank 4".into()))?;
    let rig = rig_for(cfg, side)?;
    let views = unstack_views(&t, &rig)?;
    let (pano, weight) = backproject_persp_to_erp(&views, &ErpGrid::pixel(2 * side)?)?;
    ntf_write(&NtfTensor::from_planar(pano.planar()), &out.join("pano.ntf"))?;
    ntf_write(&NtfTensor::from_f64(vec![pano.height, pano.width], &weight)?, &out.join("weight.ntf"))?;
    if matches!(pano.channels, 1 | 3) {
        write_png(&out.join("pano.png"), pano.planar())?;
    }
    Ok(())
}

fn level_geometry(cfg: &RunConfig, level: usize) -> Result<(ErpGrid, CameraRig)> {
    if level == 0 || cfg.grid_height % (2 * level) != 0 {
        return Err(Error::Domain(format!("level {level} does not divide the grid height {}", cfg.grid_height)));
    }
    let grid = ErpGrid::pixel(cfg.grid_height / level)?;
    let rig = rig_for(cfg, grid.height() / 2)?;
    Ok((grid, rig))
}

fn cmd_spe(cfg: &RunConfig, level: usize, channels: usize, out: &Path) -> Result<()> {
    let (grid, rig) = level_geometry(cfg, level)?;
    let maps = build_spe_maps(&SpeConfig::new(channels)?, &grid, &rig)?;
    let p = &maps.pano;
    ntf_write(&NtfTensor::from_f64(vec![p.c, p.h, p.w], &p.data)?, &out.join("spe_pano.ntf"))?;
    let v = &maps.views;
    ntf_write(&NtfTensor::from_f64(vec![v.n, v.c, v.h, v.w], &v.data)?, &out.join("spe_views.ntf"))
}

fn cmd_mask(cfg: &RunConfig, level: usize, out: &Path) -> Result<()> {
    let (grid, rig) = level_geometry(cfg, level)?;
    let mask = build_attention_masks(&grid, &rig, cfg.eppa_sigma)?;
    ntf_write(&NtfTensor::from_f64(vec![mask.rows, mask.cols], &mask.data)?, &out.join("mask.ntf"))
}

/// Seeds of the training set: `seed, seed + 1, ...`.
pub fn build_dataset(cfg: &RunConfig) -> Result<Vec<TrainSample>> {
    let toy = cfg.toy()?;
    let rig = toy.rig()?;
    let params = SynthParams { height: toy.height, ..SynthParams::default() };
    (0..cfg.train_samples as u64).map(|i| synth_panorama(cfg.seed.wrapping_add(i), &params, &rig)).collect()
}

fn cmd_synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let toy = cfg.toy()?;
    let rig = toy.rig()?;
    let params = SynthParams { height: toy.height, ..SynthParams::default() };
    let mut labels = String::from("index,seed,condition\n");
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let s = synth_panorama(seed, &params, &rig)?;
        write_png(&out.join(format!("pano_{i:04}.png")), s.pano().planar())?;
        ntf_write(&NtfTensor::from_planar(s.pano().planar()), &out.join(format!("pano_{i:04}.ntf")))?;
        labels.push_str(&format!("{i},{seed},{}\n", s.condition()));
    }
    write_atomic(&out.join("labels.csv"), labels.as_bytes())
}

/// Writes `manifest.json`, `config.txt` and one NTF file per parameter.
pub fn save_checkpoint(model: &ToyDenoiser, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, e) in model.store.entries().iter().enumerate() {
        let file = format!("tensors/p{i:03}.ntf");
        ntf_write(&NtfTensor::from_f64(e.shape.clone(), &e.value)?, &dir.join(&file))?;
        tensors.push(json!({ "name": e.name, "shape": e.shape, "file": file }));
    }
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    let manifest = json!({ "format": "panoduet-checkpoint-1", "config": "config.txt", "tensors": tensors });
    write_atomic(&dir.join("manifest.json"), (serde_json::to_string_pretty(&manifest).expect("json") + "\n").as_bytes())
}

/// Restores a bundle written by [`save_checkpoint`]; weights come back at
/// f32 precision.
pub fn load_checkpoint(dir: &Path) -> Result<(ToyDenoiser, RunConfig)> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?).map_err(|e| format_err(dir, e))?;
    let bad = || Error::Format(format!("{}: malformed checkpoint manifest", dir.display()));
    let cfg_file = manifest["config"].as_str().ok_or_else(bad)?;
    let cfg = RunConfig::from_file(&dir.join(cfg_file))?;
    let mut model = ToyDenoiser::new(cfg.toy()?, cfg.seed)?;
    let list = manifest["tensors"].as_array().ok_or_else(bad)?;
    if list.len() != model.store.len() {
        return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", list.len(), model.store.len())));
    }
    for item in list {
        let name = item["name"].as_str().ok_or_else(bad)?;
        let file = item["file"].as_str().ok_or_else(bad)?;
        let t = ntf_read(&dir.join(file))?;
        let entry = model.store.entries_mut().iter_mut().find(|e| e.name == name).ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("parameter {name:?}: shape {:?}, expected {:?}", t.shape(), entry.shape)));
        }
        entry.value = t.to_f64();
    }
    Ok((model, cfg))
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = build_dataset(cfg)?;
    let mut model = ToyDenoiser::new(cfg.toy()?, cfg.seed)?;
    let losses = crate::duet::train::train_model(&mut model, cfg.train(), &dataset, |s, l| {
        if s % 100 == 0 {
            eprintln!("step {s:5}  loss {l:.5}");
        }
    })?;
    save_checkpoint(&model, cfg, out)?;
    write_atomic(&out.join("loss.csv"), crate::duet::train::loss_csv(&losses).as_bytes())
}

fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, condition: usize, out: &Path) -> Result<()> {
    let model = match checkpoint {
        Some(dir) => load_checkpoint(dir)?.0,
        None => ToyDenoiser::new(cfg.toy()?, cfg.seed)?,
    };
    let s = ddim_sample(&model, &cfg.sampler(), condition)?;
    write_png(&out.join("pano.png"), s.pano.planar())?;
    ntf_write(&NtfTensor::from_planar(s.pano.planar()), &out.join("pano.ntf"))?;
    ntf_write(&stack_views(&s.views), &out.join("views.ntf"))
}

fn read_layout(path: &Path) -> Result<RoomLayout> {
    RoomLayout::from_json(&std::fs::read_to_string(path)?).map_err(|e| match e {
        Error::Format(m) => format_err(path, m),
        other => other,
    })
}

fn cmd_layout_render(cfg: &RunConfig, layout: &Path, normalize: bool, out: &Path) -> Result<()> {
    let map = render_distance_map(&read_layout(layout)?, &ErpGrid::pixel(cfg.grid_height)?)?;
    write_png_mm(&out.join("distance.png"), map.image().planar())?;
    let stored = if normalize { map.normalized() } else { map.image().clone() };
    ntf_write(&NtfTensor::from_planar(stored.planar()), &out.join("distance.ntf"))
}

fn provider(name: &str, seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
    match name {
        "flatten" => Ok(Box::new(FlattenDownsample)),
        "random" => Ok(Box::new(RandomProjection::new(64, seed)?)),
        o => Err(Error::Domain(format!("unknown embedding provider {o:?} (flatten, random)"))),
    }
}

fn cmd_eval(cfg: &RunConfig, panos: &[PathBuf], reference: &[PathBuf], views: Option<&Path>, provider_name: &str, out: &Path) -> Result<()> {
    let enc = provider(provider_name, cfg.seed)?;
    let load = |ps: &[PathBuf]| ps.iter().map(|p| ErpImage::new(read_image(p)?)).collect::<Result<Vec<_>>>();
    let images = load(panos)?;
    let mut rows = Vec::new();
    let mut csv = String::from("image,seam,baseline,seam_ratio,repetition\n");
    for (p, img) in panos.iter().zip(&images) {
        let seam = seam_score(img.planar())?;
        let rs = repetition_score(img, enc.as_ref())?;
        csv.push_str(&format!("{},{},{},{},{}\n", p.display(), seam.seam, seam.baseline, seam.ratio, rs));
        rows.push(json!({ "image": p.display().to_string(), "seam": seam, "repetition": rs }));
    }
    let mut report = json!({ "provider": provider_name, "images": rows });
    if !reference.is_empty() {
        let refs = load(reference)?;
        let embed = |xs: &[ErpImage]| xs.iter().map(|x| enc.embed(x.planar())).collect::<Result<Vec<_>>>();
        let fd = frechet_distance(&gaussian_stats(&embed(&images)?)?, &gaussian_stats(&embed(&refs)?)?)?;
        report["frechet"] = json!(fd);
    }
    if let Some(vp) = views {
        let t = ntf_read(vp)?;
        let side = *t.shape().get(2).ok_or_else(|| Error::Shape("views tensor must be rank 4".into()))?;
        let vs = unstack_views(&t, &rig_for(cfg, side)?)?;
        report["overlap_consistency"] = json!(overlap_consistency(&vs, &ErpGrid::pixel(2 * side)?)?);
    }
    let text = serde_json::to_string_pretty(&report).expect("json") + "\n";
    print!("{text}");
    write_atomic(&out.join("report.json"), text.as_bytes())?;
    write_atomic(&out.join("report.csv"), csv.as_bytes())
}
