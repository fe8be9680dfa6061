//! `render-flare`, `render-dof`, and `eval` subcommands.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde_json::{json, Value};

use pltm::error::{Error, Result};
use pltm::lens::LensSystem;
use pltm::nn::load_model_for_lens;
use pltm::paraxial;
use pltm::render::{
    auto_exposure, mape, read_pfm, render_dof, render_flare, write_pfm, write_png, DistantLight,
    DofConfig, Film, Filter, FlareConfig, LensBackend, NeuralBackend, OracleBackend, Scene,
    SpectrumCurve, DOF_EXPOSURE, MAPE_FLOOR,
};
use pltm::trace::{enumerate_paths, Direction, Vec3};

use crate::{dir_label, load_lens, parse_path_id, parse_size};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    Box,
    Bilinear,
}

impl From<FilterArg> for Filter {
    fn from(f: FilterArg) -> Filter {
        match f {
            FilterArg::Box => Filter::Box,
            FilterArg::Bilinear => Filter::Bilinear,
        }
    }
}

/// Build the transport backend: neural when model files are given,
/// otherwise the ground-truth tracer over `oracle_paths`.
fn build_backend(
    lens: &LensSystem,
    models: &[PathBuf],
    threshold: f32,
    direction: Direction,
    oracle_paths: Vec<u64>,
) -> Result<Box<dyn LensBackend>> {
    if models.is_empty() {
        return Ok(Box::new(OracleBackend::new(
            lens.clone(),
            direction,
            oracle_paths,
        )?));
    }
    let loaded: Vec<_> = models
        .iter()
        .map(|p| load_model_for_lens(p, lens))
        .collect::<Result<_>>()?;
    let backend = NeuralBackend::new(loaded, threshold)?;
    if backend.direction() != direction {
        return Err(Error::Render(format!(
            "models trace {} but this renderer needs {}",
            dir_label(backend.direction()),
            dir_label(direction)
        )));
    }
    Ok(Box::new(backend))
}

/// Write the raw-radiometry PFM and the exposed display PNG; returns
/// (pfm path, png path, exposure used).
fn write_outputs(
    film: &Film,
    prefix: &std::path::Path,
    exposure: Option<f64>,
    rotate180: bool,
) -> Result<(PathBuf, PathBuf, f64)> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let linear = film.to_linear_rgb(1.0);
    let pfm = prefix.with_extension("pfm");
    write_pfm(&pfm, &linear)?;
    let expo = exposure
        .or_else(|| auto_exposure(&linear, 0.999, 0.85))
        .unwrap_or(1.0);
    let png = prefix.with_extension("png");
    write_png(&png, &film.to_linear_rgb(expo), rotate180)?;
    Ok((pfm, png, expo))
}

#[derive(Args)]
pub struct FlareArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    /// Trained forward model file; repeat for several ghost paths. Without
    /// models the ground-truth tracer renders --paths.
    #[arg(long, conflicts_with_all = ["paths", "max_reflections"])]
    pub model: Vec<PathBuf>,
    /// Comma-separated path ids for the oracle backend (decimal, 0x.., or
    /// 0b..).
    #[arg(long, value_delimiter = ',', value_parser = parse_path_id)]
    pub paths: Option<Vec<u64>>,
    /// Enumerate all paths up to this many reflections instead of --paths.
    #[arg(long)]
    pub max_reflections: Option<u32>,
    /// Light field angle around the y axis, degrees.
    #[arg(long, default_value_t = 4.0)]
    pub theta_x_deg: f64,
    /// Light field angle around the x axis, degrees.
    #[arg(long, default_value_t = 2.5)]
    pub theta_y_deg: f64,
    /// Collimated irradiance on the entry plane.
    #[arg(long, default_value_t = 1.0)]
    pub irradiance: f64,
    /// Entry rays per path.
    #[arg(long, default_value_t = 1_000_000)]
    pub rays: u64,
    #[arg(long, value_parser = parse_size, default_value = "512x512")]
    pub size: (usize, usize),
    #[arg(long, value_enum, default_value_t = FilterArg::Bilinear)]
    pub filter: FilterArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classifier gate threshold for the neural backend.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Display gain for the PNG (default: auto-expose the 99.9th luminance
    /// percentile to 0.85). The PFM always stores unexposed radiometry.
    #[arg(long)]
    pub exposure: Option<f64>,
    /// Rotate the display PNG 180° (view-through orientation).
    #[arg(long)]
    pub rotate180: bool,
    /// Output prefix for .pfm/.png (default under --out-dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

pub fn flare(args: FlareArgs) -> Result<Value> {
    let lens = load_lens(&args.lens)?;
    let oracle_paths = match (&args.paths, args.max_reflections) {
        (Some(p), _) => p.clone(),
        (None, k) => enumerate_paths(&lens, k.unwrap_or(2)),
    };
    let backend = build_backend(
        &lens,
        &args.model,
        args.threshold,
        Direction::Forward,
        oracle_paths,
    )?;
    let paths = backend.path_ids().to_vec();

    let dir = Vec3::new(
        args.theta_x_deg.to_radians().tan(),
        args.theta_y_deg.to_radians().tan(),
        1.0,
    )
    .normalize();
    let cfg = FlareConfig {
        light: DistantLight {
            direction: dir,
            irradiance: args.irradiance,
            spectrum: SpectrumCurve::Flat(1.0),
        },
        rays_per_path: args.rays,
        filter: args.filter.into(),
        seed: args.seed,
        paths: paths.clone(),
    };
    let (w, h) = args.size;
    let mut film = Film::for_lens(&lens, w, h)?;
    eprintln!(
        "render-flare: {} paths x {} rays on {}x{} ({} backend)...",
        paths.len(),
        args.rays,
        w,
        h,
        backend.label()
    );
    let stats = render_flare(&lens, backend.as_ref(), &cfg, &mut film)?;

    let prefix = args.out.unwrap_or_else(|| {
        args.out_dir
            .join(format!("{}-{:016x}", lens.name, lens.hash()))
            .join(format!("flare-{}", backend.label()))
    });
    let (pfm, png, expo) = write_outputs(&film, &prefix, args.exposure, args.rotate180)?;
    Ok(json!({
        "command": "render-flare",
        "lens": lens.name,
        "backend": backend.label(),
        "paths": paths,
        "size": [w, h],
        "rays_per_path": args.rays,
        "rays": stats.rays,
        "transported": stats.transported,
        "dropped_off_film": film.dropped(),
        "seconds": stats.wall.as_secs_f64(),
        "rays_per_sec": stats.rays_per_sec(),
        "total_y": film.total_xyz()[1],
        "exposure": expo,
        "outputs": { "pfm": pfm, "png": png },
    }))
}

#[derive(Args)]
pub struct DofArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    /// Trained backward all-transmission model file (default: ground-truth
    /// tracer).
    #[arg(long)]
    pub model: Vec<PathBuf>,
    /// Procedural scene name.
    #[arg(long, default_value = "spheres")]
    pub scene: String,
    /// Paths per pixel.
    #[arg(long, default_value_t = 64)]
    pub spp: u32,
    /// Sensor set-back from the nominal (infinity-focus) plane, mm.
    #[arg(long, default_value_t = 2.0, conflicts_with = "focus_mm")]
    pub sensor_offset: f64,
    /// Focus on this object distance instead of giving --sensor-offset, mm.
    #[arg(long)]
    pub focus_mm: Option<f64>,
    #[arg(long, value_parser = parse_size, default_value = "256x256")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classifier gate threshold for the neural backend.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Display gain for the PNG. The PFM always stores unexposed
    /// radiometry.
    #[arg(long, default_value_t = DOF_EXPOSURE)]
    pub exposure: f64,
    /// Rotate the display PNG 180° (upright scene orientation).
    #[arg(long)]
    pub rotate180: bool,
    /// Output prefix for .pfm/.png (default under --out-dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

/// Distance from the last refractive vertex to the nominal sensor plane.
fn nominal_gap(lens: &LensSystem) -> f64 {
    let last_vertex = lens
        .surfaces()
        .iter()
        .filter(|s| s.kind.is_refractive())
        .map(|s| s.z)
        .next_back()
        .unwrap_or(0.0);
    lens.output_plane_z - last_vertex
}

pub fn dof(args: DofArgs) -> Result<Value> {
    let lens = load_lens(&args.lens)?;
    let scene = Scene::builtin(&args.scene).ok_or_else(|| {
        Error::Render(format!(
            "unknown scene '{}' (have: {})",
            args.scene,
            Scene::builtin_names().join(", ")
        ))
    })?;
    let backend = build_backend(&lens, &args.model, args.threshold, Direction::Backward, vec![0])?;

    let offset = match args.focus_mm {
        None => args.sensor_offset,
        Some(s) => {
            let gap = paraxial::sensor_gap_for_object(&lens, s, 550.0);
            if !gap.is_finite() {
                return Err(Error::Render(format!("cannot focus at {s} mm")));
            }
            gap - nominal_gap(&lens)
        }
    };
    let focused_at = paraxial::focus_object_distance(&lens, nominal_gap(&lens) + offset, 550.0);

    let (w, h) = args.size;
    let mut film = Film::for_lens(&lens, w, h)?;
    let cfg = DofConfig {
        spp: args.spp,
        sensor_offset: offset,
        seed: args.seed,
        pupil: None,
    };
    eprintln!(
        "render-dof: '{}' at {}x{} spp {} offset {:+.3} mm ({} backend)...",
        args.scene,
        w,
        h,
        args.spp,
        offset,
        backend.label()
    );
    let stats = render_dof(&lens, backend.as_ref(), &scene, &cfg, &mut film)?;

    let prefix = args.out.unwrap_or_else(|| {
        args.out_dir
            .join(format!("{}-{:016x}", lens.name, lens.hash()))
            .join(format!("dof-{}-{}", args.scene, backend.label()))
    });
    let (pfm, png, expo) = write_outputs(&film, &prefix, Some(args.exposure), args.rotate180)?;
    Ok(json!({
        "command": "render-dof",
        "lens": lens.name,
        "backend": backend.label(),
        "scene": args.scene,
        "size": [w, h],
        "spp": args.spp,
        "sensor_offset_mm": offset,
        "focused_object_mm": focused_at,
        "rays": stats.rays,
        "transported": stats.transported,
        "seconds": stats.wall.as_secs_f64(),
        "rays_per_sec": stats.rays_per_sec(),
        "exposure": expo,
        "outputs": { "pfm": pfm, "png": png },
    }))
}

#[derive(Args)]
pub struct EvalArgs {
    /// Reference image (.pfm).
    #[arg(long)]
    pub reference: PathBuf,
    /// Image under test (.pfm).
    #[arg(long)]
    pub test: PathBuf,
    /// Luminance floor for the MAPE denominator.
    #[arg(long, default_value_t = MAPE_FLOOR)]
    pub floor: f64,
}

pub fn eval(args: EvalArgs) -> Result<Value> {
    let reference = read_pfm(&args.reference)?;
    let test = read_pfm(&args.test)?;
    let m = mape(&reference, &test, args.floor)?;
    Ok(json!({
        "command": "eval",
        "reference": args.reference,
        "test": args.test,
        "width": reference.width,
        "height": reference.height,
        "floor": args.floor,
        "mape": m,
    }))
}
