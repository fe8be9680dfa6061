//! `validate`, `trace`, `enumerate-paths`, and `bench` subcommands.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::{Rng, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use pltm::datagen::trace_canonical;
use pltm::error::{Error, Result};
use pltm::lens::LensSystem;
use pltm::nn::load_model_for_lens;
use pltm::paraxial;
use pltm::render::{InputSample, LensBackend, NeuralBackend, OracleBackend};
use pltm::trace::{
    enumerate_paths, lift_direction, trace_path_events, Direction, Ray, Vec2, Vec3,
};

use crate::{dir_label, load_lens, DirArg};

#[derive(Args)]
pub struct ValidateArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    /// Wavelength for the paraxial summary, nm.
    #[arg(long, default_value_t = 550.0)]
    pub lambda: f64,
}

/// Fraction of an axial collimated beam filling the housing aperture that
/// reaches the sensor on the all-transmission path.
fn axial_transmission(lens: &LensSystem, lambda: f64) -> f64 {
    let n = 2000u32;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut passed = 0u32;
    for _ in 0..n {
        let r = lens.housing_semi_aperture * rng.gen::<f64>().sqrt();
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let ray = Ray::new(
            Vec3::new(r * phi.cos(), r * phi.sin(), lens.input_plane_z),
            Vec3::new(0.0, 0.0, 1.0),
        );
        if pltm::trace::trace_path(lens, &ray, lambda, 0, Direction::Forward).is_some() {
            passed += 1;
        }
    }
    passed as f64 / n as f64
}

pub fn validate(args: ValidateArgs) -> Result<Value> {
    let lens = load_lens(&args.lens)?;
    let lambda = args.lambda;
    let surfaces: Vec<Value> = lens
        .surfaces()
        .iter()
        .map(|s| {
            json!({
                "kind": format!("{:?}", s.kind),
                "z_mm": s.z,
                "radius_mm": s.radius,
                "semi_aperture_mm": s.semi_aperture,
                "ior_after": lens.material(s.material_after).ior_unchecked(lambda),
            })
        })
        .collect();

    // Focus table: object distances conjugate to small sensor set-backs.
    let last_vertex = lens
        .surfaces()
        .iter()
        .filter(|s| s.kind.is_refractive())
        .map(|s| s.z)
        .next_back()
        .unwrap_or(0.0);
    let nominal_gap = lens.output_plane_z - last_vertex;
    let focus: Vec<Value> = [0.0, 1.0, 2.0, 3.0]
        .iter()
        .map(|off| {
            let obj = paraxial::focus_object_distance(&lens, nominal_gap + off, lambda);
            json!({
                "sensor_offset_mm": off,
                "object_mm": obj,
                "magnification": obj.map(|s| paraxial::lateral_magnification(&lens, s, lambda)),
            })
        })
        .collect();

    let pupil = paraxial::exit_pupil(&lens, lambda);
    Ok(json!({
        "command": "validate",
        "lens": lens.name,
        "hash": format!("{:016x}", lens.hash()),
        "surfaces": surfaces,
        "refractive_surfaces": lens.refractive_count(),
        "sensor": {
            "width_mm": lens.sensor_width,
            "height_mm": lens.sensor_height,
            "z_mm": lens.output_plane_z,
        },
        "input_plane_z_mm": lens.input_plane_z,
        "housing_semi_aperture_mm": lens.housing_semi_aperture,
        "efl_mm": paraxial::effective_focal_length(&lens, lambda),
        "back_focal_mm": paraxial::back_focal_distance(&lens, lambda),
        "exit_pupil": pupil.map(|(z, r)| json!({ "z_mm": z, "semi_aperture_mm": r })),
        "paths_max_1_reflection_pair": enumerate_paths(&lens, 1).len(),
        "paths_max_2_reflections": enumerate_paths(&lens, 2).len(),
        "axial_transmission": axial_transmission(&lens, lambda),
        "focus": focus,
    }))
}

#[derive(Args)]
pub struct TraceArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    #[arg(long, value_enum)]
    pub direction: DirArg,
    /// Reflection path id (bit k-1 set: the k-th refractive interaction
    /// reflects).
    #[arg(long, default_value_t = 0)]
    pub path_id: u64,
    /// Canonical radial entry position, mm.
    #[arg(long, default_value_t = 0.0)]
    pub r: f64,
    /// Transverse direction components of the entry ray.
    #[arg(long, default_value_t = 0.0)]
    pub wx: f64,
    #[arg(long, default_value_t = 0.0)]
    pub wy: f64,
    /// Wavelength, nm.
    #[arg(long, default_value_t = 550.0)]
    pub lambda: f64,
    /// Log every surface interaction.
    #[arg(long)]
    pub events: bool,
}

pub fn trace(args: TraceArgs) -> Result<Value> {
    let lens = load_lens(&args.lens)?;
    let direction: Direction = args.direction.into();
    let point = [args.r, args.wx, args.wy, args.lambda];
    let exit = trace_canonical(&lens, args.path_id, direction, &point);
    let exit_json = exit.as_ref().map(|e| {
        json!({
            "position_mm": [e.position.x, e.position.y, e.position.z],
            "direction": [e.direction.x, e.direction.y, e.direction.z],
            "intensity": e.intensity,
            "interactions": e.interactions,
        })
    });

    let events_json = if args.events {
        let (z, forward) = match direction {
            Direction::Forward => (lens.input_plane_z, true),
            Direction::Backward => (lens.output_plane_z, false),
        };
        let ray = Ray::new(
            Vec3::new(args.r, 0.0, z),
            lift_direction(args.wx, args.wy, forward),
        );
        let (events, _) = trace_path_events(&lens, &ray, args.lambda, args.path_id, direction);
        Some(
            events
                .iter()
                .map(|ev| {
                    json!({
                        "surface": if ev.surface == usize::MAX { Value::Null } else { json!(ev.surface) },
                        "station": format!("{:?}", ev.station),
                        "position_mm": [ev.position.x, ev.position.y, ev.position.z],
                        "direction": [ev.direction.x, ev.direction.y, ev.direction.z],
                        "intensity": ev.intensity,
                        "fresnel_r": ev.fresnel_r,
                    })
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    Ok(json!({
        "command": "trace",
        "lens": lens.name,
        "direction": dir_label(direction),
        "path_id": args.path_id,
        "input": { "r_mm": args.r, "wx": args.wx, "wy": args.wy, "lambda_nm": args.lambda },
        "valid": exit.is_some(),
        "exit": exit_json,
        "events": events_json,
    }))
}

#[derive(Args)]
pub struct EnumArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    /// Largest number of reflections per path.
    #[arg(long, default_value_t = 2)]
    pub max_reflections: u32,
}

pub fn enumerate(args: EnumArgs) -> Result<Value> {
    let lens = load_lens(&args.lens)?;
    let ids = enumerate_paths(&lens, args.max_reflections);
    let paths: Vec<Value> = ids
        .iter()
        .map(|&id| {
            let reflect_at: Vec<u32> = (0..64)
                .filter(|k| id >> k & 1 == 1)
                .map(|k| k + 1)
                .collect();
            json!({
                "id": id,
                "binary": format!("{id:#b}"),
                "reflections": id.count_ones(),
                "reflects_at_interaction": reflect_at,
            })
        })
        .collect();
    Ok(json!({
        "command": "enumerate-paths",
        "lens": lens.name,
        "max_reflections": args.max_reflections,
        "count": ids.len(),
        "paths": paths,
    }))
}

#[derive(Args)]
pub struct BenchArgs {
    /// Builtin lens name or prescription file path.
    #[arg(long)]
    pub lens: String,
    /// Trained model file; repeat for several paths (all must share one
    /// trace direction).
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    /// Entry rays per path and backend.
    #[arg(long, default_value_t = 1_000_000)]
    pub rays: usize,
    /// Query batch size handed to the backends.
    #[arg(long, default_value_t = 4096)]
    pub batch: usize,
    /// Classifier gate threshold for the neural backend.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Entry samples distributed the way the renderers issue them: backward
/// rays go from sensor points toward the exit-pupil disc (the depth-of-field
/// workload), forward rays cover the housing disc inside a collimated
/// light cone (the flare workload).
fn bench_samples(lens: &LensSystem, direction: Direction, n: usize, seed: u64) -> Vec<InputSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pupil_z, pupil_r) = pltm::render::default_pupil(lens);
    (0..n)
        .map(|_| match direction {
            Direction::Forward => {
                let r = lens.housing_semi_aperture * rng.gen::<f64>().sqrt();
                let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                InputSample {
                    position: Vec2::new(r * phi.cos(), r * phi.sin()),
                    direction: lift_direction(
                        (rng.gen::<f64>() - 0.5) * 0.15,
                        (rng.gen::<f64>() - 0.5) * 0.15,
                        true,
                    ),
                    lambda_nm: 380.0 + rng.gen::<f64>() * 400.0,
                }
            }
            Direction::Backward => {
                let p = Vec2::new(
                    (rng.gen::<f64>() - 0.5) * lens.sensor_width,
                    (rng.gen::<f64>() - 0.5) * lens.sensor_height,
                );
                let r = pupil_r * rng.gen::<f64>().sqrt();
                let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                let target = Vec3::new(r * phi.cos(), r * phi.sin(), pupil_z);
                let dir = (target - Vec3::new(p.x, p.y, lens.output_plane_z)).normalize();
                InputSample {
                    position: p,
                    direction: dir,
                    lambda_nm: 380.0 + rng.gen::<f64>() * 400.0,
                }
            }
        })
        .collect()
}

/// Time `query_batch` over the sample stream; returns (seconds, transported).
fn time_backend(
    backend: &dyn LensBackend,
    path_id: u64,
    samples: &[InputSample],
    batch: usize,
) -> Result<(f64, u64)> {
    // One untimed batch to warm caches and the thread pool.
    backend.query_batch(path_id, &samples[..batch.min(samples.len())])?;
    let t0 = Instant::now();
    let transported = samples
        .par_chunks(batch)
        .map(|chunk| {
            backend
                .query_batch(path_id, chunk)
                .map(|v| v.iter().flatten().count() as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok((t0.elapsed().as_secs_f64(), transported))
}

pub fn bench(args: BenchArgs) -> Result<Value> {
    if args.batch == 0 || args.rays == 0 {
        return Err(Error::Render("bench needs positive --rays and --batch".into()));
    }
    let lens = load_lens(&args.lens)?;
    let models: Vec<_> = args
        .model
        .iter()
        .map(|p| load_model_for_lens(p, &lens))
        .collect::<Result<_>>()?;
    let direction = models[0].direction;
    let neural = NeuralBackend::new(models, args.threshold)?;
    let paths = neural.path_ids().to_vec();
    let oracle = OracleBackend::new(lens.clone(), direction, paths.clone())?;

    let mut per_path = Vec::new();
    let mut totals = [0.0f64; 2]; // seconds: oracle, neural
    for &path_id in &paths {
        let samples = bench_samples(&lens, direction, args.rays, args.seed ^ path_id);
        let (o_sec, o_hits) = time_backend(&oracle, path_id, &samples, args.batch)?;
        let (n_sec, n_hits) = time_backend(&neural, path_id, &samples, args.batch)?;
        totals[0] += o_sec;
        totals[1] += n_sec;
        per_path.push(json!({
            "path_id": path_id,
            "oracle_rays_per_sec": args.rays as f64 / o_sec,
            "neural_rays_per_sec": args.rays as f64 / n_sec,
            "speedup": o_sec / n_sec,
            "oracle_transported": o_hits,
            "neural_transported": n_hits,
        }));
    }
    let total_rays = (args.rays * paths.len()) as f64;
    Ok(json!({
        "command": "bench",
        "lens": lens.name,
        "direction": dir_label(direction),
        "threads": rayon::current_num_threads(),
        "batch": args.batch,
        "rays_per_path": args.rays,
        "per_path": per_path,
        "total": {
            "oracle_rays_per_sec": total_rays / totals[0],
            "neural_rays_per_sec": total_rays / totals[1],
            "speedup": totals[0] / totals[1],
        },
    }))
}
