//! Release acceptance suite.
//!
//! Each numbered criterion is one `#[test]` and prints exactly one verdict
//! line, `ACCEPTANCE <n> <name>: PASS (<measurement>)`, so a log scrape shows
//! the whole gate at a glance (run with `--nocapture`). Tolerances, budgets,
//! and sample counts are pinned as consts next to the criterion they govern;
//! changing a bound means editing this file, deliberately.
//!
//! Criteria 6–9 share two trained models (the backward full-transmission
//! path and one forward two-reflection ghost) built once in a `OnceLock`.
//! Training those from scratch is the slow step: the whole suite is minutes,
//! dominated by that one-time fixture, and every figure it feeds is measured
//! against the f64 tracer as ground truth.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pltm::datagen::{build_classifier_dataset, build_regressor_dataset, GenConfig};
use pltm::lens::{builtin, parse_lens_system, LensSystem};
use pltm::nn::{
    balanced_accuracy, classifier_loss_and_grads, regressor_loss_and_grads, tanh_rational, train,
    FactorizedModel, Layer, Mlp, ModelKind, NormBounds, TrainConfig,
};
use pltm::paraxial::{lateral_magnification, sensor_gap_for_object};
use pltm::render::{
    default_pupil, mape, render_dof, render_flare, DistantLight, DofConfig, Film, Filter,
    FlareConfig, InputSample, LensBackend, NeuralBackend, OracleBackend, Scene, SpectrumCurve,
    MAPE_FLOOR, SPHERE_DEPTHS_MM,
};
use pltm::trace::{
    enumerate_paths, fresnel_dielectric, lift_direction, reflect, refract, reverse_path_id,
    trace_path, Direction, Ray, Vec2, Vec3,
};

// -- pinned bounds ----------------------------------------------------------

/// 1: closed-form Snell/Fresnel agreement, and the wall budget for all cases.
const C1_CASES: usize = 10_000;
const C1_TOL: f64 = 1e-9;
const C1_BUDGET_S: f64 = 1.0;

/// 2: rotation/mirror invariance of full path traces.
const C2_RAYS: usize = 100_000;
const C2_TOL: f64 = 1e-7;
const C2_BUDGET_S: f64 = 30.0;

/// 3: a four-refractive-surface system carries exactly this many paths with
/// at most two reflections (the direct path plus one per surface pair).
const C3_EXPECTED_PATHS: usize = 7;

/// 4: analytic gradients vs. central finite differences on an f64 shadow.
const C4_NETS: usize = 100;
const C4_FD_STEP: f64 = 1e-3;
const C4_MAX_REL: f64 = 1e-4;

/// 5: rational tanh sup-norm error over a dense grid of the active interval.
const C5_SUP_TOL: f64 = 1e-3;
const C5_GRID_STEP: f64 = 1e-4;

/// 6: classifier quality on held-out data, and how much the gate matters.
const C6_MIN_BALANCED_ACC: f64 = 0.98;
const C6_HELDOUT: usize = 200_000;
const C6_ABLATION_FACTOR: f64 = 5.0;

/// 7: neural vs. oracle depth-of-field render.
const C7_SIZE: usize = 256;
const C7_SPP: u32 = 64;
const C7_MAX_MAPE: f64 = 0.15;
const C7_BUDGET_S: f64 = 600.0;

/// 8: neural vs. oracle ghost render.
const C8_SIZE: usize = 512;
const C8_RAYS: u64 = 1_000_000;
const C8_MAX_MAPE: f64 = 0.05;

/// 9: per-ray throughput advantage of the neural backend on renderer-shaped
/// query streams, both backends timed on the same single thread.
const C9_SAMPLES: usize = 1_000_000;
const C9_MIN_SPEEDUP: f64 = 2.0;

/// 10: focus sweep raster size; offsets/regions derive from the paraxial
/// conjugates of the three scene sphere depths.
const C10_SIZE: usize = 256;
const C10_SPP: u32 = 96;

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {n} {name}: {verdict} ({detail})");
    assert!(ok, "acceptance criterion {n} ({name}) failed: {detail}");
}

fn gauss() -> LensSystem {
    parse_lens_system(builtin("gauss59").expect("builtin prescription")).expect("valid builtin")
}

// -- shared trained fixture (criteria 6-9) ----------------------------------

/// Brightest two-reflection ghost of the gauss59 prescription (reflections
/// at the sixth and seventh refractive interactions): it keeps ~52% of its
/// entry disc and carries the most energy of all 45 two-bounce paths, so a
/// render exercises both the classifier boundary and the regressor interior.
const GHOST_PATH: u64 = 0x60;

const FIXTURE_CLS_SAMPLES: usize = 2_000_000;
const FIXTURE_REG_SAMPLES: usize = 500_000;

struct TrainedPair {
    backward: FactorizedModel,
    ghost: FactorizedModel,
}

static MODELS: OnceLock<TrainedPair> = OnceLock::new();

fn models() -> &'static TrainedPair {
    MODELS.get_or_init(|| {
        let lens = gauss();
        eprintln!(
            "[acceptance] training the shared models ({} classifier / {} regressor records \
             per path); this is the one slow step",
            FIXTURE_CLS_SAMPLES, FIXTURE_REG_SAMPLES
        );
        let backward = fixture_model(&lens, 0, Direction::Backward);
        let ghost = fixture_model(&lens, GHOST_PATH, Direction::Forward);
        TrainedPair { backward, ghost }
    })
}

fn fixture_model(lens: &LensSystem, path_id: u64, direction: Direction) -> FactorizedModel {
    let gen = GenConfig {
        seed: 0xACC_5EED,
        ..GenConfig::default()
    };
    let t0 = Instant::now();
    let cds = build_classifier_dataset(lens, path_id, direction, FIXTURE_CLS_SAMPLES, &gen)
        .expect("classifier dataset");
    let rds = build_regressor_dataset(lens, path_id, direction, FIXTURE_REG_SAMPLES, &gen)
        .expect("regressor dataset");
    eprintln!(
        "[acceptance] path {path_id:#x} {direction:?}: datasets in {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    let (cnet, _) = train(ModelKind::Classifier, &cds, &TrainConfig::classifier(9001))
        .expect("classifier training");
    let rcfg = if path_id == 0 {
        TrainConfig::full_transmit_regressor(9002)
    } else {
        TrainConfig::per_path_regressor(9002)
    };
    let (rnet, _) = train(ModelKind::Regressor, &rds, &rcfg).expect("regressor training");
    eprintln!(
        "[acceptance] path {path_id:#x} {direction:?}: trained in {:.0}s total",
        t0.elapsed().as_secs_f64()
    );
    FactorizedModel::new(
        cnet,
        rnet,
        NormBounds::from_dataset(&cds),
        NormBounds::from_dataset(&rds),
        lens.hash(),
        path_id,
        direction,
    )
    .expect("model assembly")
}

fn spheres_scene() -> Scene {
    Scene::builtin("spheres").expect("builtin scene")
}

fn linear(film: &Film) -> pltm::render::ImageF {
    film.to_linear_rgb(1.0)
}

// -- 1: refraction physics --------------------------------------------------

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

#[test]
fn c01_snell_and_fresnel_match_closed_form() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let (mut tir_cases, mut refracted_cases) = (0u32, 0u32);

    for _ in 0..C1_CASES {
        let normal = random_unit(&mut rng);
        let mut omega = random_unit(&mut rng);
        if omega.dot(&normal) > 0.0 {
            omega = -omega;
        }
        let cos_i = -omega.dot(&normal);
        if cos_i < 1e-3 {
            continue; // grazing incidence: the configuration itself is degenerate
        }
        let (n_i, n_t) = if rng.gen_bool(0.5) {
            (1.0, 1.4 + 0.6 * rng.gen::<f64>())
        } else {
            (1.4 + 0.6 * rng.gen::<f64>(), 1.0)
        };

        let sin_i = (1.0 - cos_i * cos_i).max(0.0).sqrt();
        let sin_t = n_i / n_t * sin_i;
        let refr = refract(omega, normal, n_i, n_t);
        let fr = fresnel_dielectric(cos_i, n_i, n_t);

        if sin_t > 1.0 {
            // Past the critical angle: no transmitted ray, all power reflects.
            assert!(refr.is_none(), "refraction produced a ray beyond TIR");
            worst = worst.max((fr - 1.0).abs());
            tir_cases += 1;
            continue;
        }
        refracted_cases += 1;
        let t = refr.expect("below the critical angle a transmitted ray exists");

        // Coordinate-free Snell invariant and geometry of the output ray.
        let sin_out = t.cross(&normal).norm();
        worst = worst.max((n_i * sin_i - n_t * sin_out).abs());
        worst = worst.max((t.norm() - 1.0).abs());
        worst = worst.max(t.dot(&omega.cross(&normal)).abs()); // coplanar
        assert!(t.dot(&normal) < 0.0, "transmitted ray crossed the boundary");

        // Independent closed-form construction in the incidence plane.
        let tangent = omega + normal * cos_i;
        let tl = tangent.norm();
        let cos_t = (1.0 - sin_t * sin_t).sqrt();
        let expected = if tl > 1e-12 {
            tangent * (sin_t / tl) - normal * cos_t
        } else {
            -normal
        };
        worst = worst.max((t - expected).norm());

        // Fresnel: amplitude-coefficient closed form ...
        let rs = ((n_i * cos_i - n_t * cos_t) / (n_i * cos_i + n_t * cos_t)).powi(2);
        let rp = ((n_t * cos_i - n_i * cos_t) / (n_t * cos_i + n_i * cos_t)).powi(2);
        worst = worst.max((fr - 0.5 * (rs + rp)).abs());
        // ... reciprocity (swap media, incide at the refracted angle) ...
        worst = worst.max((fresnel_dielectric(cos_t, n_t, n_i) - fr).abs());
        // ... and the normal-incidence / Brewster special cases.
        let r0 = ((n_i - n_t) / (n_i + n_t)).powi(2);
        worst = worst.max((fresnel_dielectric(1.0, n_i, n_t) - r0).abs());
        let brewster = (n_t / n_i).atan();
        let (sb, cb) = (brewster.sin(), brewster.cos());
        let ctb = (1.0 - (n_i / n_t * sb).powi(2)).sqrt();
        let rs_b = ((n_i * cb - n_t * ctb) / (n_i * cb + n_t * ctb)).powi(2);
        worst = worst.max((fresnel_dielectric(cb, n_i, n_t) - 0.5 * rs_b).abs());

        // Mirror law: cosine preserved, displacement parallel to the normal.
        let r = reflect(omega, normal);
        worst = worst.max((r.norm() - 1.0).abs());
        worst = worst.max((r.dot(&normal) - cos_i).abs());
        worst = worst.max((r - omega).cross(&normal).norm());
    }

    let dt = t0.elapsed().as_secs_f64();
    report(
        1,
        "snell-fresnel-closed-form",
        worst < C1_TOL && dt < C1_BUDGET_S && tir_cases > 100 && refracted_cases > 5_000,
        &format!(
            "max err {worst:.2e} over {refracted_cases} refractions + {tir_cases} TIR in {dt:.2}s"
        ),
    );
}

// -- 2: tracer symmetry ------------------------------------------------------

#[test]
fn c02_traces_commute_with_rotation_and_mirror() {
    let t0 = Instant::now();
    let lens = gauss();
    let ids = enumerate_paths(&lens, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut valid_pairs = 0u64;
    let mut validity_breaks = 0u64;

    for k in 0..C2_RAYS {
        let direction = if rng.gen_bool(0.5) {
            Direction::Forward
        } else {
            Direction::Backward
        };
        // Weight the direct path up so plenty of pairs actually transport.
        let path_id = if k % 4 == 0 {
            0
        } else {
            ids[rng.gen_range(0..ids.len())]
        };
        let entry_z = match direction {
            Direction::Forward => lens.input_plane_z,
            Direction::Backward => lens.output_plane_z,
        };
        let rad = lens.housing_semi_aperture * rng.gen::<f64>().sqrt();
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let p = Vec2::new(rad * phi.cos(), rad * phi.sin());
        let dir = lift_direction(
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
            direction == Direction::Forward,
        );
        let lambda = 380.0 + 400.0 * rng.gen::<f64>();

        // Transform: a rotation about the axis, optionally composed with the
        // y-mirror. The lens is rotationally symmetric, so transport must
        // commute with both.
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let mirror = rng.gen_bool(0.3);
        let xform = |x: f64, y: f64| -> (f64, f64) {
            let (x, y) = (
                x * theta.cos() - y * theta.sin(),
                x * theta.sin() + y * theta.cos(),
            );
            if mirror {
                (x, -y)
            } else {
                (x, y)
            }
        };

        let base = Ray::new(Vec3::new(p.x, p.y, entry_z), dir);
        let (tx, ty) = xform(p.x, p.y);
        let (dx, dy) = xform(dir.x, dir.y);
        let turned = Ray::new(Vec3::new(tx, ty, entry_z), Vec3::new(dx, dy, dir.z));

        let e0 = trace_path(&lens, &base, lambda, path_id, direction);
        let e1 = trace_path(&lens, &turned, lambda, path_id, direction);
        if e0.is_some() != e1.is_some() {
            validity_breaks += 1;
            continue;
        }
        let (Some(e0), Some(e1)) = (e0, e1) else {
            continue;
        };
        valid_pairs += 1;
        let (ex, ey) = xform(e0.position.x, e0.position.y);
        worst = worst.max((ex - e1.position.x).abs());
        worst = worst.max((ey - e1.position.y).abs());
        worst = worst.max((e0.position.z - e1.position.z).abs());
        let (wx, wy) = xform(e0.direction.x, e0.direction.y);
        worst = worst.max((wx - e1.direction.x).abs());
        worst = worst.max((wy - e1.direction.y).abs());
        worst = worst.max((e0.direction.z - e1.direction.z).abs());
        worst = worst.max((e0.intensity - e1.intensity).abs() / e0.intensity.max(1e-12));
    }

    let dt = t0.elapsed().as_secs_f64();
    report(
        2,
        "rotation-mirror-symmetry",
        worst < C2_TOL && validity_breaks == 0 && dt < C2_BUDGET_S && valid_pairs > 500,
        &format!(
            "max deviation {worst:.2e}, {validity_breaks} validity breaks over {C2_RAYS} pairs \
             ({valid_pairs} transported) in {dt:.1}s"
        ),
    );
}

// -- 3: path enumeration on a four-surface system ----------------------------

const FOUR_SURFACE_LENS: &str = r#"{
    "name": "acceptance-two-singlets",
    "housing_semi_aperture_mm": 12.0,
    "input_plane_z_mm": -5.0,
    "output_plane_z_mm": 55.0,
    "sensor_width_mm": 24.0,
    "sensor_height_mm": 24.0,
    "materials": {
        "bk7": { "model": "cauchy", "a": 1.5046, "b_um2": 0.0042 }
    },
    "surfaces": [
        { "type": "spherical", "z_mm": 0.0,  "radius_mm": 60.0,  "semi_aperture_mm": 11.0, "material_after": "bk7" },
        { "type": "spherical", "z_mm": 4.0,  "radius_mm": -60.0, "semi_aperture_mm": 11.0, "material_after": "air" },
        { "type": "stop",      "z_mm": 8.0,  "radius_mm": 0.0,   "semi_aperture_mm": 9.0,  "material_after": "air" },
        { "type": "spherical", "z_mm": 12.0, "radius_mm": 60.0,  "semi_aperture_mm": 11.0, "material_after": "bk7" },
        { "type": "spherical", "z_mm": 16.0, "radius_mm": -60.0, "semi_aperture_mm": 11.0, "material_after": "air" }
    ]
}"#;

#[test]
fn c03_four_surfaces_give_seven_paths_with_reversal_parity() {
    let lens = parse_lens_system(FOUR_SURFACE_LENS).expect("inline prescription");
    assert_eq!(lens.refractive_count(), 4);

    let mut ids = enumerate_paths(&lens, 2);
    ids.sort_unstable();

    // Independent expectation: one direct path, plus one path per ordered
    // surface pair b < a (first reflection at a, second at b on the way
    // back). The k-th refractive interaction of such a path reflects at
    // interaction a and again at interaction 2a - b.
    let mut expected: Vec<u64> = vec![0];
    for a in 1..=4u64 {
        for b in 1..a {
            expected.push((1 << (a - 1)) | (1 << (2 * a - b - 1)));
        }
    }
    expected.sort_unstable();
    let census_ok = ids == expected;

    // Reversal parity: reversing the interaction string of pair (a, b) over
    // its interaction count n = 2a - 2b + 4 must give the path of the pair
    // (5 - b, 5 - a) — the same ghost traversed from the sensor side — and
    // land back in the enumerated set.
    let mut parity_ok = reverse_path_id(0, 4) == 0;
    for &id in ids.iter().filter(|&&id| id != 0) {
        let a = id.trailing_zeros() as u64 + 1;
        let hi = 63 - id.leading_zeros() as u64;
        let b = 2 * a - 1 - hi;
        let n = (2 * a - 2 * b + 4) as u32;
        let (ra, rb) = (5 - b, 5 - a);
        let mirrored = (1 << (ra - 1)) | (1 << (2 * ra - rb - 1));
        parity_ok &=
            reverse_path_id(id, n) == mirrored && ids.binary_search(&mirrored).is_ok();
    }

    // The census is physical, not just combinatorial: the first ghost
    // transports an axial-ish ray with a plausible two-bounce intensity.
    let probe = Ray::new(
        Vec3::new(0.4, 0.0, lens.input_plane_z),
        Vec3::new(0.0, 0.0, 1.0),
    );
    let ghost_ok = trace_path(&lens, &probe, 550.0, expected[1], Direction::Forward)
        .is_some_and(|e| e.intensity > 0.0 && e.intensity < 0.01);

    report(
        3,
        "four-surface-path-census",
        ids.len() == C3_EXPECTED_PATHS && census_ok && parity_ok && ghost_ok,
        &format!(
            "{} paths, ids {ids:?}, parity {parity_ok}, ghost probe {ghost_ok}",
            ids.len()
        ),
    );
}

// -- 4: gradients vs. finite differences -------------------------------------

/// Independent f64 re-implementation of the forward pass and both losses,
/// operating on its own parameter copy so central differences never touch
/// the network under test.
struct Shadow {
    dims: Vec<usize>,
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Shadow {
    fn of(net: &Mlp) -> Self {
        Shadow {
            dims: net.dims(),
            w: net
                .layers()
                .iter()
                .map(|l| l.w.iter().map(|&v| v as f64).collect())
                .collect(),
            b: net
                .layers()
                .iter()
                .map(|l| l.b.iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.w.len() - 1;
        for l in 0..self.w.len() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let mut out = vec![0.0; n_out];
            for (j, o) in out.iter_mut().enumerate() {
                let mut z = self.b[l][j];
                for i in 0..n_in {
                    z += self.w[l][j * n_in + i] * a[i];
                }
                *o = if l < last { z.tanh() } else { z };
            }
            a = out;
        }
        a
    }

    fn regressor_loss(&self, xs: &[[f32; 4]], ts: &[[f32; 5]]) -> f64 {
        let lift = |v: [f64; 2]| {
            let s = v[0] * v[0] + v[1] * v[1];
            if s < 1.0 {
                [v[0], v[1], (1.0 - s).sqrt()]
            } else {
                let n = s.sqrt();
                [v[0] / n, v[1] / n, 0.0]
            }
        };
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(ts) {
            let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let p = self.forward(&x64);
            let a = lift([p[2], p[3]]);
            let b = lift([t[2] as f64, t[3] as f64]);
            total += 0.5 * (p[0] - t[0] as f64).powi(2)
                + 0.5 * (p[1] - t[1] as f64).powi(2)
                + (p[4] - t[4] as f64).powi(2)
                + 1.0
                - (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]);
        }
        total / xs.len() as f64
    }

    fn classifier_loss(&self, xs: &[[f32; 4]], ys: &[f32]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let z = self.forward(&x64)[0];
            total += z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
        }
        total / xs.len() as f64
    }
}

#[test]
fn c04_backprop_matches_central_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut max_rel = 0.0f64;
    let mut probes = 0u64;

    for trial in 0..C4_NETS {
        let regressor = trial % 2 == 0;
        let hidden = [2usize, 3, 5][trial % 3];
        let out = if regressor { 5 } else { 1 };
        let dims: Vec<usize> = if trial % 4 < 2 {
            vec![4, hidden, out]
        } else {
            vec![4, hidden, hidden, out]
        };

        // Build the net from explicit layers so this test owns the
        // initialization instead of inheriting the library's.
        let mut layers: Vec<Layer> = dims
            .windows(2)
            .map(|win| {
                let limit = (6.0 / (win[0] + win[1]) as f64).sqrt() as f32;
                Layer {
                    n_in: win[0],
                    n_out: win[1],
                    w: (0..win[0] * win[1])
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect(),
                    b: vec![0.0; win[1]],
                }
            })
            .collect();
        // Keep predicted transverse directions well away from the direction
        // lift's branch point at ‖t‖ = 1, so the ±h probes stay on one side:
        // mostly by shrinking the head, occasionally by pushing all outputs
        // far outside the unit disc instead.
        let last = layers.len() - 1;
        if trial % 10 == 8 {
            for v in &mut layers[last].b {
                *v += 1.5;
            }
        } else {
            for v in &mut layers[last].w {
                *v *= 0.3;
            }
        }
        let net = Mlp::from_layers(layers).expect("consistent layer chain");

        let nb = 4;
        let xs: Vec<[f32; 4]> = (0..nb)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0)))
            .collect();
        let ts: Vec<[f32; 5]> = (0..nb)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.6f32..0.6)))
            .collect();
        let ys: Vec<f32> = (0..nb).map(|_| f32::from(rng.gen_bool(0.5))).collect();

        let analytic = if regressor {
            regressor_loss_and_grads(&net, &xs, &ts).expect("grads").2
        } else {
            classifier_loss_and_grads(&net, &xs, &ys).expect("grads").1
        };

        let mut shadow = Shadow::of(&net);
        let eval = |s: &Shadow| {
            if regressor {
                s.regressor_loss(&xs, &ts)
            } else {
                s.classifier_loss(&xs, &ys)
            }
        };
        for l in 0..shadow.w.len() {
            for i in 0..shadow.w[l].len() {
                let keep = shadow.w[l][i];
                shadow.w[l][i] = keep + C4_FD_STEP;
                let up = eval(&shadow);
                shadow.w[l][i] = keep - C4_FD_STEP;
                let dn = eval(&shadow);
                shadow.w[l][i] = keep;
                let fd = (up - dn) / (2.0 * C4_FD_STEP);
                let rel = (analytic.w[l][i] as f64 - fd).abs() / fd.abs().max(1e-2);
                max_rel = max_rel.max(rel);
                probes += 1;
            }
            for j in 0..shadow.b[l].len() {
                let keep = shadow.b[l][j];
                shadow.b[l][j] = keep + C4_FD_STEP;
                let up = eval(&shadow);
                shadow.b[l][j] = keep - C4_FD_STEP;
                let dn = eval(&shadow);
                shadow.b[l][j] = keep;
                let fd = (up - dn) / (2.0 * C4_FD_STEP);
                let rel = (analytic.b[l][j] as f64 - fd).abs() / fd.abs().max(1e-2);
                max_rel = max_rel.max(rel);
                probes += 1;
            }
        }
    }

    report(
        4,
        "backprop-vs-finite-differences",
        max_rel < C4_MAX_REL,
        &format!("max rel err {max_rel:.2e} over {probes} parameter probes on {C4_NETS} nets"),
    );
}

// -- 5: rational tanh ---------------------------------------------------------

#[test]
fn c05_rational_tanh_stays_within_tolerance() {
    let steps = (8.0 / C5_GRID_STEP).round() as i64;
    let mut sup = 0.0f64;
    let mut at = 0.0f64;
    for k in 0..=steps {
        let x = -4.0 + k as f64 * C5_GRID_STEP;
        let err = (tanh_rational(x as f32) as f64 - x.tanh()).abs();
        if err > sup {
            sup = err;
            at = x;
        }
    }
    // The clamp also has to hold outside the fitted interval.
    for x in [-30.0f64, -8.0, -4.02, 4.02, 8.0, 30.0] {
        let err = (tanh_rational(x as f32) as f64 - x.tanh()).abs();
        if err > sup {
            sup = err;
            at = x;
        }
    }
    report(
        5,
        "rational-tanh-sup-error",
        sup < C5_SUP_TOL,
        &format!("sup err {sup:.2e} at x = {at:.4} over {} grid points", steps + 1),
    );
}

// -- 6: classifier quality and why the gate exists ----------------------------

#[test]
fn c06_classifier_accuracy_and_gate_ablation() {
    let lens = gauss();
    let model = &models().backward;

    // Held-out probe drawn with a fresh seed: same half-valid construction
    // as training data, including the near-boundary emphasis.
    let probe = build_classifier_dataset(
        &lens,
        0,
        Direction::Backward,
        C6_HELDOUT,
        &GenConfig {
            seed: 64_001,
            ..GenConfig::default()
        },
    )
    .expect("held-out records");
    let acc = balanced_accuracy(model, &probe.records, 0.5).expect("both label classes present");

    // Ablation: rendering with the gate forced open (threshold 0 accepts
    // every query) must hurt the picture by a wide margin, otherwise the
    // factorization would be decoration.
    let scene = spheres_scene();
    let cfg = DofConfig {
        spp: 16,
        sensor_offset: 2.0,
        seed: 606,
        pupil: None,
    };
    let oracle = OracleBackend::new(gauss(), Direction::Backward, vec![0]).expect("oracle");
    let mut film_ref = Film::for_lens(&lens, 128, 128).expect("film");
    render_dof(&lens, &oracle, &scene, &cfg, &mut film_ref).expect("oracle render");

    let mut mape_by_threshold = [0.0f64; 2];
    for (slot, threshold) in [(0usize, 0.5f32), (1usize, 0.0f32)] {
        let backend =
            NeuralBackend::new(vec![model.clone()], threshold).expect("neural backend");
        let mut film = Film::for_lens(&lens, 128, 128).expect("film");
        render_dof(&lens, &backend, &scene, &cfg, &mut film).expect("neural render");
        mape_by_threshold[slot] =
            mape(&linear(&film_ref), &linear(&film), MAPE_FLOOR).expect("mape");
    }
    let [gated, ungated] = mape_by_threshold;

    report(
        6,
        "classifier-accuracy-and-ablation",
        acc >= C6_MIN_BALANCED_ACC && ungated >= C6_ABLATION_FACTOR * gated,
        &format!(
            "balanced accuracy {acc:.4} on {C6_HELDOUT} held-out records; \
             DOF MAPE {gated:.3} gated vs {ungated:.3} ungated ({:.1}x)",
            ungated / gated.max(1e-12)
        ),
    );
}

// -- 7: depth-of-field parity --------------------------------------------------

#[test]
fn c07_neural_dof_matches_oracle() {
    let t0 = Instant::now();
    let lens = gauss();
    let scene = spheres_scene();
    let cfg = DofConfig {
        spp: C7_SPP,
        sensor_offset: 2.0,
        seed: 707,
        pupil: None,
    };

    let oracle = OracleBackend::new(gauss(), Direction::Backward, vec![0]).expect("oracle");
    let mut film_ref = Film::for_lens(&lens, C7_SIZE, C7_SIZE).expect("film");
    render_dof(&lens, &oracle, &scene, &cfg, &mut film_ref).expect("oracle render");

    let neural =
        NeuralBackend::new(vec![models().backward.clone()], 0.5).expect("neural backend");
    let mut film = Film::for_lens(&lens, C7_SIZE, C7_SIZE).expect("film");
    render_dof(&lens, &neural, &scene, &cfg, &mut film).expect("neural render");

    // Both runs share sample seeds, so the difference isolates the transport
    // map rather than Monte Carlo noise.
    let err = mape(&linear(&film_ref), &linear(&film), MAPE_FLOOR).expect("mape");
    let dt = t0.elapsed().as_secs_f64();
    report(
        7,
        "neural-dof-parity",
        err <= C7_MAX_MAPE && dt < C7_BUDGET_S,
        &format!("MAPE {err:.4} at {C7_SIZE}x{C7_SIZE}, {C7_SPP} spp, in {dt:.0}s"),
    );
}

// -- 8: lens-flare ghost parity -------------------------------------------------

#[test]
fn c08_neural_ghost_matches_oracle() {
    let lens = gauss();
    let cfg = FlareConfig {
        light: DistantLight {
            direction: Vec3::new(0.05, 0.03, 1.0).normalize(),
            irradiance: 100.0,
            spectrum: SpectrumCurve::Flat(1.0),
        },
        rays_per_path: C8_RAYS,
        filter: Filter::Bilinear,
        seed: 808,
        paths: vec![GHOST_PATH],
    };

    let oracle =
        OracleBackend::new(gauss(), Direction::Forward, vec![GHOST_PATH]).expect("oracle");
    let mut film_ref = Film::for_lens(&lens, C8_SIZE, C8_SIZE).expect("film");
    render_flare(&lens, &oracle, &cfg, &mut film_ref).expect("oracle render");

    let neural = NeuralBackend::new(vec![models().ghost.clone()], 0.5).expect("neural backend");
    let mut film = Film::for_lens(&lens, C8_SIZE, C8_SIZE).expect("film");
    render_flare(&lens, &neural, &cfg, &mut film).expect("neural render");

    let err = mape(&linear(&film_ref), &linear(&film), MAPE_FLOOR).expect("mape");
    report(
        8,
        "neural-ghost-parity",
        err <= C8_MAX_MAPE,
        &format!("MAPE {err:.4} on path {GHOST_PATH:#x} at {C8_SIZE}x{C8_SIZE}, {C8_RAYS} rays"),
    );
}

// -- 9: throughput --------------------------------------------------------------

/// Renderer-shaped query stream: sensor points aimed at the exit pupil disc,
/// the same geometry the backward integrator emits. A uniform direction
/// stream would be ~75% vignetted rays that the oracle rejects after one or
/// two surfaces, which flatters neither backend's real per-ray cost.
fn aimed_backward_samples(lens: &LensSystem, n: usize, seed: u64) -> Vec<InputSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pupil_z, pupil_r) = default_pupil(lens);
    (0..n)
        .map(|_| {
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
        })
        .collect()
}

fn time_backend(backend: &dyn LensBackend, samples: &[InputSample]) -> (f64, u64) {
    let warm = &samples[..4096.min(samples.len())];
    backend.query_batch(0, warm).expect("warmup");
    let t0 = Instant::now();
    let mut transported = 0u64;
    for chunk in samples.chunks(4096) {
        let out = backend.query_batch(0, chunk).expect("query");
        transported += out.iter().flatten().count() as u64;
    }
    (samples.len() as f64 / t0.elapsed().as_secs_f64(), transported)
}

#[test]
fn c09_neural_backend_outpaces_oracle() {
    let lens = gauss();
    let samples = aimed_backward_samples(&lens, C9_SAMPLES, 909);

    let oracle = OracleBackend::new(gauss(), Direction::Backward, vec![0]).expect("oracle");
    let neural =
        NeuralBackend::new(vec![models().backward.clone()], 0.5).expect("neural backend");

    // Both timed on this one thread over identical queries.
    let (oracle_rate, oracle_hits) = time_backend(&oracle, &samples);
    let (neural_rate, neural_hits) = time_backend(&neural, &samples);
    let speedup = neural_rate / oracle_rate;

    report(
        9,
        "neural-throughput-advantage",
        speedup >= C9_MIN_SPEEDUP && oracle_hits > 0 && neural_hits > 0,
        &format!(
            "{:.2}M rays/s neural vs {:.2}M rays/s oracle = {speedup:.2}x \
             ({neural_hits} vs {oracle_hits} transported of {C9_SAMPLES})",
            neural_rate / 1e6,
            oracle_rate / 1e6
        ),
    );
}

// -- 10: refocusing sweeps the scene ---------------------------------------------

/// Stripe-contrast sharpness inside one probe box `[x_lo, x_hi, y_lo, y_hi]`
/// (sensor mm). The probed albedo stripes are horizontal bands, so the
/// focus signal lives in *vertical* CIE-Y differences; pixels are first
/// binned 2×2 to knock down Monte Carlo noise without washing out a
/// defocus edge several pixels wide. Normalized by the squared regional
/// mean so absolute brightness cancels.
fn roi_sharpness(film: &Film, roi: &[f64; 4]) -> f64 {
    let cols: Vec<usize> = (0..film.width())
        .filter(|&c| {
            let x = film.pixel_center(0, c).x;
            x > roi[0] && x < roi[1]
        })
        .collect();
    let rows: Vec<usize> = (0..film.height())
        .filter(|&r| {
            let y = film.pixel_center(r, 0).y;
            y > roi[2] && y < roi[3]
        })
        .collect();
    let (bw, bh) = (cols.len() / 2, rows.len() / 2);
    assert!(bw >= 6 && bh >= 6, "degenerate region: {bw}x{bh} bins");

    let mut binned = vec![0.0f64; bw * bh];
    for (bi, b) in binned.iter_mut().enumerate() {
        let (br, bc) = (bi / bw, bi % bw);
        for dr in 0..2 {
            for dc in 0..2 {
                *b += film.xyz_at(rows[2 * br + dr], cols[2 * bc + dc])[1];
            }
        }
        *b *= 0.25;
    }

    let (mut grad, mut pairs) = (0.0f64, 0u64);
    for br in 0..bh - 1 {
        for bc in 0..bw {
            grad += (binned[br * bw + bc] - binned[(br + 1) * bw + bc]).powi(2);
            pairs += 1;
        }
    }
    let mean = binned.iter().sum::<f64>() / binned.len() as f64;
    grad / (pairs as f64 * mean * mean + 1e-30)
}

#[test]
fn c10_focus_sweep_tracks_the_three_depths() {
    let lens = gauss();
    let scene = spheres_scene();
    let oracle = OracleBackend::new(gauss(), Direction::Backward, vec![0]).expect("oracle");

    // Sensor offsets that focus each sphere depth, from the paraxial
    // conjugate: gap behind the last vertex minus the nominal gap.
    let last_vertex = lens
        .surfaces()
        .iter()
        .rev()
        .find(|s| s.kind.is_refractive())
        .expect("refractive surfaces")
        .z;
    let nominal_gap = lens.output_plane_z - last_vertex;
    let offsets: Vec<f64> = SPHERE_DEPTHS_MM
        .iter()
        .map(|&d| sensor_gap_for_object(&lens, d, 550.0) - nominal_gap)
        .collect();
    // Nearer objects need the sensor pushed further out.
    let offsets_descend = offsets.windows(2).all(|w| w[0] > w[1] + 0.1);

    // Each sphere's paraxial image: center c = m·x on the x axis, half
    // extent e = |m|·radius, at the depth's own magnification.
    let image: Vec<(f64, f64)> = scene
        .spheres
        .iter()
        .map(|s| {
            let m = lateral_magnification(&lens, s.center.z.abs(), 550.0);
            (m * s.center.x, m.abs() * s.radius)
        })
        .collect();
    assert_eq!(image.len(), 3);
    let (c0, e0) = image[0];
    let (c1, e1) = image[1];
    let (c2, e2) = image[2];

    // The spheres overlap on the sensor (near occludes far), so each probe
    // region must stay away from its neighbours' limbs: an in-focus edge of
    // the *red* sphere inside the green region would count as green
    // contrast. Red is nearest and unoccluded, so its region is a centred
    // interior box; green keeps to the side away from red; blue keeps to
    // the side away from green. Margins absorb defocus fringes and the
    // small chief-ray drift between sensor offsets.
    let rois: [[f64; 4]; 3] = [
        [c0 - 0.62 * e0, c0 + 0.62 * e0, -0.62 * e0, 0.62 * e0],
        [c1 + 0.12 * e1, c1 + 0.72 * e1, -0.55 * e1, 0.55 * e1],
        [e1 + 0.9, c2 + 0.66 * e2, -0.50 * e2, 0.50 * e2],
    ];

    let mut sharp = [[0.0f64; 3]; 3];
    for (i, &offset) in offsets.iter().enumerate() {
        let cfg = DofConfig {
            spp: C10_SPP,
            sensor_offset: offset,
            seed: 1010,
            pupil: None,
        };
        let mut film = Film::for_lens(&lens, C10_SIZE, C10_SIZE).expect("film");
        render_dof(&lens, &oracle, &scene, &cfg, &mut film).expect("render");
        for (j, roi) in rois.iter().enumerate() {
            sharp[i][j] = roi_sharpness(&film, roi);
        }
    }

    // Each sphere's contrast must peak at the offset conjugate to its own
    // depth, and those peaks walk the sweep in order — the focal plane
    // moves monotonically from the near sphere to the far one as the
    // sensor slides back toward the nominal plane.
    let mut peak_offset = [0usize; 3];
    for j in 0..3 {
        let mut best = 0usize;
        for i in 1..3 {
            if sharp[i][j] > sharp[best][j] {
                best = i;
            }
        }
        peak_offset[j] = best;
    }

    report(
        10,
        "focus-sweep-monotonic",
        peak_offset == [0, 1, 2] && offsets_descend,
        &format!(
            "offsets {:.2?} mm; per-depth contrast peaks at offsets {peak_offset:?} \
             (contrast rows {:?})",
            offsets,
            sharp
                .iter()
                .map(|r| r.map(|v| (v * 1e3).round() / 1e3))
                .collect::<Vec<_>>()
        ),
    );
}

// -- 11: determinism ----------------------------------------------------------------

fn film_hash(film: &Film) -> u64 {
    let mut h = DefaultHasher::new();
    (film.width(), film.height()).hash(&mut h);
    for row in 0..film.height() {
        for col in 0..film.width() {
            for v in film.xyz_at(row, col) {
                v.to_bits().hash(&mut h);
            }
            film.count_at(row, col).hash(&mut h);
        }
    }
    h.finish()
}

#[test]
fn c11_double_runs_are_bitwise_identical() {
    let lens = gauss();

    let flare_cfg = FlareConfig {
        light: DistantLight {
            direction: Vec3::new(0.05, 0.03, 1.0).normalize(),
            irradiance: 1.0,
            spectrum: SpectrumCurve::Flat(1.0),
        },
        rays_per_path: 200_000,
        filter: Filter::Bilinear,
        seed: 1111,
        paths: vec![0, GHOST_PATH],
    };
    let fwd =
        OracleBackend::new(gauss(), Direction::Forward, vec![0, GHOST_PATH]).expect("oracle");
    let mut flare_hashes = [0u64; 2];
    let mut lit = 0usize;
    for h in &mut flare_hashes {
        let mut film = Film::for_lens(&lens, 256, 256).expect("film");
        render_flare(&lens, &fwd, &flare_cfg, &mut film).expect("flare render");
        lit = (0..256)
            .flat_map(|r| (0..256).map(move |c| (r, c)))
            .filter(|&(r, c)| film.xyz_at(r, c)[1] > 0.0)
            .count();
        *h = film_hash(&film);
    }

    let bwd = OracleBackend::new(gauss(), Direction::Backward, vec![0]).expect("oracle");
    let scene = spheres_scene();
    let dof_cfg = DofConfig {
        spp: 8,
        sensor_offset: 2.0,
        seed: 2222,
        pupil: None,
    };
    let mut dof_hashes = [0u64; 2];
    for h in &mut dof_hashes {
        let mut film = Film::for_lens(&lens, 96, 96).expect("film");
        render_dof(&lens, &bwd, &scene, &dof_cfg, &mut film).expect("dof render");
        *h = film_hash(&film);
    }

    report(
        11,
        "double-run-determinism",
        flare_hashes[0] == flare_hashes[1] && dof_hashes[0] == dof_hashes[1] && lit > 100,
        &format!(
            "flare {:016x} (x2, {lit} lit px), dof {:016x} (x2)",
            flare_hashes[0], dof_hashes[0]
        ),
    );
}
