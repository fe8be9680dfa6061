//! Ground-truth sequential ray tracer with Fresnel splitting.
//!
//! Rays traverse the surface list in axial order. Refractive surfaces carry
//! a transmit/reflect interaction; the stop and the planes do not. A path id
//! encodes the interaction sequence: bit `k-1` set means the k-th refractive
//! interaction reflects. Intensity is the running product of unpolarized
//! Fresnel power coefficients.

use crate::error::{Error, Result};
use crate::lens::{LensSystem, Surface, SurfaceKind};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;

/// Minimum travel distance to the next hit, mm; avoids self-intersection.
pub const HIT_EPS: f64 = 1e-6;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Input plane toward sensor, omega_z > 0 at the start.
    Forward,
    /// Sensor toward input plane, omega_z < 0 at the start.
    Backward,
}

#[derive(Copy, Clone, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Ray {
            origin,
            dir: dir.normalize(),
        }
    }
}

#[derive(Copy, Clone, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Front normal: points toward -z at the vertex.
    pub normal: Vec3,
}

/// Ray/surface intersection with vertex-side hemisphere selection.
///
/// Spherical caps intersect a line twice; only the root on the same side of
/// the sphere center as the vertex belongs to the lens surface. Returns the
/// geometric hit without any aperture test.
pub fn intersect(surface: &Surface, ray: &Ray) -> Option<Hit> {
    match surface.kind {
        SurfaceKind::Spherical => {
            let r = surface.radius;
            let center = Vec3::new(0.0, 0.0, surface.z + r);
            let oc = ray.origin - center;
            let b = oc.dot(&ray.dir);
            let c = oc.dot(&oc) - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            // Stable quadratic: q = -(b + sign(b) sqrt), roots q and c/q.
            let q = -(b + b.signum() * sq);
            let (mut t0, mut t1) = (q, if q != 0.0 { c / q } else { -b + sq });
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            for t in [t0, t1] {
                if t <= HIT_EPS {
                    continue;
                }
                let p = ray.origin + ray.dir * t;
                // Vertex sits at z_c - r; require the hit on that hemisphere.
                if (p.z - center.z) * r < 0.0 {
                    let normal = (p - center) / r;
                    return Some(Hit {
                        t,
                        point: p,
                        normal,
                    });
                }
            }
            None
        }
        _ => {
            if ray.dir.z.abs() < 1e-12 {
                return None;
            }
            let t = (surface.z - ray.origin.z) / ray.dir.z;
            if t <= HIT_EPS {
                return None;
            }
            Some(Hit {
                t,
                point: ray.origin + ray.dir * t,
                normal: Vec3::new(0.0, 0.0, -1.0),
            })
        }
    }
}

/// Mirror reflection of `omega` about unit normal `n`.
pub fn reflect(omega: Vec3, n: Vec3) -> Vec3 {
    omega - n * (2.0 * omega.dot(&n))
}

/// Snell refraction. `n` must oppose `omega` (omega . n < 0). Returns `None`
/// on total internal reflection.
pub fn refract(omega: Vec3, n: Vec3, n_i: f64, n_t: f64) -> Option<Vec3> {
    let eta = n_i / n_t;
    let cos_i = -omega.dot(&n);
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i).max(0.0);
    if sin2_t > 1.0 {
        return None;
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    Some((omega * eta + n * (eta * cos_i - cos_t)).normalize())
}

/// Unpolarized Fresnel power reflectance for a dielectric boundary.
/// `cos_i` >= 0 is the incident angle cosine. Returns 1 on TIR.
pub fn fresnel_dielectric(cos_i: f64, n_i: f64, n_t: f64) -> f64 {
    let cos_i = cos_i.clamp(0.0, 1.0);
    let sin2_t = (n_i / n_t).powi(2) * (1.0 - cos_i * cos_i);
    if sin2_t > 1.0 {
        return 1.0;
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    let r_s = (n_i * cos_i - n_t * cos_t) / (n_i * cos_i + n_t * cos_t);
    let r_p = (n_t * cos_i - n_i * cos_t) / (n_t * cos_i + n_i * cos_t);
    0.5 * (r_s * r_s + r_p * r_p)
}

/// Exit state of a ray that completed a path.
#[derive(Copy, Clone, Debug)]
pub struct ExitRecord {
    /// Point on the terminal plane (sensor forward, input plane backward).
    pub position: Vec3,
    /// Unit travel direction at the terminal plane.
    pub direction: Vec3,
    /// Product of Fresnel power coefficients along the path.
    pub intensity: f64,
    /// Number of refractive interactions.
    pub interactions: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Station {
    Transmit,
    Reflect,
    StopPass,
    Arrive,
    AbsorbedAperture,
    Miss,
    TirBlocked,
    Lost,
}

/// One step of an instrumented trace.
#[derive(Copy, Clone, Debug)]
pub struct TraceEvent {
    /// Index into `LensSystem::surfaces`, or `usize::MAX` for the input plane.
    pub surface: usize,
    pub station: Station,
    pub position: Vec3,
    pub direction: Vec3,
    pub intensity: f64,
    /// Fresnel reflectance at transmit/reflect events, else 0.
    pub fresnel_r: f64,
}

trait EventSink {
    fn event(&mut self, ev: TraceEvent);
}

impl EventSink for () {
    #[inline(always)]
    fn event(&mut self, _ev: TraceEvent) {}
}

impl EventSink for Vec<TraceEvent> {
    fn event(&mut self, ev: TraceEvent) {
        self.push(ev);
    }
}

/// Medium on the -z side of surface `idx`.
fn medium_before(lens: &LensSystem, idx: usize) -> usize {
    if idx == 0 {
        0
    } else {
        lens.surfaces()[idx - 1].material_after
    }
}

fn trace_path_sink<S: EventSink>(
    lens: &LensSystem,
    ray0: &Ray,
    lambda_nm: f64,
    path_id: u64,
    direction: Direction,
    sink: &mut S,
) -> Option<ExitRecord> {
    let surfaces = lens.surfaces();
    let n_surf = surfaces.len() as i64;
    let mut ray = Ray::new(ray0.origin, ray0.dir);
    let mut idx: i64 = match direction {
        Direction::Forward => 0,
        Direction::Backward => n_surf - 2,
    };
    let mut medium = match direction {
        Direction::Forward => 0,
        Direction::Backward => medium_before(lens, (n_surf - 1) as usize),
    };
    let mut k: u32 = 0;
    let mut intensity = 1.0f64;

    loop {
        if idx < 0 {
            // Crossed in front of the first surface.
            if direction == Direction::Backward && ray.dir.z < 0.0 {
                let plane = lens.input_surface();
                let hit = intersect(&plane, &ray)?;
                if path_id >> k != 0 {
                    return None;
                }
                sink.event(TraceEvent {
                    surface: usize::MAX,
                    station: Station::Arrive,
                    position: hit.point,
                    direction: ray.dir,
                    intensity,
                    fresnel_r: 0.0,
                });
                return Some(ExitRecord {
                    position: hit.point,
                    direction: ray.dir,
                    intensity,
                    interactions: k,
                });
            }
            sink.event(TraceEvent {
                surface: usize::MAX,
                station: Station::Lost,
                position: ray.origin,
                direction: ray.dir,
                intensity,
                fresnel_r: 0.0,
            });
            return None;
        }
        debug_assert!(idx < n_surf);
        let s = &surfaces[idx as usize];

        let hit = match intersect(s, &ray) {
            Some(h) => h,
            None => {
                sink.event(TraceEvent {
                    surface: idx as usize,
                    station: Station::Miss,
                    position: ray.origin,
                    direction: ray.dir,
                    intensity,
                    fresnel_r: 0.0,
                });
                return None;
            }
        };
        let r_hit = hit.point.x.hypot(hit.point.y);

        match s.kind {
            SurfaceKind::Sensor => {
                if direction == Direction::Forward && ray.dir.z > 0.0 {
                    if path_id >> k != 0 {
                        return None;
                    }
                    sink.event(TraceEvent {
                        surface: idx as usize,
                        station: Station::Arrive,
                        position: hit.point,
                        direction: ray.dir,
                        intensity,
                        fresnel_r: 0.0,
                    });
                    return Some(ExitRecord {
                        position: hit.point,
                        direction: ray.dir,
                        intensity,
                        interactions: k,
                    });
                }
                // A backward ray returning to the sensor is absorbed there.
                sink.event(TraceEvent {
                    surface: idx as usize,
                    station: Station::Lost,
                    position: hit.point,
                    direction: ray.dir,
                    intensity,
                    fresnel_r: 0.0,
                });
                return None;
            }
            SurfaceKind::Stop => {
                if r_hit > s.semi_aperture {
                    sink.event(TraceEvent {
                        surface: idx as usize,
                        station: Station::AbsorbedAperture,
                        position: hit.point,
                        direction: ray.dir,
                        intensity,
                        fresnel_r: 0.0,
                    });
                    return None;
                }
                sink.event(TraceEvent {
                    surface: idx as usize,
                    station: Station::StopPass,
                    position: hit.point,
                    direction: ray.dir,
                    intensity,
                    fresnel_r: 0.0,
                });
                ray = Ray {
                    origin: hit.point,
                    dir: ray.dir,
                };
            }
            SurfaceKind::Spherical | SurfaceKind::Planar => {
                if r_hit > s.semi_aperture {
                    sink.event(TraceEvent {
                        surface: idx as usize,
                        station: Station::AbsorbedAperture,
                        position: hit.point,
                        direction: ray.dir,
                        intensity,
                        fresnel_r: 0.0,
                    });
                    return None;
                }
                if k >= 64 {
                    return None;
                }
                let wants_reflect = (path_id >> k) & 1 == 1;
                k += 1;

                let other = if ray.dir.z > 0.0 {
                    s.material_after
                } else {
                    medium_before(lens, idx as usize)
                };
                let n_i = lens.material(medium).ior_unchecked(lambda_nm);
                let n_t = lens.material(other).ior_unchecked(lambda_nm);
                let normal = if ray.dir.dot(&hit.normal) > 0.0 {
                    -hit.normal
                } else {
                    hit.normal
                };
                let cos_i = -ray.dir.dot(&normal);
                let fr = fresnel_dielectric(cos_i, n_i, n_t);

                if wants_reflect {
                    intensity *= fr;
                    let d = reflect(ray.dir, normal);
                    sink.event(TraceEvent {
                        surface: idx as usize,
                        station: Station::Reflect,
                        position: hit.point,
                        direction: d,
                        intensity,
                        fresnel_r: fr,
                    });
                    ray = Ray {
                        origin: hit.point,
                        dir: d,
                    };
                } else {
                    let d = match refract(ray.dir, normal, n_i, n_t) {
                        Some(d) => d,
                        None => {
                            sink.event(TraceEvent {
                                surface: idx as usize,
                                station: Station::TirBlocked,
                                position: hit.point,
                                direction: ray.dir,
                                intensity,
                                fresnel_r: fr,
                            });
                            return None;
                        }
                    };
                    intensity *= 1.0 - fr;
                    medium = other;
                    sink.event(TraceEvent {
                        surface: idx as usize,
                        station: Station::Transmit,
                        position: hit.point,
                        direction: d,
                        intensity,
                        fresnel_r: fr,
                    });
                    ray = Ray {
                        origin: hit.point,
                        dir: d,
                    };
                }
            }
            SurfaceKind::Input => unreachable!("input plane is not in the surface list"),
        }

        if ray.dir.z == 0.0 {
            sink.event(TraceEvent {
                surface: idx as usize,
                station: Station::Lost,
                position: ray.origin,
                direction: ray.dir,
                intensity,
                fresnel_r: 0.0,
            });
            return None;
        }
        idx += if ray.dir.z > 0.0 { 1 } else { -1 };
    }
}

/// Trace a ray along the interaction sequence prescribed by `path_id`.
///
/// Forward rays start in front of the first surface and terminate on the
/// sensor plane; backward rays start on the sensor plane and terminate on
/// the input plane. Returns `None` when the ray is absorbed, misses, hits
/// TIR on a prescribed transmission, or the id is not fully consumed.
pub fn trace_path(
    lens: &LensSystem,
    ray: &Ray,
    lambda_nm: f64,
    path_id: u64,
    direction: Direction,
) -> Option<ExitRecord> {
    trace_path_sink(lens, ray, lambda_nm, path_id, direction, &mut ())
}

/// Instrumented variant of [`trace_path`]: every surface event is recorded.
pub fn trace_path_events(
    lens: &LensSystem,
    ray: &Ray,
    lambda_nm: f64,
    path_id: u64,
    direction: Direction,
) -> (Vec<TraceEvent>, Option<ExitRecord>) {
    let mut events = Vec::new();
    let exit = trace_path_sink(lens, ray, lambda_nm, path_id, direction, &mut events);
    (events, exit)
}

#[derive(Copy, Clone, Debug)]
pub struct TraceAllConfig {
    pub max_reflections: u32,
    /// Branches whose running intensity falls below this are pruned.
    pub i_min: f64,
}

impl Default for TraceAllConfig {
    fn default() -> Self {
        TraceAllConfig {
            max_reflections: 2,
            i_min: 1e-4,
        }
    }
}

/// Trace every path the ray can take, splitting T/R at each refractive
/// surface, pruning on reflection budget and minimum intensity. Returns
/// sensor-reaching paths sorted by id.
pub fn trace_all(
    lens: &LensSystem,
    ray: &Ray,
    lambda_nm: f64,
    cfg: TraceAllConfig,
) -> Vec<(u64, ExitRecord)> {
    struct Dfs<'a> {
        lens: &'a LensSystem,
        lambda_nm: f64,
        cfg: TraceAllConfig,
        out: Vec<(u64, ExitRecord)>,
    }

    #[derive(Copy, Clone)]
    struct State {
        ray: Ray,
        idx: i64,
        medium: usize,
        k: u32,
        refl: u32,
        intensity: f64,
        bits: u64,
    }

    impl Dfs<'_> {
        fn step(&mut self, st: State) {
            let surfaces = self.lens.surfaces();
            let mut ray = st.ray;
            let mut idx = st.idx;
            let medium = st.medium;
            // Advance through non-interacting stations, then branch.
            loop {
                if idx < 0 {
                    return;
                }
                let s = &surfaces[idx as usize];
                let hit = match intersect(s, &ray) {
                    Some(h) => h,
                    None => return,
                };
                let r_hit = hit.point.x.hypot(hit.point.y);
                match s.kind {
                    SurfaceKind::Sensor => {
                        if ray.dir.z > 0.0 {
                            self.out.push((
                                st.bits,
                                ExitRecord {
                                    position: hit.point,
                                    direction: ray.dir,
                                    intensity: st.intensity,
                                    interactions: st.k,
                                },
                            ));
                        }
                        return;
                    }
                    SurfaceKind::Stop => {
                        if r_hit > s.semi_aperture {
                            return;
                        }
                        ray = Ray {
                            origin: hit.point,
                            dir: ray.dir,
                        };
                        idx += if ray.dir.z > 0.0 { 1 } else { -1 };
                    }
                    SurfaceKind::Spherical | SurfaceKind::Planar => {
                        if r_hit > s.semi_aperture || st.k >= 63 {
                            return;
                        }
                        let other = if ray.dir.z > 0.0 {
                            s.material_after
                        } else {
                            medium_before(self.lens, idx as usize)
                        };
                        let n_i = self.lens.material(medium).ior_unchecked(self.lambda_nm);
                        let n_t = self.lens.material(other).ior_unchecked(self.lambda_nm);
                        let normal = if ray.dir.dot(&hit.normal) > 0.0 {
                            -hit.normal
                        } else {
                            hit.normal
                        };
                        let cos_i = -ray.dir.dot(&normal);
                        let fr = fresnel_dielectric(cos_i, n_i, n_t);

                        // Transmit branch (bit stays 0).
                        let i_t = st.intensity * (1.0 - fr);
                        if i_t >= self.cfg.i_min {
                            if let Some(d) = refract(ray.dir, normal, n_i, n_t) {
                                if d.z != 0.0 {
                                    let next = Ray {
                                        origin: hit.point,
                                        dir: d,
                                    };
                                    self.step(State {
                                        ray: next,
                                        idx: idx + if d.z > 0.0 { 1 } else { -1 },
                                        medium: other,
                                        k: st.k + 1,
                                        refl: st.refl,
                                        intensity: i_t,
                                        bits: st.bits,
                                    });
                                }
                            }
                        }
                        // Reflect branch (set bit k).
                        let i_r = st.intensity * fr;
                        if st.refl < self.cfg.max_reflections && i_r >= self.cfg.i_min {
                            let d = reflect(ray.dir, normal);
                            if d.z != 0.0 {
                                let next = Ray {
                                    origin: hit.point,
                                    dir: d,
                                };
                                self.step(State {
                                    ray: next,
                                    idx: idx + if d.z > 0.0 { 1 } else { -1 },
                                    medium,
                                    k: st.k + 1,
                                    refl: st.refl + 1,
                                    intensity: i_r,
                                    bits: st.bits | (1 << st.k),
                                });
                            }
                        }
                        return;
                    }
                    SurfaceKind::Input => unreachable!(),
                }
            }
        }
    }

    let mut dfs = Dfs {
        lens,
        lambda_nm,
        cfg,
        out: Vec::new(),
    };
    let ray = Ray::new(ray.origin, ray.dir);
    if ray.dir.z > 0.0 {
        dfs.step(State {
            ray,
            idx: 0,
            medium: 0,
            k: 0,
            refl: 0,
            intensity: 1.0,
            bits: 0,
        });
    }
    dfs.out.sort_by_key(|(id, _)| *id);
    dfs.out
}

/// Structurally enumerate forward sensor-reaching path ids with at most
/// `max_reflections` reflections, ignoring geometry and intensity.
///
/// Only refractive surfaces interact, so a path needs an even reflection
/// count to come out the back: each reflection flips the axial travel
/// direction. For `max_reflections = 2` and `m` refractive surfaces this
/// yields `1 + m(m-1)/2` ids.
pub fn enumerate_paths(lens: &LensSystem, max_reflections: u32) -> Vec<u64> {
    fn rec(
        surfaces: &[Surface],
        idx: i64,
        forward: bool,
        k: u32,
        refl: u32,
        bits: u64,
        max_reflections: u32,
        out: &mut Vec<u64>,
    ) {
        if idx < 0 {
            return;
        }
        if idx as usize >= surfaces.len() {
            unreachable!("sensor terminates forward traversal");
        }
        let s = &surfaces[idx as usize];
        let step = if forward { 1 } else { -1 };
        match s.kind {
            SurfaceKind::Sensor => {
                if forward {
                    out.push(bits);
                }
            }
            SurfaceKind::Stop => rec(
                surfaces,
                idx + step,
                forward,
                k,
                refl,
                bits,
                max_reflections,
                out,
            ),
            SurfaceKind::Spherical | SurfaceKind::Planar => {
                if k >= 63 {
                    return;
                }
                rec(
                    surfaces,
                    idx + step,
                    forward,
                    k + 1,
                    refl,
                    bits,
                    max_reflections,
                    out,
                );
                if refl < max_reflections {
                    rec(
                        surfaces,
                        idx - step,
                        !forward,
                        k + 1,
                        refl + 1,
                        bits | (1 << k),
                        max_reflections,
                        out,
                    );
                }
            }
            SurfaceKind::Input => unreachable!(),
        }
    }

    let mut out = Vec::new();
    rec(
        lens.surfaces(),
        0,
        true,
        0,
        0,
        0,
        max_reflections,
        &mut out,
    );
    out.sort_unstable();
    out.dedup();
    out
}

/// Reverse the interaction order of a path id over `n` interactions; the id
/// of the time-reversed path.
pub fn reverse_path_id(path_id: u64, n: u32) -> u64 {
    let mut out = 0u64;
    for k in 0..n {
        if (path_id >> k) & 1 == 1 {
            out |= 1 << (n - 1 - k);
        }
    }
    out
}

/// Rotation/mirror frame that maps a plane sample into canonical form.
#[derive(Copy, Clone, Debug)]
pub struct CanonicalFrame {
    pub cos_phi: f64,
    pub sin_phi: f64,
    pub mirrored: bool,
}

/// Canonical query: radial offset, tangential direction components.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CanonicalInput {
    pub r: f64,
    pub omega_x: f64,
    pub omega_y: f64,
}

/// Reduce a plane sample (position, direction) by the rotational and mirror
/// symmetry of the lens: rotate the position onto +x, then mirror so the
/// direction's y-component is non-negative. On the axis (r ~ 0) the
/// direction azimuth fixes the rotation instead.
pub fn canonicalize(p_xy: Vec2, omega: Vec3) -> (CanonicalInput, CanonicalFrame) {
    let r = p_xy.norm();
    let (cos_phi, sin_phi) = if r > 1e-9 {
        (p_xy.x / r, p_xy.y / r)
    } else {
        let w = omega.x.hypot(omega.y);
        if w > 1e-12 {
            (omega.x / w, omega.y / w)
        } else {
            (1.0, 0.0)
        }
    };
    // Rotate by -phi.
    let wx = cos_phi * omega.x + sin_phi * omega.y;
    let mut wy = -sin_phi * omega.x + cos_phi * omega.y;
    let mirrored = wy < 0.0;
    if mirrored {
        wy = -wy;
    }
    (
        CanonicalInput {
            r,
            omega_x: wx,
            omega_y: wy,
        },
        CanonicalFrame {
            cos_phi,
            sin_phi,
            mirrored,
        },
    )
}

/// Map a canonical-frame 2-vector back to the original frame.
pub fn frame_restore(frame: &CanonicalFrame, v: Vec2) -> Vec2 {
    let y = if frame.mirrored { -v.y } else { v.y };
    Vec2::new(
        frame.cos_phi * v.x - frame.sin_phi * y,
        frame.sin_phi * v.x + frame.cos_phi * y,
    )
}

/// Map a 2-vector from the original frame into the canonical frame.
pub fn frame_reduce(frame: &CanonicalFrame, v: Vec2) -> Vec2 {
    let x = frame.cos_phi * v.x + frame.sin_phi * v.y;
    let y = -frame.sin_phi * v.x + frame.cos_phi * v.y;
    Vec2::new(x, if frame.mirrored { -y } else { y })
}

/// Lift tangential direction components to a unit 3-vector; `forward` picks
/// the sign of the axial component.
pub fn lift_direction(wx: f64, wy: f64, forward: bool) -> Vec3 {
    let t2 = wx * wx + wy * wy;
    let z = (1.0 - t2).max(0.0).sqrt();
    Vec3::new(wx, wy, if forward { z } else { -z })
}

/// Wavelength check shared by dataset and CLI entry points.
pub fn check_lambda(lambda_nm: f64) -> Result<f64> {
    if !(crate::lens::LAMBDA_MIN_NM..=crate::lens::LAMBDA_MAX_NM).contains(&lambda_nm) {
        return Err(Error::WavelengthOutOfBand(lambda_nm));
    }
    Ok(lambda_nm)
}


#[cfg(test)]
mod perf_probe {
    use super::*;
    use crate::datagen::{mcmc_valid_samples, GenConfig};
    use crate::lens::{builtin, parse_lens_system};

    #[test]
    #[ignore]
    fn oracle_throughput() {
        let lens = parse_lens_system(builtin("gauss59").unwrap()).unwrap();
        let cfg = GenConfig::default();
        let (samples, _) =
            mcmc_valid_samples(&lens, 0, Direction::Backward, 100_000, &cfg).unwrap();
        let rays: Vec<Ray> = samples
            .iter()
            .map(|(p, _)| {
                let wz = -(1.0f64 - p[1] * p[1] - p[2] * p[2]).max(0.0).sqrt();
                Ray::new(
                    nalgebra::Vector3::new(p[0], 0.0, lens.sensor().z),
                    nalgebra::Vector3::new(p[1], p[2], wz),
                )
            })
            .collect();
        let t0 = std::time::Instant::now();
        let mut acc = 0.0f64;
        let mut hits = 0u64;
        for _ in 0..10 {
            for r in &rays {
                if let Some(e) = trace_path(&lens, r, 550.0, 0, Direction::Backward) {
                    acc += e.intensity;
                    hits += 1;
                }
            }
        }
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "oracle backward all-T: {:.0} ns/ray ({} hits, checksum {acc:.3})",
            dt * 1e9 / (10.0 * rays.len() as f64),
            hits
        );
    }
}
