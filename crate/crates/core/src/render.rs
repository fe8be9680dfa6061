//! The two integrators: forward lens-flare light tracing and backward
//! depth-of-field path tracing, both running over a shared lens-transport
//! backend (ground-truth tracer or factorized neural model), plus the film,
//! spectral-to-RGB conversion, image IO, and the MAPE metric.
//!
//! Geometry: the sensor rectangle is centred on the optical axis; film row 0
//! is the +y edge. Forward rays enter on the input plane travelling +z and
//! land on the sensor; backward rays start on the sensor travelling −z and
//! exit on the input plane into the scene, which occupies z below the input
//! plane. Physically the lens inverts the scene on the sensor; images are
//! written in sensor orientation.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::CanonPoint;
use crate::error::{Error, Result};
use crate::lens::LensSystem;
use crate::nn::FactorizedModel;
use crate::paraxial;
use crate::spectrum::{cie_xyz, sample_wavelength, srgb_encode, xyz_to_linear_srgb, y_integral};
use crate::trace::{
    canonicalize, frame_restore, trace_path, CanonicalFrame, Direction, Ray, Vec2, Vec3,
};

/// Default luminance floor for MAPE denominators.
pub const MAPE_FLOOR: f64 = 1e-3;

/// Default display gain for depth-of-field renders. Sensor irradiance
/// carries the pupil solid angle (~0.1 sr for the bundled double Gauss), so
/// a unit-radiance scene lands around 0.02; this gain puts it near
/// mid-gray without touching the radiometry.
pub const DOF_EXPOSURE: f64 = 8.0;

/// Lowest axial direction cosine the transport maps are sampled for; light
/// directions and pupil cones must stay inside it.
const COS_MIN: f64 = 0.17364817766693041; // cos 80°

/// Fixed work-split for the forward integrator: rays are dealt into this
/// many independently seeded blocks, so images do not depend on the worker
/// thread count.
const FLARE_BLOCKS: u64 = 256;

// ---------------------------------------------------------------------------
// Spectra

/// Smooth analytic spectral curve. Procedural scenes use these for albedos,
/// emission, and light spectra, so every radiance query is deterministic.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum SpectrumCurve {
    /// Equal energy at every wavelength.
    Flat(f64),
    /// `base + amp·exp(−(λ−center)²/(2·width²))`, clamped at zero.
    Bump {
        base: f64,
        amp: f64,
        center_nm: f64,
        width_nm: f64,
    },
}

impl SpectrumCurve {
    pub fn eval(&self, lambda_nm: f64) -> f64 {
        match *self {
            SpectrumCurve::Flat(v) => v,
            SpectrumCurve::Bump {
                base,
                amp,
                center_nm,
                width_nm,
            } => {
                let t = (lambda_nm - center_nm) / width_nm;
                (base + amp * (-0.5 * t * t).exp()).max(0.0)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Film

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Filter {
    /// Nearest pixel gets the full weight.
    Box,
    /// Weight shared over the 2×2 neighbourhood by distance to centres.
    Bilinear,
}

/// Accumulation raster over a physical sensor rectangle.
///
/// Pixels hold CIE XYZ sums in f64 plus a sample count used for coverage
/// diagnostics; integrators normalize explicitly from their own sample
/// budgets. Out-of-rectangle splats are counted and dropped.
#[derive(Clone, Debug)]
pub struct Film {
    width: usize,
    height: usize,
    half_width_mm: f64,
    half_height_mm: f64,
    xyz: Vec<[f64; 3]>,
    count: Vec<u32>,
    dropped: u64,
}

/// One filter tap: pixel index and its share of the sample weight.
type Tap = (usize, f64);

#[derive(Copy, Clone, Debug)]
struct FilmGeom {
    width: usize,
    height: usize,
    half_width_mm: f64,
    half_height_mm: f64,
}

impl FilmGeom {
    /// Continuous pixel coordinates of a physical point; row 0 at +y.
    fn continuous_px(&self, x_mm: f64, y_mm: f64) -> (f64, f64) {
        let u = (x_mm + self.half_width_mm) / (2.0 * self.half_width_mm) * self.width as f64;
        let v = (self.half_height_mm - y_mm) / (2.0 * self.half_height_mm) * self.height as f64;
        (u, v)
    }

    /// Filter taps for a sample at a physical position. Returns the number
    /// of taps written; taps outside the raster are omitted.
    fn filter_taps(&self, x_mm: f64, y_mm: f64, filter: Filter, taps: &mut [Tap; 4]) -> usize {
        let (u, v) = self.continuous_px(x_mm, y_mm);
        match filter {
            Filter::Box => {
                let (c, r) = (u.floor(), v.floor());
                if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
                    return 0;
                }
                taps[0] = (r as usize * self.width + c as usize, 1.0);
                1
            }
            Filter::Bilinear => {
                // Weights from the distance to the four surrounding centres.
                let (uc, vc) = (u - 0.5, v - 0.5);
                let (c0, r0) = (uc.floor(), vc.floor());
                let (fx, fy) = (uc - c0, vc - r0);
                let mut n = 0;
                for (dc, dr, w) in [
                    (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                    (1.0, 0.0, fx * (1.0 - fy)),
                    (0.0, 1.0, (1.0 - fx) * fy),
                    (1.0, 1.0, fx * fy),
                ] {
                    let (c, r) = (c0 + dc, r0 + dr);
                    if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
                        continue;
                    }
                    taps[n] = (r as usize * self.width + c as usize, w);
                    n += 1;
                }
                n
            }
        }
    }
}

impl Film {
    pub fn new(width: usize, height: usize, width_mm: f64, height_mm: f64) -> Result<Film> {
        if width == 0 || height == 0 || !(width_mm > 0.0) || !(height_mm > 0.0) {
            return Err(Error::Dimension(format!(
                "film {width}×{height} over {width_mm}×{height_mm} mm"
            )));
        }
        Ok(Film {
            width,
            height,
            half_width_mm: 0.5 * width_mm,
            half_height_mm: 0.5 * height_mm,
            xyz: vec![[0.0; 3]; width * height],
            count: vec![0; width * height],
            dropped: 0,
        })
    }

    /// Film over the lens's sensor rectangle.
    pub fn for_lens(lens: &LensSystem, width: usize, height: usize) -> Result<Film> {
        Film::new(width, height, lens.sensor_width, lens.sensor_height)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        (2.0 * self.half_width_mm / self.width as f64)
            * (2.0 * self.half_height_mm / self.height as f64)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn xyz_at(&self, row: usize, col: usize) -> [f64; 3] {
        self.xyz[row * self.width + col]
    }

    pub fn count_at(&self, row: usize, col: usize) -> u32 {
        self.count[row * self.width + col]
    }

    /// Physical centre of a pixel, mm.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vec2 {
        let dx = 2.0 * self.half_width_mm / self.width as f64;
        let dy = 2.0 * self.half_height_mm / self.height as f64;
        Vec2::new(
            -self.half_width_mm + (col as f64 + 0.5) * dx,
            self.half_height_mm - (row as f64 + 0.5) * dy,
        )
    }

    /// Copyable raster geometry; parallel workers compute filter taps from
    /// this while the film itself stays untouched until the ordered merge.
    fn geom(&self) -> FilmGeom {
        FilmGeom {
            width: self.width,
            height: self.height,
            half_width_mm: self.half_width_mm,
            half_height_mm: self.half_height_mm,
        }
    }

    /// Deposit `xyz` at a physical position through `filter`. A sample whose
    /// taps all fall outside the raster is counted as dropped.
    pub fn splat(&mut self, x_mm: f64, y_mm: f64, xyz: [f64; 3], filter: Filter) {
        let mut taps = [(0usize, 0.0f64); 4];
        let n = self.geom().filter_taps(x_mm, y_mm, filter, &mut taps);
        if n == 0 {
            self.dropped += 1;
            return;
        }
        for &(idx, w) in &taps[..n] {
            for c in 0..3 {
                self.xyz[idx][c] += w * xyz[c];
            }
        }
        self.count[taps[0].0] += 1;
    }

    /// Direct per-pixel accumulation for pixel-estimator integrators.
    pub fn add_pixel(&mut self, row: usize, col: usize, xyz: [f64; 3], samples: u32) {
        let idx = row * self.width + col;
        for c in 0..3 {
            self.xyz[idx][c] += xyz[c];
        }
        self.count[idx] += samples;
    }

    /// Add another film of identical geometry.
    pub fn merge(&mut self, other: &Film) -> Result<()> {
        if self.width != other.width
            || self.height != other.height
            || self.half_width_mm != other.half_width_mm
            || self.half_height_mm != other.half_height_mm
        {
            return Err(Error::Dimension("film merge with mismatched geometry".into()));
        }
        for (a, b) in self.xyz.iter_mut().zip(&other.xyz) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += *b;
        }
        self.dropped += other.dropped;
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for px in &mut self.xyz {
            for c in 0..3 {
                px[c] *= k;
            }
        }
    }

    /// Componentwise sum over all pixels.
    pub fn total_xyz(&self) -> [f64; 3] {
        let mut t = [0.0; 3];
        for px in &self.xyz {
            for c in 0..3 {
                t[c] += px[c];
            }
        }
        t
    }

    /// Convert to a linear sRGB float image, scaled by `exposure`.
    pub fn to_linear_rgb(&self, exposure: f64) -> ImageF {
        let data = self
            .xyz
            .iter()
            .map(|&xyz| {
                let rgb = xyz_to_linear_srgb([
                    xyz[0] * exposure,
                    xyz[1] * exposure,
                    xyz[2] * exposure,
                ]);
                [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]
            })
            .collect();
        ImageF {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

// ---------------------------------------------------------------------------
// Float images, conversion, IO, MAPE

/// Plain row-major float raster, three channels, row 0 on top. Producers
/// decide the channel meaning; renders emit linear sRGB.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ImageF {
    pub fn new(width: usize, height: usize) -> ImageF {
        ImageF {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    /// Rec. 709 luminance of a linear sRGB pixel, clamped at zero (spectral
    /// colors can fall slightly out of gamut).
    pub fn luminance(&self, idx: usize) -> f64 {
        let [r, g, b] = self.data[idx];
        (0.2126 * r as f64 + 0.7152 * g as f64 + 0.0722 * b as f64).max(0.0)
    }
}

/// Exposure that maps the given percentile of the *positive* luminances to
/// `target`; `None` for an all-black image. Ghost renders vary over orders
/// of magnitude in absolute scale, so display copies are normalized this
/// way instead of with a fixed gain.
pub fn auto_exposure(img: &ImageF, percentile: f64, target: f64) -> Option<f64> {
    let mut lum: Vec<f64> = (0..img.data.len())
        .map(|i| img.luminance(i))
        .filter(|v| *v > 0.0)
        .collect();
    if lum.is_empty() {
        return None;
    }
    lum.sort_by(f64::total_cmp);
    let q = lum[((lum.len() - 1) as f64 * percentile.clamp(0.0, 1.0)) as usize];
    (q > 0.0).then_some(target / q)
}

/// Convert an XYZ image to linear sRGB floats and an 8-bit sRGB-encoded
/// raster (the display copy), applying `exposure` before encoding.
pub fn xyz_to_srgb(xyz: &ImageF, exposure: f64) -> (ImageF, image::RgbImage) {
    let mut linear = ImageF::new(xyz.width, xyz.height);
    for (dst, src) in linear.data.iter_mut().zip(&xyz.data) {
        let rgb = xyz_to_linear_srgb([
            src[0] as f64 * exposure,
            src[1] as f64 * exposure,
            src[2] as f64 * exposure,
        ]);
        *dst = [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32];
    }
    (linear.clone(), png_from_linear(&linear))
}

/// Gamma-encode a linear sRGB image into an 8-bit raster.
pub fn png_from_linear(img: &ImageF) -> image::RgbImage {
    image::RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let px = img.data[y as usize * img.width + x as usize];
        image::Rgb([
            (srgb_encode(px[0] as f64) * 255.0).round() as u8,
            (srgb_encode(px[1] as f64) * 255.0).round() as u8,
            (srgb_encode(px[2] as f64) * 255.0).round() as u8,
        ])
    })
}

/// Write an 8-bit sRGB PNG display copy of a linear image. `rotate180`
/// flips the sensor-orientation raster into scene orientation.
pub fn write_png(path: &Path, img: &ImageF, rotate180: bool) -> Result<()> {
    let mut png = png_from_linear(img);
    if rotate180 {
        png = image::imageops::rotate180(&png);
    }
    png.save(path)
        .map_err(|e| Error::Image(format!("png write {}: {e}", path.display())))
}

/// Mean absolute percentage error on Rec. 709 luminance:
/// `mean(|ref − test| / max(ref, floor))`.
pub fn mape(reference: &ImageF, test: &ImageF, floor: f64) -> Result<f64> {
    if reference.width != test.width || reference.height != test.height {
        return Err(Error::Dimension(format!(
            "mape {}×{} vs {}×{}",
            reference.width, reference.height, test.width, test.height
        )));
    }
    if reference.data.is_empty() {
        return Err(Error::Dimension("mape over empty image".into()));
    }
    let mut sum = 0.0;
    for i in 0..reference.data.len() {
        let r = reference.luminance(i);
        let t = test.luminance(i);
        sum += (r - t).abs() / r.max(floor);
    }
    Ok(sum / reference.data.len() as f64)
}

/// Write a color PFM: `PF`, dims, negative scale (little-endian), rows
/// bottom-up, three f32 per pixel.
pub fn write_pfm(path: &Path, img: &ImageF) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + img.data.len() * 12);
    buf.extend_from_slice(format!("PF\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    for row in (0..img.height).rev() {
        for col in 0..img.width {
            for c in img.data[row * img.width + col] {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a color PFM written by [`write_pfm`] or a compatible producer.
/// Big-endian files (positive scale) are converted; the |scale| factor is
/// folded into the samples.
pub fn read_pfm(path: &Path) -> Result<ImageF> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Image(format!("pfm {}: {m}", path.display()));

    // Three whitespace-delimited header tokens: magic, "w h", scale.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("pfm: truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "PF" {
        return Err(bad(&format!("expected color magic PF, found {magic:?}")));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&bytes)?.parse().map_err(|_| bad("bad scale"))?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(bad("degenerate dimensions or scale"));
    }
    pos += 1; // single whitespace byte after the scale token
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() != pos + need {
        return Err(bad(&format!(
            "payload is {} bytes, expected {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let little = scale < 0.0;
    let gain = scale.abs() as f32;
    let mut img = ImageF::new(width, height);
    let mut off = pos;
    for row in (0..height).rev() {
        for col in 0..width {
            let mut px = [0.0f32; 3];
            for c in &mut px {
                let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
                let v = if little {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                *c = v * gain;
                off += 4;
            }
            img.data[row * width + col] = px;
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Procedural scenes

#[derive(Copy, Clone, Debug)]
pub struct PointLight {
    pub position: Vec3,
    /// Radiant intensity scale; falls off with 1/d² in mm.
    pub intensity: f64,
    pub spectrum: SpectrumCurve,
}

#[derive(Copy, Clone, Debug)]
pub struct SphereDesc {
    pub center: Vec3,
    pub radius: f64,
    /// Stripe albedos alternate by horizontal band; equal curves make the
    /// sphere solid.
    pub albedo_a: SpectrumCurve,
    pub albedo_b: SpectrumCurve,
    /// Band height, mm; ≤ 0 disables striping.
    pub stripe_mm: f64,
    /// Emissive spheres radiate and do not reflect.
    pub emission: Option<SpectrumCurve>,
}

#[derive(Copy, Clone, Debug)]
pub struct GroundDesc {
    /// Plane height y, mm; the normal points up (+y).
    pub y: f64,
    pub checker_mm: f64,
    pub albedo_a: SpectrumCurve,
    pub albedo_b: SpectrumCurve,
}

/// A named deterministic scene: optional checkered ground plane, a few
/// spheres, one point light, and a constant sky.
#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub spheres: Vec<SphereDesc>,
    pub ground: Option<GroundDesc>,
    pub light: Option<PointLight>,
    pub sky: SpectrumCurve,
}

struct SceneHit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    albedo: SpectrumCurve,
    emission: Option<SpectrumCurve>,
}

const SCENE_EPS: f64 = 1e-3;

/// Depths (mm in front of the lens's first vertex) of the three spheres in
/// the "spheres" scene, nearest first. Focus tests derive matching sensor
/// offsets from these through the paraxial conjugate solve.
pub const SPHERE_DEPTHS_MM: [f64; 3] = [1000.0, 1730.0, 3530.0];

impl Scene {
    pub fn builtin_names() -> &'static [&'static str] {
        &["spheres", "emitter"]
    }

    /// Built-in scenes, laid out for the bundled 59 mm double Gauss: the
    /// camera looks down −z from the input plane near z ≈ −10.
    pub fn builtin(name: &str) -> Option<Scene> {
        let gray = |v: f64| SpectrumCurve::Flat(v);
        let red = SpectrumCurve::Bump {
            base: 0.06,
            amp: 0.75,
            center_nm: 625.0,
            width_nm: 45.0,
        };
        let green = SpectrumCurve::Bump {
            base: 0.07,
            amp: 0.65,
            center_nm: 535.0,
            width_nm: 40.0,
        };
        let blue = SpectrumCurve::Bump {
            base: 0.06,
            amp: 0.70,
            center_nm: 465.0,
            width_nm: 35.0,
        };
        match name {
            // Three striped spheres straddling the focusable depth range,
            // image-plane positions spread left/centre/right; checkered
            // ground below; point light high on +x.
            "spheres" => Some(Scene {
                name: name.into(),
                spheres: vec![
                    SphereDesc {
                        center: Vec3::new(106.0, 0.0, -SPHERE_DEPTHS_MM[0]),
                        radius: 75.0,
                        albedo_a: red,
                        albedo_b: gray(0.85),
                        stripe_mm: 30.0,
                        emission: None,
                    },
                    SphereDesc {
                        center: Vec3::new(0.0, 0.0, -SPHERE_DEPTHS_MM[1]),
                        radius: 130.0,
                        albedo_a: green,
                        albedo_b: gray(0.85),
                        stripe_mm: 52.0,
                        emission: None,
                    },
                    SphereDesc {
                        center: Vec3::new(-396.0, 0.0, -SPHERE_DEPTHS_MM[2]),
                        radius: 270.0,
                        albedo_a: blue,
                        albedo_b: gray(0.85),
                        stripe_mm: 108.0,
                        emission: None,
                    },
                ],
                ground: Some(GroundDesc {
                    y: -140.0,
                    checker_mm: 170.0,
                    albedo_a: gray(0.78),
                    albedo_b: gray(0.22),
                }),
                light: Some(PointLight {
                    position: Vec3::new(500.0, 1100.0, -600.0),
                    intensity: 1.4e7,
                    spectrum: gray(1.0),
                }),
                sky: gray(0.22),
            }),
            // Two small emissive spheres in a black void; geometry probes
            // (pinhole projection) read feature centroids off this scene.
            "emitter" => Some(Scene {
                name: name.into(),
                spheres: vec![
                    SphereDesc {
                        center: Vec3::new(130.0, 0.0, -2500.0),
                        radius: 40.0,
                        albedo_a: gray(0.0),
                        albedo_b: gray(0.0),
                        stripe_mm: 0.0,
                        emission: Some(gray(30.0)),
                    },
                    SphereDesc {
                        center: Vec3::new(-60.0, 40.0, -1200.0),
                        radius: 25.0,
                        albedo_a: gray(0.0),
                        albedo_b: gray(0.0),
                        stripe_mm: 0.0,
                        emission: Some(gray(30.0)),
                    },
                ],
                ground: None,
                light: None,
                sky: gray(0.0),
            }),
            _ => None,
        }
    }

    fn intersect(&self, ray: &Ray) -> Option<SceneHit> {
        let mut best: Option<SceneHit> = None;
        let mut closest = f64::INFINITY;
        for s in &self.spheres {
            let oc = ray.origin - s.center;
            let b = oc.dot(&ray.dir);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - c;
            if disc <= 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > SCENE_EPS {
                -b - sq
            } else if -b + sq > SCENE_EPS {
                -b + sq
            } else {
                continue;
            };
            if t >= closest {
                continue;
            }
            let point = ray.origin + ray.dir * t;
            let band = if s.stripe_mm > 0.0 {
                ((point.y - s.center.y) / s.stripe_mm).floor() as i64 & 1
            } else {
                0
            };
            closest = t;
            best = Some(SceneHit {
                t,
                point,
                normal: (point - s.center).normalize(),
                albedo: if band == 0 { s.albedo_a } else { s.albedo_b },
                emission: s.emission,
            });
        }
        if let Some(g) = &self.ground {
            if ray.dir.y.abs() > 1e-12 {
                let t = (g.y - ray.origin.y) / ray.dir.y;
                if t > SCENE_EPS && t < closest {
                    let point = ray.origin + ray.dir * t;
                    let parity = ((point.x / g.checker_mm).floor()
                        + (point.z / g.checker_mm).floor()) as i64
                        & 1;
                    best = Some(SceneHit {
                        t,
                        point,
                        normal: Vec3::new(0.0, 1.0, 0.0),
                        albedo: if parity == 0 { g.albedo_a } else { g.albedo_b },
                        emission: None,
                    });
                }
            }
        }
        best
    }

    /// Is the segment from `from` toward `to` blocked by scene geometry?
    fn occluded(&self, from: Vec3, to: Vec3) -> bool {
        let delta = to - from;
        let dist = delta.norm();
        let ray = Ray::new(from, delta / dist);
        match self.intersect(&ray) {
            Some(h) => h.t < dist - SCENE_EPS,
            None => false,
        }
    }

    fn direct_light(&self, hit: &SceneHit, lambda_nm: f64) -> f64 {
        let Some(light) = &self.light else {
            return 0.0;
        };
        let to_light = light.position - hit.point;
        let d2 = to_light.norm_squared();
        let wi = to_light / d2.sqrt();
        let cos = hit.normal.dot(&wi);
        if cos <= 0.0 {
            return 0.0;
        }
        let from = hit.point + hit.normal * SCENE_EPS;
        if self.occluded(from, light.position) {
            return 0.0;
        }
        let brdf = hit.albedo.eval(lambda_nm) / std::f64::consts::PI;
        brdf * light.intensity * light.spectrum.eval(lambda_nm) * cos / d2
    }

    /// Scene radiance along `ray` at one wavelength: two diffuse bounces
    /// with point-light next-event estimation and a constant sky on miss.
    pub fn radiance<R: Rng>(&self, ray: &Ray, lambda_nm: f64, rng: &mut R) -> f64 {
        let mut l = 0.0;
        let mut throughput = 1.0;
        let mut r = Ray::new(ray.origin, ray.dir);
        for depth in 0..2 {
            let Some(hit) = self.intersect(&r) else {
                l += throughput * self.sky.eval(lambda_nm);
                break;
            };
            if let Some(e) = &hit.emission {
                l += throughput * e.eval(lambda_nm);
                break;
            }
            l += throughput * self.direct_light(&hit, lambda_nm);
            if depth == 1 {
                break;
            }
            // Cosine-weighted bounce; pdf cosθ/π cancels against the
            // Lambertian cosθ leaving just the albedo.
            throughput *= hit.albedo.eval(lambda_nm);
            let dir = cosine_hemisphere(hit.normal, rng);
            r = Ray::new(hit.point + hit.normal * SCENE_EPS, dir);
        }
        l
    }
}

/// Cosine-weighted unit vector around `normal`.
fn cosine_hemisphere<R: Rng>(normal: Vec3, rng: &mut R) -> Vec3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let r = u1.sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    let (x, y) = (r * phi.cos(), r * phi.sin());
    let z = (1.0 - u1).max(0.0).sqrt();
    // Branchless-enough orthonormal basis around the normal.
    let a = if normal.x.abs() > 0.9 {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let t = normal.cross(&a).normalize();
    let b = normal.cross(&t);
    t * x + b * y + normal * z
}

// ---------------------------------------------------------------------------
// Transport backends

/// One transport query on the entry plane of the backend's direction:
/// input plane for forward queries, sensor plane for backward queries.
#[derive(Copy, Clone, Debug)]
pub struct InputSample {
    /// Transverse position on the entry plane, mm.
    pub position: Vec2,
    /// Unit travel direction; +z axial for forward, −z for backward.
    pub direction: Vec3,
    pub lambda_nm: f64,
}

/// World-frame exit state on the terminal plane (sensor forward, input
/// plane backward).
#[derive(Copy, Clone, Debug)]
pub struct Transport {
    pub position: Vec2,
    pub direction: Vec3,
    pub intensity: f64,
}

/// Lens transport service shared by both integrators. Oracle and neural
/// implementations answer identical queries; swapping them changes nothing
/// but the transport map.
pub trait LensBackend: Sync {
    fn label(&self) -> &'static str;
    fn direction(&self) -> Direction;
    /// Path ids this backend can answer, sorted.
    fn path_ids(&self) -> &[u64];
    /// Fail when the backend was built for a different prescription.
    fn ensure_lens(&self, lens: &LensSystem) -> Result<()>;
    /// Map entry samples through one path; `None` entries are blocked rays.
    fn query_batch(&self, path_id: u64, samples: &[InputSample]) -> Result<Vec<Option<Transport>>>;
}

/// Reduce a world sample to the canonical query `[r, ωx, ωy, λ]` plus the
/// frame that restores exits. Both backends share this so a comparison
/// between them isolates the transport map itself.
fn canonical_query(s: &InputSample) -> (CanonPoint, CanonicalFrame) {
    let (ci, frame) = canonicalize(s.position, s.direction);
    ([ci.r, ci.omega_x, ci.omega_y, s.lambda_nm], frame)
}

fn restore_exit(
    frame: &CanonicalFrame,
    position: Vec2,
    direction: Vec3,
    intensity: f64,
) -> Transport {
    let p = frame_restore(frame, position);
    let t = frame_restore(frame, Vec2::new(direction.x, direction.y));
    Transport {
        position: p,
        direction: Vec3::new(t.x, t.y, direction.z),
        intensity,
    }
}

/// Ground-truth backend: every query runs the sequential tracer.
pub struct OracleBackend {
    lens: LensSystem,
    direction: Direction,
    paths: Vec<u64>,
}

impl OracleBackend {
    pub fn new(lens: LensSystem, direction: Direction, mut paths: Vec<u64>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Render("oracle backend with no paths".into()));
        }
        paths.sort_unstable();
        paths.dedup();
        Ok(OracleBackend {
            lens,
            direction,
            paths,
        })
    }
}

impl LensBackend for OracleBackend {
    fn label(&self) -> &'static str {
        "oracle"
    }

    fn direction(&self) -> Direction {
        self.direction
    }

    fn path_ids(&self) -> &[u64] {
        &self.paths
    }

    fn ensure_lens(&self, lens: &LensSystem) -> Result<()> {
        if self.lens.hash() != lens.hash() {
            return Err(Error::Render(format!(
                "oracle backend built for lens {:016x}, not {:016x}",
                self.lens.hash(),
                lens.hash()
            )));
        }
        Ok(())
    }

    fn query_batch(&self, path_id: u64, samples: &[InputSample]) -> Result<Vec<Option<Transport>>> {
        if !self.paths.contains(&path_id) {
            return Err(Error::Render(format!("unknown path id {path_id}")));
        }
        let (entry_z, forward) = match self.direction {
            Direction::Forward => (self.lens.input_plane_z, true),
            Direction::Backward => (self.lens.output_plane_z, false),
        };
        debug_assert!(forward || entry_z == self.lens.output_plane_z);
        Ok(samples
            .iter()
            .map(|s| {
                let (p, frame) = canonical_query(s);
                let ray = Ray {
                    origin: Vec3::new(p[0], 0.0, entry_z),
                    dir: crate::trace::lift_direction(p[1], p[2], forward),
                };
                trace_path(&self.lens, &ray, p[3], path_id, self.direction).map(|rec| {
                    restore_exit(
                        &frame,
                        Vec2::new(rec.position.x, rec.position.y),
                        rec.direction,
                        rec.intensity,
                    )
                })
            })
            .collect())
    }
}

/// Neural backend: one factorized model per path id.
pub struct NeuralBackend {
    models: Vec<FactorizedModel>,
    paths: Vec<u64>,
    direction: Direction,
    lens_hash: u64,
    /// Classifier gate; ≤ 0 disables it (ablation mode).
    pub threshold: f32,
}

impl NeuralBackend {
    pub fn new(mut models: Vec<FactorizedModel>, threshold: f32) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Render("neural backend with no models".into()));
        }
        models.sort_by_key(|m| m.path_id);
        let direction = models[0].direction;
        let lens_hash = models[0].lens_hash;
        for m in &models {
            if m.direction != direction {
                return Err(Error::Render(
                    "neural backend models mix trace directions".into(),
                ));
            }
            if m.lens_hash != lens_hash {
                return Err(Error::Render(
                    "neural backend models mix lens prescriptions".into(),
                ));
            }
        }
        let paths: Vec<u64> = models.iter().map(|m| m.path_id).collect();
        if paths.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Render("duplicate model for one path id".into()));
        }
        Ok(NeuralBackend {
            models,
            paths,
            direction,
            lens_hash,
            threshold,
        })
    }

    /// Total out-of-bounds queries across all models so far.
    pub fn clamp_count(&self) -> u64 {
        self.models.iter().map(|m| m.clamp_count()).sum()
    }
}

impl LensBackend for NeuralBackend {
    fn label(&self) -> &'static str {
        "neural"
    }

    fn direction(&self) -> Direction {
        self.direction
    }

    fn path_ids(&self) -> &[u64] {
        &self.paths
    }

    fn ensure_lens(&self, lens: &LensSystem) -> Result<()> {
        if self.lens_hash != lens.hash() {
            return Err(Error::Render(format!(
                "neural backend trained for lens {:016x}, not {:016x}",
                self.lens_hash,
                lens.hash()
            )));
        }
        Ok(())
    }

    fn query_batch(&self, path_id: u64, samples: &[InputSample]) -> Result<Vec<Option<Transport>>> {
        let idx = self
            .paths
            .binary_search(&path_id)
            .map_err(|_| Error::Render(format!("unknown path id {path_id}")))?;
        let model = &self.models[idx];
        let mut inputs = Vec::with_capacity(samples.len());
        let mut frames = Vec::with_capacity(samples.len());
        for s in samples {
            let (p, frame) = canonical_query(s);
            inputs.push([p[0] as f32, p[1] as f32, p[2] as f32, p[3] as f32]);
            frames.push(frame);
        }
        let preds = model.predict_batch(&inputs, self.threshold);
        Ok(preds
            .into_iter()
            .zip(&frames)
            .map(|(pred, frame)| {
                pred.map(|p| {
                    restore_exit(
                        frame,
                        Vec2::new(p.position[0] as f64, p.position[1] as f64),
                        Vec3::new(
                            p.direction[0] as f64,
                            p.direction[1] as f64,
                            p.direction[2] as f64,
                        ),
                        p.intensity as f64,
                    )
                })
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Shared render bookkeeping

#[derive(Clone, Debug, Default)]
pub struct RenderStats {
    /// Entry-plane samples generated.
    pub rays: u64,
    /// Samples the backend transported to the terminal plane.
    pub transported: u64,
    pub wall: Duration,
}

impl RenderStats {
    pub fn rays_per_sec(&self) -> f64 {
        if self.wall.is_zero() {
            0.0
        } else {
            self.rays as f64 / self.wall.as_secs_f64()
        }
    }
}

/// SplitMix64-style stream seed so every (work item, run seed) pair gets an
/// independent generator regardless of thread scheduling.
fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

// ---------------------------------------------------------------------------
// Forward lens-flare light tracing

/// Collimated distant light driving the flare pass.
#[derive(Copy, Clone, Debug)]
pub struct DistantLight {
    /// Unit travel direction into the lens; the axial component must be
    /// positive and within the sampled angular bound.
    pub direction: Vec3,
    /// Spectral irradiance scale on the input plane.
    pub irradiance: f64,
    pub spectrum: SpectrumCurve,
}

#[derive(Clone, Debug)]
pub struct FlareConfig {
    pub light: DistantLight,
    /// Rays traced per path id.
    pub rays_per_path: u64,
    pub filter: Filter,
    pub seed: u64,
    /// Paths rendered; every id must be answerable by the backend.
    pub paths: Vec<u64>,
}

/// Render ghost images of a collimated distant light: per path, sample the
/// input-plane disc uniformly, push samples through the backend, and splat
/// arriving energy weighted by intensity and the sensor-plane cosine. Each
/// path's accumulation is divided by its own sample count.
pub fn render_flare(
    lens: &LensSystem,
    backend: &dyn LensBackend,
    cfg: &FlareConfig,
    film: &mut Film,
) -> Result<RenderStats> {
    let t0 = Instant::now();
    if backend.direction() != Direction::Forward {
        return Err(Error::Render("flare rendering needs a forward backend".into()));
    }
    backend.ensure_lens(lens)?;
    for id in &cfg.paths {
        if !backend.path_ids().contains(id) {
            return Err(Error::Render(format!("unknown path id {id}")));
        }
    }
    if cfg.paths.is_empty() || cfg.rays_per_path == 0 {
        return Ok(RenderStats {
            wall: t0.elapsed(),
            ..RenderStats::default()
        });
    }
    let dir = cfg.light.direction;
    let norm = dir.norm();
    if !(norm > 0.0) || dir.z / norm < COS_MIN {
        return Err(Error::Render(
            "flare light direction outside the sampled angular bound".into(),
        ));
    }
    let omega_in = dir / norm;

    let disc_r = lens.housing_semi_aperture;
    let disc_area = std::f64::consts::PI * disc_r * disc_r;
    // Fold the constant factors of the estimator into one weight:
    // beam irradiance projected on the plane, disc area per sample, film
    // irradiance normalization, and the per-path sample division.
    let g_const = omega_in.z * disc_area / film.pixel_area_mm2() / cfg.rays_per_path as f64;
    let y_norm = y_integral();

    struct BlockOut {
        splats: Vec<(usize, [f64; 3])>,
        transported: u64,
        dropped: u64,
    }

    let geom = film.geom();
    let mut per_block_rays = vec![cfg.rays_per_path / FLARE_BLOCKS; FLARE_BLOCKS as usize];
    for b in 0..(cfg.rays_per_path % FLARE_BLOCKS) as usize {
        per_block_rays[b] += 1;
    }

    let mut stats = RenderStats::default();
    let mut pending: Vec<(usize, [f64; 3])> = Vec::new();
    for &path_id in &cfg.paths {
        // Fixed block split keeps images independent of the thread count;
        // chunking bounds peak memory for the splat lists.
        let results: Result<Vec<BlockOut>> = (0..FLARE_BLOCKS as usize)
            .into_par_iter()
            .map(|block| {
                let n = per_block_rays[block];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, path_id, block as u64]));
                let mut samples = Vec::with_capacity(n as usize);
                let mut chroma = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let r = disc_r * rng.gen::<f64>().sqrt();
                    let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                    let (lambda, pdf) = sample_wavelength(rng.gen());
                    samples.push(InputSample {
                        position: Vec2::new(r * phi.cos(), r * phi.sin()),
                        direction: omega_in,
                        lambda_nm: lambda,
                    });
                    chroma.push((lambda, pdf));
                }
                let exits = backend.query_batch(path_id, &samples)?;
                let mut out = BlockOut {
                    splats: Vec::new(),
                    transported: 0,
                    dropped: 0,
                };
                let mut taps = [(0usize, 0.0f64); 4];
                for (exit, &(lambda, pdf)) in exits.iter().zip(&chroma) {
                    let Some(tr) = exit else { continue };
                    out.transported += 1;
                    let energy = cfg.light.irradiance
                        * cfg.light.spectrum.eval(lambda)
                        * g_const
                        * tr.intensity
                        * tr.direction.z.abs()
                        / (pdf * y_norm);
                    let xyz = cie_xyz(lambda);
                    let w = [xyz[0] * energy, xyz[1] * energy, xyz[2] * energy];
                    let ntaps =
                        geom.filter_taps(tr.position.x, tr.position.y, cfg.filter, &mut taps);
                    if ntaps == 0 {
                        out.dropped += 1;
                        continue;
                    }
                    for &(idx, tw) in &taps[..ntaps] {
                        out.splats.push((idx, [w[0] * tw, w[1] * tw, w[2] * tw]));
                    }
                }
                Ok(out)
            })
            .collect();

        // Apply in block order: deterministic accumulation.
        pending.clear();
        for block in results? {
            stats.transported += block.transported;
            film.dropped += block.dropped;
            pending.extend(block.splats);
        }
        for &(idx, xyz) in &pending {
            for c in 0..3 {
                film.xyz[idx][c] += xyz[c];
            }
            film.count[idx] += 1;
        }
        stats.rays += cfg.rays_per_path;
    }
    stats.wall = t0.elapsed();
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Backward depth-of-field path tracing

#[derive(Clone, Debug)]
pub struct DofConfig {
    pub spp: u32,
    /// Sensor shift along +z (away from the lens), mm; refocuses the lens.
    pub sensor_offset: f64,
    pub seed: u64,
    /// Override the sampled pupil disc `(z, semi-aperture)`; the default is
    /// the paraxial exit pupil with a safety margin, falling back to the
    /// rear vertex aperture when the pupil is degenerate.
    pub pupil: Option<(f64, f64)>,
}

impl Default for DofConfig {
    fn default() -> Self {
        DofConfig {
            spp: 16,
            sensor_offset: 0.0,
            seed: 0,
            pupil: None,
        }
    }
}

/// Pupil disc the backward integrator aims at.
fn dof_pupil(lens: &LensSystem, cfg: &DofConfig) -> (f64, f64) {
    if let Some(p) = cfg.pupil {
        return p;
    }
    default_pupil(lens)
}

/// The disc backward sensor rays are aimed at: the paraxial exit pupil with
/// a margin that absorbs pupil aberration, or an oversized rear vertex when
/// the pupil is unavailable. Returns (axial position, semi-aperture), mm.
pub fn default_pupil(lens: &LensSystem) -> (f64, f64) {
    if let Some((z, r)) = paraxial::exit_pupil(lens, 550.0) {
        return (z, 1.25 * r);
    }
    let rear = lens
        .surfaces()
        .iter()
        .rev()
        .find(|s| s.kind.is_refractive())
        .expect("validated lens has refractive surfaces");
    (rear.z, 1.1 * rear.semi_aperture)
}

/// Render the scene through the lens with the pixel estimator: for every
/// pixel sample, aim at the pupil disc, transport the ray backward through
/// the full-transmission path, continue into the scene, and average
/// radiance weighted by the transport intensity and geometry.
pub fn render_dof(
    lens: &LensSystem,
    backend: &dyn LensBackend,
    scene: &Scene,
    cfg: &DofConfig,
    film: &mut Film,
) -> Result<RenderStats> {
    let t0 = Instant::now();
    if backend.direction() != Direction::Backward {
        return Err(Error::Render("DOF rendering needs a backward backend".into()));
    }
    backend.ensure_lens(lens)?;
    if !backend.path_ids().contains(&0) {
        return Err(Error::Render(
            "DOF rendering needs the full-transmission path (id 0)".into(),
        ));
    }
    if cfg.spp == 0 {
        return Err(Error::Render("spp must be at least 1".into()));
    }
    let (pupil_z, pupil_r) = dof_pupil(lens, cfg);
    let sensor_z = lens.output_plane_z + cfg.sensor_offset;
    if pupil_z >= sensor_z {
        return Err(Error::Render(format!(
            "pupil plane z = {pupil_z} not in front of the sensor at z = {sensor_z}"
        )));
    }
    let pupil_area = std::f64::consts::PI * pupil_r * pupil_r;
    let nominal_z = lens.output_plane_z;
    let exit_z = lens.input_plane_z;
    let y_norm = y_integral();
    let inv_spp = 1.0 / cfg.spp as f64;

    struct RowOut {
        pixels: Vec<[f64; 3]>,
        transported: u64,
    }

    let width = film.width;
    let height = film.height;
    let rows: Result<Vec<RowOut>> = (0..height)
        .into_par_iter()
        .map(|row| {
            let mut samples = Vec::with_capacity(width * cfg.spp as usize);
            // Per-sample state the scene pass needs after the batched
            // transport query (its own generator keeps streams aligned
            // between backends).
            let mut cont = Vec::with_capacity(width * cfg.spp as usize);
            let dx = 2.0 * film.half_width_mm / width as f64;
            let dy = 2.0 * film.half_height_mm / height as f64;
            for col in 0..width {
                for s in 0..cfg.spp {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                        cfg.seed,
                        row as u64,
                        col as u64,
                        s as u64,
                    ]));
                    let jx: f64 = rng.gen();
                    let jy: f64 = rng.gen();
                    let px = -film.half_width_mm + (col as f64 + jx) * dx;
                    let py = film.half_height_mm - (row as f64 + jy) * dy;
                    let (lambda, pdf) = sample_wavelength(rng.gen());
                    let pr = pupil_r * rng.gen::<f64>().sqrt();
                    let pphi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
                    let q = Vec3::new(pr * pphi.cos(), pr * pphi.sin(), pupil_z);
                    let origin = Vec3::new(px, py, sensor_z);
                    let delta = q - origin;
                    let d2 = delta.norm_squared();
                    let dir = delta / d2.sqrt();
                    // Transport maps take samples on the nominal sensor
                    // plane; slide the shifted-sensor ray onto it.
                    let t = (nominal_z - sensor_z) / dir.z;
                    let p0 = Vec2::new(px + dir.x * t, py + dir.y * t);
                    // Eq-7 estimator: cosθ at the sensor times the disc
                    // pdf conversion A·cosθ_pupil/d²; both cosines are the
                    // axial component.
                    let w_geom = pupil_area * dir.z * dir.z / d2;
                    samples.push(InputSample {
                        position: p0,
                        direction: dir,
                        lambda_nm: lambda,
                    });
                    cont.push((col, lambda, pdf, w_geom, rng));
                }
            }
            let exits = backend.query_batch(0, &samples)?;
            let mut out = RowOut {
                pixels: vec![[0.0; 3]; width],
                transported: 0,
            };
            for (exit, (col, lambda, pdf, w_geom, mut rng)) in exits.into_iter().zip(cont) {
                let Some(tr) = exit else { continue };
                out.transported += 1;
                let ray = Ray::new(
                    Vec3::new(tr.position.x, tr.position.y, exit_z),
                    tr.direction,
                );
                let l = scene.radiance(&ray, lambda, &mut rng);
                if l == 0.0 {
                    continue;
                }
                let energy = l * tr.intensity * w_geom * inv_spp / (pdf * y_norm);
                let xyz = cie_xyz(lambda);
                for c in 0..3 {
                    out.pixels[col][c] += xyz[c] * energy;
                }
            }
            Ok(out)
        })
        .collect();

    let mut stats = RenderStats {
        rays: (width * height) as u64 * cfg.spp as u64,
        ..RenderStats::default()
    };
    for (row, r) in rows?.into_iter().enumerate() {
        stats.transported += r.transported;
        for col in 0..width {
            film.add_pixel(row, col, r.pixels[col], cfg.spp);
        }
    }
    stats.wall = t0.elapsed();
    Ok(stats)
}
