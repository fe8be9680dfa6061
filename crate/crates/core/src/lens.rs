//! Lens prescriptions: JSON schema, validation, and wavelength-dependent
//! refractive indices for rotationally symmetric systems.
//!
//! All geometry is in millimeters, wavelengths in nanometers. The optical
//! axis is +z; light enters through the input plane (smallest z) and exits
//! on the sensor plane (largest z).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Supported wavelength band, nm.
pub const LAMBDA_MIN_NM: f64 = 380.0;
pub const LAMBDA_MAX_NM: f64 = 780.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Dispersion {
    Constant {
        n: f64,
    },
    /// n(lambda) = a + b/um^2 + c/um^4 with lambda in micrometers.
    Cauchy {
        a: f64,
        b_um2: f64,
        #[serde(default)]
        c_um4: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub name: String,
    pub dispersion: Dispersion,
}

impl Material {
    pub fn air() -> Self {
        Material {
            name: "air".to_string(),
            dispersion: Dispersion::Constant { n: 1.0 },
        }
    }

    /// Index of refraction at `lambda_nm`. Errors outside [380, 780] nm.
    pub fn ior_at(&self, lambda_nm: f64) -> Result<f64> {
        if !(LAMBDA_MIN_NM..=LAMBDA_MAX_NM).contains(&lambda_nm) {
            return Err(Error::WavelengthOutOfBand(lambda_nm));
        }
        Ok(self.ior_unchecked(lambda_nm))
    }

    /// Dispersion formula without the band check; callers validate lambda.
    pub fn ior_unchecked(&self, lambda_nm: f64) -> f64 {
        match self.dispersion {
            Dispersion::Constant { n } => n,
            Dispersion::Cauchy { a, b_um2, c_um4 } => {
                let um = lambda_nm * 1e-3;
                let um2 = um * um;
                a + b_um2 / um2 + c_um4 / (um2 * um2)
            }
        }
    }

    pub fn is_air(&self) -> bool {
        matches!(self.dispersion, Dispersion::Constant { n } if n == 1.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SurfaceKind {
    Spherical,
    Planar,
    /// Aperture stop: absorbs outside its hole, no optical interaction inside.
    Stop,
    /// Sensor plane, the rear output plane.
    Sensor,
    /// Virtual input plane in front of the system.
    Input,
}

impl SurfaceKind {
    /// Refractive surfaces carry a T/R interaction; stops and planes do not.
    pub fn is_refractive(self) -> bool {
        matches!(self, SurfaceKind::Spherical | SurfaceKind::Planar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub kind: SurfaceKind,
    /// Vertex position on the axis, mm.
    pub z: f64,
    /// Signed curvature radius, mm; 0 for non-spherical kinds.
    pub radius: f64,
    /// Clear semi-aperture, mm.
    pub semi_aperture: f64,
    /// Index into `LensSystem::materials` for the medium behind (+z side).
    pub material_after: usize,
}

/// A validated rotationally symmetric lens prescription.
///
/// `surfaces` holds the optical surfaces and the stop in axial order with
/// the sensor plane appended last. The input plane is virtual and exposed
/// through [`LensSystem::input_surface`].
#[derive(Clone, Debug, PartialEq)]
pub struct LensSystem {
    pub name: String,
    surfaces: Vec<Surface>,
    materials: Vec<Material>,
    pub housing_semi_aperture: f64,
    pub input_plane_z: f64,
    pub output_plane_z: f64,
    pub sensor_width: f64,
    pub sensor_height: f64,
    hash: u64,
}

impl LensSystem {
    /// All surfaces in axial order, sensor plane last.
    pub fn surfaces(&self) -> &[Surface] {
        &self.surfaces
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn material(&self, idx: usize) -> &Material {
        &self.materials[idx]
    }

    /// Number of refractive (spherical/planar) surfaces.
    pub fn refractive_count(&self) -> usize {
        self.surfaces
            .iter()
            .filter(|s| s.kind.is_refractive())
            .count()
    }

    pub fn stop(&self) -> &Surface {
        self.surfaces
            .iter()
            .find(|s| s.kind == SurfaceKind::Stop)
            .expect("validated system has a stop")
    }

    pub fn sensor(&self) -> &Surface {
        self.surfaces.last().expect("validated system has a sensor")
    }

    pub fn input_surface(&self) -> Surface {
        Surface {
            kind: SurfaceKind::Input,
            z: self.input_plane_z,
            radius: 0.0,
            semi_aperture: self.housing_semi_aperture,
            material_after: 0,
        }
    }

    /// 64-bit digest of the canonical JSON document; datasets and models
    /// trained for this prescription carry it.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("schema document serializes")
    }

    fn to_document(&self) -> LensDocument {
        let materials: BTreeMap<String, Dispersion> = self
            .materials
            .iter()
            .skip(1)
            .map(|m| (m.name.clone(), m.dispersion.clone()))
            .collect();
        let surfaces = self
            .surfaces
            .iter()
            .filter(|s| s.kind != SurfaceKind::Sensor)
            .map(|s| SurfaceDoc {
                kind: match s.kind {
                    SurfaceKind::Spherical => "spherical".to_string(),
                    SurfaceKind::Planar => "planar".to_string(),
                    SurfaceKind::Stop => "stop".to_string(),
                    _ => unreachable!("planes are not serialized"),
                },
                z_mm: s.z,
                radius_mm: s.radius,
                semi_aperture_mm: s.semi_aperture,
                material_after: self.materials[s.material_after].name.clone(),
            })
            .collect();
        LensDocument {
            name: self.name.clone(),
            housing_semi_aperture_mm: self.housing_semi_aperture,
            input_plane_z_mm: self.input_plane_z,
            output_plane_z_mm: self.output_plane_z,
            sensor_width_mm: self.sensor_width,
            sensor_height_mm: self.sensor_height,
            materials,
            surfaces,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LensDocument {
    name: String,
    housing_semi_aperture_mm: f64,
    input_plane_z_mm: f64,
    output_plane_z_mm: f64,
    sensor_width_mm: f64,
    sensor_height_mm: f64,
    materials: BTreeMap<String, Dispersion>,
    surfaces: Vec<SurfaceDoc>,
}

#[derive(Serialize, Deserialize)]
struct SurfaceDoc {
    #[serde(rename = "type")]
    kind: String,
    z_mm: f64,
    radius_mm: f64,
    semi_aperture_mm: f64,
    #[serde(default = "air_name")]
    material_after: String,
}

fn air_name() -> String {
    "air".to_string()
}

/// Parse and validate a lens schema document.
pub fn parse_lens_system(text: &str) -> Result<LensSystem> {
    let doc: LensDocument =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    validate(doc)
}

fn validate(doc: LensDocument) -> Result<LensSystem> {
    if doc.housing_semi_aperture_mm <= 0.0 {
        return Err(Error::Validation("housing semi-aperture must be > 0".into()));
    }
    if doc.sensor_width_mm <= 0.0 || doc.sensor_height_mm <= 0.0 {
        return Err(Error::Validation("sensor dimensions must be > 0".into()));
    }
    if doc.materials.contains_key("air") {
        return Err(Error::Validation(
            "material name 'air' is reserved for the exterior medium".into(),
        ));
    }

    let mut materials = vec![Material::air()];
    for (name, dispersion) in &doc.materials {
        materials.push(Material {
            name: name.clone(),
            dispersion: dispersion.clone(),
        });
    }
    for m in &materials[1..] {
        let mut lambda = LAMBDA_MIN_NM;
        while lambda <= LAMBDA_MAX_NM + 1e-9 {
            let n = m.ior_unchecked(lambda);
            if !n.is_finite() || n < 1.0 - 1e-12 {
                return Err(Error::Validation(format!(
                    "material '{}' has ior {n} < 1 at {lambda} nm",
                    m.name
                )));
            }
            lambda += 5.0;
        }
    }
    let material_index = |name: &str| -> Result<usize> {
        materials
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Validation(format!("unknown material '{name}'")))
    };

    if doc.surfaces.is_empty() {
        return Err(Error::Validation("no surfaces".into()));
    }
    let mut surfaces = Vec::with_capacity(doc.surfaces.len() + 1);
    for (i, s) in doc.surfaces.iter().enumerate() {
        let kind = match s.kind.as_str() {
            "spherical" => SurfaceKind::Spherical,
            "planar" => SurfaceKind::Planar,
            "stop" => SurfaceKind::Stop,
            other => {
                return Err(Error::Validation(format!(
                    "surface {i}: unknown type '{other}'"
                )))
            }
        };
        if s.semi_aperture_mm <= 0.0 {
            return Err(Error::Validation(format!(
                "surface {i}: clear semi-aperture must be > 0"
            )));
        }
        match kind {
            SurfaceKind::Spherical => {
                if s.radius_mm == 0.0 {
                    return Err(Error::Validation(format!(
                        "surface {i}: spherical surface needs a nonzero radius"
                    )));
                }
                if s.radius_mm.abs() < s.semi_aperture_mm {
                    return Err(Error::Validation(format!(
                        "surface {i}: |radius| {} < semi-aperture {}; cap cannot span the aperture",
                        s.radius_mm, s.semi_aperture_mm
                    )));
                }
            }
            _ => {
                if s.radius_mm != 0.0 {
                    return Err(Error::Validation(format!(
                        "surface {i}: non-spherical surface must have radius 0"
                    )));
                }
            }
        }
        surfaces.push(Surface {
            kind,
            z: s.z_mm,
            radius: s.radius_mm,
            semi_aperture: s.semi_aperture_mm,
            material_after: material_index(&s.material_after)?,
        });
    }
    for w in surfaces.windows(2) {
        if w[1].z <= w[0].z {
            return Err(Error::Validation(format!(
                "non-increasing axial position: {} mm then {} mm",
                w[0].z, w[1].z
            )));
        }
    }
    let stops = surfaces
        .iter()
        .filter(|s| s.kind == SurfaceKind::Stop)
        .count();
    if stops != 1 {
        return Err(Error::Validation(format!(
            "expected exactly one aperture stop, found {stops}"
        )));
    }
    let first_z = surfaces.first().unwrap().z;
    let last_z = surfaces.last().unwrap().z;
    if doc.input_plane_z_mm >= first_z {
        return Err(Error::Validation(
            "input plane must sit in front of the first surface".into(),
        ));
    }
    if doc.output_plane_z_mm <= last_z {
        return Err(Error::Validation(
            "output plane must sit behind the last surface".into(),
        ));
    }

    surfaces.push(Surface {
        kind: SurfaceKind::Sensor,
        z: doc.output_plane_z_mm,
        radius: 0.0,
        semi_aperture: doc.housing_semi_aperture_mm,
        material_after: 0,
    });

    let canonical = serde_json::to_string(&doc).expect("schema document serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let hash = u64::from_le_bytes(digest[..8].try_into().unwrap());

    Ok(LensSystem {
        name: doc.name,
        surfaces,
        materials,
        housing_semi_aperture: doc.housing_semi_aperture_mm,
        input_plane_z: doc.input_plane_z_mm,
        output_plane_z: doc.output_plane_z_mm,
        sensor_width: doc.sensor_width_mm,
        sensor_height: doc.sensor_height_mm,
        hash,
    })
}

/// Prescriptions bundled with the crate, by name.
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "biconvex" => Some(include_str!("../data/biconvex.json")),
        "doublet" => Some(include_str!("../data/doublet.json")),
        "wide22" => Some(include_str!("../data/wide22.json")),
        "gauss59" => Some(include_str!("../data/gauss59.json")),
        _ => None,
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &["biconvex", "doublet", "wide22", "gauss59"]
}
