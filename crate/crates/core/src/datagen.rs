//! Training-data generation: canonical-domain samplers (uniform and MCMC
//! over the valid region) and the regressor/classifier dataset builders.
//!
//! All sampling happens in the canonical coordinates (r, omega_x, omega_y,
//! lambda) of the symmetry-reduced input domain; the axial direction
//! component is reconstructed from the trace direction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Dataset, DatasetHeader, DatasetKind, Record};
use crate::error::{Error, Result};
use crate::lens::{LensSystem, LAMBDA_MAX_NM, LAMBDA_MIN_NM};
use crate::spectrum::sample_wavelength;
use crate::trace::{lift_direction, trace_path, Direction, ExitRecord, Ray, Vec3};

/// Canonical input point: (r mm, omega_x, omega_y, lambda nm).
pub type CanonPoint = [f64; 4];

#[derive(Copy, Clone, Debug)]
pub struct GenConfig {
    pub seed: u64,
    pub chains: usize,
    pub burn_in: usize,
    /// Gaussian proposal sigma for r, as a fraction of the radial domain.
    pub sigma_r_frac: f64,
    pub sigma_omega: f64,
    pub sigma_lambda_nm: f64,
    /// Probability of an independent uniform restart proposal.
    pub restart_prob: f64,
    /// Uniform-rejection tries allowed when seeding each chain.
    pub seed_budget: u64,
    /// Lower bound on the axial direction component of sampled rays.
    pub cos_min: f64,
    pub tune_rounds: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            chains: 16,
            burn_in: 1000,
            sigma_r_frac: 0.02,
            sigma_omega: 0.02,
            sigma_lambda_nm: 10.0,
            restart_prob: 0.1,
            seed_budget: 1_000_000,
            cos_min: (80.0f64).to_radians().cos(),
            tune_rounds: 8,
        }
    }
}

/// Bounds of the canonical sampling box for one lens and trace direction.
#[derive(Copy, Clone, Debug)]
pub struct Domain {
    pub r_max: f64,
    /// Max tangential direction magnitude, sin(acos(cos_min)).
    pub omega_t_max: f64,
}

impl Domain {
    pub fn of(lens: &LensSystem, direction: Direction, cfg: &GenConfig) -> Self {
        let r_max = match direction {
            Direction::Forward => lens.housing_semi_aperture,
            // Backward rays start on the sensor; cover the film diagonal.
            Direction::Backward => {
                (lens.sensor_width * 0.5).hypot(lens.sensor_height * 0.5)
            }
        };
        Domain {
            r_max,
            omega_t_max: (1.0 - cfg.cos_min * cfg.cos_min).max(0.0).sqrt(),
        }
    }

    pub fn contains(&self, p: &CanonPoint) -> bool {
        let t2 = p[1] * p[1] + p[2] * p[2];
        p[0] >= 0.0
            && p[0] <= self.r_max
            && p[2] >= 0.0
            && t2 <= self.omega_t_max * self.omega_t_max
            && (LAMBDA_MIN_NM..=LAMBDA_MAX_NM).contains(&p[3])
    }

    /// Per-dimension scale to comparable [0, 1] units for distances.
    pub fn normalized(&self, p: &CanonPoint) -> [f64; 4] {
        [
            p[0] / self.r_max,
            (p[1] + self.omega_t_max) / (2.0 * self.omega_t_max),
            p[2] / self.omega_t_max,
            (p[3] - LAMBDA_MIN_NM) / (LAMBDA_MAX_NM - LAMBDA_MIN_NM),
        ]
    }
}

/// Trace the canonical point along `path_id`; `None` when invalid.
pub fn trace_canonical(
    lens: &LensSystem,
    path_id: u64,
    direction: Direction,
    p: &CanonPoint,
) -> Option<ExitRecord> {
    let (z, forward) = match direction {
        Direction::Forward => (lens.input_plane_z, true),
        Direction::Backward => (lens.output_plane_z, false),
    };
    let ray = Ray {
        origin: Vec3::new(p[0], 0.0, z),
        dir: lift_direction(p[1], p[2], forward),
    };
    trace_path(lens, &ray, p[3], path_id, direction)
}

/// Uniform draw over the canonical domain: r uniform, direction area-uniform
/// over the quarter-cap above `cos_min`, wavelength CIE-weighted.
pub fn sample_input_uniform<R: Rng>(rng: &mut R, domain: &Domain, cfg: &GenConfig) -> CanonPoint {
    let r = rng.gen::<f64>() * domain.r_max;
    let cos_t = cfg.cos_min + rng.gen::<f64>() * (1.0 - cfg.cos_min);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.gen::<f64>() * std::f64::consts::PI;
    let (wx, wy) = (sin_t * phi.cos(), sin_t * phi.sin());
    let (lambda, _) = sample_wavelength(rng.gen::<f64>());
    [r, wx, wy, lambda]
}

/// Coordinate-uniform draw over the canonical box; used for MCMC restarts
/// so that the restart kernel is a symmetric independence proposal.
fn sample_box_uniform<R: Rng>(rng: &mut R, domain: &Domain) -> CanonPoint {
    [
        rng.gen::<f64>() * domain.r_max,
        (rng.gen::<f64>() * 2.0 - 1.0) * domain.omega_t_max,
        rng.gen::<f64>() * domain.omega_t_max,
        LAMBDA_MIN_NM + rng.gen::<f64>() * (LAMBDA_MAX_NM - LAMBDA_MIN_NM),
    ]
}

/// Reflect `x` into [lo, hi].
fn fold(mut x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    if w <= 0.0 {
        return lo;
    }
    // Two reflections per period.
    let mut t = (x - lo).rem_euclid(2.0 * w);
    if t > w {
        t = 2.0 * w - t;
    }
    x = lo + t;
    x
}

/// Mixing diagnostics for one chain after burn-in.
#[derive(Copy, Clone, Debug)]
pub struct ChainReport {
    pub acceptance: f64,
    pub sigma_r: f64,
    pub sigma_omega: f64,
    pub sigma_lambda_nm: f64,
}

struct Chain {
    state: CanonPoint,
    exit: ExitRecord,
    rng: ChaCha8Rng,
    sigma_r: f64,
    sigma_omega: f64,
    sigma_lambda: f64,
}

impl Chain {
    /// One Metropolis step over the binary valid-region target; returns
    /// whether a local Gaussian proposal was accepted (restarts excluded
    /// from tuning statistics).
    fn step(
        &mut self,
        lens: &LensSystem,
        path_id: u64,
        direction: Direction,
        domain: &Domain,
        cfg: &GenConfig,
    ) -> Option<bool> {
        if self.rng.gen::<f64>() < cfg.restart_prob {
            let cand = sample_box_uniform(&mut self.rng, domain);
            if let Some(exit) = trace_canonical(lens, path_id, direction, &cand) {
                self.state = cand;
                self.exit = exit;
            }
            return None;
        }
        let nr = Normal::new(0.0, self.sigma_r).unwrap();
        let nw = Normal::new(0.0, self.sigma_omega).unwrap();
        let nl = Normal::new(0.0, self.sigma_lambda).unwrap();
        let mut cand = self.state;
        // Folding at the r = 0 and omega_y = 0 mirror boundaries and the
        // wavelength band edges keeps the proposal symmetric.
        cand[0] = fold(cand[0] + nr.sample(&mut self.rng), 0.0, domain.r_max);
        cand[1] += nw.sample(&mut self.rng);
        cand[2] = (cand[2] + nw.sample(&mut self.rng)).abs();
        cand[3] = fold(
            cand[3] + nl.sample(&mut self.rng),
            LAMBDA_MIN_NM,
            LAMBDA_MAX_NM,
        );
        if domain.contains(&cand) {
            if let Some(exit) = trace_canonical(lens, path_id, direction, &cand) {
                self.state = cand;
                self.exit = exit;
                return Some(true);
            }
        }
        Some(false)
    }
}

/// Draw `n` valid samples of `path_id` by Metropolis over the binary
/// valid-region indicator. Chains run independently and are merged
/// round-robin, so output is deterministic for a given config.
pub fn mcmc_valid_samples(
    lens: &LensSystem,
    path_id: u64,
    direction: Direction,
    n: usize,
    cfg: &GenConfig,
) -> Result<(Vec<(CanonPoint, ExitRecord)>, Vec<ChainReport>)> {
    let domain = Domain::of(lens, direction, cfg);
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let chains = cfg.chains.max(1);
    let per_chain = n.div_ceil(chains);

    let results: Vec<Result<(Vec<(CanonPoint, ExitRecord)>, ChainReport)>> = (0..chains)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
            );
            // Seed by uniform rejection.
            let mut seeded = None;
            for _ in 0..cfg.seed_budget {
                let cand = sample_box_uniform(&mut rng, &domain);
                if let Some(exit) = trace_canonical(lens, path_id, direction, &cand) {
                    seeded = Some((cand, exit));
                    break;
                }
            }
            let (state, exit) = seeded.ok_or(Error::NoValidSeed {
                path_id,
                budget: cfg.seed_budget,
            })?;
            let mut chain = Chain {
                state,
                exit,
                rng,
                sigma_r: cfg.sigma_r_frac * domain.r_max,
                sigma_omega: cfg.sigma_omega,
                sigma_lambda: cfg.sigma_lambda_nm,
            };

            // Burn-in with acceptance tuning per round.
            let rounds = cfg.tune_rounds.max(1);
            let round_len = cfg.burn_in.div_ceil(rounds).max(1);
            let mut acceptance = 0.0;
            for _ in 0..rounds {
                let mut acc = 0usize;
                let mut tries = 0usize;
                for _ in 0..round_len {
                    if let Some(a) = chain.step(lens, path_id, direction, &domain, cfg) {
                        tries += 1;
                        acc += a as usize;
                    }
                }
                acceptance = if tries > 0 {
                    acc as f64 / tries as f64
                } else {
                    0.5
                };
                if acceptance < 0.2 {
                    chain.sigma_r *= 0.5;
                    chain.sigma_omega *= 0.5;
                    chain.sigma_lambda *= 0.5;
                } else if acceptance > 0.8 {
                    chain.sigma_r = (chain.sigma_r * 2.0).min(0.5 * domain.r_max);
                    chain.sigma_omega = (chain.sigma_omega * 2.0).min(0.5 * domain.omega_t_max);
                    chain.sigma_lambda = (chain.sigma_lambda * 2.0).min(200.0);
                }
            }

            let mut out = Vec::with_capacity(per_chain);
            let mut acc = 0usize;
            let mut tries = 0usize;
            for _ in 0..per_chain {
                if let Some(a) = chain.step(lens, path_id, direction, &domain, cfg) {
                    tries += 1;
                    acc += a as usize;
                }
                out.push((chain.state, chain.exit));
            }
            let report = ChainReport {
                acceptance: if tries > 0 {
                    acc as f64 / tries as f64
                } else {
                    acceptance
                },
                sigma_r: chain.sigma_r,
                sigma_omega: chain.sigma_omega,
                sigma_lambda_nm: chain.sigma_lambda,
            };
            Ok((out, report))
        })
        .collect();

    let mut streams = Vec::with_capacity(chains);
    let mut reports = Vec::with_capacity(chains);
    for r in results {
        let (s, rep) = r?;
        streams.push(s);
        reports.push(rep);
    }
    // Round-robin merge by chain index.
    let mut merged = Vec::with_capacity(n);
    'outer: for row in 0..per_chain {
        for s in &streams {
            if merged.len() >= n {
                break 'outer;
            }
            merged.push(s[row]);
        }
    }
    Ok((merged, reports))
}

fn record_from(p: &CanonPoint, exit: Option<&ExitRecord>) -> Record {
    match exit {
        Some(e) => Record {
            input: [p[0] as f32, p[1] as f32, p[2] as f32, p[3] as f32],
            valid: 1.0,
            output: [
                e.position.x as f32,
                e.position.y as f32,
                e.direction.x as f32,
                e.direction.y as f32,
                e.intensity as f32,
            ],
        },
        None => Record {
            input: [p[0] as f32, p[1] as f32, p[2] as f32, p[3] as f32],
            valid: 0.0,
            output: [0.0; 5],
        },
    }
}

/// Valid-only dataset for the regressor: `n` MCMC samples with oracle
/// outputs; header normalization from the data.
pub fn build_regressor_dataset(
    lens: &LensSystem,
    path_id: u64,
    direction: Direction,
    n: usize,
    cfg: &GenConfig,
) -> Result<Dataset> {
    let (samples, _) = mcmc_valid_samples(lens, path_id, direction, n, cfg)?;
    let records: Vec<Record> = samples
        .iter()
        .map(|(p, e)| record_from(p, Some(e)))
        .collect();
    let (norm_min, norm_max) = Dataset::compute_normalization(&records);
    Ok(Dataset {
        header: DatasetHeader {
            kind: DatasetKind::Regressor,
            direction,
            lens_hash: lens.hash(),
            path_id,
            norm_min,
            norm_max,
        },
        records,
    })
}

/// Fraction of `invalid` records within `radius` (normalized domain
/// distance) of some valid record, measured on a subsample.
pub fn near_boundary_fraction(
    domain: &Domain,
    valid: &[Record],
    invalid: &[Record],
    radius: f64,
    subsample: usize,
    seed: u64,
) -> f64 {
    use std::collections::HashMap;
    if invalid.is_empty() || valid.is_empty() {
        return 0.0;
    }
    let cell = |p: &[f64; 4]| -> [i32; 4] {
        let mut c = [0i32; 4];
        for d in 0..4 {
            c[d] = (p[d] / radius).floor() as i32;
        }
        c
    };
    let mut grid: HashMap<[i32; 4], Vec<[f64; 4]>> = HashMap::new();
    for r in valid {
        let p = domain.normalized(&[
            r.input[0] as f64,
            r.input[1] as f64,
            r.input[2] as f64,
            r.input[3] as f64,
        ]);
        grid.entry(cell(&p)).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = subsample.min(invalid.len());
    let mut close = 0usize;
    for _ in 0..take {
        let r = &invalid[rng.gen_range(0..invalid.len())];
        let p = domain.normalized(&[
            r.input[0] as f64,
            r.input[1] as f64,
            r.input[2] as f64,
            r.input[3] as f64,
        ]);
        let c = cell(&p);
        let mut found = false;
        'scan: for d0 in -1..=1i32 {
            for d1 in -1..=1i32 {
                for d2 in -1..=1i32 {
                    for d3 in -1..=1i32 {
                        let key = [c[0] + d0, c[1] + d1, c[2] + d2, c[3] + d3];
                        if let Some(pts) = grid.get(&key) {
                            for q in pts {
                                let mut d2sum = 0.0;
                                for k in 0..4 {
                                    let d = p[k] - q[k];
                                    d2sum += d * d;
                                }
                                if d2sum <= radius * radius {
                                    found = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
        }
        close += found as usize;
    }
    close as f64 / take as f64
}

/// Balanced classifier dataset: n/2 valid (MCMC) + n - n/2 invalid (uniform
/// rejection), with a near-boundary oversampling pass when fewer than 10%
/// of invalids fall within 5% domain distance of a valid sample. Shuffled
/// with the run seed.
pub fn build_classifier_dataset(
    lens: &LensSystem,
    path_id: u64,
    direction: Direction,
    n: usize,
    cfg: &GenConfig,
) -> Result<Dataset> {
    let domain = Domain::of(lens, direction, cfg);
    let n_valid = n / 2;
    let n_invalid = n - n_valid;

    let (samples, _) = mcmc_valid_samples(lens, path_id, direction, n_valid, cfg)?;
    let valid: Vec<Record> = samples
        .iter()
        .map(|(p, e)| record_from(p, Some(e)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5_51F1_u64);
    let mut invalid = Vec::with_capacity(n_invalid);
    let mut guard = 0u64;
    while invalid.len() < n_invalid {
        guard += 1;
        if guard > 1000 * n_invalid as u64 + 1_000_000 {
            return Err(Error::Dataset(
                "could not find enough invalid samples; valid region nearly covers the domain"
                    .into(),
            ));
        }
        let p = sample_input_uniform(&mut rng, &domain, cfg);
        if trace_canonical(lens, path_id, direction, &p).is_none() {
            invalid.push(record_from(&p, None));
        }
    }

    // Boundary oversampling: while too few invalids hug the boundary,
    // replace uniform invalids with rejected jitters of valid samples. The
    // jitter scale keeps the 4-d displacement inside the qualifying radius
    // with high probability, so nearly every replacement raises the measured
    // fraction; re-measure between rounds and stop with margin.
    let radius = 0.05;
    let normal = Normal::new(0.0, 0.35 * radius).unwrap();
    let scale = [
        domain.r_max,
        2.0 * domain.omega_t_max,
        domain.omega_t_max,
        LAMBDA_MAX_NM - LAMBDA_MIN_NM,
    ];
    let mut cursor = 0usize;
    for _round in 0..6 {
        if valid.is_empty() || cursor >= n_invalid {
            break;
        }
        let frac = near_boundary_fraction(&domain, &valid, &invalid, radius, 20_000, cfg.seed ^ 1);
        if frac >= 0.15 {
            break;
        }
        let want = ((0.08 * n_invalid as f64).ceil() as usize).min(n_invalid - cursor);
        let mut replaced = 0usize;
        let mut vi = 0usize;
        let mut tries = 0u64;
        while replaced < want && tries < 400 * want as u64 + 10_000 {
            tries += 1;
            let base = &valid[vi % valid.len()];
            vi += 1;
            // Jitter in normalized units, then map back.
            let mut cand: CanonPoint = [
                base.input[0] as f64,
                base.input[1] as f64,
                base.input[2] as f64,
                base.input[3] as f64,
            ];
            for d in 0..4 {
                cand[d] += normal.sample(&mut rng) * scale[d];
            }
            cand[0] = cand[0].abs();
            cand[1] = fold(cand[1], -domain.omega_t_max, domain.omega_t_max);
            cand[2] = cand[2].abs();
            cand[3] = fold(cand[3], LAMBDA_MIN_NM, LAMBDA_MAX_NM);
            if domain.contains(&cand) && trace_canonical(lens, path_id, direction, &cand).is_none()
            {
                invalid[cursor + replaced] = record_from(&cand, None);
                replaced += 1;
            }
        }
        cursor += replaced;
        if replaced < want {
            break;
        }
    }

    let mut records = valid;
    records.extend(invalid);
    // Deterministic shuffle from the run seed.
    use rand::seq::SliceRandom;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5AFF_1E5A_u64);
    records.shuffle(&mut shuffle_rng);

    let (norm_min, norm_max) = Dataset::compute_normalization(&records);
    Ok(Dataset {
        header: DatasetHeader {
            kind: DatasetKind::Classifier,
            direction,
            lens_hash: lens.hash(),
            path_id,
            norm_min,
            norm_max,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{builtin, parse_lens_system};
    use crate::trace::enumerate_paths;

    fn lens(name: &str) -> LensSystem {
        parse_lens_system(builtin(name).unwrap()).unwrap()
    }

    #[test]
    fn uniform_sampler_respects_constraints() {
        let l = lens("biconvex");
        let cfg = GenConfig::default();
        let domain = Domain::of(&l, Direction::Forward, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50_000 {
            let p = sample_input_uniform(&mut rng, &domain, &cfg);
            assert!(domain.contains(&p), "sample {p:?} outside domain");
            // Axial component above the configured floor.
            let wz2 = 1.0 - p[1] * p[1] - p[2] * p[2];
            assert!(wz2.sqrt() >= cfg.cos_min - 1e-12);
        }
    }

    #[test]
    fn uniform_radius_passes_ks_test() {
        let l = lens("biconvex");
        let cfg = GenConfig::default();
        let domain = Domain::of(&l, Direction::Forward, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000usize;
        let mut rs: Vec<f64> = (0..n)
            .map(|_| sample_input_uniform(&mut rng, &domain, &cfg)[0] / domain.r_max)
            .collect();
        rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, r) in rs.iter().enumerate() {
            let hi = (i + 1) as f64 / n as f64 - r;
            let lo = r - i as f64 / n as f64;
            d = d.max(hi.max(lo));
        }
        // Kolmogorov-Smirnov critical value at alpha = 0.01.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} over critical {crit}");
    }

    #[test]
    fn ghost_paths_much_sparser_than_transmission() {
        // Some ghosts focus through the stop and stay broad, but the sparse
        // ones are what motivate the MCMC explorer: on a many-surface lens
        // the thinnest ghost's valid fraction sits far below the all-T
        // path's, because the doubled traversal gives the remaining
        // apertures two extra chances to clip the bundle.
        let l = lens("gauss59");
        let cfg = GenConfig::default();
        let domain = Domain::of(&l, Direction::Forward, &cfg);
        let ghosts: Vec<u64> = enumerate_paths(&l, 2)
            .into_iter()
            .filter(|id| *id != 0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 30_000;
        let mut all_t = 0usize;
        let mut ghost_hits = vec![0usize; ghosts.len()];
        for _ in 0..n {
            let p = sample_input_uniform(&mut rng, &domain, &cfg);
            all_t += trace_canonical(&l, 0, Direction::Forward, &p).is_some() as usize;
            for (g, id) in ghosts.iter().enumerate() {
                ghost_hits[g] +=
                    trace_canonical(&l, *id, Direction::Forward, &p).is_some() as usize;
            }
        }
        assert!(all_t > 500, "all-T unexpectedly sparse: {all_t}");
        let sparsest = *ghost_hits.iter().min().unwrap();
        assert!(
            (sparsest as f64) < 0.1 * all_t as f64,
            "no sparse ghost: all_t = {all_t}, ghosts = {ghost_hits:?}"
        );
    }

    #[test]
    fn mcmc_samples_all_valid_and_revalidate() {
        let l = lens("biconvex");
        let cfg = GenConfig {
            seed: 99,
            ..GenConfig::default()
        };
        let (samples, reports) =
            mcmc_valid_samples(&l, 0, Direction::Forward, 20_000, &cfg).unwrap();
        assert_eq!(samples.len(), 20_000);
        for rep in &reports {
            assert!(
                rep.acceptance >= 0.2 && rep.acceptance <= 0.8,
                "untuned acceptance {}",
                rep.acceptance
            );
        }
        let domain = Domain::of(&l, Direction::Forward, &cfg);
        for (i, (p, e)) in samples.iter().enumerate() {
            assert!(domain.contains(p));
            if i % 97 == 0 {
                // Emitted outputs are the oracle's, bit for bit.
                let again = trace_canonical(&l, 0, Direction::Forward, p).expect("must revalidate");
                assert_eq!(again.position, e.position);
                assert_eq!(again.intensity, e.intensity);
            }
        }
    }

    #[test]
    fn mcmc_backward_reaches_input_plane() {
        let l = lens("biconvex");
        let cfg = GenConfig {
            seed: 7,
            ..GenConfig::default()
        };
        let (samples, _) = mcmc_valid_samples(&l, 0, Direction::Backward, 2_000, &cfg).unwrap();
        assert_eq!(samples.len(), 2_000);
        for (_, e) in &samples {
            assert!((e.position.z - l.input_plane_z).abs() < 1e-9);
            assert!(e.direction.z < 0.0);
        }
    }

    #[test]
    fn mcmc_covers_what_rejection_finds() {
        let l = lens("biconvex");
        let cfg = GenConfig {
            seed: 3,
            ..GenConfig::default()
        };
        let domain = Domain::of(&l, Direction::Forward, &cfg);
        // Desk-scale rejection baseline over (r, axial angle).
        let grid = 24usize;
        let mut baseline = vec![0u32; grid * grid];
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..300_000 {
            let p = sample_box_uniform(&mut rng, &domain);
            if trace_canonical(&l, 0, Direction::Forward, &p).is_some() {
                let gx = ((p[0] / domain.r_max) * grid as f64) as usize;
                let theta = (p[1] * p[1] + p[2] * p[2]).sqrt().asin();
                let tmax = domain.omega_t_max.asin();
                let gy = ((theta / tmax) * grid as f64) as usize;
                baseline[gx.min(grid - 1) * grid + gy.min(grid - 1)] += 1;
            }
        }
        let (samples, _) = mcmc_valid_samples(&l, 0, Direction::Forward, 100_000, &cfg).unwrap();
        let mut found = vec![0u32; grid * grid];
        for (p, _) in &samples {
            let gx = ((p[0] / domain.r_max) * grid as f64) as usize;
            let theta = (p[1] * p[1] + p[2] * p[2]).sqrt().asin();
            let tmax = domain.omega_t_max.asin();
            let gy = ((theta / tmax) * grid as f64) as usize;
            found[gx.min(grid - 1) * grid + gy.min(grid - 1)] += 1;
        }
        // Bins the rejection baseline hits ≥ 20 times carry ~7e-5 of the box
        // volume; with 1e5 uniform-stationary MCMC samples the expected count
        // per such bin is well above Poisson-zero territory, so an empty bin
        // indicates mode collapse rather than noise.
        let mut missed = 0usize;
        let mut occupied = 0usize;
        for i in 0..grid * grid {
            if baseline[i] >= 20 {
                occupied += 1;
                if found[i] == 0 {
                    missed += 1;
                }
            }
        }
        assert!(occupied > 50, "baseline grid too sparse: {occupied}");
        assert_eq!(
            missed, 0,
            "MCMC missed {missed} of {occupied} occupied bins"
        );
    }

    #[test]
    fn impossible_path_reports_no_valid_seed() {
        let l = lens("biconvex");
        let cfg = GenConfig {
            seed: 1,
            seed_budget: 20_000,
            ..GenConfig::default()
        };
        // A leading reflection exits the front; never sensor-valid.
        let err = mcmc_valid_samples(&l, 0b11, Direction::Forward, 10, &cfg).unwrap_err();
        assert!(matches!(err, Error::NoValidSeed { path_id: 0b11, .. }));
    }

    #[test]
    fn regressor_dataset_properties() {
        let l = lens("biconvex");
        let cfg = GenConfig {
            seed: 42,
            ..GenConfig::default()
        };
        let empty = build_regressor_dataset(&l, 0, Direction::Forward, 0, &cfg).unwrap();
        assert!(empty.records.is_empty());
        assert_eq!(empty.write_bytes().len(), crate::dataset::HEADER_WIDTH);

        let ds = build_regressor_dataset(&l, 0, Direction::Forward, 5_000, &cfg).unwrap();
        assert_eq!(ds.records.len(), 5_000);
        assert_eq!(
            ds.write_bytes().len(),
            crate::dataset::HEADER_WIDTH + 5_000 * crate::dataset::RECORD_WIDTH
        );
        assert!(ds.records.iter().all(|r| r.is_valid()));
        for r in &ds.records {
            for d in 0..4 {
                assert!(r.input[d] >= ds.header.norm_min[d]);
                assert!(r.input[d] <= ds.header.norm_max[d]);
            }
            assert!(r.output[4] >= 0.0 && r.output[4] <= 1.0);
        }

        // Bitwise reproducibility from seed; sensitivity to seed.
        let ds2 = build_regressor_dataset(&l, 0, Direction::Forward, 5_000, &cfg).unwrap();
        assert_eq!(ds.write_bytes(), ds2.write_bytes());
        let other = build_regressor_dataset(
            &l,
            0,
            Direction::Forward,
            5_000,
            &GenConfig {
                seed: 43,
                ..GenConfig::default()
            },
        )
        .unwrap();
        assert_ne!(ds.write_bytes(), other.write_bytes());
    }

    #[test]
    fn classifier_dataset_properties() {
        let l = lens("biconvex");
        let cfg = GenConfig {
            seed: 11,
            ..GenConfig::default()
        };
        let n = 10_000;
        let ds = build_classifier_dataset(&l, 0, Direction::Forward, n, &cfg).unwrap();
        assert_eq!(ds.records.len(), n);
        let valid_count = ds.records.iter().filter(|r| r.is_valid()).count();
        assert!((valid_count as i64 - (n - valid_count) as i64).abs() <= 1);

        // Labels match the oracle.
        for (i, r) in ds.records.iter().enumerate() {
            if i % 13 != 0 {
                continue;
            }
            let p: CanonPoint = [
                r.input[0] as f64,
                r.input[1] as f64,
                r.input[2] as f64,
                r.input[3] as f64,
            ];
            let traced = trace_canonical(&l, 0, Direction::Forward, &p).is_some();
            assert_eq!(traced, r.is_valid(), "label mismatch at {i}");
        }

        // Enough invalid mass near the boundary.
        let domain = Domain::of(&l, Direction::Forward, &cfg);
        let valid: Vec<Record> = ds.records.iter().copied().filter(|r| r.is_valid()).collect();
        let invalid: Vec<Record> = ds
            .records
            .iter()
            .copied()
            .filter(|r| !r.is_valid())
            .collect();
        let frac = near_boundary_fraction(&domain, &valid, &invalid, 0.05, 20_000, 2);
        assert!(frac >= 0.10, "near-boundary fraction {frac}");

        // Deterministic from seed.
        let ds2 = build_classifier_dataset(&l, 0, Direction::Forward, n, &cfg).unwrap();
        assert_eq!(ds.write_bytes(), ds2.write_bytes());
    }
}

