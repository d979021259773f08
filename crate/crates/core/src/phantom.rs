//! Synthetic vertebra-like phantoms with a known body/posterior boundary.
//!
//! Axes follow the usual vertebra crop orientation: `x` left-right, `y`
//! anterior-posterior (the height axis of the boundary surface) and `z`
//! cranio-caudal. The body is a rounded elliptic cylinder at low `y`; the
//! posterior elements (a ring-shaped arch around the canal, a spinous and two
//! transverse processes) sit at high `y`. The boundary is a tilted, slightly
//! curved surface `y = b(x, z)` plus a small deterministic roughness; every
//! voxel of the vertebra is assigned to the body if it lies below the rough
//! boundary and to the posterior elements otherwise.
//!
//! All randomness comes from ChaCha8 streams seeded with [`derive_seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;
use crate::voxel::{sigmoid, BinaryMask, GridMeta, ScalarField};

/// In-plane width of the body relative to its anterior-posterior radius.
pub const BODY_WIDTH_RATIO: f64 = 1.25;
/// Boundary position behind the body centre, as a fraction of the AP radius.
pub const BOUNDARY_DEPTH_RATIO: f64 = 0.7;
/// Spinal canal radius relative to the body AP radius.
pub const CANAL_RATIO: f64 = 0.55;
/// Half-height of the arch relative to the body half-height.
pub const ARCH_HEIGHT_RATIO: f64 = 0.6;
/// Superellipse exponent of the body (4 gives a rounded cylinder).
const BODY_EXPONENT: f64 = 4.0;
const ROUGHNESS_TERMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub volume: GridMeta,
    /// `(in-plane AP radius, axial half-height)` of the body.
    pub body_radius_mm: [f64; 2],
    pub arch_thickness_mm: f64,
    /// `(spinous, left transverse, right transverse)`.
    pub process_lengths_mm: [f64; 3],
    pub boundary_curve_amplitude_mm: f64,
    /// Boundary slopes `dy/dx`, `dy/dz`.
    pub boundary_tilt: [f64; 2],
    pub noise_amplitude_mm: f64,
    /// Shift of the whole vertebra from the centred placement.
    #[serde(default)]
    pub center_offset_mm: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            volume: GridMeta::cube(64, 1.0).expect("valid default volume"),
            body_radius_mm: [12.0, 9.0],
            arch_thickness_mm: 4.0,
            process_lengths_mm: [8.0, 11.0, 11.0],
            boundary_curve_amplitude_mm: 1.0,
            boundary_tilt: [0.05, -0.03],
            noise_amplitude_mm: 0.05,
            center_offset_mm: [0.0; 3],
            seed: 0,
        }
    }
}

impl PhantomParams {
    fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        let lengths = [
            self.body_radius_mm[0],
            self.body_radius_mm[1],
            self.arch_thickness_mm,
            self.process_lengths_mm[0],
            self.process_lengths_mm[1],
            self.process_lengths_mm[2],
        ];
        if !lengths.iter().all(|l| l.is_finite() && *l > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "phantom lengths must be positive: {lengths:?}"
            )));
        }
        let rest = [
            self.boundary_curve_amplitude_mm,
            self.boundary_tilt[0],
            self.boundary_tilt[1],
            self.noise_amplitude_mm,
        ];
        if !rest
            .iter()
            .chain(&self.center_offset_mm)
            .all(|v| v.is_finite())
            || self.noise_amplitude_mm < 0.0
        {
            return Err(Error::InvalidArgument("invalid boundary parameters".into()));
        }
        Ok(())
    }
}

/// Smooth analytic boundary `y = base + t·(p - c) + A·((x - cx)/w)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySurface {
    pub base_mm: f64,
    /// `(x, z)` about which tilt and curvature are expressed.
    pub center_mm: [f64; 2],
    pub tilt: [f64; 2],
    pub curvature_mm: f64,
    pub half_width_mm: f64,
}

impl BoundarySurface {
    /// Boundary height at in-plane `(x, z)`.
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center_mm[0];
        let dz = p[1] - self.center_mm[1];
        let u = dx / self.half_width_mm;
        self.base_mm + self.tilt[0] * dx + self.tilt[1] * dz + self.curvature_mm * u * u
    }

    pub fn is_flat(&self) -> bool {
        self.tilt == [0.0, 0.0] && self.curvature_mm == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    freq: [f64; 2],
    phase: f64,
}

/// Mean of a few low-frequency plane waves, mapped into `[0, amplitude]`.
/// The offset only ever moves the cut to the posterior side, so the thin
/// posterior elements stay on their side of the smooth boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roughness {
    amplitude_mm: f64,
    waves: Vec<Wave>,
}

impl Roughness {
    fn new(amplitude_mm: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "roughness"));
        let waves = (0..ROUGHNESS_TERMS)
            .map(|_| {
                let f = rng.random_range(0.15..0.45);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Wave {
                    freq: [f * angle.cos(), f * angle.sin()],
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Self {
            amplitude_mm,
            waves,
        }
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        if self.amplitude_mm == 0.0 {
            return 0.0;
        }
        let s: f64 = self
            .waves
            .iter()
            .map(|w| (w.freq[0] * p[0] + w.freq[1] * p[1] + w.phase).sin())
            .sum();
        0.5 * self.amplitude_mm * (1.0 + s / self.waves.len() as f64)
    }
}

/// Ground-truth record written next to the masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomRecord {
    pub params: PhantomParams,
    pub true_boundary: BoundarySurface,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub params: PhantomParams,
    pub vertebra: BinaryMask,
    pub body: BinaryMask,
    pub posterior: BinaryMask,
    pub true_boundary: BoundarySurface,
    pub label: String,
}

impl Phantom {
    pub fn record(&self) -> PhantomRecord {
        PhantomRecord {
            params: self.params.clone(),
            true_boundary: self.true_boundary,
            label: self.label.clone(),
        }
    }

    /// Fractions of body / posterior voxels on their own side of the smooth boundary.
    pub fn side_fractions(&self) -> (f64, f64) {
        let meta = self.body.meta();
        let side = |mask: &BinaryMask, body_side: bool| {
            let mut n = 0usize;
            let mut ok = 0usize;
            for (i, _) in mask.data().iter().enumerate().filter(|(_, &b)| b) {
                let w = meta.world(meta.voxel(i));
                let below = w[1] <= self.true_boundary.eval([w[0], w[2]]);
                n += 1;
                ok += (below == body_side) as usize;
            }
            if n == 0 {
                1.0
            } else {
                ok as f64 / n as f64
            }
        };
        (side(&self.body, true), side(&self.posterior, false))
    }

    /// Body mask softened across the smooth boundary, `vertebra · σ(-d/τ)`
    /// with `d` the height above the boundary: the soft mask a fit produces
    /// when its surface sits exactly on the true boundary.
    pub fn soft_body(&self, tau_mm: f64) -> Result<ScalarField> {
        if !(tau_mm.is_finite() && tau_mm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be > 0, got {tau_mm}"
            )));
        }
        let meta = *self.vertebra.meta();
        let data = (0..meta.len())
            .map(|i| {
                if !self.vertebra.data()[i] {
                    return 0.0;
                }
                let w = meta.world(meta.voxel(i));
                sigmoid(-(w[1] - self.true_boundary.eval([w[0], w[2]])) / tau_mm)
            })
            .collect();
        ScalarField::new(meta, data)
    }

    /// Checks the partition invariants: disjoint, covering, and ≥ 99% of
    /// each part on its side of the smooth boundary.
    pub fn check_invariants(&self) -> Result<()> {
        let union = self.body.union(&self.posterior)?;
        if union != self.vertebra {
            return Err(Error::InvalidArgument(
                "body ∪ posterior != vertebra".into(),
            ));
        }
        if !self.body.intersection(&self.posterior)?.is_empty() {
            return Err(Error::InvalidArgument("body and posterior overlap".into()));
        }
        let (b, p) = self.side_fractions();
        if b < 0.99 || p < 0.99 {
            return Err(Error::InvalidArgument(format!(
                "boundary side fractions too low: body {b:.4}, posterior {p:.4}"
            )));
        }
        Ok(())
    }
}

struct Layout {
    /// Body centre.
    c: [f64; 3],
    rx: f64,
    ry: f64,
    hz: f64,
    /// Canal centre `y`.
    ya: f64,
    ri: f64,
    ro: f64,
    arch_half: f64,
}

impl Layout {
    fn new(p: &PhantomParams) -> Result<Self> {
        let [r, hz] = p.body_radius_mm;
        let ry = r;
        let rx = BODY_WIDTH_RATIO * r;
        let ri = CANAL_RATIO * r;
        let ro = ri + p.arch_thickness_mm;
        let [ls, ll, lr] = p.process_lengths_mm;
        let behind = BOUNDARY_DEPTH_RATIO * ry + ri + ro + ls;
        let vc = p.volume.center();
        let c = [
            vc[0] + p.center_offset_mm[0],
            vc[1] + 0.5 * (ry - behind) + p.center_offset_mm[1],
            vc[2] + p.center_offset_mm[2],
        ];
        let layout = Self {
            c,
            rx,
            ry,
            hz,
            ya: c[1] + BOUNDARY_DEPTH_RATIO * ry + ri,
            ri,
            ro,
            arch_half: ARCH_HEIGHT_RATIO * hz,
        };

        let lo = [c[0] - rx.max(ro + ll), c[1] - ry, c[2] - hz];
        let hi = [c[0] + rx.max(ro + lr), layout.ya + ro + ls, c[2] + hz];
        let meta = &p.volume;
        for k in 0..3 {
            let first = meta.origin[k];
            let last = meta.axis_coord(k, meta.shape[k] - 1);
            if lo[k] < first + meta.spacing[k] || hi[k] > last - meta.spacing[k] {
                return Err(Error::PhantomBounds(format!(
                    "axis {k}: shape spans {:.1}..{:.1} mm, volume {:.1}..{:.1} mm",
                    lo[k], hi[k], first, last
                )));
            }
        }
        Ok(layout)
    }

    fn in_body(&self, w: [f64; 3]) -> bool {
        let u = (w[0] - self.c[0]) / self.rx;
        let v = (w[1] - self.c[1]) / self.ry;
        let t = (w[2] - self.c[2]) / self.hz;
        let rho2 = u * u + v * v;
        rho2 * rho2 + t.abs().powf(BODY_EXPONENT) <= 1.0
    }

    fn in_posterior_elements(&self, w: [f64; 3], p: &PhantomParams) -> bool {
        let dx = w[0] - self.c[0];
        let dy = w[1] - self.ya;
        let dz = (w[2] - self.c[2]).abs();
        let t = p.arch_thickness_mm;
        let [ls, ll, lr] = p.process_lengths_mm;

        let rr = (dx * dx + dy * dy).sqrt();
        let arch = rr >= self.ri && rr <= self.ro && dz <= self.arch_half;
        let spinous = dx.abs() <= 0.5 * t
            && dy >= self.ri
            && dy <= self.ro + ls
            && dz <= 0.8 * self.arch_half;
        let transverse = dy.abs() <= 0.5 * t
            && dz <= 0.7 * self.arch_half
            && ((dx <= -self.ri && dx >= -(self.ro + ll)) || (dx >= self.ri && dx <= self.ro + lr));
        arch || spinous || transverse
    }
}

fn label_for(p: &PhantomParams) -> String {
    let size = match p.body_radius_mm[0] {
        r if r < 10.5 => "small",
        r if r < 13.5 => "medium",
        _ => "large",
    };
    let curve = if p.boundary_curve_amplitude_mm.abs() < 0.75 {
        "flat"
    } else {
        "curved"
    };
    format!("{size}/{curve}")
}

/// Halvings of the roughness tried before falling back to a smooth cut.
const ROUGHNESS_RETRIES: usize = 6;

/// Generates one phantom; a pure function of `params`.
///
/// If the roughness would push more than 1% of either part across the smooth
/// boundary (small or coarsely sampled shapes), its amplitude is halved until
/// the partition invariants hold; the amplitude actually used is recorded in
/// the returned params, so regenerating from them reproduces the phantom.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    params.validate()?;
    let layout = Layout::new(params)?;
    let boundary = BoundarySurface {
        base_mm: layout.c[1] + BOUNDARY_DEPTH_RATIO * layout.ry,
        center_mm: [layout.c[0], layout.c[2]],
        tilt: params.boundary_tilt,
        curvature_mm: params.boundary_curve_amplitude_mm,
        half_width_mm: layout.rx,
    };
    let mut used = params.clone();
    for _ in 0..ROUGHNESS_RETRIES {
        let phantom = cut_phantom(&used, &layout, boundary)?;
        let (b, p) = phantom.side_fractions();
        if (b >= 0.99 && p >= 0.99) || used.noise_amplitude_mm == 0.0 {
            return Ok(phantom);
        }
        used.noise_amplitude_mm *= 0.5;
    }
    used.noise_amplitude_mm = 0.0;
    cut_phantom(&used, &layout, boundary)
}

fn cut_phantom(
    params: &PhantomParams,
    layout: &Layout,
    boundary: BoundarySurface,
) -> Result<Phantom> {
    let rough = Roughness::new(params.noise_amplitude_mm, params.seed);
    let meta = params.volume;
    let n = meta.len();
    let mut body = vec![false; n];
    let mut posterior = vec![false; n];
    for i in 0..n {
        let w = meta.world(meta.voxel(i));
        let in_body = layout.in_body(w);
        let in_post = layout.in_posterior_elements(w, params);
        if !(in_body || in_post) {
            continue;
        }
        let q = [w[0], w[2]];
        let cut = boundary.eval(q) + rough.eval(q);
        if w[1] < cut {
            // posterior elements never reach forward of the boundary
            body[i] = in_body;
        } else {
            posterior[i] = true;
        }
    }
    let vertebra: Vec<bool> = body.iter().zip(&posterior).map(|(a, b)| *a || *b).collect();
    Ok(Phantom {
        params: params.clone(),
        vertebra: BinaryMask::new(meta, vertebra)?,
        body: BinaryMask::new(meta, body)?,
        posterior: BinaryMask::new(meta, posterior)?,
        true_boundary: boundary,
        label: label_for(params),
    })
}

/// Ranges for per-instance parameter jitter in [`phantom_batch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterRanges {
    /// Relative size jitter (±).
    pub size_fraction: f64,
    /// Added to each boundary slope, uniform in ±tilt.
    pub tilt: f64,
    /// Added to the curvature amplitude, uniform in ±curve_mm.
    pub curve_mm: f64,
    /// Added to the vertebra position on each axis, uniform in ±offset_mm.
    pub offset_mm: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            size_fraction: 0.25,
            tilt: 0.1,
            curve_mm: 1.5,
            offset_mm: 1.0,
        }
    }
}

/// Parameters of instance `index` of a batch: ChaCha8 seeded with
/// `derive_seed(seed, "phantom/<index>")`, draws in a fixed order.
pub fn jittered_params(
    base: &PhantomParams,
    jitter: &JitterRanges,
    seed: u64,
    index: usize,
) -> PhantomParams {
    let instance_seed = derive_seed(seed, &format!("phantom/{index}"));
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let mut unit = |range: f64| -> f64 {
        if range == 0.0 {
            // keep the draw sequence aligned
            let _: f64 = rng.random();
            0.0
        } else {
            rng.random_range(-range..=range)
        }
    };
    let sf = jitter.size_fraction;
    let mut p = base.clone();
    let body_scale = 1.0 + unit(sf);
    p.body_radius_mm[0] *= body_scale;
    p.body_radius_mm[1] *= body_scale * (1.0 + unit(0.05));
    p.arch_thickness_mm *= 1.0 + unit(sf);
    for l in &mut p.process_lengths_mm {
        *l *= 1.0 + unit(sf);
    }
    p.boundary_tilt[0] += unit(jitter.tilt);
    p.boundary_tilt[1] += unit(jitter.tilt);
    p.boundary_curve_amplitude_mm += unit(jitter.curve_mm);
    for o in &mut p.center_offset_mm {
        *o += unit(jitter.offset_mm);
    }
    p.seed = instance_seed;
    p
}

pub fn phantom_batch(n: usize, base: &PhantomParams, seed: u64) -> Result<Vec<Phantom>> {
    phantom_batch_with(n, base, &JitterRanges::default(), seed)
}

pub fn phantom_batch_with(
    n: usize,
    base: &PhantomParams,
    jitter: &JitterRanges,
    seed: u64,
) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    (0..n)
        .map(|i| generate_phantom(&jittered_params(base, jitter, seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = PhantomParams::default();
        assert_eq!(generate_phantom(&p).unwrap(), generate_phantom(&p).unwrap());
    }

    #[test]
    fn default_counts_and_invariants() {
        let ph = generate_phantom(&PhantomParams::default()).unwrap();
        let (nb, np) = (ph.body.count(), ph.posterior.count());
        assert!((1000..=120_000).contains(&nb), "body {nb}");
        assert!((1000..=120_000).contains(&np), "posterior {np}");
        ph.check_invariants().unwrap();
    }

    #[test]
    fn flat_boundary_separates_strictly() {
        let p = PhantomParams {
            boundary_curve_amplitude_mm: 0.0,
            boundary_tilt: [0.0, 0.0],
            noise_amplitude_mm: 0.0,
            ..Default::default()
        };
        let ph = generate_phantom(&p).unwrap();
        assert!(ph.true_boundary.is_flat());
        let meta = ph.body.meta();
        for (i, _) in ph.body.data().iter().enumerate().filter(|(_, &b)| b) {
            assert!(meta.world(meta.voxel(i))[1] < ph.true_boundary.base_mm);
        }
        for (i, _) in ph.posterior.data().iter().enumerate().filter(|(_, &b)| b) {
            assert!(meta.world(meta.voxel(i))[1] >= ph.true_boundary.base_mm);
        }
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        let p = PhantomParams {
            body_radius_mm: [30.0, 9.0],
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&p), Err(Error::PhantomBounds(_))));
        let bad = PhantomParams {
            arch_thickness_mm: -1.0,
            ..Default::default()
        };
        assert!(generate_phantom(&bad).is_err());
    }

    #[test]
    fn batch_of_one_is_first_jitter() {
        let base = PhantomParams::default();
        let batch = phantom_batch(1, &base, 11).unwrap();
        let direct =
            generate_phantom(&jittered_params(&base, &JitterRanges::default(), 11, 0)).unwrap();
        assert_eq!(batch[0], direct);
        assert!(phantom_batch(0, &base, 11).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let base = PhantomParams::default();
        let a = phantom_batch(2, &base, 1).unwrap();
        let b = phantom_batch(2, &base, 2).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x.vertebra != y.vertebra));
    }

    #[test]
    fn coarse_volume_matches_fine_in_world_space() {
        let fine = PhantomParams {
            noise_amplitude_mm: 0.0,
            ..Default::default()
        };
        let coarse = PhantomParams {
            volume: GridMeta::new([32; 3], [2.0; 3], [0.5; 3]).unwrap(),
            ..fine.clone()
        };
        let pf = generate_phantom(&fine).unwrap();
        let pc = generate_phantom(&coarse).unwrap();
        let mc = pc.vertebra.meta();
        let mf = pf.vertebra.meta();
        let mut mismatched = 0;
        for i in 0..mc.len() {
            let v = mc.voxel(i);
            let w = mc.world(v);
            let fv = [0, 1, 2].map(|k| ((w[k] - mf.origin[k]) / mf.spacing[k]).round() as usize);
            if pc.vertebra.data()[i] != pf.vertebra.get(fv) {
                // the coarse value must occur within one fine voxel
                let want = pc.vertebra.data()[i];
                let near_edge = (0..27).any(|n| {
                    let off = [n % 3, (n / 3) % 3, n / 9];
                    let mut q = fv;
                    for k in 0..3 {
                        let c = fv[k] as i64 + off[k] as i64 - 1;
                        if c < 0 || c >= mf.shape[k] as i64 {
                            return false;
                        }
                        q[k] = c as usize;
                    }
                    pf.vertebra.get(q) == want
                });
                assert!(near_edge, "interior mismatch at {v:?}");
                mismatched += 1;
            }
        }
        assert!(mismatched < pc.vertebra.count() / 2);
    }

    #[test]
    fn overly_rough_phantoms_are_smoothed_until_the_invariants_hold() {
        let base = PhantomParams {
            volume: GridMeta::cube(32, 2.0).unwrap(),
            noise_amplitude_mm: 1.5,
            ..Default::default()
        };
        let mut smoothed = 0;
        for seed in 0..12 {
            let p = generate_phantom(&jittered_params(&base, &JitterRanges::default(), seed, 0))
                .unwrap();
            p.check_invariants().unwrap();
            assert!(p.params.noise_amplitude_mm <= 1.5);
            smoothed += (p.params.noise_amplitude_mm < 1.5) as usize;
            assert_eq!(generate_phantom(&p.params).unwrap(), p);
        }
        assert!(smoothed > 0);
    }

    #[test]
    fn soft_body_halves_at_the_smooth_boundary() {
        let p = generate_phantom(&PhantomParams {
            noise_amplitude_mm: 0.0,
            ..Default::default()
        })
        .unwrap();
        let soft = p.soft_body(1.0).unwrap();
        assert_eq!(crate::voxel::threshold(&soft, 0.5), p.body);
        for (&v, &bone) in soft.data().iter().zip(p.vertebra.data()) {
            assert!(if bone { v > 0.0 && v < 1.0 } else { v == 0.0 });
        }
        assert!(p.soft_body(0.0).is_err());
    }
}
