//! Synthetic anatomy-like phantoms.
//!
//! Structures are soft-edged ellipsoids that extend well past the volume in
//! z, so clean cross-sections drift slowly from slice to slice — the premise
//! behind using neighbor averages as a second noisy view. A couple of
//! structures are cut off abruptly at declared z indices to exercise the
//! end-of-organ case; the generator reports those indices in a sidecar.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use super::Volume;
use crate::error::{Error, Result};

pub const AIR_HU: f32 = -1000.0;
const BODY_HU: f32 = 40.0;
/// Soft-edge width as a fraction of the normalized radius. Narrow enough
/// that in-plane edges span about a voxel: blurring filters pay for it.
const EDGE: f32 = 0.035;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Random soft-tissue ellipsoids inside a body hull.
    Ellipses,
    /// The classic head-phantom ellipse layout, extruded along z.
    SheppLoganLike,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipses" => Ok(PhantomKind::Ellipses),
            "shepp_logan_like" | "shepp-logan-like" => Ok(PhantomKind::SheppLoganLike),
            other => Err(Error::InvalidArgument {
                detail: format!("unknown phantom kind {other:?} (expected ellipses or shepp_logan_like)"),
            }),
        }
    }
}

/// Sidecar metadata emitted next to a generated phantom.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PhantomMeta {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub seed: u64,
    /// Indices z where the anatomy changes abruptly between z-1 and z.
    pub organ_end_slices: Vec<usize>,
    /// Declared material range [min, max] in HU.
    pub hu_range: [f32; 2],
}

impl PhantomMeta {
    /// Slices whose neighbor average is biased by a declared transition at
    /// `z`: the pair centered at `z-1` looks ahead across the cut, the pair
    /// centered at `z` looks back across it.
    pub fn affected_slices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .organ_end_slices
            .iter()
            .flat_map(|&z| [z.saturating_sub(1), z])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

struct Ellipsoid {
    cz: f32,
    cy: f32,
    cx: f32,
    rz: f32,
    ry: f32,
    rx: f32,
    cos_t: f32,
    sin_t: f32,
    delta: f32,
    /// Present only for z < z_cut when set.
    z_cut: Option<usize>,
    /// Gate by the body hull so structures stay inside the anatomy.
    inside_body: bool,
}

fn coverage(e: &Ellipsoid, z: f32, y: f32, x: f32) -> f32 {
    let dz = (z - e.cz) / e.rz;
    let dy0 = y - e.cy;
    let dx0 = x - e.cx;
    let dx = (dx0 * e.cos_t + dy0 * e.sin_t) / e.rx;
    let dy = (-dx0 * e.sin_t + dy0 * e.cos_t) / e.ry;
    let rho = (dz * dz + dy * dy + dx * dx).sqrt();
    if rho <= 1.0 - EDGE {
        1.0
    } else if rho >= 1.0 + EDGE {
        0.0
    } else {
        let t = (1.0 + EDGE - rho) / (2.0 * EDGE);
        t * t * (3.0 - 2.0 * t)
    }
}

/// Generate a clean phantom and its sidecar metadata. Same seed, same bits.
pub fn make_phantom(kind: PhantomKind, dims: [usize; 3], seed: u64) -> Result<(Volume, PhantomMeta)> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidArgument { detail: format!("phantom dims must be >= 8 per axis, got {dims:?}") });
    }
    let (nz, ny, nx) = (dims[0], dims[1], dims[2]);
    let (fz, fy, fx) = (nz as f32, ny as f32, nx as f32);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut ellipsoids: Vec<Ellipsoid> = Vec::new();
    // Body hull: poles far outside the z range so its cross-section drifts slowly.
    let body = Ellipsoid {
        cz: 0.5 * fz,
        cy: 0.5 * fy,
        cx: 0.5 * fx,
        rz: 1.6 * fz,
        ry: 0.44 * fy,
        rx: 0.46 * fx,
        cos_t: 1.0,
        sin_t: 0.0,
        delta: BODY_HU - AIR_HU,
        z_cut: None,
        inside_body: false,
    };

    match kind {
        PhantomKind::Ellipses => {
            let n_structs = rng.random_range(5..=7);
            for _ in 0..n_structs {
                let theta = rng.random_range(0.0f32..std::f32::consts::PI);
                ellipsoids.push(Ellipsoid {
                    // z-centers keep both poles outside [0, nz]
                    cz: rng.random_range(0.25 * fz..0.75 * fz),
                    cy: rng.random_range(0.3 * fy..0.7 * fy),
                    cx: rng.random_range(0.3 * fx..0.7 * fx),
                    rz: rng.random_range(0.9 * fz..1.5 * fz),
                    ry: rng.random_range(0.08 * fy..0.22 * fy),
                    rx: rng.random_range(0.08 * fx..0.22 * fx),
                    cos_t: theta.cos(),
                    sin_t: theta.sin(),
                    delta: rng.random_range(-180.0..280.0),
                    z_cut: None,
                    inside_body: true,
                });
            }
            // bone-like high-attenuation structures: sharp, high-contrast
            // edges that penalize indiscriminate smoothing
            for _ in 0..2 {
                let theta = rng.random_range(0.0f32..std::f32::consts::PI);
                ellipsoids.push(Ellipsoid {
                    cz: rng.random_range(0.3 * fz..0.7 * fz),
                    cy: rng.random_range(0.25 * fy..0.75 * fy),
                    cx: rng.random_range(0.25 * fx..0.75 * fx),
                    rz: rng.random_range(1.0 * fz..1.6 * fz),
                    ry: rng.random_range(0.05 * fy..0.10 * fy),
                    rx: rng.random_range(0.05 * fx..0.10 * fx),
                    cos_t: theta.cos(),
                    sin_t: theta.sin(),
                    delta: rng.random_range(750.0..1000.0),
                    z_cut: None,
                    inside_body: true,
                });
            }
            // a few small sharp nodules
            for _ in 0..3 {
                ellipsoids.push(Ellipsoid {
                    cz: rng.random_range(0.3 * fz..0.7 * fz),
                    cy: rng.random_range(0.3 * fy..0.7 * fy),
                    cx: rng.random_range(0.3 * fx..0.7 * fx),
                    rz: rng.random_range(0.9 * fz..1.3 * fz),
                    ry: rng.random_range(0.035 * fy..0.06 * fy),
                    rx: rng.random_range(0.035 * fx..0.06 * fx),
                    cos_t: 1.0,
                    sin_t: 0.0,
                    delta: rng.random_range(-350.0..350.0),
                    z_cut: None,
                    inside_body: true,
                });
            }
        }
        PhantomKind::SheppLoganLike => {
            // (x0, y0, a, b, theta_deg, grey) of the classic layout; grey is
            // mapped onto HU deltas. z geometry gets seeded jitter.
            const SL: [(f32, f32, f32, f32, f32, f32); 9] = [
                (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
                (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
                (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
                (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
                (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
                (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
                (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
                (0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
                (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
            ];
            for &(x0, y0, a, b, th, grey) in &SL {
                let theta = th.to_radians();
                ellipsoids.push(Ellipsoid {
                    cz: 0.5 * fz + rng.random_range(-0.05 * fz..0.05 * fz),
                    cy: (y0 * 0.44 + 0.5) * fy,
                    cx: (x0 * 0.46 + 0.5) * fx,
                    rz: rng.random_range(0.9 * fz..1.4 * fz),
                    ry: b * 0.44 * fy,
                    rx: a * 0.46 * fx,
                    cos_t: theta.cos(),
                    sin_t: theta.sin(),
                    delta: grey * 420.0 + rng.random_range(-4.0..4.0),
                    z_cut: None,
                    inside_body: true,
                });
            }
        }
    }

    // Two high-contrast structures terminating abruptly: one in the lower
    // half, one in the upper half.
    let mut organ_ends = Vec::new();
    for range in [(0.28, 0.45), (0.58, 0.78)] {
        let z_cut = (rng.random_range(range.0 * fz..range.1 * fz)) as usize;
        let z_cut = z_cut.clamp(2, nz - 2);
        ellipsoids.push(Ellipsoid {
            cz: 0.5 * fz,
            cy: rng.random_range(0.38 * fy..0.62 * fy),
            cx: rng.random_range(0.38 * fx..0.62 * fx),
            rz: 2.0 * fz,
            ry: rng.random_range(0.22 * fy..0.30 * fy),
            rx: rng.random_range(0.22 * fx..0.30 * fx),
            cos_t: 1.0,
            sin_t: 0.0,
            delta: rng.random_range(260.0..320.0),
            z_cut: Some(z_cut),
            inside_body: true,
        });
        organ_ends.push(z_cut);
    }
    organ_ends.sort_unstable();
    organ_ends.dedup();

    let slice_len = ny * nx;
    let slices: Vec<Vec<f32>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let zf = z as f32 + 0.5;
            let mut s = vec![0.0f32; slice_len];
            for y in 0..ny {
                let yf = y as f32 + 0.5;
                for x in 0..nx {
                    let xf = x as f32 + 0.5;
                    let wb = coverage(&body, zf, yf, xf);
                    let mut v = AIR_HU + body.delta * wb;
                    for e in &ellipsoids {
                        if let Some(cut) = e.z_cut {
                            if z >= cut {
                                continue;
                            }
                        }
                        let w = coverage(e, zf, yf, xf);
                        if w > 0.0 {
                            let gate = if e.inside_body { wb } else { 1.0 };
                            v += e.delta * w * gate;
                        }
                    }
                    s[y * nx + x] = v;
                }
            }
            s
        })
        .collect();
    let mut values = Vec::with_capacity(nz * slice_len);
    for s in slices {
        values.extend_from_slice(&s);
    }

    let mut hu_min = f32::INFINITY;
    let mut hu_max = f32::NEG_INFINITY;
    for &v in &values {
        hu_min = hu_min.min(v);
        hu_max = hu_max.max(v);
    }
    let meta = PhantomMeta {
        kind,
        dims,
        seed,
        organ_end_slices: organ_ends,
        hu_range: [hu_min, hu_max],
    };
    Ok((Volume::new(dims, [1.0, 1.0, 1.0], values)?, meta))
}
