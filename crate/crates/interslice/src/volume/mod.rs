//! Volumes, noise models and self-supervised pair construction.
//!
//! A [`Volume`] is a z-ordered stack of 2-d slices in Hounsfield units. The
//! training signal comes from [`make_n2n_pair`]: the average of a slice's two
//! axial neighbors is a second noisy view of (almost) the same anatomy, so
//! regressing slice -> neighbor-average trains a denoiser without clean
//! targets. Per-slice noise substreams are seeded independently by
//! construction, which is the one statistical assumption the pairing needs.

pub mod phantom;
pub mod rvol;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};

/// Dense voxel grid, z-major, values in HU.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Extents as (z, y, x).
    pub dims: [usize; 3],
    /// Voxel spacing in mm per axis, (z, y, x).
    pub spacing: [f32; 3],
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> Result<Self> {
        let numel = dims[0] * dims[1] * dims[2];
        if values.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "Volume::new",
                detail: format!("dims {dims:?} imply {numel} voxels, got {}", values.len()),
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument { detail: format!("spacing must be positive, got {spacing:?}") });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Volume::new" });
        }
        Ok(Volume { dims, spacing, values })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume { dims, spacing: [1.0; 3], values: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.slice_len();
        &self.values[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f32] {
        let n = self.slice_len();
        &mut self.values[z * n..(z + 1) * n]
    }
}

/// Intensity window in HU for normalization.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Window {
    pub lo: f32,
    pub hi: f32,
}

/// Full CT range; display windows are presentation-only and never used here.
pub const DEFAULT_WINDOW: Window = Window { lo: -1024.0, hi: 3071.0 };

impl Window {
    pub fn width(self) -> f32 {
        self.hi - self.lo
    }

    pub fn validate(self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::InvalidArgument {
                detail: format!("degenerate window [{}, {}]", self.lo, self.hi),
            });
        }
        Ok(())
    }
}

/// Clamp to the window, then map affinely onto [0, 1].
pub fn normalize(v: &Volume, window: Window) -> Result<Volume> {
    window.validate()?;
    let w = window.width();
    let values = v.values.iter().map(|&x| (x.clamp(window.lo, window.hi) - window.lo) / w).collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, values })
}

/// Inverse of [`normalize`] on in-window values.
pub fn denormalize(v: &Volume, window: Window) -> Result<Volume> {
    window.validate()?;
    let w = window.width();
    let values = v.values.iter().map(|&x| x * w + window.lo).collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, values })
}

/// Noise models. The signal-dependent variant stands in for CT's
/// attenuation-dependent noise at desk scale: no assumption is made about the
/// real noise beyond per-slice independence.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { sigma: f32 },
    /// `eta ~ N(0, (a + b*x)^2)` in the volume's value units.
    SignalDependent { a: f32, b: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

/// SplitMix64; mixes (seed, z) into a per-slice substream seed.
fn mix_seed(seed: u64, z: u64) -> u64 {
    let mut h = seed ^ z.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Add voxelwise noise with an independent substream per slice, so noise in
/// different slices is independent by construction.
pub fn add_noise(v: &Volume, spec: &NoiseSpec) -> Result<Volume> {
    match spec.kind {
        NoiseKind::Gaussian { sigma } if sigma < 0.0 => {
            return Err(Error::InvalidArgument { detail: format!("negative sigma {sigma}") })
        }
        NoiseKind::SignalDependent { a, b } if a < 0.0 || b < 0.0 => {
            return Err(Error::InvalidArgument { detail: format!("negative noise coefficients a={a} b={b}") })
        }
        _ => {}
    }
    let mut out = v.clone();
    let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("unit normal");
    for z in 0..v.dims[0] {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.seed, z as u64));
        let slice = out.slice_mut(z);
        match spec.kind {
            NoiseKind::Gaussian { sigma } => {
                for val in slice.iter_mut() {
                    *val += sigma * normal.sample(&mut rng) as f32;
                }
            }
            NoiseKind::SignalDependent { a, b } => {
                for val in slice.iter_mut() {
                    let std = (a + b * *val).abs();
                    *val += std * normal.sample(&mut rng) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Three adjacent slices of a (normalized) volume; interior indices only.
#[derive(Clone, Debug)]
pub struct SliceTriple {
    pub prev: Vec<f32>,
    pub cur: Vec<f32>,
    pub next: Vec<f32>,
    pub index: usize,
    pub height: usize,
    pub width: usize,
}

/// Extract the triple centered at interior index `i` (1 <= i <= z-2).
/// Boundary slices have no triple and are excluded from training.
pub fn slice_triple(v: &Volume, i: usize) -> Result<SliceTriple> {
    if i == 0 || i + 1 >= v.dims[0] {
        return Err(Error::InvalidArgument {
            detail: format!("slice {i} has no two axial neighbors in a {}-slice volume", v.dims[0]),
        });
    }
    Ok(SliceTriple {
        prev: v.slice(i - 1).to_vec(),
        cur: v.slice(i).to_vec(),
        next: v.slice(i + 1).to_vec(),
        index: i,
        height: v.dims[1],
        width: v.dims[2],
    })
}

/// A training pair: the center slice and its neighbor average.
#[derive(Clone, Debug)]
pub struct N2nPair {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

/// `input = Y_i`, `target = (Y_{i-1} + Y_{i+1}) / 2`, computed in f32.
pub fn make_n2n_pair(t: &SliceTriple) -> N2nPair {
    let target = t.prev.iter().zip(&t.next).map(|(a, b)| 0.5 * (a + b)).collect();
    N2nPair { input: t.cur.clone(), target, height: t.height, width: t.width }
}

/// `n_patches` random aligned crops; input and target share coordinates.
pub fn sample_patches(
    pair: &N2nPair,
    n_patches: usize,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    if size > pair.height || size > pair.width {
        return Err(Error::InvalidArgument {
            detail: format!("patch size {size} exceeds slice dims {}x{}", pair.height, pair.width),
        });
    }
    let mut out = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let oy = rng.random_range(0..=pair.height - size);
        let ox = rng.random_range(0..=pair.width - size);
        let mut a = Vec::with_capacity(size * size);
        let mut b = Vec::with_capacity(size * size);
        for y in 0..size {
            let row = (oy + y) * pair.width + ox;
            a.extend_from_slice(&pair.input[row..row + size]);
            b.extend_from_slice(&pair.target[row..row + size]);
        }
        out.push((a, b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_window_endpoints() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![-1024.0, 1023.5, 3071.0]).unwrap();
        let n = normalize(&v, DEFAULT_WINDOW).unwrap();
        assert_eq!(n.values[0], 0.0);
        assert_eq!(n.values[2], 1.0);
        assert!((n.values[1] - 0.5).abs() < 1e-6, "midpoint -> 0.5, got {}", n.values[1]);
    }

    #[test]
    fn normalize_roundtrip_on_in_window_values() {
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..4096).map(|_| rng.random_range(-1024.0f32..3071.0)).collect();
        let v = Volume::new([1, 64, 64], [1.0; 3], vals.clone()).unwrap();
        let n = normalize(&v, DEFAULT_WINDOW).unwrap();
        let d = denormalize(&n, DEFAULT_WINDOW).unwrap();
        // exact where representable; allow a couple of ulps of the window width
        let tol = DEFAULT_WINDOW.width() * f32::EPSILON * 2.0;
        for (a, b) in d.values.iter().zip(&vals) {
            assert!((a - b).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_window_rejected() {
        let v = Volume::zeros([1, 2, 2]);
        assert!(matches!(
            normalize(&v, Window { lo: 5.0, hi: 5.0 }),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let v = phantom::make_phantom(phantom::PhantomKind::Ellipses, [8, 16, 16], 3).unwrap().0;
        let n = add_noise(&v, &NoiseSpec { kind: NoiseKind::Gaussian { sigma: 0.0 }, seed: 1 }).unwrap();
        assert_eq!(n.values, v.values);
    }

    #[test]
    fn negative_noise_params_rejected() {
        let v = Volume::zeros([2, 4, 4]);
        assert!(add_noise(&v, &NoiseSpec { kind: NoiseKind::Gaussian { sigma: -0.1 }, seed: 1 }).is_err());
        assert!(add_noise(&v, &NoiseSpec { kind: NoiseKind::SignalDependent { a: -1.0, b: 0.1 }, seed: 1 }).is_err());
    }

    #[test]
    fn gaussian_noise_sample_std() {
        // 64^3 constant volume, sigma 0.1: sample std within [0.097, 0.103].
        let v = Volume::new([64, 64, 64], [1.0; 3], vec![100.0; 64 * 64 * 64]).unwrap();
        let n = add_noise(&v, &NoiseSpec { kind: NoiseKind::Gaussian { sigma: 0.1 }, seed: 42 }).unwrap();
        let resid: Vec<f64> = n.values.iter().zip(&v.values).map(|(a, b)| (a - b) as f64).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / resid.len() as f64;
        let std = var.sqrt();
        assert!((0.097..=0.103).contains(&std), "sample std {std}");
    }

    #[test]
    fn adjacent_slice_noise_uncorrelated() {
        // Slice size large enough that the correlation estimator's own
        // sampling noise (~ 1/sqrt(n) = 0.002) sits far below the bound.
        let dims = [6, 512, 512];
        let v = Volume::new(dims, [1.0; 3], vec![0.0; 6 * 512 * 512]).unwrap();
        let n = add_noise(&v, &NoiseSpec { kind: NoiseKind::Gaussian { sigma: 1.0 }, seed: 9 }).unwrap();
        for z in 0..dims[0] - 1 {
            let a = n.slice(z);
            let b = n.slice(z + 1);
            let len = a.len() as f64;
            let ma = a.iter().map(|&v| v as f64).sum::<f64>() / len;
            let mb = b.iter().map(|&v| v as f64).sum::<f64>() / len;
            let mut cov = 0.0;
            let mut va = 0.0;
            let mut vb = 0.0;
            for (&x, &y) in a.iter().zip(b) {
                cov += (x as f64 - ma) * (y as f64 - mb);
                va += (x as f64 - ma).powi(2);
                vb += (y as f64 - mb).powi(2);
            }
            let corr = cov / (va.sqrt() * vb.sqrt());
            assert!(corr.abs() <= 0.01, "slices {z},{} corr {corr}", z + 1);
        }
    }

    #[test]
    fn n2n_pair_constant_volume_is_identity() {
        let v = Volume::new([5, 4, 4], [1.0; 3], vec![0.3; 5 * 16]).unwrap();
        let t = slice_triple(&v, 2).unwrap();
        let p = make_n2n_pair(&t);
        assert_eq!(p.input, p.target);
    }

    #[test]
    fn n2n_pair_z_linear_volume_is_identity() {
        // values linear in z: the two offsets cancel exactly
        let mut v = Volume::zeros([5, 4, 4]);
        for z in 0..5 {
            let val = 10.0 + 3.5 * z as f32;
            v.slice_mut(z).fill(val);
        }
        let t = slice_triple(&v, 2).unwrap();
        let p = make_n2n_pair(&t);
        assert_eq!(p.input, p.target);
    }

    #[test]
    fn boundary_indices_have_no_triple() {
        let v = Volume::zeros([4, 2, 2]);
        assert!(slice_triple(&v, 0).is_err());
        assert!(slice_triple(&v, 4).is_err());
        assert!(slice_triple(&v, 1).is_ok());
    }

    #[test]
    fn neighbor_average_noise_variance_halves() {
        // Var(target - clean) -> sigma^2 / 2 for i.i.d. per-slice noise.
        let dims = [12, 128, 128];
        let clean = Volume::new(dims, [1.0; 3], vec![50.0; 12 * 128 * 128]).unwrap();
        let sigma = 0.25f32;
        let noisy = add_noise(&clean, &NoiseSpec { kind: NoiseKind::Gaussian { sigma }, seed: 7 }).unwrap();
        let mut resid = Vec::new();
        for i in 1..dims[0] - 1 {
            let t = slice_triple(&noisy, i).unwrap();
            let p = make_n2n_pair(&t);
            let c = clean.slice(i);
            resid.extend(p.target.iter().zip(c).map(|(t, c)| (t - c) as f64));
        }
        assert!(resid.len() >= 100_000);
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / resid.len() as f64;
        let expected = (sigma as f64).powi(2) / 2.0;
        let rel = (var - expected).abs() / expected;
        assert!(rel <= 0.05, "Var(target-clean)={var:.6}, expected {expected:.6} ({rel:.3} rel)");
    }

    #[test]
    fn eq5_algebra_holds_on_random_tensors() {
        // With Y = X + eta and delta the X-differences, (Y1+Y3)/2 equals
        // X2 + (d1 - d2)/2 + (e1 + e3)/2 to f32 rounding.
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 4096;
        let x2: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let d1: Vec<f32> = (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        let d2: Vec<f32> = (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        let e1: Vec<f32> = (0..n).map(|_| rng.random_range(-0.3f32..0.3)).collect();
        let e3: Vec<f32> = (0..n).map(|_| rng.random_range(-0.3f32..0.3)).collect();
        for i in 0..n {
            let x1 = x2[i] + d1[i];
            let x3 = x2[i] - d2[i];
            let y1 = x1 + e1[i];
            let y3 = x3 + e3[i];
            let lhs = 0.5 * (y1 + y3);
            let rhs = x2[i] + 0.5 * (d1[i] - d2[i]) + 0.5 * (e1[i] + e3[i]);
            assert!((lhs - rhs).abs() <= 4.0 * f32::EPSILON * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn patch_sampling_is_deterministic_and_aligned() {
        let v = phantom::make_phantom(phantom::PhantomKind::Ellipses, [8, 32, 32], 5).unwrap().0;
        let t = slice_triple(&v, 4).unwrap();
        let p = make_n2n_pair(&t);
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(1);
        let a = sample_patches(&p, 10, 8, &mut r1).unwrap();
        let b = sample_patches(&p, 10, 8, &mut r2).unwrap();
        for ((ia, ta), (ib, tb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(ta, tb);
        }
        // full-slice patch is the identity crop
        let full = sample_patches(&p, 1, 32, &mut r1).unwrap();
        assert_eq!(full[0].0, p.input);
        assert_eq!(full[0].1, p.target);
        // oversize rejected
        assert!(sample_patches(&p, 1, 33, &mut r1).is_err());
    }
}
