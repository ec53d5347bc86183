//! Image-quality metrics and report emission.
//!
//! PSNR and SSIM are computed on normalized intensities over full slices.
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1 0.01,
//! K2 0.03), averaged over positions where the full window fits.

use std::path::Path;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_len(op: &'static str, x: &[f32], r: &[f32]) -> Result<()> {
    if x.len() != r.len() {
        return Err(Error::ShapeMismatch { op, detail: format!("{} vs {} pixels", x.len(), r.len()) });
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; identical images give +infinity.
pub fn psnr(x: &[f32], reference: &[f32], peak: f64) -> Result<f64> {
    check_same_len("psnr", x, reference)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument { detail: format!("psnr peak must be positive, got {peak}") });
    }
    let mse: f64 = x
        .iter()
        .zip(reference)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Horizontal-then-vertical valid-mode Gaussian filtering.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0f64; h * wv];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            tmp[y * wv + x] = acc;
        }
    }
    let mut out = vec![0.0f64; hv * wv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

/// Mean local SSIM over an `h x w` slice; `peak` is the dynamic range L.
pub fn ssim(x: &[f32], reference: &[f32], h: usize, w: usize, peak: f64) -> Result<f64> {
    check_same_len("ssim", x, reference)?;
    if x.len() != h * w {
        return Err(Error::ShapeMismatch { op: "ssim", detail: format!("{h}x{w} != {} pixels", x.len()) });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument {
            detail: format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"),
        });
    }
    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let k = gaussian_kernel();

    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let rf: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xf.iter().map(|v| v * v).collect();
    let rr: Vec<f64> = rf.iter().map(|v| v * v).collect();
    let xr: Vec<f64> = xf.iter().zip(&rf).map(|(a, b)| a * b).collect();

    let mu_x = filter_valid(&xf, h, w, &k);
    let mu_r = filter_valid(&rf, h, w, &k);
    let e_xx = filter_valid(&xx, h, w, &k);
    let e_rr = filter_valid(&rr, h, w, &k);
    let e_xr = filter_valid(&xr, h, w, &k);

    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, mr) = (mu_x[i], mu_r[i]);
        let vx = e_xx[i] - mx * mx;
        let vr = e_rr[i] - mr * mr;
        let cxr = e_xr[i] - mx * mr;
        acc += ((2.0 * mx * mr + c1) * (2.0 * cxr + c2)) / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
    }
    Ok(acc / mu_x.len() as f64)
}

/// Rectangular region of interest, `(y, x)` origin plus extent.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Roi {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionStats {
    pub mean: f64,
    pub std: f64,
}

fn stats(values: impl Iterator<Item = f64>, n: usize) -> RegionStats {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for v in values {
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    RegionStats { mean, std: var.sqrt() }
}

/// Statistics of `noisy - denoised`, full-slice or per ROI.
pub fn residual_stats(
    noisy: &[f32],
    denoised: &[f32],
    h: usize,
    w: usize,
    regions: Option<&[Roi]>,
) -> Result<Vec<RegionStats>> {
    check_same_len("residual_stats", noisy, denoised)?;
    if noisy.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "residual_stats",
            detail: format!("{h}x{w} != {} pixels", noisy.len()),
        });
    }
    let resid = |y: usize, x: usize| noisy[y * w + x] as f64 - denoised[y * w + x] as f64;
    match regions {
        None => Ok(vec![stats((0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| resid(y, x)), h * w)]),
        Some(rois) => rois
            .iter()
            .map(|r| {
                if r.y + r.h > h || r.x + r.w > w || r.h == 0 || r.w == 0 {
                    return Err(Error::InvalidArgument {
                        detail: format!("ROI {r:?} out of bounds for {h}x{w} slice"),
                    });
                }
                Ok(stats(
                    (r.y..r.y + r.h).flat_map(|y| (r.x..r.x + r.w).map(move |x| (y, x))).map(|(y, x)| resid(y, x)),
                    r.h * r.w,
                ))
            })
            .collect(),
    }
}

/// 3x3 box filter with border renormalization; the fixed reference baseline
/// the learned denoiser has to beat.
pub fn box_blur3(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            let mut n = 0u32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += img[yy as usize * w + xx as usize];
                        n += 1;
                    }
                }
            }
            out[y * w + x] = acc / n as f32;
        }
    }
    out
}

// ── Reports ─────────────────────────────────────────────────────────────

/// serde helper: +infinity becomes the string "inf" instead of JSON null.
mod db_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            "inf".serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            Num(f64),
            #[allow(dead_code)]
            Str(String),
        }
        Ok(match V::deserialize(d)? {
            V::Num(v) => v,
            V::Str(_) => f64::INFINITY,
        })
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SliceMetrics {
    pub slice: usize,
    #[serde(with = "db_value")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub residual_std: f64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MethodEntry {
    pub name: String,
    pub per_slice: Vec<SliceMetrics>,
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct Aggregate {
    #[serde(with = "db_value")]
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ReportMeta {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub window: [f32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<serde_json::Value>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub aggregate: Aggregate,
    pub per_slice: Vec<SliceMetrics>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    /// Row order is meaningful and preserved.
    pub methods: Vec<MethodRow>,
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate per-slice metrics: mean over slices, population std.
pub fn aggregate(per_slice: &[SliceMetrics]) -> Result<Aggregate> {
    if per_slice.is_empty() {
        return Err(Error::InvalidArgument { detail: "metric entry with no per-slice values".into() });
    }
    let psnr: Vec<f64> = per_slice.iter().map(|s| s.psnr_db).collect();
    let ssim: Vec<f64> = per_slice.iter().map(|s| s.ssim).collect();
    let (pm, ps) = mean_and_pop_std(&psnr);
    let (sm, ss) = mean_and_pop_std(&ssim);
    Ok(Aggregate { psnr_mean: pm, psnr_std: ps, ssim_mean: sm, ssim_std: ss })
}

pub fn build_report(meta: ReportMeta, entries: Vec<MethodEntry>) -> Result<MetricReport> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument { detail: "report needs at least one method entry".into() });
    }
    let methods = entries
        .into_iter()
        .map(|e| {
            Ok(MethodRow { aggregate: aggregate(&e.per_slice)?, name: e.name, per_slice: e.per_slice })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { meta, methods })
}

/// Write `report.csv` (4 decimal places) and `report.json` (full precision).
pub fn emit_report(report: &MetricReport, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("report.json");

    let mut csv = String::from("method,psnr_mean,psnr_std,ssim_mean,ssim_std\n");
    for row in &report.methods {
        let a = &row.aggregate;
        let fmt = |v: f64| if v.is_finite() { format!("{v:.4}") } else { "inf".to_string() };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.name,
            fmt(a.psnr_mean),
            fmt(a.psnr_std),
            fmt(a.ssim_mean),
            fmt(a.ssim_std)
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let json = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::HeaderInvalid { path: json_path.clone(), detail: e.to_string() })?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rand_img(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let x = rand_img(256, 1);
        assert!(psnr(&x, &x, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_offset_20db() {
        // offset 0.1 on [0,1]: 10 log10(1 / 0.01) = 20 dB. The inputs are
        // f32, so 0.4 is stored rounded; allow that rounding in the check.
        let x = vec![0.4f32; 1000];
        let r = vec![0.5f32; 1000];
        let v = psnr(&x, &r, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-5, "psnr {v}");
    }

    #[test]
    fn psnr_matches_direct_formula_oracle() {
        let x = rand_img(4096, 2);
        let r = rand_img(4096, 3);
        let got = psnr(&x, &r, 1.0).unwrap();
        // independent direct computation
        let mut mse = 0.0f64;
        for i in 0..x.len() {
            mse += (x[i] as f64 - r[i] as f64).powi(2);
        }
        mse /= x.len() as f64;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((got - want).abs() <= 1e-9);
        // symmetry
        assert_eq!(got, psnr(&r, &x, 1.0).unwrap());
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let x = rand_img(32 * 32, 4);
        assert_eq!(ssim(&x, &x, 32, 32, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constants_closed_form() {
        // constant images: variances vanish, only the luminance term deviates
        let c = 0.3f64;
        let cp = 0.6f64;
        let x = vec![c as f32; 16 * 16];
        let r = vec![cp as f32; 16 * 16];
        let got = ssim(&x, &r, 16, 16, 1.0).unwrap();
        let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
        // f32 storage rounds the constants; mirror that in the oracle
        let (cf, cpf) = (c as f32 as f64, cp as f32 as f64);
        let want = (2.0 * cf * cpf + c1) / (cf * cf + cpf * cpf + c1);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    /// Naive sliding-window SSIM; the brute-force oracle.
    fn ssim_bruteforce(x: &[f32], r: &[f32], h: usize, w: usize, peak: f64) -> f64 {
        let k1d = gaussian_kernel();
        let mut k2d = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                k2d[i * SSIM_WINDOW + j] = k1d[i] * k1d[j];
            }
        }
        let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
        let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut mx, mut mr, mut exx, mut err, mut exr) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let kv = k2d[i * SSIM_WINDOW + j];
                        let xv = x[(oy + i) * w + ox + j] as f64;
                        let rv = r[(oy + i) * w + ox + j] as f64;
                        mx += kv * xv;
                        mr += kv * rv;
                        exx += kv * xv * xv;
                        err += kv * rv * rv;
                        exr += kv * xv * rv;
                    }
                }
                let vx = exx - mx * mx;
                let vr = err - mr * mr;
                let cxr = exr - mx * mr;
                acc += ((2.0 * mx * mr + c1) * (2.0 * cxr + c2))
                    / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_bruteforce_oracle() {
        for seed in 0..3 {
            let x = rand_img(24 * 31, 10 + seed);
            let r = rand_img(24 * 31, 20 + seed);
            let fast = ssim(&x, &r, 24, 31, 1.0).unwrap();
            let slow = ssim_bruteforce(&x, &r, 24, 31, 1.0);
            assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
            // symmetry
            let sym = ssim(&r, &x, 24, 31, 1.0).unwrap();
            assert!((fast - sym).abs() <= 1e-12);
        }
    }

    #[test]
    fn ssim_too_small_rejected() {
        let x = vec![0.0f32; 10 * 10];
        assert!(matches!(ssim(&x, &x, 10, 10, 1.0), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn residual_stats_basics() {
        let noisy = rand_img(16 * 16, 5);
        // identical -> std 0
        let s = residual_stats(&noisy, &noisy, 16, 16, None).unwrap();
        assert_eq!(s[0].std, 0.0);
        // ROI covering everything equals full-image stats
        let den = rand_img(16 * 16, 6);
        let full = residual_stats(&noisy, &den, 16, 16, None).unwrap()[0];
        let roi = residual_stats(&noisy, &den, 16, 16, Some(&[Roi { y: 0, x: 0, h: 16, w: 16 }])).unwrap()[0];
        assert_eq!(full, roi);
        // out-of-bounds ROI rejected
        assert!(residual_stats(&noisy, &den, 16, 16, Some(&[Roi { y: 10, x: 0, h: 7, w: 2 }])).is_err());
    }

    #[test]
    fn residual_std_recovers_gaussian_sigma() {
        use rand_distr::Distribution;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let normal = rand_distr::Normal::new(0.0f64, 0.1).unwrap();
        let n = 512 * 512;
        let denoised = vec![0.5f32; n];
        let noisy: Vec<f32> = denoised.iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
        let s = residual_stats(&noisy, &denoised, 512, 512, None).unwrap()[0];
        assert!((s.std - 0.1).abs() / 0.1 <= 0.05, "std {}", s.std);
    }

    #[test]
    fn report_roundtrip_preserves_table_layout() {
        // The published ablation row shape: three methods with PSNR/SSIM.
        let mk = |name: &str, psnr: f64, ssim: f64| MethodEntry {
            name: name.to_string(),
            per_slice: vec![SliceMetrics { slice: 0, psnr_db: psnr, ssim, residual_std: 0.0 }],
        };
        let meta = ReportMeta {
            checkpoint_id: "abc".into(),
            dataset_id: "d".into(),
            window: [-1024.0, 3071.0],
            seeds: None,
        };
        let report = build_report(
            meta,
            vec![mk("M1", 30.80, 0.891), mk("M2", 31.03, 0.899), mk("M3", 31.26, 0.908)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, json_path) = emit_report(&report, dir.path()).unwrap();

        let parsed: MetricReport =
            serde_json::from_slice(&std::fs::read(&json_path).unwrap()).unwrap();
        for (a, b) in parsed.methods.iter().zip(&report.methods) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.aggregate.psnr_mean, b.aggregate.psnr_mean);
            assert_eq!(a.aggregate.ssim_mean, b.aggregate.ssim_mean);
        }
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.contains("M1,30.8000,0.0000,0.8910,0.0000"));
        assert!(csv.contains("M3,31.2600,0.0000,0.9080,0.0000"));

        // CSV and JSON aggregates agree
        for row in &parsed.methods {
            let line = csv.lines().find(|l| l.starts_with(&row.name)).unwrap();
            let cols: Vec<&str> = line.split(',').collect();
            assert!((cols[1].parse::<f64>().unwrap() - row.aggregate.psnr_mean).abs() < 5e-5);
            assert!((cols[3].parse::<f64>().unwrap() - row.aggregate.ssim_mean).abs() < 5e-5);
        }
    }

    #[test]
    fn empty_entry_rejected() {
        let meta = ReportMeta {
            checkpoint_id: String::new(),
            dataset_id: String::new(),
            window: [0.0, 1.0],
            seeds: None,
        };
        let err = build_report(meta, vec![MethodEntry { name: "x".into(), per_slice: vec![] }]);
        assert!(err.is_err());
    }

    #[test]
    fn aggregate_mean_equals_mean_of_slices() {
        let per: Vec<SliceMetrics> = (0..5)
            .map(|i| SliceMetrics { slice: i, psnr_db: 20.0 + i as f64, ssim: 0.8, residual_std: 0.0 })
            .collect();
        let a = aggregate(&per).unwrap();
        assert!((a.psnr_mean - 22.0).abs() < 1e-12);
        // population std of {20..24} = sqrt(2)
        assert!((a.psnr_std - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn infinite_psnr_serializes_as_inf_string() {
        let m = SliceMetrics { slice: 0, psnr_db: f64::INFINITY, ssim: 1.0, residual_std: 0.0 };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"inf\""), "{s}");
        let back: SliceMetrics = serde_json::from_str(&s).unwrap();
        assert!(back.psnr_db.is_infinite());
    }
}
