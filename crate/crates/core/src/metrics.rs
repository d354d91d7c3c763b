//! Image quality metrics and a paired signed-rank test.
//!
//! `psnr` and `ssim` take images already mapped to `[0, 1]` (peak 1).
//! [`evaluate_batch`] does that mapping: image batches are rescaled per image
//! by their own min/max, vector batches use the fixed data range `[-1, 1]`.

use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::io::write_file;
use crate::parallel;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Largest sample size for which the Wilcoxon null is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    Ok(())
}

pub fn mse(reference: &[f64], test: &[f64]) -> Result<f64> {
    check_len(reference, test)?;
    if reference.is_empty() {
        return Err(Error::Degenerate("empty image".into()));
    }
    Ok(reference
        .iter()
        .zip(test)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64)
}

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(reference: &[f64], test: &[f64]) -> Result<f64> {
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

/// Per-image min/max mapping onto `[0, 1]`. A constant image maps to zeros.
pub fn rescale_unit(img: &[f64]) -> Vec<f64> {
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; img.len()];
    }
    img.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| taps[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of two single-channel `h x w` images in `[0, 1]`, with an
/// 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(reference: &[f64], test: &[f64], h: usize, w: usize) -> Result<f64> {
    check_len(reference, test)?;
    if reference.len() != h * w {
        return Err(Error::Shape {
            expected: vec![h, w],
            got: vec![reference.len()],
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        reference.iter().zip(test).map(|(&a, &b)| f(a, b)).collect()
    };
    let mu_a = filter_valid(reference, h, w, &taps);
    let mu_b = filter_valid(test, h, w, &taps);
    let aa = filter_valid(&prod(|a, _| a * a), h, w, &taps);
    let bb = filter_valid(&prod(|_, b| b * b), h, w, &taps);
    let ab = filter_valid(&prod(|a, b| a * b), h, w, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Two-sided p-value of the paired Wilcoxon signed-rank test.
///
/// Zero differences are dropped; ties share mid-ranks. The null is
/// enumerated exactly up to 20 nonzero pairs and approximated by a normal
/// with tie and continuity corrections beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    let ranked = signed_ranks(a, b)?;
    if ranked.n <= WILCOXON_EXACT_MAX {
        Ok(ranked.exact_p())
    } else {
        Ok(ranked.normal_p())
    }
}

/// Normal-approximation p-value regardless of sample size.
pub fn wilcoxon_normal_approx(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(signed_ranks(a, b)?.normal_p())
}

/// Exactly enumerated p-value regardless of sample size (cost grows with
/// `n^3`; intended for `n` up to a few hundred).
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(signed_ranks(a, b)?.exact_p())
}

struct SignedRanks {
    n: usize,
    /// Ranks doubled so mid-ranks are integers.
    doubled: Vec<usize>,
    positive: Vec<bool>,
    tie_sizes: Vec<usize>,
}

fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks> {
    check_len(a, b)?;
    let mut d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    if d.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    if d.len() < 5 {
        return Err(Error::Degenerate(format!(
            "need at least 5 nonzero differences, got {}",
            d.len()
        )));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = d.len();
    let mut doubled = vec![0; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 share (i+1 + j+1)/2; doubled: i + j + 2
        for r in doubled.iter_mut().take(j + 1).skip(i) {
            *r = i + j + 2;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    Ok(SignedRanks {
        n,
        doubled,
        positive: d.iter().map(|v| *v > 0.0).collect(),
        tie_sizes,
    })
}

impl SignedRanks {
    fn w_plus_doubled(&self) -> usize {
        self.doubled
            .iter()
            .zip(&self.positive)
            .filter(|(_, p)| **p)
            .map(|(r, _)| r)
            .sum()
    }

    fn exact_p(&self) -> f64 {
        let max: usize = self.doubled.iter().sum();
        // counts[s] = number of sign assignments with doubled W+ = s,
        // scaled by 2^-k as ranks are added to stay in range.
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        let mut top = 0;
        for &r in &self.doubled {
            for s in (0..=top).rev() {
                let c = counts[s];
                if c != 0.0 {
                    counts[s + r] += c;
                }
            }
            top += r;
            for c in counts.iter_mut().take(top + 1) {
                *c *= 0.5;
            }
        }
        let w = self.w_plus_doubled();
        let lower: f64 = counts[..=w].iter().sum();
        let upper: f64 = counts[w..].iter().sum();
        (2.0 * lower.min(upper)).min(1.0)
    }

    fn normal_p(&self) -> f64 {
        let n = self.n as f64;
        let w = self.w_plus_doubled() as f64 / 2.0;
        let mean = n * (n + 1.0) / 4.0;
        let ties: f64 = self
            .tie_sizes
            .iter()
            .map(|&t| (t * t * t - t) as f64)
            .sum::<f64>();
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            return 1.0;
        }
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z)).min(1.0)
    }
}

/// Per-sample metrics of one predicted batch against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    /// Present for image batches only.
    pub ssim: Option<Vec<f64>>,
    /// PSNR of the MSE pooled over the whole batch.
    pub pooled_psnr: f64,
    pub p_value: Option<f64>,
}

/// Mean and sample standard deviation of the finite entries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

impl MetricReport {
    pub fn psnr_mean_std(&self) -> (f64, f64) {
        mean_std(&self.psnr)
    }

    pub fn ssim_mean_std(&self) -> Option<(f64, f64)> {
        self.ssim.as_ref().map(|s| mean_std(s))
    }

    /// CSV `index,psnr,ssim` with `#`-prefixed footer lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,psnr,ssim\n");
        for (i, p) in self.psnr.iter().enumerate() {
            let s = self.ssim.as_ref().map(|s| s[i]).unwrap_or(f64::NAN);
            writeln!(out, "{i},{p},{s}").unwrap();
        }
        let (pm, ps) = self.psnr_mean_std();
        let (sm, ss) = self.ssim_mean_std().unwrap_or((f64::NAN, f64::NAN));
        writeln!(out, "# mean,{pm},{sm}").unwrap();
        writeln!(out, "# std,{ps},{ss}").unwrap();
        writeln!(out, "# pooled_psnr,{}", self.pooled_psnr).unwrap();
        if let Some(p) = self.p_value {
            writeln!(out, "# p_value,{p}").unwrap();
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_csv().as_bytes())
    }

    /// Reads the per-sample PSNR column back from a report CSV.
    pub fn read_psnr_column(text: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let field = line
                .split(',')
                .nth(1)
                .ok_or_else(|| Error::Format(format!("report line {}: missing psnr", ln + 1)))?;
            out.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("report line {}: bad psnr `{field}`", ln + 1))
            })?);
        }
        Ok(out)
    }
}

/// Metrics of `test` against `reference` (same shape, values in `[-1, 1]`).
pub fn evaluate_batch(reference: &Tensor, test: &Tensor) -> Result<MetricReport> {
    reference.ensure_same_shape(test)?;
    let shape = reference.sample_shape().to_vec();
    let n = reference.batch();
    let image = shape.len() == 3;
    let unit = |v: &[f64]| -> Vec<f64> {
        if image {
            rescale_unit(v)
        } else {
            v.iter().map(|x| (x + 1.0) / 2.0).collect()
        }
    };
    let per = parallel::map_range(n, |i| -> Result<(f64, Option<f64>, f64)> {
        let (r, t) = (unit(reference.sample(i)), unit(test.sample(i)));
        let p = psnr(&r, &t)?;
        let sq = mse(&r, &t)? * r.len() as f64;
        let s = if image {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut acc = 0.0;
            for ch in 0..c {
                let sl = ch * h * w..(ch + 1) * h * w;
                acc += ssim(&r[sl.clone()], &t[sl], h, w)?;
            }
            Some(acc / c as f64)
        } else {
            None
        };
        Ok((p, s, sq))
    });
    let mut psnrs = Vec::with_capacity(n);
    let mut ssims = Vec::with_capacity(n);
    let mut sq_total = 0.0;
    for r in per {
        let (p, s, sq) = r?;
        psnrs.push(p);
        if let Some(s) = s {
            ssims.push(s);
        }
        sq_total += sq;
    }
    let pooled_mse = sq_total / reference.len().max(1) as f64;
    Ok(MetricReport {
        psnr: psnrs,
        ssim: image.then_some(ssims),
        pooled_psnr: if pooled_mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * pooled_mse.log10()
        },
        p_value: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let r: Vec<f64> = (0..64).map(|i| i as f64 / 100.0).collect();
        let t: Vec<f64> = r.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&r, &t).unwrap() - 20.0).abs() < 1e-9);
        let t2: Vec<f64> = r.iter().map(|v| v + 0.05).collect();
        let gain = psnr(&r, &t2).unwrap() - psnr(&r, &t).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        assert!(psnr(&r, &r[..3]).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a: Vec<f64> = (0..256).map(|i| ((i as f64) * 0.37).sin() * 0.5 + 0.5).collect();
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!((ssim(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, 16, 16).unwrap();
        let ba = ssim(&b, &a, 16, 16).unwrap();
        assert!(ab < 1.0);
        assert!((ab - ba).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_window_guard() {
        let a = vec![0.5; 100];
        assert!(matches!(ssim(&a, &a, 10, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn wilcoxon_all_positive_six() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        assert!((wilcoxon_signed_rank(&a, &b).unwrap() - 0.03125).abs() < 1e-15);
        assert!((wilcoxon_signed_rank(&b, &a).unwrap() - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_degenerate() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::Degenerate(_))));
        assert!(wilcoxon_signed_rank(&a[..4], &[0.0; 4]).is_err());
        assert!(wilcoxon_signed_rank(&a, &[0.0; 4]).is_err());
    }

    // Brute force over all 2^n sign flips with mid-ranks.
    fn brute_p(d: &[f64]) -> f64 {
        let mut abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let rank = |v: f64| {
            let lo = abs.iter().position(|x| *x == v).unwrap();
            let hi = abs.iter().rposition(|x| *x == v).unwrap();
            (lo + hi + 2) as f64 / 2.0
        };
        let ranks: Vec<f64> = d.iter().map(|v| rank(v.abs())).collect();
        let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let n = d.len();
        let (mut le, mut ge) = (0usize, 0usize);
        for mask in 0..(1u64 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                le += 1;
            }
            if s >= w - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64) / total).min(1.0)
    }

    #[test]
    fn wilcoxon_matches_enumeration_with_ties() {
        let d = [0.5, -1.0, 1.0, 2.0, -2.0, 2.0, 3.5, 0.25, -0.25, 4.0];
        let zeros = [0.0; 10];
        let p = wilcoxon_signed_rank(&d, &zeros).unwrap();
        assert!((p - brute_p(&d)).abs() < 1e-12);
    }

    #[test]
    fn rescale_handles_constant() {
        assert_eq!(rescale_unit(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(rescale_unit(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn report_csv_round_trips_psnr() {
        let r = Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.3).sin() * 0.9);
        let t = r.map(|v| v * 0.8);
        let rep = evaluate_batch(&r, &t).unwrap();
        assert!(rep.ssim.is_none());
        let csv = rep.to_csv();
        let back = MetricReport::read_psnr_column(&csv).unwrap();
        assert_eq!(back, rep.psnr);
    }
}
