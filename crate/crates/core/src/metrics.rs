//! Pixel-level (MAE/MSE/RMSE/PSNR) and structural (SSIM) similarity.
//!
//! Values are computed in f64. PSNR of (near-)identical images is reported
//! as a capped 99 dB sentinel so reports stay serializable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub psnr: f64,
}

/// Means over all values of |a-b| and (a-b)^2, with rmse = sqrt(mse) and
/// psnr = 10*log10(peak^2 / mse), capped at 99 dB.
pub fn pixel_metrics(a: &[f32], b: &[f32], peak: f64) -> Result<PixelMetrics> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "metric operands disagree: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Validation("metrics need at least one value".into()));
    }
    if peak <= 0.0 {
        return Err(Error::Validation(format!("peak must be positive, got {}", peak)));
    }
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    let n = a.len() as f64;
    let mae = abs_sum / n;
    let mse = sq_sum / n;
    let rmse = mse.sqrt();
    let psnr = if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    };
    Ok(PixelMetrics {
        mae,
        mse,
        rmse,
        psnr,
    })
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Valid-mode separable Gaussian filter; output is (h-window+1) x (w-window+1).
fn gaussian_filter_valid(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let oh = h - kw + 1;
    // horizontal
    let mut tmp = vec![0.0f64; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical
    let mut out = vec![0.0f64; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM of one channel plane with Gaussian-weighted moments.
fn ssim_plane(a: &[f32], b: &[f32], w: usize, h: usize, peak: f64) -> f64 {
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let af: Vec<f64> = a.iter().map(|v| *v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|v| *v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();

    let mu_a = gaussian_filter_valid(&af, w, h, &kernel);
    let mu_b = gaussian_filter_valid(&bf, w, h, &kernel);
    let m_aa = gaussian_filter_valid(&aa, w, h, &kernel);
    let m_bb = gaussian_filter_valid(&bb, w, h, &kernel);
    let m_ab = gaussian_filter_valid(&ab, w, h, &kernel);

    let c1 = (SSIM_K1 * peak) * (SSIM_K1 * peak);
    let c2 = (SSIM_K2 * peak) * (SSIM_K2 * peak);
    let mut acc = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    acc / mu_a.len() as f64
}

/// Mean SSIM over channel planes. Images must be at least window-sized.
pub fn ssim(a: &[&[f32]], b: &[&[f32]], width: usize, height: usize, peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "ssim needs matching non-empty plane sets, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "ssim needs images of at least {0}x{0}, got {1}x{2}",
            SSIM_WINDOW, width, height
        )));
    }
    for (pa, pb) in a.iter().zip(b) {
        if pa.len() != width * height || pb.len() != width * height {
            return Err(Error::Shape(format!(
                "ssim plane length {} does not match {}x{}",
                pa.len(),
                width,
                height
            )));
        }
    }
    let mut acc = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        acc += ssim_plane(pa, pb, width, height, peak);
    }
    Ok(acc / a.len() as f64)
}

/// Per-frame metrics plus aggregate means.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: AggregateMetrics,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct AggregateMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let n = frames.len().max(1) as f64;
        let mut agg = AggregateMetrics::default();
        for f in &frames {
            agg.mae += f.mae;
            agg.mse += f.mse;
            agg.rmse += f.rmse;
            agg.psnr += f.psnr;
            agg.ssim += f.ssim;
        }
        agg.mae /= n;
        agg.mse /= n;
        agg.rmse /= n;
        agg.psnr /= n;
        agg.ssim /= n;
        MetricReport {
            per_frame: frames,
            aggregate: agg,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,mae,mse,rmse,psnr,ssim\n");
        for f in &self.per_frame {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                f.frame, f.mae, f.mse, f.rmse, f.psnr, f.ssim
            ));
        }
        s.push_str(&format!(
            "aggregate,{},{},{},{},{}\n",
            self.aggregate.mae,
            self.aggregate.mse,
            self.aggregate.rmse,
            self.aggregate.psnr,
            self.aggregate.ssim
        ));
        s
    }
}
