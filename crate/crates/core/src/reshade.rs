//! Normal-guided synthesis: split the input image into reflectance and
//! shading, fit a directional-plus-ambient light to the input normals,
//! re-shade animated normals and composite through the region mask.
//!
//! Shading model: S = max(0, -N.l) + delta, with the light magnitude folded
//! into |l| and delta >= 0 the ambient floor.

use rayon::prelude::*;

use crate::encoding::{build_code, EncodingConfig, WindSpec};
use crate::error::{Error, Result};
use crate::imageio::{FrameSequence, Image, Mask, NormalMap};
use crate::model::CycleNet;

/// Rec. 709 luma weights for the luminance split.
const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];
/// Shading floor in the decomposition, guards the reflectance division.
pub const SHADING_EPS: f32 = 1e-3;

const GRID_DIRECTIONS: usize = 64;
const GN_ITERATIONS: usize = 30;
const GN_STEP_HALVINGS: usize = 20;

/// Directional light of arbitrary magnitude plus a non-negative ambient term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightModel {
    pub l: [f64; 3],
    pub ambient: f64,
}

impl LightModel {
    pub fn magnitude(&self) -> f64 {
        (self.l[0] * self.l[0] + self.l[1] * self.l[1] + self.l[2] * self.l[2]).sqrt()
    }

    /// Angle to another light's direction, radians; zero-length lights
    /// compare as aligned.
    pub fn direction_angle_to(&self, other: &LightModel) -> f64 {
        let (a, b) = (self.magnitude(), other.magnitude());
        if a < 1e-12 || b < 1e-12 {
            return 0.0;
        }
        let dot = self.l[0] * other.l[0] + self.l[1] * other.l[1] + self.l[2] * other.l[2];
        (dot / (a * b)).clamp(-1.0, 1.0).acos()
    }
}

/// Scalar shading layer, >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadingMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl ShadingMap {
    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "shading data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(ShadingMap {
            width,
            height,
            data,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Luminance split: S = luma(I) clamped to >= eps, R = I / S clipped to
/// [0, 1]. Recomposition S*R reproduces I up to that clipping.
pub fn decompose(image: &Image) -> (Image, ShadingMap) {
    let (w, h) = (image.width, image.height);
    let mut shading = vec![0.0f32; w * h];
    let mut reflectance = Image::new(w, h);
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        let s = (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]).max(SHADING_EPS);
        shading[i] = s;
        for (r, v) in reflectance.data_mut()[i * 3..i * 3 + 3].iter_mut().zip(px) {
            *r = (v / s).clamp(0.0, 1.0);
        }
    }
    (
        reflectance,
        ShadingMap {
            width: w,
            height: h,
            data: shading,
        },
    )
}

/// clip(S * R), per channel.
pub fn recompose(reflectance: &Image, shading: &ShadingMap) -> Image {
    let (w, h) = (reflectance.width, reflectance.height);
    let mut out = Image::new(w, h);
    for i in 0..w * h {
        for c in 0..3 {
            out.data_mut()[i * 3 + c] =
                (reflectance.data()[i * 3 + c] * shading.data[i]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Elementwise S = max(0, -N.l) + delta.
pub fn shade(normals: &NormalMap, light: &LightModel) -> ShadingMap {
    let (w, h) = (normals.width, normals.height);
    let mut data = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let n = normals.get(x, y);
            let dot = n[0] as f64 * light.l[0] + n[1] as f64 * light.l[1] + n[2] as f64 * light.l[2];
            data[y * w + x] = ((-dot).max(0.0) + light.ambient) as f32;
        }
    }
    ShadingMap {
        width: w,
        height: h,
        data,
    }
}

/// Masked pixels come from `synth`, the rest are the untouched original.
pub fn composite(original: &Image, synth: &Image, mask: &Mask) -> Image {
    let mut out = original.clone();
    for y in 0..original.height {
        for x in 0..original.width {
            if mask.get(x, y) {
                out.set_pixel(x, y, synth.pixel(x, y));
            }
        }
    }
    out
}

/// Result of the light fit.
#[derive(Debug, Clone)]
pub struct LightFit {
    pub light: LightModel,
    /// Root-mean-square residual of the shading model over the mask.
    pub rms_residual: f64,
    /// Largest absolute residual over the mask.
    pub max_residual: f64,
    /// Ambient-only fallback was taken (all normals alike).
    pub degenerate: bool,
    /// Residual after each accepted Gauss-Newton iterate (non-increasing).
    pub gn_residuals: Vec<f64>,
}

fn residual_stats(pairs: &[([f64; 3], f64)], l: &[f64; 3], ambient: f64) -> (f64, f64) {
    let mut sq = 0.0;
    let mut worst = 0.0f64;
    for (n, s) in pairs {
        let dot = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
        let r = (-dot).max(0.0) + ambient - s;
        sq += r * r;
        worst = worst.max(r.abs());
    }
    ((sq / pairs.len() as f64).sqrt(), worst)
}

/// 64 unit directions on the z <= 0 hemisphere: the exact pole plus a
/// Fibonacci spiral.
fn hemisphere_grid() -> Vec<[f64; 3]> {
    let mut dirs = Vec::with_capacity(GRID_DIRECTIONS);
    dirs.push([0.0, 0.0, -1.0]);
    let n = GRID_DIRECTIONS - 1;
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    for i in 0..n {
        let z = -((i as f64 + 0.5) / n as f64);
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        dirs.push([r * phi.cos(), r * phi.sin(), z]);
    }
    dirs
}

/// Closed-form least squares of s ~ alpha * f + delta with alpha, delta >= 0,
/// where f = max(0, -n.u) for a fixed direction u.
fn fit_intensity_ambient(pairs: &[([f64; 3], f64)], u: &[f64; 3]) -> (f64, f64, f64) {
    let n = pairs.len() as f64;
    let (mut sf, mut sff, mut ss, mut sfs) = (0.0, 0.0, 0.0, 0.0);
    for (nv, s) in pairs {
        let f = (-(nv[0] * u[0] + nv[1] * u[1] + nv[2] * u[2])).max(0.0);
        sf += f;
        sff += f * f;
        ss += s;
        sfs += f * s;
    }
    let det = n * sff - sf * sf;
    let (mut alpha, mut delta) = if det.abs() < 1e-12 {
        (0.0, ss / n)
    } else {
        let a = (n * sfs - sf * ss) / det;
        let d = (ss - a * sf) / n;
        (a, d)
    };
    if alpha < 0.0 {
        alpha = 0.0;
        delta = ss / n;
    }
    if delta < 0.0 {
        delta = 0.0;
        alpha = if sff > 1e-12 { (sfs / sff).max(0.0) } else { 0.0 };
    }
    let l = [alpha * u[0], alpha * u[1], alpha * u[2]];
    let (rms, _) = residual_stats(pairs, &l, delta);
    (alpha, delta, rms)
}

/// Solve (A + mu*I) x = b for a symmetric 4x4 system, partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve4(a: &[[f64; 4]; 4], b: &[f64; 4], mu: f64) -> Option<[f64; 4]> {
    let mut m = [[0.0f64; 5]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = a[i][j] + if i == j { mu } else { 0.0 };
        }
        m[i][4] = b[i];
    }
    for col in 0..4 {
        let (mut best, mut best_abs) = (col, m[col][col].abs());
        for row in col + 1..4 {
            if m[row][col].abs() > best_abs {
                best = row;
                best_abs = m[row][col].abs();
            }
        }
        if best_abs < 1e-15 {
            return None;
        }
        m.swap(col, best);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for j in col..5 {
                m[row][j] -= f * m[col][j];
            }
        }
    }
    let mut x = [0.0f64; 4];
    for i in (0..4).rev() {
        let mut acc = m[i][4];
        for j in i + 1..4 {
            acc -= m[i][j] * x[j];
        }
        x[i] = acc / m[i][i];
    }
    Some(x)
}

/// Fit (l, delta) minimizing the masked squared shading error: a coarse grid
/// over hemisphere directions with closed-form (intensity, ambient) per
/// direction, refined by damped Gauss-Newton with step halving and delta
/// projected to >= 0. Fields of identical normals fall back to ambient-only.
pub fn fit_light(normals: &NormalMap, shading: &ShadingMap, mask: &Mask) -> Result<LightFit> {
    if normals.width != shading.width
        || normals.height != shading.height
        || normals.width != mask.width
        || normals.height != mask.height
    {
        return Err(Error::Shape(format!(
            "fit_light extents disagree: normals {}x{}, shading {}x{}, mask {}x{}",
            normals.width,
            normals.height,
            shading.width,
            shading.height,
            mask.width,
            mask.height
        )));
    }
    let mut pairs = Vec::new();
    for y in 0..normals.height {
        for x in 0..normals.width {
            if mask.get(x, y) {
                let n = normals.get(x, y);
                pairs.push((
                    [n[0] as f64, n[1] as f64, n[2] as f64],
                    shading.get(x, y) as f64,
                ));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Validation("fit_light mask is empty".into()));
    }

    // degenerate: fewer than two distinct normal directions
    let first = pairs[0].0;
    let distinct = pairs.iter().any(|(n, _)| {
        (n[0] - first[0]).abs() > 1e-6
            || (n[1] - first[1]).abs() > 1e-6
            || (n[2] - first[2]).abs() > 1e-6
    });
    if !distinct {
        let ambient = pairs.iter().map(|(_, s)| s).sum::<f64>() / pairs.len() as f64;
        let light = LightModel {
            l: [0.0; 3],
            ambient,
        };
        let (rms, max_r) = residual_stats(&pairs, &light.l, ambient);
        return Ok(LightFit {
            light,
            rms_residual: rms,
            max_residual: max_r,
            degenerate: true,
            gn_residuals: Vec::new(),
        });
    }

    // stage 1: coarse grid; ties (within 1e-9 relative) prefer the smaller
    // ambient, i.e. the most directional explanation
    let mut best: Option<([f64; 3], f64, f64)> = None; // (l, delta, rms)
    for u in hemisphere_grid() {
        let (alpha, delta, rms) = fit_intensity_ambient(&pairs, &u);
        let cand = ([alpha * u[0], alpha * u[1], alpha * u[2]], delta, rms);
        best = Some(match best {
            None => cand,
            Some(cur) => {
                let tol = 1e-9 * (1.0 + cur.2);
                if rms < cur.2 - tol || (rms < cur.2 + tol && delta < cur.1) {
                    cand
                } else {
                    cur
                }
            }
        });
    }
    let (mut l, mut ambient, mut rms) = best.expect("non-empty grid");

    // stage 2: damped Gauss-Newton on (l, delta)
    let mut gn_residuals = vec![rms];
    for _ in 0..GN_ITERATIONS {
        let mut jtj = [[0.0f64; 4]; 4];
        let mut jtr = [0.0f64; 4];
        for (n, s) in &pairs {
            let dot = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
            let active = -dot > 0.0;
            let r = (-dot).max(0.0) + ambient - s;
            let j = if active {
                [-n[0], -n[1], -n[2], 1.0]
            } else {
                [0.0, 0.0, 0.0, 1.0]
            };
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut max_diag = 0.0f64;
        for (i, row) in jtj.iter().enumerate() {
            max_diag = max_diag.max(row[i].abs());
        }
        let mu = 1e-9 * max_diag.max(1.0);
        let Some(step) = solve4(&jtj, &[-jtr[0], -jtr[1], -jtr[2], -jtr[3]], mu) else {
            break;
        };

        // step halving on residual increase
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..GN_STEP_HALVINGS {
            let cand_l = [
                l[0] + scale * step[0],
                l[1] + scale * step[1],
                l[2] + scale * step[2],
            ];
            let cand_amb = (ambient + scale * step[3]).max(0.0);
            let (cand_rms, _) = residual_stats(&pairs, &cand_l, cand_amb);
            if cand_rms <= rms {
                l = cand_l;
                ambient = cand_amb;
                rms = cand_rms;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        gn_residuals.push(rms);
        let step_norm =
            (step[0] * step[0] + step[1] * step[1] + step[2] * step[2] + step[3] * step[3]).sqrt();
        if scale * step_norm < 1e-12 {
            break;
        }
    }

    let light = LightModel { l, ambient };
    let (rms_final, max_r) = residual_stats(&pairs, &l, ambient);
    Ok(LightFit {
        light,
        rms_residual: rms_final,
        max_residual: max_r,
        degenerate: false,
        gn_residuals,
    })
}

/// Prepared reshading pipeline for one input image.
pub struct Reshader<'a> {
    net: &'a CycleNet,
    encoding: EncodingConfig,
    wind: WindSpec,
    original: &'a Image,
    anchor: &'a NormalMap,
    mask: &'a Mask,
    pub reflectance: Image,
    pub fit: LightFit,
}

impl<'a> Reshader<'a> {
    pub fn new(
        net: &'a CycleNet,
        original: &'a Image,
        anchor: &'a NormalMap,
        mask: &'a Mask,
        wind: WindSpec,
        period: u32,
        harmonics: usize,
    ) -> Result<Self> {
        if original.width != anchor.width
            || original.height != anchor.height
            || original.width != mask.width
            || original.height != mask.height
        {
            return Err(Error::Shape(format!(
                "image {}x{}, normals {}x{} and mask {}x{} must agree",
                original.width,
                original.height,
                anchor.width,
                anchor.height,
                mask.width,
                mask.height
            )));
        }
        let encoding = EncodingConfig::new(period, harmonics)?;
        if encoding.code_dim() != net.config.code_dim {
            return Err(Error::Validation(format!(
                "encoding dimension {} does not match model code_dim {}",
                encoding.code_dim(),
                net.config.code_dim
            )));
        }
        let (reflectance, shading) = decompose(original);
        let fit = fit_light(anchor, &shading, mask)?;
        Ok(Reshader {
            net,
            encoding,
            wind,
            original,
            anchor,
            mask,
            reflectance,
            fit,
        })
    }

    /// Re-shade a given normal map and composite over the original.
    pub fn reshade_with_normals(&self, normals: &NormalMap) -> Image {
        let shading = shade(normals, &self.fit.light);
        let synth = recompose(&self.reflectance, &shading);
        composite(self.original, &synth, self.mask)
    }

    /// Render the frame at residual time t (frames anchor on the input
    /// normal map, so the loop closes by construction).
    pub fn frame_at(&self, t: f64) -> Result<Image> {
        let code = build_code(t, &self.encoding, &self.wind)?;
        let normals = self.net.infer(self.anchor, &code)?;
        Ok(self.reshade_with_normals(&normals))
    }

    /// All frames of one loop, parallel over t.
    pub fn animate(&self) -> Result<FrameSequence> {
        let period = self.encoding.period;
        let frames: Vec<Image> = (0..period)
            .into_par_iter()
            .map(|t| self.frame_at(t as f64))
            .collect::<Result<_>>()?;
        Ok(FrameSequence::new(frames, period))
    }
}

/// One-call animation of a still image (the top-level pipeline operation).
#[allow(clippy::too_many_arguments)]
pub fn animate(
    net: &CycleNet,
    image: &Image,
    anchor: &NormalMap,
    mask: &Mask,
    wind: WindSpec,
    period: u32,
    harmonics: usize,
) -> Result<FrameSequence> {
    Reshader::new(net, image, anchor, mask, wind, period, harmonics)?.animate()
}
