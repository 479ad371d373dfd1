//! Global loop detection over a frame sequence.
//!
//! The seam cost of a candidate (start s, period p) combines the position
//! mismatch of the wrap frames and, weighted 0.5, the mismatch one step
//! later (a one-step velocity term that suppresses false loops at motion
//! extremes): C(s, p) = mean[(F_s - F_{s+p})^2 + 0.5 (F_{s+1} - F_{s+p+1})^2].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{FrameSequence, Image};

pub const VELOCITY_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSpec {
    pub start: usize,
    pub period: usize,
    pub seam_cost: f64,
}

fn mean_sq_diff(a: &Image, b: &Image) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc / a.data().len() as f64
}

/// Seam cost of one candidate; the velocity term is included only when the
/// successor pair exists.
pub fn seam_cost(frames: &[Image], start: usize, period: usize) -> f64 {
    let mut cost = mean_sq_diff(&frames[start], &frames[start + period]);
    if start + period + 1 < frames.len() {
        cost += VELOCITY_WEIGHT * mean_sq_diff(&frames[start + 1], &frames[start + period + 1]);
    }
    cost
}

/// Exhaustive search over the valid (start, period) grid; ties break toward
/// the smallest period, then the smallest start.
pub fn find_loop(frames: &[Image], p_min: usize, p_max: usize) -> Result<LoopSpec> {
    if p_min < 2 {
        return Err(Error::Validation(format!("minimum period must be >= 2, got {}", p_min)));
    }
    if p_max < p_min {
        return Err(Error::Validation(format!(
            "period range empty: [{}, {}]",
            p_min, p_max
        )));
    }
    if frames.len() < p_min + 1 {
        return Err(Error::Validation(format!(
            "sequence of {} frames too short for minimum period {}",
            frames.len(),
            p_min
        )));
    }
    for f in frames.iter().skip(1) {
        if f.width != frames[0].width || f.height != frames[0].height {
            return Err(Error::Shape(format!(
                "frame extents disagree: {}x{} vs {}x{}",
                f.width, f.height, frames[0].width, frames[0].height
            )));
        }
    }
    let n = frames.len();
    let hi = p_max.min(n - 1);
    let candidates: Vec<(usize, usize)> = (p_min..=hi)
        .flat_map(|p| (0..n - p).map(move |s| (s, p)))
        .collect();
    let costs: Vec<f64> = candidates
        .par_iter()
        .map(|(s, p)| seam_cost(frames, *s, *p))
        .collect();
    let mut best = 0;
    for i in 1..candidates.len() {
        // ordering of candidates is (small p first, then small s), so a
        // strict < keeps the declared tie-break
        if costs[i] < costs[best] {
            best = i;
        }
    }
    Ok(LoopSpec {
        start: candidates[best].0,
        period: candidates[best].1,
        seam_cost: costs[best],
    })
}

/// Cut the loop out and cross-fade the last K frames toward the content at
/// the same loop phase one period earlier (which is the first K frames'
/// content for an exact loop); K = 0 returns the raw slice.
pub fn extract_loop(frames: &[Image], spec: &LoopSpec, crossfade: usize) -> Result<FrameSequence> {
    let (s, p) = (spec.start, spec.period);
    if s + p > frames.len() {
        return Err(Error::Validation(format!(
            "loop [{}, {}+{}) exceeds the {} available frames",
            s,
            s,
            p,
            frames.len()
        )));
    }
    if crossfade > 0 && crossfade >= p.div_ceil(2) {
        return Err(Error::Validation(format!(
            "crossfade {} must be shorter than half the period {}",
            crossfade, p
        )));
    }
    let mut out: Vec<Image> = frames[s..s + p].to_vec();
    for j in 0..crossfade {
        let i = p - crossfade + j;
        let w = (j + 1) as f32 / (crossfade + 1) as f32;
        // partner at the same phase one period away; prefer the earlier one
        let partner = if s + i >= p {
            Some(&frames[s + i - p])
        } else if s + i + p < frames.len() {
            Some(&frames[s + i + p])
        } else {
            None
        };
        if let Some(partner) = partner {
            let current = &frames[s + i];
            for (o, (a, b)) in out[i]
                .data_mut()
                .iter_mut()
                .zip(current.data().iter().zip(partner.data()))
            {
                *o = (1.0 - w) * *a + w * *b;
            }
        }
    }
    Ok(FrameSequence::new(out, p as u32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_frame(w: usize, h: usize, value: f32) -> Image {
        let mut img = Image::new(w, h);
        img.data_mut().iter_mut().for_each(|v| *v = value);
        img
    }

    fn periodic_frames(n: usize, period: usize) -> Vec<Image> {
        (0..n)
            .map(|t| const_frame(4, 3, (t % period) as f32 / 10.0))
            .collect()
    }

    #[test]
    fn recovers_constructed_period_seven() {
        let frames = periodic_frames(40, 7);
        let spec = find_loop(&frames, 2, 20).unwrap();
        assert_eq!(spec.period, 7);
        assert_eq!(spec.seam_cost, 0.0);
    }

    #[test]
    fn constant_sequence_hits_tie_break() {
        let frames: Vec<Image> = (0..12).map(|_| const_frame(3, 3, 0.4)).collect();
        let spec = find_loop(&frames, 2, 10).unwrap();
        assert_eq!(spec.period, 2);
        assert_eq!(spec.start, 0);
        assert_eq!(spec.seam_cost, 0.0);
    }

    #[test]
    fn smallest_period_among_multiples() {
        let frames = periodic_frames(40, 5);
        let spec = find_loop(&frames, 2, 20).unwrap();
        // candidates 5, 10, 15, 20 all cost zero; 5 wins
        assert_eq!(spec.period, 5);
        assert_eq!(seam_cost(&frames, 0, 10), 0.0);
    }

    #[test]
    fn cost_zero_iff_seam_pairs_identical() {
        let mut frames = periodic_frames(20, 6);
        assert_eq!(seam_cost(&frames, 1, 6), 0.0);
        frames[7].data_mut()[0] += 0.5; // breaks F_{1+6}
        assert!(seam_cost(&frames, 1, 6) > 0.0);
    }

    #[test]
    fn invariant_to_constant_shift() {
        let frames = periodic_frames(30, 4);
        let shifted: Vec<Image> = frames
            .iter()
            .map(|f| {
                let mut g = f.clone();
                g.data_mut().iter_mut().for_each(|v| *v += 0.17);
                g
            })
            .collect();
        let a = find_loop(&frames, 2, 12).unwrap();
        let b = find_loop(&shifted, 2, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic() {
        let frames = periodic_frames(25, 9);
        let a = find_loop(&frames, 2, 15).unwrap();
        let b = find_loop(&frames, 2, 15).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_sequence_rejected() {
        let frames = periodic_frames(5, 3);
        assert!(matches!(
            find_loop(&frames, 5, 10),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn extract_zero_crossfade_is_raw_slice() {
        let frames = periodic_frames(20, 6);
        let spec = LoopSpec {
            start: 2,
            period: 6,
            seam_cost: 0.0,
        };
        let looped = extract_loop(&frames, &spec, 0).unwrap();
        assert_eq!(looped.frames.len(), 6);
        for (i, f) in looped.frames.iter().enumerate() {
            assert_eq!(f, &frames[2 + i]);
        }
    }

    #[test]
    fn crossfade_noop_on_exact_loop() {
        let frames = periodic_frames(20, 6);
        let spec = LoopSpec {
            start: 6,
            period: 6,
            seam_cost: 0.0,
        };
        let looped = extract_loop(&frames, &spec, 1).unwrap();
        for (i, f) in looped.frames.iter().enumerate() {
            for (a, b) in f.data().iter().zip(frames[6 + i].data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crossfade_on_ramp_matches_convex_combination() {
        // linear ramp frames F_t = t * 0.05
        let frames: Vec<Image> = (0..20).map(|t| const_frame(2, 2, t as f32 * 0.05)).collect();
        let spec = LoopSpec {
            start: 8,
            period: 8,
            seam_cost: 0.0,
        };
        let looped = extract_loop(&frames, &spec, 2).unwrap();
        // tail indices 6, 7 blend with frames one period earlier (6, 7)
        for (j, i) in [6usize, 7usize].iter().enumerate() {
            let w = (j + 1) as f32 / 3.0;
            let expect = (1.0 - w) * frames[8 + i].data()[0] + w * frames[8 + i - 8].data()[0];
            let got = looped.frames[*i].data()[0];
            assert!(
                (got - expect).abs() < 1e-6,
                "frame {}: {} vs {}",
                i,
                got,
                expect
            );
        }
        // head untouched
        assert_eq!(looped.frames[0].data()[0], frames[8].data()[0]);
    }

    #[test]
    fn oversized_crossfade_rejected() {
        let frames = periodic_frames(20, 6);
        let spec = LoopSpec {
            start: 0,
            period: 6,
            seam_cost: 0.0,
        };
        assert!(matches!(
            extract_loop(&frames, &spec, 3),
            Err(Error::Validation(_))
        ));
    }
}
