//! Animated GIF89a export: a global 256-color median-cut palette over all
//! frames, infinite loop flag, frame delay round(100/fps) centiseconds.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::Image;

/// Median-cut color quantization. Returns up to `max_colors` RGB entries;
/// deterministic for a given input.
pub fn median_cut(pixels: &[[u8; 3]], max_colors: usize) -> Vec<[u8; 3]> {
    assert!(max_colors >= 1);
    if pixels.is_empty() {
        return vec![[0, 0, 0]];
    }
    let mut boxes: Vec<Vec<[u8; 3]>> = vec![pixels.to_vec()];
    while boxes.len() < max_colors {
        // split the box with the widest channel range; count breaks ties
        let mut split_at: Option<(usize, usize, u8)> = None; // (box, channel, range)
        for (bi, b) in boxes.iter().enumerate() {
            if b.len() < 2 {
                continue;
            }
            for c in 0..3 {
                let (mut lo, mut hi) = (255u8, 0u8);
                for p in b {
                    lo = lo.min(p[c]);
                    hi = hi.max(p[c]);
                }
                let range = hi - lo;
                let better = match split_at {
                    None => range > 0,
                    Some((sbi, _, srange)) => {
                        range > srange || (range == srange && b.len() > boxes[sbi].len())
                    }
                };
                if better && range > 0 {
                    split_at = Some((bi, c, range));
                }
            }
        }
        let Some((bi, channel, _)) = split_at else {
            break; // every box is a single color
        };
        let mut b = boxes.swap_remove(bi);
        b.sort_unstable_by_key(|p| (p[channel], p[0], p[1], p[2]));
        let half = b.len() / 2;
        let right = b.split_off(half);
        boxes.push(b);
        boxes.push(right);
    }
    let mut palette: Vec<[u8; 3]> = boxes
        .iter()
        .map(|b| {
            let n = b.len() as u64;
            let mut acc = [0u64; 3];
            for p in b {
                for c in 0..3 {
                    acc[c] += p[c] as u64;
                }
            }
            [
                ((acc[0] + n / 2) / n) as u8,
                ((acc[1] + n / 2) / n) as u8,
                ((acc[2] + n / 2) / n) as u8,
            ]
        })
        .collect();
    palette.sort_unstable();
    palette.dedup();
    palette
}

fn nearest(palette: &[[u8; 3]], cache: &mut HashMap<[u8; 3], u8>, p: [u8; 3]) -> u8 {
    if let Some(i) = cache.get(&p) {
        return *i;
    }
    let mut best = 0usize;
    let mut best_d = u32::MAX;
    for (i, q) in palette.iter().enumerate() {
        let d = (0..3).fold(0u32, |acc, c| {
            let dc = p[c] as i32 - q[c] as i32;
            acc + (dc * dc) as u32
        });
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    cache.insert(p, best as u8);
    best as u8
}

/// Frame delay in centiseconds for a playback rate.
pub fn frame_delay_centis(fps: f64) -> u16 {
    (100.0 / fps).round().max(1.0) as u16
}

/// Write an infinitely looping GIF with a shared median-cut palette.
pub fn export_gif(frames: &[Image], path: &Path, fps: f64) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Validation("gif export needs at least one frame".into()));
    }
    if fps <= 0.0 {
        return Err(Error::Validation(format!("fps must be positive, got {}", fps)));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    for f in frames {
        if f.width != w || f.height != h {
            return Err(Error::Shape(format!(
                "gif frames must share extents, got {}x{} vs {}x{}",
                f.width, f.height, w, h
            )));
        }
    }

    let mut all_pixels = Vec::with_capacity(frames.len() * w * h);
    let frame_bytes: Vec<Vec<u8>> = frames.iter().map(|f| f.to_bytes()).collect();
    for bytes in &frame_bytes {
        for px in bytes.chunks_exact(3) {
            all_pixels.push([px[0], px[1], px[2]]);
        }
    }
    let palette = median_cut(&all_pixels, 256);
    let palette_flat: Vec<u8> = palette.iter().flat_map(|p| [p[0], p[1], p[2]]).collect();

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = gif::Encoder::new(file, w as u16, h as u16, &palette_flat)
        .map_err(|e| Error::Format(format!("{}: gif: {}", path.display(), e)))?;
    encoder
        .set_repeat(gif::Repeat::Infinite)
        .map_err(|e| Error::Format(format!("{}: gif loop flag: {}", path.display(), e)))?;

    let delay = frame_delay_centis(fps);
    let mut cache = HashMap::new();
    for bytes in &frame_bytes {
        let indices: Vec<u8> = bytes
            .chunks_exact(3)
            .map(|px| nearest(&palette, &mut cache, [px[0], px[1], px[2]]))
            .collect();
        let frame = gif::Frame {
            width: w as u16,
            height: h as u16,
            buffer: Cow::Owned(indices),
            delay,
            ..Default::default()
        };
        encoder
            .write_frame(&frame)
            .map_err(|e| Error::Format(format!("{}: gif frame: {}", path.display(), e)))?;
    }
    Ok(())
}
