//! Image, mask and normal-map containers plus their 8-bit PNG codecs.
//!
//! Normal maps use the usual RGB convention: c = round(255 * (n + 1) / 2)
//! per component, decoded as n = 2c/255 - 1 followed by renormalization.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image, interleaved f32 in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image data length {} does not match {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar channel copies (for windowed metrics).
    pub fn to_planes(&self) -> [Vec<f32>; 3] {
        let n = self.width * self.height;
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            planes[0][i] = px[0];
            planes[1][i] = px[1];
            planes[2][i] = px[2];
        }
        planes
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (width, height, rgb) = read_png_rgb8(path)?;
        Ok(Image {
            width,
            height,
            data: rgb.iter().map(|b| *b as f32 / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Rgb,
            &self.to_bytes(),
        )
    }
}

/// Binary region mask. Stored as 8-bit gray PNG; > 127 means inside.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, inside: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![inside; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, inside: bool) {
        self.data[y * self.width + x] = inside;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_inside(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// [1, 1, H, W] tensor of 0/1 values.
    pub fn to_tensor1(&self) -> Tensor {
        let data = self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("mask tensor")
    }

    /// [1, C, H, W] tensor with the mask replicated across channels.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let plane: Vec<f32> = self.data.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        let mut data = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Tensor::new(vec![1, channels, self.height, self.width], data).expect("mask tensor")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (width, height, gray) = read_png_gray8(path)?;
        Ok(Mask {
            width,
            height,
            data: gray.iter().map(|v| *v > 127).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }
}

/// H x W grid of unit 3-vectors, stored planar (3 channel planes).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl NormalMap {
    /// Flat map: every pixel (0, 0, 1).
    pub fn flat(width: usize, height: usize) -> Self {
        let n = width * height;
        let mut data = vec![0.0; 3 * n];
        data[2 * n..].iter_mut().for_each(|v| *v = 1.0);
        NormalMap {
            width,
            height,
            data,
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "normal map data length {} does not match 3x{}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(NormalMap {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f32; 3]) {
        let n = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = v[0];
        self.data[n + i] = v[1];
        self.data[2 * n + i] = v[2];
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel planes (x, y, z), each height*width long.
    pub fn planes(&self) -> [&[f32]; 3] {
        let n = self.width * self.height;
        [
            &self.data[..n],
            &self.data[n..2 * n],
            &self.data[2 * n..],
        ]
    }

    /// [1, 3, H, W] tensor view of the map.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone())
            .expect("normal tensor shape")
    }

    /// Renormalize a raw [1, 3, H, W] prediction to unit vectors. Pixels with
    /// a vanishing norm fall back to (0, 0, 1).
    pub fn from_raw_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!(
                "expected [1, 3, H, W] prediction, got {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let src = t.data();
        let mut data = vec![0.0f32; 3 * plane];
        for i in 0..plane {
            let (x, y, z) = (src[i], src[plane + i], src[2 * plane + i]);
            let norm = (x * x + y * y + z * z).sqrt();
            if norm < 1e-6 {
                data[2 * plane + i] = 1.0;
            } else {
                data[i] = x / norm;
                data[plane + i] = y / norm;
                data[2 * plane + i] = z / norm;
            }
        }
        Ok(NormalMap {
            width: w,
            height: h,
            data,
        })
    }

    /// Max deviation of per-pixel norms from 1, optionally only inside a mask.
    pub fn max_unit_norm_error(&self, mask: Option<&Mask>) -> f32 {
        let n = self.width * self.height;
        let mut worst = 0.0f32;
        for i in 0..n {
            if let Some(m) = mask {
                if !m.data()[i] {
                    continue;
                }
            }
            let (x, y, z) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
            let err = ((x * x + y * y + z * z).sqrt() - 1.0).abs();
            worst = worst.max(err);
        }
        worst
    }

    /// Quantize to the 8-bit RGB convention.
    pub fn encode_bytes(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                let v = self.data[c * n + i];
                out[i * 3 + c] = ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    /// Exact grid inverse of [`Self::encode_bytes`]: n = 2c/255 - 1, no
    /// renormalization, so re-encoding reproduces the bytes bit for bit.
    pub fn decode_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "normal byte length {} does not match {}x{}x3",
                bytes.len(),
                width,
                height
            )));
        }
        let n = width * height;
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = bytes[i * 3 + c] as f32 * 2.0 / 255.0 - 1.0;
            }
        }
        Ok(NormalMap {
            width,
            height,
            data,
        })
    }

    /// Rescale every vector to unit length; vanishing norms become (0, 0, 1).
    pub fn renormalized(&self) -> Self {
        let n = self.width * self.height;
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            let (x, y, z) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
            let norm = (x * x + y * y + z * z).sqrt();
            if norm < 1e-6 {
                data[2 * n + i] = 1.0;
            } else {
                data[i] = x / norm;
                data[n + i] = y / norm;
                data[2 * n + i] = z / norm;
            }
        }
        NormalMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Rgb,
            &self.encode_bytes(),
        )
    }

    /// Load and renormalize (the decoded grid vector is only unit up to
    /// quantization).
    pub fn load(path: &Path) -> Result<Self> {
        let (width, height, rgb) = read_png_rgb8(path)?;
        Ok(NormalMap::decode_bytes(width, height, &rgb)?.renormalized())
    }
}

/// Ordered frames with loop metadata.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub period: u32,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, period: u32) -> Self {
        FrameSequence { frames, period }
    }

    /// Write frames as frame_0000.png ... under `dir`.
    pub fn save_frames(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            f.save(&dir.join(format!("frame_{:04}.png", i)))?;
        }
        Ok(())
    }
}

/// Load every PNG in a directory, sorted lexicographically by file name.
pub fn load_frame_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut names: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!(
            "no PNG frames found in {}",
            dir.display()
        )));
    }
    names.iter().map(|p| Image::load(p)).collect()
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("{}: png header: {}", path.display(), e)))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Format(format!("{}: png payload: {}", path.display(), e)))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: png: {}", path.display(), e)))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: png: {}", path.display(), e)))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit PNGs supported, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

fn read_png_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, buf) = read_png(path)?;
    let rgb = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|v| [*v, *v, *v]).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported PNG color type {:?}",
                path.display(),
                other
            )))
        }
    };
    Ok((w, h, rgb))
}

fn read_png_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, color, buf) = read_png(path)?;
    let gray = match color {
        png::ColorType::Grayscale => buf,
        png::ColorType::Rgb => buf.chunks_exact(3).map(|p| p[0]).collect(),
        png::ColorType::Rgba => buf.chunks_exact(4).map(|p| p[0]).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported PNG color type {:?}",
                path.display(),
                other
            )))
        }
    };
    Ok((w, h, gray))
}
