//! In-memory RGB images and binary masks, PNG I/O, and the dihedral
//! transforms used by geometric augmentation.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major, channel-last RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, 3],
                actual: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.width + c) * 3;
        for (k, v) in rgb.into_iter().enumerate() {
            self.data[i + k] = v.clamp(0.0, 1.0);
        }
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`; values are clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![3, h, w],
                actual: vec![c, h, w],
            });
        }
        let data = t
            .permute((1, 2, 0))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path)?;
        Ok(())
    }

    /// Values snapped to the 8-bit grid used on disk.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| quantize(*v) as f32 / 255.0)
                .collect(),
        }
    }

    pub fn transformed(&self, tf: Dihedral) -> Self {
        let (h, w) = tf.output_shape(self.height, self.width);
        let mut out = RgbImage::filled(h, w, [0.0; 3]);
        for r in 0..self.height {
            for c in 0..self.width {
                let (r2, c2) = tf.map(r, c, self.height, self.width);
                out.set_pixel(r2, c2, self.pixel(r, c));
            }
        }
        out
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Physical size of one pixel along rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelSpacing {
    pub row: f64,
    pub col: f64,
}

impl Default for PixelSpacing {
    fn default() -> Self {
        Self { row: 1.0, col: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    /// Three identical channels with values in `{0, 1}`: `[3, H, W]`.
    pub fn to_map_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let plane: Vec<f32> = self.data.iter().map(|v| *v as u8 as f32).collect();
        let t = Tensor::from_vec(plane, (1, self.height, self.width), device)?;
        Ok(t.repeat((3, 1, 1))?.to_dtype(dtype)?)
    }

    pub fn to_rgb(&self) -> RgbImage {
        let data = self
            .data
            .iter()
            .flat_map(|v| [*v as u8 as f32; 3])
            .collect();
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Loads a grayscale PNG where 0 is background and 255 foreground; any
    /// other value is rejected.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h) as usize);
        for v in img.into_raw() {
            match v {
                0 => data.push(false),
                255 => data.push(true),
                value => {
                    return Err(Error::NonBinaryMask {
                        path: path.to_path_buf(),
                        value,
                    })
                }
            }
        }
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        img.save(path)?;
        Ok(())
    }

    pub fn transformed(&self, tf: Dihedral) -> Self {
        let (h, w) = tf.output_shape(self.height, self.width);
        let mut out = BinaryMask::empty(h, w);
        for r in 0..self.height {
            for c in 0..self.width {
                let (r2, c2) = tf.map(r, c, self.height, self.width);
                out.set(r2, c2, self.get(r, c));
            }
        }
        out
    }
}

/// The rotation/flip transforms applied by geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
}

impl Dihedral {
    pub const AUGMENTATIONS: [Dihedral; 5] = [
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
    ];

    pub fn output_shape(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Dihedral::Rot90 | Dihedral::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Destination of source pixel `(r, c)`; rotations are clockwise.
    pub fn map(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (r, c),
            Dihedral::Rot90 => (c, h - 1 - r),
            Dihedral::Rot180 => (h - 1 - r, w - 1 - c),
            Dihedral::Rot270 => (w - 1 - c, r),
            Dihedral::FlipHorizontal => (r, w - 1 - c),
            Dihedral::FlipVertical => (h - 1 - r, c),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dihedral::Identity => "identity",
            Dihedral::Rot90 => "rot90",
            Dihedral::Rot180 => "rot180",
            Dihedral::Rot270 => "rot270",
            Dihedral::FlipHorizontal => "flip-h",
            Dihedral::FlipVertical => "flip-v",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotations_compose() {
        let m = BinaryMask::from_fn(5, 7, |r, c| (r * 3 + c) % 4 == 0);
        let twice = m.transformed(Dihedral::Rot90).transformed(Dihedral::Rot90);
        assert_eq!(twice, m.transformed(Dihedral::Rot180));
        let back = m.transformed(Dihedral::Rot90).transformed(Dihedral::Rot270);
        assert_eq!(back, m);
        assert_eq!(
            m.transformed(Dihedral::FlipHorizontal)
                .transformed(Dihedral::FlipHorizontal),
            m
        );
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(6, 4, |r, c| r > c);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(BinaryMask::load_png(&p).unwrap(), m);

        let img = RgbImage::new(2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let p = dir.path().join("i.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img.quantized());
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        image::GrayImage::from_raw(2, 1, vec![0, 128])
            .unwrap()
            .save(&p)
            .unwrap();
        match BinaryMask::load_png(&p) {
            Err(Error::NonBinaryMask { value, .. }) => assert_eq!(value, 128),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_layout() {
        let mut img = RgbImage::filled(2, 3, [0.0; 3]);
        img.set_pixel(1, 2, [0.25, 0.5, 0.75]);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 2, 3]);
        let v = t.to_vec3::<f32>().unwrap();
        assert_eq!((v[0][1][2], v[1][1][2], v[2][1][2]), (0.25, 0.5, 0.75));
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }
}
