//! RGB images in `[0, 1]`, PNG I/O, Y extraction and the dihedral group.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Interleaved row-major RGB, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        ImageRGB {
            height,
            width,
            pixels,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        ImageRGB {
            height,
            width,
            pixels,
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dim(
                "image",
                format!("{} values for {height}x{width} RGB", pixels.len()),
            ));
        }
        Ok(ImageRGB {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::dim(
                "crop",
                format!(
                    "{height}x{width} at ({top}, {left}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(top + y, left + x)))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageRGB {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Clamp and round to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        self.map(quantize)
    }

    /// `1×3×H×W` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            T::lit(self.pixels[(y * self.width + x) * 3 + c] as f64)
        })
    }

    /// Batch item `n` of a tensor with 3 channels.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(Error::dim("image_from_tensor", format!("item {n} of {s}")));
        }
        Ok(Self::from_fn(s.h, s.w, |y, x| {
            [0, 1, 2].map(|c| t.at(n, c, y, x).as_f64() as f32)
        }))
    }

    pub fn transformed(&self, t: Dihedral) -> Self {
        t.apply(self)
    }

    fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    /// 90° counter-clockwise.
    fn rotate90(&self) -> Self {
        Self::from_fn(self.width, self.height, |y, x| self.get(x, self.width - 1 - y))
    }
}

#[inline]
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let img = ::image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageRGB::from_pixels(h as usize, w as usize, pixels)
}

/// 8-bit RGB PNG, `round(clamp(v) · 255)`.
pub fn save_png(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    ::image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        ::image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Single-channel plane stored as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Drops `border` pixels from every side.
    pub fn shave(&self, border: usize) -> Plane {
        let h = self.height.saturating_sub(2 * border);
        let w = self.width.saturating_sub(2 * border);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let row = (y + border) * self.width + border;
            data.extend_from_slice(&self.data[row..row + w]);
        }
        Plane {
            height: h,
            width: w,
            data,
        }
    }
}

/// BT.601 studio-swing luma: `(65.481 R + 128.553 G + 24.966 B + 16) / 255`
/// for `R, G, B` in `[0, 1]`, so the result lies in `[16/255, 235/255]`.
pub fn rgb_to_y(img: &ImageRGB) -> Plane {
    let data = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            (65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64 + 16.0) / 255.0
        })
        .collect();
    Plane {
        height: img.height,
        width: img.width,
        data,
    }
}

/// An element of the 8-element symmetry group of the square: a horizontal
/// flip (optional) followed by `rot` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };
    pub const FLIP: Dihedral = Dihedral { flip: true, rot: 0 };

    pub const ALL: [Dihedral; 8] = [
        Dihedral { flip: false, rot: 0 },
        Dihedral { flip: false, rot: 1 },
        Dihedral { flip: false, rot: 2 },
        Dihedral { flip: false, rot: 3 },
        Dihedral { flip: true, rot: 0 },
        Dihedral { flip: true, rot: 1 },
        Dihedral { flip: true, rot: 2 },
        Dihedral { flip: true, rot: 3 },
    ];

    pub fn rotation(quarter_turns: u8) -> Self {
        Dihedral {
            flip: false,
            rot: quarter_turns % 4,
        }
    }

    pub fn index(self) -> usize {
        self.flip as usize * 4 + self.rot as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 8]
    }

    /// Since `F R F = R⁻¹`, every flipped element is its own inverse.
    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Dihedral::rotation((4 - self.rot) % 4)
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then(self, other: Dihedral) -> Dihedral {
        // R^a F^f applied after R^b F^g  =  R^a F^f R^b F^g  =  R^(a ± b) F^(f ^ g)
        let b = if self.flip {
            (4 - other.rot) % 4
        } else {
            other.rot
        };
        Dihedral {
            flip: self.flip ^ other.flip,
            rot: (self.rot + b) % 4,
        }
    }

    pub fn swaps_axes(self) -> bool {
        self.rot % 2 == 1
    }

    pub fn apply(self, img: &ImageRGB) -> ImageRGB {
        let mut out = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        for _ in 0..self.rot {
            out = out.rotate90();
        }
        out
    }
}
