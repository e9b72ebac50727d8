use image::{ImageBuffer, Luma, RgbImage};

use crate::geometry::{BoundingBox, CameraIntrinsics};

/// 16-bit single channel depth raster in raw sensor units.
pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// A registered color + depth pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub frame_id: String,
    pub color: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    /// Fails when color and depth are not pixel-aligned.
    pub fn new(
        frame_id: impl Into<String>,
        color: RgbImage,
        depth: DepthImage,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, FrameError> {
        if color.dimensions() != depth.dimensions() {
            return Err(FrameError::DimensionMismatch { color: color.dimensions(), depth: depth.dimensions() });
        }
        if !intrinsics.is_valid() {
            return Err(FrameError::InvalidIntrinsics);
        }
        Ok(Self { frame_id: frame_id.into(), color, depth, intrinsics })
    }

    pub fn width(&self) -> u32 {
        self.color.width()
    }

    pub fn height(&self) -> u32 {
        self.color.height()
    }

    pub fn bounds(&self) -> BoundingBox {
        BoundingBox::image(self.width(), self.height())
    }

    /// Raw depth at the pixel containing `(u, v)`, 0 when outside.
    pub fn depth_at(&self, u: f64, v: f64) -> u16 {
        let (x, y) = (u.round(), v.round());
        if x < 0.0 || y < 0.0 || x >= self.width() as f64 || y >= self.height() as f64 {
            return 0;
        }
        self.depth.get_pixel(x as u32, y as u32)[0]
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FrameError {
    #[error("color {color:?} and depth {depth:?} dimensions differ")]
    DimensionMismatch { color: (u32, u32), depth: (u32, u32) },
    #[error("camera intrinsics must have positive focal lengths and depth scale")]
    InvalidIntrinsics,
}
