//! Float image planes with the few filters the pipeline needs: separable
//! Gaussian blur, bilinear sampling/resizing and central-difference
//! gradients.

use image::RgbImage;

/// Single-channel `f32` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    /// Rec. 601 luma of an RGB image.
    pub fn luma(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect();
        Self { width: w as usize, height: h as usize, data }
    }

    /// One plane per color channel.
    pub fn channels(img: &RgbImage) -> [Plane; 3] {
        let (w, h) = img.dimensions();
        let mut out = [
            Plane::new(w as usize, h as usize),
            Plane::new(w as usize, h as usize),
            Plane::new(w as usize, h as usize),
        ];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                out[c].data[i] = p[c] as f32;
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at a continuous position where pixel `(i, j)` has its
    /// center at `(i, j)`. Out-of-range positions clamp to the border.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Separable Gaussian blur with replicated borders. The kernel is
    /// truncated at 3σ and normalised, so constants are preserved.
    pub fn gaussian_blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 || self.width == 0 || self.height == 0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let mut tmp = Plane::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * self.get_clamped(x as isize + k as isize - r, y as isize);
                }
                tmp.set(x, y, acc);
            }
        }
        let mut out = Plane::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    acc += w * tmp.get_clamped(x as isize, y as isize + k as isize - r);
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Bilinear resize using pixel-center alignment. A same-size resize
    /// reproduces the input exactly.
    pub fn resize_bilinear(&self, new_width: usize, new_height: usize) -> Plane {
        if new_width == self.width && new_height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / new_width as f32;
        let sy = self.height as f32 / new_height as f32;
        let mut out = Plane::new(new_width, new_height);
        for y in 0..new_height {
            let src_y = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..new_width {
                let src_x = (x as f32 + 0.5) * sx - 0.5;
                out.set(x, y, self.sample(src_x, src_y));
            }
        }
        out
    }

    /// Central-difference gradients `(d/dx, d/dy)`.
    pub fn gradients(&self) -> (Plane, Plane) {
        let mut gx = Plane::new(self.width, self.height);
        let mut gy = Plane::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let (xi, yi) = (x as isize, y as isize);
                gx.set(x, y, 0.5 * (self.get_clamped(xi + 1, yi) - self.get_clamped(xi - 1, yi)));
                gy.set(x, y, 0.5 * (self.get_clamped(xi, yi + 1) - self.get_clamped(xi, yi - 1)));
            }
        }
        (gx, gy)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Plane {
        let mut out = Plane::new(w, h);
        for y in 0..h {
            let row = (y0 + y) * self.width + x0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[row..row + w]);
        }
        out
    }
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Reassemble three planes into an 8-bit RGB image, rounding and clamping.
pub fn planes_to_rgb(planes: &[Plane; 3]) -> RgbImage {
    let (w, h) = (planes[0].width, planes[0].height);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| planes[c].get(x as usize, y as usize).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}
