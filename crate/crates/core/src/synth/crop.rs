//! Box geometry and the clip crop.
//!
//! Boxes use edge coordinates: pixel `j` spans `[j, j+1)`. Joint positions
//! use pixel-index coordinates, where the centre of pixel `j` is `j`.

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

pub const ENLARGEMENT: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCrop {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCrop {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxCrop { x, y, w, h }
    }

    /// Square box of side `side` centred on pixel-index point `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64) -> Self {
        BoxCrop {
            x: cx + 0.5 - side / 2.0,
            y: cy + 0.5 - side / 2.0,
            w: side,
            h: side,
        }
    }

    /// Scales about the centre.
    pub fn enlarged(&self, factor: f64) -> Self {
        let (w, h) = (self.w * factor, self.h * factor);
        BoxCrop {
            x: self.x - (w - self.w) / 2.0,
            y: self.y - (h - self.h) / 2.0,
            w,
            h,
        }
    }

    pub fn intersects(&self, width: usize, height: usize) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x < width as f64
            && self.y < height as f64
            && self.x + self.w > 0.0
            && self.y + self.h > 0.0
    }

    /// Image point to output-crop point for an `ow`x`oh` output.
    pub fn to_crop(&self, p: [f64; 2], ow: usize, oh: usize) -> [f64; 2] {
        [
            (p[0] + 0.5 - self.x) * ow as f64 / self.w - 0.5,
            (p[1] + 0.5 - self.y) * oh as f64 / self.h - 0.5,
        ]
    }

    pub fn to_image(&self, p: [f64; 2], ow: usize, oh: usize) -> [f64; 2] {
        [
            self.x + (p[0] + 0.5) * self.w / ow as f64 - 0.5,
            self.y + (p[1] + 0.5) * self.h / oh as f64 - 0.5,
        ]
    }
}

fn sample(img: &Image, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let get = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= img.h as f64 || xx >= img.w as f64 {
            0.0
        } else {
            img.data[yy as usize * img.w + xx as usize]
        }
    };
    let top = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1.0) * fx;
    let bot = get(y0 + 1.0, x0) * (1.0 - fx) + get(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Crops every frame with the same box and resamples to `ow`x`oh`; area
/// outside the source image reads as zero.
pub fn crop_sequence(frames: &[Image], b: &BoxCrop, ow: usize, oh: usize) -> Result<Vec<Image>> {
    frames
        .iter()
        .map(|f| {
            if !b.intersects(f.w, f.h) {
                return Err(Error::Geometry(format!("box {b:?} misses the {}x{} image", f.w, f.h)));
            }
            let mut out = Image::zeros(oh, ow);
            for i in 0..oh {
                let sy = b.y + (i as f64 + 0.5) * b.h / oh as f64 - 0.5;
                for j in 0..ow {
                    let sx = b.x + (j as f64 + 0.5) * b.w / ow as f64 - 0.5;
                    out.data[i * ow + j] = sample(f, sy, sx);
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enlargement_keeps_centre() {
        let b = BoxCrop::new(10.0, 10.0, 20.0, 20.0).enlarged(ENLARGEMENT);
        assert_eq!(b, BoxCrop::new(7.5, 7.5, 25.0, 25.0));
    }

    #[test]
    fn full_box_is_identity() {
        let img = Image {
            h: 3,
            w: 4,
            data: (0..12).map(|v| v as f32).collect(),
        };
        let out = crop_sequence(std::slice::from_ref(&img), &BoxCrop::new(0.0, 0.0, 4.0, 3.0), 4, 3).unwrap();
        assert_eq!(out[0], img);
    }

    #[test]
    fn disjoint_box_rejected() {
        let img = Image::zeros(4, 4);
        let r = crop_sequence(&[img], &BoxCrop::new(10.0, 10.0, 2.0, 2.0), 2, 2);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }
}
