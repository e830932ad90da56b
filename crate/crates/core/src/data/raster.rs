//! In-memory rasters and the geometric operations the recipes need:
//! crops, right-angle rotations, flips, and resampling.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// Planar image, `[channels, height, width]`, values in `[0,1]`.
pub type Image = Array3<f32>;
/// Single-channel mask, `[height, width]`, values in `{0,1}` once binarized.
pub type Mask = Array2<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    Hflip,
    Vflip,
}

impl AugmentOp {
    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Identity => "identity",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
            AugmentOp::Hflip => "hflip",
            AugmentOp::Vflip => "vflip",
        }
    }

    /// Applies the op to the last two axes of `x` (`[.., h, w]`).
    fn apply_planes<T: Clone, D: ndarray::Dimension + ndarray::RemoveAxis>(
        self,
        x: ndarray::ArrayView<T, D>,
    ) -> ndarray::Array<T, D> {
        let nd = x.ndim();
        let (ay, ax) = (Axis(nd - 2), Axis(nd - 1));
        let mut v = x;
        match self {
            AugmentOp::Identity => {}
            // Counter-clockwise quarter turn: transpose, then flip rows.
            AugmentOp::Rot90 => {
                v.swap_axes(nd - 2, nd - 1);
                v.invert_axis(ay);
            }
            AugmentOp::Rot180 => {
                v.invert_axis(ay);
                v.invert_axis(ax);
            }
            AugmentOp::Rot270 => {
                v.swap_axes(nd - 2, nd - 1);
                v.invert_axis(ax);
            }
            AugmentOp::Hflip => v.invert_axis(ax),
            AugmentOp::Vflip => v.invert_axis(ay),
        }
        v.as_standard_layout().into_owned()
    }

    pub fn apply_image(self, image: ArrayView3<f32>) -> Image {
        self.apply_planes(image)
    }

    pub fn apply_mask(self, mask: ArrayView2<u8>) -> Mask {
        self.apply_planes(mask)
    }
}

pub fn crop_image(image: &Image, top: usize, left: usize, size: usize) -> Image {
    image
        .slice(s![.., top..top + size, left..left + size])
        .to_owned()
}

pub fn crop_mask(mask: &Mask, top: usize, left: usize, size: usize) -> Mask {
    mask.slice(s![top..top + size, left..left + size])
        .to_owned()
}

/// Bilinear resampling with half-pixel centers (edges clamped).
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = image.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| taps(o, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| taps(o, sx, w)).collect();
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = image.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bot = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbour resampling; never introduces new values.
pub fn resize_nearest<T: Copy + Default>(
    plane: &Array2<T>,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let (h, w) = plane.dim();
    let pick = |o: usize, n: usize, on: usize| {
        (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        plane[[pick(y, h, out_h), pick(x, w, out_w)]]
    })
}

pub fn is_binary(mask: &Mask) -> bool {
    mask.iter().all(|&v| v <= 1)
}
