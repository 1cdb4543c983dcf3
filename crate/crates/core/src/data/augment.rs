use rand::Rng;

use super::Sample;

/// Largest translation, in pixels, along either axis.
pub const MAX_SHIFT: i32 = 8;
/// Largest zoom factor.
pub const MAX_SCALE: f64 = 1.5;

/// One draw of the geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Translation `(dy, dx)`; content moves down/right for positive values.
    pub shift: (i32, i32),
    /// Zoom factor; the zoomed image is center-cropped back to size.
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip_horizontal: false,
        flip_vertical: false,
        shift: (0, 0),
        scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
            shift: (
                rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
                rng.gen_range(-MAX_SHIFT..=MAX_SHIFT),
            ),
            scale: rng.gen_range(1.0..=MAX_SCALE),
        }
    }

    /// Applies flips, then zoom (bilinear for the image, nearest for the
    /// mask), then the reflect-padded translation.
    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = (s.height, s.width);
        let mut image = s.image.clone();
        let mut mask = s.mask.clone();
        if self.flip_horizontal {
            flip(&mut image, h, w, false);
            flip(&mut mask, h, w, false);
        }
        if self.flip_vertical {
            flip(&mut image, h, w, true);
            flip(&mut mask, h, w, true);
        }
        if self.scale != 1.0 {
            (image, mask) = zoom(&image, &mask, h, w, self.scale);
        }
        if self.shift != (0, 0) {
            image = translate(&image, h, w, self.shift);
            mask = translate(&mask, h, w, self.shift);
        }
        Sample {
            height: h,
            width: w,
            image,
            mask,
        }
    }
}

/// Draws fresh parameters from `rng` and applies them.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    AugmentParams::sample(rng).apply(sample)
}

fn flip<T: Copy>(data: &mut [T], h: usize, w: usize, vertical: bool) {
    if vertical {
        for y in 0..h / 2 {
            for x in 0..w {
                data.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    } else {
        for row in data.chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn translate<T: Copy>(data: &[T], h: usize, w: usize, (dy, dx): (i32, i32)) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        let sy = reflect(y as isize - dy as isize, h);
        for x in 0..w {
            let sx = reflect(x as isize - dx as isize, w);
            out.push(data[sy * w + sx]);
        }
    }
    out
}

/// Source coordinate of output index `i` under a centered zoom by `s`.
fn source(i: usize, n: usize, s: f64) -> f64 {
    let half = n as f64 / 2.0;
    (i as f64 + 0.5 - half) / s + half - 0.5
}

fn zoom(image: &[f64], mask: &[u8], h: usize, w: usize, s: f64) -> (Vec<f64>, Vec<u8>) {
    let mut img = Vec::with_capacity(h * w);
    let mut msk = Vec::with_capacity(h * w);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for y in 0..h {
        let sy = clamp(source(y, h, s), h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        let ny = (sy + 0.5).floor() as usize;
        for x in 0..w {
            let sx = clamp(source(x, w, s), w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = sx - x0 as f64;
            let top = image[y0 * w + x0] * (1.0 - tx) + image[y0 * w + x1] * tx;
            let bottom = image[y1 * w + x0] * (1.0 - tx) + image[y1 * w + x1] * tx;
            img.push(top * (1.0 - ty) + bottom * ty);
            let nx = (sx + 0.5).floor() as usize;
            msk.push(mask[ny.min(h - 1) * w + nx.min(w - 1)]);
        }
    }
    (img, msk)
}
