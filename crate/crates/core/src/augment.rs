//! Training-time image augmentation.

use rand::Rng;

use crate::data::Image;
use crate::math;

pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
pub const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);
const ERASE_ATTEMPTS: usize = 100;

/// An erased rectangle in pixel coordinates (half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Erased {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// With probability `p`, replaces one random rectangle (area fraction in
/// [`ERASE_AREA`], aspect ratio in [`ERASE_ASPECT`]) with uniform noise.
pub fn random_erasing<R: Rng + ?Sized>(img: &mut Image, p: f64, rng: &mut R) -> Option<Erased> {
    if p <= 0.0 || rng.gen::<f64>() >= p {
        return None;
    }
    let total = (img.h * img.w) as f64;
    for _ in 0..ERASE_ATTEMPTS {
        let target = rng.gen_range(ERASE_AREA.0..ERASE_AREA.1) * total;
        let aspect = rng.gen_range(ERASE_ASPECT.0..ERASE_ASPECT.1);
        let h = math::round(math::sqrt(target * aspect)) as usize;
        let w = math::round(math::sqrt(target / aspect)) as usize;
        let frac = (h * w) as f64 / total;
        if h == 0 || w == 0 || h >= img.h || w >= img.w || !(ERASE_AREA.0..=ERASE_AREA.1).contains(&frac) {
            continue;
        }
        let y = rng.gen_range(0..=img.h - h);
        let x = rng.gen_range(0..=img.w - w);
        for ch in 0..img.channels {
            for yy in y..y + h {
                for xx in x..x + w {
                    *img.at_mut(ch, yy, xx) = rng.gen::<f64>();
                }
            }
        }
        return Some(Erased { y, x, h, w });
    }
    None
}

/// Mirror an image left to right in place.
pub fn flip_horizontal(img: &mut Image) {
    for ch in 0..img.channels {
        for y in 0..img.h {
            let row = &mut img.data[(ch * img.h + y) * img.w..(ch * img.h + y + 1) * img.w];
            row.reverse();
        }
    }
}
