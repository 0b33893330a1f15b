//! Procedural test images.

use crate::imaging::Image;

pub const STRIPE_DARK: [f64; 3] = [0.05, 0.15, 0.75];
pub const STRIPE_LIGHT: [f64; 3] = [0.35, 0.5, 0.95];
pub const CHECK_DARK: [f64; 3] = [0.55, 0.05, 0.05];
pub const CHECK_LIGHT: [f64; 3] = [0.9, 0.2, 0.15];
pub const DISK_BLUE: [f64; 3] = [0.15, 0.3, 0.85];
pub const FIELD_RED: [f64; 3] = [0.75, 0.12, 0.1];

/// Left half: blue with 2-px vertical stripes. Right half: red 4-px
/// checkerboard.
pub fn two_style_style(size: usize) -> Image {
    Image::from_fn(size, size, |y, x| {
        if x < size / 2 {
            if (x / 2) % 2 == 0 {
                STRIPE_DARK
            } else {
                STRIPE_LIGHT
            }
        } else if ((y / 4) + (x / 4)) % 2 == 0 {
            CHECK_DARK
        } else {
            CHECK_LIGHT
        }
    })
    .expect("valid colors")
}

/// Flat blue disk covering about half the area on a flat red field.
pub fn two_style_content(size: usize) -> Image {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 * 0.4;
    Image::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f64 - c, x as f64 - c);
        if dy * dy + dx * dx <= r * r {
            DISK_BLUE
        } else {
            FIELD_RED
        }
    })
    .expect("valid colors")
}

/// Boolean mask of the disk in [`two_style_content`].
pub fn disk_region(size: usize, y: usize, x: usize) -> bool {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 * 0.4;
    let (dy, dx) = (y as f64 - c, x as f64 - c);
    dy * dy + dx * dx <= r * r
}

/// Red, green, blue and white quadrants.
pub fn quadrants(size: usize) -> Image {
    let h = size / 2;
    Image::from_fn(size, size, |y, x| match (y < h, x < h) {
        (true, true) => [1.0, 0.0, 0.0],
        (true, false) => [0.0, 1.0, 0.0],
        (false, true) => [0.0, 0.0, 1.0],
        (false, false) => [1.0, 1.0, 1.0],
    })
    .expect("valid colors")
}
