use super::image::{rgb_distance, Rgb};

/// The closed color vocabulary: corners of the RGB cube.
pub const PALETTE: [(&str, Rgb); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
    ("white", [255, 255, 255]),
    ("black", [0, 0, 0]),
];

/// Index of the nearest palette entry; ties go to the lower index.
pub fn nearest(c: Rgb) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, (_, p)) in PALETTE.iter().enumerate() {
        let d = rgb_distance(c, *p);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn color_name(c: Rgb) -> &'static str {
    PALETTE[nearest(c)].0
}

pub fn palette_color(index: usize) -> Rgb {
    PALETTE[index].1
}
