use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::garment::{paint_region, GarmentSpec};
use super::image::{Rgb, RgbImage};
use super::layout::{BodyLayout, Region, IMAGE_HEIGHT, IMAGE_WIDTH, MASK_BACKGROUND, MASK_LOWER, MASK_SKIN, MASK_UPPER};
use crate::encoder::GarmentCategory;
use crate::error::{Error, Result};
use crate::fusion::canonical_reference_order;
use crate::rng::seeded;

pub const SKIN_TONE: Rgb = [224, 172, 140];

/// Control-grid size of the background noise.
const GRID_ROWS: usize = 4;
const GRID_COLS: usize = 3;

/// Smooth muted background: bilinear interpolation of a seeded color grid.
pub fn background(seed: u64) -> RgbImage {
    let mut r = seeded(seed);
    let grid: Vec<[f64; 3]> = (0..GRID_ROWS * GRID_COLS)
        .map(|_| [0; 3].map(|_: u8| r.random_range(60.0..196.0)))
        .collect();
    let mut img = RgbImage::filled(IMAGE_WIDTH, IMAGE_HEIGHT, [0; 3]);
    for y in 0..IMAGE_HEIGHT {
        let gy = y as f64 * (GRID_ROWS - 1) as f64 / (IMAGE_HEIGHT - 1) as f64;
        let y0 = (gy as usize).min(GRID_ROWS - 2);
        let fy = gy - y0 as f64;
        for x in 0..IMAGE_WIDTH {
            let gx = x as f64 * (GRID_COLS - 1) as f64 / (IMAGE_WIDTH - 1) as f64;
            let x0 = (gx as usize).min(GRID_COLS - 2);
            let fx = gx - x0 as f64;
            let at = |yy: usize, xx: usize| grid[yy * GRID_COLS + xx];
            let mut c = [0u8; 3];
            for (ch, out) in c.iter_mut().enumerate() {
                let top = at(y0, x0)[ch] * (1.0 - fx) + at(y0, x0 + 1)[ch] * fx;
                let bottom = at(y0 + 1, x0)[ch] * (1.0 - fx) + at(y0 + 1, x0 + 1)[ch] * fx;
                *out = libm::round(top * (1.0 - fy) + bottom * fy) as u8;
            }
            img.set(y, x, c);
        }
    }
    img
}

fn check_compatible(garments: &[GarmentSpec], layout: &BodyLayout) -> Result<Vec<GarmentSpec>> {
    let ordered = canonical_reference_order(garments.to_vec())?;
    for (i, a) in ordered.iter().enumerate() {
        a.validate()?;
        for b in &ordered[i + 1..] {
            if layout.region(a.category).intersects(&layout.region(b.category)) {
                return Err(Error::Invalid(format!(
                    "{} and {} cover overlapping body regions",
                    a.category, b.category
                )));
            }
        }
    }
    Ok(ordered)
}

/// Target composite: background, skin-toned silhouette, then each
/// garment's texture inside its body region with the garment's own phase.
pub fn compose_model_image(garments: &[GarmentSpec], layout: &BodyLayout, background_seed: u64) -> Result<RgbImage> {
    let ordered = check_compatible(garments, layout)?;
    let mut img = background(background_seed);
    for (y, x) in layout.silhouette().pixels() {
        img.set(y, x, SKIN_TONE);
    }
    for g in &ordered {
        paint_region(&mut img, g, &layout.region(g.category), g.phase());
    }
    Ok(img)
}

/// Which part of the body a garment pixel dresses.
fn mask_id(category: GarmentCategory, y: usize) -> u8 {
    match category {
        GarmentCategory::Upper | GarmentCategory::Outer => MASK_UPPER,
        GarmentCategory::Lower => MASK_LOWER,
        GarmentCategory::Dress if y < BodyLayout::LEGS.top => MASK_UPPER,
        GarmentCategory::Dress => MASK_LOWER,
    }
}

/// Region-id image (red channel): background, bare skin, upper-body and
/// lower-body garment pixels.
pub fn region_masks(garments: &[GarmentSpec], layout: &BodyLayout) -> Result<RgbImage> {
    let ordered = check_compatible(garments, layout)?;
    let mut img = RgbImage::filled(IMAGE_WIDTH, IMAGE_HEIGHT, [MASK_BACKGROUND, 0, 0]);
    for (y, x) in layout.silhouette().pixels() {
        img.set(y, x, [MASK_SKIN, 0, 0]);
    }
    for g in &ordered {
        for (y, x) in layout.region(g.category).pixels() {
            img.set(y, x, [mask_id(g.category, y), 0, 0]);
        }
    }
    Ok(img)
}

/// Pixels whose mask id equals `id`.
pub fn mask_region(masks: &RgbImage, id: u8) -> Region {
    let mut rects = Vec::new();
    for y in 0..masks.height {
        for x in 0..masks.width {
            if masks.get(y, x)[0] == id {
                rects.push(super::layout::Rect {
                    top: y,
                    left: x,
                    height: 1,
                    width: 1,
                });
            }
        }
    }
    Region::from_rects(&rects)
}
