use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::GarmentCategory;

pub const IMAGE_HEIGHT: usize = 64;
pub const IMAGE_WIDTH: usize = 48;

/// Region ids written to the mask image's red channel.
pub const MASK_BACKGROUND: u8 = 0;
pub const MASK_SKIN: u8 = 64;
pub const MASK_UPPER: u8 = 128;
pub const MASK_LOWER: u8 = 192;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub const fn rows(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            left,
            height: bottom - top,
            width: right - left,
        }
    }
}

/// A pixel set on the `IMAGE_HEIGHT × IMAGE_WIDTH` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    mask: Vec<bool>,
}

impl Region {
    pub fn empty() -> Self {
        Self {
            mask: vec![false; IMAGE_HEIGHT * IMAGE_WIDTH],
        }
    }

    pub fn from_rects(rects: &[Rect]) -> Self {
        let mut r = Self::empty();
        for rect in rects {
            for y in rect.top..rect.top + rect.height {
                for x in rect.left..rect.left + rect.width {
                    r.mask[y * IMAGE_WIDTH + x] = true;
                }
            }
        }
        r
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.mask[y * IMAGE_WIDTH + x]
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Row-major `(y, x)` of every member pixel.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / IMAGE_WIDTH, i % IMAGE_WIDTH))
    }

    /// Top-left corner of the bounding box; `(0, 0)` when empty.
    pub fn origin(&self) -> (usize, usize) {
        let mut top = usize::MAX;
        let mut left = usize::MAX;
        for (y, x) in self.pixels() {
            top = top.min(y);
            left = left.min(x);
        }
        if top == usize::MAX {
            (0, 0)
        } else {
            (top, left)
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).any(|(a, b)| *a && *b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).all(|(a, b)| !*a || *b)
    }
}

/// Fixed front-facing silhouette.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BodyLayout;

impl BodyLayout {
    pub const HEAD: Rect = Rect::rows(2, 14, 18, 30);
    pub const NECK: Rect = Rect::rows(14, 16, 21, 27);
    pub const LEFT_ARM: Rect = Rect::rows(16, 34, 8, 12);
    pub const RIGHT_ARM: Rect = Rect::rows(16, 34, 36, 40);
    pub const TORSO: Rect = Rect::rows(16, 36, 12, 36);
    pub const LEGS: Rect = Rect::rows(36, 60, 14, 34);
    pub const LEFT_FOOT: Rect = Rect::rows(60, 63, 14, 22);
    pub const RIGHT_FOOT: Rect = Rect::rows(60, 63, 26, 34);

    pub fn silhouette(&self) -> Region {
        Region::from_rects(&[
            Self::HEAD,
            Self::NECK,
            Self::LEFT_ARM,
            Self::RIGHT_ARM,
            Self::TORSO,
            Self::LEGS,
            Self::LEFT_FOOT,
            Self::RIGHT_FOOT,
        ])
    }

    pub fn upper(&self) -> Region {
        Region::from_rects(&[Self::TORSO])
    }

    pub fn lower(&self) -> Region {
        Region::from_rects(&[Self::LEGS])
    }

    pub fn arms(&self) -> Region {
        Region::from_rects(&[Self::LEFT_ARM, Self::RIGHT_ARM])
    }

    pub fn head(&self) -> Region {
        Region::from_rects(&[Self::HEAD])
    }

    /// Silhouette minus the garment-bearing regions.
    pub fn remainder(&self) -> Region {
        let garments = self.upper().union(&self.lower()).union(&self.arms());
        let s = self.silhouette();
        Region {
            mask: s.mask.iter().zip(&garments.mask).map(|(a, b)| *a && !*b).collect(),
        }
    }

    /// Pixels a garment of `category` covers.
    pub fn region(&self, category: GarmentCategory) -> Region {
        match category {
            GarmentCategory::Upper => self.upper(),
            GarmentCategory::Lower => self.lower(),
            GarmentCategory::Dress => self.upper().union(&self.lower()),
            GarmentCategory::Outer => self.upper().union(&self.arms()),
        }
    }
}
