use crate::geom::Box2D;
use serde::{Deserialize, Serialize};

/// Sparse binary image mask stored as sorted row-major pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: u32,
    height: u32,
    pixels: Vec<u32>,
}

/// Row-major run-length encoding: alternating background/foreground run
/// lengths, starting with background (possibly zero).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl PixelMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: Vec::new(),
        }
    }

    pub fn from_pixels(
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = (u32, u32)>,
    ) -> Self {
        let mut idx: Vec<u32> = pixels
            .into_iter()
            .filter(|&(u, v)| u < width && v < height)
            .map(|(u, v)| v * width + u)
            .collect();
        idx.sort_unstable();
        idx.dedup();
        Self {
            width,
            height,
            pixels: idx,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        u < self.width
            && v < self.height
            && self.pixels.binary_search(&(v * self.width + u)).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.pixels
            .iter()
            .map(move |&i| (i % self.width, i / self.width))
    }

    /// Square dilation with radius `r`.
    pub fn dilate(&self, r: u32) -> Self {
        if r == 0 {
            return self.clone();
        }
        let r = r as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        let grown = self.iter().flat_map(|(u, v)| {
            let (u, v) = (u as i64, v as i64);
            (-r..=r).flat_map(move |dv| (-r..=r).map(move |du| (u + du, v + dv)))
        });
        Self::from_pixels(
            self.width,
            self.height,
            grown
                .filter(|&(u, v)| u >= 0 && v >= 0 && u < w && v < h)
                .map(|(u, v)| (u as u32, v as u32)),
        )
    }

    /// Removes the outer `r`-pixel layer of the mask's own bounding box,
    /// the sparse-mask analogue of erosion: boundary pixels go first.
    pub fn peel(&self, r: u32) -> Self {
        if r == 0 || self.is_empty() {
            return self.clone();
        }
        let (mut u0, mut v0, mut u1, mut v1) = (u32::MAX, u32::MAX, 0, 0);
        for (u, v) in self.iter() {
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
        Self::from_pixels(
            self.width,
            self.height,
            self.iter()
                .filter(|&(u, v)| u >= u0 + r && v >= v0 + r && u + r <= u1 && v + r <= v1),
        )
    }

    pub fn retain_in_box(&self, b: &Box2D) -> Self {
        Self::from_pixels(
            self.width,
            self.height,
            self.iter().filter(|&(u, v)| b.contains_pixel(u, v)),
        )
    }

    pub fn union(&self, other: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self::from_pixels(self.width, self.height, self.iter().chain(other))
    }

    pub fn to_rle(&self) -> MaskRle {
        let mut counts = Vec::new();
        let mut cursor = 0u32;
        let mut i = 0;
        while i < self.pixels.len() {
            let start = self.pixels[i];
            let mut end = start;
            while i + 1 < self.pixels.len() && self.pixels[i + 1] == end + 1 {
                i += 1;
                end += 1;
            }
            counts.push(start - cursor);
            counts.push(end - start + 1);
            cursor = end + 1;
            i += 1;
        }
        let total = self.width * self.height;
        if cursor < total {
            counts.push(total - cursor);
        }
        MaskRle {
            size: [self.height, self.width],
            counts,
        }
    }

    pub fn from_rle(rle: &MaskRle) -> Result<Self, String> {
        let [height, width] = rle.size;
        let total = width as u64 * height as u64;
        let mut pixels = Vec::new();
        let mut cursor = 0u64;
        for (k, &c) in rle.counts.iter().enumerate() {
            if k % 2 == 1 {
                pixels.extend((cursor..cursor + c as u64).map(|p| p as u32));
            }
            cursor += c as u64;
        }
        if cursor != total {
            return Err(format!("run lengths sum to {cursor}, expected {total}"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dilate_and_peel() {
        let m = PixelMask::from_pixels(10, 10, [(5, 5)]);
        let d = m.dilate(1);
        assert_eq!(d.len(), 9);
        assert!(d.contains(4, 4) && d.contains(6, 6));
        assert_eq!(d.peel(1).iter().collect::<Vec<_>>(), vec![(5, 5)]);
        let corner = PixelMask::from_pixels(10, 10, [(0, 0)]).dilate(2);
        assert_eq!(corner.len(), 9);
    }

    #[test]
    fn rle_layout() {
        let m = PixelMask::from_pixels(4, 2, [(1, 0), (2, 0), (0, 1)]);
        let rle = m.to_rle();
        assert_eq!(rle.counts, vec![1, 2, 1, 1, 3]);
        assert_eq!(PixelMask::from_rle(&rle).unwrap(), m);
        assert!(PixelMask::from_rle(&MaskRle {
            size: [2, 4],
            counts: vec![3]
        })
        .is_err());
    }

    proptest! {
        #[test]
        fn rle_roundtrip(px in proptest::collection::vec((0u32..37, 0u32..23), 0..200)) {
            let m = PixelMask::from_pixels(37, 23, px);
            prop_assert_eq!(PixelMask::from_rle(&m.to_rle()).unwrap(), m);
        }
    }
}
