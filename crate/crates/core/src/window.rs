//! Geometry of the square local search window.
//!
//! Channel `k` of a window-valued map encodes the offset `(du, dv)` with
//! `du` horizontal and `dv` vertical, both in `[-r, r]`, in row-major order:
//! `k = (dv + r) * (2r + 1) + (du + r)`. This layout is shared by probability
//! maps, labels, the upsampler and the on-disk export.

/// Square window of radius `r` centred on the query coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    radius: usize,
}

impl Window {
    pub fn new(radius: usize) -> Self {
        Self { radius }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Number of offsets, `(2r + 1)^2`.
    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn center(&self) -> usize {
        self.len() / 2
    }

    /// Offset `(du, dv)` of channel `k`.
    pub fn offset(&self, k: usize) -> (isize, isize) {
        let side = self.side();
        let r = self.radius as isize;
        ((k % side) as isize - r, (k / side) as isize - r)
    }

    /// Channel of offset `(du, dv)`, if it lies inside the window.
    pub fn index(&self, du: isize, dv: isize) -> Option<usize> {
        let r = self.radius as isize;
        if du.abs() > r || dv.abs() > r {
            return None;
        }
        Some(((dv + r) as usize) * self.side() + (du + r) as usize)
    }

    /// Key position for query `(y, x)` and channel `k` on an `h x w` grid.
    #[inline]
    pub fn key(&self, y: usize, x: usize, k: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (du, dv) = self.offset(k);
        let ky = y as isize + dv;
        let kx = x as isize + du;
        if ky < 0 || kx < 0 || ky >= h as isize || kx >= w as isize {
            None
        } else {
            Some((ky as usize, kx as usize))
        }
    }

    /// In-image validity of every (pixel, offset) pair, laid out `h x w x K`.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        let kn = self.len();
        let mut mask = vec![false; h * w * kn];
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * kn;
                for k in 0..kn {
                    mask[base + k] = self.key(y, x, k, h, w).is_some();
                }
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_round_trip_in_row_major_order() {
        let win = Window::new(2);
        assert_eq!(win.len(), 25);
        assert_eq!(win.offset(0), (-2, -2));
        assert_eq!(win.offset(1), (-1, -2));
        assert_eq!(win.offset(win.center()), (0, 0));
        for k in 0..win.len() {
            let (du, dv) = win.offset(k);
            assert_eq!(win.index(du, dv), Some(k));
        }
        assert_eq!(win.index(3, 0), None);
    }

    #[test]
    fn mask_marks_out_of_image_keys() {
        let win = Window::new(1);
        let m = win.mask(3, 3);
        // corner pixel (0,0): only offsets with du,dv >= 0 are valid
        let valid: Vec<usize> = (0..9).filter(|&k| m[k]).collect();
        assert_eq!(valid, vec![4, 5, 7, 8]);
        // centre pixel sees the whole window
        assert!(m[4 * 9..5 * 9].iter().all(|&v| v));
    }
}
