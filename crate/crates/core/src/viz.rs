//! Grayscale filter grids: one `K x K` tile per output filter holding the
//! mean absolute weight over input channels, tiles side by side with
//! one-pixel white separators.

use std::fmt::Write as _;

use crate::error::{check_dim, Result};
use crate::tensor::Tensor4;

pub const SEPARATOR: u8 = 255;

/// `(N, K, K)` tile values of a filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrid {
    pub filters: usize,
    pub kernel: usize,
    pub values: Vec<f64>,
}

impl FilterGrid {
    pub fn from_filters(weight: &Tensor4) -> Self {
        let [n, c, kh, kw] = weight.dims();
        let area = kh * kw;
        let mut values = vec![0.0; n * area];
        for f in 0..n {
            let item = weight.item(f);
            for ch in 0..c {
                for (v, w) in values[f * area..(f + 1) * area]
                    .iter_mut()
                    .zip(&item[ch * area..(ch + 1) * area])
                {
                    *v += w.abs();
                }
            }
            values[f * area..(f + 1) * area]
                .iter_mut()
                .for_each(|v| *v /= c as f64);
        }
        Self {
            filters: n,
            kernel: kh,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.filters * self.kernel + self.filters.saturating_sub(1)
    }

    pub fn height(&self) -> usize {
        self.kernel
    }

    pub fn tile(&self, f: usize) -> &[f64] {
        let area = self.kernel * self.kernel;
        &self.values[f * area..(f + 1) * area]
    }
}

/// Maps exact zeros to 0 and the non-zero range of all grids jointly onto
/// `1..=255`.
pub fn normalize_joint(grids: &[&FilterGrid]) -> Vec<Vec<u8>> {
    let nonzero = grids
        .iter()
        .flat_map(|g| g.values.iter())
        .filter(|v| **v != 0.0);
    let (lo, hi) = nonzero.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    grids
        .iter()
        .map(|g| {
            g.values
                .iter()
                .map(|&v| {
                    if v == 0.0 {
                        0
                    } else if hi > lo {
                        1 + ((v - lo) / (hi - lo) * 254.0).round() as u8
                    } else {
                        255
                    }
                })
                .collect()
        })
        .collect()
}

/// Lays normalized tiles out into a `K x (N*K + N - 1)` raster.
pub fn raster(grid: &FilterGrid, levels: &[u8]) -> Vec<u8> {
    let (k, width) = (grid.kernel, grid.width());
    let mut pixels = vec![SEPARATOR; k * width];
    for f in 0..grid.filters {
        for y in 0..k {
            for x in 0..k {
                pixels[y * width + f * (k + 1) + x] = levels[(f * k + y) * k + x];
            }
        }
    }
    pixels
}

/// Binary PGM (P5, maxval 255).
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub const VARIANTS: [&str; 3] = ["original", "reconstructed", "pruned"];

/// Original filters with every output outside `kept` zeroed.
pub fn zero_pruned(original: &Tensor4, kept: &[usize]) -> Tensor4 {
    let mut out = Tensor4::zeros(original.dims());
    for &k in kept {
        out.item_mut(k).copy_from_slice(original.item(k));
    }
    out
}

pub struct RenderedLayer {
    /// PGM files in [`VARIANTS`] order.
    pub images: Vec<Vec<u8>>,
    pub grids: Vec<FilterGrid>,
}

/// Renders original, reconstructed and zero-pruned filter banks with one
/// shared normalization.
pub fn render_layer(
    original: &Tensor4,
    reconstructed: &Tensor4,
    kept: &[usize],
) -> Result<RenderedLayer> {
    for (axis, a, b) in [
        ("filters", original.batch(), reconstructed.batch()),
        (
            "input channels",
            original.channels(),
            reconstructed.channels(),
        ),
        ("kernel", original.height(), reconstructed.height()),
    ] {
        check_dim(axis, a, b)?;
    }
    let grids = vec![
        FilterGrid::from_filters(original),
        FilterGrid::from_filters(reconstructed),
        FilterGrid::from_filters(&zero_pruned(original, kept)),
    ];
    let refs: Vec<&FilterGrid> = grids.iter().collect();
    let images = normalize_joint(&refs)
        .iter()
        .zip(&grids)
        .map(|(levels, g)| pgm(g.width(), g.height(), &raster(g, levels)))
        .collect();
    Ok(RenderedLayer { images, grids })
}

pub fn grids_csv(layer: usize, grids: &[FilterGrid]) -> String {
    let mut out = String::new();
    for (variant, grid) in VARIANTS.iter().zip(grids) {
        let k = grid.kernel;
        for f in 0..grid.filters {
            for (i, v) in grid.tile(f).iter().enumerate() {
                let _ = writeln!(out, "{layer},{variant},{f},{},{},{v}", i / k, i % k);
            }
        }
    }
    out
}

pub const GRIDS_CSV_HEADER: &str = "layer,variant,filter,row,col,value";

/// Pixels of tile `f` in a raster produced by [`raster`].
pub fn tile_pixels(raster: &[u8], kernel: usize, filters: usize, f: usize) -> Vec<u8> {
    let width = filters * kernel + filters.saturating_sub(1);
    (0..kernel)
        .flat_map(|y| {
            raster[y * width + f * (kernel + 1)..y * width + f * (kernel + 1) + kernel].to_vec()
        })
        .collect()
}

/// Raster bytes of a PGM produced by [`pgm`].
pub fn pgm_pixels(bytes: &[u8]) -> &[u8] {
    let mut newlines = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            newlines += 1;
            if newlines == 3 {
                return &bytes[i + 1..];
            }
        }
    }
    &[]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_header() {
        let w = Tensor4::from_fn([3, 2, 2, 2], |[n, c, y, x]| (n + c + y + x) as f64);
        let grid = FilterGrid::from_filters(&w);
        assert_eq!((grid.width(), grid.height()), (3 * 2 + 2, 2));
        let levels = normalize_joint(&[&grid]).remove(0);
        let img = pgm(grid.width(), grid.height(), &raster(&grid, &levels));
        assert!(img.starts_with(b"P5\n8 2\n255\n"));
        let px = pgm_pixels(&img);
        assert_eq!(px.len(), 16);
        assert_eq!(px[2], SEPARATOR);
        assert_eq!(px[5], SEPARATOR);
    }

    #[test]
    fn zero_filter_is_black() {
        let mut w = Tensor4::from_fn([2, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f64 - 4.0);
        w.item_mut(1).fill(0.0);
        let grid = FilterGrid::from_filters(&w);
        let levels = normalize_joint(&[&grid]).remove(0);
        let px = raster(&grid, &levels);
        assert!(tile_pixels(&px, 3, 2, 1).iter().all(|&p| p == 0));
        // Centre of filter 0 is the only exact zero there.
        let t0 = tile_pixels(&px, 3, 2, 0);
        assert_eq!(t0[4], 0);
        assert!(t0.iter().enumerate().all(|(i, &p)| i == 4 || p > 0));
        assert_eq!(*t0.iter().max().unwrap(), 255);
    }

    #[test]
    fn mean_abs_over_channels() {
        let w = Tensor4::new([1, 2, 1, 1], vec![-3.0, 1.0]).unwrap();
        assert_eq!(FilterGrid::from_filters(&w).values, vec![2.0]);
    }

    #[test]
    fn csv_rows() {
        let w = Tensor4::from_fn([2, 1, 2, 2], |[n, _, y, x]| (n * 4 + y * 2 + x) as f64);
        let r = render_layer(&w, &w, &[0]).unwrap();
        let csv = grids_csv(5, &r.grids);
        assert_eq!(csv.lines().count(), 3 * 2 * 4);
        assert!(csv.lines().any(|l| l == "5,pruned,1,1,1,0"));
    }
}
