//! Feature visualization: incoming weight vectors of a layer rendered as a
//! grid of grayscale tiles in a binary PGM (`P5`) image.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Gray level of a constant tile.
pub const FLAT_TILE: u8 = 128;
/// Gray level of the separator lines and empty grid cells.
pub const SEPARATOR: u8 = 0;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(&self.pixels);
        out
    }
}

/// Min–max normalization of one tile to `0..=255`; constant tiles map to
/// [`FLAT_TILE`].
fn normalize_tile(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![FLAT_TILE; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Lays out the columns `units` of `weights` (`[n_in, n_units]`) as
/// `tile.0 × tile.1` tiles, row-major in unit order, on a near-square grid
/// with 1-pixel separators.
pub fn render_feature_grid(weights: &Tensor, units: &[usize], tile: (usize, usize)) -> Result<GrayImage> {
    let (n_in, n_units) = weights.dims2()?;
    let (th, tw) = tile;
    if th * tw != n_in || th == 0 {
        return Err(Error::arg(format!(
            "incoming vectors of length {n_in} cannot be shown as {th}x{tw} tiles"
        )));
    }
    if units.is_empty() {
        return Err(Error::arg("no units selected"));
    }
    if let Some(&u) = units.iter().find(|&&u| u >= n_units) {
        return Err(Error::arg(format!("unit {u} out of range (layer has {n_units})")));
    }
    let cols = (units.len() as f64).sqrt().ceil() as usize;
    let rows = units.len().div_ceil(cols);
    let width = cols * tw + cols - 1;
    let height = rows * th + rows - 1;
    let mut pixels = vec![SEPARATOR; width * height];
    for (pos, &u) in units.iter().enumerate() {
        let column: Vec<f64> = (0..n_in).map(|i| weights.data()[i * n_units + u]).collect();
        let tile_px = normalize_tile(&column);
        let (gy, gx) = (pos / cols, pos % cols);
        let (y0, x0) = (gy * (th + 1), gx * (tw + 1));
        for r in 0..th {
            let dst = (y0 + r) * width + x0;
            pixels[dst..dst + tw].copy_from_slice(&tile_px[r * tw..(r + 1) * tw]);
        }
    }
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

/// Writes the features of dense layer `layer_index` (all units, or the
/// listed ones) to `path` as a PGM grid.
pub fn export_features(
    net: &Network,
    layer_index: usize,
    tile: (usize, usize),
    units: Option<&[usize]>,
    path: &Path,
) -> Result<GrayImage> {
    let layer = net.layers.get(layer_index).ok_or_else(|| {
        Error::arg(format!(
            "layer {layer_index} does not exist (network has {} dense layers)",
            net.layers.len()
        ))
    })?;
    let all: Vec<usize> = (0..layer.n_out()).collect();
    let image = render_feature_grid(&layer.weights, units.unwrap_or(&all), tile)?;
    fs::write(path, image.to_pgm())?;
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, DenseLayer};
    use crate::rng::RandomSource;

    /// Independent reader for binary PGM files.
    fn parse_pgm(bytes: &[u8]) -> (usize, usize, usize, Vec<u8>) {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
        }
        assert_eq!(fields[0], "P5");
        let w: usize = fields[1].parse().unwrap();
        let h: usize = fields[2].parse().unwrap();
        let max: usize = fields[3].parse().unwrap();
        (w, h, max, bytes[pos + 1..].to_vec())
    }

    #[test]
    fn hundred_mnist_features_make_a_ten_by_ten_grid() {
        let mut rng = RandomSource::new(2);
        let w = rng.gauss_sample(0.0, 1.0, &[784, 100]).unwrap();
        let net = Network {
            conv: None,
            layers: vec![DenseLayer::new(w, Tensor::zeros(&[100]), Activation::Softmax).unwrap()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let img = export_features(&net, 0, (28, 28), None, &path).unwrap();
        assert_eq!((img.width, img.height), (289, 289));
        let (w, h, max, px) = parse_pgm(&std::fs::read(&path).unwrap());
        assert_eq!((w, h, max), (289, 289, 255));
        assert_eq!(px.len(), 289 * 289);
        assert_eq!(px.iter().copied().max(), Some(255));
        // Separator column after the first tile.
        assert!((0..289).all(|y| px[y * 289 + 28] == SEPARATOR));
    }

    #[test]
    fn tile_normalization_and_constant_tiles() {
        let w = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 4.0], vec![5.0, 4.0], vec![2.0, 4.0]]);
        let img = render_feature_grid(&w, &[0, 1], (2, 2)).unwrap();
        assert_eq!((img.width, img.height), (5, 2));
        assert_eq!(img.pixels, vec![0, 128, 0, 128, 128, 255, 64, 0, 128, 128]);
    }

    #[test]
    fn grid_geometry_for_partial_rows() {
        let w = Tensor::zeros(&[6, 5]);
        let img = render_feature_grid(&w, &[0, 1, 2, 3, 4], (2, 3)).unwrap();
        // Three columns, two rows of tiles.
        assert_eq!((img.width, img.height), (11, 5));
    }

    #[test]
    fn non_reshapeable_layer_is_rejected() {
        let w = Tensor::zeros(&[10, 3]);
        assert!(matches!(render_feature_grid(&w, &[0], (3, 3)), Err(Error::Argument(_))));
        assert!(matches!(render_feature_grid(&w, &[3], (2, 5)), Err(Error::Argument(_))));
    }
}
