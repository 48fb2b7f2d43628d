use super::{MicronetError, Tensor};
use crate::geometry::Rect2D;

/// Samples per bin along each axis.
const SAMPLING: usize = 2;

/// Bilinear taps `(pixel, weight)` for a continuous point. Pixel `(r, c)`
/// has its center at `(c + 0.5, r + 0.5)`; samples are clamped to the map.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let xi = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let yi = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = xi.floor() as usize;
    let y0 = yi.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = xi - x0 as f64;
    let ly = yi - y0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

/// RoIAlign of an `H x W x C` feature map over the axis-aligned `rect`
/// (x = column, y = row, feature-pixel units) into `P x P x C`. Each bin
/// averages a 2x2 grid of bilinear samples.
pub fn roi_align(features: &Tensor, rect: &Rect2D, out: usize) -> Result<Tensor, MicronetError> {
    let (h, w, c) = match features.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(MicronetError::ShapeMismatch(format!("roi_align features {s:?}"))),
    };
    if !(rect.size[0] > 0.0 && rect.size[1] > 0.0) {
        return Err(MicronetError::ZeroAreaBox);
    }
    if out == 0 || h == 0 || w == 0 {
        return Err(MicronetError::EmptyInput("roi_align"));
    }
    let (lo, _) = rect.min_max();
    let bw = rect.size[0] / out as f64;
    let bh = rect.size[1] / out as f64;
    let norm = 1.0 / (SAMPLING * SAMPLING) as f64;
    let mut taps = Vec::with_capacity(out * out);
    for i in 0..out {
        for j in 0..out {
            let mut bin = Vec::with_capacity(4 * SAMPLING * SAMPLING);
            for sy in 0..SAMPLING {
                let y = lo[1] + bh * (i as f64 + (sy as f64 + 0.5) / SAMPLING as f64);
                for sx in 0..SAMPLING {
                    let x = lo[0] + bw * (j as f64 + (sx as f64 + 0.5) / SAMPLING as f64);
                    bin.extend(bilinear_taps(x, y, h, w).iter().map(|&(p, wt)| (p, wt * norm)));
                }
            }
            taps.push(bin);
        }
    }
    features.sparse_rows_hw(vec![out, out, c], taps)
}

impl Tensor {
    /// [`Tensor::sparse_rows`] over the flattened `H * W` pixel axis.
    fn sparse_rows_hw(&self, out_shape: Vec<usize>, taps: Vec<Vec<(usize, f64)>>) -> Result<Tensor, MicronetError> {
        let (h, w, c) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(MicronetError::ShapeMismatch(format!("{s:?}"))),
        };
        self.reshape(&[h * w, c])?.sparse_rows(out_shape, taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_gives_constant_output() {
        let f = Tensor::new(&[6, 5, 2], vec![1.5; 60]).unwrap();
        let rect = Rect2D::axis_aligned([0.3, 1.2], [4.1, 5.7]);
        let out = roi_align(&f, &rect, 3).unwrap();
        assert_eq!(out.shape(), &[3, 3, 2]);
        assert!(out.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        let (h, w) = (8, 10);
        let data: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 + 0.5).collect();
        let f = Tensor::new(&[h, w, 1], data).unwrap();
        let rect = Rect2D::axis_aligned([1.0, 2.0], [7.0, 6.0]);
        let p = 3;
        let out = roi_align(&f, &rect, p).unwrap();
        for i in 0..p {
            for j in 0..p {
                let bw = 6.0 / p as f64;
                let xs = [1.0 + bw * (j as f64 + 0.25), 1.0 + bw * (j as f64 + 0.75)];
                let expected = (xs[0] + xs[1]) / 2.0;
                assert!((out.data()[i * p + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_area_is_rejected() {
        let f = Tensor::zeros(&[4, 4, 1]);
        let rect = Rect2D::axis_aligned([1.0, 1.0], [1.0, 3.0]);
        assert_eq!(roi_align(&f, &rect, 2).unwrap_err(), MicronetError::ZeroAreaBox);
    }
}
