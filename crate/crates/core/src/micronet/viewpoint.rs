use std::f64::consts::PI;

/// Number of viewpoint bins around the unit circle.
pub const VIEWPOINT_BINS: usize = 16;

const BIN_WIDTH: f64 = 2.0 * PI / VIEWPOINT_BINS as f64;

fn wrap_2pi(yaw: f64) -> f64 {
    let w = yaw.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Edge-aligned bins: bin `b` covers `[b, b + 1) * 2π/16`. The residual is
/// the offset of the wrapped yaw from the bin center.
pub fn viewpoint_encode(yaw: f64) -> (usize, f64) {
    let w = wrap_2pi(yaw);
    let bin = ((w / BIN_WIDTH).floor() as usize).min(VIEWPOINT_BINS - 1);
    let center = (bin as f64 + 0.5) * BIN_WIDTH;
    (bin, w - center)
}

/// Inverse of [`viewpoint_encode`], returning an angle in `[0, 2π)`.
pub fn viewpoint_decode(bin: usize, residual: f64) -> f64 {
    wrap_2pi((bin % VIEWPOINT_BINS) as f64 * BIN_WIDTH + 0.5 * BIN_WIDTH + residual)
}
