//! sRGB ↔ CIE Lab (D65) and the channel-dropout bottleneck.

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// One sRGB pixel in `[0,1]` to unscaled Lab (`L` in `[0,100]`).
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat3(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    mat3(&XYZ_TO_RGB, xyz).map(linear_to_srgb)
}

fn rescale(lab: [f64; 3]) -> [f64; 3] {
    [lab[0] / 100.0, (lab[1] + 128.0) / 255.0, (lab[2] + 128.0) / 255.0]
}

fn unscale(v: [f64; 3]) -> [f64; 3] {
    [v[0] * 100.0, v[1] * 255.0 - 128.0, v[2] * 255.0 - 128.0]
}

fn map_pixels(img: &Image, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        let v = f([px[0] as f64, px[1] as f64, px[2] as f64]);
        for (o, x) in px.iter_mut().zip(v) {
            *o = x as f32;
        }
    }
    out
}

/// Converts an `h x w x 3` sRGB image in `[0,1]` to Lab with `L/100`,
/// `(a+128)/255`, `(b+128)/255` so every channel lies in `[0,1]`.
pub fn rgb_to_lab(img: &Image) -> Result<Image> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::shape("rgb_to_lab", &[0, 0, 3], img.shape()));
    }
    if img.data().iter().any(|v| !(-1e-6..=1.0 + 1e-6).contains(v)) {
        return Err(Error::invalid("rgb_to_lab: input outside [0,1]"));
    }
    Ok(map_pixels(img, |p| rescale(rgb_pixel_to_lab(p.map(|c| c.clamp(0.0, 1.0))))))
}

/// Inverse of [`rgb_to_lab`] (no gamut clipping).
pub fn lab_to_rgb(img: &Image) -> Result<Image> {
    if img.rank() != 3 || img.shape()[2] != 3 {
        return Err(Error::shape("lab_to_rgb", &[0, 0, 3], img.shape()));
    }
    Ok(map_pixels(img, |p| lab_pixel_to_rgb(unscale(p))))
}

/// Zeroes each colour channel independently with probability `p`.
pub fn channel_dropout<R: Rng>(img: &Image, rng: &mut R, p: f64) -> Result<Image> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("channel_dropout: p = {p} not in [0, 1)")));
    }
    let c = img.last_dim();
    let drop: Vec<bool> = (0..c).map(|_| rng.gen_bool(p)).collect();
    let mut out = img.clone();
    if drop.iter().any(|&d| d) {
        for px in out.data_mut().chunks_mut(c) {
            for (v, &d) in px.iter_mut().zip(&drop) {
                if d {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn white_and_black_reference_points() {
        let w = rgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-3);
        assert!(w[1].abs() < 0.5 && w[2].abs() < 0.5);
        let b = rgb_pixel_to_lab([0.0, 0.0, 0.0]);
        assert!(b[0].abs() < 1e-9 && b[1].abs() < 1e-9 && b[2].abs() < 1e-9);
    }

    #[test]
    fn round_trip_is_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0f32..1.0));
        let back = lab_to_rgb(&rgb_to_lab(&img).unwrap()).unwrap();
        assert!(img.max_abs_diff(&back) < 1e-3);
    }

    #[test]
    fn rejects_out_of_range() {
        let img = Tensor::full(&[1, 1, 3], 1.5f32);
        assert!(rgb_to_lab(&img).is_err());
    }

    #[test]
    fn dropout_extremes_and_determinism() {
        let img = Tensor::full(&[2, 2, 3], 0.5f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(channel_dropout(&img, &mut rng, 0.0).unwrap(), img);
        let mut zeroed = 0;
        let trials = 500;
        for _ in 0..trials {
            let d = channel_dropout(&img, &mut rng, 0.999).unwrap();
            zeroed += (0..3).filter(|&c| d.data()[c] == 0.0).count();
        }
        assert!(zeroed as f64 > 0.98 * (3 * trials) as f64);
        let a = channel_dropout(&img, &mut ChaCha8Rng::seed_from_u64(42), 0.5).unwrap();
        let b = channel_dropout(&img, &mut ChaCha8Rng::seed_from_u64(42), 0.5).unwrap();
        assert_eq!(a, b);
        assert!(channel_dropout(&img, &mut rng, 1.0).is_err());
    }
}
