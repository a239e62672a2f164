use std::io::Cursor;

use image::{ImageFormat, RgbImage};

use super::DataError;
use crate::tensor::Tensor;

/// Decodes JPEG/PNG bytes into a `3×H×W` RGB tensor scaled to `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor, DataError> {
    let img = image::load_from_memory(bytes).map_err(|e| DataError::Image {
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("decoded dimensions are positive"))
}

/// Decode, bilinear-resize to `target×target`, scale to `[0, 1]`.
pub fn resize_normalize(bytes: &[u8], target: usize) -> Result<Tensor, DataError> {
    let img = decode_image(bytes)?;
    Ok(bilinear_resize(&img, target, target))
}

/// Encodes a `3×H×W` tensor in `[0, 1]` as PNG (values rounded to 8 bits).
pub fn encode_png(pixels: &Tensor) -> Vec<u8> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let d = pixels.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Samples channel `c` at continuous source coordinates with bilinear
/// weights. Neighbors outside the image contribute `fill`.
fn sample(img: &Tensor, c: usize, sy: f32, sx: f32, fill: Option<f32>) -> f32 {
    let (h, w) = (img.shape()[1] as isize, img.shape()[2] as isize);
    let d = img.data();
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| -> f32 {
        match fill {
            Some(v) if y < 0 || x < 0 || y >= h || x >= w => v,
            _ => {
                let y = y.clamp(0, h - 1) as usize;
                let x = x.clamp(0, w - 1) as usize;
                d[(c * h as usize + y) * w as usize + x]
            }
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (channels, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let (scale_y, scale_x) = (h as f32 / out_h as f32, w as f32 / out_w as f32);
    let mut data = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for y in 0..out_h {
            let sy = (y as f32 + 0.5) * scale_y - 0.5;
            for x in 0..out_w {
                let sx = (x as f32 + 0.5) * scale_x - 0.5;
                data.push(sample(img, c, sy, sx, None).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([channels, out_h, out_w], data).expect("positive dimensions")
}

/// Resizes so the shorter side equals `size`, keeping the aspect ratio.
pub fn resize_shorter_side(img: &Tensor, size: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (out_h, out_w) = if h <= w {
        (
            size,
            ((w as f64 * size as f64 / h as f64).round() as usize).max(1),
        )
    } else {
        (
            ((h as f64 * size as f64 / w as f64).round() as usize).max(1),
            size,
        )
    };
    bilinear_resize(img, out_h, out_w)
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    Tensor::from_fn([3, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

pub fn crop(
    img: &Tensor,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<Tensor, DataError> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(DataError::Augment(format!(
            "crop {ch}x{cw} at ({top}, {left}) exceeds image {h}x{w}"
        )));
    }
    let d = img.data();
    let mut data = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in top..top + ch {
            let row = (c * h + y) * w;
            data.extend_from_slice(&d[row + left..row + left + cw]);
        }
    }
    Ok(Tensor::new([3, ch, cw], data).expect("positive dimensions"))
}

pub fn center_crop(img: &Tensor, ch: usize, cw: usize) -> Result<Tensor, DataError> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if ch > h || cw > w {
        return Err(DataError::Augment(format!(
            "center crop {ch}x{cw} exceeds image {h}x{w}"
        )));
    }
    crop(img, (h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Horizontal shear by `shear` radians followed by isotropic scaling by
/// `zoom`, both about the image center. Uncovered pixels are black.
pub fn shear_zoom(img: &Tensor, shear: f32, zoom: f32) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let t = shear.tan();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                // inverse map: undo zoom, then undo shear
                let dy = (y as f32 - cy) / zoom;
                let dx = (x as f32 - cx) / zoom - t * dy;
                data.push(sample(img, c, cy + dy, cx + dx, Some(0.0)).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([3, h, w], data).expect("positive dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn gray_image_stays_gray_at_any_size() {
        let bytes = png_bytes(10, 10, |_, _| [128, 128, 128]);
        for target in [1, 4, 10, 37] {
            let t = resize_normalize(&bytes, target).unwrap();
            assert_eq!(t.shape(), &[3, target, target]);
            assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
        }
    }

    #[test]
    fn same_size_preserves_corners() {
        let bytes = png_bytes(8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, 200]);
        let t = resize_normalize(&bytes, 8).unwrap();
        let at = |c: usize, y: usize, x: usize| t.data()[(c * 8 + y) * 8 + x];
        assert!((at(0, 0, 7) - 210.0 / 255.0).abs() < 1e-6);
        assert!((at(1, 7, 0) - 210.0 / 255.0).abs() < 1e-6);
        assert_eq!(at(0, 0, 0), 0.0);
    }

    #[test]
    fn gradient_survives_down_and_up_resample() {
        let bytes = png_bytes(360, 363, |x, y| {
            [
                (x * 255 / 359) as u8,
                (y * 255 / 362) as u8,
                ((x + y) * 255 / 721) as u8,
            ]
        });
        let original = decode_image(&bytes).unwrap();
        let small = resize_normalize(&bytes, 224).unwrap();
        let back = bilinear_resize(&small, 363, 360);
        let mae = back
            .data()
            .iter()
            .zip(original.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / original.numel() as f32;
        assert!(mae < 0.05, "mae {mae}");
    }

    #[test]
    fn undecodable_bytes_rejected() {
        assert!(matches!(
            resize_normalize(b"not an image", 8),
            Err(DataError::Image { .. })
        ));
    }

    #[test]
    fn jpeg_decodes() {
        let img = RgbImage::from_fn(16, 12, |_, _| image::Rgb([40, 90, 200]));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Jpeg).unwrap();
        let t = resize_normalize(&out.into_inner(), 8).unwrap();
        assert_eq!(t.shape(), &[3, 8, 8]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_round_trip_is_quantized_identity() {
        let t = Tensor::from_fn([3, 5, 7], |i| (i % 256) as f32 / 255.0);
        let back = decode_image(&encode_png(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let t = Tensor::from_fn([3, 4, 5], |i| i as f32 / 60.0);
        let f = hflip(&t);
        assert_ne!(f, t);
        assert_eq!(hflip(&f), t);
    }

    #[test]
    fn unit_zoom_no_shear_is_identity() {
        let t = Tensor::from_fn([3, 9, 9], |i| ((i * 7) % 11) as f32 / 10.0);
        let out = shear_zoom(&t, 0.0, 1.0);
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zoom_out_fills_black_border() {
        let t = Tensor::full([3, 16, 16], 1.0);
        let out = shear_zoom(&t, 0.0, 0.5);
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[8 * 16 + 8] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn crop_larger_than_image_rejected() {
        let t = Tensor::zeros([3, 4, 4]);
        assert!(center_crop(&t, 5, 4).is_err());
        assert!(crop(&t, 1, 0, 4, 4).is_err());
        assert_eq!(center_crop(&t, 2, 2).unwrap().shape(), &[3, 2, 2]);
    }

    #[test]
    fn shorter_side_resize_keeps_aspect() {
        let t = Tensor::zeros([3, 20, 40]);
        assert_eq!(resize_shorter_side(&t, 10).shape(), &[3, 10, 20]);
        let t = Tensor::zeros([3, 30, 15]);
        assert_eq!(resize_shorter_side(&t, 10).shape(), &[3, 20, 10]);
    }
}
