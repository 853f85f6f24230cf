//! Image loading for `infer`: binary PPM (P6) or a raw tensor file, resized
//! with nearest-neighbor so the shorter side matches the target, then
//! center-cropped. Pixel values are scaled to [0, 1].

use std::fs;
use std::path::Path;

use mvtk_tensor::{Result, Shape, Tensor, TensorError};

pub fn load_image(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P6") {
        let (w, h, data) = parse_ppm(&bytes)?;
        Ok(preprocess(&data, w, h, resolution))
    } else if bytes.starts_with(mvtk_tensor::io::MAGIC) {
        let t: Tensor<f32> = mvtk_tensor::io::read_tensor(&mut bytes.as_slice())?;
        let s = t.shape();
        if s.c() != 3 {
            return Err(TensorError::Format(format!(
                "tensor image must have 3 channels, got {}",
                s.c()
            )));
        }
        if s.h() == resolution && s.w() == resolution {
            return Ok(t);
        }
        // resample via the same nearest-neighbor path
        let mut rgb = vec![0u8; s.h() * s.w() * 3];
        for y in 0..s.h() {
            for x in 0..s.w() {
                for c in 0..3 {
                    rgb[(y * s.w() + x) * 3 + c] =
                        (t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Ok(preprocess(&rgb, s.w(), s.h(), resolution))
    } else {
        Err(TensorError::Format(
            "unrecognized image format (expected P6 PPM or an MVTK tensor)".into(),
        ))
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // header: magic, width, height, maxval; comments start with '#'
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(TensorError::Format("truncated ppm header".into()));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| TensorError::Format("malformed ppm header".into()))?
                .to_string(),
        );
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" {
        return Err(TensorError::Format(format!("not a P6 ppm: {}", fields[0])));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| TensorError::Format(format!("bad ppm field '{s}'")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(TensorError::Format(format!(
            "only maxval 255 supported, got {maxval}"
        )));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(TensorError::Format(format!(
            "ppm truncated: need {need} pixel bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

fn preprocess(rgb: &[u8], w: usize, h: usize, res: usize) -> Tensor<f32> {
    // scale the shorter side to `res`, nearest neighbor
    let scale = res as f64 / w.min(h) as f64;
    let (sw, sh) = (
        ((w as f64 * scale).round() as usize).max(res),
        ((h as f64 * scale).round() as usize).max(res),
    );
    let (x0, y0) = ((sw - res) / 2, (sh - res) / 2);
    let shape = Shape::nchw(1, 3, res, res);
    let mut data = vec![0f32; shape.numel()];
    for y in 0..res {
        let sy = (((y + y0) as f64 + 0.5) / scale) as usize;
        let sy = sy.min(h - 1);
        for x in 0..res {
            let sx = (((x + x0) as f64 + 0.5) / scale) as usize;
            let sx = sx.min(w - 1);
            for c in 0..3 {
                data[shape.idx(0, c, y, x)] = rgb[(sy * w + sx) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(shape, data).unwrap()
}
