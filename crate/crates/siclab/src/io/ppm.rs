//! Binary PPM (P6, maxval 255) — the canonical image format here: trivially
//! bit-exact, no codec dependencies.

use crate::error::{Result, SicError};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

/// Interleaved 8-bit RGB rows from a [3,H,W] float image in [0,1].
/// Rounding is half-away-from-zero at the tensor's own precision, then
/// clamped — bit-identical to the image-domain rounding the recompression
/// cycle applies, so a written file carries exactly the cycle's bytes.
pub fn tensor_to_rgb8(img: &Tensor<f32>) -> Vec<u8> {
    let s = img.shape();
    assert_eq!(s.len(), 3, "want [3,H,W]");
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = crate::quant::round_half_away(d[(c * h + y) * w + x] * 255.0);
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// [3,H,W] float image in [0,1] (snapped to the 8-bit grid) from interleaved
/// RGB bytes.
pub fn rgb8_to_tensor(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    if rgb.len() != 3 * h * w {
        return Err(SicError::data(format!(
            "rgb buffer holds {} bytes, want {} for {w}x{h}",
            rgb.len(),
            3 * h * w
        )));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a P6 file with maxval 255.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(SicError::data(format!(
            "ppm body holds {} bytes, want {} for {w}x{h}",
            rgb.len(),
            3 * w * h
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Read a P6 file. Header comments (`#`) and arbitrary whitespace are
/// accepted; maxval must be 255.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes).map_err(|msg| SicError::data(format!("{}: {msg}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<Vec<u8>, String> {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(bytes[start..*pos].to_vec())
    };
    let magic = token(&mut pos)?;
    if magic != b"P6" {
        return Err(format!(
            "not a binary PPM (magic {:?})",
            String::from_utf8_lossy(&magic)
        ));
    }
    let parse_int = |t: Vec<u8>| -> std::result::Result<usize, String> {
        String::from_utf8_lossy(&t)
            .parse::<usize>()
            .map_err(|e| format!("bad header integer: {e}"))
    };
    let w = parse_int(token(&mut pos)?)?;
    let h = parse_int(token(&mut pos)?)?;
    let maxval = parse_int(token(&mut pos)?)?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (want 255)"));
    }
    if w == 0 || h == 0 {
        return Err(format!("degenerate dimensions {w}x{h}"));
    }
    // exactly one whitespace byte separates header from body
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing separator before pixel data".into());
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() - pos < need {
        return Err(format!(
            "pixel data truncated: {} bytes, want {need}",
            bytes.len() - pos
        ));
    }
    if bytes.len() - pos > need {
        return Err("trailing bytes after pixel data".into());
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Convenience: load a PPM straight into a [3,H,W] tensor.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, rgb) = read_ppm(path)?;
    rgb8_to_tensor(w, h, &rgb)
}

/// Convenience: save a [3,H,W] tensor as PPM.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    write_ppm(path, s[2], s[1], &tensor_to_rgb8(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir();
        let img = synth::synth_image(4, 2, 24, 17);
        let path = dir.join("a.ppm");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // byte-level: saving again produces identical files
        let path2 = dir.join("b.ppm");
        save_image(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_comments_and_whitespace_tolerated() {
        let body: Vec<u8> = (0..12).collect();
        let mut file = b"P6 # comment\n# another\n 2\t2 \n255\n".to_vec();
        file.extend_from_slice(&body);
        let (w, h, rgb) = parse_ppm(&file).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(rgb, body);
    }

    #[test]
    fn bad_inputs_are_data_errors() {
        assert!(parse_ppm(b"P5\n2 2\n255\nxxxx").is_err());
        assert!(parse_ppm(b"P6\n2 2\n65535\n").is_err());
        let mut short = b"P6\n2 2\n255\n".to_vec();
        short.extend_from_slice(&[0u8; 5]);
        assert!(parse_ppm(&short).unwrap_err().contains("truncated"));
        let mut long = b"P6\n1 1\n255\n".to_vec();
        long.extend_from_slice(&[0u8; 4]);
        assert!(parse_ppm(&long).unwrap_err().contains("trailing"));
    }

    #[test]
    fn rounding_matches_image_domain_contract() {
        // 128.49999/255 rounds down, 128.5/255 rounds up (half away from zero)
        let img = Tensor::new(vec![3, 1, 1], vec![128.4999 / 255.0, 128.5 / 255.0, 1.0]).unwrap();
        let rgb = tensor_to_rgb8(&img);
        // f32 storage nudges exact halves; compare against the f64 recomputation
        for (i, &b) in rgb.iter().enumerate() {
            let expect = (img.data()[i] as f64 * 255.0).round().clamp(0.0, 255.0) as u8;
            assert_eq!(b, expect);
        }
        assert_eq!(rgb[2], 255);
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("siclab-ppm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
