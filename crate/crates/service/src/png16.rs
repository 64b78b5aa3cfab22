//! Grayscale PNG at the wire boundary. Intensities in [0, 1] map to 16-bit
//! levels by rounding.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PngError {
    #[error("not a decodable PNG: {0}")]
    Decode(String),
    #[error("expected grayscale PNG, found {0:?}")]
    Color(png::ColorType),
}

pub fn quantize(v: f32) -> u16 {
    (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize(q: u16) -> f32 {
    (f64::from(q) / 65535.0) as f32
}

pub fn encode(image: &[f32], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().expect("in-memory write");
        let data: Vec<u8> = image.iter().flat_map(|&v| quantize(v).to_be_bytes()).collect();
        w.write_image_data(&data).expect("in-memory write");
    }
    out
}

/// Decodes 8- or 16-bit grayscale into `(width, height, levels)`, 8-bit
/// levels scaled to the 16-bit range.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), PngError> {
    let err = |e: png::DecodingError| PngError::Decode(e.to_string());
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PngError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(PngError::Color(info.color_type));
    }
    let data = &buf[..info.buffer_size()];
    let levels = match info.bit_depth {
        png::BitDepth::Sixteen => data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        png::BitDepth::Eight => data.iter().map(|&b| u16::from(b) * 257).collect(),
        d => return Err(PngError::Decode(format!("unsupported bit depth {d:?}"))),
    };
    Ok((info.width as usize, info.height as usize, levels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip() {
        let img: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let (w, h, levels) = decode(&encode(&img, 4, 3)).unwrap();
        assert_eq!((w, h), (4, 3));
        for (v, q) in img.iter().zip(&levels) {
            assert_eq!(*q, quantize(*v));
            assert!((dequantize(*q) - v).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 65535);
    }

    #[test]
    fn rejects_garbage_and_color() {
        assert!(matches!(decode(b"not a png"), Err(PngError::Decode(_))));
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[1, 2, 3]).unwrap();
        }
        assert!(matches!(decode(&out), Err(PngError::Color(_))));
    }
}
