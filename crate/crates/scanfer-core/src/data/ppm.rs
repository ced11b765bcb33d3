//! Binary Netpbm codecs: PPM (P6) for color images, PGM (P5) for grayscale
//! maps. Only maxval 255 is supported, which makes the byte encoding
//! lossless to re-encode.

use super::DataError;
use crate::tensor::Tensor;

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderParser { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) -> Result<(), DataError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(DataError::Decode("truncated header".into())),
            }
        }
    }

    fn read_int(&mut self) -> Result<usize, DataError> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(DataError::Decode("expected an integer in header".into()));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse()
            .map_err(|_| DataError::Decode(format!("integer {text} out of range")))
    }

    /// Consume the single whitespace byte that separates header and payload.
    fn finish_header(&mut self) -> Result<usize, DataError> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(DataError::Decode("missing separator after maxval".into())),
        }
    }
}

fn decode_netpbm(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>), DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DataError::Decode(format!(
            "bad magic, expected {:?}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    let mut parser = HeaderParser::new(&bytes[2..]);
    let width = parser.read_int()?;
    let height = parser.read_int()?;
    let maxval = parser.read_int()?;
    if maxval != 255 {
        return Err(DataError::Decode(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(DataError::Decode("zero image dimension".into()));
    }
    let payload_start = 2 + parser.finish_header()?;
    let expected = width * height * channels;
    let payload = bytes
        .get(payload_start..payload_start + expected)
        .ok_or_else(|| DataError::Decode("truncated payload".into()))?;
    Ok((width, height, payload.to_vec()))
}

/// Decode a binary P6 image into a `(3,H,W)` tensor of pixel/255 values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (width, height, payload) = decode_netpbm(bytes, b"P6", 3)?;
    let mut data = vec![0.0; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            let px = (y * width + x) * 3;
            for c in 0..3 {
                data[(c * height + y) * width + x] = payload[px + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[3, height, width], data)?)
}

/// Encode a `(3,H,W)` tensor as binary P6; values are clamped to [0,1] and
/// rounded to 8 bits.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>, DataError> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(DataError::Invalid(format!(
                "encode_ppm expects (3,H,W), got {other:?}"
            )))
        }
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(data[(c * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

/// Decode a binary P5 grayscale image into an `(H,W)` tensor.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (width, height, payload) = decode_netpbm(bytes, b"P5", 1)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[height, width], data)?)
}

/// Encode an `(H,W)` tensor as binary P5.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>, DataError> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(DataError::Invalid(format!(
                "encode_pgm expects (H,W), got {other:?}"
            )))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn white_pixel_decodes_to_ones() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn channel_major_layout() {
        // 2x1 image: black then red
        let bytes = b"P6\n2 1\n255\n\x00\x00\x00\xff\x00\x00";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(5);
        let mut payload = b"P6\n7 5\n255\n".to_vec();
        for _ in 0..7 * 5 * 3 {
            payload.push(rng.below(256) as u8);
        }
        let img = decode_ppm(&payload).unwrap();
        let encoded = encode_ppm(&img).unwrap();
        assert_eq!(encoded, payload);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"XX").is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x01\x02").is_err());
    }

    #[test]
    fn unsupported_maxval_rejected() {
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x80\x80\x80";
        let img = decode_ppm(bytes).unwrap();
        assert!((img.data()[0] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip_quantization_bound() {
        let mut rng = Rng::new(6);
        let map = Tensor::uniform(&[4, 6], 0.0, 1.0, &mut rng);
        let decoded = decode_pgm(&encode_pgm(&map).unwrap()).unwrap();
        assert!(map.max_abs_diff(&decoded) <= 0.5 / 255.0 + 1e-12);
    }
}
