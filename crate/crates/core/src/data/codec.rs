//! Image decoding/encoding. Binary PPM (`P6`, maxval 255) is the native
//! format; PNG is accepted on input.

use super::Image;
use crate::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Encodes as `P6\n<w> <h>\n255\n` followed by raw RGB bytes.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.data().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.data());
    out
}

/// Decodes PPM or PNG, chosen by the leading magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(Error::format(0, "unrecognized image format"))
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected PPM {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("PPM {what} out of range")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            cur.pos as u64,
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(cur.pos as u64, "missing whitespace after PPM header")),
    }
    if width == 0 || height == 0 {
        return Err(Error::format(0, "PPM has a zero extent"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(0, "PPM extents overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("PPM payload truncated: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format((cur.pos + need) as u64, "trailing bytes after PPM payload"));
    }
    Image::new(width, height, payload.to_vec())
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let fail = |e: png::DecodingError| Error::format(0, format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(0, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::format(0, "indexed PNG was not expanded")),
    };
    Image::new(w, h, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_golden() {
        let img = Image::new(1, 1, vec![255, 0, 0]).unwrap();
        let golden: &[u8] = b"P6\n1 1\n255\n\xff\x00\x00";
        assert_eq!(encode_image(&img), golden);
        assert_eq!(decode_image(golden).unwrap(), img);
    }

    #[test]
    fn round_trip_and_comments() {
        let img = Image::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
        let commented = b"P6 # made by hand\n3 2\n# size above\n255\n";
        let mut bytes = commented.to_vec();
        bytes.extend_from_slice(img.data());
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn malformed_inputs() {
        let img = Image::new(2, 2, vec![7; 12]).unwrap();
        let bytes = encode_image(&img);
        assert!(matches!(
            decode_image(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(decode_image(b"P6\n2 2\n65535\n").is_err());
        assert!(decode_image(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_image(b"hello").is_err());
        assert!(decode_image(b"P6\nx 2\n255\n").is_err());
    }

    #[test]
    fn png_decode() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 2, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 255, 4, 5, 6, 0]).unwrap();
        }
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);
    }
}
