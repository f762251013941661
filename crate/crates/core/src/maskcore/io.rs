//! File formats.
//!
//! SGSM score maps (little-endian):
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..4   | magic `SGSM`                            |
//! | 4..8   | u32 version (1)                         |
//! | 8..12  | u32 channels C                          |
//! | 12..16 | u32 height H                            |
//! | 16..20 | u32 width W                             |
//! | 20..   | C·H·W f32, channel-major, row-major     |
//!
//! Label masks are 8-bit indexed PNGs carrying the Pascal VOC palette; 8-bit
//! grayscale PNG and binary PGM (P5) are accepted on input. Binary masks are
//! 8-bit grayscale PNGs with 0 for background and 255 for foreground.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use super::{binarize_saliency, BinaryMask, LabelMask, RgbImage, ScoreMap};
use crate::error::{Error, Result};

pub const SGSM_MAGIC: &[u8; 4] = b"SGSM";
pub const SGSM_VERSION: u32 = 1;
pub const SGSM_HEADER_LEN: usize = 20;

const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(e).in_file(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::Io(e).in_file(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::Io(e).in_file(path))
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let path = path.as_ref();
    decode_score_map(&read_bytes(path)?).map_err(|e| e.in_file(path))
}

pub fn write_score_map(map: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_score_map(map)?)
}

pub(crate) fn encode_score_map(map: &ScoreMap) -> Result<Vec<u8>> {
    if map.channels() == 0 || map.height() == 0 || map.width() == 0 {
        return Err(Error::Usage("refusing to write an empty score map".into()));
    }
    let dims = [map.channels(), map.height(), map.width()];
    let mut header = Vec::with_capacity(3);
    for d in dims {
        header.push(
            u32::try_from(d)
                .map_err(|_| Error::Usage(format!("dimension {d} does not fit in u32")))?,
        );
    }
    let mut out = Vec::with_capacity(SGSM_HEADER_LEN + map.data().len() * 4);
    out.extend_from_slice(SGSM_MAGIC);
    out.extend_from_slice(&SGSM_VERSION.to_le_bytes());
    for d in header {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode_score_map(bytes: &[u8]) -> Result<ScoreMap> {
    if bytes.len() < 4 || &bytes[..4] != SGSM_MAGIC {
        return Err(Error::format(0, "missing SGSM magic"));
    }
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated header"))
    };
    let version = word(4)?;
    if version != SGSM_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let offset = 8 + 4 * i;
        *d = word(offset)? as usize;
        if *d == 0 {
            return Err(Error::format(offset as u64, "zero dimension"));
        }
    }
    let [c, h, w] = dims;
    let count = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(SGSM_HEADER_LEN))
        .ok_or_else(|| Error::format(8, "dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in bytes[SGSM_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                (SGSM_HEADER_LEN + 4 * i) as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v);
    }
    ScoreMap::new(c, h, w, data)
}

/// The 256-entry Pascal VOC colormap, as flat RGB triples.
pub fn pascal_palette() -> [u8; 768] {
    let mut palette = [0u8; 768];
    for i in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        palette[3 * i..3 * i + 3].copy_from_slice(&[r, g, b]);
    }
    palette
}

/// Read a label mask and check its values against `num_classes`.
pub fn read_label_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let mask = decode_label_mask(&read_bytes(path)?).map_err(|e| e.in_file(path))?;
    mask.validate(num_classes).map_err(|e| e.in_file(path))?;
    Ok(mask)
}

pub fn write_label_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_label_png(mask)?)
}

pub(crate) fn encode_label_png(mask: &LabelMask) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(pascal_palette().to_vec());
        let mut writer = enc.write_header().map_err(png_encode_error)?;
        writer
            .write_image_data(mask.data())
            .map_err(png_encode_error)?;
        writer.finish().map_err(png_encode_error)?;
    }
    Ok(out)
}

pub(crate) fn decode_label_mask(bytes: &[u8]) -> Result<LabelMask> {
    if bytes.starts_with(PNG_SIGNATURE) {
        let (height, width, data) = decode_gray8_png(bytes, true)?;
        LabelMask::new(height, width, data)
    } else if bytes.starts_with(b"P5") {
        let (height, width, data) = decode_pgm(bytes)?;
        LabelMask::new(height, width, data)
    } else {
        Err(Error::format(0, "expected an indexed PNG or binary PGM (P5)"))
    }
}

/// Decode an 8-bit single-channel PNG, returning raw sample values.
fn decode_gray8_png(bytes: &[u8], allow_indexed: bool) -> Result<(usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_decode_error)?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    let ok_color = matches!(color, png::ColorType::Grayscale)
        || (allow_indexed && matches!(color, png::ColorType::Indexed));
    if !ok_color {
        return Err(Error::format(
            25,
            format!("expected a single-channel image, found {color:?}"),
        ));
    }
    if depth != png::BitDepth::Eight {
        return Err(Error::format(24, format!("expected 8-bit samples, found {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(16, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_decode_error)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf[..frame.buffer_size()].chunks(frame.line_size) {
        data.extend_from_slice(&row[..w]);
    }
    Ok((h, w, data))
}

fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(start as u64, "PGM header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "malformed PGM header"));
    }
    pos += 1;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            pos as u64,
            format!("PGM maxval {maxval}: only 8-bit masks are supported"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos as u64, "zero dimension"));
    }
    let n = width * height;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated PGM payload"))?;
    Ok((height, width, payload.to_vec()))
}

pub fn write_binary_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_encode_error)?;
        writer.write_image_data(&data).map_err(png_encode_error)?;
        writer.finish().map_err(png_encode_error)?;
    }
    write_bytes(path.as_ref(), &out)
}

/// Read an 8-bit grayscale PNG mask; any nonzero sample is foreground.
pub fn read_binary_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (h, w, data) = decode_gray8_png(&bytes, false).map_err(|e| e.in_file(path))?;
    BinaryMask::new(h, w, data.into_iter().map(|v| v != 0).collect())
}

/// Load a saliency input: an SGSM probability map (thresholded at half its
/// maximum) or an already-binary PNG mask.
pub fn read_saliency(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(SGSM_MAGIC) {
        let map = decode_score_map(&bytes).map_err(|e| e.in_file(path))?;
        binarize_saliency(&map).map_err(|e| e.in_file(path))
    } else {
        read_binary_mask(path)
    }
}

pub fn read_rgb_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::format(0, e.to_string()).in_file(path))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(h as usize, w as usize, img.into_raw())
}

pub fn write_rgb_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer_with_format(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(0, e.to_string()).in_file(path))
}

fn png_encode_error(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Usage(format!("png encoding: {other}")),
    }
}

fn png_decode_error(e: png::DecodingError) -> Error {
    Error::format(0, format!("png decoding: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_small_sgsm() {
        let mut bytes = b"SGSM".to_vec();
        for v in [1u32, 1, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.0f32, 0.5, 1.0, 0.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let map = decode_score_map(&bytes).unwrap();
        assert_eq!((map.channels(), map.height(), map.width()), (1, 2, 2));
        assert_eq!(map.data(), &[0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0u8; 16]);
        match decode_score_map(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_dimension_and_truncation() {
        let header = |c: u32, h: u32, w: u32| {
            let mut b = b"SGSM".to_vec();
            for v in [1, c, h, w] {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b
        };
        assert!(matches!(
            decode_score_map(&header(1, 0, 2)),
            Err(Error::Format { offset: 12, .. })
        ));
        let mut short = header(1, 2, 2);
        short.extend_from_slice(&[0u8; 12]);
        assert!(matches!(
            decode_score_map(&short),
            Err(Error::Format { offset: 32, .. })
        ));
        let mut long = header(1, 1, 1);
        long.extend_from_slice(&[0u8; 5]);
        assert!(matches!(
            decode_score_map(&long),
            Err(Error::Format { offset: 24, .. })
        ));
    }

    #[test]
    fn sgsm_file_size() {
        let map = ScoreMap::zeros(20, 41, 41).unwrap();
        let bytes = encode_score_map(&map).unwrap();
        assert_eq!(bytes.len(), SGSM_HEADER_LEN + 20 * 41 * 41 * 4);
    }

    #[test]
    fn sgsm_write_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let map = ScoreMap::new(2, 2, 3, (0..12).map(|i| i as f32 * 0.3).collect()).unwrap();
        let (a, b) = (dir.path().join("a.sgsm"), dir.path().join("b.sgsm"));
        write_score_map(&map, &a).unwrap();
        write_score_map(&map, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_score_map(&a).unwrap(), map);
    }

    #[test]
    fn palette_matches_voc_colormap() {
        let p = pascal_palette();
        assert_eq!(&p[0..3], &[0, 0, 0]);
        assert_eq!(&p[3..6], &[128, 0, 0]);
        assert_eq!(&p[6..9], &[0, 128, 0]);
        assert_eq!(&p[15 * 3..15 * 3 + 3], &[192, 128, 128]);
        assert_eq!(&p[255 * 3..], &[224, 224, 192]);
    }

    #[test]
    fn label_mask_png_round_trip() {
        let mask = LabelMask::new(2, 2, vec![0, 1, 255, 20]).unwrap();
        let decoded = decode_label_mask(&encode_label_png(&mask).unwrap()).unwrap();
        assert_eq!(decoded, mask);
    }

    #[test]
    fn invalid_label_value_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_label_mask(&LabelMask::new(1, 2, vec![0, 200]).unwrap(), &path).unwrap();
        let err = read_label_mask(&path, 20).unwrap_err();
        assert!(matches!(err.root(), Error::Data(_)));
    }

    #[test]
    fn pgm_fallback() {
        let mut bytes = b"P5\n# comment\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 3, 255]);
        let mask = decode_label_mask(&bytes).unwrap();
        assert_eq!(mask.data(), &[0, 3, 255]);
        assert_eq!((mask.height(), mask.width()), (1, 3));
    }

    #[test]
    fn sixteen_bit_pgm_rejected() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0, 1]);
        assert!(matches!(
            decode_label_mask(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rgb_png_rejected_as_label_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        write_rgb_image(&RgbImage::filled(2, 2, [1, 2, 3]).unwrap(), &path).unwrap();
        let err = read_label_mask(&path, 20).unwrap_err();
        assert!(matches!(err.root(), Error::Format { .. }));
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 1]).unwrap();
        }
        assert!(matches!(decode_label_mask(&out), Err(Error::Format { .. })));
    }

    #[test]
    fn binary_mask_and_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = BinaryMask::new(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let p = dir.path().join("b.png");
        write_binary_mask(&mask, &p).unwrap();
        assert_eq!(read_binary_mask(&p).unwrap(), mask);
        assert_eq!(read_saliency(&p).unwrap(), mask);

        let img = RgbImage::new(1, 2, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let q = dir.path().join("i.png");
        write_rgb_image(&img, &q).unwrap();
        assert_eq!(read_rgb_image(&q).unwrap(), img);
    }

    proptest! {
        #[test]
        fn sgsm_round_trip(
            (c, h, w, data) in (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
                (Just(c), Just(h), Just(w), proptest::collection::vec(-1e6f32..1e6, c * h * w))
            })
        ) {
            let map = ScoreMap::new(c, h, w, data).unwrap();
            let back = decode_score_map(&encode_score_map(&map).unwrap()).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                map.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
