//! Image containers and PFM / PPM file I/O.
//!
//! Both image types store pixels row-major, top row first, with the three
//! colour channels interleaved. PFM files are written little-endian with the
//! rows bottom-up as the format requires; reading normalises back to
//! top-down.

use std::path::Path;

use diffcore::Tensor;

use crate::error::{invalid, Error, Result};

/// Linear radiance image, three channels, `f64` per value.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HdrImage {
    /// Checks length, finiteness and non-negativity.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            let (y, x, c) = (i / 3 / width, i / 3 % width, i % 3);
            return Err(invalid!(
                "value {} at row {y}, column {x}, channel {c} is not a finite non-negative radiance",
                data[i]
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Applies `f` to every value; the result must stay a valid radiance image.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `(1, 3, H, W)` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], out).expect("shape")
    }

    /// Image `index` of an `(N, 3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t
            .dims4()
            .ok_or_else(|| invalid!("expected an NCHW tensor, got {:?}", t.shape()))?;
        if c != 3 || index >= n {
            return Err(invalid!(
                "cannot take image {index} of tensor {:?}",
                t.shape()
            ));
        }
        let plane = h * w;
        let src = &t.data()[index * 3 * plane..(index + 1) * 3 * plane];
        let mut data = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                data.push(src[c * plane + i]);
            }
        }
        Self::new(h, w, data)
    }

    /// Copies the `size.0 x size.1` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: (usize, usize)) -> Result<Self> {
        let (ch, cw) = size;
        if y + ch > self.height || x + cw > self.width {
            return Err(invalid!(
                "crop {ch}x{cw} at ({y}, {x}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(ch * cw * 3);
        for row in y..y + ch {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + cw * 3]);
        }
        Ok(Self {
            height: ch,
            width: cw,
            data,
        })
    }
}

/// 8-bit image with its unit-interval view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LdrImage {
    height: usize,
    width: usize,
    bytes: Vec<u8>,
}

impl LdrImage {
    pub fn new(height: usize, width: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(invalid!(
                "{height}x{width}x3 image needs {} bytes, got {}",
                height * width * 3,
                bytes.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bytes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn unit(&self, i: usize) -> f64 {
        f64::from(self.bytes[i]) / 255.0
    }

    /// `bytes / 255` as a floating image.
    pub fn unit_view(&self) -> HdrImage {
        HdrImage {
            height: self.height,
            width: self.width,
            data: self.bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits the ASCII header of a Netpbm-family file into `count` tokens,
/// skipping `#` comments. Returns the tokens and the offset of the payload,
/// which starts after the single whitespace byte following the last token.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated header".into()));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| Error::Format("header is not ASCII".into()))?;
        tokens.push(tok.to_string());
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after header".into()));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, what: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} {tok:?}")))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let (magic, _) = header_tokens(bytes, 1)?;
    match magic[0].as_str() {
        "PF" => {}
        "Pf" => return Err(Error::Format("grayscale unsupported".into())),
        other => return Err(Error::Format(format!("not a PFM file (magic {other:?})"))),
    }
    let (tok, offset) = header_tokens(bytes, 4)?;
    let width = parse_dim(&tok[1], "width")?;
    let height = parse_dim(&tok[2], "height")?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format(format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let n = width * height * 3;
    let payload = &bytes[offset..];
    if payload.len() < n * 4 {
        return Err(Error::Format(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            n * 4
        )));
    }
    let mut data = vec![0.0; n];
    for (k, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = k / 3 / width;
        let (x, c) = (k / 3 % width, k % 3);
        let y = height - 1 - file_row;
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "non-finite value at row {y}, column {x}, channel {c}"
            )));
        }
        data[(y * width + x) * 3 + c] = f64::from(v);
    }
    HdrImage::new(height, width, data)
}

pub fn encode_pfm(img: &HdrImage) -> Result<Vec<u8>> {
    if img.is_empty() {
        return Err(invalid!("empty image"));
    }
    if let Some(v) = img.data.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(invalid!("cannot store radiance value {v}"));
    }
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<LdrImage> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != "P6" {
        return Err(Error::Format(format!(
            "not a binary PPM (magic {:?})",
            tok[0]
        )));
    }
    let width = parse_dim(&tok[1], "width")?;
    let height = parse_dim(&tok[2], "height")?;
    let maxval = parse_dim(&tok[3], "maxval")?;
    if maxval > 255 {
        return Err(Error::Format("16-bit PPM unsupported".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported, expected 255"
        )));
    }
    let n = width * height * 3;
    let payload = &bytes[offset..];
    if payload.len() < n {
        return Err(Error::Format(format!(
            "truncated payload: {} of {n} bytes",
            payload.len()
        )));
    }
    LdrImage::new(height, width, payload[..n].to_vec())
}

pub fn encode_ppm(img: &LdrImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.bytes);
    out
}

pub fn read_hdr(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    decode_pfm(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_hdr(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pfm(img)?)
}

pub fn read_ldr(path: impl AsRef<Path>) -> Result<LdrImage> {
    let path = path.as_ref();
    decode_ppm(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_ldr(img: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(img))
}

/// Scales `img` so its mean over all values equals `target`.
pub fn normalize_mean(img: &HdrImage, target: f64) -> Result<HdrImage> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(invalid!("target mean must be positive, got {target}"));
    }
    if img.is_empty() {
        return Err(invalid!("empty image"));
    }
    let mean = img.mean();
    if mean <= 0.0 {
        return Err(invalid!("cannot normalise an all-zero image"));
    }
    if mean == target {
        return Ok(img.clone());
    }
    let scale = target / mean;
    img.map(|v| v * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pixel_pfm_round_trip() {
        let img = HdrImage::new(1, 1, vec![0.5, 0.5, 0.5]).unwrap();
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_rows_are_bottom_up_on_disk() {
        let img = HdrImage::from_fn(2, 1, |y, _, _| y as f64).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let header = b"PF\n1 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // first stored row is the bottom image row (value 1)
        assert_eq!(
            &bytes[header.len()..header.len() + 4],
            &1.0f32.to_le_bytes()
        );
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pfm_errors() {
        let err = decode_pfm(b"Pf\n1 1\n-1.0\n\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("grayscale unsupported"));
        assert!(decode_pfm(b"PF\n2 2\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"PF\nx 2\n-1.0\n").is_err());

        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [1.0f32, f32::NAN, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = decode_pfm(&bytes).unwrap_err().to_string();
        assert!(err.contains("row 0, column 0, channel 1"), "{err}");
    }

    #[test]
    fn write_guards() {
        assert!(HdrImage::new(1, 1, vec![0.1, -0.2, 0.3]).is_err());
        let empty = HdrImage::new(0, 0, vec![]).unwrap();
        assert!(encode_pfm(&empty)
            .unwrap_err()
            .to_string()
            .contains("empty image"));
    }

    #[test]
    fn ppm_unit_view_and_errors() {
        let img = LdrImage::new(1, 1, vec![128, 0, 255]).unwrap();
        let unit = img.unit_view();
        assert_eq!(unit.data()[0], 128.0 / 255.0);
        assert!((unit.data()[0] - 0.50196).abs() < 1e-5);
        assert_eq!(unit.data()[2], 1.0);

        let err = decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("16-bit PPM unsupported"));
        assert!(decode_ppm(b"P6\n1 1\n100\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.bytes(), &[1, 2, 3]);
    }

    #[test]
    fn normalize_mean_examples() {
        let img = HdrImage::constant(2, 2, 2.0).unwrap();
        assert_eq!(
            normalize_mean(&img, 0.5).unwrap(),
            HdrImage::constant(2, 2, 0.5).unwrap()
        );

        let img = HdrImage::new(2, 1, vec![0.2, 0.2, 0.2, 0.6, 0.6, 0.6]).unwrap();
        let out = normalize_mean(&img, 0.5).unwrap();
        for (got, want) in out.data().iter().zip([0.25, 0.25, 0.25, 0.75, 0.75, 0.75]) {
            assert!((got - want).abs() < 1e-15);
        }

        let half = HdrImage::constant(1, 1, 0.5).unwrap();
        assert_eq!(normalize_mean(&half, 0.5).unwrap(), half);
        assert!(normalize_mean(&HdrImage::constant(1, 1, 0.0).unwrap(), 0.5).is_err());
    }

    #[test]
    fn tensor_layout_round_trip() {
        let img = HdrImage::from_fn(2, 3, |y, x, c| (y * 10 + x * 3 + c) as f64).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert_eq!(t.data()[6], 1.0); // channel 1, pixel (0, 0)
        assert_eq!(HdrImage::from_tensor(&t, 0).unwrap(), img);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_is_exact_at_f32(
            (h, w, vals) in (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), prop::collection::vec(0.0f32..1e4, h * w * 3))
            })
        ) {
            let img = HdrImage::new(h, w, vals.iter().map(|&v| f64::from(v)).collect()).unwrap();
            let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn ppm_round_trip_is_byte_exact(
            (h, w, bytes) in (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), prop::collection::vec(any::<u8>(), h * w * 3))
            })
        ) {
            let file = encode_ppm(&LdrImage::new(h, w, bytes).unwrap());
            prop_assert_eq!(encode_ppm(&decode_ppm(&file).unwrap()), file);
        }

        #[test]
        fn normalize_mean_is_idempotent(vals in prop::collection::vec(0.01f64..10.0, 3..30)) {
            let n = vals.len() / 3 * 3;
            let img = HdrImage::new(1, n / 3, vals[..n].to_vec()).unwrap();
            let once = normalize_mean(&img, 0.5).unwrap();
            let twice = normalize_mean(&once, 0.5).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
            prop_assert!((once.mean() - 0.5).abs() < 1e-12);
        }
    }
}
