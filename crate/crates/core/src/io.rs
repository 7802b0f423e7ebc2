//! PNG and `.aqf` float-field I/O.
//!
//! `.aqf` layout, all little-endian:
//!
//! ```text
//! "AQF1" | u32 height | u32 width | u32 channels | f32 * (h*w*c), row-major, channel-interleaved
//! ```

use std::fs;
use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Field3, ImageRGB, CHANNELS};

pub const AQF_MAGIC: &[u8; 4] = b"AQF1";
const AQF_HEADER: usize = 16;

/// 8-bit value to the internal [0, 1] domain.
#[inline]
pub fn from_u8(v: u8) -> f64 {
    f64::from(v) / 255.0
}

/// Internal value to 8 bits: `round(clamp(v)·255)`.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_from_image(img: &RgbImage) -> ImageRGB {
    let (w, h) = img.dimensions();
    Field3::from_fn(h as usize, w as usize, |c, y, x| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn rgb_to_image(img: &ImageRGB) -> RgbImage {
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_u8(img.get(0, y, x)),
            to_u8(img.get(1, y, x)),
            to_u8(img.get(2, y, x)),
        ])
    })
}

pub fn read_png(path: &Path) -> Result<ImageRGB> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(rgb_from_image(&img.to_rgb8()))
}

pub fn write_png(path: &Path, img: &ImageRGB) -> Result<()> {
    rgb_to_image(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Raw contents of an `.aqf` file, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatGrid {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(AQF_HEADER + self.data.len() * 4);
        out.extend_from_slice(AQF_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < AQF_HEADER || &bytes[..4] != AQF_MAGIC {
            return Err(Error::format(path, "missing AQF1 header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (word(4), word(8), word(12));
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
        if bytes.len() != AQF_HEADER + count * 4 {
            return Err(Error::format(
                path,
                format!(
                    "expected {} payload bytes for {height}x{width}x{channels}, found {}",
                    count * 4,
                    bytes.len() - AQF_HEADER
                ),
            ));
        }
        let data = bytes[AQF_HEADER..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

impl From<&Field3> for FloatGrid {
    fn from(f: &Field3) -> Self {
        let mut data = Vec::with_capacity(f.data().len());
        for y in 0..f.height() {
            for x in 0..f.width() {
                for c in 0..CHANNELS {
                    data.push(f.get(c, y, x) as f32);
                }
            }
        }
        Self {
            height: f.height(),
            width: f.width(),
            channels: CHANNELS,
            data,
        }
    }
}

impl From<&DepthMap> for FloatGrid {
    fn from(d: &DepthMap) -> Self {
        Self {
            height: d.height(),
            width: d.width(),
            channels: 1,
            data: d.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

pub fn read_field(path: &Path) -> Result<Field3> {
    let g = FloatGrid::read(path)?;
    if g.channels != CHANNELS {
        return Err(Error::format(
            path,
            format!("expected 3 channels, found {}", g.channels),
        ));
    }
    let field = Field3::from_fn(g.height, g.width, |c, y, x| {
        f64::from(g.data[(y * g.width + x) * CHANNELS + c])
    });
    field.ensure_finite()?;
    Ok(field)
}

pub fn write_field(path: &Path, field: &Field3) -> Result<()> {
    FloatGrid::from(field).write(path)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let g = FloatGrid::read(path)?;
    if g.channels != 1 {
        return Err(Error::format(
            path,
            format!("expected 1 channel, found {}", g.channels),
        ));
    }
    DepthMap::new(
        g.height,
        g.width,
        g.data.iter().map(|&v| f64::from(v)).collect(),
    )
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    FloatGrid::from(depth).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let g = FloatGrid {
            height: 2,
            width: 1,
            channels: 3,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        };
        let bytes = g.encode();
        assert_eq!(&bytes[..4], b"AQF1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn field_is_channel_interleaved_on_disk() {
        let f = Field3::from_fn(1, 2, |c, _, x| (c * 10 + x) as f64);
        let g = FloatGrid::from(&f);
        assert_eq!(g.data, vec![0.0, 10.0, 20.0, 1.0, 11.0, 21.0]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut bytes = FloatGrid {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![0.0; 4],
        }
        .encode();
        bytes.pop();
        assert!(FloatGrid::decode(&bytes, Path::new("x")).is_err());
        assert!(FloatGrid::decode(b"AQF2xxxxxxxxxxxx", Path::new("x")).is_err());
    }

    #[test]
    fn u8_conversion() {
        assert_eq!(to_u8(from_u8(200)), 200);
        assert_eq!(to_u8(1.7), 255);
        assert_eq!(to_u8(0.5), 128);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Field3::from_fn(3, 4, |c, y, x| (c + y + x) as f64 / 8.0);
        let p = dir.path().join("f.aqf");
        write_field(&p, &f).unwrap();
        assert_eq!(read_field(&p).unwrap(), f);

        let png = dir.path().join("i.png");
        let img = f.map(|v| to_u8(v) as f64 / 255.0);
        write_png(&png, &img).unwrap();
        assert_eq!(read_png(&png).unwrap(), img);

        let d = DepthMap::new(2, 2, vec![0.5, 1.0, 2.0, 8.25]).unwrap();
        let dp = dir.path().join("d.depth.aqf");
        write_depth(&dp, &d).unwrap();
        assert_eq!(read_depth(&dp).unwrap(), d);
    }
}
