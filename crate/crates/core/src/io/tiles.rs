use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use crate::imgproc::{ChannelImage, InstanceMask, RgbImage};
use crate::{Error, Result};

/// Sample type used when writing channel stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelFormat {
    /// Rounded and clamped to 0..=65535.
    U16,
    F32,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn tiff_err(path: &Path) -> impl Fn(tiff::TiffError) -> Error + '_ {
    move |e| Error::format(path, e)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    encode_png(&mut bytes, img.width() as u32, img.height() as u32, img.data(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_png(
    out: &mut Vec<u8>,
    width: u32,
    height: u32,
    data: &[u8],
    color: image::ExtendedColorType,
) -> image::ImageResult<()> {
    use image::ImageEncoder;
    image::codecs::png::PngEncoder::new(out).write_image(data, width, height, color)
}

fn decode_pages(path: &Path) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut decoder = Decoder::new(open(path)?).map_err(tiff_err(path))?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = decoder.dimensions().map_err(tiff_err(path))?;
        let data: Vec<f64> = match decoder.read_image().map_err(tiff_err(path))? {
            DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::U32(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
            DecodingResult::F64(v) => v,
            _ => return Err(Error::format(path, "unsupported TIFF sample type")),
        };
        if data.len() != (w * h) as usize {
            return Err(Error::format(path, "expected single-sample (grayscale) pages"));
        }
        pages.push((w as usize, h as usize, data));
        if !decoder.more_images() {
            break;
        }
        decoder.next_image().map_err(tiff_err(path))?;
    }
    Ok(pages)
}

/// Read every page of a grayscale multi-page TIFF as one channel.
pub fn read_channels(path: &Path, mpp: f64) -> Result<Vec<ChannelImage>> {
    decode_pages(path)?
        .into_iter()
        .map(|(w, h, data)| {
            ChannelImage::new(w, h, mpp, data.into_iter().map(|v| v.max(0.0)).collect())
                .map_err(|e| Error::format(path, e))
        })
        .collect()
}

pub fn write_channels(path: &Path, channels: &[ChannelImage], format: PixelFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(tiff_err(path))?;
    for ch in channels {
        let (w, h) = (ch.width() as u32, ch.height() as u32);
        match format {
            PixelFormat::U16 => {
                let data: Vec<u16> = ch.pixels().iter().map(|v| v.round().clamp(0.0, 65535.0) as u16).collect();
                enc.write_image::<colortype::Gray16>(w, h, &data)
            }
            PixelFormat::F32 => {
                let data: Vec<f32> = ch.pixels().iter().map(|&v| v as f32).collect();
                enc.write_image::<colortype::Gray32Float>(w, h, &data)
            }
        }
        .map_err(tiff_err(path))?;
    }
    Ok(())
}

/// Instance labels from a TIFF (first page) or a 8/16-bit grayscale PNG.
pub fn read_mask(path: &Path, mpp: f64) -> Result<InstanceMask> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let (w, h, labels) = if is_png {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma16();
        let (w, h) = img.dimensions();
        (w as usize, h as usize, img.into_raw().into_iter().map(u32::from).collect())
    } else {
        let (w, h, data) = decode_pages(path)?.swap_remove(0);
        let labels = data
            .into_iter()
            .map(|v| {
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    Err(Error::format(path, format!("label {v} is not a non-negative integer")))
                } else {
                    Ok(v as u32)
                }
            })
            .collect::<Result<Vec<u32>>>()?;
        (w, h, labels)
    };
    InstanceMask::new(w, h, mpp, labels).map_err(|e| Error::format(path, e))
}

pub fn write_mask(path: &Path, mask: &InstanceMask) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(tiff_err(path))?;
    enc.write_image::<colortype::Gray32>(mask.width() as u32, mask.height() as u32, mask.labels())
        .map_err(tiff_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = ChannelImage::new(3, 2, 0.5, vec![0.0, 1.0, 2.0, 65535.0, 7.0, 9.0]).unwrap();
        let b = ChannelImage::new(3, 2, 0.5, vec![0.25, 1.5, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p16 = dir.path().join("a.tiff");
        write_channels(&p16, &[a.clone(), a.clone()], PixelFormat::U16).unwrap();
        assert_eq!(read_channels(&p16, 0.5).unwrap(), vec![a.clone(), a]);
        let pf = dir.path().join("b.tiff");
        write_channels(&pf, std::slice::from_ref(&b), PixelFormat::F32).unwrap();
        assert_eq!(read_channels(&pf, 0.5).unwrap(), vec![b]);
    }

    #[test]
    fn mask_and_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = InstanceMask::new(2, 2, 1.0, vec![0, 1, 70000, 3]).unwrap();
        let p = dir.path().join("m.tiff");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p, 1.0).unwrap(), m);

        let rgb = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let p = dir.path().join("he.png");
        write_rgb_png(&p, &rgb).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), rgb);
    }

    #[test]
    fn missing_files_named() {
        let err = read_channels(Path::new("/nonexistent/x.tiff"), 1.0).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert!(err.to_string().contains("/nonexistent/x.tiff"));
    }
}
