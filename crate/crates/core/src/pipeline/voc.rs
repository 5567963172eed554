use std::io::BufWriter;
use std::path::Path;

use crate::codec;
use crate::dcrf::LabelMap;
use crate::error::{Error, Result};
use crate::mask::ClassTable;
use crate::reliability::ReliabilityMap;

/// The 256-entry PASCAL VOC colormap, flattened RGB.
pub fn voc_palette() -> [u8; 768] {
    let mut pal = [0u8; 768];
    for i in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal[3 * i..3 * i + 3].copy_from_slice(&[r, g, b]);
    }
    pal
}

/// Writes `contents` to a temporary sibling of `path` and renames it into place.
pub(crate) fn atomic_write(
    path: &Path,
    contents: impl FnOnce(&mut BufWriter<&mut std::fs::File>) -> Result<()>,
) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        contents(&mut w)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Indexed-colour PNG of `s` with the VOC palette; pixel value = class id.
pub fn emit_voc_mask(s: &LabelMap, classes: &ClassTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let max_label = classes.len().min(255);
    let mut data = Vec::with_capacity(s.s.len());
    for &l in &s.s {
        if l as usize > max_label {
            return Err(Error::Config(format!(
                "label {l} has no palette entry (table has {} classes)",
                classes.len()
            )));
        }
        data.push(l as u8);
    }
    let palette = voc_palette();
    atomic_write(path, |w| {
        codec::encode_indexed(path, w, s.width as u32, s.height as u32, &palette, &data)
    })
}

/// 8-bit grayscale: 0 = unreliable, 255 = reliable.
pub fn emit_reliability_png(r: &ReliabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u8> = r.r.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    atomic_write(path, |w| {
        codec::encode_gray(path, w, r.width as u32, r.height as u32, &data)
    })
}

/// Decodes a mask written by [`emit_voc_mask`] back into labels.
pub fn read_voc_mask(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let png = codec::read_png_raw(path)?;
    if png.color != png::ColorType::Indexed {
        return Err(Error::codec(path, "mask is not palette-indexed"));
    }
    Ok(LabelMap {
        width: png.width as usize,
        height: png.height as usize,
        s: png.data.into_iter().map(u16::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_matches_voc_reference_colours() {
        let p = voc_palette();
        let colour = |i: usize| [p[3 * i], p[3 * i + 1], p[3 * i + 2]];
        assert_eq!(colour(0), [0, 0, 0]);
        assert_eq!(colour(1), [128, 0, 0]);
        assert_eq!(colour(2), [0, 128, 0]);
        assert_eq!(colour(12), [64, 0, 128]);
        assert_eq!(colour(15), [192, 128, 128]);
        assert_eq!(colour(20), [0, 64, 128]);
        assert_eq!(colour(255), [224, 224, 192]);
    }
}
