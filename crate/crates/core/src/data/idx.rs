use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Loads an IDX image file (`0x00000803`, `N x rows x cols` bytes) and its
/// label file (`0x00000801`). Either may be gzip-compressed. Pixels are
/// scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gz(ip)?;
    let labels = read_maybe_gz(lp)?;

    let magic = be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ip, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let pixels = count * rows * cols;
    if images.len() != 16 + pixels {
        return Err(Error::format(
            ip,
            format!("expected {} bytes for {count} {rows}x{cols} images, found {}", 16 + pixels, images.len()),
        ));
    }

    let magic = be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(lp, format!("bad label magic {magic:#010x}")));
    }
    let label_count = be_u32(&labels, 4, lp)? as usize;
    if labels.len() != 8 + label_count {
        return Err(Error::format(
            lp,
            format!("expected {} bytes for {label_count} labels, found {}", 8 + label_count, labels.len()),
        ));
    }
    if label_count != count {
        return Err(Error::format(lp, format!("{label_count} labels for {count} images")));
    }

    let data = images[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(
        Matrix::from_vec(count, rows * cols, data)?,
        labels,
        class_count,
        ImageShape {
            channels: 1,
            height: rows,
            width: cols,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(pixels: &[[u8; 4]]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, pixels.len() as u32, 2, 2] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for p in pixels {
            out.extend_from_slice(p);
        }
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn two_image_fixture_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i", &idx_images(&[[0, 255, 51, 102], [1, 2, 3, 4]]));
        let l = write(dir.path(), "l", &idx_labels(&[7, 2]));
        let d = load_idx(&i, &l).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![7, 2]);
        assert_eq!(d.images.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.images.row(1), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
        assert_eq!(d.shape, ImageShape { channels: 1, height: 2, width: 2 });
    }

    #[test]
    fn gzip_input_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_images(&[[9, 9, 9, 9]])).unwrap();
        let i = write(dir.path(), "i.gz", &gz.finish().unwrap());
        let l = write(dir.path(), "l", &idx_labels(&[1]));
        assert_eq!(load_idx(&i, &l).unwrap().images.row(0), &[9.0 / 255.0; 4]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let good_i = idx_images(&[[0; 4], [1; 4]]);
        let good_l = idx_labels(&[0, 1]);
        let l = write(dir.path(), "l", &good_l);

        let truncated = write(dir.path(), "t", &good_i[..good_i.len() - 1]);
        assert!(matches!(load_idx(&truncated, &l), Err(Error::Format { .. })));

        let mut bad = good_i.clone();
        bad[3] = 0x01;
        let bad_magic = write(dir.path(), "m", &bad);
        assert!(load_idx(&bad_magic, &l).unwrap_err().to_string().contains("magic"));

        let i = write(dir.path(), "i", &good_i);
        let short_l = write(dir.path(), "s", &idx_labels(&[0]));
        assert!(load_idx(&i, &short_l).unwrap_err().to_string().contains("labels for"));

        let header_only = write(dir.path(), "h", &good_i[..6]);
        assert!(load_idx(&header_only, &l).is_err());
    }
}
