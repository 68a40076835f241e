//! Binary scene file format.
//!
//! Little-endian layout: magic `GPCL`, version `u32 = 1`, `N u32`, `C_0 u32`,
//! `class_count u32`, `has_labels u8`, then `N` records of
//! `[3 x f32 coords][C_0 x f32 feats][i32 label if has_labels]`.
//! Origin ids are the record order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::cloud::{PointCloud, IGNORE};
use crate::error::{Error, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"GPCL";
pub const SCENE_VERSION: u32 = 1;

pub fn write_scene<W: Write>(w: &mut W, cloud: &PointCloud, class_count: usize) -> Result<()> {
    cloud.check_labels(class_count)?;
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&SCENE_VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(cloud.feat_dim() as u32).to_le_bytes())?;
    w.write_all(&(class_count as u32).to_le_bytes())?;
    w.write_all(&[cloud.labels().is_some() as u8])?;
    for i in 0..cloud.len() {
        for c in cloud.coords()[i] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        for &f in cloud.feats().row(i) {
            w.write_all(&(f as f32).to_le_bytes())?;
        }
        if let Some(l) = cloud.labels() {
            w.write_all(&l[i].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a scene, returning the cloud and the class count from the header.
pub fn read_scene<R: Read>(r: &mut R) -> Result<(PointCloud, usize)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != SCENE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(r, "version")?;
    if version != SCENE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = read_u32(r, "point count")? as usize;
    let feat_dim = read_u32(r, "feature width")? as usize;
    let class_count = read_u32(r, "class count")? as usize;
    let mut flag = [0u8; 1];
    read_exact(r, &mut flag, "label flag")?;
    let has_labels = match flag[0] {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("label flag must be 0 or 1, got {v}"))),
    };
    if class_count < 2 {
        return Err(Error::Format(format!("class count {class_count} below 2")));
    }

    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * feat_dim);
    let mut labels = has_labels.then(|| Vec::with_capacity(n));
    for i in 0..n {
        let what = "truncated record";
        let p = [read_f32(r, what)?, read_f32(r, what)?, read_f32(r, what)?];
        coords.push(p.map(f64::from));
        for _ in 0..feat_dim {
            feats.push(read_f32(r, what)? as f64);
        }
        if let Some(l) = labels.as_mut() {
            let y = read_i32(r, what)?;
            if y < IGNORE || y >= class_count as i32 {
                return Err(Error::Format(format!(
                    "label {y} at record {i} out of range for {class_count} classes"
                )));
            }
            l.push(y);
        }
    }
    let feats = Array2::from_shape_vec((n, feat_dim), feats).expect("sized above");
    let cloud = PointCloud::new(coords, feats, labels).map_err(|e| Error::Format(e.to_string()))?;
    Ok((cloud, class_count))
}

pub fn save_scene(cloud: &PointCloud, class_count: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_scene(&mut w, cloud, class_count)?;
    w.flush()?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<(PointCloud, usize)> {
    read_scene(&mut BufReader::new(File::open(path)?))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("unexpected end of file reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i32<R: Read>(r: &mut R, what: &str) -> Result<i32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(i32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn three_points() -> PointCloud {
        PointCloud::new(
            vec![[0.5, -1.25, 2.0], [1.0, 0.0, 0.125], [-3.0, 4.5, 0.0]],
            array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]],
            Some(vec![0, IGNORE, 2]),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_at_single_precision() {
        let c = three_points();
        let mut buf = Vec::new();
        write_scene(&mut buf, &c, 3).unwrap();
        assert_eq!(buf.len(), 21 + 3 * (3 * 4 + 2 * 4 + 4));
        let (back, k) = read_scene(&mut buf.as_slice()).unwrap();
        assert_eq!(k, 3);
        assert_eq!(back.labels(), c.labels());
        assert_eq!(back.origin_ids(), c.origin_ids());
        for (a, b) in back.coords().iter().zip(c.coords()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
        for (a, b) in back.feats().iter().zip(c.feats()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let c = three_points();
        let mut buf = Vec::new();
        write_scene(&mut buf, &c, 3).unwrap();
        // patch the last label to 3 == class_count
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&3i32.to_le_bytes());
        assert!(matches!(read_scene(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(write_scene(&mut Vec::new(), &c, 2).is_err());
    }

    #[test]
    fn empty_truncated_and_bad_magic() {
        assert!(read_scene(&mut [].as_slice()).is_err());
        let mut buf = Vec::new();
        write_scene(&mut buf, &three_points(), 3).unwrap();
        assert!(read_scene(&mut &buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_scene(&mut buf.as_slice()).is_err());
    }
}
