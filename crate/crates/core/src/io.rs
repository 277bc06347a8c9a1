//! Point-cloud and transform file formats.
//!
//! * `.xyz`: one `x y z [nx ny nz]` line per point, `#` starts a comment.
//! * `.pcb`: little-endian binary, magic `PCB1`, `u32` point count,
//!   `u8` has-normals flag, then `N×3` (or `N×6`) `f32` values.
//! * transforms: 12 whitespace-separated numbers, row-major rotation then
//!   translation.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{PointCloud, RigidTransform, Vec3};

const PCB_MAGIC: &[u8; 4] = b"PCB1";

pub fn read_xyz<R: Read>(reader: R) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match vals.len() {
            3 => points.push(Vec3::new(vals[0], vals[1], vals[2])),
            6 => {
                points.push(Vec3::new(vals[0], vals[1], vals[2]));
                normals.push(Vec3::new(vals[3], vals[4], vals[5]));
            }
            n => {
                return Err(Error::Format(format!(
                    "line {}: expected 3 or 6 values, found {n}",
                    lineno + 1
                )))
            }
        }
    }
    if !normals.is_empty() && normals.len() != points.len() {
        return Err(Error::Format("normals given for only some points".into()));
    }
    if normals.is_empty() {
        PointCloud::new(points)
    } else {
        let normals = normals.into_iter().map(|n| n.normalize()).collect();
        PointCloud::with_normals(points, normals)
    }
}

pub fn write_xyz<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    match cloud.normals() {
        Some(ns) => {
            for (p, n) in cloud.points().iter().zip(ns) {
                writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?;
            }
        }
        None => {
            for p in cloud.points() {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
    }
    Ok(())
}

pub fn read_pcb<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCB_MAGIC {
        return Err(Error::Format("missing PCB1 magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let has_normals = match flag[0] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad normals flag {f}"))),
    };
    let per = if has_normals { 6 } else { 3 };
    let mut buf = vec![0u8; n * per * 4];
    r.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::new();
    for row in vals.chunks_exact(per) {
        points.push(Vec3::new(row[0], row[1], row[2]));
        if has_normals {
            // f32 storage loses unit length at ~1e-7; renormalise.
            normals.push(Vec3::new(row[3], row[4], row[5]).normalize());
        }
    }
    if has_normals {
        PointCloud::with_normals(points, normals)
    } else {
        PointCloud::new(points)
    }
}

pub fn write_pcb<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    w.write_all(PCB_MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&[cloud.has_normals() as u8])?;
    let mut buf = Vec::with_capacity(cloud.len() * 24);
    for (i, p) in cloud.points().iter().enumerate() {
        for v in p.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(ns) = cloud.normals() {
            for v in ns[i].iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Loads `.xyz` or `.pcb` by extension.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("pcb") => read_pcb(BufReader::new(file)),
        Some("xyz") | Some("txt") => read_xyz(file),
        other => Err(Error::Format(format!(
            "unknown point cloud extension {other:?} for {}",
            path.display()
        ))),
    }
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("pcb") => write_pcb(&mut file, cloud)?,
        Some("xyz") | Some("txt") => write_xyz(&mut file, cloud)?,
        other => {
            return Err(Error::Format(format!(
                "unknown point cloud extension {other:?} for {}",
                path.display()
            )))
        }
    }
    file.flush()?;
    Ok(())
}

pub fn format_transform(t: &RigidTransform) -> String {
    t.to_row12()
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses 12 whitespace-separated numbers. The rotation is re-orthonormalised
/// when it is within 1e-5 of SO(3), which absorbs text rounding.
pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))))
        .collect::<Result<_>>()?;
    let arr: [f64; 12] = vals
        .try_into()
        .map_err(|v: Vec<f64>| Error::Format(format!("expected 12 numbers, found {}", v.len())))?;
    let raw = crate::geom::Mat3::new(
        arr[0], arr[1], arr[2], arr[3], arr[4], arr[5], arr[6], arr[7], arr[8],
    );
    let dev = (raw.transpose() * raw - crate::geom::Mat3::identity()).abs().max();
    if dev > 1e-5 || raw.determinant() < 0.0 {
        return Err(Error::Format(format!(
            "transform rotation is not orthonormal (deviation {dev:e})"
        )));
    }
    let svd = raw.svd(true, true);
    let rot = svd.u.unwrap() * svd.v_t.unwrap();
    RigidTransform::new(rot, Vec3::new(arr[9], arr[10], arr[11]))
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    parse_transform(&fs::read_to_string(path)?)
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    fs::write(path, format!("{}\n", format_transform(t)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_with_comments_and_normals() {
        let text = "# header\n0 0 0 0 0 1\n1 2 3 0 1 0 # trailing\n\n";
        let c = read_xyz(text.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points()[1], Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(c.normals().unwrap()[1], Vec3::new(0.0, 1.0, 0.0));
        assert!(read_xyz("1 2\n".as_bytes()).is_err());
    }

    #[test]
    fn pcb_layout() {
        let c = PointCloud::with_normals(
            vec![Vec3::new(0.5, -1.0, 2.0)],
            vec![Vec3::new(1.0, 0.0, 0.0)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_pcb(&mut buf, &c).unwrap();
        assert_eq!(&buf[..4], b"PCB1");
        assert_eq!(u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]), 1);
        assert_eq!(buf[8], 1);
        assert_eq!(buf.len(), 9 + 6 * 4);
        assert_eq!(f32::from_le_bytes([buf[9], buf[10], buf[11], buf[12]]), 0.5);
        let back = read_pcb(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert!(read_pcb(&b"PCB2\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn transform_text_round_trip() {
        let t = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7, Vec3::new(0.1, -0.2, 0.3));
        let back = parse_transform(&format_transform(&t)).unwrap();
        assert!((back.rotation - t.rotation).abs().max() < 1e-14);
        assert!((back.translation - t.translation).norm() < 1e-15);
        assert!(parse_transform("1 0 0 0 1 0 0 0 1 0 0").is_err());
    }
}
