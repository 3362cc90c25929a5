//! File formats: point clouds (binary `SSTP` or CSV) and the `SSTW` named
//! tensor container used for weights and dense-map dumps.
//!
//! ```text
//! SSTP: "SSTP" u32 version=1, u64 count, count × (x, y, z, intensity) f32
//! SSTW: "SSTW" u32 version=1, u32 tensor count, then per tensor
//!       u32 name length, name (UTF-8), u32 rank, rank × u64 dims, f32 payload
//! ```
//!
//! Everything is little-endian. Tensors are written in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, SstError};
use crate::voxelizer::{Point, PointCloud};

pub const POINTS_MAGIC: &[u8; 4] = b"SSTP";
pub const TENSORS_MAGIC: &[u8; 4] = b"SSTW";
pub const FORMAT_VERSION: u32 = 1;

/// Named float32 tensors, ordered by name.
pub type TensorMap = BTreeMap<String, ArrayD<f32>>;

macro_rules! format_err {
    ($($arg:tt)*) => { SstError::Format(format!($($arg)*)) };
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> SstError + '_ {
    move |e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err!("truncated {what}"),
        _ => SstError::Io(e),
    }
}

fn check_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated(what))?;
    if &m != magic {
        return Err(format_err!("{what}: bad magic {m:?}"));
    }
    let version = r.read_u32::<LE>().map_err(truncated(what))?;
    if version != FORMAT_VERSION {
        return Err(format_err!("{what}: unsupported version {version}"));
    }
    Ok(())
}

fn expect_end(r: &mut impl Read, what: &str) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(format_err!("{what}: trailing bytes after payload")),
    }
}

pub fn read_points_binary(r: &mut impl Read) -> Result<PointCloud> {
    check_header(r, POINTS_MAGIC, "point file")?;
    let count = r.read_u64::<LE>().map_err(truncated("point file"))?;
    let mut points = Vec::new();
    for _ in 0..count {
        let mut v = [0f32; 4];
        r.read_f32_into::<LE>(&mut v).map_err(truncated("point file"))?;
        points.push(Point::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64));
    }
    expect_end(r, "point file")?;
    PointCloud::new(points)
}

pub fn read_points_csv(r: impl Read) -> Result<PointCloud> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = reader.headers().map_err(|e| format_err!("point csv: {e}"))?;
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "z", "intensity"] {
        return Err(format_err!(
            "point csv: expected header x,y,z,intensity, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        ));
    }
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err!("point csv: {e}"))?;
        let mut v = [0f64; 4];
        for (slot, field) in v.iter_mut().zip(record.iter()) {
            *slot = field.parse().map_err(|_| format_err!("point csv row {}: bad number {field:?}", line + 1))?;
        }
        points.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    PointCloud::new(points)
}

/// Binary if the file starts with the `SSTP` magic, CSV otherwise.
pub fn read_points(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(POINTS_MAGIC) {
        read_points_binary(&mut Cursor::new(bytes))
    } else {
        read_points_csv(bytes.as_slice())
    }
}

pub fn write_points_binary(cloud: &PointCloud, w: &mut impl Write) -> Result<()> {
    w.write_all(POINTS_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(cloud.len() as u64)?;
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            w.write_f32::<LE>(v as f32)?;
        }
    }
    Ok(())
}

pub fn write_points(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_points_binary(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_tensors(tensors: &TensorMap, w: &mut impl Write) -> Result<()> {
    w.write_all(TENSORS_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u32::<LE>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LE>(t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LE>(d as u64)?;
        }
        for &v in t.iter() {
            w.write_f32::<LE>(v)?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<TensorMap> {
    const WHAT: &str = "tensor file";
    check_header(r, TENSORS_MAGIC, WHAT)?;
    let count = r.read_u32::<LE>().map_err(truncated(WHAT))?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = r.read_u32::<LE>().map_err(truncated(WHAT))? as usize;
        let mut name = Vec::new();
        r.by_ref().take(len as u64).read_to_end(&mut name)?;
        if name.len() != len {
            return Err(format_err!("truncated {WHAT}"));
        }
        let name = String::from_utf8(name).map_err(|_| format_err!("{WHAT}: tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LE>().map_err(truncated(WHAT))?;
        let mut dims = Vec::new();
        let mut size = 1usize;
        for _ in 0..rank {
            let d = r.read_u64::<LE>().map_err(truncated(WHAT))?;
            let d = usize::try_from(d).map_err(|_| format_err!("{WHAT}: dimension {d} too large"))?;
            size = size.checked_mul(d).ok_or_else(|| format_err!("{WHAT}: tensor {name} is too large"))?;
            dims.push(d);
        }
        let mut data = Vec::new();
        for _ in 0..size {
            data.push(r.read_f32::<LE>().map_err(truncated(WHAT))?);
        }
        let t = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("size matches dims");
        if out.insert(name.clone(), t).is_some() {
            return Err(format_err!("{WHAT}: duplicate tensor {name}"));
        }
    }
    expect_end(r, WHAT)?;
    Ok(out)
}

pub fn save_tensors(tensors: &TensorMap, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(tensors, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<TensorMap> {
    read_tensors(&mut BufReader::new(File::open(path)?))
}
