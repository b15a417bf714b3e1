//! On-disk formats: `.xyz`/`.vpc` clouds, pose files, `VPRM` checkpoints,
//! `VDSC` descriptor dumps and the CSV manifests.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

const VPC_MAGIC: &[u8; 4] = b"VPC1";
const VPRM_MAGIC: &[u8; 4] = b"VPRM";
const VDSC_MAGIC: &[u8; 4] = b"VDSC";
pub const VPRM_VERSION: u32 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if vals.len() != 3 {
            return format_err(format!("{}:{}: expected 3 values", path.display(), lineno + 1));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(points)
}

/// Binary cloud: `VPC1`, u32 count, then `count × 3` little-endian f32.
pub fn write_vpc(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(VPC_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for c in p.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_vpc(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != VPC_MAGIC {
        return format_err(format!("{}: missing VPC1 header", path.display()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * 12 {
        return format_err(format!("{}: expected {count} points", path.display()));
    }
    Ok(bytes[8..]
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64;
            Vector3::new(f(0), f(4), f(8))
        })
        .collect())
}

/// Reads `.vpc` or `.xyz` depending on the extension.
pub fn read_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => read_xyz(path),
        _ => read_vpc(path),
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    PointCloud::new(read_points(path)?)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => write_xyz(path, cloud),
        _ => write_vpc(path, cloud),
    }
}

/// Pose text: 12 floats, row-major `[R|t]`.
pub fn format_pose(tf: &RigidTransform) -> String {
    let v = tf.to_row_major();
    let mut s = String::new();
    for row in 0..3 {
        let line: Vec<String> = v[row * 4..row * 4 + 4].iter().map(|x| format!("{x}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_poses(text: &str) -> Result<Vec<RigidTransform>> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("pose file: {e}")))?;
    if vals.is_empty() || vals.len() % 12 != 0 {
        return format_err(format!("pose file holds {} values, expected a multiple of 12", vals.len()));
    }
    vals.chunks_exact(12).map(RigidTransform::from_row_major).collect()
}

pub fn write_pose(path: &Path, tf: &RigidTransform) -> Result<()> {
    fs::write(path, format_pose(tf))?;
    Ok(())
}

pub fn write_poses(path: &Path, tfs: &[RigidTransform]) -> Result<()> {
    let text: String = tfs.iter().map(format_pose).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn read_pose(path: &Path) -> Result<RigidTransform> {
    let poses = read_poses(path)?;
    if poses.len() != 1 {
        return format_err(format!("{}: expected one pose, found {}", path.display(), poses.len()));
    }
    Ok(poses[0])
}

/// A pose file may hold several poses back to back.
pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    parse_poses(&fs::read_to_string(path)?)
}

/// One named array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// `VPRM`, u32 version, then per tensor: u16 name length, name bytes,
/// u32 rank, u32 dims, f64 little-endian data. Tensors run to end of file.
pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VPRM_MAGIC);
    buf.extend_from_slice(&VPRM_VERSION.to_le_bytes());
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(Error::InvalidInput(format!("tensor {} shape does not match data", t.name)));
        }
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput("tensor name too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return format_err("checkpoint truncated");
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4)? != VPRM_MAGIC {
        return format_err("missing VPRM header");
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VPRM_VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let mut out = Vec::new();
    loop {
        let len_bytes = match take(2) {
            Ok(b) => b,
            Err(_) => break,
        };
        let len = u16::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Raw little-endian f64 vector (single descriptor dump).
pub fn write_f64_vec(path: &Path, v: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64_vec(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % 8 != 0 {
        return format_err(format!("{}: not a whole number of f64 values", path.display()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// `VDSC`, u32 count, u32 dim, then `count × dim` f64.
pub fn write_vdsc(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidInput("descriptors have inconsistent dimensions".into()));
    }
    let mut buf = Vec::with_capacity(12 + rows.len() * dim * 8);
    buf.extend_from_slice(VDSC_MAGIC);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        for x in r {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_vdsc(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != VDSC_MAGIC {
        return format_err(format!("{}: missing VDSC header", path.display()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + count * dim * 8 {
        return format_err(format!("{}: expected {count}×{dim} values", path.display()));
    }
    if dim == 0 {
        return Ok(vec![Vec::new(); count]);
    }
    Ok(bytes[12..]
        .chunks_exact(dim * 8)
        .map(|row| {
            row.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

/// One row of a traverse manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub frame_id: u64,
    pub path: String,
    pub environment: String,
    pub route_s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pose_path: String,
}

impl ManifestRow {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Manifest rows plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn cloud_path(&self, row: &ManifestRow) -> PathBuf {
        self.resolve(&row.path)
    }

    pub fn load_cloud(&self, row: &ManifestRow) -> Result<PointCloud> {
        let pts = read_points(&self.cloud_path(row))?;
        let pose = read_pose(&self.resolve(&row.pose_path)).ok();
        PointCloud::with_meta(pts, row.frame_id, row.environment.parse()?, row.route_s, pose)
    }

    pub fn environments(&self) -> Vec<String> {
        let mut envs: Vec<String> = self.rows.iter().map(|r| r.environment.clone()).collect();
        envs.sort();
        envs.dedup();
        envs
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest { root, rows })
}

/// Sidecar metadata for a `VDSC` dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMeta {
    pub frame_id: u64,
    pub environment: String,
    pub route_s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl DescriptorMeta {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

impl From<&ManifestRow> for DescriptorMeta {
    fn from(r: &ManifestRow) -> Self {
        Self {
            frame_id: r.frame_id,
            environment: r.environment.clone(),
            route_s: r.route_s,
            x: r.x,
            y: r.y,
            z: r.z,
        }
    }
}

pub fn write_descriptor_meta(path: &Path, rows: &[DescriptorMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_descriptor_meta(path: &Path) -> Result<Vec<DescriptorMeta>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}
