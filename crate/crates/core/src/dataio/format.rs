use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::tensor::Tensor;

pub const CLOUD_MAGIC: &[u8; 4] = b"MPT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPTC";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Text,
    Binary,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Text => "txt",
            CloudFormat::Binary => "mpt",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "txt" => Some(CloudFormat::Text),
            "mpt" => Some(CloudFormat::Binary),
            _ => None,
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(CloudFormat::Text),
            "binary" => Ok(CloudFormat::Binary),
            _ => Err(Error::Argument(format!("unknown cloud format `{s}` (expected text or binary)"))),
        }
    }
}

fn feature_width(cloud: &PointCloud) -> usize {
    cloud.features().map_or(0, |f| f.shape()[1])
}

/// Text form: `#` comments, a `points N features F labels L` header, then
/// one `x y z [f…] [label…]` row per point. Floats use Rust's shortest
/// round-trip formatting, which never needs more than 17 significant digits.
pub fn cloud_to_text(cloud: &PointCloud) -> String {
    let (n, f, l) = (cloud.len(), feature_width(cloud), cloud.label_cols());
    let mut out = format!("points {n} features {f} labels {l}\n");
    for i in 0..n {
        let p = cloud.positions()[i];
        let _ = write!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        if let Some(feat) = cloud.features() {
            for v in &feat.data()[i * f..(i + 1) * f] {
                let _ = write!(out, " {v:?}");
            }
        }
        for v in &cloud.label_table()[i * l..(i + 1) * l] {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn cloud_from_text(text: &str) -> Result<PointCloud> {
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = rows.next().ok_or_else(|| Error::Parse {
        line: text.lines().count().max(1),
        msg: "missing `points N features F labels L` header".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let count = |i: usize| fields[i].parse::<usize>();
    let (n, f, l) = match fields.as_slice() {
        ["points", _, "features", _, "labels", _] => match (count(1), count(3), count(5)) {
            (Ok(n), Ok(f), Ok(l)) => (n, f, l),
            _ => {
                return Err(Error::Parse {
                    line: hline,
                    msg: format!("non-integer count in header `{header}`"),
                })
            }
        },
        _ => {
            return Err(Error::Parse {
                line: hline,
                msg: format!("expected `points N features F labels L`, found `{header}`"),
            })
        }
    };
    if n == 0 {
        return Err(Error::Parse {
            line: hline,
            msg: "a cloud needs at least one point".into(),
        });
    }
    let width = 3 + f + l;
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n * l);
    let mut last = hline;
    for (line, row) in rows {
        if positions.len() == n {
            return Err(Error::Parse {
                line,
                msg: format!("more than the {n} declared points"),
            });
        }
        last = line;
        let cols: Vec<&str> = row.split_whitespace().collect();
        if cols.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} columns, found {}", cols.len()),
            });
        }
        let float = |s: &str| {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                msg: format!("`{s}` is not a finite number"),
            })
        };
        let p: Point = [float(cols[0])?, float(cols[1])?, float(cols[2])?];
        positions.push(p);
        for s in &cols[3..3 + f] {
            features.push(float(s)?);
        }
        for s in &cols[3 + f..] {
            labels.push(s.parse::<i32>().map_err(|_| Error::Parse {
                line,
                msg: format!("`{s}` is not an integer label"),
            })?);
        }
    }
    if positions.len() != n {
        return Err(Error::Parse {
            line: last,
            msg: format!("header declares {n} points, file has {}", positions.len()),
        });
    }
    assemble(positions, f, features, l, labels)
}

fn assemble(positions: Vec<Point>, f: usize, features: Vec<f64>, l: usize, labels: Vec<i32>) -> Result<PointCloud> {
    let n = positions.len();
    let mut cloud = PointCloud::new(positions)?;
    if f > 0 {
        cloud = cloud.with_features(Tensor::new(&[n, f], features)?)?;
    }
    if l > 0 {
        cloud = cloud.with_label_table(labels, l)?;
    }
    Ok(cloud)
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
}

/// Binary form: `MPT1`, little-endian `u32` N, F, L, then `N·(3+F)` `f64`
/// point rows and `N·L` `i32` labels.
pub fn cloud_to_bytes(cloud: &PointCloud) -> Result<Vec<u8>> {
    let (n, f, l) = (cloud.len(), feature_width(cloud), cloud.label_cols());
    let mut out = Vec::with_capacity(16 + n * (3 + f) * 8 + n * l * 4);
    out.extend_from_slice(CLOUD_MAGIC);
    for (v, what) in [(n, "point count"), (f, "feature width"), (l, "label width")] {
        out.extend_from_slice(&u32_of(v, what)?);
    }
    for i in 0..n {
        for v in cloud.positions()[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(feat) = cloud.features() {
            for v in &feat.data()[i * f..(i + 1) * f] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for v in cloud.label_table() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Cursor over a little-endian byte buffer that reports truncation as a
/// format error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const W: usize>(&mut self) -> Result<[u8; W]> {
        let end = self.pos + W;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice of length W"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    /// Fails early when `count` items of `width` bytes cannot all be present,
    /// so a corrupt header cannot trigger a huge allocation.
    fn expect(&self, count: usize, width: usize) -> Result<()> {
        match count.checked_mul(width) {
            Some(b) if b <= self.bytes.len() - self.pos => Ok(()),
            _ => Err(Error::Format(format!("header promises {count} values, file is too short"))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

fn check_magic(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    let found: [u8; 4] = r
        .take()
        .map_err(|_| Error::Format("file too short for the magic bytes".into()))?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn cloud_from_bytes(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, CLOUD_MAGIC)?;
    let (n, f, l) = (r.u32()?, r.u32()?, r.u32()?);
    if n == 0 {
        return Err(Error::Format("a cloud needs at least one point".into()));
    }
    r.expect(n, (3 + f) * 8 + l * 4)?;
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * f);
    for _ in 0..n {
        positions.push([r.f64()?, r.f64()?, r.f64()?]);
        for _ in 0..f {
            features.push(r.f64()?);
        }
    }
    let labels = (0..n * l).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if positions.iter().flatten().chain(&features).any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite coordinate or feature".into()));
    }
    assemble(positions, f, features, l, labels)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Text => cloud_to_text(cloud).into_bytes(),
        CloudFormat::Binary => cloud_to_bytes(cloud)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Binary => cloud_from_bytes(&bytes),
        CloudFormat::Text => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{} is not UTF-8: {e}", path.display())))?;
            cloud_from_text(&text)
        }
    }
}

/// Named tensors in the binary layout: `MPTC`, `u32` count, then per tensor
/// a `u32` name length, the UTF-8 name, `u32` rank, `u32` dims and the `f64`
/// payload, all little-endian.
pub fn checkpoint_to_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        out.extend_from_slice(&u32_of(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    r.expect(count, 12)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        r.expect(len, 1)?;
        let name = String::from_utf8(bytes[r.pos..r.pos + len].to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        r.pos += len;
        let rank = r.u32()?;
        r.expect(rank, 4)?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        r.expect(numel, 8)?;
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    checkpoint_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
