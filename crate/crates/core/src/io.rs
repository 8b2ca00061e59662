//! File codecs: NPY v1.0, stored-entry NPZ, station CSV and binary PGM.
//!
//! NPY carries only the raster, so georeferencing travels in a `key=value`
//! sidecar (`<file>.meta`) or, inside an NPZ, in a `meta.txt` entry.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::grid::{is_missing, GeoTransform, Grid};
use crate::preprocess::NormSpec;
use crate::stations::{Station, StationSet};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A decoded NPY array, always widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Encodes a C-order `<f8` array.
pub fn npy_bytes(shape: &[usize], data: &[f64]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {dims}, }}");
    // magic + version + length field + header + '\n' must be a multiple of 64
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.extend(std::iter::repeat_n(' ', (64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::BadNpyHeader(format!("missing key `{key}`")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

fn parse_shape(header: &str) -> Result<Vec<usize>> {
    let rest = header_value(header, "shape")?;
    let bad = || Error::BadNpyHeader("malformed shape".into());
    let rest = rest.strip_prefix('(').ok_or_else(bad)?;
    let inner = &rest[..rest.find(')').ok_or_else(bad)?];
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad()))
        .collect()
}

/// Decodes an NPY v1.0 stream holding `<f8` or `<f4` data in C order.
pub fn npy_from_bytes(buf: &[u8]) -> Result<NpyArray> {
    if buf.len() < 10 {
        if buf.len() >= 6 && &buf[..6] != NPY_MAGIC {
            return Err(Error::BadMagic);
        }
        return Err(Error::TruncatedFile);
    }
    if &buf[..6] != NPY_MAGIC {
        return Err(Error::BadMagic);
    }
    if (buf[6], buf[7]) != (1, 0) {
        return Err(Error::UnsupportedVersion(buf[6], buf[7]));
    }
    let hlen = u16::from_le_bytes([buf[8], buf[9]]) as usize;
    let header = buf.get(10..10 + hlen).ok_or(Error::TruncatedFile)?;
    let header = std::str::from_utf8(header).map_err(|_| Error::BadNpyHeader("header is not ASCII".into()))?;
    if !header.trim_start().starts_with('{') {
        return Err(Error::BadNpyHeader("header is not a dict literal".into()));
    }

    let descr = header_value(header, "descr")?;
    let quote = descr.chars().next().filter(|c| *c == '\'' || *c == '"');
    let descr = quote
        .and_then(|q| descr[1..].split(q).next())
        .ok_or_else(|| Error::BadNpyHeader("malformed descr".into()))?;
    let width = match descr {
        "<f8" => 8,
        "<f4" => 4,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    let fortran = header_value(header, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::BadNpyHeader("Fortran-order arrays are not supported".into()));
    } else if !fortran.starts_with("False") {
        return Err(Error::BadNpyHeader("malformed fortran_order".into()));
    }
    let shape = parse_shape(header)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::BadNpyHeader("shape overflows".into()))?;
    let nbytes = count.checked_mul(width).ok_or_else(|| Error::BadNpyHeader("shape overflows".into()))?;
    let payload = buf[10 + hlen..].get(..nbytes).ok_or(Error::TruncatedFile)?;
    let data = if width == 8 {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    };
    Ok(NpyArray { shape, data })
}

fn array_to_grid(arr: NpyArray, meta: Option<GridMeta>) -> Result<Grid> {
    let (rows, cols) = match arr.shape[..] {
        [r, c] => (r, c),
        _ => return Err(Error::ShapeMismatch(format!("expected a 2-D array, got shape {:?}", arr.shape))),
    };
    let meta = meta.unwrap_or_default();
    Grid::new(rows, cols, arr.data, meta.transform, meta.timestamp)
}

/// Georeference and time stamp carried next to a raster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMeta {
    pub transform: GeoTransform,
    pub timestamp: i64,
}

impl Default for GridMeta {
    /// Pixel space: row `r` sits at latitude `-r`, column `c` at longitude `c`.
    fn default() -> Self {
        GridMeta {
            transform: GeoTransform {
                lat_origin: 0.0,
                lon_origin: 0.0,
                dlat: -1.0,
                dlon: 1.0,
            },
            timestamp: 0,
        }
    }
}

impl GridMeta {
    pub fn of(grid: &Grid) -> Self {
        GridMeta {
            transform: *grid.transform(),
            timestamp: grid.timestamp(),
        }
    }

    fn lines(&self, prefix: &str) -> String {
        let t = &self.transform;
        format!(
            "{prefix}lat_origin={}\n{prefix}lon_origin={}\n{prefix}dlat={}\n{prefix}dlon={}\n{prefix}timestamp={}\n",
            sig(t.lat_origin, 17),
            sig(t.lon_origin, 17),
            sig(t.dlat, 17),
            sig(t.dlon, 17),
            self.timestamp
        )
    }

    pub fn to_text(&self) -> String {
        self.lines("")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        Self::from_pairs(&pairs, "")
    }

    fn from_pairs(pairs: &[(String, String)], prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            let key = format!("{prefix}{k}");
            pairs
                .iter()
                .find(|(pk, _)| *pk == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::BadMeta(format!("missing `{key}`")))
        };
        let num = |k: &str| -> Result<f64> {
            let v = get(k)?;
            v.parse::<f64>().map_err(|_| Error::BadMeta(format!("`{prefix}{k}` is not a number: {v}")))
        };
        let ts = get("timestamp")?;
        let transform = GeoTransform::new(num("lat_origin")?, num("lon_origin")?, num("dlat")?, num("dlon")?)
            .map_err(|e| Error::BadMeta(e.to_string()))?;
        Ok(GridMeta {
            transform,
            timestamp: ts.parse().map_err(|_| Error::BadMeta(format!("bad timestamp `{ts}`")))?,
        })
    }
}

/// Flat `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::BadMeta(format!("not a key=value line: `{l}`")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Sidecar path for an NPY file: `<path>.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `grid` as `<f8` NPY plus its `.meta` sidecar.
pub fn write_npy(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, npy_bytes(&[grid.rows(), grid.cols()], grid.values()))?;
    fs::write(meta_path(path), GridMeta::of(grid).to_text())?;
    Ok(())
}

/// Reads an NPY raster; the sidecar is optional and defaults to pixel space.
pub fn read_npy(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let arr = npy_from_bytes(&fs::read(path)?)?;
    let mp = meta_path(path);
    let meta = if mp.exists() {
        Some(GridMeta::from_text(&fs::read_to_string(mp)?)?)
    } else {
        None
    };
    array_to_grid(arr, meta)
}

fn check_entry_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "meta"
        && !name.contains(['/', '\\', '=', '\n', '\r'])
        && name.is_ascii();
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("invalid archive entry name `{name}`")))
    }
}

struct ZipEntry {
    name: String,
    data: Vec<u8>,
}

const DOS_DATE_1980: u16 = 0x21;

fn zip_bytes(entries: &[ZipEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut central = Vec::new();
    for e in entries {
        let crc = crc32fast::hash(&e.data);
        let size = u32::try_from(e.data.len()).map_err(|_| Error::BadZip("entry exceeds 4 GiB".into()))?;
        let offset = u32::try_from(out.len()).map_err(|_| Error::BadZip("archive exceeds 4 GiB".into()))?;
        let name = e.name.as_bytes();

        out.extend_from_slice(&0x0403_4b50u32.to_le_bytes());
        out.extend_from_slice(&20u16.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes()); // flags
        out.extend_from_slice(&0u16.to_le_bytes()); // stored
        out.extend_from_slice(&0u16.to_le_bytes()); // time
        out.extend_from_slice(&DOS_DATE_1980.to_le_bytes());
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&size.to_le_bytes());
        out.extend_from_slice(&size.to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&e.data);

        central.extend_from_slice(&0x0201_4b50u32.to_le_bytes());
        central.extend_from_slice(&20u16.to_le_bytes()); // made by
        central.extend_from_slice(&20u16.to_le_bytes()); // needed
        central.extend_from_slice(&0u16.to_le_bytes());
        central.extend_from_slice(&0u16.to_le_bytes());
        central.extend_from_slice(&0u16.to_le_bytes());
        central.extend_from_slice(&DOS_DATE_1980.to_le_bytes());
        central.extend_from_slice(&crc.to_le_bytes());
        central.extend_from_slice(&size.to_le_bytes());
        central.extend_from_slice(&size.to_le_bytes());
        central.extend_from_slice(&(name.len() as u16).to_le_bytes());
        central.extend_from_slice(&[0; 8]); // extra, comment, disk, internal attrs
        central.extend_from_slice(&0u32.to_le_bytes()); // external attrs
        central.extend_from_slice(&offset.to_le_bytes());
        central.extend_from_slice(name);
    }
    let cd_offset = u32::try_from(out.len()).map_err(|_| Error::BadZip("archive exceeds 4 GiB".into()))?;
    let count = u16::try_from(entries.len()).map_err(|_| Error::BadZip("too many entries".into()))?;
    out.extend_from_slice(&central);
    out.extend_from_slice(&0x0605_4b50u32.to_le_bytes());
    out.extend_from_slice(&[0; 4]); // disk numbers
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(central.len() as u32).to_le_bytes());
    out.extend_from_slice(&cd_offset.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    Ok(out)
}

fn rd_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::BadZip("record runs past end of file".into()))
}

fn rd_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::BadZip("record runs past end of file".into()))
}

fn rd_u64(b: &[u8], at: usize) -> Result<u64> {
    b.get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::BadZip("record runs past end of file".into()))
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::BadZip("offset overflow".into()))
}

/// Fills 0xFFFFFFFF placeholders from a zip64 extra field, in the order the
/// format lists them.
fn apply_zip64(extra: &[u8], fields: &mut [&mut u64]) -> Result<()> {
    let mut at = 0;
    while at + 4 <= extra.len() {
        let id = rd_u16(extra, at)?;
        let len = rd_u16(extra, at + 2)? as usize;
        if id == 0x0001 {
            let mut p = at + 4;
            for f in fields.iter_mut() {
                if **f == 0xFFFF_FFFF {
                    if p + 8 > at + 4 + len {
                        return Err(Error::BadZip("short zip64 extra field".into()));
                    }
                    **f = rd_u64(extra, p)?;
                    p += 8;
                }
            }
            return Ok(());
        }
        at += 4 + len;
    }
    if fields.iter().any(|f| **f == 0xFFFF_FFFF) {
        return Err(Error::BadZip("missing zip64 extra field".into()));
    }
    Ok(())
}

fn read_zip(buf: &[u8]) -> Result<Vec<ZipEntry>> {
    const EOCD_SIG: u32 = 0x0605_4b50;
    if buf.len() < 22 {
        return Err(Error::BadZip("file too short for a zip archive".into()));
    }
    let search_from = buf.len().saturating_sub(22 + 0xFFFF);
    let eocd = (search_from..=buf.len() - 22)
        .rev()
        .find(|&i| rd_u32(buf, i).ok() == Some(EOCD_SIG))
        .ok_or_else(|| Error::BadZip("end of central directory not found".into()))?;
    let mut count = rd_u16(buf, eocd + 10)? as u64;
    let mut cd_offset = rd_u32(buf, eocd + 16)? as u64;
    if count == 0xFFFF || cd_offset == 0xFFFF_FFFF {
        // zip64 end-of-central-directory locator sits just before the EOCD
        let loc = eocd.checked_sub(20).ok_or_else(|| Error::BadZip("missing zip64 locator".into()))?;
        if rd_u32(buf, loc)? != 0x0706_4b50 {
            return Err(Error::BadZip("missing zip64 locator".into()));
        }
        let z = to_usize(rd_u64(buf, loc + 8)?)?;
        if rd_u32(buf, z)? != 0x0606_4b50 {
            return Err(Error::BadZip("bad zip64 end record".into()));
        }
        count = rd_u64(buf, z + 32)?;
        cd_offset = rd_u64(buf, z + 48)?;
    }

    let mut entries: Vec<ZipEntry> = Vec::new();
    let mut at = to_usize(cd_offset)?;
    for _ in 0..count {
        if rd_u32(buf, at)? != 0x0201_4b50 {
            return Err(Error::BadZip("bad central directory record".into()));
        }
        let flags = rd_u16(buf, at + 8)?;
        let method = rd_u16(buf, at + 10)?;
        let crc = rd_u32(buf, at + 16)?;
        let mut csize = rd_u32(buf, at + 20)? as u64;
        let mut usize_ = rd_u32(buf, at + 24)? as u64;
        let nlen = rd_u16(buf, at + 28)? as usize;
        let xlen = rd_u16(buf, at + 30)? as usize;
        let clen = rd_u16(buf, at + 32)? as usize;
        let mut local = rd_u32(buf, at + 42)? as u64;
        let name = buf
            .get(at + 46..at + 46 + nlen)
            .ok_or_else(|| Error::BadZip("entry name runs past end of file".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::BadZip("entry name is not UTF-8".into()))?;
        let extra = buf
            .get(at + 46 + nlen..at + 46 + nlen + xlen)
            .ok_or_else(|| Error::BadZip("extra field runs past end of file".into()))?;
        apply_zip64(extra, &mut [&mut usize_, &mut csize, &mut local])?;
        at += 46 + nlen + xlen + clen;

        if flags & 1 != 0 {
            return Err(Error::BadZip(format!("entry `{name}` is encrypted")));
        }
        if method != 0 {
            return Err(Error::UnsupportedCompression { name, method });
        }
        if csize != usize_ {
            return Err(Error::BadZip(format!("stored entry `{name}` has mismatched sizes")));
        }
        let lh = to_usize(local)?;
        if rd_u32(buf, lh)? != 0x0403_4b50 {
            return Err(Error::BadZip(format!("bad local header for `{name}`")));
        }
        let data_start = lh + 30 + rd_u16(buf, lh + 26)? as usize + rd_u16(buf, lh + 28)? as usize;
        let data = buf
            .get(data_start..data_start + to_usize(csize)?)
            .ok_or_else(|| Error::BadZip(format!("entry `{name}` runs past end of file")))?;
        if crc32fast::hash(data) != crc {
            return Err(Error::BadZip(format!("CRC mismatch in `{name}`")));
        }
        if entries.iter().any(|e| e.name == name) {
            return Err(Error::DuplicateEntry(name));
        }
        entries.push(ZipEntry {
            name,
            data: data.to_vec(),
        });
    }
    Ok(entries)
}

/// Builds an NPZ archive: one `<name>.npy` per grid plus `meta.txt` with
/// `<name>.<key>=value` georeference lines.
pub fn npz_bytes(grids: &[(&str, &Grid)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(grids.len() + 1);
    let mut meta = String::new();
    for (i, (name, grid)) in grids.iter().enumerate() {
        check_entry_name(name)?;
        if grids[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateEntry((*name).to_string()));
        }
        entries.push(ZipEntry {
            name: format!("{name}.npy"),
            data: npy_bytes(&[grid.rows(), grid.cols()], grid.values()),
        });
        meta.push_str(&GridMeta::of(grid).lines(&format!("{name}.")));
    }
    entries.push(ZipEntry {
        name: "meta.txt".into(),
        data: meta.into_bytes(),
    });
    zip_bytes(&entries)
}

/// Decodes an NPZ archive into named grids in archive order. Entries
/// without a `meta.txt` record fall back to pixel-space georeference.
pub fn npz_from_bytes(buf: &[u8]) -> Result<Vec<(String, Grid)>> {
    let entries = read_zip(buf)?;
    let meta = match entries.iter().find(|e| e.name == "meta.txt") {
        Some(e) => {
            let text = std::str::from_utf8(&e.data).map_err(|_| Error::BadMeta("meta.txt is not UTF-8".into()))?;
            parse_key_values(text)?
        }
        None => Vec::new(),
    };
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.name != "meta.txt") {
        let name = e.name.strip_suffix(".npy").unwrap_or(&e.name).to_string();
        let prefix = format!("{name}.");
        let m = if meta.iter().any(|(k, _)| k.starts_with(&prefix)) {
            Some(GridMeta::from_pairs(&meta, &prefix)?)
        } else {
            None
        };
        out.push((name, array_to_grid(npy_from_bytes(&e.data)?, m)?));
    }
    Ok(out)
}

pub fn write_npz(grids: &[(&str, &Grid)], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, npz_bytes(grids)?)?;
    Ok(())
}

pub fn read_npz(path: impl AsRef<Path>) -> Result<Vec<(String, Grid)>> {
    npz_from_bytes(&fs::read(path)?)
}

pub const STATION_CSV_HEADER: &str = "id,lat,lon,value";

pub fn station_csv_string(set: &StationSet) -> Result<String> {
    let mut out = String::from(STATION_CSV_HEADER);
    out.push('\n');
    for s in set.stations() {
        if s.id.contains([',', '"', '\n', '\r']) {
            return Err(Error::InvalidStation(format!("id `{}` cannot be written as a CSV field", s.id)));
        }
        out.push_str(&format!("{},{},{},{}\n", s.id, sig(s.lat, 17), sig(s.lon, 17), sig(s.value, 17)));
    }
    Ok(out)
}

pub fn parse_station_csv(text: &str) -> Result<StationSet> {
    let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    if lines.next() != Some(STATION_CSV_HEADER) {
        return Err(Error::BadHeader);
    }
    let mut stations: Vec<Station> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::BadRow { line: line_no, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |k: usize, what: &str| -> Result<f64> {
            fields[k].trim().parse::<f64>().map_err(|_| bad(format!("{what} `{}` is not a number", fields[k])))
        };
        let (lat, lon, value) = (num(1, "lat")?, num(2, "lon")?, num(3, "value")?);
        if !value.is_finite() || value < 0.0 {
            return Err(Error::NonFiniteValue { line: line_no });
        }
        let id = fields[0].trim();
        if stations.iter().any(|s| s.id == id) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        let st = Station::new(id, lat, lon, value).map_err(|e| bad(e.to_string()))?;
        stations.push(st);
    }
    StationSet::new(stations)
}

pub fn write_station_csv(set: &StationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, station_csv_string(set)?)?;
    Ok(())
}

pub fn read_station_csv(path: impl AsRef<Path>) -> Result<StationSet> {
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::BadHeader)?;
    parse_station_csv(text)
}

/// 8-bit binary PGM of the normalized field; missing pixels are black.
pub fn pgm_bytes(grid: &Grid, spec: &NormSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut out = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    out.extend(grid.values().iter().map(|&v| {
        if is_missing(v) {
            0
        } else {
            (255.0 * spec.forward(v)).round().clamp(0.0, 255.0) as u8
        }
    }));
    Ok(out)
}

pub fn write_pgm(grid: &Grid, spec: &NormSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, pgm_bytes(grid, spec)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MISSING;
    use crate::synth::SplitMixRng;

    fn random_grid(rows: usize, cols: usize, seed: u64) -> Grid {
        let mut rng = SplitMixRng::new(seed);
        let t = GeoTransform::new(35.5, 101.25, -0.1, 0.1).unwrap();
        Grid::from_fn(rows, cols, t, 1_700_000_000, |_, _| {
            if rng.next_f64() < 0.1 {
                MISSING
            } else {
                rng.uniform(0.0, 50.0)
            }
        })
        .unwrap()
    }

    fn same_bits(a: &Grid, b: &Grid) -> bool {
        a.shape() == b.shape()
            && a.transform() == b.transform()
            && a.timestamp() == b.timestamp()
            && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    fn replace_bytes(buf: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        assert_eq!(from.len(), to.len());
        let at = buf.windows(from.len()).position(|w| w == from).unwrap();
        let mut out = buf.to_vec();
        out[at..at + to.len()].copy_from_slice(to);
        out
    }

    #[test]
    fn npy_header_is_aligned() {
        let b = npy_bytes(&[17, 23], &vec![0.0; 17 * 23]);
        let hlen = u16::from_le_bytes([b[8], b[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(b[10 + hlen - 1], b'\n');
        assert_eq!(b.len(), 10 + hlen + 17 * 23 * 8);
    }

    #[test]
    fn npy_round_trip() {
        let g = random_grid(17, 23, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.npy");
        write_npy(&g, &p).unwrap();
        assert!(same_bits(&read_npy(&p).unwrap(), &g));
    }

    #[test]
    fn npy_without_sidecar_is_pixel_space() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.npy");
        fs::write(&p, npy_bytes(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let g = read_npy(&p).unwrap();
        assert_eq!(g.transform(), &GridMeta::default().transform);
        assert_eq!(g.get(1, 2), 5.0);
    }

    #[test]
    fn npy_f4_widens() {
        let mut b = replace_bytes(&npy_bytes(&[1, 2], &[0.0, 0.0]), b"<f8", b"<f4");
        b.truncate(b.len() - 16);
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&0.25f32.to_le_bytes());
        assert_eq!(npy_from_bytes(&b).unwrap().data, vec![1.5, 0.25]);
    }

    #[test]
    fn npy_malformed() {
        let good = npy_bytes(&[2, 2], &[1.0; 4]);
        assert!(matches!(npy_from_bytes(&[]), Err(Error::TruncatedFile)));
        assert!(matches!(npy_from_bytes(b"PK\x03\x04 not an npy at all"), Err(Error::BadMagic)));
        assert!(matches!(npy_from_bytes(&good[..good.len() - 1]), Err(Error::TruncatedFile)));
        assert!(matches!(npy_from_bytes(&good[..20]), Err(Error::TruncatedFile)));
        let mut v2 = good.clone();
        v2[6] = 2;
        assert!(matches!(npy_from_bytes(&v2), Err(Error::UnsupportedVersion(2, 0))));
        let i8 = replace_bytes(&good, b"<f8", b"<i8");
        assert!(matches!(npy_from_bytes(&i8), Err(Error::UnsupportedDtype(d)) if d == "<i8"));
        let fortran = replace_bytes(&good, b"False", b"True ");
        assert!(matches!(npy_from_bytes(&fortran), Err(Error::BadNpyHeader(_))));
        for cut in 0..good.len() {
            assert!(npy_from_bytes(&good[..cut]).is_err());
        }
    }

    #[test]
    fn npz_round_trip_by_name() {
        let a = random_grid(5, 6, 1);
        let b = random_grid(3, 9, 2).with_timestamp(-7);
        let bytes = npz_bytes(&[("sat", &a), ("truth", &b)]).unwrap();
        let back = npz_from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "sat");
        assert!(same_bits(&back[0].1, &a));
        assert_eq!(back[1].0, "truth");
        assert!(same_bits(&back[1].1, &b));
    }

    #[test]
    fn npz_duplicate_names() {
        let a = random_grid(2, 2, 1);
        assert!(matches!(npz_bytes(&[("x", &a), ("x", &a)]), Err(Error::DuplicateEntry(n)) if n == "x"));
    }

    #[test]
    fn npz_rejects_deflate_and_bad_crc() {
        let a = random_grid(2, 2, 1);
        let bytes = npz_bytes(&[("x", &a)]).unwrap();
        // flip the method field of the first central directory record
        let cd = bytes.windows(4).position(|w| w == [0x50, 0x4b, 0x01, 0x02]).unwrap();
        let mut deflated = bytes.clone();
        deflated[cd + 10] = 8;
        assert!(matches!(
            npz_from_bytes(&deflated),
            Err(Error::UnsupportedCompression { method: 8, .. })
        ));
        let mut corrupt = bytes.clone();
        corrupt[40] ^= 0xFF;
        assert!(matches!(npz_from_bytes(&corrupt), Err(Error::BadZip(_))));
        assert!(matches!(npz_from_bytes(b"short"), Err(Error::BadZip(_))));
        for cut in 0..bytes.len() {
            assert!(npz_from_bytes(&bytes[..cut]).is_err());
        }
    }

    fn random_stations(n: usize, seed: u64) -> StationSet {
        let mut rng = SplitMixRng::new(seed);
        StationSet::new(
            (0..n)
                .map(|i| {
                    Station::new(
                        format!("S{i}"),
                        rng.uniform(-90.0, 90.0),
                        rng.uniform(-180.0, 180.0),
                        rng.uniform(0.0, 100.0) / 3.0,
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let set = random_stations(100, 8);
        assert_eq!(parse_station_csv(&station_csv_string(&set).unwrap()).unwrap(), set);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_station_csv(""), Err(Error::BadHeader)));
        assert!(matches!(parse_station_csv("id,lat,lon\n"), Err(Error::BadHeader)));
        let neg = "id,lat,lon,value\na,1,2,3\nb,1,2,-0.5\n";
        assert!(matches!(parse_station_csv(neg), Err(Error::NonFiniteValue { line: 3 })));
        let nan = "id,lat,lon,value\na,1,2,NaN\n";
        assert!(matches!(parse_station_csv(nan), Err(Error::NonFiniteValue { line: 2 })));
        let short = "id,lat,lon,value\na,1,2\n";
        assert!(matches!(parse_station_csv(short), Err(Error::BadRow { line: 2, .. })));
        let word = "id,lat,lon,value\na,x,2,1\n";
        assert!(matches!(parse_station_csv(word), Err(Error::BadRow { line: 2, .. })));
        let dup = "id,lat,lon,value\na,1,2,1\na,1,3,1\n";
        assert!(matches!(parse_station_csv(dup), Err(Error::BadRow { line: 3, .. })));
        let crlf = "id,lat,lon,value\r\na,1,2,1\r\n";
        assert_eq!(parse_station_csv(crlf).unwrap().len(), 1);
    }

    #[test]
    fn pgm_endpoints() {
        let t = GeoTransform::north_up(0.0, 0.0, 1.0).unwrap();
        let zero = Grid::filled(3, 4, 0.0, t).unwrap();
        let b = pgm_bytes(&zero, &NormSpec::HOURLY).unwrap();
        assert!(b.starts_with(b"P5\n4 3\n255\n"));
        assert!(b[11..].iter().all(|p| *p == 0));
        let g = Grid::new(1, 3, vec![6.22, MISSING, 100.0], t, 0).unwrap();
        let b = pgm_bytes(&g, &NormSpec::HOURLY).unwrap();
        assert_eq!(&b[b.len() - 3..], &[255, 0, 255]);
    }

    #[test]
    fn meta_text_round_trip() {
        let m = GridMeta {
            transform: GeoTransform::new(0.1 + 0.2, -179.95, -0.1, 1.0 / 3.0).unwrap(),
            timestamp: -1,
        };
        assert_eq!(GridMeta::from_text(&m.to_text()).unwrap(), m);
        assert!(matches!(GridMeta::from_text("dlat=1\n"), Err(Error::BadMeta(_))));
    }
}
