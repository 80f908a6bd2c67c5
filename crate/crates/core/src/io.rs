//! File formats: CSV field snapshots with a JSON header line, site lists,
//! binary PGM images and JSON reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continuum::{LimitShape, ScalarField};
use crate::error::{Error, Result};
use crate::lattice::{ClusterSet, MassField, Site, Variant};

/// Metadata written as the first line of a field snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub d: usize,
    pub p: f64,
    pub variant: Variant,
    pub k: f64,
    pub n: f64,
    pub seed: u64,
}

/// `# {header json}`, then `c1,...,cd,value`, then one row per site in
/// sorted site order.
pub fn write_field_csv<W: Write>(out: W, field: &MassField, header: &FieldHeader) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "# {}", serde_json::to_string(header)?)?;
    let names: Vec<String> = (1..=field.dim()).map(|i| format!("c{i}")).collect();
    writeln!(out, "{},value", names.join(","))?;
    for (z, v) in field.sorted_entries() {
        let coords: Vec<String> = z.coords().iter().map(|c| c.to_string()).collect();
        writeln!(out, "{},{}", coords.join(","), v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_field_csv<R: std::io::Read>(input: R) -> Result<(FieldHeader, MassField)> {
    let mut lines = BufReader::new(input).lines();
    let first = lines.next().ok_or_else(|| Error::Parse("empty field file".into()))??;
    let json = first
        .strip_prefix("# ")
        .ok_or_else(|| Error::Parse("missing header line".into()))?;
    let header: FieldHeader = serde_json::from_str(json)?;
    lines.next().ok_or_else(|| Error::Parse("missing column line".into()))??;
    let mut field = MassField::new(header.d);
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != header.d + 1 {
            return Err(Error::Parse(format!("row {}: expected {} columns", lineno + 3, header.d + 1)));
        }
        let coords = parts[..header.d]
            .iter()
            .map(|s| s.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 3)))?;
        let value: f64 = parts[header.d]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 3)))?;
        field.set(Site::from_slice(&coords), value);
    }
    Ok((header, field))
}

/// Cluster sites, sorted, one per row.
pub fn write_sites_csv<W: Write>(out: W, cluster: &ClusterSet) -> Result<()> {
    let mut out = BufWriter::new(out);
    let names: Vec<String> = (1..=cluster.dim()).map(|i| format!("c{i}")).collect();
    writeln!(out, "{}", names.join(","))?;
    for z in cluster.sorted() {
        let coords: Vec<String> = z.coords().iter().map(|c| c.to_string()).collect();
        writeln!(out, "{}", coords.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sites_csv<R: std::io::Read>(input: R) -> Result<ClusterSet> {
    let mut lines = BufReader::new(input).lines();
    let head = lines.next().ok_or_else(|| Error::Parse("empty site file".into()))??;
    let d = head.split(',').count();
    let mut cluster = ClusterSet::new(d);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let coords = line
            .split(',')
            .map(|s| s.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(e.to_string()))?;
        if coords.len() != d {
            return Err(Error::Parse(format!("expected {d} columns in {line:?}")));
        }
        cluster.insert(Site::from_slice(&coords));
    }
    Ok(cluster)
}

/// 8-bit grayscale image, row-major, top row first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Pixel values of an occupancy image.
pub const OCCUPIED: u8 = 255;
pub const ORIGIN_MARK: u8 = 128;

/// Occupancy image of a 2-d cluster: one pixel per site, drift axis pointing
/// up, origin drawn in mid gray. Returns the image and the site of the
/// top-left pixel.
pub fn occupancy_image(cluster: &ClusterSet) -> Result<(GrayImage, Site)> {
    if cluster.dim() != 2 {
        return Err(Error::InvalidParams("occupancy images need d = 2".into()));
    }
    let bounds = cluster.bounds().ok_or(Error::EmptySet)?;
    let (x0, x1) = (bounds.lo.0[0].min(0), bounds.hi.0[0].max(0));
    let (t0, t1) = (bounds.lo.0[1].min(0), bounds.hi.0[1].max(0));
    let width = (x1 - x0 + 1) as usize;
    let height = (t1 - t0 + 1) as usize;
    let mut pixels = vec![0u8; width * height];
    for z in cluster.iter() {
        let col = (z.0[0] - x0) as usize;
        let row = (t1 - z.0[1]) as usize;
        pixels[row * width + col] = OCCUPIED;
    }
    pixels[(t1 as usize) * width + (-x0) as usize] = ORIGIN_MARK;
    Ok((GrayImage { width, height, pixels }, Site::from_slice(&[x0, t1])))
}

/// Sites of an occupancy image (any nonzero pixel), given its top-left site.
pub fn cluster_from_image(img: &GrayImage, top_left: &Site) -> ClusterSet {
    let mut cluster = ClusterSet::new(2);
    for row in 0..img.height {
        for col in 0..img.width {
            if img.get(col, row) != 0 {
                cluster.insert(Site::from_slice(&[top_left.0[0] + col as i64, top_left.0[1] - row as i64]));
            }
        }
    }
    cluster
}

/// Grayscale image of a d = 2 grid field, scaled so the largest value is
/// white and values at or below zero are black. Time increases upward.
pub fn field_image(field: &ScalarField) -> Result<GrayImage> {
    let grid = &field.grid;
    if grid.d != 2 {
        return Err(Error::InvalidParams("field images need d = 2".into()));
    }
    let max = field.max_value();
    let width = grid.side();
    let height = grid.nt + 1;
    let mut pixels = vec![0u8; width * height];
    for layer in 0..height {
        for col in 0..width {
            let v = field.get(layer, col);
            let level = if max > 0.0 && v > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) } else { 0.0 };
            pixels[(height - 1 - layer) * width + col] = level as u8;
        }
    }
    Ok(GrayImage { width, height, pixels })
}

/// 64-bit FNV-1a digest, used to tie images to the config that made them.
pub fn config_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Binary PGM (P5) with a `# config-hash` comment line.
pub fn write_pgm<W: Write>(out: W, img: &GrayImage, hash: u64) -> Result<()> {
    let mut out = BufWriter::new(out);
    write!(out, "P5\n# config-hash {hash:016x}\n{} {}\n255\n", img.width, img.height)?;
    out.write_all(&img.pixels)?;
    out.flush()?;
    Ok(())
}

pub fn read_pgm<R: std::io::Read>(mut input: R) -> Result<(GrayImage, Option<u64>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    let mut hash = None;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
            if let Some(hex) = comment.trim().strip_prefix("config-hash ") {
                hash = u64::from_str_radix(hex.trim(), 16).ok();
            }
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(Error::Parse("not a binary PGM".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
    let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
    if parse(&tokens[3])? != 255 {
        return Err(Error::Parse("only 8-bit PGM is supported".into()));
    }
    let pixels = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| Error::Parse("truncated PGM data".into()))?
        .to_vec();
    Ok((GrayImage { width, height, pixels }, hash))
}

/// Rows `x_1..x_{d-1}, t, gamma, s, u` for every grid node.
pub fn write_grid_fields_csv<W: Write>(out: W, gamma: &ScalarField, s: &ScalarField) -> Result<()> {
    let grid = &gamma.grid;
    let mut out = BufWriter::new(out);
    let names: Vec<String> = (1..grid.d).map(|i| format!("x{i}")).collect();
    writeln!(out, "{},t,gamma,s,u", names.join(","))?;
    for node in 0..grid.node_count() {
        let pt = grid.point(node);
        let cols: Vec<String> = pt.iter().map(|v| v.to_string()).collect();
        let (g, sv) = (gamma.values[node], s.values[node]);
        writeln!(out, "{},{},{},{}", cols.join(","), g, sv, sv - g)?;
    }
    out.flush()?;
    Ok(())
}

/// Node coordinates of a limit shape, one per row.
pub fn write_shape_csv<W: Write>(out: W, shape: &LimitShape) -> Result<()> {
    let grid = &shape.grid;
    let mut out = BufWriter::new(out);
    let names: Vec<String> = (1..grid.d).map(|i| format!("x{i}")).collect();
    writeln!(out, "{},t", names.join(","))?;
    for pt in shape.points() {
        let cols: Vec<String> = pt.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cols.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize>(out: W, value: &T) -> Result<()> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(File::create(path)?)
}
