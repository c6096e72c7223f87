//! FMAP raster container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FMAP"
//!      4     2  version (u16 LE)
//!      6     1  kind (0 depth cm, 1 elevation m, 2 latent)
//!      7     4  channels (u32 LE)
//!     11     4  height (u32 LE)
//!     15     4  width (u32 LE)
//!     19     4  cell size in metres (f32 LE)
//!     23     -  channels*height*width f32 LE, channel-major, row-major
//! ```

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::terrain::{Dem, DepthGrid};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u16 = 1;
pub const FMAP_HEADER_LEN: usize = 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FmapKind {
    Depth = 0,
    Elevation = 1,
    Latent = 2,
}

impl FmapKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(FmapKind::Depth),
            1 => Some(FmapKind::Elevation),
            2 => Some(FmapKind::Latent),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FmapHeader {
    pub version: u16,
    pub kind: FmapKind,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub cell_size_m: f32,
}

impl FmapHeader {
    pub fn new(kind: FmapKind, channels: usize, height: usize, width: usize, cell_size_m: f64) -> Self {
        FmapHeader {
            version: FMAP_VERSION,
            kind,
            channels: channels as u32,
            height: height as u32,
            width: width as u32,
            cell_size_m: cell_size_m as f32,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }
}

/// Serializes header and payload to bytes.
pub fn encode_fmap(header: &FmapHeader, payload: &[f32]) -> Result<Vec<u8>> {
    if header.channels == 0 || header.height == 0 || header.width == 0 {
        return Err(Error::contract("FMAP dimensions must be >= 1"));
    }
    if header.version != FMAP_VERSION {
        return Err(Error::contract(format!("cannot write FMAP version {}", header.version)));
    }
    if payload.len() != header.payload_len() {
        return Err(Error::dim(format!(
            "FMAP header declares {} values, payload has {}",
            header.payload_len(),
            payload.len()
        )));
    }
    let mut buf = Vec::with_capacity(FMAP_HEADER_LEN + 4 * payload.len());
    buf.extend_from_slice(FMAP_MAGIC);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.push(header.kind as u8);
    buf.extend_from_slice(&header.channels.to_le_bytes());
    buf.extend_from_slice(&header.height.to_le_bytes());
    buf.extend_from_slice(&header.width.to_le_bytes());
    buf.extend_from_slice(&header.cell_size_m.to_le_bytes());
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses bytes; `path` is used only for error messages.
pub fn decode_fmap(bytes: &[u8], path: &Path) -> Result<(FmapHeader, Vec<f32>)> {
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let corrupt = |msg: String| Error::Corruption {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() >= 4 && &bytes[..4] != FMAP_MAGIC {
        return Err(format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes.len() < FMAP_HEADER_LEN {
        return Err(corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FMAP_VERSION {
        return Err(Error::Incompatible(format!(
            "{}: FMAP version {} (supported: {})",
            path.display(),
            version,
            FMAP_VERSION
        )));
    }
    let kind = FmapKind::from_byte(bytes[6]).ok_or_else(|| format(format!("unknown kind byte {}", bytes[6])))?;
    let header = FmapHeader {
        version,
        kind,
        channels: u32_at(7),
        height: u32_at(11),
        width: u32_at(15),
        cell_size_m: f32::from_le_bytes(bytes[19..23].try_into().unwrap()),
    };
    if header.channels == 0 || header.height == 0 || header.width == 0 {
        return Err(format("zero dimension in header".into()));
    }
    let body = &bytes[FMAP_HEADER_LEN..];
    let want = header.payload_len().checked_mul(4).ok_or_else(|| format("dimensions overflow".into()))?;
    if body.len() != want {
        return Err(corrupt(format!("payload is {} bytes, header declares {}", body.len(), want)));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write_fmap(path: &Path, header: &FmapHeader, payload: &[f32]) -> Result<()> {
    write_atomic(path, &encode_fmap(header, payload)?)
}

pub fn read_fmap(path: &Path) -> Result<(FmapHeader, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmap(&bytes, path)
}

fn grid_payload(g: &Grid2) -> Vec<f32> {
    g.data().iter().map(|&v| v as f32).collect()
}

fn single_channel(path: &Path, header: &FmapHeader, payload: Vec<f32>, want: FmapKind) -> Result<Grid2> {
    if header.kind != want || header.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected 1-channel {:?} raster, found {} x {:?}", want, header.channels, header.kind),
        });
    }
    Grid2::new(
        header.width as usize,
        header.height as usize,
        payload.into_iter().map(f64::from).collect(),
    )
}

pub fn write_depth(path: &Path, g: &DepthGrid) -> Result<()> {
    let h = FmapHeader::new(FmapKind::Depth, 1, g.height(), g.width(), g.cell_size);
    write_fmap(path, &h, &grid_payload(&g.depths))
}

pub fn read_depth(path: &Path) -> Result<DepthGrid> {
    let (h, payload) = read_fmap(path)?;
    let grid = single_channel(path, &h, payload, FmapKind::Depth)?;
    DepthGrid::new(grid, h.cell_size_m as f64, 0).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_dem(path: &Path, dem: &Dem) -> Result<()> {
    let h = FmapHeader::new(FmapKind::Elevation, 1, dem.height(), dem.width(), dem.cell_size);
    write_fmap(path, &h, &grid_payload(&dem.elevations))
}

pub fn read_dem(path: &Path) -> Result<Dem> {
    let (h, payload) = read_fmap(path)?;
    let grid = single_channel(path, &h, payload, FmapKind::Elevation)?;
    Dem::new(grid, h.cell_size_m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_byte_layout() {
        let h = FmapHeader::new(FmapKind::Depth, 1, 2, 2, 5.0);
        let bytes = encode_fmap(&h, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 12 + 4 + 16);
        assert_eq!(&bytes[..7], b"FMAP\x01\x00\x00");
        assert_eq!(&bytes[7..11], &[1, 0, 0, 0]);
        assert_eq!(&bytes[19..23], &5.0f32.to_le_bytes());
        assert_eq!(&bytes[23..27], &1.0f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let h = FmapHeader::new(FmapKind::Depth, 1, 1, 1, 1.0);
        let mut bytes = encode_fmap(&h, &[0.0]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_fmap(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_and_padded_payloads_are_corrupt() {
        let h = FmapHeader::new(FmapKind::Latent, 2, 2, 2, 1.0);
        let bytes = encode_fmap(&h, &[0.5; 8]).unwrap();
        for bad in [&bytes[..bytes.len() - 1], &bytes[..10]] {
            assert!(matches!(decode_fmap(bad, Path::new("x")), Err(Error::Corruption { .. })));
        }
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_fmap(&long, Path::new("x")), Err(Error::Corruption { .. })));
    }

    #[test]
    fn version_and_kind_checked() {
        let h = FmapHeader::new(FmapKind::Depth, 1, 1, 1, 1.0);
        let mut bytes = encode_fmap(&h, &[0.0]).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_fmap(&bytes, Path::new("x")), Err(Error::Incompatible(_))));
        bytes[4] = 1;
        bytes[6] = 9;
        assert!(matches!(decode_fmap(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn payload_length_checked_on_write() {
        let h = FmapHeader::new(FmapKind::Depth, 1, 2, 2, 1.0);
        assert!(encode_fmap(&h, &[0.0; 3]).is_err());
    }
}
