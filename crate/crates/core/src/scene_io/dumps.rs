//! Fixed binary dumps: `SPIX` mask-index fields, `SPCL` cluster-id fields and
//! `SPCW` contribution records. Each starts with its 4-byte magic and a
//! little-endian u32 count.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SPIX_MAGIC: &[u8; 4] = b"SPIX";
pub const SPCL_MAGIC: &[u8; 4] = b"SPCL";
pub const SPCW_MAGIC: &[u8; 4] = b"SPCW";

pub fn encode_u16_field(magic: &[u8; 4], values: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 2 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_u16_field(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<u16>> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "expected {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let found = (bytes.len() - 8) as u64;
    if found != 2 * n {
        return Err(Error::Length {
            expected: 2 * n,
            found,
        });
    }
    Ok(bytes[8..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_u16_field(magic: &[u8; 4], values: &[u16], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_u16_field(magic, values)).map_err(|e| Error::io(path, e))
}

pub fn read_u16_field(magic: &[u8; 4], path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_u16_field(magic, &bytes)
}

/// One `SPCW` record: linear pixel index, Gaussian id, weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContributionDumpRecord {
    pub pixel: u32,
    pub gaussian: u32,
    pub weight: f32,
}

pub fn encode_contributions(records: &[ContributionDumpRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * records.len());
    out.extend_from_slice(SPCW_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.pixel.to_le_bytes());
        out.extend_from_slice(&r.gaussian.to_le_bytes());
        out.extend_from_slice(&r.weight.to_le_bytes());
    }
    out
}

pub fn parse_contributions(bytes: &[u8]) -> Result<Vec<ContributionDumpRecord>> {
    if bytes.len() < 8 || &bytes[..4] != SPCW_MAGIC {
        return Err(Error::Format("expected SPCW magic".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let found = (bytes.len() - 8) as u64;
    if found != 12 * n {
        return Err(Error::Length {
            expected: 12 * n,
            found,
        });
    }
    Ok(bytes[8..]
        .chunks_exact(12)
        .map(|c| ContributionDumpRecord {
            pixel: u32::from_le_bytes(c[0..4].try_into().unwrap()),
            gaussian: u32::from_le_bytes(c[4..8].try_into().unwrap()),
            weight: f32::from_le_bytes(c[8..12].try_into().unwrap()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn u16_field_round_trips(values in proptest::collection::vec(any::<u16>(), 0..300)) {
            let bytes = encode_u16_field(SPIX_MAGIC, &values);
            prop_assert_eq!(bytes.len(), 2 * values.len() + 8);
            prop_assert_eq!(parse_u16_field(SPIX_MAGIC, &bytes).unwrap(), values);
        }
    }

    #[test]
    fn wrong_magic_and_length() {
        let bytes = encode_u16_field(SPCL_MAGIC, &[1, 2, 3]);
        assert!(matches!(parse_u16_field(SPIX_MAGIC, &bytes), Err(Error::Format(_))));
        assert!(matches!(
            parse_u16_field(SPCL_MAGIC, &bytes[..bytes.len() - 1]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn contribution_records_round_trip() {
        let recs = vec![
            ContributionDumpRecord { pixel: 4, gaussian: 9, weight: 0.25 },
            ContributionDumpRecord { pixel: 4, gaussian: 2, weight: 0.125 },
        ];
        let bytes = encode_contributions(&recs);
        assert_eq!(bytes.len(), 8 + 24);
        assert_eq!(parse_contributions(&bytes).unwrap(), recs);
    }
}
