//! GSPLAT checkpoint format.
//!
//! ```text
//! header  : "GSPL" | version u32 = 1 | count u32 | feature_dim u32
//! records : count × f32[3 + 4 + 3 + 1 + 3 + feature_dim]
//!           position, rotation (w,x,y,z), log_scale, opacity_logit, color, feature
//! trailer : optional "DEC1" | M u32 | N u32 | f32[M·N] weights | f32[M] bias
//! ```
//!
//! Everything is little-endian. `scene_extent` is not stored; it is
//! recomputed from the loaded positions.

use std::path::Path;

use crate::decoder::ChannelDecoder;
use crate::error::{Error, Result};
use crate::scene::{bounding_radius, quat_norm, GaussianCloud};
use crate::tensor::{write_atomic, ByteReader};

pub const GSPLAT_MAGIC: [u8; 4] = *b"GSPL";
pub const DECODER_MAGIC: [u8; 4] = *b"DEC1";
pub const GSPLAT_VERSION: u32 = 1;

const HEADER_BYTES: usize = 16;

fn record_floats(feature_dim: usize) -> usize {
    3 + 4 + 3 + 1 + 3 + feature_dim
}

pub fn encode_cloud(cloud: &GaussianCloud, decoder: Option<&ChannelDecoder>) -> Result<Vec<u8>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = cloud.feature_dim();
    let stride = record_floats(n);
    let mut buf = Vec::with_capacity(HEADER_BYTES + cloud.len() * stride * 4);
    buf.extend_from_slice(&GSPLAT_MAGIC);
    buf.extend_from_slice(&GSPLAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    let mut record = Vec::with_capacity(stride);
    for i in 0..cloud.len() {
        record.clear();
        record.extend_from_slice(&cloud.positions[i]);
        record.extend_from_slice(&cloud.rotations[i]);
        record.extend_from_slice(&cloud.log_scales[i]);
        record.push(cloud.opacity_logits[i]);
        record.extend_from_slice(&cloud.colors[i]);
        record.extend_from_slice(cloud.feature(i));
        if let Some(k) = record.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord {
                record: i,
                offset: HEADER_BYTES + (i * stride + k) * 4,
                reason: "non-finite value cannot be saved (compact edited clouds first)".into(),
            });
        }
        for v in &record {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dec) = decoder {
        if dec.in_dim() != n {
            return Err(Error::DimensionMismatch {
                what: "decoder input vs cloud feature_dim",
                expected: n,
                got: dec.in_dim(),
            });
        }
        buf.extend_from_slice(&DECODER_MAGIC);
        buf.extend_from_slice(&(dec.out_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(dec.in_dim() as u32).to_le_bytes());
        for v in dec.weights.iter().chain(&dec.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_cloud(bytes: &[u8]) -> Result<(GaussianCloud, Option<ChannelDecoder>)> {
    let mut r = ByteReader::new(bytes, "GSPLAT");
    let magic = r.magic()?;
    if magic != GSPLAT_MAGIC {
        return Err(Error::BadMagic {
            expected: GSPLAT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != GSPLAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let n = r.u32()? as usize;
    if count == 0 {
        return Err(Error::EmptyCloud);
    }
    let stride = record_floats(n);
    let mut cloud = GaussianCloud::with_capacity(n, 1.0, count);
    let mut record = vec![0f32; stride];
    for i in 0..count {
        let start = r.offset();
        for (k, slot) in record.iter_mut().enumerate() {
            let offset = r.offset();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::InvalidRecord {
                    record: i,
                    offset,
                    reason: format!("non-finite {} value", field_name(k)),
                });
            }
            *slot = v;
        }
        let invalid = |reason: String| Error::InvalidRecord {
            record: i,
            offset: start,
            reason,
        };
        let rotation = [record[3], record[4], record[5], record[6]];
        let norm = quat_norm(rotation);
        if (norm - 1.0).abs() > 1e-3 {
            return Err(invalid(format!("rotation norm {norm} is not 1")));
        }
        let color = [record[11], record[12], record[13]];
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid(format!("color {color:?} outside [0,1]")));
        }
        cloud.positions.push([record[0], record[1], record[2]]);
        cloud.rotations.push(rotation);
        cloud.log_scales.push([record[7], record[8], record[9]]);
        cloud.opacity_logits.push(record[10]);
        cloud.colors.push(color);
        cloud.features.extend_from_slice(&record[14..]);
    }
    let radius = bounding_radius(&cloud.positions);
    cloud.scene_extent = if radius > 0.0 { radius } else { 1.0 };

    let decoder = if r.remaining() == 0 {
        None
    } else {
        let magic = r.magic()?;
        if magic != DECODER_MAGIC {
            return Err(Error::BadMagic {
                expected: DECODER_MAGIC,
                found: magic,
            });
        }
        let m = r.u32()? as usize;
        let dn = r.u32()? as usize;
        if dn != n {
            return Err(Error::DimensionMismatch {
                what: "decoder input vs cloud feature_dim",
                expected: n,
                got: dn,
            });
        }
        let mut params = Vec::with_capacity(m * dn + m);
        for k in 0..m * dn + m {
            let offset = r.offset();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::InvalidRecord {
                    record: k,
                    offset,
                    reason: "non-finite decoder parameter".into(),
                });
            }
            params.push(v);
        }
        let bias = params.split_off(m * dn);
        Some(ChannelDecoder::from_parts(dn, m, params, bias)?)
    };
    if r.remaining() != 0 {
        return Err(Error::InvalidRecord {
            record: count,
            offset: r.offset(),
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok((cloud, decoder))
}

fn field_name(k: usize) -> &'static str {
    match k {
        0..=2 => "position",
        3..=6 => "rotation",
        7..=9 => "log_scale",
        10 => "opacity_logit",
        11..=13 => "color",
        _ => "feature",
    }
}

pub fn save_cloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    save_checkpoint(cloud, None, path)
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    load_checkpoint(path).map(|(c, _)| c)
}

pub fn save_checkpoint(cloud: &GaussianCloud, decoder: Option<&ChannelDecoder>, path: &Path) -> Result<()> {
    let bytes = encode_cloud(cloud, decoder)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(GaussianCloud, Option<ChannelDecoder>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cloud(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{random_init, Gaussian};

    fn assert_fields_bit_equal(a: &GaussianCloud, b: &GaussianCloud) {
        assert_eq!(a.len(), b.len());
        assert_eq!(a.feature_dim(), b.feature_dim());
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.positions.as_flattened()), bits(b.positions.as_flattened()));
        assert_eq!(bits(a.rotations.as_flattened()), bits(b.rotations.as_flattened()));
        assert_eq!(bits(a.log_scales.as_flattened()), bits(b.log_scales.as_flattened()));
        assert_eq!(bits(&a.opacity_logits), bits(&b.opacity_logits));
        assert_eq!(bits(a.colors.as_flattened()), bits(b.colors.as_flattened()));
        assert_eq!(bits(&a.features), bits(&b.features));
    }

    #[test]
    fn single_gaussian_round_trip() {
        let c = random_init(1, 2, 1.0, 5).unwrap();
        let bytes = encode_cloud(&c, None).unwrap();
        assert_eq!(bytes.len(), 16 + (14 + 2) * 4);
        let (back, dec) = decode_cloud(&bytes).unwrap();
        assert!(dec.is_none());
        assert_fields_bit_equal(&c, &back);
    }

    #[test]
    fn empty_cloud_rejected() {
        let c = GaussianCloud::new(3, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let err = save_cloud(&c, &dir.path().join("x.gsplat")).unwrap_err();
        assert_eq!(err.to_string(), "empty cloud");
        assert!(!dir.path().join("x.gsplat").exists());
    }

    #[test]
    fn nan_opacity_rejected_at_record() {
        let c = random_init(3, 1, 1.0, 5).unwrap();
        let mut bytes = encode_cloud(&c, None).unwrap();
        // record 2, field 10
        let off = 16 + (2 * 15 + 10) * 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_cloud(&bytes).unwrap_err();
        match err {
            Error::InvalidRecord { record, offset, .. } => {
                assert_eq!(record, 2);
                assert_eq!(offset, off);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncated_file() {
        let c = random_init(3, 1, 1.0, 5).unwrap();
        let bytes = encode_cloud(&c, None).unwrap();
        let err = decode_cloud(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
        let err = decode_cloud(&bytes[..10]).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let c = random_init(1, 1, 1.0, 5).unwrap();
        let mut bytes = encode_cloud(&c, None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_cloud(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn non_unit_rotation_rejected() {
        let mut c = GaussianCloud::new(0, 1.0);
        c.push(Gaussian {
            position: [0.0; 3],
            rotation: [2.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity_logit: 0.0,
            color: [0.5; 3],
            feature: vec![],
        })
        .unwrap();
        let bytes = encode_cloud(&c, None).unwrap();
        assert!(matches!(decode_cloud(&bytes), Err(Error::InvalidRecord { record: 0, .. })));
    }

    #[test]
    fn decoder_trailer_round_trip() {
        let c = random_init(4, 3, 1.0, 5).unwrap();
        let dec = ChannelDecoder::new_random(3, 7, 11);
        let (back, d2) = decode_cloud(&encode_cloud(&c, Some(&dec)).unwrap()).unwrap();
        assert_fields_bit_equal(&c, &back);
        assert_eq!(d2.unwrap(), dec);
    }

    #[test]
    fn file_round_trip_100() {
        let c = random_init(100, 4, 2.0, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gsplat");
        save_cloud(&c, &p).unwrap();
        let back = load_cloud(&p).unwrap();
        assert_eq!(back.len(), 100);
        assert_fields_bit_equal(&c, &back);
    }
}
