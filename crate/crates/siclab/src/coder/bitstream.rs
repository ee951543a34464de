//! Self-describing coded representation of one image.
//!
//! Layout (all integers little-endian):
//! magic "SICB" | version u16 | config-hash u64 | quant_mode u8 | orig_h u16
//! | orig_w u16 | pad_h u16 | pad_w u16 | M u16 | hyper_len u32 | hyper bytes
//! | latent_len u32 | latent bytes.
//!
//! The byte length of the serialized stream is the ground truth for every
//! bpp figure reported anywhere in the crate.

use crate::error::{Result, SicError};

pub const MAGIC: &[u8; 4] = b"SICB";
pub const VERSION: u16 = 1;

/// Byte offsets of fixed header fields, for positioned decode errors.
pub const OFF_HASH: usize = 6;
pub const OFF_KIND: usize = 14;
pub const OFF_GEOMETRY: usize = 15;
pub const OFF_M: usize = 23;

/// What the latent segment contains; stored in the quant_mode header byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// residual symbols, ŷᵢ = symᵢ + μᵢ
    Corrected = 0,
    /// plain rounded latents, ŷᵢ = symᵢ
    Straight = 1,
    /// invertible-network latents, straight-rounded
    InnStraight = 2,
}

impl StreamKind {
    pub fn from_byte(b: u8) -> Result<StreamKind> {
        match b {
            0 => Ok(StreamKind::Corrected),
            1 => Ok(StreamKind::Straight),
            2 => Ok(StreamKind::InnStraight),
            other => Err(SicError::data(format!("bitstream: unknown quant_mode byte {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub config_hash: u64,
    pub kind: StreamKind,
    pub orig_h: u16,
    pub orig_w: u16,
    pub pad_h: u16,
    pub pad_w: u16,
    pub m: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub hyper: Vec<u8>,
    pub latent: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let hyper_len = u32::try_from(self.hyper.len())
            .map_err(|_| SicError::data("bitstream: hyper segment too large"))?;
        let latent_len = u32::try_from(self.latent.len())
            .map_err(|_| SicError::data("bitstream: latent segment too large"))?;
        let mut out = Vec::with_capacity(33 + self.hyper.len() + self.latent.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.config_hash.to_le_bytes());
        out.push(h.kind as u8);
        out.extend_from_slice(&h.orig_h.to_le_bytes());
        out.extend_from_slice(&h.orig_w.to_le_bytes());
        out.extend_from_slice(&h.pad_h.to_le_bytes());
        out.extend_from_slice(&h.pad_w.to_le_bytes());
        out.extend_from_slice(&h.m.to_le_bytes());
        out.extend_from_slice(&hyper_len.to_le_bytes());
        out.extend_from_slice(&self.hyper);
        out.extend_from_slice(&latent_len.to_le_bytes());
        out.extend_from_slice(&self.latent);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bitstream> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if bytes.len() - *pos < n {
                return Err(SicError::Decode {
                    position: *pos,
                    msg: "unexpected end of stream".into(),
                });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(SicError::Decode {
                position: 0,
                msg: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(SicError::Decode {
                position: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let config_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let kind = StreamKind::from_byte(take(&mut pos, 1)?[0]).map_err(|e| SicError::Decode {
            position: 14,
            msg: e.to_string(),
        })?;
        let u16n = |pos: &mut usize| -> Result<u16> {
            Ok(u16::from_le_bytes(take(pos, 2)?.try_into().unwrap()))
        };
        let orig_h = u16n(&mut pos)?;
        let orig_w = u16n(&mut pos)?;
        let pad_h = u16n(&mut pos)?;
        let pad_w = u16n(&mut pos)?;
        let m = u16n(&mut pos)?;
        let hyper_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let hyper = take(&mut pos, hyper_len)?.to_vec();
        let latent_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let latent = take(&mut pos, latent_len)?.to_vec();
        if pos != bytes.len() {
            return Err(SicError::Decode {
                position: pos,
                msg: "trailing bytes after latent segment".into(),
            });
        }
        Ok(Bitstream {
            header: StreamHeader {
                config_hash,
                kind,
                orig_h,
                orig_w,
                pad_h,
                pad_w,
                m,
            },
            hyper,
            latent,
        })
    }

    /// Serialized length in bytes.
    pub fn total_bytes(&self) -> usize {
        33 + self.hyper.len() + self.latent.len()
    }

    /// Bits per pixel against the original (uncropped) dimensions.
    pub fn bpp(&self) -> f64 {
        let pixels = self.header.orig_h as f64 * self.header.orig_w as f64;
        8.0 * self.total_bytes() as f64 / pixels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: StreamHeader {
                config_hash: 0xDEAD_BEEF_0123_4567,
                kind: StreamKind::Straight,
                orig_h: 65,
                orig_w: 64,
                pad_h: 80,
                pad_w: 64,
                m: 96,
            },
            hyper: vec![1, 2, 3],
            latent: vec![9, 8, 7, 6, 5],
        }
    }

    #[test]
    fn round_trip() {
        let b = sample();
        let bytes = b.to_bytes().unwrap();
        assert_eq!(bytes.len(), b.total_bytes());
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn layout_is_fixed() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"SICB");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(
            u64::from_le_bytes(bytes[6..14].try_into().unwrap()),
            0xDEAD_BEEF_0123_4567
        );
        assert_eq!(bytes[14], 1); // straight
        assert_eq!(u16::from_le_bytes([bytes[15], bytes[16]]), 65);
        assert_eq!(u16::from_le_bytes([bytes[23], bytes[24]]), 96); // M
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 3);
    }

    #[test]
    fn truncation_reports_position() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 2];
        match Bitstream::from_bytes(cut).unwrap_err() {
            SicError::Decode { position, .. } => assert!(position > 0),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[1] = b'X';
        assert!(matches!(
            Bitstream::from_bytes(&bytes).unwrap_err(),
            SicError::Decode { position: 0, .. }
        ));
    }

    #[test]
    fn bpp_uses_original_pixels_and_full_length() {
        let b = sample();
        let expect = 8.0 * (33 + 3 + 5) as f64 / (65.0 * 64.0);
        assert!((b.bpp() - expect).abs() < 1e-12);
    }
}
