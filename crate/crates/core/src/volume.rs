//! `MMUV1` volume files: 5-byte magic, dtype byte, `u32` LE extents
//! `D, H, W, C`, then channel-last row-major values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const VOLUME_MAGIC: &[u8; 5] = b"MMUV1";

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    /// Image intensities.
    F32(Vec<f32>),
    /// Label grid.
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    /// `[D, H, W, C]`
    pub dims: [u32; 4],
    pub data: VolumeData,
}

impl VolumeFile {
    fn numel(dims: [u32; 4]) -> Result<usize> {
        dims.iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
            .ok_or_else(|| Error::Format(format!("extents {dims:?} overflow")))
    }

    /// Image from a `[C, D, H, W]` tensor; values are narrowed to `f32`.
    pub fn from_image(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("volume", format!("expected [C,D,H,W], got {s:?}")));
        }
        let (c, vol) = (s[0], s[1] * s[2] * s[3]);
        let mut out = vec![0f32; c * vol];
        for ch in 0..c {
            for v in 0..vol {
                out[v * c + ch] = t.data()[ch * vol + v] as f32;
            }
        }
        Ok(VolumeFile {
            dims: [s[1] as u32, s[2] as u32, s[3] as u32, c as u32],
            data: VolumeData::F32(out),
        })
    }

    pub fn from_labels(labels: &[u8], dims: [usize; 3]) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("volume", format!("{} labels for {dims:?}", labels.len())));
        }
        Ok(VolumeFile {
            dims: [dims[0] as u32, dims[1] as u32, dims[2] as u32, 1],
            data: VolumeData::U8(labels.to_vec()),
        })
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.dims[0] as usize, self.dims[1] as usize, self.dims[2] as usize]
    }

    /// `[C, D, H, W]` tensor of an image file.
    pub fn to_image(&self) -> Result<Tensor> {
        let VolumeData::F32(v) = &self.data else {
            return Err(Error::Format("expected an f32 image volume".into()));
        };
        let c = self.dims[3] as usize;
        let [d, h, w] = self.spatial();
        let vol = d * h * w;
        let mut out = vec![0.0 as Real; c * vol];
        for vox in 0..vol {
            for ch in 0..c {
                out[ch * vol + vox] = v[vox * c + ch] as Real;
            }
        }
        Tensor::new(&[c, d, h, w], out)
    }

    pub fn labels(&self) -> Result<&[u8]> {
        match &self.data {
            VolumeData::U8(v) if self.dims[3] == 1 => Ok(v),
            _ => Err(Error::Format("expected a single-channel u8 label volume".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (code, bytes) = match &self.data {
            VolumeData::F32(v) => (0u8, v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>()),
            VolumeData::U8(v) => (1u8, v.clone()),
        };
        let mut out = Vec::with_capacity(22 + bytes.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.push(code);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&bytes);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 22 || &bytes[..5] != VOLUME_MAGIC {
            return Err(Error::Format("missing MMUV1 header".into()));
        }
        let code = bytes[5];
        let dims: [u32; 4] = std::array::from_fn(|i| {
            u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes"))
        });
        let n = Self::numel(dims)?;
        let payload = &bytes[22..];
        let size = match code {
            0 => 4,
            1 => 1,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        };
        if Some(payload.len()) != n.checked_mul(size) {
            return Err(Error::Format(format!(
                "payload has {} bytes, header {dims:?} needs {}",
                payload.len(),
                n.saturating_mul(size)
            )));
        }
        let data = if code == 0 {
            VolumeData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            VolumeData::U8(payload.to_vec())
        };
        Ok(VolumeFile { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}
