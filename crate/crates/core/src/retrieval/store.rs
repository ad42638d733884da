//! Binary library file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FATELIB1"
//! u64 entry count | u64 fingerprint
//! u32 len + encoder spec JSON
//! u8 axis (0 = X, 1 = Y, 2 = Z)
//! u32 gh | u32 gw | u32 channels | u32 image side
//! u32 label count, u16 labels...
//! u32 volume count, per volume: u32 len + UTF-8 name
//! per entry: u32 volume | u32 slice | u32 mask rows | u32 mask cols
//!            f64 tokens (gh*gw*channels, token-major)
//!            f64 image (side*side)
//!            per label: bit-packed mask, LSB first, ceil(rows*cols/8) bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{SupportEntry, SupportLibrary};
use crate::encoder::{EmbeddingMap, EncoderSpec, Fingerprint, SliceRef};
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::tensor::Matrix;
use crate::volume::SliceAxis;

const MAGIC: &[u8; 8] = b"FATELIB1";

pub fn save_library(lib: &SupportLibrary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(lib)).map_err(|e| Error::io(path, e))
}

pub fn load_library(path: impl AsRef<Path>) -> Result<SupportLibrary> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn encode(lib: &SupportLibrary) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(lib.len() as u64).to_le_bytes());
    out.extend_from_slice(&lib.fingerprint().0.to_le_bytes());
    put_bytes(&mut out, &serde_json::to_vec(lib.encoder_spec()).expect("spec serializes"));
    out.push(match lib.axis() {
        SliceAxis::X => 0,
        SliceAxis::Y => 1,
        SliceAxis::Z => 2,
    });
    let spec = lib.encoder_spec();
    let (gh, gw) = spec.grid();
    for v in [gh, gw, spec.channels, spec.input_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(lib.object_labels().len() as u32).to_le_bytes());
    for l in lib.object_labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&(lib.volume_names().len() as u32).to_le_bytes());
    for n in lib.volume_names() {
        put_bytes(&mut out, n.as_bytes());
    }
    for e in lib.entries() {
        let (rows, cols) = e.masks.values().next().map_or((0, 0), |m| m.dims());
        for v in [e.source.volume, e.source.slice, rows as u32, cols as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in e.embedding.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in e.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in e.masks.values() {
            let mut packed = vec![0u8; m.len().div_ceil(8)];
            for (i, &b) in m.data().iter().enumerate() {
                if b {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&packed);
        }
    }
    out
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::LibraryFormat(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::LibraryFormat("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn decode(buf: &[u8]) -> Result<SupportLibrary> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::LibraryFormat("bad magic".into()));
    }
    let count = r.u64()? as usize;
    let fingerprint = Fingerprint(r.u64()?);
    let spec: EncoderSpec = serde_json::from_slice(r.bytes()?).map_err(|e| Error::LibraryFormat(e.to_string()))?;
    if spec.fingerprint() != fingerprint {
        return Err(Error::LibraryFormat("stored fingerprint does not match encoder spec".into()));
    }
    let axis = match r.u8()? {
        0 => SliceAxis::X,
        1 => SliceAxis::Y,
        2 => SliceAxis::Z,
        a => return Err(Error::LibraryFormat(format!("bad axis {a}"))),
    };
    let gh = r.u32()? as usize;
    let gw = r.u32()? as usize;
    let d = r.u32()? as usize;
    let side = r.u32()? as usize;
    if (gh, gw) != spec.grid() || d != spec.channels || side != spec.input_size {
        return Err(Error::LibraryFormat("dims disagree with encoder spec".into()));
    }
    let labels = (0..r.u32()?).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    let n_vol = r.u32()?;
    let names = (0..n_vol)
        .map(|_| {
            String::from_utf8(r.bytes()?.to_vec()).map_err(|e| Error::LibraryFormat(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let source = SliceRef {
            volume: r.u32()?,
            slice: r.u32()?,
        };
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let tokens = Matrix::from_vec(gh * gw, d, r.f64s(gh * gw * d)?);
        let embedding = EmbeddingMap::new((gh, gw), tokens, fingerprint)?.with_source(source);
        let image = Grid2::from_vec(side, side, r.f64s(side * side)?);
        let mut masks = BTreeMap::new();
        for &l in &labels {
            let packed = r.take((rows * cols).div_ceil(8))?;
            let bits = (0..rows * cols).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            masks.insert(l, Grid2::from_vec(rows, cols, bits));
        }
        entries.push(SupportEntry {
            embedding,
            image,
            masks,
            source,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::LibraryFormat(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    SupportLibrary::from_parts(spec, axis, names, labels, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::retrieval::build_library;
    use crate::volume::{make_phantom, PhantomObject, PhantomSpec, Shape};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = PhantomSpec {
            dims: [20, 18, 5],
            spacing: [1.0; 3],
            background: 0.1,
            noise_std: 0.05,
            allow_overlap: false,
            objects: vec![PhantomObject {
                label: 4,
                intensity: 0.7,
                shape: Shape::Sphere {
                    center: [10.0, 9.0, 2.0],
                    radius: 4.0,
                },
            }],
        };
        let (v, l) = make_phantom(&spec, 1).unwrap();
        let mut es = EncoderSpec::patch_mean();
        es.input_size = 16;
        es.patch = 4;
        let enc = Encoder::new(es).unwrap();
        let lib = build_library(&[("p".into(), &v, &l)], &enc, SliceAxis::Z).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lib.bin");
        save_library(&lib, &p).unwrap();
        let back = load_library(&p).unwrap();
        assert_eq!(back, lib);
        let p2 = dir.path().join("lib2.bin");
        save_library(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(Error::LibraryFormat(_))));
        assert!(matches!(decode(b"NOTALIB!"), Err(Error::LibraryFormat(_))));
    }
}
