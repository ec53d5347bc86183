//! RVOL volume files.
//!
//! Layout: magic `RVOL`, version (u32 LE), header length (u32 LE), a UTF-8
//! JSON header `{dims, spacing, dtype, unit}`, then the raw little-endian
//! f32 payload, z-major. Phantom sidecars live next to the volume as
//! `<file>.meta.json`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::phantom::PhantomMeta;
use super::Volume;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RVOL";
pub const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
    unit: String,
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let header = Header {
        dims: v.dims,
        spacing: v.spacing,
        dtype: "f32".to_string(),
        unit: "HU".to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::HeaderInvalid { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    let mut payload = Vec::with_capacity(v.values.len() * 4);
    for x in &v.values {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic, expected: MAGIC });
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::BadVersion { path: path.to_path_buf(), found: version, supported: VERSION });
    }
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::HeaderInvalid { path: path.to_path_buf(), detail: e.to_string() })?;
    if header.dtype != "f32" {
        return Err(Error::HeaderInvalid {
            path: path.to_path_buf(),
            detail: format!("unsupported dtype {:?}", header.dtype),
        });
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let numel = header.dims[0] * header.dims[1] * header.dims[2];
    if payload.len() != numel * 4 {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected: (numel * 4) as u64,
            got: payload.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Volume::new(header.dims, header.spacing, values)
}

/// Path of the sidecar belonging to a volume file.
pub fn sidecar_path(volume_path: &Path) -> PathBuf {
    let mut s = volume_path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_sidecar(volume_path: &Path, meta: &PhantomMeta) -> Result<()> {
    let path = sidecar_path(volume_path);
    let bytes = serde_json::to_vec_pretty(meta)
        .map_err(|e| Error::HeaderInvalid { path: path.clone(), detail: e.to_string() })?;
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn read_sidecar(volume_path: &Path) -> Result<PhantomMeta> {
    let path = sidecar_path(volume_path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::HeaderInvalid { path: path.clone(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_bit_exact() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let values: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.random_range(-1000.0f32..3000.0)).collect();
        let v = Volume::new([3, 8, 8], [2.0, 0.7, 0.7], values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let v = Volume::zeros([2, 4, 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        write_volume(&v, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[1] = b'!';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 42;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::BadVersion { .. })));

        // truncated payload: header promises more voxels than present
        let mut bad = good.clone();
        bad.truncate(good.len() - 8);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::PayloadSizeMismatch { .. })));
    }

    #[test]
    fn sidecar_roundtrip() {
        use super::super::phantom::{make_phantom, PhantomKind};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.rvol");
        let (v, meta) = make_phantom(PhantomKind::Ellipses, [12, 16, 16], 9).unwrap();
        write_volume(&v, &path).unwrap();
        write_sidecar(&path, &meta).unwrap();
        let back = read_sidecar(&path).unwrap();
        assert_eq!(back.organ_end_slices, meta.organ_end_slices);
        assert_eq!(back.seed, meta.seed);
    }
}
