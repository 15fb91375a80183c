//! Packed binary dataset file plus a JSON manifest next to it.
//!
//! Layout (little-endian): magic `AGCD`, u16 version, header `N: u32, H: u16,
//! W: u16, T: u8`, then per sample `identity: u32, attributes: u16,
//! visible: H*W f32, polar: 3*H*W f32, crc32: u32` where the CRC covers the
//! sample's bytes from `identity` through `polar`.

use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, PairedSample, FORMAT_VERSION, NUM_ATTRIBUTES};
use crate::binio::{read_file, Reader, Writer};
pub use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AGCD";

/// `data.agcd` -> `data.manifest.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let m = &ds.manifest;
    let (h, w) = (m.height, m.width);
    if ds.samples.len() > u32::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidArgument("dataset too large for the file format".into()));
    }
    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u16(FORMAT_VERSION);
    out.u32(ds.samples.len() as u32);
    out.u16(h as u16);
    out.u16(w as u16);
    out.u8(NUM_ATTRIBUTES as u8);
    for s in &ds.samples {
        let start = out.buf.len();
        out.u32(s.identity);
        out.u16(s.attributes);
        out.f32s(s.visible.data());
        out.f32s(s.polar.data());
        out.crc_since(start);
    }
    let json = serde_json::to_string_pretty(m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, &out.buf)?;
    write_atomic(&manifest_path(path), json.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let n = r.u32("header")? as usize;
    let h = r.u16("header")? as usize;
    let w = r.u16("header")? as usize;
    let t = r.u8("header")? as usize;
    if t != NUM_ATTRIBUTES {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            what: "header".into(),
            msg: format!("{t} attributes, expected {NUM_ATTRIBUTES}"),
        });
    }
    let mut samples = Vec::with_capacity(n.min(r.remaining() / (16 * h * w + 10).max(1)));
    for i in 0..n {
        let what = format!("sample {i}");
        let start = r.pos;
        let identity = r.u32(&what)?;
        let attributes = r.u16(&what)?;
        let visible = r.f32s(h * w, &what)?;
        let polar = r.f32s(3 * h * w, &what)?;
        r.check_crc(start, &what)?;
        samples.push(PairedSample {
            identity,
            attributes,
            visible: Tensor::new(&[1, h, w], visible)?,
            polar: Tensor::new(&[3, h, w], polar)?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            what: "trailer".into(),
            msg: format!("{} unexpected trailing bytes", r.remaining()),
        });
    }
    let mpath = manifest_path(path);
    let text = String::from_utf8(read_file(&mpath)?).map_err(|e| Error::Malformed {
        path: mpath.clone(),
        what: "manifest".into(),
        msg: e.to_string(),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: mpath.clone(),
        what: "manifest".into(),
        msg: e.to_string(),
    })?;
    if manifest.height != h || manifest.width != w || manifest.samples != n {
        return Err(Error::Mismatch(format!(
            "{}: manifest says {} samples of {}x{}, data file has {n} of {h}x{w}",
            mpath.display(),
            manifest.samples,
            manifest.height,
            manifest.width
        )));
    }
    let ds = Dataset { manifest, samples };
    ds.validate()?;
    Ok(ds)
}
