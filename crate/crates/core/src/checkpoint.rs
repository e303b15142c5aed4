//! Checkpoint files: a text manifest followed by the raw little-endian
//! payload.
//!
//! ```text
//! HFCR-CHECKPOINT
//! version 1
//! dtype f32
//! tensors 3
//! payload_bytes 1036
//! checksum 5d2c0a1f
//! tensor encoder.block0.conv 1 64,3,3,3 0 6912
//! ...
//! end
//! <payload>
//! ```
//!
//! Each `tensor` line holds name, trainable flag, shape, byte offset and
//! byte length; scalars have shape `-`. The checksum is CRC-32 of the payload.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &str = "HFCR-CHECKPOINT";
pub const VERSION: u32 = 1;

struct Entry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut lines = String::new();
    for (_, name, t) in store.iter() {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let shape = if shape.is_empty() { "-".to_string() } else { shape.join(",") };
        let _ = writeln!(
            lines,
            "tensor {name} {} {shape} {offset} {}",
            u8::from(t.requires_grad),
            payload.len() - offset
        );
    }
    let mut head = String::new();
    let _ = writeln!(head, "{MAGIC}");
    let _ = writeln!(head, "version {VERSION}");
    let _ = writeln!(head, "dtype {}", T::DTYPE.name());
    let _ = writeln!(head, "tensors {}", store.len());
    let _ = writeln!(head, "payload_bytes {}", payload.len());
    let _ = writeln!(head, "checksum {:08x}", crc32fast::hash(&payload));
    head.push_str(&lines);
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest is not terminated by `end`".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    let mut it = lines.iter();
    if it.next().map(String::as_str) != Some(MAGIC) {
        return Err(bad("missing checkpoint header".into()));
    }
    let mut field = |key: &str| -> Result<String> {
        let line = it.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    };
    let version: u32 = field("version")?.parse().map_err(|_| bad("bad version".into()))?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let dtype = field("dtype")?;
    if DType::parse(&dtype) != Some(T::DTYPE) {
        return Err(bad(format!("checkpoint holds {dtype}, expected {}", T::DTYPE.name())));
    }
    let count: usize = field("tensors")?.parse().map_err(|_| bad("bad tensor count".into()))?;
    let payload_bytes: usize = field("payload_bytes")?.parse().map_err(|_| bad("bad payload size".into()))?;
    let expected =
        u32::from_str_radix(&field("checksum")?, 16).map_err(|_| bad("bad checksum field".into()))?;
    let payload = &bytes[pos..];
    let found = crc32fast::hash(payload);
    if payload.len() != payload_bytes || found != expected {
        return Err(Error::Checksum { expected, found });
    }

    let entries = it
        .map(|line| parse_entry(line).ok_or_else(|| bad(format!("bad tensor line `{line}`"))))
        .collect::<Result<Vec<_>>>()?;
    if entries.len() != count {
        return Err(bad(format!("manifest lists {} tensors, header says {count}", entries.len())));
    }
    let width = T::DTYPE.size();
    let mut store = ParamStore::new();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if e.len != numel * width || e.offset + e.len > payload.len() {
            return Err(bad(format!("tensor `{}` has inconsistent extent", e.name)));
        }
        let data = payload[e.offset..e.offset + e.len].chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(e.shape, data)?;
        if e.trainable {
            store.add(e.name, t)?;
        } else {
            store.add_buffer(e.name, t)?;
        }
    }
    Ok(store)
}

fn parse_entry(line: &str) -> Option<Entry> {
    let mut f = line.strip_prefix("tensor ")?.split(' ');
    let name = f.next()?.to_string();
    let trainable = match f.next()? {
        "1" => true,
        "0" => false,
        _ => return None,
    };
    let shape = match f.next()? {
        "-" => Vec::new(),
        dims => dims.split(',').map(|s| s.parse().ok()).collect::<Option<Vec<usize>>>()?,
    };
    let offset = f.next()?.parse().ok()?;
    let len = f.next()?.parse().ok()?;
    if f.next().is_some() {
        return None;
    }
    Some(Entry {
        name,
        trainable,
        shape,
        offset,
        len,
    })
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    from_bytes(&std::fs::read(path)?)
}

/// Copies checkpoint values into a store built from a model config.
/// Names and shapes must match exactly; trainable flags stay as configured.
pub fn load_into<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let loaded = load_checkpoint::<T>(path)?;
    if loaded.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (_, name, t) in loaded.iter() {
        let id = store.id(name)?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Shape {
                op: "checkpoint",
                lhs: t.shape().to_vec(),
                rhs: store.get(id).shape().to_vec(),
            });
        }
    }
    for (_, name, t) in loaded.iter() {
        let id = store.id(name)?;
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap())
            .unwrap();
        s.add_buffer("a.mean", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        s.add("a.scale", Tensor::scalar(0.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        let back: ParamStore<f32> = from_bytes(&to_bytes(&s)).unwrap();
        for ((_, n1, a), (_, n2, b)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.requires_grad, b.requires_grad);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = to_bytes(&sample());
        let err = from_bytes::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }));
    }

    #[test]
    fn wrong_dtype_and_version() {
        let bytes = to_bytes(&sample());
        assert!(from_bytes::<f64>(&bytes).is_err());
        let text = String::from_utf8_lossy(&bytes).replacen("version 1", "version 9", 1);
        assert!(matches!(from_bytes::<f32>(text.as_bytes()), Err(Error::Version(9))));
    }
}
