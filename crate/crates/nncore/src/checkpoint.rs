//! `JRTCKPT v1` checkpoint files.
//!
//! ```text
//! JRTCKPT v1
//! <name> <dim>... <byte_offset>
//! ...
//! <blank line>
//! <little-endian f32 payloads, concatenated in manifest order>
//! ```
//! Offsets are relative to the first payload byte.

use std::io::Write;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &str = "JRTCKPT v1";

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let mut offset = 0usize;
    for (name, p) in params.iter() {
        header.push_str(name);
        for d in p.value.shape() {
            header.push(' ');
            header.push_str(&d.to_string());
        }
        header.push(' ');
        header.push_str(&offset.to_string());
        header.push('\n');
        offset += p.value.len() * 4;
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let fmt = |m: &str| NnError::Format(m.to_string());
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| fmt("missing blank line after manifest"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt("manifest is not UTF-8"))?;
    let payload = &bytes[end + 2..];
    let mut lines = header.split('\n');
    if lines.next() != Some(MAGIC) {
        return Err(fmt("bad magic line"));
    }
    let mut params = ParamSet::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < 3 {
            return Err(fmt(&format!("short manifest line `{line}`")));
        }
        let name = fields[0];
        let nums = fields[1..]
            .iter()
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| fmt(&format!("bad number in `{line}`")))?;
        let (offset, shape) = nums.split_last().unwrap();
        if *offset != expected_offset {
            return Err(fmt(&format!("`{name}` offset {offset}, expected {expected_offset}")));
        }
        let n: usize = shape.iter().product();
        let bytes = payload
            .get(*offset..offset + 4 * n)
            .ok_or_else(|| fmt(&format!("payload too short for `{name}`")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape.to_vec(), data)?)?;
        expected_offset += 4 * n;
    }
    if expected_offset != payload.len() {
        return Err(fmt("trailing payload bytes"));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let mut p = ParamSet::new();
        p.insert("M.w", Tensor::new(vec![1, 2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        p.insert("P.b", Tensor::scalar(0.5f32)).unwrap();
        let bytes = to_bytes(&p);
        let header = b"JRTCKPT v1\nM.w 1 2 0\nP.b 1 8\n\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 12);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        assert!(from_bytes(b"JRTCKPT v2\n\n").is_err());
        assert!(from_bytes(b"JRTCKPT v1\nw 2 0\n\n\0\0\0\0").is_err());
        assert!(from_bytes(b"JRTCKPT v1\nw 1 0").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(
            tensors in proptest::collection::vec(
                (1usize..4, 1usize..5).prop_flat_map(|(a, b)| (Just((a, b)), proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), a * b))),
                1..5,
            )
        ) {
            let mut p = ParamSet::new();
            for (i, ((a, b), data)) in tensors.into_iter().enumerate() {
                p.insert(format!("X.t{i}"), Tensor::new(vec![a, b], data).unwrap()).unwrap();
            }
            let bytes = to_bytes(&p);
            let q = from_bytes(&bytes).unwrap();
            prop_assert_eq!(to_bytes(&q), bytes);
            prop_assert_eq!(p.checksum(), q.checksum());
        }
    }
}
