//! `IRKW` weight container.
//!
//! ```text
//! "IRKW" | version u32 | task u8 | count u32
//! count × ( name_len u16 | name utf-8 | rank u8 | dims u32 × rank | f32 × Π dims )
//! crc32 u32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;

use super::config::Task;
use crate::error::{ContainerError, Result};
use crate::nn::Tensor;

pub const MAGIC: [u8; 4] = *b"IRKW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub task: Task,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode<'a>(
    task: Task,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(task.byte());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name) {
            return Err(ContainerError::DuplicateName(name.to_string()).into());
        }
        let len = u16::try_from(name.len())
            .map_err(|_| ContainerError::Malformed(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| ContainerError::Malformed(format!("`{name}`: rank {} too large", t.rank())))?;
        buf.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| ContainerError::Malformed(format!("`{name}`: dim {d} too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ContainerError::Truncated(format!("{what} at byte {} needs {n} bytes", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 {
        return Err(ContainerError::Truncated(format!("{} bytes is shorter than the magic", bytes.len())).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic).into());
    }
    if bytes.len() < 8 {
        return Err(ContainerError::Truncated("missing version".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::Version {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    if bytes.len() < 12 {
        return Err(ContainerError::Truncated("missing header or checksum".into()).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { bytes: body, pos: 8 };
    let task_byte = r.u8("task byte")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| ContainerError::Malformed(format!("tensor {i}: name is not utf-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ContainerError::Malformed(format!("`{name}`: dims {dims:?} overflow")))?;
        let raw = r.take(n, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| ContainerError::Malformed(format!("`{name}`: {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name).into());
        }
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(ContainerError::Malformed(format!(
            "{} trailing bytes before the checksum",
            body.len() - r.pos
        ))
        .into());
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ContainerError::Checksum { stored, computed }.into());
    }
    let task = Task::from_byte(task_byte)
        .ok_or_else(|| ContainerError::Malformed(format!("unknown task byte {task_byte}")))?;
    Ok(Container { task, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        encode(Task::Localization, [("a", &a), ("b.c", &b)]).unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let b = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        let bytes = encode(Task::Segmentation, [("w", &b)]).unwrap();
        let mut want = b"IRKW".to_vec();
        want.extend([1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, b'w', 1, 1, 0, 0, 0]);
        want.extend(0.5f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend(crc.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let c = decode(&bytes).unwrap();
        assert_eq!(c.task, Task::Localization);
        assert_eq!(c.tensors[1].0, "b.c");
        let again = encode(c.task, c.tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Container(ContainerError::BadMagic(_)))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Container(ContainerError::Version { found: 2, .. }))));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 9]),
            Err(Error::Container(ContainerError::Truncated(_)))
        ));
        let mut bad = bytes.clone();
        let k = bad.len() - 6;
        bad[k] ^= 1;
        assert!(matches!(decode(&bad), Err(Error::Container(ContainerError::Checksum { .. }))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let b = Tensor::new(vec![1], vec![0.5f32]).unwrap();
        assert!(encode(Task::Segmentation, [("w", &b), ("w", &b)]).is_err());
    }
}
