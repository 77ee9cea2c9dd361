//! `FXT1` tensor files.
//!
//! Little-endian layout:
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `b"FXT1"`                  |
//! | 4            | `u32` rank                       |
//! | 8 × rank     | `u64` extents                    |
//! | 8 × product  | `f64` values in row-major order  |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FXT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("FXT1 tensor", format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(&mut r, &mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("FXT1 tensor", "extent product overflows"))?;
    if r.len() != n * 8 {
        return Err(Error::format(
            "FXT1 tensor",
            format!("expected {} payload bytes, found {}", n * 8, r.len()),
        ));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect();
    Tensor::new(shape, data)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("FXT1 tensor", "truncated header"))
}

pub fn write_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f64>::from_f64([1, 2], &[1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expect = b"FXT1".to_vec();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode::<f64>(b"FXT2\0\0\0\0").is_err());
        assert!(decode::<f64>(b"FX").is_err());
        let mut bytes = encode(&Tensor::<f64>::ones([3]));
        bytes.pop();
        assert!(decode::<f64>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut rng = crate::RngStream::new(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.next_normal() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
