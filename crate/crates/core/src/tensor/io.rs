//! Binary tensor format: `DFTN`, u8 rank, u32 LE extents, f32 LE row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DFTN";

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("extent exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: "<stream>".into(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("missing DFTN magic"));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut buf = [0u8; 4];
    for _ in 0..rank[0] {
        r.read_exact(&mut buf)?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    if shape.contains(&0) {
        return Err(bad("zero extent"));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        write_tensor_to(&mut bytes, &t).unwrap();
        let mut expected = b"DFTN".to_vec();
        expected.push(2);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_wrong_magic() {
        let bytes = b"XXXX\x00\x00\x00\x00\x00";
        assert!(read_tensor_from(&mut &bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn f32_representable_values_round_trip(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 / 7.0) as f64)
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut bytes = Vec::new();
            write_tensor_to(&mut bytes, &t).unwrap();
            let back = read_tensor_from(&mut &bytes[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
