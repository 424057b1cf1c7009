//! Flat binary tensor snapshots: `rows: u64 LE`, `cols: u64 LE`, then
//! `rows * cols` row-major `f64 LE` values. A snapshot list is a `u64 LE`
//! count followed by that many snapshots.

use std::io::{Read, Write};

use super::{Matrix, TensorError};

pub fn write_matrix<W: Write>(out: &mut W, m: &Matrix) -> Result<(), TensorError> {
    out.write_all(&(m.rows() as u64).to_le_bytes())?;
    out.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, TensorError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_matrix<R: Read>(input: &mut R) -> Result<Matrix, TensorError> {
    let rows = read_u64(input)? as usize;
    let cols = read_u64(input)? as usize;
    let len = rows
        .checked_mul(cols)
        .filter(|&l| l <= (1 << 34))
        .ok_or(TensorError::CorruptSnapshot("implausible shape"))?;
    let mut bytes = vec![0u8; len * 8];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrices<W: Write>(out: &mut W, ms: &[&Matrix]) -> Result<(), TensorError> {
    out.write_all(&(ms.len() as u64).to_le_bytes())?;
    for m in ms {
        write_matrix(out, m)?;
    }
    Ok(())
}

pub fn read_matrices<R: Read>(input: &mut R) -> Result<Vec<Matrix>, TensorError> {
    let count = read_u64(input)?;
    if count > 1 << 20 {
        return Err(TensorError::CorruptSnapshot("implausible tensor count"));
    }
    (0..count).map(|_| read_matrix(input)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn snapshot_round_trip_is_bit_exact(
            rows in 0usize..5,
            cols in 0usize..5,
            seed in proptest::collection::vec(any::<f64>(), 25),
        ) {
            let m = Matrix::from_vec(rows, cols, seed[..rows * cols].to_vec()).unwrap();
            let mut buf = Vec::new();
            write_matrices(&mut buf, &[&m, &m]).unwrap();
            prop_assert_eq!(buf.len(), 8 + 2 * (16 + 8 * rows * cols));
            let back = read_matrices(&mut buf.as_slice()).unwrap();
            prop_assert!(back.iter().all(|b| b.bit_eq(&m)));
        }
    }

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..8], &1u64.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1.5f64.to_le_bytes());
    }

    #[test]
    fn truncated_input_fails() {
        let m = Matrix::ones(2, 2);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_matrix(&mut buf.as_slice()).is_err());
    }
}
