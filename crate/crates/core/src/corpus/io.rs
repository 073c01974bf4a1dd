//! Raw little-endian float32 arrays with `<name>.shape.json` sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeFile {
    pub dims: Vec<usize>,
}

pub fn array_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.f32"))
}

pub fn shape_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.shape.json"))
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Writes `<name>.f32` plus its shape sidecar. Values are narrowed to f32.
pub fn write_array(dir: &Path, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), values.len(), "dims do not match value count");
    let p = array_path(dir, name);
    fs::write(&p, encode_f32(values)).map_err(|e| Error::io(&p, e))?;
    write_json(&shape_path(dir, name), &ShapeFile { dims: dims.to_vec() })
}

pub fn write_matrix(dir: &Path, name: &str, m: &Matrix) -> Result<()> {
    write_array(dir, name, &[m.rows(), m.cols()], m.data())
}

/// Reads an array and its sidecar, checking the element count.
pub fn read_array(dir: &Path, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let sp = shape_path(dir, name);
    let shape: ShapeFile = read_json(&sp)?;
    let p = array_path(dir, name);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let values = decode_f32(&bytes).ok_or_else(|| Error::data(&p, "byte length is not a multiple of 4"))?;
    let want: usize = shape.dims.iter().product();
    if values.len() != want {
        return Err(Error::data(&p, format!("holds {} values but sidecar declares {:?}", values.len(), shape.dims)));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(&p, "contains non-finite values"));
    }
    Ok((shape.dims, values))
}

/// Reads a 1-D or 2-D array as a matrix (1-D becomes a single row).
pub fn read_matrix(dir: &Path, name: &str) -> Result<Matrix> {
    let (dims, values) = read_array(dir, name)?;
    match dims.as_slice() {
        [n] => Ok(Matrix::from_vec(1, *n, values)),
        [r, c] => Ok(Matrix::from_vec(*r, *c, values)),
        other => Err(Error::data(array_path(dir, name), format!("expected 1-D or 2-D array, got dims {other:?}"))),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

/// Rounds every value to the nearest f32 so later f32 storage is lossless.
pub fn round_f32(m: &mut Matrix) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_representable_values_round_trip(values in proptest::collection::vec(-1e6f32..1e6f32, 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let m = Matrix::from_vec(1, values.len(), values.iter().map(|v| *v as f64).collect());
            write_matrix(dir.path(), "x", &m).unwrap();
            let back = read_matrix(dir.path(), "x").unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn size_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_array(dir.path(), "mel", &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        write_json(&shape_path(dir.path(), "mel"), &ShapeFile { dims: vec![3, 2] }).unwrap();
        let err = read_matrix(dir.path(), "mel").unwrap_err().to_string();
        assert!(err.contains("mel.f32"), "{err}");
    }
}
