//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Nothing here calls into the library's routing,
//! activation or decoding code.

#![allow(dead_code)]

use std::path::PathBuf;

/// Data root: `CAPSROUTE_DATA_DIR`, else `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("CAPSROUTE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn require_data(sub: &str) -> PathBuf {
    let dir = data_dir().join(sub);
    assert!(
        dir.is_dir(),
        "{} is missing; run scripts/fetch_data.sh or set CAPSROUTE_DATA_DIR",
        dir.display()
    );
    dir
}

fn squash_ref(s: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = sq / (1.0 + sq) / sq.sqrt();
    s.iter().map(|x| x * k).collect()
}

/// Output capsules and every iteration's coefficients, written as plain
/// loops over nested vectors. `u[i][k]`, `w[i][j][r][k]`.
pub struct OracleRouting {
    pub outputs: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<Vec<f64>>>,
}

pub fn routing_oracle(u: &[Vec<f64>], w: &[Vec<Vec<Vec<f64>>>], iterations: usize) -> OracleRouting {
    let n_in = u.len();
    let n_out = w[0].len();
    let d_out = w[0][0].len();
    // votes v[i][j] = w[i][j] · u[i]
    let mut v = vec![vec![vec![0.0; d_out]; n_out]; n_in];
    for i in 0..n_in {
        for j in 0..n_out {
            for r in 0..d_out {
                let mut acc = 0.0;
                for k in 0..u[i].len() {
                    acc += w[i][j][r][k] * u[i][k];
                }
                v[i][j][r] = acc;
            }
        }
    }
    let mut b = vec![vec![0.0; n_out]; n_in];
    let mut outputs = vec![vec![0.0; d_out]; n_out];
    let mut history = Vec::new();
    for it in 0..iterations {
        let mut c = vec![vec![0.0; n_out]; n_in];
        for i in 0..n_in {
            let m = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = b[i].iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n_out {
                c[i][j] = e[j] / z;
            }
        }
        for j in 0..n_out {
            let mut s = vec![0.0; d_out];
            for i in 0..n_in {
                for r in 0..d_out {
                    s[r] += c[i][j] * v[i][j][r];
                }
            }
            outputs[j] = squash_ref(&s);
        }
        history.push(c);
        if it + 1 < iterations {
            for i in 0..n_in {
                for j in 0..n_out {
                    let dot: f64 = (0..d_out).map(|r| v[i][j][r] * outputs[j][r]).sum();
                    b[i][j] += dot;
                }
            }
        }
    }
    OracleRouting {
        outputs,
        coefficients: history,
    }
}

/// Reads a big-endian u32 at `off`.
fn be32(b: &[u8], off: usize) -> u32 {
    ((b[off] as u32) << 24) | ((b[off + 1] as u32) << 16) | ((b[off + 2] as u32) << 8) | b[off + 3] as u32
}

/// `(count, rows, cols)` and the raw bytes of image `index`, straight from
/// an IDX3 file.
pub fn idx_image_bytes(file: &[u8], index: usize) -> (usize, usize, usize, Vec<u8>) {
    assert_eq!(be32(file, 0), 2051);
    let (n, rows, cols) = (be32(file, 4) as usize, be32(file, 8) as usize, be32(file, 12) as usize);
    let start = 16 + index * rows * cols;
    (n, rows, cols, file[start..start + rows * cols].to_vec())
}

pub fn idx_label(file: &[u8], index: usize) -> (usize, u8) {
    assert_eq!(be32(file, 0), 2049);
    (be32(file, 4) as usize, file[8 + index])
}

/// Label and planar pixel bytes of record `index` of a CIFAR-10 batch.
pub fn cifar_record(file: &[u8], index: usize) -> (u8, Vec<u8>) {
    let rec = &file[index * 3073..(index + 1) * 3073];
    (rec[0], rec[1..].to_vec())
}

/// FNV-1a, used as a checksum of byte dumps.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `d_out × d_in` matrix with orthonormal columns (needs `d_out ≥ d_in`),
/// from Gram-Schmidt on random columns.
pub fn orthonormal_columns(d_out: usize, d_in: usize, mut draw: impl FnMut() -> f64) -> Vec<Vec<f64>> {
    assert!(d_out >= d_in);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d_in {
        let mut c: Vec<f64> = (0..d_out).map(|_| draw()).collect();
        for prev in &cols {
            let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(c.into_iter().map(|x| x / n).collect());
        }
    }
    (0..d_out).map(|r| (0..d_in).map(|k| cols[k][r]).collect()).collect()
}
