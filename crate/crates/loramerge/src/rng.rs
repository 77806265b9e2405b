//! Deterministic random streams.
//!
//! Every random quantity in the crate comes from a counter-based ChaCha
//! stream keyed on a user seed plus domain strings, so regenerating with the
//! same key reproduces the same values bit-exactly on any platform.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET_A: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_OFFSET_B: u64 = 0x6c62_272e_07bb_0142;

fn key_material(domain: &str, keys: &[&str]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(domain.len() as u64).to_le_bytes());
    buf.extend_from_slice(domain.as_bytes());
    for k in keys {
        buf.extend_from_slice(&(k.len() as u64).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
    }
    buf
}

/// ChaCha stream keyed on `(seed, domain, keys...)`. Key strings are
/// length-prefixed before hashing so distinct tuples never collide by
/// concatenation.
pub fn keyed_rng(seed: u64, domain: &str, keys: &[&str]) -> ChaCha8Rng {
    let buf = key_material(domain, keys);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(FNV_OFFSET_A, &buf).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a64(FNV_OFFSET_B, &buf).to_le_bytes());
    key[24..32].copy_from_slice(&(buf.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed, e.g. one per sweep cell.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let mut buf = key_material(domain, &[]);
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a64(FNV_OFFSET_A ^ seed, &buf)
}

/// Standard-normal matrix filled column by column.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}
