//! Scalar abstraction so the same code runs in `f32` (pipeline) and `f64`
//! (finite-difference checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot represent at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Little-endian bytes of the native representation, used for checksums.
    fn le_bytes(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Casts a slice between scalar types.
pub fn cast_slice<A: Real, B: Real>(src: &[A]) -> Vec<B> {
    src.iter().map(|&v| B::lit(v.as_f64())).collect()
}

/// SHA-256 over the little-endian bytes of `values`, hex encoded.
pub fn checksum<T: Real>(values: &[T]) -> String {
    use sha2::{Digest, Sha256};
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values {
        v.le_bytes(&mut bytes);
    }
    hex::encode(Sha256::digest(&bytes))
}
