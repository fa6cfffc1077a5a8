//! Fixed-capacity vectors for points and directions in dimension <= 3.
//!
//! Components beyond the active dimension are kept at zero, so dot products
//! and norms may run over the full array.

pub const MAX_DIM: usize = 3;

pub type Vector = [f64; MAX_DIM];

/// Square matrix indexed `[row][col]`, same padding convention as [`Vector`].
pub type Matrix = [[f64; MAX_DIM]; MAX_DIM];

pub const ZERO: Vector = [0.0; MAX_DIM];

#[inline]
pub fn dot(a: &Vector, b: &Vector) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm2(a: &Vector) -> f64 {
    dot(a, a)
}

#[inline]
pub fn sub(a: &Vector, b: &Vector) -> Vector {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: &Vector, s: f64) -> Vector {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// `m * a`.
#[inline]
pub fn mat_vec(m: &Matrix, a: &Vector) -> Vector {
    let mut out = ZERO;
    for (o, row) in out.iter_mut().zip(m) {
        *o = dot(row, a);
    }
    out
}

/// Copies a slice into a padded vector. Panics if the slice is longer than
/// [`MAX_DIM`].
pub fn from_slice(s: &[f64]) -> Vector {
    let mut v = ZERO;
    v[..s.len()].copy_from_slice(s);
    v
}

/// Maps a coordinate into `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x.floor() can round so that w == 1.0 for tiny negative x
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Toroidal distance between two points of `T^d = (R/Z)^d`.
pub fn torus_distance(a: &Vector, b: &Vector, dim: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..dim {
        let mut d = (a[k] - b[k]).rem_euclid(1.0);
        if d > 0.5 {
            d = 1.0 - d;
        }
        acc += d * d;
    }
    acc.sqrt()
}
