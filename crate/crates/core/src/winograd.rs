//! Winograd minimal filtering F(4,3): four outputs of a 3-tap correlation
//! from six inputs using six data multiplications.
//!
//! The transforms are derived by Toom-Cook interpolation at the points
//! `{0, 1, -1, 2, -2, inf}` in exact rational arithmetic. For the correlation
//! `o_q = sum_s f_s * i_{q+s}` the tile computation is
//! `o = A^T [ (G f) . (B^T i) ]`.

use std::ops::{Add, Mul};
use std::sync::OnceLock;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OUTPUTS: usize = 4;
pub const TAPS: usize = 3;
pub const TILE: usize = OUTPUTS + TAPS - 1;

const POINTS: [i64; TILE - 1] = [0, 1, -1, 2, -2];

type Q = Ratio<i64>;

/// Arithmetic needed by the tile transforms. Multiplication by a transform
/// constant goes through [`TileScalar::scale`]; `Mul` is reserved for the
/// data-by-data products of the elementwise stage.
pub trait TileScalar: Copy + Add<Output = Self> + Mul<Output = Self> {
    fn zero() -> Self;
    fn scale(self, c: f64) -> Self;
}

impl TileScalar for f64 {
    fn zero() -> Self {
        0.0
    }
    #[inline(always)]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

impl TileScalar for f32 {
    fn zero() -> Self {
        0.0
    }
    #[inline(always)]
    fn scale(self, c: f64) -> Self {
        self * c as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinogradF43 {
    /// `B^T`, 6x6.
    pub input_transform: [[f64; TILE]; TILE],
    /// `G`, 6x3.
    pub filter_transform: [[f64; TAPS]; TILE],
    /// `A^T`, 4x6.
    pub output_transform: [[f64; TILE]; OUTPUTS],
}

/// Rows of an evaluation matrix: `[1, p, p^2, ...]` for each finite point and
/// the leading coefficient for the point at infinity.
fn evaluation(cols: usize) -> Vec<Vec<Q>> {
    let mut m: Vec<Vec<Q>> = POINTS
        .iter()
        .map(|&p| (0..cols).map(|k| Q::from_integer(p.pow(k as u32))).collect())
        .collect();
    let mut inf = vec![Q::from_integer(0); cols];
    inf[cols - 1] = Q::from_integer(1);
    m.push(inf);
    m
}

fn invert(m: &[Vec<Q>]) -> Vec<Vec<Q>> {
    let n = m.len();
    let zero = Q::from_integer(0);
    let one = Q::from_integer(1);
    let mut a: Vec<Vec<Q>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { one } else { zero }));
            r
        })
        .collect();
    for col in 0..n {
        let p = (col..n)
            .find(|&i| a[i][col] != zero)
            .expect("evaluation matrix at distinct points is invertible");
        a.swap(col, p);
        let pv = a[col][col];
        for v in a[col].iter_mut() {
            *v /= pv;
        }
        for i in 0..n {
            if i != col && a[i][col] != zero {
                let f = a[i][col];
                let pivot_row = a[col].clone();
                for (v, pr) in a[i].iter_mut().zip(pivot_row) {
                    *v -= f * pr;
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn to_f64(q: &Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Sliding dot products computed directly: 12 multiplications.
pub fn direct_tile<T: TileScalar>(i: &[T; TILE], f: &[T; TAPS]) -> [T; OUTPUTS] {
    std::array::from_fn(|q| (0..TAPS).fold(T::zero(), |acc, s| acc + f[s] * i[q + s]))
}

/// The elementwise stage: exactly `TILE` data multiplications.
#[inline(always)]
pub fn hadamard<T: TileScalar>(u: &[T; TILE], v: &[T; TILE]) -> [T; TILE] {
    std::array::from_fn(|j| u[j] * v[j])
}

#[inline(always)]
fn apply<T: TileScalar, const R: usize, const C: usize>(m: &[[f64; C]; R], x: &[T; C]) -> [T; R] {
    std::array::from_fn(|r| {
        let mut acc = T::zero();
        for (c, &k) in m[r].iter().enumerate() {
            if k == 1.0 {
                acc = acc + x[c];
            } else if k != 0.0 {
                acc = acc + x[c].scale(k);
            }
        }
        acc
    })
}

impl WinogradF43 {
    /// Shared, self-checked instance.
    pub fn get() -> &'static WinogradF43 {
        static INSTANCE: OnceLock<WinogradF43> = OnceLock::new();
        INSTANCE.get_or_init(|| derive_f43().expect("F(4,3) self-check"))
    }

    pub fn transform_filter<T: TileScalar>(&self, f: &[T; TAPS]) -> [T; TILE] {
        apply(&self.filter_transform, f)
    }

    pub fn transform_input<T: TileScalar>(&self, i: &[T; TILE]) -> [T; TILE] {
        apply(&self.input_transform, i)
    }

    pub fn output_transform<T: TileScalar>(&self, m: &[T; TILE]) -> [T; OUTPUTS] {
        apply(&self.output_transform, m)
    }

    /// Four correlation outputs of `f` over `i`.
    pub fn conv_tile<T: TileScalar>(&self, i: &[T; TILE], f: &[T; TAPS]) -> [T; OUTPUTS] {
        let u = self.transform_filter(f);
        let v = self.transform_input(i);
        self.output_transform(&hadamard(&u, &v))
    }
}

/// Builds `B^T`, `G` and `A^T` and verifies them on 1000 random tiles.
///
/// With evaluation matrices `V_n` (6x6), `V_r` (6x3) and `V_m` (6x4), linear
/// convolution is `V_n^-1 [(V_r g) . (V_m h)]`; transposing the map in `h`
/// gives correlation with `A^T = V_m^T`, `G = V_r`, `B^T = V_n^-T`. Each row
/// `j` of `B^T` is then scaled to coprime integers and row `j` of `G` by the
/// inverse factor.
pub fn derive_f43() -> Result<WinogradF43> {
    let vn = evaluation(TILE);
    let mut g = evaluation(TAPS);
    let vm = evaluation(OUTPUTS);
    let inv = invert(&vn);
    let mut bt: Vec<Vec<Q>> = (0..TILE).map(|i| (0..TILE).map(|j| inv[j][i]).collect()).collect();
    for (brow, grow) in bt.iter_mut().zip(g.iter_mut()) {
        let lcm = brow
            .iter()
            .fold(1i64, |l, q| l / gcd(l, *q.denom()) * *q.denom());
        let common = brow.iter().fold(0i64, |acc, q| gcd(acc, (q * lcm).to_integer()));
        let mut s = Q::new(lcm, common);
        if brow.iter().find(|q| **q != Q::from_integer(0)).is_some_and(|q| *q < Q::from_integer(0)) {
            s = -s;
        }
        for v in brow.iter_mut() {
            *v *= s;
        }
        for v in grow.iter_mut() {
            *v /= s;
        }
    }

    let w = WinogradF43 {
        input_transform: std::array::from_fn(|r| std::array::from_fn(|c| to_f64(&bt[r][c]))),
        filter_transform: std::array::from_fn(|r| std::array::from_fn(|c| to_f64(&g[r][c]))),
        output_transform: std::array::from_fn(|r| std::array::from_fn(|c| to_f64(&vm[c][r]))),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x05ee_df43);
    for _ in 0..1000 {
        let i: [f64; TILE] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let f: [f64; TAPS] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let got = w.conv_tile(&i, &f);
        let want = direct_tile(&i, &f);
        let err = got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if err >= 1e-10 {
            return Err(Error::InvalidConfig(format!(
                "derived F(4,3) transforms fail the self-check (error {err:e})"
            )));
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_are_small_rationals() {
        let w = WinogradF43::get();
        assert_eq!(w.input_transform[0], [4.0, 0.0, -5.0, 0.0, 1.0, 0.0]);
        assert_eq!(w.input_transform[5], [0.0, 4.0, 0.0, -5.0, 0.0, 1.0]);
        assert_eq!(w.filter_transform[0], [0.25, 0.0, 0.0]);
        assert_eq!(w.filter_transform[5], [0.0, 0.0, 1.0]);
        assert_eq!(w.output_transform[3], [0.0, 1.0, -1.0, 8.0, -8.0, 1.0]);
    }

    #[test]
    fn delta_filter_copies_inputs() {
        let w = WinogradF43::get();
        let out = w.conv_tile(&[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[1.0, 0.0, 0.0]);
        for (o, e) in out.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ones() {
        let out = WinogradF43::get().conv_tile(&[1.0f64; 6], &[1.0; 3]);
        for o in out {
            assert!((o - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vectors() {
        let w = WinogradF43::get();
        assert_eq!(w.transform_filter(&[0.0f64; 3]), [0.0; 6]);
        assert_eq!(w.transform_input(&[0.0f64; 6]), [0.0; 6]);
        assert_eq!(w.output_transform(&[0.0f64; 6]), [0.0; 4]);
    }

    #[test]
    fn unit_filter_gives_first_column_of_g() {
        let w = WinogradF43::get();
        let u = w.transform_filter(&[1.0f64, 0.0, 0.0]);
        for (j, row) in w.filter_transform.iter().enumerate() {
            assert_eq!(u[j], row[0]);
        }
    }
}
