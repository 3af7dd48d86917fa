//! Random row-selection sensing operator `Φ`.
//!
//! `Φ` keeps `m = round(SR·n)` of the `n` ambient coordinates (round half
//! up). The kept indices are the first `m` entries of a Fisher-Yates shuffle
//! of `0..n` driven by the ChaCha8 `Mask` stream of the seed, then sorted, so
//! a mask is reproduced bit-exactly from `(n, SR, seed)`.
//!
//! Text format (one mask per file):
//!
//! ```text
//! n m sr seed
//! i_0 i_1 ... i_{m-1}
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{check_len, Error, Result};
use crate::fsio::{read_text, write_atomic};
use crate::linalg::DenseMatrix;
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMatrix {
    n: usize,
    selected: Vec<usize>,
    sr: f64,
    seed: u64,
}

/// `round(sr·n)` with halves rounded up.
pub fn sensed_count(n: usize, sr: f64) -> usize {
    (sr * n as f64 + 0.5).floor() as usize
}

pub fn make_sampler(n: usize, sr: f64, seed: u64) -> Result<SamplingMatrix> {
    if !(sr > 0.0 && sr <= 1.0) {
        return Err(Error::invalid("sampling rate", format!("{sr} is outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::invalid("ambient dimension", "must be at least 1"));
    }
    let m = sensed_count(n, sr);
    if m == 0 {
        return Err(Error::invalid(
            "sampling rate",
            format!("{sr} keeps no coordinates of {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Mask, 0));
    let mut selected = order[..m].to_vec();
    selected.sort_unstable();
    Ok(SamplingMatrix {
        n,
        selected,
        sr,
        seed,
    })
}

impl SamplingMatrix {
    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn sensed_dim(&self) -> usize {
        self.selected.len()
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sr
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `y = Φx`
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("sensed signal", self.n, x.len())?;
        Ok(self.selected.iter().map(|&i| x[i]).collect())
    }

    /// `Φ·W`: the selected rows of `w`.
    pub fn compose(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        check_len("sensing composition rows", self.n, w.rows())?;
        Ok(w.select_rows(&self.selected))
    }

    /// `Φᵀy`: lifts a sensed vector back to the ambient dimension, zeros
    /// elsewhere.
    pub fn scatter(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("scattered vector", self.selected.len(), y.len())?;
        let mut x = vec![0.0; self.n];
        for (&i, &v) in self.selected.iter().zip(y) {
            x[i] = v;
        }
        Ok(x)
    }

    /// Materialized `m x n` 0/1 matrix.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.selected.len(), self.n);
        for (r, &c) in self.selected.iter().enumerate() {
            d.set(r, c, 1.0);
        }
        d
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {} {}\n", self.n, self.selected.len(), self.sr, self.seed);
        for (k, i) in self.selected.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            write!(s, "{i}").unwrap();
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| err(1, "missing header".into()))?
            .split_whitespace()
            .collect();
        if header.len() != 4 {
            return Err(err(1, format!("expected `n m sr seed`, found {} fields", header.len())));
        }
        let n: usize = header[0].parse().map_err(|e| err(1, format!("n: {e}")))?;
        let m: usize = header[1].parse().map_err(|e| err(1, format!("m: {e}")))?;
        let sr: f64 = header[2].parse().map_err(|e| err(1, format!("sr: {e}")))?;
        let seed: u64 = header[3].parse().map_err(|e| err(1, format!("seed: {e}")))?;
        let selected = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| err(2, format!("index `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if selected.len() != m {
            return Err(err(2, format!("header declares {m} indices, found {}", selected.len())));
        }
        if m == 0 || selected.windows(2).any(|w| w[0] >= w[1]) || selected[m - 1] >= n {
            return Err(err(2, format!("indices must be strictly increasing within [0, {n})")));
        }
        if !(sr > 0.0 && sr <= 1.0) {
            return Err(err(1, format!("sampling rate {sr} is outside (0, 1]")));
        }
        Ok(SamplingMatrix {
            n,
            selected,
            sr,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm2;
    use proptest::prelude::*;

    #[test]
    fn cardinality() {
        let phi = make_sampler(4, 0.5, 3).unwrap();
        assert_eq!(phi.sensed_dim(), 2);
        assert!(phi.selected().iter().all(|&i| i < 4));
        assert_eq!(make_sampler(784, 0.8, 1).unwrap().sensed_dim(), 627);
        assert_eq!(make_sampler(784, 0.6, 1).unwrap().sensed_dim(), 470);
        assert_eq!(sensed_count(10, 0.25), 3);
    }

    #[test]
    fn full_sampling_is_identity() {
        let phi = make_sampler(10, 1.0, 99).unwrap();
        assert_eq!(phi.selected(), (0..10).collect::<Vec<_>>().as_slice());
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 1.5).collect();
        assert_eq!(phi.apply(&x).unwrap(), x);
        let w = DenseMatrix::from_fn(10, 3, |i, j| (i * j) as f64);
        assert_eq!(phi.compose(&w).unwrap(), w);
    }

    #[test]
    fn bad_rates_are_rejected() {
        assert!(make_sampler(10, 0.0, 1).is_err());
        assert!(make_sampler(10, 1.5, 1).is_err());
        assert!(make_sampler(10, f64::NAN, 1).is_err());
        assert!(make_sampler(10, 0.01, 1).is_err());
    }

    #[test]
    fn explicit_selection() {
        let phi = SamplingMatrix {
            n: 3,
            selected: vec![0, 2],
            sr: 2.0 / 3.0,
            seed: 0,
        };
        assert_eq!(phi.apply(&[5.0, 6.0, 7.0]).unwrap(), vec![5.0, 7.0]);
        assert!(phi.apply(&[1.0, 2.0]).is_err());
        let one = SamplingMatrix {
            n: 2,
            selected: vec![1],
            sr: 0.5,
            seed: 0,
        };
        let w = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(one.compose(&w).unwrap(), DenseMatrix::from_rows(&[&[3.0, 4.0]]));
        assert!(one.compose(&DenseMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn matches_materialized_operator() {
        let phi = make_sampler(30, 0.4, 11).unwrap();
        let dense = phi.to_dense();
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        assert_eq!(phi.apply(&x).unwrap(), dense.matvec(&x).unwrap());
        let w = DenseMatrix::from_fn(30, 4, |i, j| (i as f64 + 0.3 * j as f64).cos());
        assert_eq!(phi.compose(&w).unwrap(), dense.matmul(&w).unwrap());
        let y: Vec<f64> = (0..phi.sensed_dim()).map(|i| i as f64).collect();
        assert_eq!(phi.scatter(&y).unwrap(), dense.matvec_t(&y).unwrap());
    }

    #[test]
    fn text_round_trip_and_validation() {
        let phi = make_sampler(50, 0.3, 12345).unwrap();
        let back = SamplingMatrix::from_text(&phi.to_text(), Path::new("mask")).unwrap();
        assert_eq!(back, phi);
        let p = Path::new("bad");
        assert!(SamplingMatrix::from_text("4 2 0.5 1\n0 0\n", p).is_err());
        assert!(SamplingMatrix::from_text("4 2 0.5 1\n0 7\n", p).is_err());
        assert!(SamplingMatrix::from_text("4 3 0.5 1\n0 1\n", p).is_err());
        assert!(SamplingMatrix::from_text("4 2 0.5\n0 1\n", p).is_err());
    }

    proptest! {
        #[test]
        fn apply_equals_compose_identity_and_never_adds_energy(
            n in 1usize..40, sr in 0.05f64..=1.0, seed in any::<u64>(),
            xs in proptest::collection::vec(-10.0f64..10.0, 40)
        ) {
            prop_assume!(sensed_count(n, sr) >= 1);
            let phi = make_sampler(n, sr, seed).unwrap();
            let x = &xs[..n];
            let y = phi.apply(x).unwrap();
            let via = phi.compose(&DenseMatrix::identity(n)).unwrap().matvec(x).unwrap();
            prop_assert_eq!(&y, &via);
            prop_assert!(norm2(&y) <= norm2(x));
            prop_assert_eq!(phi.clone(), make_sampler(n, sr, seed).unwrap());
        }
    }
}
