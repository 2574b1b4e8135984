//! L-band machinery: band storage, reconstruction of an L-banded inverse from
//! band entries, maximum-entropy completion of off-band entries, and the
//! information-loss divergence.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{DkfError, Result};
use crate::linalg;

/// Relative Frobenius tolerance for reconstruction checks.
pub const RECONSTRUCTION_TOL: f64 = 1e-9;
/// Absolute tolerance for collapsed off-band entries.
pub const COLLAPSE_TOL: f64 = 1e-8;

/// Symmetric entries `s_ij` with `|i - j| <= l` over the index range
/// `off..off + len` of an `n`-dimensional matrix.
///
/// A global profile has `off == 0` and `len == n`; sensors keep local slices.
#[derive(Debug, Clone, PartialEq)]
pub struct BandProfile {
    n: usize,
    off: usize,
    len: usize,
    l: usize,
    data: Vec<f64>,
}

impl BandProfile {
    pub fn zeros(n: usize, l: usize) -> Self {
        Self::zeros_local(n, 0, n, l)
    }

    pub fn zeros_local(n: usize, off: usize, len: usize, l: usize) -> Self {
        assert!(off + len <= n, "local range exceeds dimension");
        Self {
            n,
            off,
            len,
            l,
            data: vec![0.0; len * (l + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn width(&self) -> usize {
        self.l
    }
    pub fn offset(&self) -> usize {
        self.off
    }
    pub fn len(&self) -> usize {
        self.len
    }
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
    /// Global index range covered by this profile.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let r = self.range();
        r.contains(&i) && r.contains(&j) && i.abs_diff(j) <= self.l
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        (a - self.off) * (self.l + 1) + (b - a)
    }

    /// Entry `(i, j)` in global indices. Panics outside the stored band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(self.contains(i, j), "({i}, {j}) not stored");
        self.data[self.slot(i, j)]
    }

    pub fn try_get(&self, i: usize, j: usize) -> Option<f64> {
        self.contains(i, j).then(|| self.data[self.slot(i, j)])
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.contains(i, j), "({i}, {j}) not stored");
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.contains(i, j), "({i}, {j}) not stored");
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    /// Stored pairs `(i, j)` with `i <= j`, row-major.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let end = self.off + self.len;
        self.range()
            .flat_map(move |i| (i..(i + self.l + 1).min(end)).map(move |j| (i, j)))
    }

    /// Zero-filled dense `len x len` matrix over the local range.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.len, self.len);
        for (i, j) in self.pairs() {
            let v = self.get(i, j);
            a[(i - self.off, j - self.off)] = v;
            a[(j - self.off, i - self.off)] = v;
        }
        a
    }

    /// Principal window `start..start + size` (global indices) as a dense matrix.
    /// The window must fit in the band (`size <= l + 1`).
    pub fn window(&self, start: usize, size: usize) -> DMatrix<f64> {
        assert!(size <= self.l + 1);
        DMatrix::from_fn(size, size, |r, c| self.get(start + r, start + c))
    }

    /// Sub-profile over `off..off + len` (global indices) with the same width.
    pub fn slice(&self, off: usize, len: usize) -> BandProfile {
        let mut out = BandProfile::zeros_local(self.n, off, len, self.l);
        let pairs: Vec<_> = out.pairs().collect();
        for (i, j) in pairs {
            out.set(i, j, self.get(i, j));
        }
        out
    }

    /// Band entries from a dense matrix whose rows/columns are the local range.
    pub fn from_dense_local(a: &DMatrix<f64>, n: usize, off: usize, l: usize) -> Self {
        let mut out = BandProfile::zeros_local(n, off, a.nrows(), l);
        let pairs: Vec<_> = out.pairs().collect();
        for (i, j) in pairs {
            out.set(i, j, a[(i - off, j - off)]);
        }
        out
    }

    /// Largest absolute entry difference over the common stored pairs.
    pub fn max_abs_diff(&self, other: &BandProfile) -> f64 {
        self.pairs()
            .filter(|&(i, j)| other.contains(i, j))
            .map(|(i, j)| (self.get(i, j) - other.get(i, j)).abs())
            .fold(0.0, f64::max)
    }

    /// CSV serialization: a `#band` line with `n` and `l`, the header `i,j,value`,
    /// then one row per stored entry with `i <= j`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("#band,n={},l={}\ni,j,value\n", self.n, self.l);
        for (i, j) in self.pairs() {
            let _ = writeln!(s, "{i},{j},{:e}", self.get(i, j));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .ok_or_else(|| DkfError::Parse("empty band file".into()))?;
        let mut n = None;
        let mut l = None;
        let mut fields = meta.split(',');
        if fields.next() != Some("#band") {
            return Err(DkfError::Parse("missing #band line".into()));
        }
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| DkfError::Parse(format!("bad field {f:?}")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| DkfError::Parse(format!("bad integer {v:?}")))?;
            match k.trim() {
                "n" => n = Some(v),
                "l" => l = Some(v),
                _ => return Err(DkfError::Parse(format!("unknown field {k:?}"))),
            }
        }
        let (n, l) = match (n, l) {
            (Some(n), Some(l)) if l < n => (n, l),
            (Some(_), Some(_)) => return Err(DkfError::Parse("band width must be below n".into())),
            _ => return Err(DkfError::Parse("missing n or l".into())),
        };
        // Guard against absurd allocations from hostile headers.
        if n.checked_mul(l + 1).is_none_or(|c| c > 1 << 26) {
            return Err(DkfError::Parse("band too large".into()));
        }
        if lines.next().map(str::trim) != Some("i,j,value") {
            return Err(DkfError::Parse("missing i,j,value header".into()));
        }
        let mut out = BandProfile::zeros(n, l);
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(DkfError::Parse(format!("line {}: expected 3 fields", ln + 3)));
            }
            let bad = |what: &str| DkfError::Parse(format!("line {}: bad {what}", ln + 3));
            let i: usize = parts[0].parse().map_err(|_| bad("row"))?;
            let j: usize = parts[1].parse().map_err(|_| bad("column"))?;
            let v: f64 = parts[2].parse().map_err(|_| bad("value"))?;
            if !out.contains(i, j) {
                return Err(DkfError::BandOverflow { i, j, l });
            }
            out.set(i, j, v);
        }
        Ok(out)
    }
}

/// Band of a symmetric matrix.
pub fn band_project(a: &DMatrix<f64>, l: usize) -> Result<BandProfile> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DkfError::Dimension("band_project needs a square matrix".into()));
    }
    if l >= n {
        return Err(DkfError::InvalidArgument(format!("band width {l} must be below n = {n}")));
    }
    if !linalg::is_symmetric(a, 1e-12) {
        return Err(DkfError::InvalidArgument("band_project needs a symmetric matrix".into()));
    }
    Ok(BandProfile::from_dense_local(a, n, 0, l))
}

fn window_inverse(s: &BandProfile, start: usize, size: usize) -> Result<DMatrix<f64>> {
    s.window(start, size)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(DkfError::SingularWindow { index: start, size })
}

/// The L-banded matrix whose inverse agrees with `s` on the band (global profile).
pub fn lband_invert(s: &BandProfile) -> Result<BandProfile> {
    lband_invert_range(s, s.offset(), s.offset() + s.len())
}

/// Entries of the L-banded inverse with both indices in `lo..hi`.
///
/// Each entry is the alternating sum over the sliding principal windows of
/// size `l + 1` and `l` that contain it, so only the band of `s` over
/// `lo - l .. hi + l` is touched.
pub fn lband_invert_range(s: &BandProfile, lo: usize, hi: usize) -> Result<BandProfile> {
    let n = s.n();
    let l = s.width();
    if l >= n {
        return Err(DkfError::InvalidArgument(format!("band width {l} must be below n = {n}")));
    }
    let mut z = BandProfile::zeros_local(n, lo, hi.saturating_sub(lo), l);
    if hi <= lo {
        return Ok(z);
    }
    let last = n - l - 1; // windows of size l+1 start in 0..=last
    let first_big = lo.saturating_sub(l);
    let last_big = (hi - 1).min(last);
    let need_lo = first_big;
    let need_hi = if l == 0 { hi } else { (last_big + l + 1).max(hi) };
    if need_lo < s.offset() || need_hi > s.offset() + s.len() {
        return Err(DkfError::MissingBand {
            index: if need_lo < s.offset() { need_lo } else { need_hi - 1 },
        });
    }
    for i in first_big..=last_big {
        let inv = window_inverse(s, i, l + 1)?;
        scatter(&mut z, &inv, i, lo, hi, 1.0);
    }
    if l > 0 {
        for i in first_big.max(1)..=last_big {
            let inv = window_inverse(s, i, l)?;
            scatter(&mut z, &inv, i, lo, hi, -1.0);
        }
    }
    Ok(z)
}

/// Rows `lo..hi` of the L-banded inverse: returns a profile over
/// `lo - l .. hi + l` in which every entry with at least one index in
/// `lo..hi` is exact. Entries with both indices outside are partial sums.
pub fn lband_invert_rows(s: &BandProfile, lo: usize, hi: usize) -> Result<BandProfile> {
    let n = s.n();
    let l = s.width();
    if l >= n {
        return Err(DkfError::InvalidArgument(format!("band width {l} must be below n = {n}")));
    }
    let out_lo = lo.saturating_sub(l);
    let out_hi = (hi + l).min(n);
    let mut z = BandProfile::zeros_local(n, out_lo, out_hi.saturating_sub(out_lo), l);
    if hi <= lo {
        return Ok(z);
    }
    let last = n - l - 1;
    let first_big = lo.saturating_sub(l);
    let last_big = (hi - 1).min(last);
    let need_hi = (last_big + l + 1).max(hi);
    if first_big < s.offset() || need_hi > s.offset() + s.len() {
        return Err(DkfError::MissingBand {
            index: if first_big < s.offset() { first_big } else { need_hi - 1 },
        });
    }
    let keep = |a: usize, b: usize| (lo..hi).contains(&a) || (lo..hi).contains(&b);
    for i in first_big..=last_big {
        let inv = window_inverse(s, i, l + 1)?;
        scatter_if(&mut z, &inv, i, 1.0, keep);
    }
    if l > 0 {
        for i in first_big.max(1)..=last_big {
            let inv = window_inverse(s, i, l)?;
            scatter_if(&mut z, &inv, i, -1.0, keep);
        }
    }
    Ok(z)
}

fn scatter_if(z: &mut BandProfile, inv: &DMatrix<f64>, start: usize, sign: f64, keep: impl Fn(usize, usize) -> bool) {
    let m = inv.nrows();
    for r in 0..m {
        for c in r..m {
            let (a, b) = (start + r, start + c);
            if keep(a, b) && z.contains(a, b) {
                z.add(a, b, sign * inv[(r, c)]);
            }
        }
    }
}

fn scatter(z: &mut BandProfile, inv: &DMatrix<f64>, start: usize, lo: usize, hi: usize, sign: f64) {
    let m = inv.nrows();
    for r in 0..m {
        let a = start + r;
        if a < lo || a >= hi {
            continue;
        }
        for c in r..m {
            let b = start + c;
            if b >= hi {
                break;
            }
            z.add(a, b, sign * inv[(r, c)]);
        }
    }
}

/// Approximate flop count of `lband_invert_range` over `count` output rows.
pub fn lband_invert_flops(count: usize, l: usize) -> u64 {
    let w = (count + l) as u64;
    let l = l as u64;
    w * ((l + 1).pow(3) + l.pow(3)) / 3 * 2
}

/// Maximum-entropy completion of the band over its local range.
///
/// Off-band entries are filled by increasing column: for `j`, with
/// `K = j - l .. j`, every `s_ij` (`i < j - l`) equals `S_{i,K} S_KK^{-1} S_{K,j}`.
/// For `l = 1` this is `s_{i,j-1} s_{j-1,j-1}^{-1} s_{j-1,j}`. Entries farther
/// than `reach` from the diagonal are left at zero.
pub fn complete(s: &BandProfile, reach: usize) -> Result<DMatrix<f64>> {
    complete_counted(s, reach).map(|(m, _)| m)
}

/// As [`complete`], also returning how many pivot windows were not positive
/// definite (solved by LU instead of Cholesky).
pub fn complete_counted(s: &BandProfile, reach: usize) -> Result<(DMatrix<f64>, usize)> {
    let m = s.len();
    let l = s.width();
    let off = s.offset();
    let mut out = s.to_dense();
    let mut violations = 0;
    if l == 0 {
        return Ok((out, 0));
    }
    for jj in (l + 1)..m {
        let k0 = jj - l;
        let ii_lo = jj.saturating_sub(reach);
        if ii_lo >= k0 {
            continue;
        }
        let skk = DMatrix::from_fn(l, l, |r, c| out[(k0 + r, k0 + c)]);
        let skj = DVector::from_fn(l, |r, _| out[(k0 + r, jj)]);
        let a = match skk.clone().cholesky() {
            Some(c) => c.solve(&skj),
            None => {
                violations += 1;
                skk.lu().solve(&skj).ok_or(DkfError::SingularPivot {
                    i: off + k0,
                    j: off + jj,
                })?
            }
        };
        for ii in ii_lo..k0 {
            let mut v = 0.0;
            for r in 0..l {
                v += out[(ii, k0 + r)] * a[r];
            }
            out[(ii, jj)] = v;
            out[(jj, ii)] = v;
        }
    }
    Ok((out, violations))
}

/// Approximate flop count of `complete` on `len` rows with the given reach.
pub fn complete_flops(len: usize, l: usize, reach: usize) -> u64 {
    let l64 = l as u64;
    let per_col = l64.pow(3) / 3 + 2 * l64 * l64;
    let fill = reach.saturating_sub(l).min(len) as u64 * 2 * l64;
    len as u64 * (per_col + fill)
}

/// The off-band entry `(i, j)` consistent with an L-banded inverse.
pub fn collapse_offband(s: &BandProfile, i: usize, j: usize) -> Result<f64> {
    let (a, b) = if i <= j { (i, j) } else { (j, i) };
    if b - a <= s.width() {
        return Err(DkfError::InvalidArgument(format!("({i}, {j}) lies inside the band")));
    }
    let r = s.range();
    if !r.contains(&a) || !r.contains(&b) {
        return Err(DkfError::InvalidArgument(format!("({i}, {j}) outside the stored range")));
    }
    let local = s.slice(a, b - a + 1);
    let full = complete(&local, usize::MAX)?;
    Ok(full[(0, b - a)])
}

/// Information-loss divergence between an exact and an approximate
/// information matrix, with its eigenvalue upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub bound: f64,
}

/// `½ ‖Z̆^{-1/2} (Z - Z̆) Z^{-1/2}‖_F²` with symmetric square roots.
pub fn kl_divergence(z_exact: &DMatrix<f64>, z_approx: &DMatrix<f64>) -> Result<Divergence> {
    if z_exact.shape() != z_approx.shape() || z_exact.nrows() != z_exact.ncols() {
        return Err(DkfError::Dimension("divergence needs equal square matrices".into()));
    }
    let ie = linalg::sym_inv_sqrt(z_exact)?;
    let ia = linalg::sym_inv_sqrt(z_approx)?;
    let diff = z_approx - z_exact;
    let m = &ie * &diff * &ia;
    let value = 0.5 * m.norm_squared();
    let inv_root_sum = |a: &DMatrix<f64>| -> f64 {
        a.clone()
            .symmetric_eigenvalues()
            .iter()
            .map(|v| v.powf(-0.5))
            .sum()
    };
    let bound = 0.5
        * inv_root_sum(z_approx).powi(2)
        * inv_root_sum(z_exact).powi(2)
        * diff.norm_squared();
    Ok(Divergence { value, bound })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(n, n);
        for i in 0..n {
            z[(i, i)] = 2.5 + 0.1 * i as f64;
            if i + 1 < n {
                z[(i, i + 1)] = -0.7 + 0.05 * i as f64;
                z[(i + 1, i)] = z[(i, i + 1)];
            }
        }
        z
    }

    #[test]
    fn identity_band_is_identity() {
        let a = DMatrix::<f64>::identity(5, 5);
        for l in 0..5 {
            let b = band_project(&a, l).unwrap();
            assert_eq!(b.to_dense(), a);
        }
        assert!(band_project(&a, 5).is_err());
    }

    #[test]
    fn full_band_is_lossless() {
        let z = tridiag(6);
        let mut s = z.clone().try_inverse().unwrap();
        linalg::symmetrize(&mut s);
        let b = band_project(&s, 5).unwrap();
        assert_eq!(b.to_dense(), s);
    }

    #[test]
    fn tridiagonal_zero_fill_round_trip() {
        let z = tridiag(6);
        assert_eq!(band_project(&z, 1).unwrap().to_dense(), z);
    }

    #[test]
    fn diagonal_inverse() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0, 5.0]));
        for l in 0..4 {
            let z = lband_invert(&band_project(&d, l).unwrap()).unwrap();
            let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.25, 0.2]));
            assert!((z.to_dense() - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn tridiagonal_recovered() {
        let z = tridiag(6);
        let s = z.clone().try_inverse().unwrap();
        let rec = lband_invert(&band_project(&s, 1).unwrap()).unwrap().to_dense();
        assert!((rec - &z).norm() / z.norm() < 1e-10);
    }

    #[test]
    fn collapse_l1_formula() {
        let z = tridiag(5);
        let s = z.try_inverse().unwrap();
        let b = band_project(&s, 1).unwrap();
        // 0-indexed (2, 4) is s_35 in 1-indexed notation.
        let v = collapse_offband(&b, 2, 4).unwrap();
        let formula = b.get(2, 3) / b.get(3, 3) * b.get(3, 4);
        assert!((v - formula).abs() < 1e-15);
        assert!((v - s[(2, 4)]).abs() < 1e-12);
    }

    #[test]
    fn diagonal_collapse_is_zero() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let full = complete(&band_project(&d, 1).unwrap(), usize::MAX).unwrap();
        assert_eq!(full, d);
    }

    #[test]
    fn local_range_matches_global() {
        let z = tridiag(12);
        let s = z.clone().try_inverse().unwrap();
        let b = band_project(&s, 2).unwrap();
        let global = lband_invert(&b).unwrap();
        let local = lband_invert_range(&b.slice(2, 9), 4, 7).unwrap();
        for (i, j) in local.pairs() {
            assert!((local.get(i, j) - global.get(i, j)).abs() < 1e-13);
        }
        assert!(lband_invert_range(&b.slice(3, 6), 4, 7).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let z = tridiag(4);
        let b = band_project(&z, 1).unwrap();
        let back = BandProfile::from_csv(&b.to_csv()).unwrap();
        assert_eq!(back, b);
        assert!(BandProfile::from_csv("#band,n=3,l=1\ni,j,value\n0,2,1.0\n").is_err());
        assert!(BandProfile::from_csv("garbage").is_err());
    }

    #[test]
    fn divergence_zero_on_equal() {
        let z = tridiag(5);
        let d = kl_divergence(&z, &z).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn row_range_matches_global() {
        let mut a = DMatrix::<f64>::from_fn(14, 14, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        for i in 0..14 {
            a[(i, i)] += 2.0;
        }
        let s = band_project(&a, 2).unwrap();
        let full = lband_invert(&s).unwrap();
        let rows = lband_invert_rows(&s, 5, 8).unwrap();
        for a in 3..10 {
            for b in a..(a + 3).min(10) {
                if (5..8).contains(&a) || (5..8).contains(&b) {
                    assert!((rows.get(a, b) - full.get(a, b)).abs() < 1e-12);
                }
            }
        }
    }
}
