//! Symmetric eigendecomposition, truncated SVD and PCA.

use crate::error::{Error, Result};

use super::tensor::{axpy, dot, Tensor};

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Row `j` is the unit eigenvector for `values[j]`.
    pub vectors: Tensor,
}

/// Householder tridiagonalisation followed by implicit QL iteration
/// (the EISPACK tred2/tql2 pair). Only the lower triangle of `a` is read.
pub fn symmetric_eigen(a: &Tensor) -> Result<SymmetricEigen> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::Shape(format!(
            "symmetric_eigen needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    a.ensure_finite("symmetric_eigen input")?;
    let n = a.rows();
    if n == 0 {
        return Ok(SymmetricEigen {
            values: vec![],
            vectors: Tensor::zeros(&[0, 0]),
        });
    }
    // vt[c][r] holds V[r][c]; every hot loop below then walks a contiguous row.
    let mut vt: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for i in 0..n {
        for j in 0..i {
            // symmetrise from the lower triangle
            vt[j][i] = vt[i][j];
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut vt, &mut d, &mut e);
    tql2(&mut vt, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[y].total_cmp(&d[x]).then(x.cmp(&y)));
    let mut vectors = Tensor::zeros(&[n, n]);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(d[src]);
        let row = vectors.row_mut(dst);
        row.copy_from_slice(&vt[src]);
        canonical_sign(row);
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn tred2(vt: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = vt[j][n - 1];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = vt[j][i - 1];
                vt[j][i] = 0.0;
                vt[i][j] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                f = d[j];
                vt[i][j] = f;
                let row = &vt[j];
                g = e[j] + row[j] * f;
                for k in j + 1..i {
                    g += row[k] * d[k];
                    e[k] += row[k] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                let row = &mut vt[j];
                for k in j..i {
                    row[k] -= f * e[k] + g * d[k];
                }
                d[j] = row[i - 1];
                row[i] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        vt[i][n - 1] = vt[i][i];
        vt[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = vt[i + 1][k] / h;
            }
            for j in 0..=i {
                let g = dot(&vt[i + 1][..=i], &vt[j][..=i]);
                let (dk, row) = (&d[..=i], &mut vt[j][..=i]);
                axpy(-g, dk, row);
            }
        }
        for k in 0..=i {
            vt[i + 1][k] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = vt[j][n - 1];
        vt[j][n - 1] = 0.0;
    }
    vt[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn tql2(vt: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 200 {
                    return Err(Error::InvalidArgument(
                        "eigenvalue iteration failed to converge".into(),
                    ));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = vt.split_at_mut(i + 1);
                    let (vi, vi1) = (&mut lo[i], &mut hi[0]);
                    for (a, b) in vi.iter_mut().zip(vi1.iter_mut()) {
                        let h = *b;
                        *b = s * *a + c * h;
                        *a = c * *a - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Rank-truncated singular value decomposition `M ≈ U diag(S) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows x rank`. Columns are orthonormal except that a factor mapped
    /// through a null singular value is left as zeros.
    pub u: Tensor,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `cols x rank`, same convention as `u`.
    pub v: Tensor,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let (rows, cols, r) = (self.u.rows(), self.v.rows(), self.rank());
        let mut out = Tensor::zeros(&[rows, cols]);
        for i in 0..rows {
            let urow = self.u.row(i);
            let orow = out.row_mut(i);
            for j in 0..cols {
                let vrow = self.v.row(j);
                let mut acc = 0.0;
                for k in 0..r {
                    acc += urow[k] * self.s[k] * vrow[k];
                }
                orow[j] = acc;
            }
        }
        out
    }
}

fn nonzero_rows(m: &Tensor) -> Vec<Vec<(usize, f64)>> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(j, v)| (j, *v))
                .collect()
        })
        .collect()
}

/// Gram matrix `Σ_s x_s x_sᵀ` of sparse vectors living in `dim` dimensions.
fn sparse_gram(slices: &[Vec<(usize, f64)>], dim: usize) -> Tensor {
    let mut g = Tensor::zeros(&[dim, dim]);
    let data = g.data_mut();
    for s in slices {
        for &(i, a) in s {
            let row = &mut data[i * dim..(i + 1) * dim];
            for &(j, b) in s {
                row[j] += a * b;
            }
        }
    }
    g
}

/// Best rank-`rank` approximation in Frobenius norm, via the eigenproblem of
/// the smaller Gram matrix. Zero entries are skipped, so sparse count matrices
/// stored densely stay cheap.
pub fn truncated_svd(m: &Tensor, rank: usize) -> Result<Svd> {
    if m.rank() != 2 {
        return Err(Error::Shape(format!(
            "truncated_svd needs a matrix, got {:?}",
            m.shape()
        )));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    let (rows, cols) = (m.rows(), m.cols());
    if rank > rows.min(cols) {
        return Err(Error::InvalidArgument(format!(
            "rank {} exceeds min({}, {})",
            rank, rows, cols
        )));
    }
    m.ensure_finite("truncated_svd input")?;

    let row_nz = nonzero_rows(m);
    // Work on the side with the smaller dimension.
    let column_side = rows >= cols;
    let (gram, other_dim) = if column_side {
        (sparse_gram(&row_nz, cols), rows)
    } else {
        let mut col_nz: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cols];
        for (i, r) in row_nz.iter().enumerate() {
            for &(j, v) in r {
                col_nz[j].push((i, v));
            }
        }
        (sparse_gram(&col_nz, rows), cols)
    };
    let eig = symmetric_eigen(&gram)?;

    // Map each eigenvector through M (or Mᵀ); its norm is the singular value.
    let mut triples: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(rank);
    for k in 0..rank {
        let q = eig.vectors.row(k).to_vec();
        let mut image = vec![0.0; other_dim];
        if column_side {
            for (i, r) in row_nz.iter().enumerate() {
                image[i] = r.iter().map(|&(j, v)| v * q[j]).sum();
            }
        } else {
            for (i, r) in row_nz.iter().enumerate() {
                for &(j, v) in r {
                    image[j] += v * q[i];
                }
            }
        }
        let sigma = dot(&image, &image).sqrt();
        triples.push((sigma, q, image));
    }
    let sigma_max = triples.iter().map(|t| t.0).fold(0.0, f64::max);
    let floor = sigma_max * 1e-13 * (rows.max(cols) as f64);
    for t in triples.iter_mut() {
        if t.0 > floor && t.0 > 0.0 {
            let inv = 1.0 / t.0;
            t.2.iter_mut().for_each(|x| *x *= inv);
        } else {
            t.0 = 0.0;
            t.2.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    triples.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut u = Tensor::zeros(&[rows, rank]);
    let mut v = Tensor::zeros(&[cols, rank]);
    let mut s = Vec::with_capacity(rank);
    for (k, (sigma, q, image)) in triples.into_iter().enumerate() {
        s.push(sigma);
        let (uvec, vvec) = if column_side { (image, q) } else { (q, image) };
        for (i, x) in uvec.into_iter().enumerate() {
            u.set(i, k, x);
        }
        for (j, x) in vvec.into_iter().enumerate() {
            v.set(j, k, x);
        }
    }
    Ok(Svd { u, s, v })
}

/// Fitted principal-component projection.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `out_dim x d`, orthonormal rows ordered by captured variance.
    pub components: Tensor,
    /// Variance along each component, descending.
    pub variance: Vec<f64>,
}

impl Pca {
    pub fn out_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (0..self.out_dim())
            .map(|k| dot(self.components.row(k), &centered))
            .collect()
    }

    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, yk) in y.iter().enumerate() {
            axpy(*yk, self.components.row(k), &mut out);
        }
        out
    }
}

/// Centers `rows` (n x d) and projects them onto the top `out_dim` principal
/// directions. Returns the projected `n x out_dim` matrix and the basis.
pub fn pca_reduce(rows: &Tensor, out_dim: usize) -> Result<(Tensor, Pca)> {
    if rows.rank() != 2 {
        return Err(Error::Shape(format!(
            "pca_reduce needs a matrix, got {:?}",
            rows.shape()
        )));
    }
    let (n, d) = (rows.rows(), rows.cols());
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!(
            "out_dim {} must be in 1..={}",
            out_dim, d
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca_reduce needs at least 2 rows, got {}",
            n
        )));
    }
    rows.ensure_finite("pca_reduce input")?;
    let mut mean = vec![0.0; d];
    for i in 0..n {
        axpy(1.0, rows.row(i), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Tensor::zeros(&[d, d]);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (c, (x, m)) in centered.iter_mut().zip(rows.row(i).iter().zip(&mean)) {
            *c = x - m;
        }
        let data = cov.data_mut();
        for a in 0..d {
            let ca = centered[a];
            if ca != 0.0 {
                // lower triangle only
                axpy(ca, &centered[..=a], &mut data[a * d..a * d + a + 1]);
            }
        }
    }
    let scale = 1.0 / (n as f64 - 1.0);
    cov.data_mut().iter_mut().for_each(|x| *x *= scale);
    let eig = symmetric_eigen(&cov)?;

    let mut components = Tensor::zeros(&[out_dim, d]);
    for k in 0..out_dim {
        components.row_mut(k).copy_from_slice(eig.vectors.row(k));
    }
    let variance = eig.values[..out_dim].iter().map(|v| v.max(0.0)).collect();
    let pca = Pca {
        mean,
        components,
        variance,
    };
    let mut projected = Tensor::zeros(&[n, out_dim]);
    for i in 0..n {
        let p = pca.project(rows.row(i));
        projected.row_mut(i).copy_from_slice(&p);
    }
    Ok((projected, pca))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(&[rows, cols], |_| rng.normal())
    }

    fn low_rank(rows: usize, cols: usize, r: usize, seed: u64) -> Tensor {
        let a = random_matrix(rows, r, seed);
        let b = random_matrix(r, cols, seed + 1);
        a.matmul(&b).unwrap()
    }

    #[test]
    fn eigen_of_diagonal() {
        let mut a = Tensor::zeros(&[3, 3]);
        a.set(0, 0, 2.0);
        a.set(1, 1, 5.0);
        a.set(2, 2, -1.0);
        let e = symmetric_eigen(&a).unwrap();
        assert_eq!(e.values.len(), 3);
        assert!((e.values[0] - 5.0).abs() < 1e-14);
        assert!((e.values[1] - 2.0).abs() < 1e-14);
        assert!((e.values[2] + 1.0).abs() < 1e-14);
        assert!((e.vectors.get(0, 1) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let x = random_matrix(9, 9, 3);
        let a = x.matmul(&x.transpose()).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        // A = Σ λ v vᵀ
        let mut rec = Tensor::zeros(&[9, 9]);
        for k in 0..9 {
            let v = e.vectors.row(k);
            for i in 0..9 {
                for j in 0..9 {
                    let cur = rec.get(i, j);
                    rec.set(i, j, cur + e.values[k] * v[i] * v[j]);
                }
            }
        }
        assert!(rec.sub(&a).unwrap().frobenius() < 1e-10 * a.frobenius());
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn svd_identity() {
        let svd = truncated_svd(&Tensor::identity(3), 3).unwrap();
        for s in &svd.s {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_exact_low_rank_both_orientations() {
        for (rows, cols) in [(12, 7), (6, 15)] {
            let m = low_rank(rows, cols, 2, 11);
            let svd = truncated_svd(&m, 2).unwrap();
            let err = svd.reconstruct().sub(&m).unwrap().frobenius();
            assert!(err <= 1e-9, "{rows}x{cols}: {err}");
        }
    }

    #[test]
    fn svd_rank_beyond_matrix_rank_has_zero_tail() {
        let m = low_rank(10, 8, 2, 4);
        let svd = truncated_svd(&m, 5).unwrap();
        assert!(svd.s[2] < 1e-6 * svd.s[0]);
        assert!(svd.reconstruct().sub(&m).unwrap().frobenius() <= 1e-9);
    }

    #[test]
    fn svd_errors() {
        let m = random_matrix(4, 3, 1);
        assert!(truncated_svd(&m, 0).is_err());
        assert!(truncated_svd(&m, 4).is_err());
        assert!(truncated_svd(&Tensor::zeros(&[4]), 1).is_err());
    }

    #[test]
    fn svd_error_non_increasing_in_rank() {
        let m = random_matrix(14, 9, 8);
        let mut last = f64::INFINITY;
        for r in 1..=9 {
            let err = truncated_svd(&m, r)
                .unwrap()
                .reconstruct()
                .sub(&m)
                .unwrap()
                .frobenius();
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn pca_full_dim_preserves_distances() {
        let x = random_matrix(12, 5, 21);
        let (proj, pca) = pca_reduce(&x, 5).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let a: f64 = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(p, q)| (p - q).powi(2))
                    .sum();
                let b: f64 = proj
                    .row(i)
                    .iter()
                    .zip(proj.row(j))
                    .map(|(p, q)| (p - q).powi(2))
                    .sum();
                assert!((a.sqrt() - b.sqrt()).abs() < 1e-9);
            }
        }
        for w in pca.variance.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn pca_basis_is_orthonormal() {
        let x = random_matrix(30, 8, 5);
        let (_, pca) = pca_reduce(&x, 4).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let d = dot(pca.components.row(a), pca.components.row(b));
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_errors() {
        let x = random_matrix(5, 3, 2);
        assert!(pca_reduce(&x, 4).is_err());
        assert!(pca_reduce(&random_matrix(1, 3, 2), 2).is_err());
    }
}
