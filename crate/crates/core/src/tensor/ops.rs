use super::{numel, Op, Tensor};
use crate::error::{contract_err, dim_err, Result};

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// For each element of `big`, the linear index of the `small` element it
/// broadcasts from (numpy-style trailing alignment).
pub(crate) fn broadcast_map(small: &[usize], big: &[usize]) -> Result<Vec<usize>> {
    if small.len() > big.len() {
        return dim_err(format!("cannot broadcast {small:?} to {big:?}"));
    }
    let offset = big.len() - small.len();
    let mut strides = vec![0usize; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        let (s, b) = (small[i], big[offset + i]);
        if s != b && s != 1 {
            return dim_err(format!("cannot broadcast {small:?} to {big:?}"));
        }
        strides[offset + i] = if s == 1 { 0 } else { acc };
        acc *= s;
    }
    let n = numel(big);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            pos -= strides[ax] * big[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone()])
    }

    fn binary(&self, other: &Tensor, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(self, other, what)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.powf(-1.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(Op::Powf(p), |x| x.powf(p))
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn square(&self) -> Tensor {
        self.powf(2.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    /// Grouped matrix product. `self` holds `groups` stacked row blocks, as
    /// does `b`; each block pair is multiplied (optionally transposed) and the
    /// results are stacked again.
    pub fn bmm(&self, b: &Tensor, groups: usize, ta: bool, tb: bool) -> Result<Tensor> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = b.dims2()?;
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return dim_err(format!("cannot split {ar} and {br} rows into {groups} groups"));
        }
        let (ra, rb) = (ar / groups, br / groups);
        let (m, ka) = if ta { (ac, ra) } else { (ra, ac) };
        let (kb, n) = if tb { (bc, rb) } else { (rb, bc) };
        if ka != kb {
            return dim_err(format!(
                "matmul inner dimensions differ: [{ar}x{ac}]{} x [{br}x{bc}]{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            ));
        }
        let mut out = vec![0.0; groups * m * n];
        let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
        let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
        for g in 0..groups {
            let a_blk = &self.data()[g * ra * ac..(g + 1) * ra * ac];
            let b_blk = &b.data()[g * rb * bc..(g + 1) * rb * bc];
            gemm(m, ka, n, a_blk, rsa, csa, b_blk, rsb, csb, &mut out[g * m * n..(g + 1) * m * n]);
        }
        Ok(Tensor::from_op(
            out,
            vec![groups * m, n],
            Op::MatMul { groups, ta, tb },
            vec![self.clone(), b.clone()],
        ))
    }

    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        self.bmm(b, 1, false, false)
    }

    /// `self · bᵀ`
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        self.bmm(b, 1, false, true)
    }

    /// `selfᵀ · b`
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        self.bmm(b, 1, true, false)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Broadcast to a larger shape.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_map(self.shape(), shape)?;
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(data, shape.to_vec(), Op::Expand, vec![self.clone()]))
    }

    /// Sum over broadcast axes down to `shape` (adjoint of `expand`).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_map(shape, self.shape())?;
        let mut data = vec![0.0; numel(shape)];
        for (v, &i) in self.data().iter().zip(&map) {
            data[i] += v;
        }
        Ok(Tensor::from_op(data, shape.to_vec(), Op::SumTo, vec![self.clone()]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], Vec::new(), Op::SumTo, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[m, n] -> [m, 1]`
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, _) = self.dims2()?;
        self.sum_to(&[m, 1])
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        let (_, n) = self.dims2()?;
        Ok(self.sum_rows()?.scale(1.0 / n as f64))
    }

    /// `[m, n] -> [1, n]`
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (_, n) = self.dims2()?;
        self.sum_to(&[1, n])
    }

    pub fn mean_cols(&self) -> Result<Tensor> {
        let (m, _) = self.dims2()?;
        Ok(self.sum_cols()?.scale(1.0 / m as f64))
    }

    pub fn add_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.expand(self.shape())?)
    }

    pub fn sub_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.sub(&other.expand(self.shape())?)
    }

    pub fn mul_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.expand(self.shape())?)
    }

    /// Stack `n` copies of a matrix vertically.
    pub fn tile_rows(&self, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if n == 0 {
            return dim_err("tile count must be positive");
        }
        let data = self.data().repeat(n);
        Ok(Tensor::from_op(data, vec![n * r, c], Op::TileRows(n), vec![self.clone()]))
    }

    /// Sum `n` vertically stacked blocks (adjoint of `tile_rows`).
    pub fn fold_rows(&self, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if n == 0 || r % n != 0 {
            return dim_err(format!("cannot fold {r} rows into {n} blocks"));
        }
        let blk = (r / n) * c;
        let mut data = vec![0.0; blk];
        for chunk in self.data().chunks(blk) {
            data.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::from_op(data, vec![r / n, c], Op::FoldRows(n), vec![self.clone()]))
    }

    /// Repeat every row `k` times consecutively.
    pub fn repeat_rows(&self, k: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if k == 0 {
            return dim_err("repeat count must be positive");
        }
        let mut data = Vec::with_capacity(r * k * c);
        for row in self.data().chunks(c) {
            for _ in 0..k {
                data.extend_from_slice(row);
            }
        }
        Ok(Tensor::from_op(data, vec![r * k, c], Op::RepeatRows(k), vec![self.clone()]))
    }

    /// Sum consecutive runs of `k` rows (adjoint of `repeat_rows`).
    pub fn segment_sum(&self, k: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if k == 0 || r % k != 0 {
            return dim_err(format!("cannot split {r} rows into segments of {k}"));
        }
        let mut data = vec![0.0; (r / k) * c];
        for (i, row) in self.data().chunks(c).enumerate() {
            let dst = &mut data[(i / k) * c..(i / k + 1) * c];
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Ok(Tensor::from_op(data, vec![r / k, c], Op::SegmentSum(k), vec![self.clone()]))
    }

    pub fn segment_mean(&self, k: usize) -> Result<Tensor> {
        Ok(self.segment_sum(k)?.scale(1.0 / k as f64))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::SoftmaxRows, vec![self.clone()]))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        let mut data = self.to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::LogSoftmaxRows, vec![self.clone()]))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return dim_err(format!("concat row counts differ: {rows} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_op(data, vec![rows, total], Op::ConcatCols(widths), parts.to_vec()))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if len == 0 || start + len > c {
            return dim_err(format!("column slice {start}..{} out of {c}", start + len));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(Tensor::from_op(data, vec![r, len], Op::SliceCols { start }, vec![self.clone()]))
    }

    /// Place the columns at `start` inside a zero matrix `total` columns wide.
    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + c > total {
            return dim_err(format!("cannot pad {c} columns at {start} into {total}"));
        }
        let mut data = vec![0.0; r * total];
        for (i, row) in self.data().chunks(c).enumerate() {
            data[i * total + start..i * total + start + c].copy_from_slice(row);
        }
        Ok(Tensor::from_op(data, vec![r, total], Op::PadCols { start }, vec![self.clone()]))
    }

    /// Row-wise layer normalization with affine parameters of shape `[n]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let mu = self.mean_rows()?;
        let centered = self.sub_bcast(&mu)?;
        let var = centered.square().mean_rows()?;
        let inv_std = var.add_scalar(eps).powf(-0.5);
        centered.mul_bcast(&inv_std)?.mul_bcast(gamma)?.add_bcast(beta)
    }

    /// `x · W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.matmul(w)?.add_bcast(b)
    }

    /// Divide each row by its Euclidean norm.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let norm = self.square().sum_rows()?.add_scalar(eps).sqrt();
        self.mul_bcast(&norm.powf(-1.0))
    }

    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        Ok(self.sub(other)?.square().mean())
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (m, c) = self.dims2()?;
        if labels.len() != m {
            return dim_err(format!("{m} logit rows but {} labels", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return contract_err(format!("label {bad} outside [0, {c})"));
        }
        let mut onehot = vec![0.0; m * c];
        for (i, &l) in labels.iter().enumerate() {
            onehot[i * c + l] = 1.0;
        }
        let onehot = Tensor::new(onehot, &[m, c])?;
        Ok(self.log_softmax_rows()?.mul(&onehot)?.sum().scale(-1.0 / m as f64))
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, c) = self.dims2()?;
        Ok(self
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let i2 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(i2.matmul(&b).unwrap().data(), b.data());
    }

    #[test]
    fn row_times_column() {
        let a = t(&[&[1.0, 2.0]]);
        let b = t(&[&[3.0], &[4.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, -2.0]]);
        let nt = a.matmul_nt(&b).unwrap();
        let explicit = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(nt.data(), explicit.data());
        let tn = a.matmul_tn(&b).unwrap();
        let explicit = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(tn.data(), explicit.data());
    }

    #[test]
    fn grouped_matmul_multiplies_blocks_independently() {
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.0], &[0.0, 2.0]]);
        let b = t(&[&[1.0, 2.0], &[3.0, 4.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let c = a.bmm(&b, 2, false, false).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let u = t(&[&[0.0, 0.0, 0.0]]).softmax_rows().unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[&[1000.0, 0.0]]).softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0).abs() <= 1e-12);
        assert!(s.data()[1].abs() <= 1e-12);
    }

    #[test]
    fn softmax_two_logits() {
        // e^1/(e^1+e^2) and e^2/(e^1+e^2)
        let s = t(&[&[1.0, 2.0]]).softmax_rows().unwrap();
        assert!((s.data()[0] - 0.26894).abs() < 1e-5);
        assert!((s.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_classes() {
        let logits = Tensor::zeros(&[4, 3]);
        for label in 0..3 {
            let ce = logits.cross_entropy(&[label; 4]).unwrap();
            assert!((ce.item() - 3f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(logits.cross_entropy(&[3; 4]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let b = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let e = b.expand(&[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let back = e.sum_to(&[3]).unwrap();
        assert_eq!(back.data(), &[2.0, 4.0, 6.0]);
        let col = Tensor::new(vec![1.0, 2.0], &[2, 1]).unwrap();
        assert_eq!(col.expand(&[2, 2]).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(col.expand(&[3, 2]).is_err());
    }

    #[test]
    fn row_block_helpers() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let tiled = a.tile_rows(2).unwrap();
        assert_eq!(tiled.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tiled.fold_rows(2).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        let rep = a.repeat_rows(2).unwrap();
        assert_eq!(rep.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(rep.segment_mean(2).unwrap().data(), a.data());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = t(&[&[1.0, 2.0, 3.0, 4.0], &[-3.0, 0.0, 5.0, 10.0]]);
        let y = x.layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 0.0).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_pad_round_trip() {
        let a = t(&[&[1.0], &[2.0]]);
        let b = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let c = Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice_cols(1, 2).unwrap().data(), b.data());
        assert_eq!(a.pad_cols(1, 3).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
