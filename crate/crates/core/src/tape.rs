//! Reverse-mode autodiff over a flat parameter vector.
//!
//! A [`Tape`] records vector-valued operations in a Wengert list. Parameters
//! enter through `param_*` nodes that read slices or rows of one flat `f64`
//! vector; [`Tape::backward`] accumulates the gradient of a scalar output
//! into a gradient vector of the same layout. The op set is exactly what the
//! reader and retriever forward passes need, nothing more.

use crate::error::{Error, Result};

pub type VarId = usize;

enum Op {
    Const,
    ParamSlice { offset: usize },
    ParamRow { offset: usize, width: usize, row: usize },
    ParamRowsMean { offset: usize, width: usize, rows: Vec<usize> },
    MatVec { w: VarId, x: VarId, rows: usize, cols: usize },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Affine { a: VarId, k: f64 },
    Tanh { a: VarId },
    Sigmoid { a: VarId },
    Ln { a: VarId },
    Dot { a: VarId, b: VarId },
    Sum { a: VarId },
    Mean { a: VarId },
    Softmax { a: VarId },
    Pick { a: VarId, index: usize },
    SumPicks { a: VarId, indices: Vec<usize> },
    StackScalars { xs: Vec<VarId> },
    L2Normalize { a: VarId },
}

pub struct Tape<'p> {
    params: &'p [f64],
    vals: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Tape {
            params,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.vals[v]
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        debug_assert_eq!(self.vals[v].len(), 1);
        self.vals[v][0]
    }

    fn push(&mut self, val: Vec<f64>, op: Op) -> VarId {
        self.vals.push(val);
        self.ops.push(op);
        self.vals.len() - 1
    }

    pub fn constant(&mut self, val: Vec<f64>) -> VarId {
        self.push(val, Op::Const)
    }

    pub fn scalar_const(&mut self, x: f64) -> VarId {
        self.constant(vec![x])
    }

    /// A contiguous parameter slice (e.g. a weight matrix, row-major).
    pub fn param_slice(&mut self, offset: usize, len: usize) -> VarId {
        let val = self.params[offset..offset + len].to_vec();
        self.push(val, Op::ParamSlice { offset })
    }

    /// Row `row` of a `? x width` parameter block starting at `offset`.
    pub fn param_row(&mut self, offset: usize, width: usize, row: usize) -> VarId {
        let start = offset + row * width;
        let val = self.params[start..start + width].to_vec();
        self.push(val, Op::ParamRow { offset, width, row })
    }

    /// Mean of several rows of a parameter block; the mean-pooling workhorse.
    pub fn param_rows_mean(&mut self, offset: usize, width: usize, rows: Vec<usize>) -> VarId {
        assert!(!rows.is_empty(), "mean over zero rows");
        let mut val = vec![0.0; width];
        for &r in &rows {
            let start = offset + r * width;
            for (v, p) in val.iter_mut().zip(&self.params[start..start + width]) {
                *v += p;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in &mut val {
            *v *= inv;
        }
        self.push(val, Op::ParamRowsMean { offset, width, rows })
    }

    /// `y = W x` with `W` row-major `rows x cols`.
    pub fn matvec(&mut self, w: VarId, x: VarId, rows: usize, cols: usize) -> VarId {
        debug_assert_eq!(self.vals[w].len(), rows * cols);
        debug_assert_eq!(self.vals[x].len(), cols);
        let mut val = vec![0.0; rows];
        for i in 0..rows {
            let mut acc = 0.0;
            let wrow = &self.vals[w][i * cols..(i + 1) * cols];
            for (wij, xj) in wrow.iter().zip(&self.vals[x]) {
                acc += wij * xj;
            }
            val[i] = acc;
        }
        self.push(val, Op::MatVec { w, x, rows, cols })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let val = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x + y)
            .collect();
        self.push(val, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let val = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x - y)
            .collect();
        self.push(val, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let val = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x * y)
            .collect();
        self.push(val, Op::Mul { a, b })
    }

    /// `k * a + b` elementwise with scalar constants.
    pub fn affine(&mut self, a: VarId, k: f64, b: f64) -> VarId {
        let val = self.vals[a].iter().map(|x| k * x + b).collect();
        self.push(val, Op::Affine { a, k })
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].iter().map(|x| x.tanh()).collect();
        self.push(val, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        self.push(val, Op::Sigmoid { a })
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].iter().map(|x| x.ln()).collect();
        self.push(val, Op::Ln { a })
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let val = self.vals[a]
            .iter()
            .zip(&self.vals[b])
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![val], Op::Dot { a, b })
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].iter().sum();
        self.push(vec![val], Op::Sum { a })
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].iter().sum::<f64>() / self.vals[a].len() as f64;
        self.push(vec![val], Op::Mean { a })
    }

    /// Numerically stable softmax.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let xs = &self.vals[a];
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let val = exps.iter().map(|e| e / z).collect();
        self.push(val, Op::Softmax { a })
    }

    pub fn pick(&mut self, a: VarId, index: usize) -> VarId {
        let val = vec![self.vals[a][index]];
        self.push(val, Op::Pick { a, index })
    }

    /// `sum_i a[indices[i]]`; duplicate indices accumulate.
    pub fn sum_picks(&mut self, a: VarId, indices: Vec<usize>) -> VarId {
        let val = indices.iter().map(|&i| self.vals[a][i]).sum();
        self.push(vec![val], Op::SumPicks { a, indices })
    }

    pub fn stack_scalars(&mut self, xs: Vec<VarId>) -> VarId {
        let val = xs.iter().map(|&x| self.vals[x][0]).collect();
        self.push(val, Op::StackScalars { xs })
    }

    pub fn l2_normalize(&mut self, a: VarId) -> VarId {
        let norm = self.vals[a].iter().map(|x| x * x).sum::<f64>().sqrt();
        let val = if norm == 0.0 {
            self.vals[a].clone()
        } else {
            self.vals[a].iter().map(|x| x / norm).collect()
        };
        self.push(val, Op::L2Normalize { a })
    }

    /// Accumulate d(out)/d(params) into `param_grad` (same layout as the
    /// parameter vector). `out` must be scalar-valued.
    pub fn backward(&self, out: VarId, param_grad: &mut [f64]) {
        assert_eq!(self.vals[out].len(), 1, "backward needs a scalar output");
        assert_eq!(param_grad.len(), self.params.len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[out] = Some(vec![1.0]);

        for id in (0..self.ops.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Const => {}
                Op::ParamSlice { offset } => {
                    for (pg, gi) in param_grad[*offset..].iter_mut().zip(&g) {
                        *pg += gi;
                    }
                }
                Op::ParamRow { offset, width, row } => {
                    let start = offset + row * width;
                    for (pg, gi) in param_grad[start..start + width].iter_mut().zip(&g) {
                        *pg += gi;
                    }
                }
                Op::ParamRowsMean { offset, width, rows } => {
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        let start = offset + r * width;
                        for (pg, gi) in param_grad[start..start + width].iter_mut().zip(&g) {
                            *pg += gi * inv;
                        }
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (w, x, rows, cols) = (*w, *x, *rows, *cols);
                    {
                        let gw = acc(&mut grads, w, rows * cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                gw[i * cols + j] += g[i] * self.vals[x][j];
                            }
                        }
                    }
                    let gx = acc(&mut grads, x, cols);
                    for i in 0..rows {
                        for (j, gxj) in gx.iter_mut().enumerate() {
                            *gxj += g[i] * self.vals[w][i * cols + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub { a, b } => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    {
                        let ga = acc(&mut grads, a, g.len());
                        for ((gai, gi), bi) in ga.iter_mut().zip(&g).zip(&self.vals[b]) {
                            *gai += gi * bi;
                        }
                    }
                    let gb = acc(&mut grads, b, g.len());
                    for ((gbi, gi), ai) in gb.iter_mut().zip(&g).zip(&self.vals[a]) {
                        *gbi += gi * ai;
                    }
                }
                Op::Affine { a, k } => {
                    add_into(acc(&mut grads, *a, g.len()), &g, *k);
                }
                Op::Tanh { a } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gai, gi), yi) in ga.iter_mut().zip(&g).zip(&self.vals[id]) {
                        *gai += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid { a } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gai, gi), yi) in ga.iter_mut().zip(&g).zip(&self.vals[id]) {
                        *gai += gi * yi * (1.0 - yi);
                    }
                }
                Op::Ln { a } => {
                    let a = *a;
                    let ga = acc(&mut grads, a, g.len());
                    for ((gai, gi), xi) in ga.iter_mut().zip(&g).zip(&self.vals[a]) {
                        *gai += gi / xi;
                    }
                }
                Op::Dot { a, b } => {
                    let (a, b) = (*a, *b);
                    let s = g[0];
                    {
                        let ga = acc(&mut grads, a, self.vals[a].len());
                        for (gai, bi) in ga.iter_mut().zip(&self.vals[b]) {
                            *gai += s * bi;
                        }
                    }
                    let gb = acc(&mut grads, b, self.vals[b].len());
                    for (gbi, ai) in gb.iter_mut().zip(&self.vals[a]) {
                        *gbi += s * ai;
                    }
                }
                Op::Sum { a } => {
                    let a = *a;
                    let len = self.vals[a].len();
                    add_into(acc(&mut grads, a, len), &vec![g[0]; len], 1.0);
                }
                Op::Mean { a } => {
                    let a = *a;
                    let len = self.vals[a].len();
                    let gi = g[0] / len as f64;
                    add_into(acc(&mut grads, a, len), &vec![gi; len], 1.0);
                }
                Op::Softmax { a } => {
                    let a = *a;
                    let y = &self.vals[id];
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let ga = acc(&mut grads, a, y.len());
                    for ((gai, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *gai += yi * (gi - gy);
                    }
                }
                Op::Pick { a, index } => {
                    let a = *a;
                    let len = self.vals[a].len();
                    acc(&mut grads, a, len)[*index] += g[0];
                }
                Op::SumPicks { a, indices } => {
                    let a = *a;
                    let len = self.vals[a].len();
                    let ga = acc(&mut grads, a, len);
                    for &i in indices {
                        ga[i] += g[0];
                    }
                }
                Op::StackScalars { xs } => {
                    for (i, &x) in xs.iter().enumerate() {
                        acc(&mut grads, x, 1)[0] += g[i];
                    }
                }
                Op::L2Normalize { a } => {
                    let a = *a;
                    let norm = self.vals[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let ga = acc(&mut grads, a, self.vals[a].len());
                    if norm == 0.0 {
                        add_into(ga, &g, 1.0);
                    } else {
                        let y = &self.vals[id];
                        let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                        for ((gai, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                            *gai += (gi - yi * gy) / norm;
                        }
                    }
                }
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: VarId, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Evaluate a scalar loss and its gradient w.r.t. `params`.
///
/// `name` identifies the loss term in the non-finite error.
pub fn gradient<F>(params: &[f64], name: &str, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape) -> VarId,
{
    let mut tape = Tape::new(params);
    let out = build(&mut tape);
    let loss = tape.scalar(out);
    if !loss.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    let mut grad = vec![0.0; params.len()];
    tape.backward(out, &mut grad);
    Ok((loss, grad))
}

/// Central finite-difference gradient probe, the independent oracle used by
/// the gradient-correctness tests.
pub fn finite_difference<F>(params: &[f64], coord: usize, eps: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    p[coord] = params[coord] + eps;
    let up = f(&p);
    p[coord] = params[coord] - eps;
    let down = f(&p);
    (up - down) / (2.0 * eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![1.0, 2.0, 3.0];
        let (loss, grad) = gradient(&params, "const", |t| t.scalar_const(5.0)).unwrap();
        assert_eq!(loss, 5.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_gradient_is_the_parameter_vector() {
        // L = ||p||^2 / 2  =>  dL/dp = p
        let params = vec![0.5, -1.5, 2.0, 0.0];
        let (loss, grad) = gradient(&params, "quad", |t| {
            let p = t.param_slice(0, 4);
            let d = t.dot(p, p);
            t.affine(d, 0.5, 0.0)
        })
        .unwrap();
        assert!((loss - 0.5 * (0.25 + 2.25 + 4.0)).abs() < 1e-12);
        for (g, p) in grad.iter().zip(&params) {
            assert!((g - p).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        // tanh/sigmoid/softmax/matvec/l2norm stack probed coordinate-wise
        let params: Vec<f64> = (0..20).map(|i| 0.1 * (i as f64) - 0.7).collect();
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let w = t.param_slice(0, 12); // 3x4
            let x = t.param_slice(12, 4);
            let b = t.param_slice(16, 3);
            let y = t.matvec(w, x, 3, 4);
            let y = t.add(y, b);
            let h = t.tanh(y);
            let hn = t.l2_normalize(h);
            let s = t.softmax(hn);
            let ls = t.ln(s);
            let p0 = t.pick(ls, 1);
            let gate_in = t.mean(hn);
            let gate = t.sigmoid(gate_in);
            let out = t.mul(p0, gate);
            t.scalar(out)
        };
        let (_, grad) = gradient(&params, "net", |t| {
            let w = t.param_slice(0, 12);
            let x = t.param_slice(12, 4);
            let b = t.param_slice(16, 3);
            let y = t.matvec(w, x, 3, 4);
            let y = t.add(y, b);
            let h = t.tanh(y);
            let hn = t.l2_normalize(h);
            let s = t.softmax(hn);
            let ls = t.ln(s);
            let p0 = t.pick(ls, 1);
            let gate_in = t.mean(hn);
            let gate = t.sigmoid(gate_in);
            t.mul(p0, gate)
        })
        .unwrap();
        for coord in 0..params.len() {
            let fd = finite_difference(&params, coord, 1e-6, f);
            assert!(
                rel_err(grad[coord], fd) < 1e-5 || (grad[coord].abs() < 1e-10 && fd.abs() < 1e-6),
                "coord {coord}: analytic {} vs fd {fd}",
                grad[coord]
            );
        }
    }

    #[test]
    fn gather_ops_match_finite_differences() {
        let params: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.2).collect();
        let build = |t: &mut Tape| {
            let m = t.param_rows_mean(0, 4, vec![0, 2, 2, 5]);
            let r = t.param_row(0, 4, 3);
            let d = t.dot(m, r);
            let sp_src = t.param_slice(0, 24);
            let sp = t.sum_picks(sp_src, vec![1, 1, 9]);
            t.add(d, sp)
        };
        let (_, grad) = gradient(&params, "gather", build).unwrap();
        for coord in 0..params.len() {
            let fd = finite_difference(&params, coord, 1e-6, |p| {
                let mut t = Tape::new(p);
                let out = build(&mut t);
                t.scalar(out)
            });
            assert!(rel_err(grad[coord], fd) < 1e-5, "coord {coord}");
        }
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let params = vec![0.0];
        let err = gradient(&params, "qa_loss", |t| {
            let p = t.param_slice(0, 1);
            t.ln(p)
        })
        .unwrap_err();
        assert!(err.to_string().contains("qa_loss"));
    }
}
