//! Dense / attention / normalization ops.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use super::{Graph, Var};

fn as2(a: &ArrayD<f32>) -> ndarray::ArrayView2<'_, f32> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("2-d tensor")
}

fn as1(a: &ArrayD<f32>) -> ndarray::ArrayView1<'_, f32> {
    a.view().into_dimensionality::<ndarray::Ix1>().expect("1-d tensor")
}

impl Graph {
    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "matmul lhs not a matrix");
        assert_eq!(sb.len(), 2, "matmul rhs not a matrix");
        assert_eq!(sa[1], sb[0], "matmul inner dim {:?} x {:?}", sa, sb);
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let value = as2(&av).dot(&as2(&bv)).into_dyn();
        self.op(value, &[a, b], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let da = g2.dot(&as2(&bv).t()).into_dyn();
                let db = as2(&av).t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            })
        })
    }

    /// Add a `[m]` bias to every row of `[n, m]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        assert_eq!(sx.len(), 2, "add_bias on non-matrix");
        assert_eq!(sb, vec![sx[1]], "bias shape {:?} vs cols {}", sb, sx[1]);
        let bv = self.value_rc(bias);
        let value = {
            let x2 = self.value(x);
            let mut out = x2.clone();
            let b1 = as1(&bv);
            for mut row in out.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2d").rows_mut() {
                row += &b1;
            }
            out
        };
        self.op(value, &[x, bias], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            })
        })
    }

    /// Layer normalization over the last axis with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on 0-d");
        assert_eq!(self.shape(gamma), &[d], "gamma shape");
        assert_eq!(self.shape(beta), &[d], "beta shape");
        let xv = self.value_rc(x);
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);

        let rows: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        let x2 = xv
            .view()
            .into_shape_with_order(IxDyn(&[rows, d]))
            .expect("flatten rows");
        let g1 = as1(&gv);
        let b1 = as1(&bv);
        let mut out = Array2::<f32>::zeros((rows, d));
        let mut xhat = Array2::<f32>::zeros((rows, d));
        let mut inv_std = Array1::<f32>::zeros(rows);
        for i in 0..rows {
            let mut mean = 0.0f64;
            for j in 0..d {
                mean += x2[[i, j]] as f64;
            }
            mean /= d as f64;
            let mut var = 0.0f64;
            for j in 0..d {
                let c = x2[[i, j]] as f64 - mean;
                var += c * c;
            }
            var /= d as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[i] = istd as f32;
            for j in 0..d {
                let xh = ((x2[[i, j]] as f64 - mean) * istd) as f32;
                xhat[[i, j]] = xh;
                out[[i, j]] = xh * g1[j] + b1[j];
            }
        }
        let value = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&shape))
            .expect("unflatten");
        let shape_b = shape.clone();
        self.op(value, &[x, gamma, beta], || {
            Box::new(move |g| {
                let g2 = g
                    .view()
                    .into_shape_with_order(IxDyn(&[rows, d]))
                    .expect("flatten grad");
                let g1v = as1(&gv);
                let mut dgamma = Array1::<f32>::zeros(d);
                let mut dbeta = Array1::<f32>::zeros(d);
                let mut dx = Array2::<f32>::zeros((rows, d));
                for i in 0..rows {
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..d {
                        let go = g2[[i, j]];
                        dgamma[j] += go * xhat[[i, j]];
                        dbeta[j] += go;
                        let dxh = (go * g1v[j]) as f64;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[[i, j]] as f64;
                    }
                    let istd = inv_std[i] as f64;
                    for j in 0..d {
                        let dxh = (g2[[i, j]] * g1v[j]) as f64;
                        let v = istd
                            * (dxh - sum_dxhat / d as f64
                                - xhat[[i, j]] as f64 * sum_dxhat_xhat / d as f64);
                        dx[[i, j]] = v as f32;
                    }
                }
                let dx = dx
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&shape_b))
                    .expect("unflatten dx");
                vec![Some(dx), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
            })
        })
    }

    /// Single-head scaled dot-product attention:
    /// `softmax(q k^T * scale) v` for `q:[n,dh]`, `k,v:[m,dh]`.
    pub fn attend(&mut self, q: Var, k: Var, v: Var, scale: f32) -> Var {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        assert_eq!(sq.len(), 2);
        assert_eq!(sk, sv, "attend k/v shapes differ");
        assert_eq!(sq[1], sk[1], "attend head width mismatch");
        let qv = self.value_rc(q);
        let kv = self.value_rc(k);
        let vv = self.value_rc(v);
        let attn = softmax_rows_raw(&(as2(&qv).dot(&as2(&kv).t()) * scale));
        let value = attn.dot(&as2(&vv)).into_dyn();
        let attn = std::rc::Rc::new(attn);
        self.op(value, &[q, k, v], || {
            Box::new(move |g| {
                let g2 = as2(g);
                let dv = attn.t().dot(&g2).into_dyn();
                let dattn = g2.dot(&as2(&vv).t());
                // softmax backward per row.
                let mut dscore = Array2::<f32>::zeros(dattn.raw_dim());
                for (i, (da_row, a_row)) in dattn.rows().into_iter().zip(attn.rows()).enumerate() {
                    let dot: f64 = da_row
                        .iter()
                        .zip(a_row.iter())
                        .map(|(&da, &a)| da as f64 * a as f64)
                        .sum();
                    for (j, (&da, &a)) in da_row.iter().zip(a_row.iter()).enumerate() {
                        dscore[[i, j]] = a * (da - dot as f32);
                    }
                }
                let dq = dscore.dot(&as2(&kv)).mapv(|x| x * scale).into_dyn();
                let dk = dscore.t().dot(&as2(&qv)).mapv(|x| x * scale).into_dyn();
                vec![Some(dq), Some(dk), Some(dv)]
            })
        })
    }

    /// Weighted cross-entropy over rows of `[n, k]` logits. Loss is
    /// `sum_i w[t_i] * nll_i / sum_i w[t_i]`, the usual class-weighted mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[f32]) -> Var {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2);
        let (n, k) = (shape[0], shape[1]);
        assert_eq!(targets.len(), n, "one target per row");
        assert_eq!(class_weights.len(), k, "one weight per class");
        for &t in targets {
            assert!(t < k, "target class {t} out of {k}");
        }
        let lv = self.value_rc(logits);
        let l2 = as2(&lv);
        let mut probs = Array2::<f32>::zeros((n, k));
        let mut loss = 0.0f64;
        let mut wsum = 0.0f64;
        for i in 0..n {
            let row = l2.row(i);
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for j in 0..k {
                denom += ((row[j] - max) as f64).exp();
            }
            let log_denom = denom.ln();
            for j in 0..k {
                probs[[i, j]] = (((row[j] - max) as f64) - log_denom).exp() as f32;
            }
            let w = class_weights[targets[i]] as f64;
            let nll = -(((row[targets[i]] - max) as f64) - log_denom);
            loss += w * nll;
            wsum += w;
        }
        let wsum = wsum.max(1e-12);
        let value = ndarray::arr0((loss / wsum) as f32).into_dyn();
        let targets: Vec<usize> = targets.to_vec();
        let weights: Vec<f32> = class_weights.to_vec();
        self.op(value, &[logits], || {
            Box::new(move |g| {
                let gs = g[[]];
                let mut dl = Array2::<f32>::zeros((n, k));
                for i in 0..n {
                    let w = weights[targets[i]] / wsum as f32;
                    for j in 0..k {
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[[i, j]] = gs * w * (probs[[i, j]] - ind);
                    }
                }
                vec![Some(dl.into_dyn())]
            })
        })
    }
}

/// Numerically-stable row softmax on a plain matrix.
pub fn softmax_rows_raw(scores: &Array2<f32>) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros(scores.raw_dim());
    for (i, row) in scores.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &s in row.iter() {
            denom += ((s - max) as f64).exp();
        }
        for (j, &s) in row.iter().enumerate() {
            out[[i, j]] = (((s - max) as f64).exp() / denom) as f32;
        }
    }
    out
}
