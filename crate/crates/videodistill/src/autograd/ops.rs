//! Elementwise, shape, and reduction ops.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Graph, Var};

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) {
    assert_eq!(
        g.shape(a),
        g.shape(b),
        "{what}: shape mismatch {:?} vs {:?}",
        g.shape(a),
        g.shape(b)
    );
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let value = &*self.value_rc(a) + &*self.value_rc(b);
        self.op(value, &[a, b], || {
            Box::new(move |g| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let value = &*self.value_rc(a) - &*self.value_rc(b);
        self.op(value, &[a, b], || {
            Box::new(move |g| vec![Some(g.clone()), Some(-g.clone())])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let value = &*av * &*bv;
        self.op(value, &[a, b], || {
            Box::new(move |g| vec![Some(g * &*bv), Some(g * &*av)])
        })
    }

    /// Elementwise division; the caller keeps the denominator away from 0.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "div");
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let value = &*av / &*bv;
        self.op(value, &[a, b], || {
            Box::new(move |g| {
                let da = g / &*bv;
                let db = ndarray::Zip::from(g)
                    .and(&*av)
                    .and(&*bv)
                    .map_collect(|&g, &a, &b| -g * a / (b * b));
                vec![Some(da), Some(db)]
            })
        })
    }

    /// Elementwise minimum. Ties split the gradient evenly.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "minimum");
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let value = ndarray::Zip::from(&*av).and(&*bv).map_collect(|&x, &y| x.min(y));
        self.op(value, &[a, b], || {
            Box::new(move |g| {
                let da = ndarray::Zip::from(g)
                    .and(&*av)
                    .and(&*bv)
                    .map_collect(|&g, &x, &y| if x < y { g } else if x > y { 0.0 } else { 0.5 * g });
                let db = ndarray::Zip::from(g)
                    .and(&*av)
                    .and(&*bv)
                    .map_collect(|&g, &x, &y| if y < x { g } else if y > x { 0.0 } else { 0.5 * g });
                vec![Some(da), Some(db)]
            })
        })
    }

    /// Elementwise maximum. Ties split the gradient evenly.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "maximum");
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let value = ndarray::Zip::from(&*av).and(&*bv).map_collect(|&x, &y| x.max(y));
        self.op(value, &[a, b], || {
            Box::new(move |g| {
                let da = ndarray::Zip::from(g)
                    .and(&*av)
                    .and(&*bv)
                    .map_collect(|&g, &x, &y| if x > y { g } else if x < y { 0.0 } else { 0.5 * g });
                let db = ndarray::Zip::from(g)
                    .and(&*av)
                    .and(&*bv)
                    .map_collect(|&g, &x, &y| if y > x { g } else if y < x { 0.0 } else { 0.5 * g });
                vec![Some(da), Some(db)]
            })
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.op(value, &[a], || Box::new(move |g| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.op(value, &[a], || Box::new(move |g| vec![Some(g.mapv(|x| x * c))]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let value = av.mapv(|x| x.max(0.0));
        self.op(value, &[a], || {
            Box::new(move |g| {
                let da = ndarray::Zip::from(g)
                    .and(&*av)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                vec![Some(da)]
            })
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = std::rc::Rc::new(value);
        let captured = std::rc::Rc::clone(&out);
        let requires = self.grad_enabled && self.requires_grad(a);
        // Manual node assembly so the backward can capture the output.
        if requires {
            let backward: super::BackwardFn = Box::new(move |g| {
                let da = ndarray::Zip::from(g)
                    .and(&*captured)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                vec![Some(da)]
            });
            self.push_with(out, &[a], backward)
        } else {
            self.push_value(out)
        }
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let value = av.mapv(f32::abs);
        self.op(value, &[a], || {
            Box::new(move |g| {
                let da = ndarray::Zip::from(g).and(&*av).map_collect(|&g, &x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                vec![Some(da)]
            })
        })
    }

    /// sqrt with the backward clamped near zero to avoid infinities.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::sqrt);
        let out = std::rc::Rc::new(value);
        let captured = std::rc::Rc::clone(&out);
        let requires = self.grad_enabled && self.requires_grad(a);
        if requires {
            let backward: super::BackwardFn = Box::new(move |g| {
                let da = ndarray::Zip::from(g)
                    .and(&*captured)
                    .map_collect(|&g, &y| g * 0.5 / y.max(1e-12));
                vec![Some(da)]
            });
            self.push_with(out, &[a], backward)
        } else {
            self.push_value(out)
        }
    }

    // -- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        let n_old: usize = old_shape.iter().product();
        let n_new: usize = shape.iter().product();
        assert_eq!(n_old, n_new, "reshape {:?} -> {:?}", old_shape, shape);
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        self.op(value, &[a], || {
            Box::new(move |g| {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward");
                vec![Some(back)]
            })
        })
    }

    /// Rows `r0..r1` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "slice_rows on non-matrix");
        assert!(r0 <= r1 && r1 <= shape[0]);
        let value = self
            .value(a)
            .slice_axis(Axis(0), Slice::from(r0..r1))
            .to_owned();
        self.op(value, &[a], || {
            Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&shape));
                da.slice_axis_mut(Axis(0), Slice::from(r0..r1)).assign(g);
                vec![Some(da)]
            })
        })
    }

    /// Columns `c0..c1` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "slice_cols on non-matrix");
        assert!(c0 <= c1 && c1 <= shape[1]);
        let value = self
            .value(a)
            .slice_axis(Axis(1), Slice::from(c0..c1))
            .to_owned();
        self.op(value, &[a], || {
            Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&shape));
                da.slice_axis_mut(Axis(1), Slice::from(c0..c1)).assign(g);
                vec![Some(da)]
            })
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[0]).collect();
        self.op(value, parts, || {
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &n in &sizes {
                    out.push(Some(
                        g.slice_axis(Axis(0), Slice::from(at..at + n)).to_owned(),
                    ));
                    at += n;
                }
                out
            })
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        self.op(value, parts, || {
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &n in &sizes {
                    out.push(Some(
                        g.slice_axis(Axis(1), Slice::from(at..at + n)).to_owned(),
                    ));
                    at += n;
                }
                out
            })
        })
    }

    /// Gather rows of a 2-D tensor by index (duplicates allowed); the
    /// backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "gather_rows on non-matrix");
        for &i in indices {
            assert!(i < shape[0], "gather_rows index {i} out of {}", shape[0]);
        }
        let src = self.value_rc(a);
        let mut value = ArrayD::zeros(IxDyn(&[indices.len(), shape[1]]));
        for (o, &i) in indices.iter().enumerate() {
            value
                .slice_axis_mut(Axis(0), Slice::from(o..o + 1))
                .assign(&src.slice_axis(Axis(0), Slice::from(i..i + 1)));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.op(value, &[a], || {
            Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&shape));
                for (o, &i) in idx.iter().enumerate() {
                    let mut row = da.slice_axis_mut(Axis(0), Slice::from(i..i + 1));
                    row += &g.slice_axis(Axis(0), Slice::from(o..o + 1));
                }
                vec![Some(da)]
            })
        })
    }

    /// `[c, s0, s1, ...] -> [s0*s1*..., c]`: tokens as rows, channels as
    /// columns. Inverse of [`Graph::rows_to_channels`].
    pub fn channels_to_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(shape.len() >= 2);
        let c = shape[0];
        let n: usize = shape[1..].iter().product();
        let src = self.value(a);
        // [c, n] then transpose to [n, c].
        let flat = src
            .view()
            .into_shape_with_order(IxDyn(&[c, n]))
            .expect("channels_to_rows flatten");
        let value = flat.t().as_standard_layout().into_owned().into_dyn();
        self.op(value, &[a], || {
            Box::new(move |g| {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("grad 2d");
                let back = g2
                    .t()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("channels_to_rows backward");
                vec![Some(back)]
            })
        })
    }

    /// `[n, c] -> [c, s0, s1, ...]` with `prod(s) == n`.
    pub fn rows_to_channels(&mut self, a: Var, spatial: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "rows_to_channels on non-matrix");
        let (n, c) = (shape[0], shape[1]);
        let prod: usize = spatial.iter().product();
        assert_eq!(n, prod, "rows_to_channels: {n} rows vs spatial {spatial:?}");
        let mut out_shape = vec![c];
        out_shape.extend_from_slice(spatial);
        let src = self.value(a);
        let value = src
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d")
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("rows_to_channels reshape");
        self.op(value, &[a], || {
            Box::new(move |g| {
                let flat = g
                    .view()
                    .into_shape_with_order(IxDyn(&[c, n]))
                    .expect("backward flatten");
                let back = flat.t().as_standard_layout().into_owned().into_dyn();
                vec![Some(back)]
            })
        })
    }

    // -- reductions (f64 accumulation) --------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let value = ndarray::arr0(s as f32).into_dyn();
        self.op(value, &[a], || {
            Box::new(move |g| {
                let gs = g[[]];
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
            })
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product::<usize>().max(1);
        let s: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let value = ndarray::arr0((s / n as f64) as f32).into_dyn();
        self.op(value, &[a], || {
            Box::new(move |g| {
                let gs = g[[]] / n as f32;
                vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
            })
        })
    }

    /// Row sums of a 2-D tensor: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "sum_rows on non-matrix");
        let (n, m) = (shape[0], shape[1]);
        let src = self.value(a);
        let mut out = ArrayD::zeros(IxDyn(&[n]));
        let src2 = src.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        for i in 0..n {
            let mut acc = 0.0f64;
            for j in 0..m {
                acc += src2[[i, j]] as f64;
            }
            out[[i]] = acc as f32;
        }
        self.op(out, &[a], || {
            Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[n, m]));
                for i in 0..n {
                    let gi = g[[i]];
                    for j in 0..m {
                        da[[i, j]] = gi;
                    }
                }
                vec![Some(da)]
            })
        })
    }
}

impl Graph {
    fn push_with(&mut self, value: std::rc::Rc<ArrayD<f32>>, parents: &[Var], backward: super::BackwardFn) -> Var {
        let step = super::BackwardStep {
            parents: parents.iter().map(|p| p.0).collect(),
            apply: backward,
        };
        self.push(value, true, Some(step))
    }

    fn push_value(&mut self, value: std::rc::Rc<ArrayD<f32>>) -> Var {
        self.push(value, false, None)
    }
}
