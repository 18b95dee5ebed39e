//! Dynamic tape: eager forward execution with recorded adjoints.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! append nodes and return [`Var`] handles; [`Graph::backward`] seeds the
//! scalar loss with 1 and replays adjoint rules in reverse topological order
//! (which is just reverse insertion order). A graph is confined to the
//! thread that builds it.

use crate::error::{Error, Result};

use super::{Elem, Tensor};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<E: Elem> {
    shape: Vec<usize>,
    value: Vec<E>,
    requires_grad: bool,
    op: Op<E>,
}

enum Op<E: Elem> {
    Leaf,
    Add(usize, usize),
    /// `[m x n] + [n]`, row-broadcast (bias add).
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        ignore: Option<i64>,
        probs: Vec<E>,
        live: usize,
    },
    EmbeddingRows {
        table: usize,
        ids: Vec<u32>,
    },
    Conv1d {
        input: usize,
        kernel: usize,
        stride: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Reshape(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Detach(usize),
}

/// Reverse-mode tape over dense tensors.
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("rank > 2 unsupported here: {shape:?}"),
    }
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<E>, requires_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; gradient is tracked iff the tensor
    /// requires it.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a tensor as a non-trainable constant.
    pub fn constant(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("node shape/value agree")
    }

    /// Gradient buffer of `v` after [`Graph::backward`]; `None` if the node
    /// does not require gradient or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- primitives -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Add(a.0, b.0)))
    }

    /// Adds a length-`n` vector to every row of an `[m x n]` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if self.shape(b) != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        let bv = &self.nodes[b.0].value;
        for i in 0..m {
            for j in 0..n {
                value[i * n + j] += bv[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::AddRow(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let value: Vec<E> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, rg, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value: Vec<E> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > E::ZERO { x } else { E::ZERO })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, rg, Op::Relu(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![E::ZERO; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let crow = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let av = &self.nodes[a.0].value;
        let mut value = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], value, rg, Op::Transpose(a.0)))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = dims2(self.shape(a));
        let av = &self.nodes[a.0].value;
        if av.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                msg: "NaN in input".into(),
            });
        }
        let mut value = vec![E::ZERO; rows * n];
        for r in 0..rows {
            let row = &av[r * n..(r + 1) * n];
            let mut mx = E::neg_infinity();
            for &x in row {
                mx = mx.max_elem(x);
            }
            let mut sum = E::ZERO;
            let out = &mut value[r * n..(r + 1) * n];
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[j] = e;
                sum += e;
            }
            for x in out.iter_mut() {
                *x = *x / sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Softmax(a.0)))
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    /// Returns scalar 0 with zero gradient when every target is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore: Option<i64>,
    ) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, classes],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            let ignored = ignore == Some(t);
            if !ignored && (t < 0 || t as usize >= classes) {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t.max(0) as usize,
                    bound: classes,
                });
            }
        }

        let av = &self.nodes[logits.0].value;
        let mut probs = vec![E::ZERO; rows * classes];
        for r in 0..rows {
            let row = &av[r * classes..(r + 1) * classes];
            let mut mx = E::neg_infinity();
            for &x in row {
                mx = mx.max_elem(x);
            }
            let mut sum = E::ZERO;
            let out = &mut probs[r * classes..(r + 1) * classes];
            for j in 0..classes {
                let e = (row[j] - mx).exp();
                out[j] = e;
                sum += e;
            }
            for x in out.iter_mut() {
                *x = *x / sum;
            }
        }

        let mut live = 0usize;
        let mut total = E::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if ignore == Some(t) {
                continue;
            }
            live += 1;
            total += -(probs[r * classes + t as usize].ln());
        }
        let loss = if live == 0 {
            E::ZERO
        } else {
            total / E::from_f64(live as f64)
        };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                probs,
                live,
            },
        ))
    }

    /// Normalizes over the last axis, then applies a per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = E::from_f64(eps);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let inv_d = E::ONE / E::from_f64(d as f64);
        let mut value = vec![E::ZERO; rows * d];
        let mut xhat = vec![E::ZERO; rows * d];
        let mut inv_std = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = E::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let istd = E::ONE / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                value[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` at `ids`; backward scatter-adds.
    pub fn embedding_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let tv = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index {
                    op: "embedding_rows",
                    index: id,
                    bound: v,
                });
            }
            value.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            rg,
            Op::EmbeddingRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// 1-d convolution without padding. `input` is `[T x C_in]`, `kernel`
    /// is `[K x C_in x C_out]`; output length is `floor((T-K)/stride) + 1`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != 2 || kshape.len() != 3 || ishape[1] != kshape[1] || stride == 0 {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: ishape,
                rhs: kshape,
            });
        }
        let (t, c_in) = (ishape[0], ishape[1]);
        let (k, c_out) = (kshape[0], kshape[2]);
        if t < k {
            return Err(Error::Contract {
                op: "conv1d",
                msg: format!("input length {t} shorter than kernel {k}; need at least {k} frames"),
            });
        }
        let t_out = (t - k) / stride + 1;
        let iv = &self.nodes[input.0].value;
        let kv = &self.nodes[kernel.0].value;
        let mut value = vec![E::ZERO; t_out * c_out];
        for to in 0..t_out {
            let out_row = &mut value[to * c_out..(to + 1) * c_out];
            for kk in 0..k {
                let in_row = &iv[(to * stride + kk) * c_in..(to * stride + kk + 1) * c_in];
                for (c, &a) in in_row.iter().enumerate() {
                    let krow = &kv[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                    for o in 0..c_out {
                        out_row[o] += a * krow[o];
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![t_out, c_out],
            value,
            rg,
            Op::Conv1d {
                input: input.0,
                kernel: kernel.0,
                stride,
            },
        ))
    }

    /// Concatenates 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract {
                op: "concat",
                msg: "need at least one part and axis in {0,1}".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![],
            });
        }
        let fixed = first[1 - axis];
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1 - axis] != fixed {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let shape = if axis == 0 {
            vec![total, fixed]
        } else {
            vec![fixed, total]
        };
        let mut value = vec![E::ZERO; total * fixed];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                value[off..off + pv.len()].copy_from_slice(pv);
                off += pv.len();
            }
        } else {
            let rows = fixed;
            let mut col_off = 0;
            for &p in parts {
                let cols = self.shape(p)[1];
                let pv = &self.nodes[p.0].value;
                for r in 0..rows {
                    value[r * total + col_off..r * total + col_off + cols]
                        .copy_from_slice(&pv[r * cols..(r + 1) * cols]);
                }
                col_off += cols;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// Mean over one axis of a 2-d tensor (or over all of a 1-d tensor).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (m, n) = dims2(&shape);
        if axis > 1 || (shape.len() == 1 && axis != 0) {
            return Err(Error::Contract {
                op: "mean_axis",
                msg: format!("axis {axis} invalid for shape {shape:?}"),
            });
        }
        let xv = &self.nodes[x.0].value;
        // Rank-1 input: mean over the single axis yields a scalar.
        let (out_shape, value) = if shape.len() == 1 {
            let mut s = E::ZERO;
            for &v in xv {
                s += v;
            }
            (vec![1], vec![s / E::from_f64(n as f64)])
        } else if axis == 0 {
            let mut out = vec![E::ZERO; n];
            for r in 0..m {
                for j in 0..n {
                    out[j] += xv[r * n + j];
                }
            }
            let inv = E::ONE / E::from_f64(m as f64);
            for v in out.iter_mut() {
                *v = *v * inv;
            }
            (vec![n], out)
        } else {
            let mut out = vec![E::ZERO; m];
            for r in 0..m {
                let mut s = E::ZERO;
                for j in 0..n {
                    s += xv[r * n + j];
                }
                out[r] = s / E::from_f64(n as f64);
            }
            (vec![m], out)
        };
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, rg, Op::MeanAxis { x: x.0, axis }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape,
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(x);
        Ok(self.push(new_shape, value, rg, Op::Reshape(x.0)))
    }

    /// Half-open slice `[start, end)` along `axis` of a 2-d tensor
    /// (axis 0 for rank-1).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank1 = shape.len() == 1;
        let (m, n) = dims2(&shape);
        let extent = if axis == 0 && !rank1 { m } else { n };
        if axis > 1 || (rank1 && axis != 0) || start >= end || end > extent {
            return Err(Error::Contract {
                op: "slice",
                msg: format!("range {start}..{end} invalid for shape {shape:?} axis {axis}"),
            });
        }
        let xv = &self.nodes[x.0].value;
        let (out_shape, value) = if rank1 {
            (vec![end - start], xv[start..end].to_vec())
        } else if axis == 0 {
            (vec![end - start, n], xv[start * n..end * n].to_vec())
        } else {
            let mut out = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                out.extend_from_slice(&xv[r * n + start..r * n + end]);
            }
            (vec![m, end - start], out)
        };
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            value,
            rg,
            Op::Slice {
                x: x.0,
                axis: if rank1 { 1 } else { axis },
                start,
                end,
            },
        ))
    }

    /// Replaces elements where `mask` is true with `fill`; gradient flows
    /// only through unmasked positions.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.nodes[x.0].value.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = E::from_f64(fill);
        let value: Vec<E> = self.nodes[x.0]
            .value
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            rg,
            Op::MaskedFill {
                x: x.0,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Identity forward; blocks gradient entirely.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(self.shape(x).to_vec(), value, false, Op::Detach(x.0))
    }

    // ---- composites ------------------------------------------------------

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let numel = self.nodes[x.0].value.len();
        let flat = self.reshape(x, vec![numel])?;
        let mean = self.mean_axis(flat, 0)?;
        Ok(self.scale(mean, numel as f64))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let numel = self.nodes[x.0].value.len();
        let flat = self.reshape(x, vec![numel])?;
        self.mean_axis(flat, 0)
    }

    /// Folds `add` over a non-empty list.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let mut acc = *vars.first().ok_or(Error::Contract {
            op: "add_n",
            msg: "empty list".into(),
        })?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradient buffers for every `requires_grad` ancestor of the
    /// scalar `loss`. Accumulation across fan-out is additive.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![E::ONE]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &dy);
            self.grads[id] = Some(dy);
        }
        Ok(())
    }

    fn accum(&mut self, target: usize, contribution: &[E]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut self.grads[target] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contribution) {
                    *gi += c;
                }
            }
            None => self.grads[target] = Some(contribution.to_vec()),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&mut self, id: usize, dy: &[E]) {
        // Adjoint buffers are built locally, then accumulated, to keep the
        // borrow on `self.nodes` read-only while reading input values.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, dy);
                self.accum(b, dy);
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                let (m, n) = dims2(&self.nodes[a].shape);
                self.accum(a, dy);
                let mut db = vec![E::ZERO; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += dy[i * n + j];
                    }
                }
                self.accum(b, &db);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, dy);
                let db: Vec<E> = dy.iter().map(|&g| -g).collect();
                self.accum(b, &db);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<E> = dy
                    .iter()
                    .zip(&self.nodes[b].value)
                    .map(|(&g, &v)| g * v)
                    .collect();
                let db: Vec<E> = dy
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&g, &v)| g * v)
                    .collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<E> = dy.iter().map(|&g| g * c).collect();
                self.accum(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<E> = dy
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&g, &v)| if v > E::ZERO { g } else { E::ZERO })
                    .collect();
                self.accum(a, &da);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = dims2(&self.nodes[a].shape);
                let n = self.nodes[b].shape[1];
                // dA = dY . B^T
                let bv = &self.nodes[b].value;
                let mut da = vec![E::ZERO; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = dy[i * n + j];
                        let brow = &bv[..];
                        for p in 0..k {
                            da[i * k + p] += g * brow[p * n + j];
                        }
                    }
                }
                // dB = A^T . dY
                let av = &self.nodes[a].value;
                let mut db = vec![E::ZERO; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        let dyrow = &dy[i * n..(i + 1) * n];
                        for j in 0..n {
                            dbrow[j] += aip * dyrow[j];
                        }
                    }
                }
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Transpose(a) => {
                let a = *a;
                let (m, n) = dims2(&self.nodes[a].shape);
                let mut da = vec![E::ZERO; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = dy[j * m + i];
                    }
                }
                self.accum(a, &da);
            }
            Op::Softmax(a) => {
                let a = *a;
                let (rows, n) = dims2(&self.nodes[id].shape);
                let y = &self.nodes[id].value;
                let mut da = vec![E::ZERO; rows * n];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let dyr = &dy[r * n..(r + 1) * n];
                    let mut dot = E::ZERO;
                    for j in 0..n {
                        dot += yr[j] * dyr[j];
                    }
                    let dar = &mut da[r * n..(r + 1) * n];
                    for j in 0..n {
                        dar[j] = yr[j] * (dyr[j] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (rows, d) = dims2(&self.nodes[x].shape);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = self.nodes[gain].value.clone();
                let inv_d = E::ONE / E::from_f64(d as f64);
                let mut dgain = vec![E::ZERO; d];
                let mut dbias = vec![E::ZERO; d];
                let mut dx = vec![E::ZERO; rows * d];
                for r in 0..rows {
                    let h = &xhat[r * d..(r + 1) * d];
                    let g = &dy[r * d..(r + 1) * d];
                    let mut mean_dh = E::ZERO;
                    let mut mean_dh_h = E::ZERO;
                    for j in 0..d {
                        dgain[j] += g[j] * h[j];
                        dbias[j] += g[j];
                        let dh = g[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    let istd = inv_std[r];
                    for j in 0..d {
                        let dh = g[j] * gv[j];
                        dx[r * d + j] = istd * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                live,
            } => {
                let logits = *logits;
                let live = *live;
                if live == 0 {
                    return;
                }
                let (rows, classes) = dims2(&self.nodes[logits].shape);
                let scale = dy[0] / E::from_f64(live as f64);
                let targets = targets.clone();
                let ignore = *ignore;
                let probs = probs.clone();
                let mut da = vec![E::ZERO; rows * classes];
                for (r, &t) in targets.iter().enumerate() {
                    if ignore == Some(t) {
                        continue;
                    }
                    for j in 0..classes {
                        let indicator = if j as i64 == t { E::ONE } else { E::ZERO };
                        da[r * classes + j] = (probs[r * classes + j] - indicator) * scale;
                    }
                }
                self.accum(logits, &da);
            }
            Op::EmbeddingRows { table, ids } => {
                let table = *table;
                let d = self.nodes[table].shape[1];
                let v = self.nodes[table].shape[0];
                let ids = ids.clone();
                let mut dt = vec![E::ZERO; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..d {
                        dt[id * d + j] += dy[i * d + j];
                    }
                }
                self.accum(table, &dt);
            }
            Op::Conv1d {
                input,
                kernel,
                stride,
            } => {
                let (input, kernel, stride) = (*input, *kernel, *stride);
                let (t, c_in) = dims2(&self.nodes[input].shape);
                let kshape = &self.nodes[kernel].shape;
                let (k, c_out) = (kshape[0], kshape[2]);
                let t_out = (t - k) / stride + 1;
                let iv = self.nodes[input].value.clone();
                let kv = self.nodes[kernel].value.clone();
                let mut di = vec![E::ZERO; t * c_in];
                let mut dk = vec![E::ZERO; k * c_in * c_out];
                for to in 0..t_out {
                    let dyr = &dy[to * c_out..(to + 1) * c_out];
                    for kk in 0..k {
                        let base = (to * stride + kk) * c_in;
                        for c in 0..c_in {
                            let krow = &kv[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                            let dkrow =
                                &mut dk[(kk * c_in + c) * c_out..(kk * c_in + c + 1) * c_out];
                            let a = iv[base + c];
                            let mut acc = E::ZERO;
                            for o in 0..c_out {
                                acc += dyr[o] * krow[o];
                                dkrow[o] += a * dyr[o];
                            }
                            di[base + c] += acc;
                        }
                    }
                }
                self.accum(input, &di);
                self.accum(kernel, &dk);
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                if axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p].value.len();
                        let dp = dy[off..off + len].to_vec();
                        self.accum(p, &dp);
                        off += len;
                    }
                } else {
                    let total = self.nodes[id].shape[1];
                    let rows = self.nodes[id].shape[0];
                    let mut col_off = 0;
                    for p in parts {
                        let cols = self.nodes[p].shape[1];
                        let mut dp = vec![E::ZERO; rows * cols];
                        for r in 0..rows {
                            dp[r * cols..(r + 1) * cols].copy_from_slice(
                                &dy[r * total + col_off..r * total + col_off + cols],
                            );
                        }
                        self.accum(p, &dp);
                        col_off += cols;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[x].shape.clone();
                let (m, n) = dims2(&shape);
                let mut da = vec![E::ZERO; m * n];
                if shape.len() == 1 {
                    let inv = E::ONE / E::from_f64(n as f64);
                    for j in 0..n {
                        da[j] = dy[0] * inv;
                    }
                } else if axis == 0 {
                    let inv = E::ONE / E::from_f64(m as f64);
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] = dy[j] * inv;
                        }
                    }
                } else {
                    let inv = E::ONE / E::from_f64(n as f64);
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] = dy[r] * inv;
                        }
                    }
                }
                self.accum(x, &da);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accum(x, dy);
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let (x, axis, start, end) = (*x, *axis, *start, *end);
                let shape = self.nodes[x].shape.clone();
                let (m, n) = dims2(&shape);
                let mut da = vec![E::ZERO; m * n];
                if shape.len() == 1 {
                    da[start..end].copy_from_slice(dy);
                } else if axis == 0 {
                    da[start * n..end * n].copy_from_slice(dy);
                } else {
                    let w = end - start;
                    for r in 0..m {
                        da[r * n + start..r * n + end].copy_from_slice(&dy[r * w..(r + 1) * w]);
                    }
                }
                self.accum(x, &da);
            }
            Op::MaskedFill { x, mask } => {
                let x = *x;
                let da: Vec<E> = dy
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { E::ZERO } else { g })
                    .collect();
                self.accum(x, &da);
            }
            Op::Detach(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(&t2(2, 1, &[5.0, 6.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t2(2, 3, &[0.0; 6]));
        let b = g.constant(&t2(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(&Tensor::from_vec(vec![0.0, (2.0f64).ln()]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.0]));
        let shifted = g.constant(&Tensor::from_vec(vec![5.3, 3.8, 7.0, 5.0]));
        let a = g.softmax(x).unwrap();
        let b = g.softmax(shifted).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_vec(vec![0.0, f64::NAN]));
        assert!(matches!(
            g.softmax(x),
            Err(crate::error::Error::Numeric { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(&t2(1, 4, &[0.0; 4]));
        let y = g.cross_entropy(logits, &[2], None).unwrap();
        assert!((g.value(y)[0] - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_goes_to_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(&t2(1, 3, &[0.0, 100.0, 0.0]));
        let y = g.cross_entropy(logits, &[1], None).unwrap();
        assert!(g.value(y)[0] < 1e-10);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let t = t2(2, 3, &[0.5, -0.2, 0.1, 0.0, 0.3, 0.9]).with_requires_grad();
        let logits = g.leaf(&t);
        let y = g.cross_entropy(logits, &[0, 0], Some(0)).unwrap();
        assert_eq!(g.value(y)[0], 0.0);
        g.backward(y).unwrap();
        // "Zero gradient" here means no contribution at all: either no
        // buffer was allocated or every entry is zero.
        assert!(g
            .grad(logits)
            .map_or(true, |grad| grad.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(&t2(1, 3, &[0.0; 3]));
        assert!(matches!(
            g.cross_entropy(logits, &[3], None),
            Err(crate::error::Error::Index { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t2(1, 4, &[3.0; 4]));
        let gain = g.constant(&Tensor::from_vec(vec![1.0; 4]));
        let bias = g.constant(&Tensor::from_vec(vec![0.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in g.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t2(1, 2, &[1.0, 3.0]));
        let gain = g.constant(&Tensor::from_vec(vec![1.0; 2]));
        let bias = g.constant(&Tensor::from_vec(vec![0.0; 2]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-5);
        assert!((g.value(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn embedding_identity_table() {
        let mut g = Graph::<f64>::new();
        let table = g.constant(&t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.embedding_rows(table, &[2]).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 1.0]);
        assert!(g.embedding_rows(table, &[3]).is_err());
    }

    #[test]
    fn embedding_repeated_id_accumulates() {
        let mut g = Graph::<f64>::new();
        let t = t2(3, 2, &[0.0; 6]).with_requires_grad();
        let table = g.leaf(&t);
        let y = g.embedding_rows(table, &[1, 1]).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(table).unwrap();
        assert_eq!(grad, &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_and_conv_length() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);

        // T=10, K=4, s=2 -> output length 4
        let input = g.constant(&t2(10, 1, &[1.0; 10]));
        let kernel = g.constant(&Tensor::new(vec![4, 1, 1], vec![1.0; 4]).unwrap());
        let out = g.conv1d(input, kernel, 2).unwrap();
        assert_eq!(g.shape(out), &[4, 1]);
    }

    #[test]
    fn mean_axis_last() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t2(1, 2, &[2.0, 4.0]));
        let y = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(y), &[3.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad();
        let x = g.leaf(&t);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad();
        let x = g.leaf(&t);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad();
        let x = g.leaf(&t);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fanout_accumulates() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad();
        let x = g.leaf(&t);
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad();
        let x = g.leaf(&t);
        let d = g.detach(x);
        let y = g.mul(d, d).unwrap();
        let through = g.add(x, y).unwrap();
        let loss = g.sum_all(through).unwrap();
        g.backward(loss).unwrap();
        // Only the direct x path contributes.
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn masked_fill_blocks_gradient_at_masked() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad();
        let x = g.leaf(&t);
        let y = g.masked_fill(x, &[false, true, false], -5.0).unwrap();
        assert_eq!(g.value(y), &[1.0, -5.0, 3.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn requires_grad_false_never_accumulates() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let x = g.leaf(&t);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }
}
