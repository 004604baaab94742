//! Define-by-run reverse-mode automatic differentiation.
//!
//! A `Tape` is rebuilt for every forward pass: each operation appends a node
//! holding the output value and a backward rule. `backward` replays the nodes
//! in reverse, accumulating gradients into per-node buffers. Operation inputs
//! always have smaller node indices than outputs, so a single reverse sweep
//! visits every node exactly once.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule: (output grad, all nodes, grads of nodes with index < self).
type BackFn<F> = Box<dyn Fn(&[F], &[Node<F>], &mut [Vec<F>])>;

pub(crate) struct Node<F: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<F>,
    requires_grad: bool,
    backward: Option<BackFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-12;

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, backward: Option<BackFn<F>>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        Ok(self.push(shape, data, requires_grad, None))
    }

    pub fn from_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected 2-d tensor, got shape {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── binary ops ───────────────────────────────────────────────────

    /// C[m,n] = A[m,k] · B[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {}x{} vs {}x{}", m, k, k2, n),
            });
        }
        let out = mm(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let (ai, bi) = (a.0, b.0);
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let rule: Option<BackFn<F>> = if rga || rgb {
            Some(Box::new(move |g, nodes, grads| {
                if rga {
                    // dA += dC · B^T
                    let bdat = &nodes[bi].data;
                    let da = &mut grads[ai];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                da[i * k + l] = da[i * k + l] + gij * bdat[l * n + j];
                            }
                        }
                    }
                }
                if rgb {
                    // dB += A^T · dC
                    let adat = &nodes[ai].data;
                    let db = &mut grads[bi];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = adat[i * k + l];
                            for j in 0..n {
                                db[l * n + j] = db[l * n + j] + ail * g[i * n + j];
                            }
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rga || rgb, rule))
    }

    /// C[m,n] = A[m,k] · B[n,k]^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dims {}x{} vs {}x{} (transposed)", m, k, n, k2),
            });
        }
        let adat = &self.nodes[a.0].data;
        let bdat = &self.nodes[b.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for l in 0..k {
                    acc = acc + adat[i * k + l] * bdat[j * k + l];
                }
                out[i * n + j] = acc;
            }
        }
        let (ai, bi) = (a.0, b.0);
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let rule: Option<BackFn<F>> = if rga || rgb {
            Some(Box::new(move |g, nodes, grads| {
                if rga {
                    // dA += dC · B
                    let bdat = &nodes[bi].data;
                    let da = &mut grads[ai];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                da[i * k + l] = da[i * k + l] + gij * bdat[j * k + l];
                            }
                        }
                    }
                }
                if rgb {
                    // dB += dC^T · A
                    let adat = &nodes[ai].data;
                    let db = &mut grads[bi];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                db[j * k + l] = db[j * k + l] + gij * adat[i * k + l];
                            }
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rga || rgb, rule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let (ai, bi) = (a.0, b.0);
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let rule: Option<BackFn<F>> = if rga || rgb {
            Some(Box::new(move |g, _nodes, grads| {
                if rga {
                    axpy(&mut grads[ai], g);
                }
                if rgb {
                    axpy(&mut grads[bi], g);
                }
            }))
        } else {
            None
        };
        Ok(self.push(shape, out, rga || rgb, rule))
    }

    /// Broadcast-add a row vector b[n] to every row of a[m,n].
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        let bs = &self.nodes[b.0].shape;
        if bs.iter().product::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("row {:?} vs matrix cols {}", bs, n),
            });
        }
        let bdat = &self.nodes[b.0].data;
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdat[i % n])
            .collect();
        let (ai, bi) = (a.0, b.0);
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let rule: Option<BackFn<F>> = if rga || rgb {
            Some(Box::new(move |g, _nodes, grads| {
                if rga {
                    axpy(&mut grads[ai], g);
                }
                if rgb {
                    let db = &mut grads[bi];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rga || rgb, rule))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let (ai, bi) = (a.0, b.0);
        let (rga, rgb) = (self.rg(a), self.rg(b));
        let rule: Option<BackFn<F>> = if rga || rgb {
            Some(Box::new(move |g, nodes, grads| {
                if rga {
                    let bdat = &nodes[bi].data;
                    let da = &mut grads[ai];
                    for (i, &gi) in g.iter().enumerate() {
                        da[i] = da[i] + gi * bdat[i];
                    }
                }
                if rgb {
                    let adat = &nodes[ai].data;
                    let db = &mut grads[bi];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i] = db[i] + gi * adat[i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(shape, out, rga || rgb, rule))
    }

    // ── unary ops ────────────────────────────────────────────────────

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let rga = self.rg(a);
        let rule: Option<BackFn<F>> = if rga {
            Some(Box::new(move |g, _nodes, grads| {
                let da = &mut grads[ai];
                for (i, &gi) in g.iter().enumerate() {
                    da[i] = da[i] + gi * c;
                }
            }))
        } else {
            None
        };
        self.push(shape, out, rga, rule)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let rga = self.rg(a);
        let rule: Option<BackFn<F>> = if rga {
            Some(Box::new(move |g, _nodes, grads| axpy(&mut grads[ai], g)))
        } else {
            None
        };
        self.push(shape, out, rga, rule)
    }

    /// Row lookup: out[i] = table[ids[i]]. The embedding primitive; backward
    /// scatter-adds into the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row index {} out of range for {} rows", bad, r),
            });
        }
        let tdat = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tdat[i * c..(i + 1) * c]);
        }
        let ti = table.0;
        let rgt = self.rg(table);
        let ids_cap: Vec<usize> = ids.to_vec();
        let rule: Option<BackFn<F>> = if rgt {
            Some(Box::new(move |g, _nodes, grads| {
                let dt = &mut grads[ti];
                for (k, &i) in ids_cap.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] = dt[i * c + j] + g[k * c + j];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![ids.len(), c], out, rgt, rule))
    }

    /// Per-row layer normalization with affine gain/bias. Rows whose variance
    /// falls below 1e-12 normalize to zero (the constant-row convention).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.nodes[gain.0].data.len() != n || self.nodes[bias.0].data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gain/bias must have {} elements", n),
            });
        }
        let var_floor = F::of(LN_EPS);
        let nf = F::of(n as f64);
        let xdat = &self.nodes[x.0].data;
        let gdat = &self.nodes[gain.0].data;
        let bdat = &self.nodes[bias.0].data;
        let mut xhat = vec![F::zero(); m * n];
        let mut inv_std = vec![F::zero(); m]; // zero marks a degenerate row
        for i in 0..m {
            let row = &xdat[i * n..(i + 1) * n];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            if var >= var_floor {
                let is = var.sqrt().recip();
                inv_std[i] = is;
                for j in 0..n {
                    xhat[i * n + j] = (row[j] - mean) * is;
                }
            }
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xhat[i * n + j] * gdat[j] + bdat[j];
            }
        }
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        let (rgx, rgg, rgb) = (self.rg(x), self.rg(gain), self.rg(bias));
        let rule: Option<BackFn<F>> = if rgx || rgg || rgb {
            Some(Box::new(move |g, nodes, grads| {
                let gdat = &nodes[gi].data;
                if rgg {
                    let dg = &mut grads[gi];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if rgb {
                    let db = &mut grads[bi];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                }
                if rgx {
                    let dx = &mut grads[xi];
                    for i in 0..m {
                        let is = inv_std[i];
                        if is == F::zero() {
                            continue; // degenerate row: output constant in x
                        }
                        // dxhat = dy * gain; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..n {
                            let dxh = g[i * n + j] * gdat[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[i * n + j];
                        }
                        s1 = s1 / nf;
                        s2 = s2 / nf;
                        for j in 0..n {
                            let dxh = g[i * n + j] * gdat[j];
                            dx[i * n + j] =
                                dx[i * n + j] + is * (dxh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rgx || rgg || rgb, rule))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c0 = F::of(0.7978845608028654); // sqrt(2/pi)
        let c1 = F::of(0.044715);
        let half = F::of(0.5);
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let inner = c0 * (x + c1 * x * x * x);
                half * x * (F::one() + inner.tanh())
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let rga = self.rg(a);
        let rule: Option<BackFn<F>> = if rga {
            Some(Box::new(move |g, nodes, grads| {
                let xdat = &nodes[ai].data;
                let da = &mut grads[ai];
                for (i, &gi) in g.iter().enumerate() {
                    let x = xdat[i];
                    let inner = c0 * (x + c1 * x * x * x);
                    let t = inner.tanh();
                    let sech2 = F::one() - t * t;
                    let dinner = c0 * (F::one() + F::of(3.0) * c1 * x * x);
                    let d = half * (F::one() + t) + half * x * sech2 * dinner;
                    da[i] = da[i] + gi * d;
                }
            }))
        } else {
            None
        };
        self.push(shape, out, rga, rule)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let xdat = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            softmax_row(&xdat[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let xi = x.0;
        let rgx = self.rg(x);
        let out_cap = out.clone();
        let rule: Option<BackFn<F>> = if rgx {
            Some(Box::new(move |g, _nodes, grads| {
                let dx = &mut grads[xi];
                for i in 0..m {
                    let y = &out_cap[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot = y
                        .iter()
                        .zip(gr)
                        .fold(F::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..n {
                        dx[i * n + j] = dx[i * n + j] + y[j] * (gr[j] - dot);
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rgx, rule))
    }

    /// Row-wise log-softmax (natural log).
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "log_softmax_rows")?;
        let xdat = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xdat[i * n..(i + 1) * n];
            let mx = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let lse = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mx).exp())
                .ln()
                + mx;
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let xi = x.0;
        let rgx = self.rg(x);
        let probs: Vec<F> = out.iter().map(|&v| v.exp()).collect();
        let rule: Option<BackFn<F>> = if rgx {
            Some(Box::new(move |g, _nodes, grads| {
                let dx = &mut grads[xi];
                for i in 0..m {
                    let gsum = g[i * n..(i + 1) * n]
                        .iter()
                        .fold(F::zero(), |a, &v| a + v);
                    for j in 0..n {
                        dx[i * n + j] =
                            dx[i * n + j] + g[i * n + j] - probs[i * n + j] * gsum;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], out, rgx, rule))
    }

    /// Element pick: out[k] = x[rows[k], cols[k]].
    pub fn pick(&mut self, x: Var, index: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims2(x, "pick")?;
        if let Some(&(r, c)) = index.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::ShapeMismatch {
                op: "pick",
                detail: format!("index ({r},{c}) out of range for {m}x{n}"),
            });
        }
        let xdat = &self.nodes[x.0].data;
        let out: Vec<F> = index.iter().map(|&(r, c)| xdat[r * n + c]).collect();
        let xi = x.0;
        let rgx = self.rg(x);
        let idx: Vec<(usize, usize)> = index.to_vec();
        let rule: Option<BackFn<F>> = if rgx {
            Some(Box::new(move |g, _nodes, grads| {
                let dx = &mut grads[xi];
                for (k, &(r, c)) in idx.iter().enumerate() {
                    dx[r * n + c] = dx[r * n + c] + g[k];
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![index.len()], out, rgx, rule))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].data.iter().fold(F::zero(), |x, &v| x + v);
        let ai = a.0;
        let rga = self.rg(a);
        let rule: Option<BackFn<F>> = if rga {
            Some(Box::new(move |g, _nodes, grads| {
                let da = &mut grads[ai];
                for v in da.iter_mut() {
                    *v = *v + g[0];
                }
            }))
        } else {
            None
        };
        self.push(vec![1], vec![total], rga, rule)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let rga = self.rg(a);
        let out_cap = out.clone();
        let rule: Option<BackFn<F>> = if rga {
            Some(Box::new(move |g, _nodes, grads| {
                let da = &mut grads[ai];
                for (i, &gi) in g.iter().enumerate() {
                    da[i] = da[i] + gi * out_cap[i];
                }
            }))
        } else {
            None
        };
        self.push(shape, out, rga, rule)
    }

    /// ln(1 - x), with 1 - x clamped below at 1e-12. Gradient is zero in the
    /// clamped regime.
    pub fn ln_one_minus(&mut self, a: Var) -> Var {
        let floor = F::of(LN_EPS);
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| (F::one() - x).max(floor).ln())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ai = a.0;
        let rga = self.rg(a);
        let rule: Option<BackFn<F>> = if rga {
            Some(Box::new(move |g, nodes, grads| {
                let xdat = &nodes[ai].data;
                let da = &mut grads[ai];
                for (i, &gi) in g.iter().enumerate() {
                    let om = F::one() - xdat[i];
                    if om > floor {
                        da[i] = da[i] - gi / om;
                    }
                }
            }))
        } else {
            None
        };
        self.push(shape, out, rga, rule)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns {}..{} out of range for width {}", start, start + len, n),
            });
        }
        let xdat = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xdat[i * n + start..i * n + start + len]);
        }
        let xi = x.0;
        let rgx = self.rg(x);
        let rule: Option<BackFn<F>> = if rgx {
            Some(Box::new(move |g, _nodes, grads| {
                let dx = &mut grads[xi];
                for i in 0..m {
                    for j in 0..len {
                        dx[i * n + start + j] = dx[i * n + start + j] + g[i * len + j];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, len], out, rgx, rule))
    }

    /// Column-wise concatenation of same-height matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero parts"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", m, mp),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (pk, &p) in parts.iter().enumerate() {
                let np = widths[pk];
                let pdat = &self.nodes[p.0].data;
                out.extend_from_slice(&pdat[i * np..(i + 1) * np]);
            }
        }
        let idxs: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let rgs: Vec<bool> = parts.iter().map(|&v| self.rg(v)).collect();
        let any_rg = rgs.iter().any(|&b| b);
        let widths_cap = widths.clone();
        let rule: Option<BackFn<F>> = if any_rg {
            Some(Box::new(move |g, _nodes, grads| {
                for i in 0..m {
                    let mut off = 0;
                    for (pk, &pi) in idxs.iter().enumerate() {
                        let np = widths_cap[pk];
                        if rgs[pk] {
                            let dp = &mut grads[pi];
                            for j in 0..np {
                                dp[i * np + j] = dp[i * np + j] + g[i * total + off + j];
                            }
                        }
                        off += np;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, total], out, any_rg, rule))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// node; callers read the buffers of their leaves.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Vec<F>> = self
            .nodes
            .iter()
            .map(|n| vec![F::zero(); n.data.len()])
            .collect();
        grads[loss.0][0] = F::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(rule) = &self.nodes[i].backward {
                let (before, after) = grads.split_at_mut(i);
                rule(&after[0], &self.nodes, before);
            }
        }
        Ok(Grads { buffers: grads })
    }
}

/// Gradient buffers produced by one backward sweep, indexed by `Var`.
pub struct Grads<F: Scalar> {
    buffers: Vec<Vec<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn of(&self, v: Var) -> &[F] {
        &self.buffers[v.0]
    }
}

fn axpy<F: Scalar>(acc: &mut [F], g: &[F]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == F::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + ail * b[l * n + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mx = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
    let mut total = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        total = total + e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}
