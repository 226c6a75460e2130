//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value in a [`Graph`] is an `Array2<f64>`. Higher-rank tensors are
//! laid out as rows: a `T x C x D` tensor is stored time-major as
//! `(T*C) x D`, a conv feature map with `ch` planes of `H x W` as
//! `ch x (H*W)`. Structural ops (attention with explicit key sets, gathers,
//! convolutions) take the layout metadata they need.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable arrays, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.as_standard_layout().into_owned());
        id
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `other` scaled by `weight` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => acc.scaled_add(weight, g),
                None => {
                    self.grads.insert(*id, g * weight);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Same-padded 2-D convolution geometry over `H x W` planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride_h)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride_w)
    }

    /// Leading pad (rows, cols), TensorFlow-style "same".
    pub fn pad_before(&self) -> (usize, usize) {
        let ph = ((self.out_height() - 1) * self.stride_h + self.kernel_h).saturating_sub(self.height);
        let pw = ((self.out_width() - 1) * self.stride_w + self.kernel_w).saturating_sub(self.width);
        (ph / 2, pw / 2)
    }
}

/// Channel-mixing convolution over time-major `(T*C_in) x D` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelConvGeom {
    pub frames: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_t: usize,
    pub kernel_d: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        keys: Rc<Vec<Vec<usize>>>,
        probs: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Rc<Vec<Option<usize>>>,
    },
    Permute {
        src: Var,
        map: Rc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    DepthwiseConv2d {
        x: Var,
        kernel: Var,
        geom: Conv2dGeom,
    },
    ChannelConv {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ChannelConvGeom,
    },
    DepthwiseTime {
        x: Var,
        kernel: Var,
        frames: usize,
        channels: usize,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<Option<usize>>>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("graph values are kept in standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("graph values are kept in standard layout")
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul shape mismatch {ra}x{ca} * {rb}x{cb}");
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row expects a 1x{m} bias");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Adds an `n x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "add_col expects a {n}x1 bias");
        let out = self.value(a) + self.value(col);
        self.push(out, Op::AddCol(a, col))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Gated linear unit over the column axis: `left * sigmoid(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        assert!(c % 2 == 0, "glu needs an even column count");
        let h = c / 2;
        let x = self.value(a);
        let left = x.slice(s![.., ..h]);
        let right = x.slice(s![.., h..]);
        let mut out = left.to_owned();
        out.zip_mut_with(&right, |o, &r| *o *= sigmoid(r));
        self.push(out, Op::Glu(a))
    }

    /// Row-wise layer normalisation with `1 x m` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, m));
        assert_eq!(self.shape(beta), (1, m));
        let xv = self.value(x);
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Multi-head scaled dot-product attention where query row `i` attends
    /// to the key/value rows listed in `keys[i]`.
    ///
    /// `q` is `Nq x D`, `k` and `v` are `Nk x D`; heads split `D` evenly and
    /// scores are multiplied by `scale`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        keys: Rc<Vec<Vec<usize>>>,
    ) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(dk, d, "key width mismatch");
        assert_eq!(self.shape(v), (nk, d), "value shape mismatch");
        assert!(heads >= 1 && d % heads == 0, "D must be divisible by heads");
        assert_eq!(keys.len(), nq, "one key set per query row");
        let dh = d / heads;
        let qv = slice(self.value(q));
        let kv = slice(self.value(k));
        let vv = slice(self.value(v));
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(keys.iter().map(|s| s.len()).sum::<usize>() * heads);
        let mut scores = Vec::new();
        for (i, set) in keys.iter().enumerate() {
            assert!(!set.is_empty(), "empty key set for query {i}");
            for h in 0..heads {
                let off = h * dh;
                let qi = &qv[i * d + off..i * d + off + dh];
                scores.clear();
                for &j in set {
                    assert!(j < nk, "key index out of range");
                    let kj = &kv[j * d + off..j * d + off + dh];
                    scores.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (&j, sc) in set.iter().zip(scores.iter()) {
                    let p = sc / sum;
                    probs.push(p);
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((nq, d), out).expect("shape");
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                keys,
                probs,
            },
        )
    }

    /// Attention probabilities of the most recent `attention` node `v`,
    /// as `(query, head) -> weights over keys[query]`.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Vec<f64>>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                heads, keys, probs, ..
            } => {
                let mut out = Vec::new();
                let mut pos = 0;
                for set in keys.iter() {
                    for _ in 0..*heads {
                        out.push(probs[pos..pos + set.len()].to_vec());
                        pos += set.len();
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather_rows(&mut self, src: Var, index: Rc<Vec<Option<usize>>>) -> Var {
        let (n, m) = self.shape(src);
        let sv = self.value(src);
        let mut out = Array2::zeros((index.len(), m));
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                assert!(i < n, "gather index out of range");
                out.row_mut(r).assign(&sv.row(i));
            }
        }
        self.push(out, Op::Gather { src, index })
    }

    /// Flat element permutation: `out.flat[i] = src.flat[map[i]]`.
    pub fn permute(&mut self, src: Var, shape: (usize, usize), map: Rc<Vec<usize>>) -> Var {
        assert_eq!(shape.0 * shape.1, map.len(), "permutation size mismatch");
        let sv = slice(self.value(src));
        let data: Vec<f64> = map.iter().map(|&i| sv[i]).collect();
        let out = Array2::from_shape_vec(shape, data).expect("shape");
        self.push(out, Op::Permute { src, map })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, src: Var, shape: (usize, usize)) -> Var {
        let (n, m) = self.shape(src);
        assert_eq!(n * m, shape.0 * shape.1, "reshape size mismatch");
        self.permute(src, shape, Rc::new((0..n * m).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Contiguous row range.
    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        self.gather_rows(src, Rc::new((start..end).map(Some).collect()))
    }

    /// Depthwise 2-D convolution, same padding: `x` is `ch x (H*W)`,
    /// `kernel` is `ch x (kh*kw)`. Output is `ch x (H'*W')`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, geom: Conv2dGeom) -> Var {
        let (ch, hw) = self.shape(x);
        assert_eq!(hw, geom.height * geom.width, "conv input size mismatch");
        assert_eq!(self.shape(kernel), (ch, geom.kernel_h * geom.kernel_w));
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let (ph, pw) = geom.pad_before();
        let xv = slice(self.value(x));
        let kv = slice(self.value(kernel));
        let mut out = vec![0.0; ch * oh * ow];
        for c in 0..ch {
            let xc = &xv[c * hw..(c + 1) * hw];
            let kc = &kv[c * geom.kernel_h * geom.kernel_w..(c + 1) * geom.kernel_h * geom.kernel_w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..geom.kernel_h {
                        let ih = (i * geom.stride_h + a) as isize - ph as isize;
                        if ih < 0 || ih >= geom.height as isize {
                            continue;
                        }
                        for b in 0..geom.kernel_w {
                            let iw = (j * geom.stride_w + b) as isize - pw as isize;
                            if iw < 0 || iw >= geom.width as isize {
                                continue;
                            }
                            acc += xc[ih as usize * geom.width + iw as usize] * kc[a * geom.kernel_w + b];
                        }
                    }
                    out[c * oh * ow + i * ow + j] = acc;
                }
            }
        }
        let out = Array2::from_shape_vec((ch, oh * ow), out).expect("shape");
        self.push(out, Op::DepthwiseConv2d { x, kernel, geom })
    }

    /// Convolution mixing channels of a time-major `(T*C_in) x D` tensor,
    /// same padding over `(T, D)`, stride 1. `weight` is
    /// `C_out x (C_in*kt*kd)`, `bias` is `1 x C_out`.
    pub fn channel_conv(&mut self, x: Var, weight: Var, bias: Var, geom: ChannelConvGeom) -> Var {
        let (rows, d) = self.shape(x);
        let ChannelConvGeom {
            frames: t,
            in_channels: ci,
            out_channels: co,
            kernel_t: kt,
            kernel_d: kd,
        } = geom;
        assert_eq!(rows, t * ci, "channel_conv input rows");
        assert_eq!(self.shape(weight), (co, ci * kt * kd));
        assert_eq!(self.shape(bias), (1, co));
        assert!(kt % 2 == 1 && kd % 2 == 1, "odd kernels only");
        let (pt, pd) = ((kt / 2) as isize, (kd / 2) as isize);
        let xv = slice(self.value(x));
        let wv = slice(self.value(weight));
        let bv = slice(self.value(bias));
        let mut out = vec![0.0; t * co * d];
        for tt in 0..t {
            for o in 0..co {
                let orow = &mut out[(tt * co + o) * d..(tt * co + o + 1) * d];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for i in 0..ci {
                    for a in 0..kt {
                        let st = tt as isize + a as isize - pt;
                        if st < 0 || st >= t as isize {
                            continue;
                        }
                        let xrow = &xv[(st as usize * ci + i) * d..(st as usize * ci + i + 1) * d];
                        for b in 0..kd {
                            let w = wv[o * ci * kt * kd + (i * kt + a) * kd + b];
                            let shift = b as isize - pd;
                            for (dd, ov) in orow.iter_mut().enumerate() {
                                let sd = dd as isize + shift;
                                if sd >= 0 && sd < d as isize {
                                    *ov += w * xrow[sd as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((t * co, d), out).expect("shape");
        self.push(
            out,
            Op::ChannelConv {
                x,
                weight,
                bias,
                geom,
            },
        )
    }

    /// Per-feature 1-D convolution along time for each channel stream of a
    /// time-major `(T*C) x D` tensor. `kernel` is `k x D`, k odd, same padding.
    pub fn depthwise_time_conv(&mut self, x: Var, kernel: Var, frames: usize, channels: usize) -> Var {
        let (rows, d) = self.shape(x);
        assert_eq!(rows, frames * channels);
        let (k, kd) = self.shape(kernel);
        assert_eq!(kd, d);
        assert!(k % 2 == 1, "odd kernels only");
        let pad = (k / 2) as isize;
        let xv = slice(self.value(x));
        let kv = slice(self.value(kernel));
        let mut out = vec![0.0; rows * d];
        for t in 0..frames {
            for c in 0..channels {
                let orow = &mut out[(t * channels + c) * d..(t * channels + c + 1) * d];
                for j in 0..k {
                    let st = t as isize + j as isize - pad;
                    if st < 0 || st >= frames as isize {
                        continue;
                    }
                    let xrow = &xv[(st as usize * channels + c) * d..(st as usize * channels + c + 1) * d];
                    let krow = &kv[j * d..(j + 1) * d];
                    for ((o, x), w) in orow.iter_mut().zip(xrow).zip(krow) {
                        *o += x * w;
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((rows, d), out).expect("shape");
        self.push(
            out,
            Op::DepthwiseTime {
                x,
                kernel,
                frames,
                channels,
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    /// Returns 0 when no row is scored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<Option<usize>>>) -> Var {
        let (n, m) = self.shape(logits);
        assert_eq!(targets.len(), n, "one target per logits row");
        let mut probs = self.value(logits).clone();
        let mut total = 0.0;
        let mut counted = 0usize;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if let Some(t) = targets[r] {
                assert!(t < m, "target id out of range");
                total += lse - row[t];
                counted += 1;
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.grads.insert(*id, gout);
                }
                Op::MatMul(a, b) => {
                    let ga = gout.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gout);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gout.clone());
                    acc(&mut grads, *a, gout);
                }
                Op::AddRow(a, r) => {
                    let gr = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, gout);
                }
                Op::AddCol(a, c) => {
                    let gc = gout.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *c, gc);
                    acc(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let ga = &gout * self.value(*b);
                    let gb = &gout * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    acc(&mut grads, *a, gout * *f);
                }
                Op::Silu(a) => {
                    let mut g = gout;
                    g.zip_mut_with(self.value(*a), |g, &x| {
                        let s = sigmoid(x);
                        *g *= s * (1.0 + x * (1.0 - s));
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = gout;
                    g.zip_mut_with(self.value(*a), |g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Glu(a) => {
                    let x = self.value(*a);
                    let h = x.ncols() / 2;
                    let mut g = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        for c in 0..h {
                            let l = x[[r, c]];
                            let s = sigmoid(x[[r, c + h]]);
                            let go = gout[[r, c]];
                            g[[r, c]] = go * s;
                            g[[r, c + h]] = go * l * s * (1.0 - s);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let m = xhat.ncols() as f64;
                    let gbeta = gout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &gout * self.value(*gamma);
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] / m * (m * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut g = gout;
                    for (mut gr, yr) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        gr.zip_mut_with(&yr, |g, &y| *g = y * (*g - dot));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    keys,
                    probs,
                } => {
                    let (nq, d) = self.shape(*q);
                    let nk = self.shape(*k).0;
                    let dh = d / heads;
                    let qv = slice(self.value(*q));
                    let kv = slice(self.value(*k));
                    let vv = slice(self.value(*v));
                    let go = slice(&gout);
                    let mut gq = vec![0.0; nq * d];
                    let mut gk = vec![0.0; nk * d];
                    let mut gv = vec![0.0; nk * d];
                    let mut dp = Vec::new();
                    let mut pos = 0;
                    for (i, set) in keys.iter().enumerate() {
                        for h in 0..*heads {
                            let off = h * dh;
                            let p = &probs[pos..pos + set.len()];
                            pos += set.len();
                            let goi = &go[i * d + off..i * d + off + dh];
                            dp.clear();
                            for (&j, &pj) in set.iter().zip(p) {
                                let vj = &vv[j * d + off..j * d + off + dh];
                                dp.push(goi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                let gvj = &mut gv[j * d + off..j * d + off + dh];
                                for (g, o) in gvj.iter_mut().zip(goi) {
                                    *g += pj * o;
                                }
                            }
                            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = &qv[i * d + off..i * d + off + dh];
                            for ((&j, &pj), &dpj) in set.iter().zip(p).zip(&dp) {
                                let ds = pj * (dpj - mean) * scale;
                                let kj = &kv[j * d + off..j * d + off + dh];
                                let gqi = &mut gq[i * d + off..i * d + off + dh];
                                for (g, kk) in gqi.iter_mut().zip(kj) {
                                    *g += ds * kk;
                                }
                                let gkj = &mut gk[j * d + off..j * d + off + dh];
                                for (g, qq) in gkj.iter_mut().zip(qi) {
                                    *g += ds * qq;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, Array2::from_shape_vec((nq, d), gq).expect("shape"));
                    acc(&mut grads, *k, Array2::from_shape_vec((nk, d), gk).expect("shape"));
                    acc(&mut grads, *v, Array2::from_shape_vec((nk, d), gv).expect("shape"));
                }
                Op::Gather { src, index } => {
                    let mut g = Array2::zeros(self.shape(*src));
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            let mut row = g.row_mut(i);
                            row += &gout.row(r);
                        }
                    }
                    acc(&mut grads, *src, g);
                }
                Op::Permute { src, map } => {
                    let mut g = Array2::zeros(self.shape(*src));
                    {
                        let gs = slice_mut(&mut g);
                        for (o, &i) in slice(&gout).iter().zip(map.iter()) {
                            gs[i] += o;
                        }
                    }
                    acc(&mut grads, *src, g);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.shape(*p).0;
                        acc(&mut grads, *p, gout.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::DepthwiseConv2d { x, kernel, geom } => {
                    let (ch, hw) = self.shape(*x);
                    let (oh, ow) = (geom.out_height(), geom.out_width());
                    let (ph, pw) = geom.pad_before();
                    let kk = geom.kernel_h * geom.kernel_w;
                    let xv = slice(self.value(*x));
                    let kv = slice(self.value(*kernel));
                    let go = slice(&gout);
                    let mut gx = vec![0.0; ch * hw];
                    let mut gk = vec![0.0; ch * kk];
                    for c in 0..ch {
                        for i in 0..oh {
                            for j in 0..ow {
                                let g = go[c * oh * ow + i * ow + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for a in 0..geom.kernel_h {
                                    let ih = (i * geom.stride_h + a) as isize - ph as isize;
                                    if ih < 0 || ih >= geom.height as isize {
                                        continue;
                                    }
                                    for b in 0..geom.kernel_w {
                                        let iw = (j * geom.stride_w + b) as isize - pw as isize;
                                        if iw < 0 || iw >= geom.width as isize {
                                            continue;
                                        }
                                        let xi = c * hw + ih as usize * geom.width + iw as usize;
                                        let ki = c * kk + a * geom.kernel_w + b;
                                        gx[xi] += g * kv[ki];
                                        gk[ki] += g * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, Array2::from_shape_vec((ch, hw), gx).expect("shape"));
                    acc(&mut grads, *kernel, Array2::from_shape_vec((ch, kk), gk).expect("shape"));
                }
                Op::ChannelConv {
                    x,
                    weight,
                    bias,
                    geom,
                } => {
                    let (rows, d) = self.shape(*x);
                    let ChannelConvGeom {
                        frames: t,
                        in_channels: ci,
                        out_channels: co,
                        kernel_t: kt,
                        kernel_d: kd,
                    } = *geom;
                    let (pt, pd) = ((kt / 2) as isize, (kd / 2) as isize);
                    let xv = slice(self.value(*x));
                    let wv = slice(self.value(*weight));
                    let go = slice(&gout);
                    let mut gx = vec![0.0; rows * d];
                    let mut gw = vec![0.0; co * ci * kt * kd];
                    let mut gb = vec![0.0; co];
                    for tt in 0..t {
                        for o in 0..co {
                            let grow = &go[(tt * co + o) * d..(tt * co + o + 1) * d];
                            gb[o] += grow.iter().sum::<f64>();
                            for i in 0..ci {
                                for a in 0..kt {
                                    let st = tt as isize + a as isize - pt;
                                    if st < 0 || st >= t as isize {
                                        continue;
                                    }
                                    let base = (st as usize * ci + i) * d;
                                    for b in 0..kd {
                                        let wi = o * ci * kt * kd + (i * kt + a) * kd + b;
                                        let w = wv[wi];
                                        let shift = b as isize - pd;
                                        let mut gwacc = 0.0;
                                        for (dd, g) in grow.iter().enumerate() {
                                            let sd = dd as isize + shift;
                                            if sd >= 0 && sd < d as isize {
                                                gwacc += g * xv[base + sd as usize];
                                                gx[base + sd as usize] += g * w;
                                            }
                                        }
                                        gw[wi] += gwacc;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, Array2::from_shape_vec((rows, d), gx).expect("shape"));
                    acc(
                        &mut grads,
                        *weight,
                        Array2::from_shape_vec((co, ci * kt * kd), gw).expect("shape"),
                    );
                    acc(&mut grads, *bias, Array2::from_shape_vec((1, co), gb).expect("shape"));
                }
                Op::DepthwiseTime {
                    x,
                    kernel,
                    frames,
                    channels,
                } => {
                    let (rows, d) = self.shape(*x);
                    let (k, _) = self.shape(*kernel);
                    let pad = (k / 2) as isize;
                    let xv = slice(self.value(*x));
                    let kv = slice(self.value(*kernel));
                    let go = slice(&gout);
                    let mut gx = vec![0.0; rows * d];
                    let mut gk = vec![0.0; k * d];
                    for t in 0..*frames {
                        for c in 0..*channels {
                            let grow = &go[(t * channels + c) * d..(t * channels + c + 1) * d];
                            for j in 0..k {
                                let st = t as isize + j as isize - pad;
                                if st < 0 || st >= *frames as isize {
                                    continue;
                                }
                                let base = (st as usize * channels + c) * d;
                                for dd in 0..d {
                                    gx[base + dd] += grow[dd] * kv[j * d + dd];
                                    gk[j * d + dd] += grow[dd] * xv[base + dd];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, Array2::from_shape_vec((rows, d), gx).expect("shape"));
                    acc(&mut grads, *kernel, Array2::from_shape_vec((k, d), gk).expect("shape"));
                }
                Op::SumAll(a) => {
                    let g = gout[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.shape(*a), g));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let counted = targets.iter().filter(|t| t.is_some()).count();
                    let mut g = Array2::zeros(probs.dim());
                    if counted > 0 {
                        let w = gout[[0, 0]] / counted as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let mut row = g.row_mut(r);
                                row.assign(&probs.row(r));
                                row[t] -= 1.0;
                                row *= w;
                            }
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use crate::init::Initializer;

    fn store_with(shapes: &[(&str, (usize, usize))], seed: u64) -> ParamStore {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            store.insert(*name, init.normal(*shape, 0.5));
        }
        store
    }

    fn assert_ok(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let report = check_gradients(store, &f, &GradCheckConfig::default());
        assert!(report.passed(1e-6), "{report:?}");
    }

    #[test]
    fn matmul_bias_silu_gradients() {
        let store = store_with(&[("a", (3, 4)), ("b", (4, 5)), ("bias", (1, 5)), ("w", (3, 5))], 1);
        assert_ok(&store, |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.store().id(n).unwrap());
            let a = p(g, "a");
            let b = p(g, "b");
            let bias = p(g, "bias");
            let w = p(g, "w");
            let y = g.matmul(a, b);
            let y = g.add_row(y, bias);
            let y = g.silu(y);
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn layer_norm_glu_softmax_gradients() {
        let store = store_with(&[("x", (4, 6)), ("g", (1, 6)), ("b", (1, 6)), ("w", (4, 3))], 2);
        assert_ok(&store, |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.store().id(n).unwrap());
            let x = p(g, "x");
            let gam = p(g, "g");
            let bet = p(g, "b");
            let w = p(g, "w");
            let y = g.layer_norm(x, gam, bet);
            let y = g.glu(y);
            let y = g.softmax(y);
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn attention_gather_gradients() {
        let store = store_with(&[("q", (3, 4)), ("k", (5, 4)), ("v", (5, 4)), ("w", (3, 4))], 3);
        let keys = Rc::new(vec![vec![0, 1], vec![1, 2, 3, 4], vec![4]]);
        assert_ok(&store, |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.store().id(n).unwrap());
            let q = p(g, "q");
            let k = p(g, "k");
            let v = p(g, "v");
            let w = p(g, "w");
            let kg = g.gather_rows(k, Rc::new(vec![Some(0), Some(1), None, Some(3), Some(1)]));
            let y = g.attention(q, kg, v, 2, 0.7, keys.clone());
            let y = g.mul(y, w);
            g.sum_all(y)
        });
    }

    #[test]
    fn convolution_gradients() {
        let geom = Conv2dGeom {
            height: 5,
            width: 7,
            kernel_h: 3,
            kernel_w: 3,
            stride_h: 2,
            stride_w: 2,
        };
        let cgeom = ChannelConvGeom {
            frames: 3,
            in_channels: 2,
            out_channels: 3,
            kernel_t: 3,
            kernel_d: 3,
        };
        let store = store_with(
            &[
                ("x", (2, 35)),
                ("k", (2, 9)),
                ("w", (2, 12)),
                ("y", (6, 4)),
                ("cw", (3, 18)),
                ("cb", (1, 3)),
                ("tk", (3, 4)),
                ("w2", (9, 4)),
            ],
            4,
        );
        assert_ok(&store, |g| {
            let p = |g: &mut Graph, n: &str| g.param(g.store().id(n).unwrap());
            let x = p(g, "x");
            let k = p(g, "k");
            let w = p(g, "w");
            let c = g.depthwise_conv2d(x, k, geom);
            let c = g.mul(c, w);
            let l1 = g.sum_all(c);
            let y = p(g, "y");
            let tk = p(g, "tk");
            let y2 = g.depthwise_time_conv(y, tk, 3, 2);
            let cw = p(g, "cw");
            let cb = p(g, "cb");
            let z = g.channel_conv(y2, cw, cb, cgeom);
            let w2 = p(g, "w2");
            let z = g.mul(z, w2);
            let l2 = g.sum_all(z);
            g.add(l1, l2)
        });
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let store = store_with(&[("z", (3, 5))], 5);
        let targets = Rc::new(vec![Some(1), None, Some(4)]);
        assert_ok(&store, |g| {
            let z = g.param(ParamId(0));
            g.cross_entropy(z, targets.clone())
        });
        let mut g = Graph::new(&store);
        let z = g.constant(Array2::zeros((2, 5)));
        let l = g.cross_entropy(z, Rc::new(vec![Some(0), Some(3)]));
        assert!((g.value(l)[[0, 0]] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn same_padding_output_sizes() {
        let geom = Conv2dGeom {
            height: 100,
            width: 201,
            kernel_h: 3,
            kernel_w: 3,
            stride_h: 2,
            stride_w: 2,
        };
        assert_eq!(geom.out_height(), 50);
        assert_eq!(geom.out_width(), 101);
    }
}
