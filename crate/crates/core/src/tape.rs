//! Matrix-valued reverse-mode differentiation.
//!
//! Trainable parameters live in a [`ParamStore`]: one flat `f64` vector cut
//! into named 2-D segments. A [`Tape`] records every operation of a forward
//! pass as a node holding its value and a closure mapping the output
//! gradient to one gradient per input. [`Tape::param_gradient`] replays the
//! tape backwards and returns a flat gradient with the store's layout.
//!
//! Batched activations keep samples as consecutive row blocks, so a batch
//! of `B` graphs with `n` nodes is a `(B·n) × D` matrix.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities inside logs are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]`.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("no parameter segment named {0:?}")]
    UnknownSegment(String),
    #[error("parameter segment {name:?} has shape {found:?}, expected {expected:?}")]
    SegmentShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("flat vector has length {found}, store has {expected}")]
    Length { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat parameter vector with named 2-D segments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    segments: Vec<Segment>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, init: Array2<f64>) -> ParamId {
        let (rows, cols) = init.dim();
        let offset = self.values.len();
        self.values.extend(init.iter().copied());
        self.segments.push(Segment {
            name: name.into(),
            rows,
            cols,
            offset,
        });
        ParamId(self.segments.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TapeError> {
        self.segments
            .iter()
            .position(|s| s.name == name)
            .map(ParamId)
            .ok_or_else(|| TapeError::UnknownSegment(name.to_string()))
    }

    pub fn segment(&self, id: ParamId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, id: ParamId) -> Array2<f64> {
        let seg = &self.segments[id.0];
        Array2::from_shape_vec(
            (seg.rows, seg.cols),
            self.values[seg.offset..seg.offset + seg.len()].to_vec(),
        )
        .expect("segment shape")
    }

    pub fn set(&mut self, id: ParamId, value: &Array2<f64>) -> Result<(), TapeError> {
        let seg = &self.segments[id.0];
        if value.dim() != (seg.rows, seg.cols) {
            return Err(TapeError::SegmentShape {
                name: seg.name.clone(),
                expected: (seg.rows, seg.cols),
                found: value.dim(),
            });
        }
        let range = seg.offset..seg.offset + seg.len();
        for (dst, src) in self.values[range].iter_mut().zip(value.iter()) {
            *dst = *src;
        }
        Ok(())
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), TapeError> {
        if values.len() != self.values.len() {
            return Err(TapeError::Length {
                expected: self.values.len(),
                found: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Segment owning flat index `k`.
    pub fn segment_of(&self, k: usize) -> &Segment {
        self.segments
            .iter()
            .find(|s| k >= s.offset && k < s.offset + s.len())
            .expect("index within store")
    }
}

type Backward = Box<dyn Fn(&Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    param: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position in the vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data).expect("shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id), Vec::new(), None);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Adds a node with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array2<f64>,
        backward: impl Fn(&Array2<f64>) -> Vec<Array2<f64>> + 'static,
    ) -> Var {
        self.push(
            value,
            inputs.iter().map(|v| v.0).collect(),
            Some(Box::new(backward)),
        )
    }

    /// Gradients of a `1 × 1` output w.r.t. every node.
    pub fn backward(&self, output: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.nodes[output.0].value.dim()));
        for k in (0..=output.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if let Some(back) = &node.backward {
                let pg = back(&g);
                debug_assert_eq!(pg.len(), node.parents.len());
                for (&p, gp) in node.parents.iter().zip(pg) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &gp,
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
            grads[k] = Some(g);
        }
        grads
    }

    /// Flat gradient with the layout of `store`.
    pub fn param_gradient(&self, output: Var, store: &ParamStore) -> Vec<f64> {
        let grads = self.backward(output);
        let mut flat = vec![0.0; store.len()];
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                let seg = store.segment(id);
                for (dst, src) in flat[seg.offset..seg.offset + seg.len()].iter_mut().zip(g.iter()) {
                    *dst += src;
                }
            }
        }
        flat
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.dot(&bv);
        self.custom(&[a, b], out, move |g| vec![g.dot(&bv.t()), av.t().dot(g)])
    }

    /// `x · wᵀ + bias`, with `w: out × in` and `bias: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        let out = xv.dot(&wv.t()) + self.value(bias);
        self.custom(&[x, w, bias], out, move |g| {
            vec![
                g.dot(&wv),
                g.t().dot(&xv),
                g.sum_axis(Axis(0)).insert_axis(Axis(0)),
            ]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.custom(&[a, b], out, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.custom(&[a, b], out, |g| vec![g.clone(), -g])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = &av * &bv;
        self.custom(&[a, b], out, move |g| vec![g * &bv, g * &av])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.custom(&[a], out, move |g| vec![g * k])
    }

    /// Multiplies row `r` of `a` by `col[r, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a).clone(), self.value(col).clone());
        assert_eq!(cv.dim(), (av.nrows(), 1), "mul_col shape");
        let out = &av * &cv;
        self.custom(&[a, col], out, move |g| {
            vec![g * &cv, (g * &av).sum_axis(Axis(1)).insert_axis(Axis(1))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.mapv(|x| x.max(0.0));
        self.custom(&[a], out, move |g| {
            let mut d = g.clone();
            d.zip_mut_with(&av, |d, &x| {
                if x <= 0.0 {
                    *d = 0.0
                }
            });
            vec![d]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ov = out.clone();
        self.custom(&[a], out, move |g| vec![g * &ov.mapv(|s| s * (1.0 - s))])
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let ov = out.clone();
        self.custom(&[a], out, move |g| {
            let dot = (g * &ov).sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![&ov * &(g - &dot)]
        })
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        let (r0, c0) = av.dim();
        let out = mat(rows, cols, av.iter().copied().collect());
        self.custom(&[a], out, move |g| vec![mat(r0, c0, g.iter().copied().collect())])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let ca = self.value(a).ncols();
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat rows agree");
        self.custom(&[a, b], out, move |g| {
            vec![g.slice(s![.., ..ca]).to_owned(), g.slice(s![.., ca..]).to_owned()]
        })
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = self.value(a);
        let (r0, c0) = av.dim();
        let out = av.select(Axis(0), &rows);
        self.custom(&[a], out, move |g| {
            let mut d = Array2::zeros((r0, c0));
            for (k, &r) in rows.iter().enumerate() {
                let mut row = d.row_mut(r);
                row += &g.row(k);
            }
            vec![d]
        })
    }

    /// Row `r` from `a` where `take_a[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Var {
        let mut out = self.value(b).clone();
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                out.row_mut(r).assign(&self.value(a).row(r));
            }
        }
        self.custom(&[a, b], out, move |g| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            for (r, &t) in take_a.iter().enumerate() {
                if t {
                    gb.row_mut(r).fill(0.0);
                } else {
                    ga.row_mut(r).fill(0.0);
                }
            }
            vec![ga, gb]
        })
    }

    /// Mean over consecutive blocks of `block` rows: `(B·block) × D → B × D`.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Var {
        let av = self.value(a);
        let (r, d) = av.dim();
        let b = r / block;
        let mut out = Array2::zeros((b, d));
        for i in 0..b {
            out.row_mut(i)
                .assign(&av.slice(s![i * block..(i + 1) * block, ..]).mean_axis(Axis(0)).expect("block"));
        }
        self.custom(&[a], out, move |g| {
            let mut gi = Array2::zeros((r, d));
            for i in 0..b {
                for k in 0..block {
                    gi.row_mut(i * block + k).assign(&(&g.row(i) / block as f64));
                }
            }
            vec![gi]
        })
    }

    /// Repeats every row `block` times: `B × D → (B·block) × D`.
    pub fn repeat_rows(&mut self, a: Var, block: usize) -> Var {
        let av = self.value(a);
        let (b, d) = av.dim();
        let mut out = Array2::zeros((b * block, d));
        for i in 0..b {
            for k in 0..block {
                out.row_mut(i * block + k).assign(&av.row(i));
            }
        }
        self.custom(&[a], out, move |g| {
            let mut gi = Array2::zeros((b, d));
            for i in 0..b {
                for k in 0..block {
                    let mut row = gi.row_mut(i);
                    row += &g.row(i * block + k);
                }
            }
            vec![gi]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let dim = self.value(a).dim();
        let out = mat(1, 1, vec![self.value(a).sum()]);
        self.custom(&[a], out, move |g| vec![Array2::from_elem(dim, g[[0, 0]])])
    }

    /// Per-row `-Σ_j [y log p + (1 - y) log(1 - p)]` with clamped `p`.
    pub fn symmetric_cross_entropy_rows(&mut self, p: Var, targets: Arc<Array2<f64>>) -> Var {
        let pv = self.value(p).clone();
        assert_eq!(pv.dim(), targets.dim(), "targets shape");
        let lo = LOG_CLAMP;
        let hi = 1.0 - LOG_CLAMP;
        let mut out = Array2::zeros((pv.nrows(), 1));
        for ((r, c), &pi) in pv.indexed_iter() {
            let yi = targets[[r, c]];
            let q = pi.clamp(lo, hi);
            out[[r, 0]] -= yi * q.ln() + (1.0 - yi) * (1.0 - q).ln();
        }
        self.custom(&[p], out, move |g| {
            let mut d = Array2::zeros(pv.dim());
            for ((r, c), &pi) in pv.indexed_iter() {
                if pi > lo && pi < hi {
                    let y = targets[[r, c]];
                    d[[r, c]] = g[[r, 0]] * (-(y / pi) + (1.0 - y) / (1.0 - pi));
                }
            }
            vec![d]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)`, or zero when both are within `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a scalar from params with `build`, and checks the tape
    /// gradient against central differences.
    fn check(store: &ParamStore, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let ids: Vec<ParamId> = (0..store.segments().len()).map(ParamId).collect();
        let eval = |s: &ParamStore| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
            let out = build(&mut t, &vars);
            (t.value(out)[[0, 0]], t.param_gradient(out, s))
        };
        let (_, analytic) = eval(store);
        let numeric = central_difference(store.flat(), 1e-6, |x| {
            let mut s = store.clone();
            s.set_flat(x).unwrap();
            eval(&s).0
        });
        for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                relative_error(*a, *n, 1e-8) < 1e-5,
                "param {k}: analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn linear_relu_softmax_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("x", random(&mut rng, 4, 3));
        store.add("w", random(&mut rng, 5, 3));
        store.add("b", random(&mut rng, 1, 5));
        let y = Arc::new(Array2::from_shape_fn((4, 5), |(r, c)| ((r + c) % 5 == 0) as u8 as f64));
        check(&store, move |t, v| {
            let h = t.linear(v[0], v[1], v[2]);
            let h = t.relu(h);
            let p = t.softmax_rows(h);
            let l = t.symmetric_cross_entropy_rows(p, y.clone());
            t.sum_all(l)
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("a", random(&mut rng, 6, 2));
        store.add("b", random(&mut rng, 6, 2));
        store.add("col", random(&mut rng, 6, 1));
        store.add("w", random(&mut rng, 2, 4));
        check(&store, |t, v| {
            let m = t.mul(v[0], v[1]);
            let m = t.mul_col(m, v[2]);
            let c = t.concat_cols(m, v[1]);
            let r = t.reshape(c, 3, 8);
            let bm = t.block_mean(v[0], 3);
            let rep = t.repeat_rows(bm, 3);
            let sel = t.select_rows(rep, v[1], vec![true, false, true, false, false, true]);
            let g = t.gather_rows(sel, vec![0, 5, 5, 2]);
            let s = t.sigmoid(g);
            let mm = t.matmul(s, v[3]);
            let d = t.sub(mm, mm);
            let e = t.add(d, mm);
            let e = t.scale(e, 0.7);
            let a = t.sum_all(e);
            let b = t.sum_all(r);
            let ab = t.mul(a, b);
            t.add(ab, a)
        });
    }

    #[test]
    fn cross_entropy_of_uniform_binary_row() {
        let mut t = Tape::new();
        let p = t.constant(Array2::from_elem((1, 2), 0.5));
        let l = t.symmetric_cross_entropy_rows(p, Arc::new(ndarray::arr2(&[[1.0, 0.0]])));
        assert!((t.value(l)[[0, 0]] - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn store_layout() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array2::zeros((2, 3)));
        let b = store.add("b", Array2::ones((1, 4)));
        assert_eq!(store.len(), 10);
        assert_eq!(store.segment(b).offset, 6);
        assert_eq!(store.id("b").unwrap(), b);
        assert_eq!(store.segment_of(7).name, "b");
        assert!(store.set(a, &Array2::zeros((3, 2))).is_err());
        assert_eq!(store.id("zz"), Err(TapeError::UnknownSegment("zz".into())));
    }
}
