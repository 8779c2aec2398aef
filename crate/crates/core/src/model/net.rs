//! Parameters, forward passes and exact gradients of the three-head model.
//!
//! Shared encoder: `h = tanh(W1 · mean(E[f]) + b1)`.
//! Retrieval head: `v = normalize(R h)`, in-batch InfoNCE.
//! Coarse head: per-feature `z = normalize(C tanh(W1 E[f] + b1))`, score is
//! the mean over query features of the max cosine over product features,
//! trained with a logistic pairwise loss.
//! Fine head: `softmax(Wo tanh(Wg [h_q ⊙ h_p ; mean(X[c])] + bg) + bo)`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{rng_for, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    pub ret_dim: usize,
    pub coarse_dim: usize,
    pub cross_vocab: usize,
    pub cross_dim: usize,
    pub fine_hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { vocab: 4096, dim: 24, hidden: 32, ret_dim: 64, coarse_dim: 16, cross_vocab: 4096, cross_dim: 16, fine_hidden: 32 }
    }
}

impl Dims {
    pub fn fine_in(&self) -> usize {
        self.hidden + self.cross_dim
    }
}

pub const ENCODER_BLOCKS: [&str; 3] = ["emb", "w1", "b1"];
pub const RETRIEVAL_BLOCKS: [&str; 1] = ["r"];
pub const COARSE_BLOCKS: [&str; 1] = ["c"];
pub const FINE_BLOCKS: [&str; 5] = ["xemb", "wg", "bg", "wo", "bo"];

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub emb: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub xemb: Vec<f64>,
    pub wg: Vec<f64>,
    pub bg: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

impl Params {
    pub fn zeros(d: &Dims) -> Self {
        Self {
            emb: vec![0.0; d.vocab * d.dim],
            w1: vec![0.0; d.hidden * d.dim],
            b1: vec![0.0; d.hidden],
            r: vec![0.0; d.ret_dim * d.hidden],
            c: vec![0.0; d.coarse_dim * d.hidden],
            xemb: vec![0.0; d.cross_vocab * d.cross_dim],
            wg: vec![0.0; d.fine_hidden * d.fine_in()],
            bg: vec![0.0; d.fine_hidden],
            wo: vec![0.0; 4 * d.fine_hidden],
            bo: vec![0.0; 4],
        }
    }

    /// Scaled uniform initialisation, deterministic in `seed`.
    pub fn init(d: &Dims, seed: u64) -> Self {
        let mut p = Self::zeros(d);
        let mut rng = rng_for(seed, &["model-init"]);
        let mut fill = |v: &mut Vec<f64>, fan_in: usize| {
            let a = (3.0 / fan_in as f64).sqrt();
            for x in v.iter_mut() {
                *x = rng.gen_range(-a..a);
            }
        };
        fill(&mut p.emb, 1);
        fill(&mut p.w1, d.dim);
        fill(&mut p.r, d.hidden);
        fill(&mut p.c, d.hidden);
        fill(&mut p.xemb, 1);
        fill(&mut p.wg, d.fine_in());
        fill(&mut p.wo, d.fine_hidden);
        p
    }

    pub fn blocks(&self) -> [(&'static str, &Vec<f64>); 10] {
        [
            ("emb", &self.emb),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("r", &self.r),
            ("c", &self.c),
            ("xemb", &self.xemb),
            ("wg", &self.wg),
            ("bg", &self.bg),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 10] {
        [
            ("emb", &mut self.emb),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("r", &mut self.r),
            ("c", &mut self.c),
            ("xemb", &mut self.xemb),
            ("wg", &mut self.wg),
            ("bg", &mut self.bg),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ]
    }

    pub fn block(&self, name: &str) -> Option<&Vec<f64>> {
        self.blocks().into_iter().find(|(n, _)| *n == name).map(|(_, b)| b)
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Flat (block, offset) addressing for gradient checks.
    pub fn get(&self, block: usize, i: usize) -> f64 {
        self.blocks()[block].1[i]
    }

    pub fn set(&mut self, block: usize, i: usize, v: f64) {
        self.blocks_mut()[block].1[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

// ---- small dense helpers -------------------------------------------------

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        if dy[r] == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dx[c] += row[c] * dy[r];
        }
    }
}

fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        if dy[r] == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += dy[r] * x[c];
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fixed fallback direction for degenerate inputs.
pub fn basis(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[0] = 1.0;
    v
}

const NORM_EPS: f64 = 1e-12;

// ---- encoder -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Hidden {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn encode_hidden(p: &Params, d: &Dims, feats: &[usize]) -> Option<Hidden> {
    if feats.is_empty() {
        return None;
    }
    let mut x = vec![0.0; d.dim];
    for &f in feats {
        let row = &p.emb[f * d.dim..(f + 1) * d.dim];
        for (xi, ri) in x.iter_mut().zip(row) {
            *xi += ri;
        }
    }
    let inv = 1.0 / feats.len() as f64;
    x.iter_mut().for_each(|v| *v *= inv);
    let mut h = vec![0.0; d.hidden];
    matvec(&p.w1, d.hidden, d.dim, &x, &mut h);
    for (hi, bi) in h.iter_mut().zip(&p.b1) {
        *hi = (*hi + bi).tanh();
    }
    Some(Hidden { x, h })
}

fn backprop_hidden(p: &Params, d: &Dims, feats: &[usize], hid: &Hidden, dh: &[f64], g: &mut Params) {
    let da: Vec<f64> = dh.iter().zip(&hid.h).map(|(g, h)| g * (1.0 - h * h)).collect();
    outer_acc(&mut g.w1, d.hidden, d.dim, &da, &hid.x);
    for (gb, a) in g.b1.iter_mut().zip(&da) {
        *gb += a;
    }
    let mut dx = vec![0.0; d.dim];
    matvec_t_acc(&p.w1, d.hidden, d.dim, &da, &mut dx);
    let inv = 1.0 / feats.len() as f64;
    for &f in feats {
        let row = &mut g.emb[f * d.dim..(f + 1) * d.dim];
        for (r, v) in row.iter_mut().zip(&dx) {
            *r += v * inv;
        }
    }
}

// ---- retrieval head ------------------------------------------------------

pub struct RetVec {
    pub hidden: Hidden,
    pub r: Vec<f64>,
    pub n: f64,
    pub v: Vec<f64>,
}

pub fn retrieval_forward(p: &Params, d: &Dims, feats: &[usize]) -> Option<RetVec> {
    let hidden = encode_hidden(p, d, feats)?;
    let mut r = vec![0.0; d.ret_dim];
    matvec(&p.r, d.ret_dim, d.hidden, &hidden.h, &mut r);
    let n = norm(&r);
    if n < NORM_EPS {
        return None;
    }
    let v = r.iter().map(|x| x / n).collect();
    Some(RetVec { hidden, r, n, v })
}

/// Unit embedding; degenerate inputs map to the first basis vector.
pub fn embed(p: &Params, d: &Dims, feats: &[usize]) -> Vec<f64> {
    retrieval_forward(p, d, feats).map(|r| r.v).unwrap_or_else(|| basis(d.ret_dim))
}

fn retrieval_backward(p: &Params, d: &Dims, feats: &[usize], rv: &RetVec, dv: &[f64], g: &mut Params) {
    let vd = dot(&rv.v, dv);
    let dr: Vec<f64> = dv.iter().zip(&rv.v).map(|(g, v)| (g - v * vd) / rv.n).collect();
    outer_acc(&mut g.r, d.ret_dim, d.hidden, &dr, &rv.hidden.h);
    let mut dh = vec![0.0; d.hidden];
    matvec_t_acc(&p.r, d.ret_dim, d.hidden, &dr, &mut dh);
    backprop_hidden(p, d, feats, &rv.hidden, &dh, g);
}

// ---- coarse head ---------------------------------------------------------

pub struct TokVec {
    pub f: usize,
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub n: f64,
    pub zh: Vec<f64>,
}

pub fn token_forward(p: &Params, d: &Dims, f: usize) -> TokVec {
    let e = &p.emb[f * d.dim..(f + 1) * d.dim];
    let mut t = vec![0.0; d.hidden];
    matvec(&p.w1, d.hidden, d.dim, e, &mut t);
    for (ti, bi) in t.iter_mut().zip(&p.b1) {
        *ti = (*ti + bi).tanh();
    }
    let mut z = vec![0.0; d.coarse_dim];
    matvec(&p.c, d.coarse_dim, d.hidden, &t, &mut z);
    let n = norm(&z).max(NORM_EPS);
    let zh = z.iter().map(|x| x / n).collect();
    TokVec { f, t, z, n, zh }
}

fn token_backward(p: &Params, d: &Dims, tv: &TokVec, dzh: &[f64], g: &mut Params) {
    let zd = dot(&tv.zh, dzh);
    let dz: Vec<f64> = dzh.iter().zip(&tv.zh).map(|(g, v)| (g - v * zd) / tv.n).collect();
    outer_acc(&mut g.c, d.coarse_dim, d.hidden, &dz, &tv.t);
    let mut dt = vec![0.0; d.hidden];
    matvec_t_acc(&p.c, d.coarse_dim, d.hidden, &dz, &mut dt);
    let da: Vec<f64> = dt.iter().zip(&tv.t).map(|(g, t)| g * (1.0 - t * t)).collect();
    let e = &p.emb[tv.f * d.dim..(tv.f + 1) * d.dim];
    outer_acc(&mut g.w1, d.hidden, d.dim, &da, e);
    for (gb, a) in g.b1.iter_mut().zip(&da) {
        *gb += a;
    }
    let mut de = vec![0.0; d.dim];
    matvec_t_acc(&p.w1, d.hidden, d.dim, &da, &mut de);
    let row = &mut g.emb[tv.f * d.dim..(tv.f + 1) * d.dim];
    for (r, v) in row.iter_mut().zip(&de) {
        *r += v;
    }
}

/// Token cache keyed by feature bucket.
pub struct TokCache<'a> {
    p: &'a Params,
    d: &'a Dims,
    map: BTreeMap<usize, TokVec>,
}

impl<'a> TokCache<'a> {
    pub fn new(p: &'a Params, d: &'a Dims) -> Self {
        Self { p, d, map: BTreeMap::new() }
    }

    pub fn get(&mut self, f: usize) -> &TokVec {
        let (p, d) = (self.p, self.d);
        self.map.entry(f).or_insert_with(|| token_forward(p, d, f))
    }
}

/// Late-interaction score with the argmax partner for each query feature.
pub fn coarse_forward(cache: &mut TokCache<'_>, q: &[usize], prod: &[usize]) -> (f64, Vec<usize>) {
    if q.is_empty() || prod.is_empty() {
        return (0.0, Vec::new());
    }
    let mut total = 0.0;
    let mut arg = Vec::with_capacity(q.len());
    for &qf in q {
        let qz = cache.get(qf).zh.clone();
        let mut best = f64::NEG_INFINITY;
        let mut bj = 0;
        for (j, &pf) in prod.iter().enumerate() {
            let s = dot(&qz, &cache.get(pf).zh);
            if s > best {
                best = s;
                bj = j;
            }
        }
        total += best;
        arg.push(bj);
    }
    (total / q.len() as f64, arg)
}

fn coarse_backward(cache: &mut TokCache<'_>, q: &[usize], prod: &[usize], arg: &[usize], ds: f64, dz: &mut BTreeMap<usize, Vec<f64>>) {
    if q.is_empty() || prod.is_empty() {
        return;
    }
    let scale = ds / q.len() as f64;
    for (i, &qf) in q.iter().enumerate() {
        let pf = prod[arg[i]];
        let qz = cache.get(qf).zh.clone();
        let pz = cache.get(pf).zh.clone();
        let dim = qz.len();
        let e = dz.entry(qf).or_insert_with(|| vec![0.0; dim]);
        for k in 0..dim {
            e[k] += scale * pz[k];
        }
        let e = dz.entry(pf).or_insert_with(|| vec![0.0; dim]);
        for k in 0..dim {
            e[k] += scale * qz[k];
        }
    }
}

// ---- fine head -----------------------------------------------------------

pub struct FineFwd {
    pub input: Vec<f64>,
    pub g: Vec<f64>,
    pub probs: [f64; 4],
}

pub fn fine_forward(p: &Params, d: &Dims, hq: Option<&Hidden>, hp: Option<&Hidden>, cross: &[usize]) -> FineFwd {
    let mut input = vec![0.0; d.fine_in()];
    if let (Some(a), Some(b)) = (hq, hp) {
        for k in 0..d.hidden {
            input[k] = a.h[k] * b.h[k];
        }
    }
    if !cross.is_empty() {
        let inv = 1.0 / cross.len() as f64;
        for &c in cross {
            let row = &p.xemb[c * d.cross_dim..(c + 1) * d.cross_dim];
            for k in 0..d.cross_dim {
                input[d.hidden + k] += row[k] * inv;
            }
        }
    }
    let mut g = vec![0.0; d.fine_hidden];
    matvec(&p.wg, d.fine_hidden, d.fine_in(), &input, &mut g);
    for (gi, bi) in g.iter_mut().zip(&p.bg) {
        *gi = (*gi + bi).tanh();
    }
    let mut o = [0.0; 4];
    matvec(&p.wo, 4, d.fine_hidden, &g, &mut o);
    for k in 0..4 {
        o[k] += p.bo[k];
    }
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; 4];
    let mut z = 0.0;
    for k in 0..4 {
        probs[k] = (o[k] - m).exp();
        z += probs[k];
    }
    for pk in probs.iter_mut() {
        *pk /= z;
    }
    FineFwd { input, g, probs }
}

// ---- batch objective -----------------------------------------------------

/// One featurized training sample.
#[derive(Debug, Clone)]
pub struct Example {
    pub q: Vec<usize>,
    pub p: Vec<usize>,
    pub cross: Vec<usize>,
    pub label: usize,
    /// Query group for coarse pairs.
    pub group: usize,
    /// Product identity for in-batch retrieval de-duplication.
    pub product: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub fine: Vec<usize>,
    pub retrieval: Vec<usize>,
    /// (higher label, lower label) example pairs from the same query.
    pub coarse: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub retrieval: f64,
    pub coarse: f64,
    pub fine: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { retrieval: 1.0, coarse: 1.0, fine: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub retrieval: f64,
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

pub const TEMPERATURE: f64 = 0.1;
pub const COARSE_GAMMA: f64 = 5.0;

/// Weighted multi-task loss on one batch; accumulates the exact gradient
/// into `grad` when given. Tasks with zero weight are not evaluated.
pub fn batch_objective(
    p: &Params,
    d: &Dims,
    ex: &[Example],
    batch: &Batch,
    w: &TaskWeights,
    mut grad: Option<&mut Params>,
) -> LossParts {
    let mut out = LossParts::default();

    // retrieval: in-batch InfoNCE over positive pairs
    if w.retrieval != 0.0 && batch.retrieval.len() >= 2 {
        let pairs: Vec<(RetVec, RetVec, usize)> = batch
            .retrieval
            .iter()
            .filter_map(|&i| {
                let e = &ex[i];
                Some((retrieval_forward(p, d, &e.q)?, retrieval_forward(p, d, &e.p)?, i))
            })
            .collect();
        let b = pairs.len();
        if b >= 2 {
            let mut loss = 0.0;
            let mut dlogit = vec![0.0; b * b];
            for i in 0..b {
                let logits: Vec<f64> = (0..b).map(|j| dot(&pairs[i].0.v, &pairs[j].1.v) / TEMPERATURE).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                loss += -(logits[i] - m - z.ln());
                for j in 0..b {
                    let sm = (logits[j] - m).exp() / z;
                    dlogit[i * b + j] = (sm - if i == j { 1.0 } else { 0.0 }) / b as f64;
                }
            }
            out.retrieval = loss / b as f64;
            if let Some(g) = grad.as_deref_mut() {
                let scale = w.retrieval / TEMPERATURE;
                for i in 0..b {
                    let mut dq = vec![0.0; d.ret_dim];
                    for j in 0..b {
                        let s = dlogit[i * b + j] * scale;
                        for k in 0..d.ret_dim {
                            dq[k] += s * pairs[j].1.v[k];
                        }
                    }
                    retrieval_backward(p, d, &ex[pairs[i].2].q, &pairs[i].0, &dq, g);
                }
                for j in 0..b {
                    let mut dp = vec![0.0; d.ret_dim];
                    for i in 0..b {
                        let s = dlogit[i * b + j] * scale;
                        for k in 0..d.ret_dim {
                            dp[k] += s * pairs[i].0.v[k];
                        }
                    }
                    retrieval_backward(p, d, &ex[pairs[j].2].p, &pairs[j].1, &dp, g);
                }
            }
        }
    }

    // coarse: logistic pairwise loss on late-interaction scores
    if w.coarse != 0.0 && !batch.coarse.is_empty() {
        let mut cache = TokCache::new(p, d);
        let mut dz: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let n = batch.coarse.len() as f64;
        let mut loss = 0.0;
        for &(hi, lo) in &batch.coarse {
            let (sh, ah) = coarse_forward(&mut cache, &ex[hi].q, &ex[hi].p);
            let (sl, al) = coarse_forward(&mut cache, &ex[lo].q, &ex[lo].p);
            let m = COARSE_GAMMA * (sh - sl);
            loss += softplus(-m);
            if grad.is_some() {
                // d softplus(-m)/dm = -sigmoid(-m)
                let dm = -crate::util::sigmoid(-m) * COARSE_GAMMA * w.coarse / n;
                coarse_backward(&mut cache, &ex[hi].q, &ex[hi].p, &ah, dm, &mut dz);
                coarse_backward(&mut cache, &ex[lo].q, &ex[lo].p, &al, -dm, &mut dz);
            }
        }
        out.coarse = loss / n;
        if let Some(g) = grad.as_deref_mut() {
            for (f, dzh) in &dz {
                let tv = cache.get(*f);
                token_backward(p, d, tv, dzh, g);
            }
        }
    }

    // fine: 4-way cross-entropy
    if w.fine != 0.0 && !batch.fine.is_empty() {
        let n = batch.fine.len() as f64;
        let mut loss = 0.0;
        for &i in &batch.fine {
            let e = &ex[i];
            let hq = encode_hidden(p, d, &e.q);
            let hp = encode_hidden(p, d, &e.p);
            let f = fine_forward(p, d, hq.as_ref(), hp.as_ref(), &e.cross);
            loss += -f.probs[e.label].max(1e-300).ln();
            if let Some(g) = grad.as_deref_mut() {
                let mut dout = [0.0; 4];
                for k in 0..4 {
                    dout[k] = (f.probs[k] - if k == e.label { 1.0 } else { 0.0 }) * w.fine / n;
                }
                outer_acc(&mut g.wo, 4, d.fine_hidden, &dout, &f.g);
                for k in 0..4 {
                    g.bo[k] += dout[k];
                }
                let mut dg = vec![0.0; d.fine_hidden];
                matvec_t_acc(&p.wo, 4, d.fine_hidden, &dout, &mut dg);
                let dag: Vec<f64> = dg.iter().zip(&f.g).map(|(a, b)| a * (1.0 - b * b)).collect();
                outer_acc(&mut g.wg, d.fine_hidden, d.fine_in(), &dag, &f.input);
                for (gb, a) in g.bg.iter_mut().zip(&dag) {
                    *gb += a;
                }
                let mut din = vec![0.0; d.fine_in()];
                matvec_t_acc(&p.wg, d.fine_hidden, d.fine_in(), &dag, &mut din);
                if !e.cross.is_empty() {
                    let inv = 1.0 / e.cross.len() as f64;
                    for &c in &e.cross {
                        let row = &mut g.xemb[c * d.cross_dim..(c + 1) * d.cross_dim];
                        for k in 0..d.cross_dim {
                            row[k] += din[d.hidden + k] * inv;
                        }
                    }
                }
                if let (Some(a), Some(b)) = (hq.as_ref(), hp.as_ref()) {
                    let du: Vec<f64> = (0..d.hidden).map(|k| din[k] * b.h[k]).collect();
                    let dv: Vec<f64> = (0..d.hidden).map(|k| din[k] * a.h[k]).collect();
                    backprop_hidden(p, d, &e.q, a, &du, g);
                    backprop_hidden(p, d, &e.p, b, &dv, g);
                }
            }
        }
        out.fine = loss / n;
    }

    out.total = w.retrieval * out.retrieval + w.coarse * out.coarse + w.fine * out.fine;
    out
}
