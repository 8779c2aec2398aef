//! Multinomial logistic regression over the fine head's hashed features.
//! Used only as a comparison point.

use super::net::Example;
use crate::util::rng_for;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct LogisticBaseline {
    vocab: usize,
    cross_vocab: usize,
    w: Vec<[f64; 4]>,
}

impl LogisticBaseline {
    fn feats(&self, e: &Example) -> Vec<usize> {
        let mut f: Vec<usize> = e.cross.to_vec();
        f.extend(e.q.iter().map(|&q| self.cross_vocab + q));
        f.extend(e.p.iter().map(|&p| self.cross_vocab + self.vocab + p));
        f
    }

    fn logits(&self, f: &[usize]) -> [f64; 4] {
        let mut o = [0.0; 4];
        for &i in f {
            for k in 0..4 {
                o[k] += self.w[i][k];
            }
        }
        o
    }

    pub fn train(ex: &[Example], vocab: usize, cross_vocab: usize, epochs: usize, lr: f64, seed: u64) -> Self {
        let mut m = Self { vocab, cross_vocab, w: vec![[0.0; 4]; cross_vocab + 2 * vocab] };
        let mut order: Vec<usize> = (0..ex.len()).collect();
        let mut rng = rng_for(seed, &["baseline"]);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let f = m.feats(&ex[i]);
                let o = m.logits(&f);
                let mx = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = o.iter().map(|x| (x - mx).exp()).sum();
                for k in 0..4 {
                    let p = (o[k] - mx).exp() / z;
                    let g = p - if k == ex[i].label { 1.0 } else { 0.0 };
                    for &j in &f {
                        m.w[j][k] -= lr * g / f.len() as f64 * 4.0;
                    }
                }
            }
        }
        m
    }

    pub fn predict(&self, e: &Example) -> usize {
        let o = self.logits(&self.feats(e));
        let mut best = 0;
        for k in 1..4 {
            if o[k] > o[best] {
                best = k;
            }
        }
        best
    }
}
