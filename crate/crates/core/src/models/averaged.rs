//! Weight averaging for perceptron training.
//!
//! Uses the running-sum trick: alongside the live weights `w` keep
//! `u = Σ c·Δ` where `c` counts examples seen, so the averaged weights are
//! `w − u / c` without touching every parameter on every step.

use std::collections::HashMap;

/// Sparse feature weights with `n` outputs per feature.
pub(crate) struct Averaged {
    n: usize,
    w: HashMap<String, Vec<f64>>,
    u: HashMap<String, Vec<f64>>,
    c: f64,
}

impl Averaged {
    pub(crate) fn new(n: usize) -> Self {
        Averaged {
            n,
            w: HashMap::new(),
            u: HashMap::new(),
            c: 1.0,
        }
    }

    pub(crate) fn counter(&self) -> f64 {
        self.c
    }

    pub(crate) fn current(&self) -> &HashMap<String, Vec<f64>> {
        &self.w
    }

    pub(crate) fn update(&mut self, id: &str, k: usize, delta: f64) {
        let n = self.n;
        if !self.w.contains_key(id) {
            self.w.insert(id.to_string(), vec![0.0; n]);
            self.u.insert(id.to_string(), vec![0.0; n]);
        }
        self.w.get_mut(id).expect("inserted")[k] += delta;
        self.u.get_mut(id).expect("inserted")[k] += self.c * delta;
    }

    pub(crate) fn tick(&mut self) {
        self.c += 1.0;
    }

    pub(crate) fn finish(self) -> HashMap<String, Vec<f64>> {
        let c = self.c;
        let u = self.u;
        self.w
            .into_iter()
            .filter_map(|(id, w)| {
                let avg: Vec<f64> = w.iter().zip(&u[&id]).map(|(w, u)| w - u / c).collect();
                avg.iter().any(|v| *v != 0.0).then_some((id, avg))
            })
            .collect()
    }
}

/// Dense weights averaged against an external counter.
pub(crate) struct DenseAveraged {
    w: Vec<f64>,
    u: Vec<f64>,
}

impl DenseAveraged {
    pub(crate) fn new(len: usize) -> Self {
        DenseAveraged {
            w: vec![0.0; len],
            u: vec![0.0; len],
        }
    }

    pub(crate) fn current(&self) -> &[f64] {
        &self.w
    }

    pub(crate) fn update(&mut self, k: usize, delta: f64, c: f64) {
        self.w[k] += delta;
        self.u[k] += c * delta;
    }

    pub(crate) fn finish(self, c: f64) -> Vec<f64> {
        self.w.iter().zip(&self.u).map(|(w, u)| w - u / c).collect()
    }
}
