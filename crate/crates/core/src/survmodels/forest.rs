use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, SurvivalData, SurvivalFunction, SurvivalModel, TrainingSummary};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, Rng as SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Nelson–Aalen increments keyed by knot index.
    Leaf {
        steps: Vec<(u32, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf(&self, x: &[f64]) -> &[(u32, f64)] {
        let mut k = 0usize;
        loop {
            match &self.nodes[k] {
                Node::Split { feature, threshold, left, right } => {
                    k = if x[*feature as usize] <= *threshold { *left as usize } else { *right as usize };
                }
                Node::Leaf { steps } => return steps,
            }
        }
    }
}

/// Random survival forest with log-rank splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    n_features: usize,
    /// Time knots (ascending) on which tree hazards are tabulated.
    knots: Vec<f64>,
    trees: Vec<Tree>,
    training: TrainingSummary,
}

struct Params {
    min_leaf: usize,
    mtry: usize,
    n_split: usize,
}

struct Builder<'a> {
    data: &'a SurvivalData,
    knots: &'a [f64],
    params: &'a Params,
}

impl Builder<'_> {
    fn x(&self, i: u32, j: usize) -> f64 {
        self.data.x[i as usize * self.data.n_features + j]
    }

    fn time(&self, i: u32) -> f64 {
        self.data.time[i as usize]
    }

    /// Nelson–Aalen increments of rows `idx` (sorted by ascending time).
    fn leaf_steps(&self, idx: &[u32]) -> Vec<(u32, f64)> {
        let n = idx.len();
        let mut steps: Vec<(u32, f64)> = Vec::new();
        let mut i = 0;
        while i < n {
            let t = self.time(idx[i]);
            let mut j = i;
            let mut d = 0usize;
            while j < n && self.time(idx[j]) == t {
                d += usize::from(self.data.status[idx[j] as usize]);
                j += 1;
            }
            if d > 0 {
                let at_risk = (n - i) as f64;
                let k = self.knots.partition_point(|&g| g < t).min(self.knots.len() - 1) as u32;
                match steps.last_mut() {
                    Some(last) if last.0 == k => last.1 += d as f64 / at_risk,
                    _ => steps.push((k, d as f64 / at_risk)),
                }
            }
            i = j;
        }
        steps
    }

    /// Absolute standardized log-rank statistic of the split `x <= c` over a
    /// node whose rows have column values `xs`, event indicators `ev` and
    /// ascending tie groups `groups` (`(start, end, events)`). `None` if a
    /// child would fall below `min_leaf`.
    fn log_rank(&self, xs: &[f64], ev: &[f64], groups: &[(usize, usize, f64)], c: f64) -> Option<f64> {
        let n = xs.len();
        let (mut y, mut yl) = (0.0f64, 0.0f64);
        let (mut num, mut var) = (0.0, 0.0);
        for &(start, end, d) in groups.iter().rev() {
            let mut dl = 0.0;
            // branch-free: the split side is unpredictable
            for (&x, &e) in xs[start..end].iter().zip(&ev[start..end]) {
                let left = f64::from(u8::from(x <= c));
                yl += left;
                dl += left * e;
            }
            y += (end - start) as f64;
            if d > 0.0 && y > 1.0 {
                let frac = yl / y;
                num += dl - frac * d;
                var += frac * (1.0 - frac) * (y - d) / (y - 1.0) * d;
            }
        }
        let nl = yl as usize;
        if nl < self.params.min_leaf || n - nl < self.params.min_leaf || var <= 0.0 {
            return None;
        }
        Some(num.abs() / var.sqrt())
    }

    fn grow(&self, idx: Vec<u32>, nodes: &mut Vec<Node>, rng: &mut SeededRng) -> u32 {
        let id = nodes.len() as u32;
        nodes.push(Node::Leaf { steps: Vec::new() });
        let n = idx.len();
        let has_event = idx.iter().any(|&i| self.data.status[i as usize]);
        let mut best: Option<(f64, usize, f64)> = None;
        if has_event && n >= 2 * self.params.min_leaf {
            let p = self.data.n_features;
            let ev: Vec<f64> = idx.iter().map(|&i| f64::from(u8::from(self.data.status[i as usize]))).collect();
            let mut groups = Vec::new();
            let mut i = 0;
            while i < n {
                let t = self.time(idx[i]);
                let mut k = i;
                let mut d = 0.0;
                while k < n && self.time(idx[k]) == t {
                    d += ev[k];
                    k += 1;
                }
                groups.push((i, k, d));
                i = k;
            }
            let mut features: Vec<usize> = (0..p).collect();
            let (chosen, _) = features.partial_shuffle(rng, self.params.mtry.min(p));
            let mut xs = vec![0.0; n];
            for &j in chosen.iter() {
                for (v, &r) in xs.iter_mut().zip(&idx) {
                    *v = self.x(r, j);
                }
                let mut cands: Vec<f64> = if self.params.n_split == 0 {
                    xs.clone()
                } else {
                    (0..self.params.n_split).map(|_| xs[rng.gen_range(0..n)]).collect()
                };
                cands.sort_by(f64::total_cmp);
                cands.dedup();
                for &c in &cands {
                    if let Some(stat) = self.log_rank(&xs, &ev, &groups, c) {
                        if best.is_none_or(|b| stat > b.0) {
                            best = Some((stat, j, c));
                        }
                    }
                }
            }
        }
        match best {
            Some((stat, j, c)) if stat > 0.0 => {
                let (l, r): (Vec<u32>, Vec<u32>) = idx.iter().partition(|&&i| self.x(i, j) <= c);
                let left = self.grow(l, nodes, rng);
                let right = self.grow(r, nodes, rng);
                nodes[id as usize] = Node::Split { feature: j as u32, threshold: c, left, right };
            }
            _ => {
                nodes[id as usize] = Node::Leaf { steps: self.leaf_steps(&idx) };
            }
        }
        id
    }
}

/// Lexicographic order on (time, status, features): makes fitting independent
/// of the input row order.
fn canonical(data: &SurvivalData) -> SurvivalData {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| {
        data.time[a].total_cmp(&data.time[b]).then(data.status[a].cmp(&data.status[b])).then_with(|| {
            data.row(a)
                .iter()
                .zip(data.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut x = Vec::with_capacity(data.x.len());
    for &i in &idx {
        x.extend_from_slice(data.row(i));
    }
    SurvivalData {
        n_features: data.n_features,
        x,
        time: idx.iter().map(|&i| data.time[i]).collect(),
        status: idx.iter().map(|&i| data.status[i]).collect(),
    }
}

fn knot_grid(data: &SurvivalData, max_knots: usize) -> Vec<f64> {
    let mut ev: Vec<f64> = data.time.iter().zip(&data.status).filter(|(_, &s)| s).map(|(&t, _)| t).collect();
    ev.sort_by(f64::total_cmp);
    ev.dedup();
    if ev.len() <= max_knots {
        return ev;
    }
    let u = ev.len() - 1;
    let mut knots: Vec<f64> =
        (0..max_knots).map(|k| ev[((k * u) as f64 / (max_knots - 1) as f64).round() as usize]).collect();
    knots.dedup();
    knots
}

pub fn fit_survival_forest(data: &SurvivalData, spec: &ModelSpec, seed: u64) -> Result<ForestModel> {
    let ModelSpec::SurvivalForest { n_trees, min_leaf, mtry, n_split, bootstrap, max_knots } = spec else {
        return Err(Error::Configuration("not a survival forest spec".into()));
    };
    if data.n_events() == 0 {
        return Err(Error::UnfitModel("no observed events".into()));
    }
    let data = canonical(data);
    let p = data.n_features;
    let params = Params {
        min_leaf: *min_leaf,
        mtry: mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).max(1),
        n_split: *n_split,
    };
    let knots = knot_grid(&data, *max_knots);
    let builder = Builder { data: &data, knots: &knots, params: &params };
    let n = data.len();

    let trees = (0..*n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(seed, t as u64));
            let mut idx: Vec<u32> =
                if *bootstrap { (0..n).map(|_| rng.gen_range(0..n) as u32).collect() } else { (0..n as u32).collect() };
            // canonical data is time-sorted, so index order is time order
            idx.sort_unstable();
            let mut nodes = Vec::new();
            builder.grow(idx, &mut nodes, &mut rng);
            Tree { nodes }
        })
        .collect();

    Ok(ForestModel { n_features: p, knots, trees, training: TrainingSummary::of(&data) })
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Ensemble cumulative hazard at each knot.
    pub fn cumulative_hazard(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.knots.len()];
        for tree in &self.trees {
            for &(k, inc) in tree.leaf(x) {
                acc[k as usize] += inc;
            }
        }
        let scale = 1.0 / self.trees.len() as f64;
        let mut run = 0.0;
        for a in acc.iter_mut() {
            run += *a;
            *a = run * scale;
        }
        acc
    }
}

impl SurvivalModel for ForestModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_survival(&self, x: &[f64]) -> Result<SurvivalFunction> {
        self.check_dim(x)?;
        let h = self.cumulative_hazard(x);
        let mut times = Vec::with_capacity(self.knots.len() + 2);
        let mut probs = Vec::with_capacity(self.knots.len() + 2);
        if self.knots.first().is_none_or(|&t| t > 0.0) {
            times.push(0.0);
            probs.push(1.0);
        }
        for (&t, &hk) in self.knots.iter().zip(&h) {
            times.push(t);
            probs.push((-hk).exp());
        }
        let tau = self.training.tau;
        if tau > *times.last().expect("non-empty") {
            times.push(tau);
            probs.push(*probs.last().expect("non-empty"));
        }
        Ok(SurvivalFunction::from_parts_unchecked(times, probs))
    }

    fn training(&self) -> &TrainingSummary {
        &self.training
    }
}
