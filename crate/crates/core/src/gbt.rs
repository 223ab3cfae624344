//! Second-order gradient-boosted regression trees.
//!
//! Exact greedy split search over pre-sorted feature columns, grown level by
//! level. Objectives: binary logistic, squared error and multi-class softmax
//! (one tree per class per round).
//!
//! Split gain for a candidate partition is
//! `½·[G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)] − γ` and leaves take
//! `−η·G/(H+λ)`. Ties on gain go to the lowest feature index, then the lowest
//! threshold, so training is a pure function of its inputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged feature rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Objective {
    BinaryLogistic,
    SquaredError,
    Softmax { num_class: usize },
}

const HESS_FLOOR: f64 = 1e-16;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_into(margins: &[f64], out: &mut [f64]) {
    let m = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(margins) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

impl Objective {
    pub fn n_outputs(&self) -> usize {
        match *self {
            Objective::Softmax { num_class } => num_class,
            _ => 1,
        }
    }

    /// Unweighted loss of one row at the given raw margins.
    pub fn loss(&self, margins: &[f64], y: f64) -> f64 {
        match *self {
            Objective::BinaryLogistic => {
                let m = margins[0];
                // log(1 + e^m) - y m, stable for large |m|
                let softplus = if m > 0.0 {
                    m + (-m).exp().ln_1p()
                } else {
                    m.exp().ln_1p()
                };
                softplus - y * m
            }
            Objective::SquaredError => 0.5 * (margins[0] - y).powi(2),
            Objective::Softmax { .. } => {
                let m = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + margins.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                lse - margins[y as usize]
            }
        }
    }

    /// Exact first and second derivatives of [`Objective::loss`] with respect
    /// to each margin (the Hessian diagonal for softmax).
    pub fn grad_hess(&self, margins: &[f64], y: f64, grad: &mut [f64], hess: &mut [f64]) {
        match *self {
            Objective::BinaryLogistic => {
                let p = sigmoid(margins[0]);
                grad[0] = p - y;
                hess[0] = p * (1.0 - p);
            }
            Objective::SquaredError => {
                grad[0] = margins[0] - y;
                hess[0] = 1.0;
            }
            Objective::Softmax { .. } => {
                softmax_into(margins, hess);
                for (k, g) in grad.iter_mut().enumerate() {
                    let p = hess[k];
                    *g = p - if k == y as usize { 1.0 } else { 0.0 };
                }
                hess.iter_mut().for_each(|p| *p = *p * (1.0 - *p));
            }
        }
    }

    /// Multiplier on the Hessian diagonal used for tree fitting. For softmax
    /// `2·p(1−p)` bounds the full Hessian from above, which keeps the
    /// per-class Newton steps from overshooting.
    fn hess_scale(&self) -> f64 {
        match self {
            Objective::Softmax { .. } => 2.0,
            _ => 1.0,
        }
    }

    fn transform(&self, margins: &[f64]) -> Vec<f64> {
        match self {
            Objective::BinaryLogistic => vec![sigmoid(margins[0])],
            Objective::SquaredError => vec![margins[0]],
            Objective::Softmax { .. } => {
                let mut out = vec![0.0; margins.len()];
                softmax_into(margins, &mut out);
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub objective: Objective,
    pub max_depth: usize,
    pub n_rounds: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    /// Initial prediction: a probability for logistic, a raw value otherwise.
    pub base_score: f64,
    // Accepted only at their no-op values.
    pub alpha: f64,
    pub max_delta_step: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub colsample_bylevel: f64,
}

impl GbtParams {
    pub fn new(objective: Objective, max_depth: usize, n_rounds: usize) -> Self {
        GbtParams {
            objective,
            max_depth,
            n_rounds,
            eta: 0.3,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            base_score: match objective {
                Objective::BinaryLogistic => 0.5,
                _ => 0.0,
            },
            alpha: 0.0,
            max_delta_step: 0.0,
            subsample: 1.0,
            colsample_bytree: 1.0,
            colsample_bylevel: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if self.n_rounds < 1 {
            return bad("n_rounds must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda, gamma and min_child_weight must be >= 0");
        }
        if let Objective::Softmax { num_class } = self.objective {
            if num_class < 2 {
                return bad("softmax needs at least 2 classes");
            }
        }
        if let Objective::BinaryLogistic = self.objective {
            if !(self.base_score > 0.0 && self.base_score < 1.0) {
                return bad("logistic base_score must lie in (0, 1)");
            }
        }
        if self.alpha != 0.0 || self.max_delta_step != 0.0 {
            return bad("alpha and max_delta_step are not supported");
        }
        if self.subsample != 1.0 || self.colsample_bytree != 1.0 || self.colsample_bylevel != 1.0 {
            return bad("row/column subsampling is not supported");
        }
        Ok(())
    }

    fn base_margin(&self) -> f64 {
        match self.objective {
            Objective::BinaryLogistic => (self.base_score / (1.0 - self.base_score)).ln(),
            _ => self.base_score,
        }
    }
}

/// `½·[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)] − γ`
pub fn split_gain(g_l: f64, h_l: f64, g_r: f64, h_r: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(g_l, h_l) + score(g_r, h_r) - score(g_l + g_r, h_l + h_r)) - gamma
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Output (class) this tree contributes to.
    pub output: usize,
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature] < threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub params: GbtParams,
    pub n_features: usize,
    pub seed: u64,
    /// Round-major, class-minor for softmax.
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn n_rounds_trained(&self) -> usize {
        self.trees.len() / self.params.objective.n_outputs()
    }

    /// Raw margins of one row.
    pub fn margins(&self, row: &[f64]) -> Vec<f64> {
        let k = self.params.objective.n_outputs();
        let mut m = vec![self.params.base_margin(); k];
        for t in &self.trees {
            m[t.output] += t.predict(row);
        }
        m
    }

    /// Probabilities (logistic: one value; softmax: one per class) or the
    /// regression value.
    pub fn predict_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.n_features,
                row.len()
            )));
        }
        Ok(self.params.objective.transform(&self.margins(row)))
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        if x.cols() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.cols()
            )));
        }
        Ok((0..x.rows())
            .map(|r| self.params.objective.transform(&self.margins(x.row(r))))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Trained model plus the weighted mean loss after each round.
pub struct TrainOutcome {
    pub model: GbtModel,
    pub loss_history: Vec<f64>,
}

pub fn train_gbt(
    x: &FeatureMatrix,
    y: &[f64],
    w: &[f64],
    params: &GbtParams,
    seed: u64,
) -> Result<GbtModel> {
    Ok(train_gbt_traced(x, y, w, params, seed)?.model)
}

fn check_inputs(x: &FeatureMatrix, y: &[f64], w: &[f64], params: &GbtParams) -> Result<()> {
    params.validate()?;
    if x.rows() == 0 {
        return Err(Error::Degenerate("empty training data".into()));
    }
    if y.len() != x.rows() || w.len() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows, {} labels, {} weights",
            x.rows(),
            y.len(),
            w.len()
        )));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(
            "non-finite feature value (missing values unsupported)".into(),
        ));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || !w.iter().any(|&v| v > 0.0) {
        return Err(Error::Degenerate(
            "weights must be finite, >= 0 and not all zero".into(),
        ));
    }
    match params.objective {
        Objective::BinaryLogistic => {
            if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Degenerate(
                    "logistic labels must lie in [0, 1]".into(),
                ));
            }
        }
        Objective::SquaredError => {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate("non-finite regression target".into()));
            }
        }
        Objective::Softmax { num_class } => {
            if y.iter()
                .any(|&v| v < 0.0 || v.fract() != 0.0 || v as usize >= num_class)
            {
                return Err(Error::Degenerate(format!(
                    "softmax labels must be integers in 0..{num_class}"
                )));
            }
            let first = y[0];
            if y.iter().zip(w).all(|(&v, &wt)| v == first || wt == 0.0) {
                return Err(Error::Degenerate(
                    "softmax needs at least two classes".into(),
                ));
            }
        }
    }
    Ok(())
}

pub fn train_gbt_traced(
    x: &FeatureMatrix,
    y: &[f64],
    w: &[f64],
    params: &GbtParams,
    seed: u64,
) -> Result<TrainOutcome> {
    check_inputs(x, y, w, params)?;
    let n = x.rows();
    let k = params.objective.n_outputs();
    let sorted = presort(x);
    let mut margins = vec![params.base_margin(); n * k];
    let mut grad = vec![0.0; n * k];
    let mut hess = vec![0.0; n * k];
    let mut trees = Vec::with_capacity(params.n_rounds * k);
    let mut history = Vec::with_capacity(params.n_rounds);
    let scale = params.objective.hess_scale();
    let wsum: f64 = w.iter().sum();

    for _ in 0..params.n_rounds {
        for r in 0..n {
            let (g, h) = (&mut grad[r * k..(r + 1) * k], &mut hess[r * k..(r + 1) * k]);
            params
                .objective
                .grad_hess(&margins[r * k..(r + 1) * k], y[r], g, h);
            for c in 0..k {
                g[c] *= w[r];
                h[c] = (h[c] * scale).max(HESS_FLOOR) * w[r];
            }
        }
        let mut round_trees = Vec::with_capacity(k);
        for c in 0..k {
            let g: Vec<f64> = (0..n).map(|r| grad[r * k + c]).collect();
            let h: Vec<f64> = (0..n).map(|r| hess[r * k + c]).collect();
            let (tree, row_values) = grow_tree(x, &sorted, &g, &h, params, c);
            round_trees.push((tree, row_values));
        }
        for (c, (tree, row_values)) in round_trees.into_iter().enumerate() {
            for r in 0..n {
                margins[r * k + c] += row_values[r];
            }
            trees.push(tree);
        }
        let loss: f64 = (0..n)
            .map(|r| w[r] * params.objective.loss(&margins[r * k..(r + 1) * k], y[r]))
            .sum();
        history.push(loss / wsum);
    }
    Ok(TrainOutcome {
        model: GbtModel {
            params: params.clone(),
            n_features: x.cols(),
            seed,
            trees,
        },
        loss_history: history,
    })
}

/// Row indices sorted by value (then row) per feature column.
fn presort(x: &FeatureMatrix) -> Vec<Vec<u32>> {
    (0..x.cols())
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.rows() as u32).collect();
            idx.sort_by(|&a, &b| {
                x.get(a as usize, f)
                    .partial_cmp(&x.get(b as usize, f))
                    .expect("finite")
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

const NO_NODE: u32 = u32::MAX;

// Grows one tree; returns it together with each row's leaf value.
fn grow_tree(
    x: &FeatureMatrix,
    sorted: &[Vec<u32>],
    g: &[f64],
    h: &[f64],
    params: &GbtParams,
    output: usize,
) -> (Tree, Vec<f64>) {
    let n = x.rows();
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
    let mut sums: Vec<(f64, f64)> = vec![(g.iter().sum(), h.iter().sum())];
    // Node each row currently sits in, or NO_NODE once its node is final.
    let mut node_of_row: Vec<u32> = vec![0; n];
    let mut final_node: Vec<u32> = vec![0; n];
    let mut frontier: Vec<usize> = vec![0];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        // slot of each frontier node
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &nid) in frontier.iter().enumerate() {
            slot[nid] = s;
        }
        let per_feature: Vec<Vec<Option<Candidate>>> = (0..x.cols())
            .into_par_iter()
            .map(|f| {
                let m = frontier.len();
                let mut acc = vec![(0.0f64, 0.0f64); m];
                let mut last: Vec<Option<f64>> = vec![None; m];
                let mut best: Vec<Option<Candidate>> = vec![None; m];
                for &r in &sorted[f] {
                    let r = r as usize;
                    let nid = node_of_row[r];
                    if nid == NO_NODE {
                        continue;
                    }
                    let s = slot[nid as usize];
                    if s == usize::MAX {
                        continue;
                    }
                    let v = x.get(r, f);
                    if let Some(prev) = last[s] {
                        if v > prev {
                            let (gl, hl) = acc[s];
                            let (gt, ht) = sums[frontier[s]];
                            let (gr, hr) = (gt - gl, ht - hl);
                            if hl >= params.min_child_weight && hr >= params.min_child_weight {
                                let gain = split_gain(gl, hl, gr, hr, params.lambda, params.gamma);
                                if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                                    let mut thr = prev + (v - prev) / 2.0;
                                    if thr <= prev {
                                        thr = v;
                                    }
                                    best[s] = Some(Candidate {
                                        gain,
                                        feature: f,
                                        threshold: thr,
                                    });
                                }
                            }
                        }
                    }
                    acc[s].0 += g[r];
                    acc[s].1 += h[r];
                    last[s] = Some(v);
                }
                best
            })
            .collect();

        let mut chosen: Vec<Option<Candidate>> = vec![None; frontier.len()];
        for feature_best in &per_feature {
            for (s, cand) in feature_best.iter().enumerate() {
                if let Some(c) = cand {
                    if chosen[s].is_none_or(|b| c.gain > b.gain) {
                        chosen[s] = Some(*c);
                    }
                }
            }
        }

        let mut children = vec![(0usize, 0usize); frontier.len()];
        let mut next = Vec::new();
        for (s, &nid) in frontier.iter().enumerate() {
            if let Some(c) = chosen[s] {
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                sums.push((0.0, 0.0));
                sums.push((0.0, 0.0));
                nodes[nid] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
                children[s] = (left, right);
                next.push(left);
                next.push(right);
            }
        }
        for r in 0..n {
            let nid = node_of_row[r];
            if nid == NO_NODE {
                continue;
            }
            let s = slot[nid as usize];
            match chosen[s] {
                Some(c) => {
                    let child = if x.get(r, c.feature) < c.threshold {
                        children[s].0
                    } else {
                        children[s].1
                    };
                    node_of_row[r] = child as u32;
                    sums[child].0 += g[r];
                    sums[child].1 += h[r];
                }
                None => {
                    final_node[r] = nid;
                    node_of_row[r] = NO_NODE;
                }
            }
        }
        frontier = next;
    }
    for r in 0..n {
        if node_of_row[r] != NO_NODE {
            final_node[r] = node_of_row[r];
        }
    }
    for (nid, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { value } = node {
            let (gs, hs) = sums[nid];
            *value = -params.eta * gs / (hs + params.lambda);
        }
    }
    let row_values = final_node
        .iter()
        .map(|&nid| match nodes[nid as usize] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("rows end in leaves"),
        })
        .collect();
    (Tree { output, nodes }, row_values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_gain_reference() {
        assert_eq!(split_gain(-2.0, 1.0, 2.0, 1.0, 1.0, 0.0), 2.0);
        assert_eq!(split_gain(0.0, 3.0, 0.0, 2.0, 1.0, 0.7), -0.7);
        let a = split_gain(-1.3, 2.0, 0.4, 1.5, 1.0, 0.1);
        let b = split_gain(1.3, 2.0, -0.4, 1.5, 1.0, 0.1);
        assert!((a - b).abs() < 1e-15);
    }

    fn line_data() -> (FeatureMatrix, Vec<f64>) {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        (FeatureMatrix::new(50, 1, xs.clone()).unwrap(), xs)
    }

    #[test]
    fn memorizes_identity_with_squared_error() {
        let (x, y) = line_data();
        let p = GbtParams::new(Objective::SquaredError, 2, 200);
        let m = train_gbt(&x, &y, &[1.0; 50], &p, 0).unwrap();
        let pred = m.predict(&x).unwrap();
        let mse: f64 = pred
            .iter()
            .zip(&y)
            .map(|(p, t)| (p[0] - t).powi(2))
            .sum::<f64>()
            / 50.0;
        assert!(mse < 1e-3, "mse {mse}");
        assert!((pred[10][0] - y[10]).abs() < 0.05);
        assert!(m.trees.iter().all(|t| t.depth() <= 2));
    }

    #[test]
    fn zero_round_logistic_predicts_base() {
        let m = GbtModel {
            params: GbtParams::new(Objective::BinaryLogistic, 3, 1),
            n_features: 2,
            seed: 0,
            trees: vec![],
        };
        assert!((m.predict_row(&[1.0, -3.0]).unwrap()[0] - 0.5).abs() < 1e-15);
        assert!(m.predict_row(&[1.0]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = FeatureMatrix::new(6, 1, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let y = [0., 0., 1., 1., 2., 2.];
        let m = train_gbt(
            &x,
            &y,
            &[1.0; 6],
            &GbtParams::new(Objective::Softmax { num_class: 3 }, 2, 10),
            1,
        )
        .unwrap();
        for row in m.predict(&x).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_softmax_and_empty_data_rejected() {
        let x = FeatureMatrix::new(3, 1, vec![0., 1., 2.]).unwrap();
        let p = GbtParams::new(Objective::Softmax { num_class: 3 }, 2, 3);
        assert!(train_gbt(&x, &[1., 1., 1.], &[1.0; 3], &p, 0).is_err());
        let empty = FeatureMatrix::new(0, 1, vec![]).unwrap();
        assert!(train_gbt(&empty, &[], &[], &p, 0).is_err());
    }

    #[test]
    fn rejects_unsupported_settings_and_nan() {
        let (x, y) = line_data();
        let mut p = GbtParams::new(Objective::SquaredError, 2, 2);
        p.subsample = 0.5;
        assert!(train_gbt(&x, &y, &[1.0; 50], &p, 0).is_err());
        let xn = FeatureMatrix::new(2, 1, vec![f64::NAN, 1.0]).unwrap();
        let p = GbtParams::new(Objective::SquaredError, 2, 2);
        assert!(train_gbt(&xn, &[0.0, 1.0], &[1.0; 2], &p, 0).is_err());
    }

    #[test]
    fn doubling_weights_is_invariant_without_regularization() {
        let x = FeatureMatrix::new(
            8,
            2,
            vec![
                0., 3., 1., 2., 2., 2., 3., 0., 4., 1., 5., 5., 6., 4., 7., 1.,
            ],
        )
        .unwrap();
        let y = [0., 0., 1., 0., 1., 1., 1., 0.];
        let mut p = GbtParams::new(Objective::BinaryLogistic, 3, 20);
        p.lambda = 0.0;
        p.min_child_weight = 0.0;
        let w1 = [1.0, 0.5, 2.0, 1.0, 1.5, 1.0, 0.25, 1.0];
        let w2: Vec<f64> = w1.iter().map(|v| v * 2.0).collect();
        let a = train_gbt(&x, &y, &w1, &p, 3).unwrap();
        let b = train_gbt(&x, &y, &w2, &p, 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = line_data();
        let m = train_gbt(
            &x,
            &y,
            &[1.0; 50],
            &GbtParams::new(Objective::SquaredError, 3, 5),
            9,
        )
        .unwrap();
        let s = m.to_json().unwrap();
        assert_eq!(GbtModel::from_json(&s).unwrap(), m);
    }
}
