//! Sequential soft attention over an image's spatial feature grid.
//!
//! An LSTM controller emits one hidden state per step. Each hidden state
//! scores every grid location with an additive scorer
//! `e_l = wᵀ tanh(W_h h + W_p p_l + b)`, the scores are exp-normalized into an
//! attention map, and the grid is pooled into the map-weighted average of its
//! rows. The pooled feature of step `i` is the LSTM input of step `i + 1`;
//! step 0 reads the grid mean. Attention depends only on the image, so image
//! embeddings can be indexed ahead of any query.

use crate::error::{Error, Result};
use crate::numkernel::{softmax_slice, Bound, LstmParams, ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "attn.";
pub const LSTM_PREFIX: &str = "attn.lstm.";

/// An image as `L = grid_h × grid_w` locations of `M` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid_h: usize,
    grid_w: usize,
    values: Tensor,
}

impl FeatureGrid {
    /// Accepts `[h, w, M]` or `[L, M]` (the latter as an `L × 1` grid).
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (h, w, m) = match *t.shape() {
            [h, w, m] => (h, w, m),
            [l, m] => (l, 1, m),
            ref s => return Err(Error::dim(format!("feature grid must be [h, w, M] or [L, M], got {s:?}"))),
        };
        Self::new(h, w, t.reshape(vec![h * w, m])?)
    }

    pub fn new(grid_h: usize, grid_w: usize, values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.rows() != grid_h * grid_w {
            return Err(Error::dim(format!(
                "grid {grid_h}x{grid_w} needs {} rows, values have shape {:?}",
                grid_h * grid_w,
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::arg("feature grid contains non-finite values"));
        }
        Ok(FeatureGrid { grid_h, grid_w, values })
    }

    pub fn locations(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// `[L × M]` values.
    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Attention weights over the locations of one grid; on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        let sum: f64 = weights.data().iter().sum();
        if weights.rank() != 1 || weights.data().iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!("attention weights are not on the simplex: {weights:?}")));
        }
        Ok(AttentionMap(weights))
    }

    pub fn weights(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Attention-weighted average of grid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature(pub Tensor);

impl PooledFeature {
    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    /// Grid channels `M`.
    pub channels: usize,
    /// LSTM hidden width `d_h`.
    pub hidden: usize,
    /// Scorer width `d_a`.
    pub attn: usize,
}

impl Default for AttentionDims {
    fn default() -> Self {
        AttentionDims { channels: 512, hidden: 512, attn: 256 }
    }
}

/// Tape handles for the controller LSTM and the additive scorer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub lstm: LstmParams,
    /// `[d_a × d_h]`
    pub w_h: Var,
    /// `[d_a × M]`
    pub w_p: Var,
    /// `[d_a]`
    pub w: Var,
    /// `[d_a]`
    pub b: Var,
    pub dims: AttentionDims,
}

impl AttentionParams {
    pub const W_H: &'static str = "attn.w_h";
    pub const W_P: &'static str = "attn.w_p";
    pub const W: &'static str = "attn.w";
    pub const B: &'static str = "attn.b";

    pub fn from_bound(tape: &Tape<'_>, bound: &Bound) -> Result<Self> {
        let lstm = LstmParams::from_bound(tape, bound, LSTM_PREFIX)?;
        let w_h = bound.get(Self::W_H)?;
        let w_p = bound.get(Self::W_P)?;
        let w = bound.get(Self::W)?;
        let b = bound.get(Self::B)?;
        let da = tape.value(w).numel();
        let dims = AttentionDims { channels: lstm.input, hidden: lstm.hidden, attn: da };
        let ok = tape.value(w).shape() == [da]
            && tape.value(b).shape() == [da]
            && tape.value(w_h).shape() == [da, dims.hidden]
            && tape.value(w_p).shape() == [da, dims.channels];
        if !ok {
            return Err(Error::dim(format!(
                "attention scorer shapes inconsistent: w_h {:?}, w_p {:?}, w {:?}, b {:?} (lstm {}→{})",
                tape.value(w_h).shape(),
                tape.value(w_p).shape(),
                tape.value(w).shape(),
                tape.value(b).shape(),
                dims.channels,
                dims.hidden
            )));
        }
        Ok(AttentionParams { lstm, w_h, w_p, w, b, dims })
    }

    /// `P W_pᵀ`, shared by every attention step over the same grid.
    pub fn project_grid(&self, tape: &mut Tape<'_>, grid: Var) -> Result<Var> {
        let g = tape.value(grid);
        if g.rank() != 2 || g.cols() != self.dims.channels {
            return Err(Error::dim(format!(
                "grid of shape {:?} does not match attention input width {}",
                g.shape(),
                self.dims.channels
            )));
        }
        tape.matmul_nt(grid, self.w_p)
    }

    /// One score per location given controller state `h` and the projected grid.
    pub fn score(&self, tape: &mut Tape<'_>, h: Var, projected: Var) -> Result<Var> {
        let uh = tape.matvec(self.w_h, h)?;
        let u = tape.add(uh, self.b)?;
        let pre = tape.add_rows(projected, u)?;
        let act = tape.tanh(pre);
        tape.matvec(act, self.w)
    }

    /// Runs `n` attention steps over `grid` (`[L × M]`).
    pub fn attend(&self, tape: &mut Tape<'_>, grid: Var, n: usize) -> Result<Vec<AttentionStep>> {
        if n == 0 {
            return Err(Error::arg("attention needs at least one step"));
        }
        let projected = self.project_grid(tape, grid)?;
        let hd = self.dims.hidden;
        let mut h = tape.constant(Tensor::zeros(&[hd]));
        let mut c = tape.constant(Tensor::zeros(&[hd]));
        let mut input = tape.mean_rows(grid)?;
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let (h2, c2) = self.lstm.step(tape, input, h, c)?;
            let scores = self.score(tape, h2, projected)?;
            let weights = tape.softmax(scores)?;
            let pooled = tape.vecmat(weights, grid)?;
            steps.push(AttentionStep { weights, pooled });
            (h, c, input) = (h2, c2, pooled);
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionStep {
    pub weights: Var,
    pub pooled: Var,
}

/// Scores every location of `grid` for controller state `h`.
pub fn score_locations(h: &Tensor, grid: &FeatureGrid, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let attn = AttentionParams::from_bound(&tape, &bound)?;
    let (h, g) = (tape.constant_ref(h), tape.constant_ref(grid.values()));
    let projected = attn.project_grid(&mut tape, g)?;
    let scores = attn.score(&mut tape, h, projected)?;
    Ok(tape.value(scores).clone())
}

pub fn attention_weights(scores: &[f64]) -> Result<AttentionMap> {
    if scores.is_empty() {
        return Err(Error::dim("attention weights of an empty score vector"));
    }
    Ok(AttentionMap(Tensor::vector(softmax_slice(scores))))
}

pub fn pool(grid: &FeatureGrid, map: &AttentionMap) -> Result<PooledFeature> {
    if map.weights().len() != grid.locations() {
        return Err(Error::dim(format!(
            "attention map has {} weights for a grid of {} locations",
            map.weights().len(),
            grid.locations()
        )));
    }
    Ok(PooledFeature(crate::numkernel::vecmat(map.as_tensor(), grid.values())?))
}

/// `n` sequentially dependent attention maps and their pooled features.
pub fn attend_sequence(
    grid: &FeatureGrid,
    n: usize,
    params: &ParamStore,
) -> Result<Vec<(AttentionMap, PooledFeature)>> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let attn = AttentionParams::from_bound(&tape, &bound)?;
    let g = tape.constant_ref(grid.values());
    let steps = attn.attend(&mut tape, g, n)?;
    Ok(steps
        .into_iter()
        .map(|s| {
            (
                AttentionMap(tape.value(s.weights).clone()),
                PooledFeature(tape.value(s.pooled).clone()),
            )
        })
        .collect())
}
