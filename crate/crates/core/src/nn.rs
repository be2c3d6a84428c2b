//! Layer-normalized LSTM cells, the dual-layer encoder, embeddings, the MLP
//! attention scorer and dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LSTM_INIT_RANGE: f64 = 0.08;
pub const DENSE_INIT_SIGMA: f64 = 0.01;
pub const FORGET_BIAS: f64 = 1.0;

/// State threaded through one forward pass: the graph being built, read-only
/// parameters and the dropout mode.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub params: &'a ParamStore,
    pub dropout_rate: f64,
    /// Present only in training mode.
    pub dropout_rng: Option<StreamRng>,
}

impl<'a> Ctx<'a> {
    pub fn inference(params: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), params, dropout_rate: 0.0, dropout_rng: None }
    }

    pub fn training(params: &'a ParamStore, dropout_rate: f64, rng: StreamRng) -> Self {
        Self { graph: Graph::new(), params, dropout_rate, dropout_rng: Some(rng) }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(id, self.params.get(id))
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Dropout at the context's rate and mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.dropout_rate;
        match self.dropout_rng.as_mut() {
            Some(rng) => dropout(&mut self.graph, x, rate, true, rng),
            None => Ok(x),
        }
    }
}

/// Inverted dropout: in training, keeps each element with probability
/// `1 - rate` and scales kept elements by `1 / (1 - rate)`; identity otherwise.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let m = g.constant(Tensor::new(&shape, mask)?);
    g.mul(x, m)
}

/// Hidden and cell state of one LSTM layer, each `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

/// States of both layers of a dual-layer LSTM.
#[derive(Clone, Copy, Debug)]
pub struct DualState {
    pub lower: LayerState,
    pub upper: LayerState,
}

impl DualState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        let z = g.constant(Tensor::zeros(&[1, hidden]));
        let s = LayerState { h: z, c: z };
        Self { lower: s, upper: s }
    }

    /// `[h_lower; h_upper]`, the `[1, 2D]` combined state.
    pub fn combined(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.lower.h, self.upper.h], 1)
    }

    /// The state whose hidden halves are taken from a combined `[1, 2D]`
    /// vector and whose cells are kept.
    pub fn with_combined(&self, g: &mut Graph, combined: Var, hidden: usize) -> Result<Self> {
        let lower = g.slice(combined, 1, 0, hidden)?;
        let upper = g.slice(combined, 1, hidden, hidden)?;
        Ok(Self { lower: LayerState { h: lower, c: self.lower.c }, upper: LayerState { h: upper, c: self.upper.c } })
    }
}

/// One LSTM layer with layer normalization on the gate pre-activations
/// (per gate block) and on the cell state before the output `tanh`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_input: ParamId,
    pub w_state: ParamId,
    pub gate_gain: ParamId,
    pub gate_bias: ParamId,
    pub cell_gain: ParamId,
    pub cell_bias: ParamId,
}

// Gate block order in the stacked pre-activation.
const GATE_INPUT: usize = 0;
const GATE_FORGET: usize = 1;
const GATE_OUTPUT: usize = 2;
const GATE_CANDIDATE: usize = 3;

impl LstmCell {
    pub fn declare(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let u = Init::Uniform(LSTM_INIT_RANGE);
        let w_input = store.declare(&format!("{prefix}.w_input"), &[input_dim, 4 * hidden], u, rng);
        let w_state = store.declare(&format!("{prefix}.w_state"), &[hidden, 4 * hidden], u, rng);
        let gate_gain = store.declare(&format!("{prefix}.gate_gain"), &[4, hidden], Init::Constant(1.0), rng);
        let gate_bias = store.declare(&format!("{prefix}.gate_bias"), &[4, hidden], Init::Constant(0.0), rng);
        for v in &mut store.get_mut(gate_bias).data_mut()[GATE_FORGET * hidden..(GATE_FORGET + 1) * hidden] {
            *v = FORGET_BIAS;
        }
        let cell_gain = store.declare(&format!("{prefix}.cell_gain"), &[hidden], Init::Constant(1.0), rng);
        let cell_bias = store.declare(&format!("{prefix}.cell_bias"), &[hidden], Init::Constant(0.0), rng);
        Self { input_dim, hidden, w_input, w_state, gate_gain, gate_bias, cell_gain, cell_bias }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.w_input, self.w_state, self.gate_gain, self.gate_bias, self.cell_gain, self.cell_bias]
    }

    /// One recurrent step; `x` is `[1, input_dim]`.
    pub fn step(&self, ctx: &mut Ctx<'_>, x: Var, state: LayerState) -> Result<LayerState> {
        let xs = ctx.graph.shape(x);
        if xs != [1, self.input_dim] {
            return Err(Error::ShapeMismatch {
                primitive: "lstm_step",
                lhs: xs.to_vec(),
                rhs: vec![1, self.input_dim],
            });
        }
        let d = self.hidden;
        let w_input = ctx.param(self.w_input);
        let w_state = ctx.param(self.w_state);
        let gate_gain = ctx.param(self.gate_gain);
        let gate_bias = ctx.param(self.gate_bias);
        let cell_gain = ctx.param(self.cell_gain);
        let cell_bias = ctx.param(self.cell_bias);
        let g = &mut ctx.graph;

        let from_input = g.matmul(x, w_input)?;
        let from_state = g.matmul(state.h, w_state)?;
        let pre = g.add(from_input, from_state)?;
        let blocks = g.reshape(pre, &[4, d])?;
        let blocks = g.layer_norm(blocks, gate_gain, gate_bias, LAYER_NORM_EPS)?;
        let block = |g: &mut Graph, k: usize| -> Result<Var> {
            let b = g.slice(blocks, 0, k, 1)?;
            g.reshape(b, &[1, d])
        };
        let i_pre = block(g, GATE_INPUT)?;
        let f_pre = block(g, GATE_FORGET)?;
        let o_pre = block(g, GATE_OUTPUT)?;
        let c_pre = block(g, GATE_CANDIDATE)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let o = g.sigmoid(o_pre)?;
        let cand = g.tanh(c_pre)?;

        let kept = g.mul(f, state.c)?;
        let written = g.mul(i, cand)?;
        let c = g.add(kept, written)?;
        let c_norm = g.layer_norm(c, cell_gain, cell_bias, LAYER_NORM_EPS)?;
        let c_act = g.tanh(c_norm)?;
        let h = g.mul(o, c_act)?;
        Ok(LayerState { h, c })
    }
}

/// Two stacked [`LstmCell`]s sharing the hidden size.
#[derive(Clone, Debug)]
pub struct DualLstm {
    pub lower: LstmCell,
    pub upper: LstmCell,
}

/// Output of [`DualLstm::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Combined `[1, 2D]` state per step, after output dropout.
    pub states: Vec<Var>,
    /// Recurrent state after the last step, for hand-off to another encoder.
    pub last: DualState,
}

impl DualLstm {
    pub fn declare(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let lower = LstmCell::declare(store, &format!("{prefix}.lower"), input_dim, hidden, rng);
        let upper = LstmCell::declare(store, &format!("{prefix}.upper"), hidden, hidden, rng);
        Self { lower, upper }
    }

    pub fn hidden(&self) -> usize {
        self.lower.hidden
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.lower.param_ids().into_iter().chain(self.upper.param_ids()).collect()
    }

    pub fn step(&self, ctx: &mut Ctx<'_>, x: Var, state: DualState) -> Result<(DualState, Var)> {
        let lower = self.lower.step(ctx, x, state.lower)?;
        let lower_out = ctx.dropout(lower.h)?;
        let upper = self.upper.step(ctx, lower_out, state.upper)?;
        let upper_out = ctx.dropout(upper.h)?;
        let combined = ctx.graph.concat(&[lower_out, upper_out], 1)?;
        Ok((DualState { lower, upper }, combined))
    }

    pub fn encode(&self, ctx: &mut Ctx<'_>, seq: &[Var], init: DualState) -> Result<Encoded> {
        if seq.is_empty() {
            return Err(Error::Invalid("cannot encode an empty sequence".into()));
        }
        let mut state = init;
        let mut states = Vec::with_capacity(seq.len());
        for &x in seq {
            let (next, combined) = self.step(ctx, x, state)?;
            state = next;
            states.push(combined);
        }
        Ok(Encoded { states, last: state })
    }
}

/// Token embedding table, one `[1, dim]` row per vocabulary entry.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn declare(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let table = store.declare(name, &[rows, dim], Init::Normal(DENSE_INIT_SIGMA), rng);
        Self { table, rows, dim }
    }

    pub fn lookup(&self, ctx: &mut Ctx<'_>, row: usize) -> Result<Var> {
        if row >= self.rows {
            return Err(Error::Invalid(format!("embedding row {row} out of range ({} rows)", self.rows)));
        }
        let t = ctx.param(self.table);
        ctx.graph.slice(t, 0, row, 1)
    }

    /// Overwrites rows from pretrained vectors; returns how many rows were set.
    pub fn import<'v>(
        &self,
        store: &mut ParamStore,
        rows: impl IntoIterator<Item = (usize, &'v [f64])>,
    ) -> Result<usize> {
        let dim = self.dim;
        let table = store.get_mut(self.table);
        let mut n = 0;
        for (row, v) in rows {
            if v.len() != dim {
                return Err(Error::Invalid(format!("embedding vector has {} dims, table has {dim}", v.len())));
            }
            for (dst, &src) in table.data_mut()[row * dim..(row + 1) * dim].iter_mut().zip(v) {
                *dst = src as f32 as f64;
            }
            n += 1;
        }
        Ok(n)
    }
}

/// `x · W + b` for a `[1, in]` row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn declare(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.declare(&format!("{prefix}.weight"), &[input, output], Init::Normal(DENSE_INIT_SIGMA), rng);
        let bias = bias.then(|| store.declare(&format!("{prefix}.bias"), &[output], Init::Constant(0.0), rng));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.graph.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Single-hidden-layer `tanh` MLP scoring each (query, key) pair, followed by a
/// softmax over the keys. Query and key are concatenated before the MLP.
#[derive(Clone, Debug)]
pub struct AttentionMlp {
    pub query_dim: usize,
    pub key_dim: usize,
    pub hidden: Linear,
    pub score: Linear,
}

impl AttentionMlp {
    pub fn declare(
        store: &mut ParamStore,
        prefix: &str,
        query_dim: usize,
        key_dim: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(width > 0, "attention width must be positive");
        let hidden = Linear::declare(store, &format!("{prefix}.hidden"), query_dim + key_dim, width, true, rng);
        let score = Linear::declare(store, &format!("{prefix}.score"), width, 1, false, rng);
        Self { query_dim, key_dim, hidden, score }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.param_ids();
        ids.extend(self.score.param_ids());
        ids
    }

    /// Attention weights `[1, K]` of `query` (`[1, q]`) over the rows of
    /// `keys` (`[K, k]`).
    pub fn weights(&self, ctx: &mut Ctx<'_>, query: Var, keys: Var) -> Result<Var> {
        let ks = ctx.graph.shape(keys).to_vec();
        let qs = ctx.graph.shape(query).to_vec();
        if ks.len() != 2 || ks[1] != self.key_dim || qs != [1, self.query_dim] {
            return Err(Error::ShapeMismatch { primitive: "mlp_attention", lhs: qs, rhs: ks });
        }
        let k = ks[0];
        let ones = ctx.graph.constant(Tensor::ones(&[k, 1]));
        let repeated = ctx.graph.matmul(ones, query)?;
        let pairs = ctx.graph.concat(&[repeated, keys], 1)?;
        let w = ctx.param(self.hidden.weight);
        let b = ctx.param(self.hidden.bias.expect("hidden bias"));
        let v = ctx.param(self.score.weight);
        let g = &mut ctx.graph;
        let pre = g.matmul(pairs, w)?;
        let pre = g.add(pre, b)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul(act, v)?;
        let scores = g.reshape(scores, &[1, k])?;
        g.softmax(scores)
    }

    /// Same as [`AttentionMlp::weights`] for keys given as `[1, k]` rows.
    pub fn weights_over(&self, ctx: &mut Ctx<'_>, query: Var, keys: &[Var]) -> Result<Var> {
        if keys.is_empty() {
            return Err(Error::Invalid("attention over an empty key set".into()));
        }
        let stacked = ctx.graph.concat(keys, 0)?;
        self.weights(ctx, query, stacked)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::graph::{finite_diff_grad, relative_error};
    use crate::rng::stream;

    fn random_store(seed: u64) -> (ParamStore, LstmCell) {
        let mut rng = stream(seed, "test");
        let mut store = ParamStore::new();
        let cell = LstmCell::declare(&mut store, "cell", 3, 4, &mut rng);
        (store, cell)
    }

    #[test]
    fn zero_params_and_inputs_give_zero_state() {
        let (mut store, cell) = random_store(1);
        for id in cell.param_ids() {
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut ctx = Ctx::inference(&store);
        let x = ctx.graph.constant(Tensor::zeros(&[1, 3]));
        let s0 = DualState::zeros(&mut ctx.graph, 4).lower;
        let s1 = cell.step(&mut ctx, x, s0).unwrap();
        assert!(ctx.graph.value(s1.h).data().iter().all(|&v| v == 0.0));
        assert!(ctx.graph.value(s1.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_is_deterministic_without_dropout() {
        let (store, cell) = random_store(2);
        let run = || {
            let mut ctx = Ctx::inference(&store);
            let x = ctx.graph.constant(Tensor::row(&[0.3, -0.1, 0.9]));
            let s0 = DualState::zeros(&mut ctx.graph, 4).lower;
            let s1 = cell.step(&mut ctx, x, s0).unwrap();
            ctx.graph.value(s1.h).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn step_rejects_wrong_input_width() {
        let (store, cell) = random_store(3);
        let mut ctx = Ctx::inference(&store);
        let x = ctx.graph.constant(Tensor::row(&[0.3, -0.1]));
        let s0 = DualState::zeros(&mut ctx.graph, 4).lower;
        assert!(cell.step(&mut ctx, x, s0).is_err());
    }

    #[test]
    fn two_step_gradient_matches_finite_differences() {
        let (mut store, cell) = random_store(4);
        let mut rng = stream(4, "perturb");
        for id in cell.param_ids() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let inputs = [Tensor::row(&[0.5, -0.2, 0.1]), Tensor::row(&[-0.7, 0.4, 0.3])];
        let loss = |store: &ParamStore| -> Result<(f64, Option<crate::graph::Gradients>)> {
            let mut ctx = Ctx::inference(store);
            let mut s = DualState::zeros(&mut ctx.graph, 4).lower;
            for x in &inputs {
                let xv = ctx.graph.constant(x.clone());
                s = cell.step(&mut ctx, xv, s)?;
            }
            let w = ctx.graph.constant(Tensor::row(&[1.0, -2.0, 0.5, 3.0]));
            let hw = ctx.graph.mul(s.h, w)?;
            let cw = ctx.graph.mul(s.c, w)?;
            let both = ctx.graph.add(hw, cw)?;
            let y = ctx.graph.sum(both)?;
            let val = ctx.graph.value(y).item();
            Ok((val, Some(ctx.graph.backward(y)?)))
        };
        let (_, grads) = loss(&store).unwrap();
        let grads = grads.unwrap();
        for id in cell.param_ids() {
            let analytic = grads.param(id).unwrap().clone();
            let numeric = finite_diff_grad(
                |t| {
                    let mut s = store.clone();
                    *s.get_mut(id) = t.clone();
                    Ok(loss(&s)?.0)
                },
                store.get(id),
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                assert!(relative_error(*a, *n, 1e-6) < 1e-4, "{}: {a} vs {n}", store.name(id));
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::ones(&[1, 10]));
        assert_eq!(dropout(&mut g, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.5, false, &mut rng).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = g.constant(Tensor::ones(&[1, 100_000]));
        let y = dropout(&mut g, x, 0.2, true, &mut rng).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64 / 100_000.0;
        assert!((kept - 0.8).abs() < 0.02, "keep fraction {kept}");
        // kept values are rescaled
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }

    fn attention() -> (ParamStore, AttentionMlp) {
        let mut rng = stream(5, "att");
        let mut store = ParamStore::new();
        let att = AttentionMlp::declare(&mut store, "att", 4, 3, 8, &mut rng);
        for id in att.param_ids() {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        (store, att)
    }

    #[test]
    fn identical_keys_get_uniform_weights() {
        let (store, att) = attention();
        let mut ctx = Ctx::inference(&store);
        let q = ctx.graph.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        let k: Vec<Var> = (0..5).map(|_| ctx.graph.constant(Tensor::row(&[1.0, -1.0, 0.5]))).collect();
        let w = att.weights_over(&mut ctx, q, &k).unwrap();
        for &v in ctx.graph.value(w).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_gets_full_weight() {
        let (store, att) = attention();
        let mut ctx = Ctx::inference(&store);
        let q = ctx.graph.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        let k = ctx.graph.constant(Tensor::row(&[1.0, -1.0, 0.5]));
        let w = att.weights_over(&mut ctx, q, &[k]).unwrap();
        assert_eq!(ctx.graph.value(w).data(), &[1.0]);
    }

    #[test]
    fn empty_keys_fail() {
        let (store, att) = attention();
        let mut ctx = Ctx::inference(&store);
        let q = ctx.graph.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        assert!(att.weights_over(&mut ctx, q, &[]).is_err());
    }

    #[test]
    fn argmax_is_stable_over_49_keys() {
        let (store, att) = attention();
        let mut rng = stream(6, "keys");
        let keys = Tensor::new(&[49, 3], (0..147).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let argmax = || {
            let mut ctx = Ctx::inference(&store);
            let q = ctx.graph.constant(Tensor::row(&[0.5, -0.5, 0.2, 0.0]));
            let k = ctx.graph.constant(keys.clone());
            let w = att.weights(&mut ctx, q, k).unwrap();
            let d = ctx.graph.value(w).data().to_vec();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap()
        };
        let first = argmax();
        for _ in 0..5 {
            assert_eq!(argmax(), first);
        }
    }
}
