//! Two-layer disentangled transformer: one-hot encoding, forward pass and the
//! composite multi-token loss.
//!
//! Tokens and node targets are 0-based indices into the vocabulary; node id
//! `k` of a task instance maps to index `k - 1`. Positions are 0-based too, so
//! the prompt end node sits at `T - 2` and the start node at `T - 1`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{masked_softmax, Distribution, Matrix};
use crate::taskgen::StarInstance;

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

pub const CHECKPOINT_HEADER: &str = "mtplab-checkpoint v1";

/// A sequence of one-hot rows, stored as token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContentMatrix {
    tokens: Vec<usize>,
    vocab: usize,
}

impl ContentMatrix {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Dimension("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Dimension(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(ContentMatrix { tokens, vocab })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.tokens.len(), self.vocab, |t, n| {
            if self.tokens[t] == n {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Copy with the final row replaced by `e_token`.
    pub fn with_last(&self, token: usize) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        *tokens.last_mut().expect("non-empty") = token;
        ContentMatrix::new(tokens, self.vocab)
    }

    /// `Z W Zᵀ`, which for one-hot rows is a gather: entry `(i, j)` is
    /// `W[g_i, g_j]`.
    pub fn bilinear(&self, w: &Matrix) -> Matrix {
        let t = self.tokens.len();
        Matrix::from_fn(t, t, |i, j| w[(self.tokens[i], self.tokens[j])])
    }

    /// `Zᵀ G Z`, the adjoint of [`bilinear`](Self::bilinear): a scatter-add.
    pub fn scatter(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.vocab, self.vocab);
        for (i, &a) in self.tokens.iter().enumerate() {
            for (j, &b) in self.tokens.iter().enumerate() {
                out[(a, b)] += g[(i, j)];
            }
        }
        out
    }

    /// `wᵀ Z`: pushes position weights onto token indices.
    pub fn pool(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab];
        for (&tok, &w) in self.tokens.iter().zip(weights) {
            out[tok] += w;
        }
        out
    }

    /// `Z e_y`: indicator over positions holding token `y`.
    pub fn indicator(&self, y: usize) -> Vec<f64> {
        self.tokens.iter().map(|&t| if t == y { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// N×N content-matching weights.
    pub content: Matrix,
    /// T×T positional bias.
    pub positional: Matrix,
}

impl LayerWeights {
    pub fn zeros(seq_len: usize, vocab: usize) -> Self {
        LayerWeights {
            content: Matrix::zeros(vocab, vocab),
            positional: Matrix::zeros(seq_len, seq_len),
        }
    }

    /// `Z W0 Zᵀ + W1`.
    pub fn logits(&self, z: &ContentMatrix) -> Matrix {
        let mut a = z.bilinear(&self.content);
        a.add_scaled(&self.positional, 1.0);
        a
    }
}

/// The trainable state. Output heads are fixed block selectors and have no
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledModel {
    pub layer1: LayerWeights,
    pub layer2: LayerWeights,
}

impl DisentangledModel {
    pub fn zeros(seq_len: usize, vocab: usize) -> Self {
        DisentangledModel {
            layer1: LayerWeights::zeros(seq_len, vocab),
            layer2: LayerWeights::zeros(seq_len, vocab),
        }
    }

    pub fn from_layers(layer1: LayerWeights, layer2: LayerWeights) -> Result<Self> {
        let m = DisentangledModel { layer1, layer2 };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn seq_len(&self) -> usize {
        self.layer1.positional.rows()
    }

    pub fn vocab(&self) -> usize {
        self.layer1.content.rows()
    }

    /// The four weight matrices in canonical order: layer-1 content, layer-1
    /// positional, layer-2 content, layer-2 positional.
    pub fn matrices(&self) -> [&Matrix; 4] {
        [
            &self.layer1.content,
            &self.layer1.positional,
            &self.layer2.content,
            &self.layer2.positional,
        ]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.layer1.content,
            &mut self.layer1.positional,
            &mut self.layer2.content,
            &mut self.layer2.positional,
        ]
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (t, n) = (self.seq_len(), self.vocab());
        let expected = [(n, n), (t, t), (n, n), (t, t)];
        for ((name, m), want) in WEIGHT_NAMES.iter().zip(self.matrices()).zip(expected) {
            if m.shape() != want {
                return Err(Error::Dimension(format!(
                    "{name} is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    /// Serializes to the versioned textual checkpoint format.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        writeln!(out, "T {} N {}", self.seq_len(), self.vocab()).unwrap();
        for (name, m) in WEIGHT_NAMES.iter().zip(self.matrices()) {
            writeln!(out, "{name} {} {}", m.rows(), m.cols()).unwrap();
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", row.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| ckpt_err(0, format!("checkpoint ends before {what}")))
        };
        let (_, header) = next("header")?;
        if header.trim() != CHECKPOINT_HEADER {
            return Err(ckpt_err(0, format!("unsupported checkpoint header {header:?}")));
        }
        let (ln, dims) = next("dimensions")?;
        let d: Vec<&str> = dims.split_whitespace().collect();
        let (t, n) = match d.as_slice() {
            ["T", t, "N", n] => (
                t.parse::<usize>().map_err(|_| ckpt_err(ln, "bad T"))?,
                n.parse::<usize>().map_err(|_| ckpt_err(ln, "bad N"))?,
            ),
            _ => return Err(ckpt_err(ln, "expected `T <t> N <n>`")),
        };
        let mut model = DisentangledModel::zeros(t, n);
        for (k, name) in WEIGHT_NAMES.iter().enumerate() {
            let (ln, head) = next(name)?;
            let h: Vec<&str> = head.split_whitespace().collect();
            let (rows, cols) = model.matrices()[k].shape();
            if h != [*name, &rows.to_string(), &cols.to_string()] {
                return Err(ckpt_err(ln, format!("expected `{name} {rows} {cols}`, found {head:?}")));
            }
            for i in 0..rows {
                let (ln, row) = next(name)?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| ckpt_err(ln, format!("bad number {v:?}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(ckpt_err(ln, format!("row has {} values, expected {cols}", vals.len())));
                }
                model.matrices_mut()[k].row_mut(i).copy_from_slice(&vals);
            }
        }
        Ok(model)
    }
}

fn ckpt_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Validation(format!("checkpoint line {}: {msg}", line + 1))
}

/// Names of the four weight matrices, in canonical order.
pub const WEIGHT_NAMES: [&str; 4] = ["W0_1", "W1_1", "W0_2", "W1_2"];

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub a1: Matrix,
    pub s1: Matrix,
    pub a2: Matrix,
    pub s2: Matrix,
    /// Deep-head output, read from the last row of layer 2.
    pub f1: Distribution,
    /// Shallow-head output, read from the last row of layer 1.
    pub f2: Distribution,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.s1.rows()
    }

    /// Last row of `S1`.
    pub fn s1_last(&self) -> &[f64] {
        self.s1.row(self.seq_len() - 1)
    }

    /// Last row of `S2`.
    pub fn s2_last(&self) -> &[f64] {
        self.s2.row(self.seq_len() - 1)
    }
}

pub fn forward(model: &DisentangledModel, z: &ContentMatrix) -> Result<ForwardTrace> {
    let (t, n) = (model.seq_len(), model.vocab());
    if z.seq_len() != t || z.vocab() != n {
        return Err(Error::Dimension(format!(
            "input is {}×{}, model expects {t}×{n}",
            z.seq_len(),
            z.vocab()
        )));
    }
    let a1 = model.layer1.logits(z);
    let s1 = masked_softmax(&a1)?;
    let a2 = model.layer2.logits(z);
    let s2 = masked_softmax(&s1.matmul(&a2)?)?;

    let last = t - 1;
    let f2 = z.pool(s1.row(last));
    let mixed = s1.vec_mul(s2.row(last));
    let f1 = z.pool(&mixed);
    Ok(ForwardTrace {
        a1,
        s1,
        a2,
        s2,
        f1: Distribution::from_simplex(f1),
        f2: Distribution::from_simplex(f2),
    })
}

/// One supervised star-graph example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub z: ContentMatrix,
    /// Next node on the path (`v`), target of the deep head on `Z`.
    pub y1: usize,
    /// End node, target of the shallow head and of the deep head on `Z′`.
    pub y2: usize,
    /// Position of `u_end` inside the `(v, u_end)` edge.
    pub t_end_ctx: usize,
    /// Position of `v` inside that edge; always `t_end_ctx - 1`.
    pub t_v_ctx: usize,
}

/// Lays out edges as consecutive token pairs followed by `u_end, u_star`.
/// Requires paths of three nodes (start, `v`, end) and `2·|E| + 2` positions.
pub fn encode(instance: &StarInstance) -> Result<TrainingExample> {
    if instance.path.len() != 3 {
        return Err(Error::Encoding(format!(
            "expected a three-node target path, found {}",
            instance.path.len()
        )));
    }
    let n = instance.node_count;
    let idx = |id: u32| -> Result<usize> {
        if id == 0 || id as usize > n {
            return Err(Error::Encoding(format!("node {id} outside 1..={n}")));
        }
        Ok(id as usize - 1)
    };
    let (start, v, end) = (instance.path[0], instance.path[1], instance.path[2]);
    let mut tokens = Vec::with_capacity(2 * instance.edges.len() + 2);
    let mut t_end_ctx = None;
    for &(a, b) in &instance.edges {
        if (a, b) == (v, end) {
            t_end_ctx = Some(tokens.len() + 1);
        }
        tokens.push(idx(a)?);
        tokens.push(idx(b)?);
    }
    tokens.push(idx(end)?);
    tokens.push(idx(start)?);
    let t_end_ctx = t_end_ctx.ok_or_else(|| Error::Encoding(format!("edge ({v},{end}) missing")))?;
    Ok(TrainingExample {
        z: ContentMatrix::new(tokens, n).map_err(|e| Error::Encoding(e.to_string()))?,
        y1: idx(v)?,
        y2: idx(end)?,
        t_end_ctx,
        t_v_ctx: t_end_ctx - 1,
    })
}

/// Same as [`encode`] but also checks the sequence length a model expects.
pub fn encode_for(instance: &StarInstance, seq_len: usize) -> Result<TrainingExample> {
    let ex = encode(instance)?;
    if ex.z.seq_len() != seq_len {
        return Err(Error::Encoding(format!(
            "{} edges give {} positions, model has {seq_len}",
            instance.edges.len(),
            ex.z.seq_len()
        )));
    }
    Ok(ex)
}

/// `Z′`: the input with its last row replaced by `e_{y1}`.
pub fn ar_context(example: &TrainingExample) -> ContentMatrix {
    example.z.with_last(example.y1).expect("y1 is in the vocabulary")
}

/// `-ln p`, clamping `p` at [`PROB_FLOOR`]. The flag reports whether the
/// clamp was hit.
pub fn neg_log(p: f64) -> (f64, bool) {
    if p < PROB_FLOOR {
        (-PROB_FLOOR.ln(), true)
    } else {
        (-p.ln(), false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Deep head on `Z`, target `y1`.
    pub l1a: f64,
    /// Deep head on `Z′`, target `y2`.
    pub l1b: f64,
    /// Shallow head on `Z`, target `y2`.
    pub l2: f64,
    /// Set when any probability was clamped at [`PROB_FLOOR`].
    pub clamped: bool,
}

impl LossBreakdown {
    /// The loss without the autoregressive `L1b` term:
    /// `(1/2)[(1/2) L1a + L2]`.
    pub fn core(&self) -> f64 {
        0.5 * (0.5 * self.l1a + self.l2)
    }
}

pub fn mtp_loss(model: &DisentangledModel, example: &TrainingExample) -> Result<LossBreakdown> {
    let on_z = forward(model, &example.z)?;
    let on_ar = forward(model, &ar_context(example))?;
    let (l1a, c1) = neg_log(on_z.f1[example.y1]);
    let (l1b, c2) = neg_log(on_ar.f1[example.y2]);
    let (l2, c3) = neg_log(on_z.f2[example.y2]);
    Ok(LossBreakdown {
        total: 0.5 * (0.5 * (l1a + l1b) + l2),
        l1a,
        l1b,
        l2,
        clamped: c1 || c2 || c3,
    })
}

/// Deep-head loss on `Z` with target `y1` (the next-token baseline).
pub fn ntp_loss(model: &DisentangledModel, example: &TrainingExample) -> Result<f64> {
    let trace = forward(model, &example.z)?;
    Ok(neg_log(trace.f1[example.y1]).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::gen_star;

    fn fig4() -> StarInstance {
        // reference labels shifted by one into 1..=10
        StarInstance {
            node_count: 10,
            edges: vec![(4, 8), (7, 1), (8, 3), (4, 7)],
            start: 4,
            end: 1,
            path: vec![4, 7, 1],
            path_count: 2,
            path_len: 3,
        }
    }

    #[test]
    fn encodes_reference_instance() {
        let ex = encode(&fig4()).unwrap();
        let ids: Vec<usize> = ex.z.tokens().iter().map(|t| t + 1).collect();
        assert_eq!(ids, vec![4, 8, 7, 1, 8, 3, 4, 7, 1, 4]);
        assert_eq!((ex.y1, ex.y2), (6, 0));
        assert_eq!((ex.t_v_ctx, ex.t_end_ctx), (2, 3));
        assert_eq!(ex.z.tokens()[8], ex.z.tokens()[ex.t_end_ctx]);
        let zp = ar_context(&ex);
        assert_eq!(zp.tokens()[9], 6);
        let diff = zp.tokens().iter().zip(ex.z.tokens()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn encoding_rejects_wrong_sizes() {
        let long = gen_star(2, 4, 10, 1).unwrap();
        assert!(matches!(encode(&long), Err(Error::Encoding(_))));
        let s = gen_star(2, 3, 10, 1).unwrap();
        assert!(matches!(encode_for(&s, 12), Err(Error::Encoding(_))));
    }

    #[test]
    fn zero_model_is_uniform_prefix() {
        let ex = encode(&fig4()).unwrap();
        let tr = forward(&DisentangledModel::zeros(10, 10), &ex.z).unwrap();
        for t in 0..10 {
            for j in 0..10 {
                let want = if j <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert!((tr.s1[(t, j)] - want).abs() < 1e-15);
            }
        }
        let avg = ex.z.pool(&[0.1; 10]);
        for k in 0..10 {
            assert!((tr.f2[k] - avg[k]).abs() < 1e-15);
        }
        let l = mtp_loss(&DisentangledModel::zeros(10, 10), &ex).unwrap();
        // u_end occurs twice, v twice, among ten tokens
        assert!((l.l2 - 5f64.ln()).abs() < 1e-12);
        // f1 mixes the prefix averages: position j gets (1/T) Σ_{i≥j} 1/(i+1)
        let w = |j: usize| (j..10).map(|i| 1.0 / (i + 1) as f64).sum::<f64>() / 10.0;
        let p_v: f64 = ex.z.tokens().iter().enumerate().filter(|(_, &t)| t == ex.y1).map(|(j, _)| w(j)).sum();
        assert!((l.l1a + p_v.ln()).abs() < 1e-12);
        assert!(l.total.is_finite() && !l.clamped);
    }

    #[test]
    fn neg_log_half_is_ln2() {
        assert_eq!(neg_log(0.5), (std::f64::consts::LN_2, false));
        assert!(neg_log(0.0).1);
        assert!(neg_log(0.0).0.is_finite());
    }

    #[test]
    fn forward_rejects_mismatched_input() {
        let z = ContentMatrix::new(vec![0, 1, 2], 10).unwrap();
        assert!(matches!(
            forward(&DisentangledModel::zeros(10, 10), &z),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bilinear_and_scatter_match_dense_products() {
        let z = ContentMatrix::new(vec![2, 0, 2, 1], 3).unwrap();
        let w = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let zm = z.to_matrix();
        let dense = zm.matmul(&w).unwrap().matmul(&zm.transpose()).unwrap();
        assert_eq!(z.bilinear(&w), dense);
        let g = Matrix::from_fn(4, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let dense = zm.transpose().matmul(&g).unwrap().matmul(&zm).unwrap();
        assert_eq!(z.scatter(&g), dense);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut m = DisentangledModel::zeros(4, 3);
        m.layer1.content[(0, 1)] = 0.1 + 0.2;
        m.layer2.positional[(3, 2)] = -1.0e-17;
        m.layer2.content[(2, 2)] = 12345.678901234567;
        let text = m.to_checkpoint();
        assert!(text.starts_with(CHECKPOINT_HEADER));
        assert_eq!(DisentangledModel::from_checkpoint(&text).unwrap(), m);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        assert!(DisentangledModel::from_checkpoint("mtplab-checkpoint v0\n").is_err());
        let text = DisentangledModel::zeros(2, 2).to_checkpoint().replace("0.0 0.0\n", "0.0\n");
        assert!(DisentangledModel::from_checkpoint(&text).is_err());
    }

    #[test]
    fn shape_check() {
        let bad = DisentangledModel::from_layers(LayerWeights::zeros(4, 3), LayerWeights::zeros(4, 2));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }
}
