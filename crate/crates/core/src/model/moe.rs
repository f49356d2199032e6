//! Top-k routing, the sparse mixture-of-experts layer with a shared expert,
//! and the importance/load balancing loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::numerics::{softmax_in_place, ParamId, ParamStore, Tape, Tensor, Var};

/// Experts chosen for one token and their renormalised weights, both in
/// ascending expert order.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Indices of the `k` largest probabilities in ascending index order; equal
/// probabilities prefer the lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut chosen = order[..k.min(probs.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Softmax over all router logits, top-k, then renormalisation over the
/// selected experts.
pub fn route(logits: &[f64], k: usize) -> Result<Routing, ModelError> {
    if k == 0 || k > logits.len() {
        return Err(ModelError::TopK {
            k,
            experts: logits.len(),
        });
    }
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let selected = top_k(&probs, k);
    let denom: f64 = selected.iter().map(|&i| probs[i]).sum();
    let weights = selected.iter().map(|&i| probs[i] / denom).collect();
    Ok(Routing { selected, weights })
}

/// Post-top-k router probabilities of one MoE layer over a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// `[tokens, experts]`, zero at unselected experts.
    pub p: Tensor,
    pub selected: Vec<Vec<usize>>,
}

impl RoutingRecord {
    /// Number of tokens each expert received.
    pub fn load(&self) -> Vec<usize> {
        let mut counts = vec![0; self.p.cols()];
        for s in &self.selected {
            for &e in s {
                counts[e] += 1;
            }
        }
        counts
    }
}

/// Squared coefficient of variation with the population standard deviation.
fn cv2(v: &[f64]) -> Result<f64, ModelError> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(ModelError::ZeroImportance);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var / (mean * mean))
}

/// `CV²(importance) + CV²(load)` where importance is the column sum of `p`
/// and load counts its nonzero entries per column.
pub fn balance_loss(p: &Tensor) -> Result<f64, ModelError> {
    if p.rank() != 2 || p.rows() == 0 || p.cols() == 0 {
        return Err(ModelError::Input(format!("balance loss needs a non-empty matrix, got {:?}", p.shape())));
    }
    let experts = p.cols();
    if experts == 1 {
        return Ok(0.0);
    }
    let mut importance = vec![0.0; experts];
    let mut load = vec![0.0; experts];
    for row in p.data().chunks(experts) {
        for (e, &v) in row.iter().enumerate() {
            importance[e] += v;
            if v != 0.0 {
                load[e] += 1.0;
            }
        }
    }
    Ok(cv2(&importance)? + cv2(&load)?)
}

/// Balance loss on the tape. Load is a count, so it enters as a constant and
/// only importance carries gradient.
pub(crate) fn balance_tape(tape: &mut Tape, p: Var, record: &RoutingRecord) -> Result<Var, ModelError> {
    let experts = record.p.cols();
    if experts == 1 {
        return Ok(tape.constant_scalar(0.0));
    }
    let importance = tape.col_sums(p);
    let mean = tape.mean(importance);
    if tape.scalar_value(mean)? == 0.0 {
        return Err(ModelError::ZeroImportance);
    }
    let dev = tape.sub(importance, mean)?;
    let sq = tape.mul(dev, dev)?;
    let var = tape.mean(sq);
    let mean_sq = tape.mul(mean, mean)?;
    let cv_importance = tape.div(var, mean_sq)?;
    let load: Vec<f64> = record.load().into_iter().map(|c| c as f64).collect();
    let load_term = tape.constant_scalar(cv2(&load)?);
    Ok(tape.add(cv_importance, load_term)?)
}

/// Parameters of a two-layer ReLU feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnIds {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeIds {
    pub router: ParamId,
    pub experts: Vec<FfnIds>,
    pub shared: FfnIds,
}

impl MoeIds {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.router];
        out.extend(self.shared.ids());
        for e in &self.experts {
            out.extend(e.ids());
        }
        out
    }
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite samples")
}

pub(crate) fn init_ffn(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, hidden: usize) -> FfnIds {
    FfnIds {
        w1: params.push(format!("{prefix}.w1"), normal_tensor(rng, &[dim, hidden], 1.0 / (dim as f64).sqrt())),
        b1: params.push(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
        w2: params.push(format!("{prefix}.w2"), normal_tensor(rng, &[hidden, dim], 1.0 / (hidden as f64).sqrt())),
        b2: params.push(format!("{prefix}.b2"), Tensor::zeros(&[dim])),
    }
}

pub(crate) fn init_moe(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
    experts: usize,
) -> MoeIds {
    let router = params.push(format!("{prefix}.router"), normal_tensor(rng, &[dim, experts], 1.0 / (dim as f64).sqrt()));
    let shared = init_ffn(params, rng, &format!("{prefix}.shared"), dim, hidden);
    let experts = (0..experts)
        .map(|e| init_ffn(params, rng, &format!("{prefix}.expert{e}"), dim, hidden))
        .collect();
    MoeIds { router, experts, shared }
}

pub(crate) fn ffn_tape(tape: &mut Tape, vars: &[Var], ids: &FfnIds, x: Var) -> Result<Var, ModelError> {
    let h = tape.matmul(x, vars[ids.w1.0])?;
    let h = tape.add(h, vars[ids.b1.0])?;
    let h = tape.relu(h);
    let y = tape.matmul(h, vars[ids.w2.0])?;
    Ok(tape.add(y, vars[ids.b2.0])?)
}

pub(crate) struct MoeOut {
    pub out: Var,
    pub p: Var,
    pub record: RoutingRecord,
}

/// Sparse MoE over the rows of `h`: `e_0(x) + Σ_{i∈S(x)} w_i(x)·e_i(x)`.
///
/// Each private expert only sees the rows routed to it, so unselected
/// experts never touch a token. `frozen` replaces the top-k choice with a
/// given selection per token (the weights still follow the router).
pub(crate) fn moe_tape(
    tape: &mut Tape,
    vars: &[Var],
    ids: &MoeIds,
    h: Var,
    k: usize,
    frozen: Option<&[Vec<usize>]>,
) -> Result<MoeOut, ModelError> {
    let experts = ids.experts.len();
    let logits = tape.matmul(h, vars[ids.router.0])?;
    let probs = tape.softmax(logits);
    let pv = tape.value(probs);
    let tokens = pv.rows();
    let selected: Vec<Vec<usize>> = match frozen {
        Some(sel) => {
            if sel.len() != tokens {
                return Err(ModelError::Input(format!("frozen routing for {} tokens, batch has {tokens}", sel.len())));
            }
            sel.to_vec()
        }
        None => {
            if k == 0 || k > experts {
                return Err(ModelError::TopK { k, experts });
            }
            (0..tokens).map(|t| top_k(pv.row(t), k)).collect()
        }
    };

    let mut flat = Vec::new();
    let mut owner = Vec::new();
    let mut per_expert: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); experts];
    for (t, s) in selected.iter().enumerate() {
        if s.len() != k || s.iter().any(|&e| e >= experts) {
            return Err(ModelError::Input(format!("token {t}: invalid expert selection {s:?}")));
        }
        for &e in s {
            per_expert[e].0.push(t);
            per_expert[e].1.push(flat.len());
            flat.push(t * experts + e);
            owner.push(t);
        }
    }
    let chosen = tape.gather(probs, &flat)?;
    let chosen_rows = tape.reshape(chosen, vec![tokens, k])?;
    let denom = tape.row_sums(chosen_rows);
    let denom_per = tape.gather(denom, &owner)?;
    let weights = tape.div(chosen, denom_per)?;
    let column = tape.reshape(weights, vec![flat.len(), 1])?;
    let p_flat = tape.scatter_rows(column, &flat, tokens * experts)?;
    let p = tape.reshape(p_flat, vec![tokens, experts])?;

    let mut out = ffn_tape(tape, vars, &ids.shared, h)?;
    for (e, (rows, positions)) in per_expert.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(h, rows)?;
        let ye = ffn_tape(tape, vars, &ids.experts[e], xe)?;
        let we = tape.gather(weights, positions)?;
        let ye = tape.scale_rows(ye, we)?;
        let ye = tape.scatter_rows(ye, rows, tokens)?;
        out = tape.add(out, ye)?;
    }
    let record = RoutingRecord {
        p: tape.value(p).clone(),
        selected,
    };
    Ok(MoeOut { out, p, record })
}

/// A standalone MoE feed-forward layer with its own parameters.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub params: ParamStore,
    pub ids: MoeIds,
    pub k: usize,
}

impl MoeLayer {
    pub fn init(dim: usize, hidden: usize, experts: usize, k: usize, seed: u64) -> Result<Self, ModelError> {
        if k == 0 || k > experts {
            return Err(ModelError::TopK { k, experts });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ids = init_moe(&mut params, &mut rng, "moe", dim, hidden, experts);
        Ok(Self { params, ids, k })
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.ids.router).rows()
    }

    /// Applies the layer to each row of `tokens` (`[B, dim]`).
    pub fn forward(&self, tokens: &Tensor) -> Result<(Tensor, RoutingRecord), ModelError> {
        if tokens.rank() != 2 || tokens.cols() != self.dim() {
            return Err(ModelError::Input(format!(
                "tokens of shape {:?} for a layer of width {}",
                tokens.shape(),
                self.dim()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let x = tape.leaf(tokens.clone());
        let out = moe_tape(&mut tape, &vars, &self.ids, x, self.k, None)?;
        Ok((tape.value(out.out).clone(), out.record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_pick_lowest_indices() {
        let r = route(&[0.3; 4], 2).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn renormalised_weights_follow_softmax_ratio() {
        let r = route(&[2f64.ln(), 0.0], 2).unwrap();
        assert!((r.weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.weights[1] - 1.0 / 3.0).abs() < 1e-15);
        let r = route(&[10.0, -10.0, -10.0], 1).unwrap();
        assert_eq!((r.selected, r.weights), (vec![0], vec![1.0]));
    }

    #[test]
    fn invalid_k_is_rejected() {
        assert!(matches!(route(&[0.0, 1.0], 0), Err(ModelError::TopK { .. })));
        assert!(matches!(route(&[0.0, 1.0], 3), Err(ModelError::TopK { .. })));
    }

    #[test]
    fn balance_loss_hand_values() {
        let uniform = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(balance_loss(&uniform).unwrap(), 0.0);
        let skewed = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((balance_loss(&skewed).unwrap() - 2.0).abs() < 1e-12);
        let single = Tensor::matrix(3, 1, vec![1.0; 3]).unwrap();
        assert_eq!(balance_loss(&single).unwrap(), 0.0);
        let empty = Tensor::matrix(1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(balance_loss(&empty), Err(ModelError::ZeroImportance)));
    }

    #[test]
    fn tape_balance_matches_plain_value() {
        let layer = MoeLayer::init(6, 5, 4, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal_tensor(&mut rng, &[7, 6], 1.0);
        let mut tape = Tape::new();
        let vars = layer.params.register(&mut tape);
        let xv = tape.leaf(x);
        let out = moe_tape(&mut tape, &vars, &layer.ids, xv, 2, None).unwrap();
        let b = balance_tape(&mut tape, out.p, &out.record).unwrap();
        let plain = balance_loss(&out.record.p).unwrap();
        assert!((tape.scalar_value(b).unwrap() - plain).abs() < 1e-12);
    }
}
