use rand::Rng;

use super::{MicronetError, Tensor};

type Result<T> = std::result::Result<T, MicronetError>;

/// Row-stochastic weights `softmax(Q Kᵀ / √d_k)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, dq) = q.dims2("attention")?;
    let (_, dk) = k.dims2("attention")?;
    if dq != dk || dk == 0 {
        return Err(MicronetError::ShapeMismatch(format!(
            "attention: query width {dq} vs key width {dk}"
        )));
    }
    q.matmul(&k.transpose()?)?.scale(1.0 / (dk as f64).sqrt())?.softmax_rows()
}

/// Scaled dot-product attention: `softmax(Q Kᵀ / √d_k) V`. Reductions over
/// the key axis are order independent, so jointly permuting the rows of `K`
/// and `V` leaves the output bit-identical.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (m, _) = k.dims2("attention")?;
    let (mv, _) = v.dims2("attention")?;
    if m != mv {
        return Err(MicronetError::ShapeMismatch(format!("attention: {m} keys vs {mv} values")));
    }
    attention_weights(q, k)?.matmul_unordered(v)
}

/// Per-head projections and the output projection of multi-head attention.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
}

impl AttentionParams {
    pub fn new(w_q: Vec<Tensor>, w_k: Vec<Tensor>, w_v: Vec<Tensor>, w_o: Tensor) -> Result<Self> {
        let heads = w_q.len();
        if heads == 0 || w_k.len() != heads || w_v.len() != heads {
            return Err(MicronetError::ShapeMismatch(format!(
                "head counts q={} k={} v={}",
                w_q.len(),
                w_k.len(),
                w_v.len()
            )));
        }
        let (d_model, d_k) = w_q[0].dims2("W_Q")?;
        let (_, d_v) = w_v[0].dims2("W_V")?;
        for i in 0..heads {
            let ok = w_q[i].shape() == [d_model, d_k]
                && w_k[i].shape() == [d_model, d_k]
                && w_v[i].shape() == [d_model, d_v];
            if !ok {
                return Err(MicronetError::ShapeMismatch(format!("projection shapes of head {i}")));
            }
        }
        if w_o.shape() != [heads * d_v, d_model] {
            return Err(MicronetError::ShapeMismatch(format!(
                "W_O is {:?}, expected [{}, {d_model}]",
                w_o.shape(),
                heads * d_v
            )));
        }
        Ok(AttentionParams { d_model, heads, d_k, d_v, w_q, w_k, w_v, w_o })
    }

    /// Uniform init in `±1/√d_model`; constants unless `trainable`.
    pub fn random(
        d_model: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut mat = |r: usize, c: usize| {
            let s = 1.0 / (r as f64).sqrt();
            let data = (0..r * c).map(|_| rng.random_range(-s..s)).collect();
            if trainable {
                Tensor::param(&[r, c], data)
            } else {
                Tensor::new(&[r, c], data)
            }
        };
        let mut w_q = Vec::new();
        let mut w_k = Vec::new();
        let mut w_v = Vec::new();
        for _ in 0..heads {
            w_q.push(mat(d_model, d_k)?);
            w_k.push(mat(d_model, d_k)?);
            w_v.push(mat(d_model, d_v)?);
        }
        let w_o = mat(heads * d_v, d_model)?;
        Self::new(w_q, w_k, w_v, w_o)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        out.extend(self.w_q.iter().cloned());
        out.extend(self.w_k.iter().cloned());
        out.extend(self.w_v.iter().cloned());
        out.push(self.w_o.clone());
        out
    }
}

/// `Concat(head_1..head_h) W_O` with `head_i = Attention(x_q W_Q[i], x_kv W_K[i], x_kv W_V[i])`.
pub fn multi_head(x_q: &Tensor, x_kv: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    let (_, dq) = x_q.dims2("multi_head")?;
    let (_, dkv) = x_kv.dims2("multi_head")?;
    if dq != params.d_model || dkv != params.d_model {
        return Err(MicronetError::ShapeMismatch(format!(
            "multi_head: inputs of width {dq}/{dkv}, d_model {}",
            params.d_model
        )));
    }
    let heads = (0..params.heads)
        .map(|i| {
            attention(
                &x_q.matmul(&params.w_q[i])?,
                &x_kv.matmul(&params.w_k[i])?,
                &x_kv.matmul(&params.w_v[i])?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&heads)?.matmul(&params.w_o)
}
