//! Layers built on [`Graph`]. Weights are stored `fan_in x fan_out` so a
//! layer computes `x W + b` on row-major inputs.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::uniform(vec![fan_in, fan_out], bound, rng),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![1, fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![1, dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![1, dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Shape(format!("{dim} not divisible into {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?,
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?,
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?,
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// Returns the output and the per-head attention matrices (`n x m`).
    pub fn forward(&self, g: &mut Graph, q_in: Var, kv_in: Var) -> Result<(Var, Vec<Var>)> {
        let dim = self.wq.fan_in;
        if g.shape(q_in).1 != dim || g.shape(kv_in).1 != dim {
            return Err(Error::Shape(format!(
                "attention inputs {:?} and {:?} for width {dim}",
                g.shape(q_in),
                g.shape(kv_in)
            )));
        }
        let q = self.wq.forward(g, q_in)?;
        let k = self.wk.forward(g, kv_in)?;
        let v = self.wv.forward(g, kv_in)?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            attn.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok((self.wo.forward(g, cat)?, attn))
    }
}

/// Feed-forward stack with tanh between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `hidden_layers` hidden layers of width `hidden`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        hidden_layers: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![fan_in];
        dims.extend(std::iter::repeat_n(hidden, hidden_layers));
        dims.push(fan_out);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i < last {
                x = g.tanh(x);
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(store: &mut ParamStore, id: ParamId, vals: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(vals);
    }

    fn identity_mha(store: &mut ParamStore, heads: usize) -> Mha {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mha::new(store, "att", 2, heads, &mut rng).unwrap();
        for l in [&m.wq, &m.wk, &m.wv, &m.wo] {
            set(store, l.w, &[1.0, 0.0, 0.0, 1.0]);
        }
        m
    }

    #[test]
    fn attention_two_by_two_by_hand() {
        let mut s = ParamStore::new();
        let m = identity_mha(&mut s, 1);
        let mut g = Graph::new(&s);
        let q = g.input(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let kv = g.input(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let (out, attn) = m.forward(&mut g, q, kv).unwrap();
        // row 0 scores [1, 0]/sqrt2, row 1 scores [0, 2]/sqrt2
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let a0 = 1.0 / (1.0 + (-r).exp());
        let a1 = 1.0 / (1.0 + (2.0 * r).exp());
        let at = g.value(attn[0]);
        assert!((at[0] - a0).abs() < 1e-14 && (at[1] - (1.0 - a0)).abs() < 1e-14);
        assert!((at[2] - a1).abs() < 1e-14 && (at[3] - (1.0 - a1)).abs() < 1e-14);
        let o = g.value(out);
        let expect = [a0, 2.0 * (1.0 - a0), a1, 2.0 * (1.0 - a1)];
        for (x, e) in o.iter().zip(expect) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn single_key_and_identical_keys() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mha::new(&mut s, "att", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new(&s);
        let q = g.input(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let kv1 = g.input(1, 4, vec![0.3, -0.2, 0.5, 1.0]).unwrap();
        let (out, attn) = m.forward(&mut g, q, kv1).unwrap();
        assert!(attn.iter().all(|&a| g.value(a).iter().all(|&w| w == 1.0)));
        let o = g.value(out).to_vec();
        assert_eq!(&o[0..4], &o[4..8]);
        assert_eq!(&o[0..4], &o[8..12]);

        let kv3 = g.input(3, 4, [0.3, -0.2, 0.5, 1.0].repeat(3)).unwrap();
        let (_, attn) = m.forward(&mut g, q, kv3).unwrap();
        for a in attn {
            assert_eq!(g.shape(a), (3, 3));
            assert!(g.value(a).iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
        assert!(Mha::new(&mut s, "bad", 5, 2, &mut rng).is_err());
    }

    #[test]
    fn linear_is_affine() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(&mut s, "l", 3, 2, true, &mut rng).unwrap();
        set(&mut s, l.b.unwrap(), &[0.7, -0.3]);
        let mut g = Graph::new(&s);
        let (a, b) = (1.5, -0.25);
        let x = [0.2, -1.0, 3.0];
        let y = [1.0, 0.5, -2.0];
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let f = |g: &mut Graph, v: Vec<f64>| {
            let i = g.input(1, 3, v).unwrap();
            let o = l.forward(g, i).unwrap();
            g.value(o).to_vec()
        };
        let f0 = f(&mut g, vec![0.0; 3]);
        let (fx, fy, fm) = (f(&mut g, x.to_vec()), f(&mut g, y.to_vec()), f(&mut g, mix));
        for k in 0..2 {
            let lhs = fm[k] - f0[k];
            let rhs = a * (fx[k] - f0[k]) + b * (fy[k] - f0[k]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_shapes() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(&mut s, "mlp", 5, 4, 3, 1, &mut rng).unwrap();
        assert_eq!(m.layers.len(), 4);
        let mut g = Graph::new(&s);
        let x = g.input(7, 5, vec![0.1; 35]).unwrap();
        let y = m.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), (7, 1));
    }
}
