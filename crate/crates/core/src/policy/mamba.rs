use rand::Rng;

use super::PolicyConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Gated residual block: projection, causal depthwise convolution, SiLU,
/// selective scan, multiplicative SiLU gate and output projection.
#[derive(Debug, Clone)]
pub struct MambaBlock {
    d_model: usize,
    d_inner: usize,
    dt_rank: usize,
    state: usize,
    in_proj: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: ParamId,
    skip: ParamId,
    out_proj: Linear,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let di = cfg.expand * d;
        let n = cfg.state_size;
        let w = cfg.conv_window;
        let dt_rank = d.div_ceil(16);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, 2 * di, false, rng)?;
        let conv_w = store.add(
            format!("{name}.conv.weight"),
            Tensor::uniform(vec![di, w], 1.0 / (w as f64).sqrt(), rng),
        )?;
        let conv_b = store.add(format!("{name}.conv.bias"), Tensor::zeros(vec![1, di]))?;
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), di, dt_rank + 2 * n, false, rng)?;
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), dt_rank, di, true, rng)?;
        // step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let bias = store.get_mut(dt_proj.b.expect("dt_proj has a bias"));
        for b in bias.data_mut() {
            let dt = rng.gen_range(lo..hi).exp();
            *b = dt + (-(-dt).exp_m1()).ln();
        }
        let a_log_vals = (0..di)
            .flat_map(|_| (1..=n).map(|k| (k as f64).ln()))
            .collect();
        let a_log = store.add(format!("{name}.a_log"), Tensor::new(vec![di, n], a_log_vals)?)?;
        let skip = store.add(format!("{name}.d"), Tensor::filled(vec![1, di], 1.0))?;
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), di, d, false, rng)?;
        Ok(Self {
            d_model: d,
            d_inner: di,
            dt_rank,
            state: n,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            skip,
            out_proj,
        })
    }

    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        if g.shape(h).1 != self.d_model {
            return Err(Error::Shape(format!(
                "mamba block of width {} given {:?}",
                self.d_model,
                g.shape(h)
            )));
        }
        let (di, r, n) = (self.d_inner, self.dt_rank, self.state);
        let xz = self.in_proj.forward(g, h)?;
        let x = g.slice_cols(xz, 0, di)?;
        let z = g.slice_cols(xz, di, di)?;
        let (cw, cb) = (g.param(self.conv_w), g.param(self.conv_b));
        let x = g.causal_conv1d(x, cw, cb)?;
        let x = g.silu(x);
        let dbc = self.x_proj.forward(g, x)?;
        let dt_in = g.slice_cols(dbc, 0, r)?;
        let b = g.slice_cols(dbc, r, n)?;
        let c = g.slice_cols(dbc, r + n, n)?;
        let delta = self.dt_proj.forward(g, dt_in)?;
        let delta = g.softplus(delta);
        let (a_log, skip) = (g.param(self.a_log), g.param(self.skip));
        let y = g.selective_scan(x, delta, a_log, b, c, skip)?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let y = self.out_proj.forward(g, y)?;
        g.add(y, h)
    }
}
