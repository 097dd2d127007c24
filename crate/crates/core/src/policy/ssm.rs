//! Diagonal selective state-space recurrence with zero-order-hold
//! discretization.
//!
//! Per channel `d` and state `n`, with `z = delta[t,d] * A[d,n]`:
//!
//! ```text
//! A_bar = exp(z)
//! B_bar = delta * B[t,n] * expm1(z) / z      (-> delta * B as z -> 0)
//! h_t   = A_bar * h_{t-1} + B_bar * u[t,d]
//! y_t   = sum_n C[t,n] * h_t + skip[d] * u[t,d]
//! ```

/// Borrowed inputs to a scan. Matrices are row-major: `u`, `delta` are
/// `len x channels`, `a` is `channels x state`, `b`, `c` are `len x state`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    /// Continuous-time diagonal, expected negative.
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub skip: &'a [f64],
}

/// `expm1(z) / z`, continuous at 0.
fn phi(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`], `(z e^z - expm1(z)) / z^2`, given `e = exp(z)`.
fn phi_prime(z: f64, e: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * e - (e - 1.0)) / (z * z)
    }
}

/// `(exp(z), phi(z))` from a single `expm1`.
fn exp_phi(z: f64) -> (f64, f64) {
    let em1 = z.exp_m1();
    let p = if z.abs() < 1e-5 { phi(z) } else { em1 / z };
    (em1 + 1.0, p)
}

/// Zero-order-hold discretization of a diagonal system for one step.
pub fn ssm_discretize(a: &[f64], b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .zip(b)
        .map(|(&an, &bn)| {
            let z = delta * an;
            (z.exp(), delta * bn * phi(z))
        })
        .unzip()
}

/// Sequential recurrence, linear in `len`.
pub fn selective_scan(inp: &ScanInputs) -> Vec<f64> {
    let (l, dm, n) = (inp.len, inp.channels, inp.state);
    let mut y = vec![0.0; l * dm];
    let mut h = vec![0.0; n];
    for d in 0..dm {
        h.fill(0.0);
        let a = &inp.a[d * n..(d + 1) * n];
        for t in 0..l {
            let dt = inp.delta[t * dm + d];
            let u = inp.u[t * dm + d];
            let (b, c) = (&inp.b[t * n..(t + 1) * n], &inp.c[t * n..(t + 1) * n]);
            let mut acc = inp.skip[d] * u;
            for k in 0..n {
                let (e, p) = exp_phi(dt * a[k]);
                h[k] = e * h[k] + dt * b[k] * p * u;
                acc += c[k] * h[k];
            }
            y[t * dm + d] = acc;
        }
    }
    y
}

/// `(a1, b1) then (a2, b2)` for the affine map `h -> a h + b`.
fn combine(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    (x.0 * y.0, y.0 * x.1 + y.1)
}

/// Inclusive prefix composition by recursive pairwise reduction.
fn prefix_scan(elems: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let len = elems.len();
    if len <= 1 {
        return elems.to_vec();
    }
    let pairs: Vec<_> = elems.chunks_exact(2).map(|p| combine(p[0], p[1])).collect();
    let reduced = prefix_scan(&pairs);
    let mut out = Vec::with_capacity(len);
    out.push(elems[0]);
    for i in 1..len {
        out.push(if i % 2 == 1 {
            reduced[i / 2]
        } else {
            combine(reduced[i / 2 - 1], elems[i])
        });
    }
    out
}

/// Same result as [`selective_scan`], computed with an associative scan over
/// the per-step affine maps.
pub fn selective_scan_associative(inp: &ScanInputs) -> Vec<f64> {
    let (l, dm, n) = (inp.len, inp.channels, inp.state);
    let mut y = vec![0.0; l * dm];
    for d in 0..dm {
        for t in 0..l {
            y[t * dm + d] = inp.skip[d] * inp.u[t * dm + d];
        }
        for k in 0..n {
            let ak = inp.a[d * n + k];
            let steps: Vec<(f64, f64)> = (0..l)
                .map(|t| {
                    let dt = inp.delta[t * dm + d];
                    let z = dt * ak;
                    (z.exp(), dt * inp.b[t * n + k] * phi(z) * inp.u[t * dm + d])
                })
                .collect();
            for (t, (_, h)) in prefix_scan(&steps).into_iter().enumerate() {
                y[t * dm + d] += inp.c[t * n + k] * h;
            }
        }
    }
    y
}

/// Gradients of a scan with respect to each input.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

/// Reverse pass given the output gradient `gy` (`len x channels`). Hidden
/// states are recomputed per channel.
pub fn selective_scan_backward(inp: &ScanInputs, gy: &[f64]) -> ScanGrads {
    let (l, dm, n) = (inp.len, inp.channels, inp.state);
    let mut g = ScanGrads {
        u: vec![0.0; l * dm],
        delta: vec![0.0; l * dm],
        a: vec![0.0; dm * n],
        b: vec![0.0; l * n],
        c: vec![0.0; l * n],
        skip: vec![0.0; dm],
    };
    let mut hs = vec![0.0; l * n];
    let mut es = vec![0.0; l * n];
    let mut ps = vec![0.0; l * n];
    let mut carry = vec![0.0; n];
    for d in 0..dm {
        let a = &inp.a[d * n..(d + 1) * n];
        for t in 0..l {
            let dt = inp.delta[t * dm + d];
            let u = inp.u[t * dm + d];
            for k in 0..n {
                let i = t * n + k;
                let prev = if t > 0 { hs[i - n] } else { 0.0 };
                let (e, p) = exp_phi(dt * a[k]);
                es[i] = e;
                ps[i] = p;
                hs[i] = e * prev + dt * inp.b[i] * p * u;
            }
        }
        carry.fill(0.0);
        for t in (0..l).rev() {
            let dt = inp.delta[t * dm + d];
            let u = inp.u[t * dm + d];
            let gyt = gy[t * dm + d];
            g.skip[d] += gyt * u;
            let mut du = gyt * inp.skip[d];
            let mut ddt = 0.0;
            for k in 0..n {
                let gh = carry[k] + inp.c[t * n + k] * gyt;
                g.c[t * n + k] += gyt * hs[t * n + k];
                let prev = if t > 0 { hs[(t - 1) * n + k] } else { 0.0 };
                let bk = inp.b[t * n + k];
                let z = dt * a[k];
                let (e, p) = (es[t * n + k], ps[t * n + k]);
                let g_abar = gh * prev;
                let g_bbar = gh * u;
                du += gh * dt * bk * p;
                ddt += g_abar * a[k] * e + g_bbar * bk * e;
                g.a[d * n + k] += g_abar * dt * e + g_bbar * dt * dt * bk * phi_prime(z, e);
                g.b[t * n + k] += g_bbar * dt * p;
                carry[k] = e * gh;
            }
            g.u[t * dm + d] += du;
            g.delta[t * dm + d] += ddt;
        }
    }
    g
}
