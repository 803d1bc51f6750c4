//! Single-layer gated recurrent cell (input, forget, candidate, output gates).

use super::linalg::{gemm, sigmoid};

/// Borrowed weights of one cell. Gate rows are stacked `[i, f, g, o]`.
#[derive(Clone, Copy)]
pub struct LstmWeights<'a> {
    pub wx: &'a [f64],
    pub wh: &'a [f64],
    pub b: &'a [f64],
    pub input: usize,
    pub hidden: usize,
}

/// Everything backward needs from a forward pass.
#[derive(Clone, Debug, Default)]
pub struct LstmTrace {
    pub steps: usize,
    /// `steps × input`.
    pub xs: Vec<f64>,
    /// Activated gates, `steps × 4H`.
    pub gates: Vec<f64>,
    /// Cell states, `steps × H`.
    pub cs: Vec<f64>,
    /// `tanh(c)`, `steps × H`.
    pub tanh_c: Vec<f64>,
    /// Hidden outputs, `steps × H`.
    pub hs: Vec<f64>,
}

/// Runs the cell over `xs` (`steps × input`) from zero state.
pub fn forward(w: &LstmWeights, xs: Vec<f64>, steps: usize) -> LstmTrace {
    let h = w.hidden;
    let g4 = 4 * h;
    let mut gates = vec![0.0; steps * g4];
    gemm(false, true, steps, g4, w.input, 1.0, &xs, w.wx, 0.0, &mut gates);
    let mut cs = vec![0.0; steps * h];
    let mut tanh_c = vec![0.0; steps * h];
    let mut hs = vec![0.0; steps * h];
    for t in 0..steps {
        let (prev_h, prev_c) = if t == 0 {
            (None, None)
        } else {
            (Some(&hs[(t - 1) * h..t * h]), Some(&cs[(t - 1) * h..t * h]))
        };
        let z = &mut gates[t * g4..(t + 1) * g4];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = w.b[r];
            if let Some(hp) = prev_h {
                acc += w.wh[r * h..(r + 1) * h].iter().zip(hp).map(|(a, b)| a * b).sum::<f64>();
            }
            *zr += acc;
        }
        let mut c_new = vec![0.0; h];
        for u in 0..h {
            let i = sigmoid(z[u]);
            let f = sigmoid(z[h + u]);
            let g = z[2 * h + u].tanh();
            let o = sigmoid(z[3 * h + u]);
            z[u] = i;
            z[h + u] = f;
            z[2 * h + u] = g;
            z[3 * h + u] = o;
            c_new[u] = f * prev_c.map_or(0.0, |c| c[u]) + i * g;
        }
        for u in 0..h {
            let tc = c_new[u].tanh();
            cs[t * h + u] = c_new[u];
            tanh_c[t * h + u] = tc;
            hs[t * h + u] = gates[t * g4 + 3 * h + u] * tc;
        }
    }
    LstmTrace {
        steps,
        xs,
        gates,
        cs,
        tanh_c,
        hs,
    }
}

/// Full backpropagation through time. `dhs` is the gradient on every hidden
/// output. Accumulates into the weight gradients and returns `d xs`.
pub fn backward(w: &LstmWeights, tr: &LstmTrace, dhs: &[f64], dwx: &mut [f64], dwh: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let h = w.hidden;
    let g4 = 4 * h;
    let steps = tr.steps;
    let mut dz = vec![0.0; steps * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for t in (0..steps).rev() {
        let gate = &tr.gates[t * g4..(t + 1) * g4];
        let dzt = &mut dz[t * g4..(t + 1) * g4];
        for u in 0..h {
            let (i, f, g, o) = (gate[u], gate[h + u], gate[2 * h + u], gate[3 * h + u]);
            let tc = tr.tanh_c[t * h + u];
            let dh = dhs[t * h + u] + dh_next[u];
            let d_o = dh * tc;
            let dc = dc_next[u] + dh * o * (1.0 - tc * tc);
            let c_prev = if t == 0 { 0.0 } else { tr.cs[(t - 1) * h + u] };
            dzt[u] = dc * g * i * (1.0 - i);
            dzt[h + u] = dc * c_prev * f * (1.0 - f);
            dzt[2 * h + u] = dc * i * (1.0 - g * g);
            dzt[3 * h + u] = d_o * o * (1.0 - o);
            dc_next[u] = dc * f;
        }
        dh_next.fill(0.0);
        if t > 0 {
            for (r, &d) in dzt.iter().enumerate() {
                if d != 0.0 {
                    for (acc, wv) in dh_next.iter_mut().zip(&w.wh[r * h..(r + 1) * h]) {
                        *acc += d * wv;
                    }
                }
            }
        }
    }
    // Weight gradients in bulk.
    gemm(true, false, g4, w.input, steps, 1.0, &dz, &tr.xs, 1.0, dwx);
    if steps > 1 {
        gemm(true, false, g4, h, steps - 1, 1.0, &dz[g4..], &tr.hs[..(steps - 1) * h], 1.0, dwh);
    }
    for t in 0..steps {
        for (acc, d) in db.iter_mut().zip(&dz[t * g4..(t + 1) * g4]) {
            *acc += d;
        }
    }
    let mut dxs = vec![0.0; steps * w.input];
    gemm(false, false, steps, w.input, g4, 1.0, &dz, w.wx, 0.0, &mut dxs);
    dxs
}
