//! Scalar-loop reference implementations of the attention operations and
//! gating layers, written directly from the equations with no tape
//! machinery. They give the test suite and the `oracle-check` CLI an
//! independent route to the same numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    multi_head_attention, relative_multi_head_attention, sinusoid_table, AttentionParams,
};
use crate::blocks::{apply_gate, init_gate, GateKind, GateParams, LAYER_NORM_EPS};
use crate::error::Result;
use crate::tensor::{max_abs_diff, Tape, Tensor};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// (row · M)[c] for a [D_in, D_out] matrix.
fn matvec(m: &Tensor, row: &[f64], c: usize) -> f64 {
    let d_in = m.shape[0];
    let d_out = m.shape[1];
    debug_assert!(c < d_out);
    let mut acc = 0.0;
    for j in 0..d_in {
        acc += row[j] * m.data[j * d_out + c];
    }
    acc
}

fn unit_layer_norm_rows(x: &mut [f64], rows: usize, d: usize) {
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Plain multi-head attention reference: every projection, score, softmax
/// and contraction materialized with explicit loops, then residual and unit
/// layer norm.
pub fn plain_mha_reference(e: &Tensor, p: &AttentionParams) -> Tensor {
    let (t_len, d_model) = (e.shape[0], e.shape[1]);
    let (h, d) = (p.heads, p.head_dim);
    let hd = h * d;

    let project = |w: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; t_len * hd];
        for t in 0..t_len {
            let row = &e.data[t * d_model..(t + 1) * d_model];
            for j in 0..hd {
                out[t * hd + j] = matvec(w, row, j);
            }
        }
        out
    };
    let q2 = project(&p.w_q);
    let k2 = project(&p.w_k);
    let v2 = project(&p.w_v);

    let mut merged = vec![0.0; t_len * hd];
    for hh in 0..h {
        for t in 0..t_len {
            // causal scores over m <= t
            let mut scores = Vec::with_capacity(t + 1);
            for m in 0..=t {
                let mut s = 0.0;
                for dd in 0..d {
                    s += q2[t * hd + hh * d + dd] * k2[m * hd + hh * d + dd];
                }
                scores.push(s);
            }
            let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - maxv).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for dd in 0..d {
                let mut acc = 0.0;
                for m in 0..=t {
                    acc += exps[m] / denom * v2[m * hd + hh * d + dd];
                }
                merged[t * hd + hh * d + dd] = acc;
            }
        }
    }

    let mut out = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        let row = &merged[t * hd..(t + 1) * hd];
        for c in 0..d_model {
            out[t * d_model + c] =
                e.data[t * d_model + c] + matvec(&p.w_o, row, c) + p.b_o.data[c];
        }
    }
    unit_layer_norm_rows(&mut out, t_len, d_model);
    Tensor::from_vec(vec![t_len, d_model], out).expect("shape fits")
}

/// Relative multi-head attention reference with all four score terms
/// (content-content, content-position, content bias, position bias)
/// materialized separately per (head, query, key).
pub fn relative_mha_reference(
    memory: Option<&Tensor>,
    e: &Tensor,
    p: &AttentionParams,
) -> Tensor {
    let (t_len, d_model) = (e.shape[0], e.shape[1]);
    let mem_len = memory.map_or(0, |m| m.shape[0]);
    let (h, d) = (p.heads, p.head_dim);
    let hd = h * d;
    let m_total = mem_len + t_len;

    // combined key/value source rows
    let mut source = Vec::with_capacity(m_total * d_model);
    if let Some(m) = memory {
        source.extend_from_slice(&m.data);
    }
    source.extend_from_slice(&e.data);

    let project_rows = |w: &Tensor, rows: &[f64], n: usize, width: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * hd];
        for t in 0..n {
            let row = &rows[t * width..(t + 1) * width];
            for j in 0..hd {
                out[t * hd + j] = matvec(w, row, j);
            }
        }
        out
    };
    let q2 = project_rows(&p.w_q, &e.data, t_len, d_model);
    let k2 = project_rows(&p.w_k, &source, m_total, d_model);
    let v2 = project_rows(&p.w_v, &source, m_total, d_model);

    let phi = sinusoid_table(m_total, d_model).expect("even width").phi;
    let r2 = project_rows(&p.w_r, &phi.data, m_total, d_model);

    let mut merged = vec![0.0; t_len * hd];
    for hh in 0..h {
        for t in 0..t_len {
            let allowed = mem_len + t + 1;
            let mut scores = Vec::with_capacity(allowed);
            for m in 0..allowed {
                let rel = mem_len + t - m;
                let mut content = 0.0;
                let mut position = 0.0;
                let mut content_bias = 0.0;
                let mut position_bias = 0.0;
                for dd in 0..d {
                    let q = q2[t * hd + hh * d + dd];
                    let k = k2[m * hd + hh * d + dd];
                    let r = r2[rel * hd + hh * d + dd];
                    let u = p.u.data[hh * d + dd];
                    let v = p.v.data[hh * d + dd];
                    content += q * k;
                    position += q * r;
                    content_bias += u * k;
                    position_bias += v * r;
                }
                scores.push(content + position + content_bias + position_bias);
            }
            let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - maxv).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for dd in 0..d {
                let mut acc = 0.0;
                for m in 0..allowed {
                    acc += exps[m] / denom * v2[m * hd + hh * d + dd];
                }
                merged[t * hd + hh * d + dd] = acc;
            }
        }
    }

    let mut out = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        let row = &merged[t * hd..(t + 1) * hd];
        for c in 0..d_model {
            out[t * d_model + c] =
                e.data[t * d_model + c] + matvec(&p.w_o, row, c) + p.b_o.data[c];
        }
    }
    unit_layer_norm_rows(&mut out, t_len, d_model);
    Tensor::from_vec(vec![t_len, d_model], out).expect("shape fits")
}

/// Gating-layer reference, one scalar at a time.
pub fn gate_reference(params: &GateParams, x: &Tensor, y: &Tensor) -> Tensor {
    let (t_len, d) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let xr = &x.data[t * d..(t + 1) * d];
        let yr = &y.data[t * d..(t + 1) * d];
        for c in 0..d {
            out[t * d + c] = match params {
                GateParams::Residual => xr[c] + yr[c],
                GateParams::Input { w_g } => sigmoid(matvec(w_g, xr, c)) * xr[c] + yr[c],
                GateParams::Output { w_g, b_g } => {
                    xr[c] + sigmoid(matvec(w_g, xr, c) - b_g.data[0]) * yr[c]
                }
                GateParams::Highway { w_g, b_g } => {
                    let s = sigmoid(matvec(w_g, xr, c) + b_g.data[0]);
                    s * xr[c] + (1.0 - s) * yr[c]
                }
                GateParams::SigTanh { w_g, u_g, b_g } => {
                    xr[c]
                        + sigmoid(matvec(w_g, yr, c) - b_g.data[0]) * matvec(u_g, yr, c).tanh()
                }
                GateParams::Gru { w_r, u_r, w_z, u_z, w_g, u_g, b_g } => {
                    let z = sigmoid(matvec(w_z, yr, c) + matvec(u_z, xr, c) - b_g.data[0]);
                    let rx: Vec<f64> = (0..d)
                        .map(|cc| sigmoid(matvec(w_r, yr, cc) + matvec(u_r, xr, cc)) * xr[cc])
                        .collect();
                    let h = (matvec(w_g, yr, c) + matvec(u_g, &rx, c)).tanh();
                    (1.0 - z) * xr[c] + z * h
                }
            };
        }
    }
    Tensor::from_vec(vec![t_len, d], out).expect("shape fits")
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_err: f64,
    pub tol: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_err.is_finite() && self.max_abs_err < self.tol
    }
}

fn random_embedding(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(vec![t, d], data).expect("shape fits")
}

/// Compare the tape implementations against the references at the canonical
/// desk sizes (plain MHA T=4 H=2 d=3; relative MHA T=4, mem 3, H=2, d=3;
/// every gate kind).
pub fn run_oracle_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let (heads, head_dim) = (2usize, 3usize);
    let d_model = heads * head_dim;
    let params = AttentionParams::init(d_model, heads, head_dim, &mut rng);

    let e = random_embedding(4, d_model, &mut rng);
    let mut tape = Tape::new();
    let ev = tape.constant(e.clone());
    let got = multi_head_attention(&mut tape, ev, &params)?;
    let want = plain_mha_reference(&e, &params);
    reports.push(OracleReport {
        name: "multi_head_attention[T=4,H=2,d=3]".to_string(),
        max_abs_err: max_abs_diff(&tape.value(got).data, &want.data),
        tol: 1e-10,
    });

    let mem = random_embedding(3, d_model, &mut rng);
    let e2 = random_embedding(4, d_model, &mut rng);
    let mut tape = Tape::new();
    let e2v = tape.constant(e2.clone());
    let got = relative_multi_head_attention(&mut tape, Some(&mem), e2v, &params)?;
    let want = relative_mha_reference(Some(&mem), &e2, &params);
    reports.push(OracleReport {
        name: "relative_multi_head_attention[T=4,mem=3,H=2,d=3]".to_string(),
        max_abs_err: max_abs_diff(&tape.value(got).data, &want.data),
        tol: 1e-10,
    });

    for kind in [
        GateKind::Residual,
        GateKind::Input,
        GateKind::Output,
        GateKind::Highway,
        GateKind::SigTanh,
        GateKind::Gru,
    ] {
        let gate = init_gate(kind, d_model, 1.7, &mut rng);
        let x = random_embedding(3, d_model, &mut rng);
        let y = random_embedding(3, d_model, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let vars = gate.inject(&mut tape);
        let got = apply_gate(&mut tape, &vars, xv, yv)?;
        let want = gate_reference(&gate, &x, &y);
        reports.push(OracleReport {
            name: format!("gate[{:?}]", kind),
            max_abs_err: max_abs_diff(&tape.value(got).data, &want.data),
            tol: 1e-12,
        });
    }

    Ok(reports)
}
