//! Forward recording and reverse-mode gradients for one modality's predictor
//! over one trajectory.

use crate::error::{shape, Result};
use crate::numerics::{masked_softmax, Matrix};
use crate::ran_model::{clamped_sigma, gru_forward, GruParams, GruTrace};
use crate::Predictor;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// What a masked step does to the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GapRule {
    /// Leave hidden state and memory untouched.
    Freeze,
    /// Feed the predicted mean back in as if it had been observed. The first
    /// `offset_dims` components are displacements: the next observation is
    /// re-expressed relative to the position reached by the fed-back means.
    FollowMean { offset_dims: usize },
}

struct PredRecord {
    /// Index of the newest input (and of the hidden state) the prediction used.
    at: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    clamped: Vec<bool>,
    mu: Vec<f64>,
    target: Option<Vec<f64>>,
    /// Masked predictions whose displacements were subtracted from `target`.
    shifted_by: Vec<usize>,
}

pub(crate) struct ModalityTape {
    inputs: Vec<Vec<f64>>,
    /// Prediction whose mean became this input, for masked steps.
    source: Vec<Option<usize>>,
    hidden: Vec<Vec<f64>>,
    /// `traces[j - 1]` records the GRU step producing `hidden[j]`.
    traces: Vec<GruTrace<f64>>,
    preds: Vec<PredRecord>,
    offset_dims: usize,
    pub loss: f64,
    /// Per-step losses in order, one per observed step.
    pub step_losses: Vec<f64>,
}

fn gru_of(pred: &Predictor) -> Option<&GruParams<f64>> {
    match pred {
        Predictor::Ran(p) => Some(&p.gru),
        Predictor::GruDirect(p) => Some(&p.gru),
        _ => None,
    }
}

fn gru_of_mut(pred: &mut Predictor) -> Option<&mut GruParams<f64>> {
    match pred {
        Predictor::Ran(p) => Some(&mut p.gru),
        Predictor::GruDirect(p) => Some(&mut p.gru),
        _ => None,
    }
}

fn affine(weight: &Matrix<f64>, bias: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let mut raw = weight.matvec(h)?.into_inner();
    for (r, b) in raw.iter_mut().zip(bias) {
        *r += b;
    }
    Ok(raw)
}

fn sigmas(log_sigma: &[f64]) -> (Vec<f64>, Vec<bool>) {
    log_sigma.iter().map(|&s| clamped_sigma(s)).unzip()
}

fn mixture(inputs: &[Vec<f64>], at: usize, alpha: &[f64]) -> Vec<f64> {
    let mut mu = vec![0.0; inputs[at].len()];
    for (k, &a) in alpha.iter().enumerate() {
        for (m, x) in mu.iter_mut().zip(&inputs[at - k]) {
            *m += a * x;
        }
    }
    mu
}

fn record(pred: &Predictor, inputs: &[Vec<f64>], h: &[f64], at: usize) -> Result<PredRecord> {
    let valid = (at + 1).min(pred.dims().capacity);
    let (alpha, log_sigma, mu) = match pred {
        Predictor::Ran(p) => {
            let raw = affine(&p.head.weight, &p.head.bias, h)?;
            let k = p.head.capacity;
            let alpha = masked_softmax(&raw[..k], valid)?.into_inner()[..valid].to_vec();
            let mu = mixture(inputs, at, &alpha);
            (alpha, raw[k..].to_vec(), mu)
        }
        Predictor::Tiv { params, .. } => {
            let alpha =
                masked_softmax(&params.alpha_logits, valid)?.into_inner()[..valid].to_vec();
            let mu = mixture(inputs, at, &alpha);
            (alpha, params.log_sigma.to_vec(), mu)
        }
        Predictor::Ave { params, .. } => {
            let alpha = vec![1.0 / valid as f64; valid];
            let mu = mixture(inputs, at, &alpha);
            (alpha, params.log_sigma.to_vec(), mu)
        }
        Predictor::GruDirect(p) => {
            let raw = affine(&p.head, &p.bias, h)?;
            let n = p.input_dim();
            (Vec::new(), raw[n..].to_vec(), raw[..n].to_vec())
        }
    };
    let (sigma, clamped) = sigmas(&log_sigma);
    Ok(PredRecord {
        at,
        alpha,
        sigma,
        clamped,
        mu,
        target: None,
        shifted_by: Vec::new(),
    })
}

fn nll(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&x, &m), &s)| {
            let z = (x - m) / s;
            s.ln() + HALF_LN_TWO_PI + 0.5 * z * z
        })
        .sum()
}

/// Runs `pred` over a trajectory. `steps[i]` is the observation after
/// `first`, or `None` where the step is masked out of the loss.
/// `mask` scales every new hidden state (recurrent dropout).
pub(crate) fn forward(
    pred: &Predictor,
    first: &[f64],
    steps: &[Option<&[f64]>],
    gap: GapRule,
    mask: Option<&[f64]>,
) -> Result<ModalityTape> {
    let dims = pred.dims();
    if first.len() != dims.input_dim || steps.iter().flatten().any(|x| x.len() != dims.input_dim)
    {
        return Err(shape(format!(
            "trajectory features do not match predictor input dimension {}",
            dims.input_dim
        )));
    }
    if mask.is_some_and(|m| m.len() != dims.hidden_dim) {
        return Err(shape("dropout mask does not match hidden dimension"));
    }
    let offset_dims = match gap {
        GapRule::Freeze => 0,
        GapRule::FollowMean { offset_dims } => offset_dims.min(dims.input_dim),
    };
    let mut tape = ModalityTape {
        inputs: vec![first.to_vec()],
        source: vec![None],
        hidden: vec![vec![0.0; dims.hidden_dim]],
        traces: Vec::new(),
        preds: Vec::new(),
        offset_dims,
        loss: 0.0,
        step_losses: Vec::new(),
    };
    let last_active = steps
        .iter()
        .rposition(|s| s.is_some() || gap != GapRule::Freeze);
    let mut pending: Vec<usize> = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        if step.is_none() && gap == GapRule::Freeze {
            continue;
        }
        let at = tape.inputs.len() - 1;
        let mut rec = record(pred, &tape.inputs, &tape.hidden[at], at)?;
        let next = match step {
            Some(x) => {
                let mut x = x.to_vec();
                for &g in &pending {
                    for c in 0..offset_dims {
                        x[c] -= tape.preds[g].mu[c];
                    }
                }
                rec.shifted_by = std::mem::take(&mut pending);
                let l = nll(&x, &rec.mu, &rec.sigma);
                tape.loss += l;
                tape.step_losses.push(l);
                rec.target = Some(x.clone());
                x
            }
            None => {
                pending.push(tape.preds.len());
                rec.mu.clone()
            }
        };
        let source = step.is_none().then_some(tape.preds.len());
        tape.preds.push(rec);
        if Some(i) == last_active {
            break;
        }
        let h = match gru_of(pred) {
            Some(gru) => {
                let trace = gru_forward(gru, &next, &tape.hidden[at])?;
                let mut h = trace.hidden.to_vec();
                if let Some(m) = mask {
                    for (v, s) in h.iter_mut().zip(m) {
                        *v *= s;
                    }
                }
                tape.traces.push(trace);
                h
            }
            None => tape.hidden[at].clone(),
        };
        tape.hidden.push(h);
        tape.inputs.push(next);
        tape.source.push(source);
    }
    Ok(tape)
}

fn add_scaled(acc: &mut [f64], factor: f64, v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += factor * x;
    }
}

fn add_transposed(acc: &mut [f64], m: &Matrix<f64>, v: &[f64]) -> Result<()> {
    let t = m.matvec_transposed(v)?;
    add_scaled(acc, 1.0, &t);
    Ok(())
}

/// Softmax backward restricted to the first `alpha.len()` logits.
fn softmax_backward(alpha: &[f64], dalpha: &[f64]) -> Vec<f64> {
    let inner: f64 = alpha.iter().zip(dalpha).map(|(a, d)| a * d).sum();
    alpha
        .iter()
        .zip(dalpha)
        .map(|(a, d)| a * (d - inner))
        .collect()
}

struct GruGrads<'a> {
    params: &'a GruParams<f64>,
    grads: &'a mut GruParams<f64>,
}

impl GruGrads<'_> {
    /// Returns `(d h_prev, d x)` and accumulates parameter gradients.
    fn step(
        &mut self,
        trace: &GruTrace<f64>,
        x: &[f64],
        h_prev: &[f64],
        dh: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.params;
        let d = h_prev.len();
        let (z, r, c) = (&trace.update, &trace.reset, &trace.candidate);
        let mut dh_prev: Vec<f64> = (0..d).map(|i| dh[i] * (1.0 - z[i])).collect();
        let da_z: Vec<f64> = (0..d)
            .map(|i| dh[i] * (c[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
            .collect();
        let da_c: Vec<f64> = (0..d)
            .map(|i| dh[i] * z[i] * (1.0 - c[i] * c[i]))
            .collect();
        let gated: Vec<f64> = (0..d).map(|i| r[i] * h_prev[i]).collect();
        let d_gated = p.u_candidate.matvec_transposed(&da_c)?;
        let da_r: Vec<f64> = (0..d)
            .map(|i| d_gated[i] * h_prev[i] * r[i] * (1.0 - r[i]))
            .collect();
        for i in 0..d {
            dh_prev[i] += d_gated[i] * r[i];
        }
        add_transposed(&mut dh_prev, &p.u_update, &da_z)?;
        add_transposed(&mut dh_prev, &p.u_reset, &da_r)?;

        let mut dx = vec![0.0; x.len()];
        add_transposed(&mut dx, &p.w_update, &da_z)?;
        add_transposed(&mut dx, &p.w_reset, &da_r)?;
        add_transposed(&mut dx, &p.w_candidate, &da_c)?;

        let g = &mut *self.grads;
        g.w_update.add_outer(&da_z, x)?;
        g.w_reset.add_outer(&da_r, x)?;
        g.w_candidate.add_outer(&da_c, x)?;
        g.u_update.add_outer(&da_z, h_prev)?;
        g.u_reset.add_outer(&da_r, h_prev)?;
        g.u_candidate.add_outer(&da_c, &gated)?;
        Ok((dh_prev, dx))
    }
}

/// Gradient of `tape.loss` with respect to every parameter of `pred`,
/// returned in a predictor of the same shape.
pub(crate) fn backward(
    pred: &Predictor,
    tape: &ModalityTape,
    mask: Option<&[f64]>,
) -> Result<Predictor> {
    let mut grads = pred.zeroed();
    let last = tape.inputs.len() - 1;
    let n = pred.dims().input_dim;
    let mut dh: Vec<Vec<f64>> = tape.hidden.iter().map(|h| vec![0.0; h.len()]).collect();
    let mut dinput: Vec<Vec<f64>> = tape.inputs.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut dmu_extra: Vec<Vec<f64>> = vec![vec![0.0; n]; tape.preds.len()];
    let mut pred_at: Vec<Option<usize>> = vec![None; last + 1];
    for (i, p) in tape.preds.iter().enumerate() {
        pred_at[p.at] = Some(i);
    }

    for j in (0..=last).rev() {
        if let Some(pi) = pred_at[j] {
            let rec = &tape.preds[pi];
            let mut dmu = std::mem::take(&mut dmu_extra[pi]);
            let mut dlog_sigma = vec![0.0; n];
            if let Some(x) = &rec.target {
                // gradient with respect to the (shifted) observation itself
                let mut dtarget = vec![0.0; n];
                for i in 0..n {
                    let e = x[i] - rec.mu[i];
                    let s = rec.sigma[i];
                    dmu[i] -= e / (s * s);
                    dtarget[i] = e / (s * s);
                    if !rec.clamped[i] {
                        let z = e / s;
                        dlog_sigma[i] = 1.0 - z * z;
                    }
                }
                if j < last {
                    add_scaled(&mut dtarget, 1.0, &dinput[j + 1]);
                }
                for &g in &rec.shifted_by {
                    for c in 0..tape.offset_dims {
                        dmu_extra[g][c] -= dtarget[c];
                    }
                }
            }
            if j < last && tape.source[j + 1] == Some(pi) {
                add_scaled(&mut dmu, 1.0, &dinput[j + 1]);
            }
            let dalpha: Vec<f64> = (0..rec.alpha.len())
                .map(|k| tape.inputs[j - k].iter().zip(&dmu).map(|(x, d)| x * d).sum())
                .collect();
            for (k, &a) in rec.alpha.iter().enumerate() {
                add_scaled(&mut dinput[j - k], a, &dmu);
            }
            match (&mut grads, pred) {
                (Predictor::Ran(g), Predictor::Ran(p)) => {
                    let mut draw = vec![0.0; p.head.capacity + n];
                    draw[..rec.alpha.len()].copy_from_slice(&softmax_backward(&rec.alpha, &dalpha));
                    draw[p.head.capacity..].copy_from_slice(&dlog_sigma);
                    g.head.weight.add_outer(&draw, &tape.hidden[j])?;
                    add_scaled(&mut g.head.bias, 1.0, &draw);
                    add_transposed(&mut dh[j], &p.head.weight, &draw)?;
                }
                (Predictor::GruDirect(g), Predictor::GruDirect(p)) => {
                    let mut draw = dmu.clone();
                    draw.extend_from_slice(&dlog_sigma);
                    g.head.add_outer(&draw, &tape.hidden[j])?;
                    add_scaled(&mut g.bias, 1.0, &draw);
                    add_transposed(&mut dh[j], &p.head, &draw)?;
                }
                (Predictor::Tiv { params: g, .. }, Predictor::Tiv { .. }) => {
                    let dz = softmax_backward(&rec.alpha, &dalpha);
                    add_scaled(&mut g.alpha_logits[..dz.len()], 1.0, &dz);
                    add_scaled(&mut g.log_sigma, 1.0, &dlog_sigma);
                }
                (Predictor::Ave { params: g, .. }, Predictor::Ave { .. }) => {
                    add_scaled(&mut g.log_sigma, 1.0, &dlog_sigma);
                }
                _ => unreachable!("gradient container matches predictor kind"),
            }
        }
        if j == 0 {
            break;
        }
        if let (Some(params), Some(g)) = (gru_of(pred), gru_of_mut(&mut grads)) {
            let mut dh_raw = dh[j].clone();
            if let Some(m) = mask {
                for (v, s) in dh_raw.iter_mut().zip(m) {
                    *v *= s;
                }
            }
            let (dh_prev, dx) = GruGrads { params, grads: g }.step(
                &tape.traces[j - 1],
                &tape.inputs[j],
                &tape.hidden[j - 1],
                &dh_raw,
            )?;
            add_scaled(&mut dh[j - 1], 1.0, &dh_prev);
            add_scaled(&mut dinput[j], 1.0, &dx);
        }
    }
    Ok(grads)
}
