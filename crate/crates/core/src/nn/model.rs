use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::cell::{gru_forward, lstm_forward, step_backward, StepCache};
use super::params::{ModelParams, ModelState, StepGrads};
use super::{CellType, NnError, Scalar};

/// Everything the backward pass needs from one forward window.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    x: Array2<usize>,
    y: Array2<usize>,
    /// `steps[t][layer]`
    steps: Vec<Vec<StepCache<T>>>,
    /// top-layer output per step, lanes × hidden
    top: Vec<Array2<T>>,
    /// softmax per step, lanes × vocab
    probs: Vec<Array2<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Mean cross-entropy in nats over every lane and step.
    pub loss: f64,
    /// Per step, lanes × vocab.
    pub logits: Vec<Array2<T>>,
    pub state: ModelState<T>,
    pub cache: ForwardCache<T>,
}

fn check_tokens(tokens: &ArrayView2<'_, usize>, vocab: usize) -> Result<(), NnError> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&index) => Err(NnError::TokenOutOfRange { index, vocab }),
        None => Ok(()),
    }
}

fn check_state<T: Scalar>(
    params: &ModelParams<T>,
    state: &ModelState<T>,
    lanes: usize,
) -> Result<(), NnError> {
    let cfg = &params.config;
    let ok = state.layers.len() == cfg.layers
        && state.layers.iter().all(|l| {
            l.h.shape() == [lanes, cfg.hidden]
                && match cfg.cell {
                    CellType::Lstm => {
                        l.c.as_ref()
                            .is_some_and(|c| c.shape() == [lanes, cfg.hidden])
                    }
                    CellType::Gru => l.c.is_none(),
                }
        });
    if ok {
        Ok(())
    } else {
        Err(NnError::Shape {
            what: "model state",
            expected: vec![cfg.layers, lanes, cfg.hidden],
            got: vec![
                state.layers.len(),
                state.lanes(),
                state.layers.first().map_or(0, |l| l.h.ncols()),
            ],
        })
    }
}

fn embed<T: Scalar>(
    params: &ModelParams<T>,
    tokens: impl Iterator<Item = usize>,
    lanes: usize,
) -> Array2<T> {
    let mut out = Array2::zeros((lanes, params.config.embedding));
    for (mut row, t) in out.axis_iter_mut(Axis(0)).zip(tokens) {
        row.assign(&params.embedding.row(t));
    }
    out
}

/// Advances every layer by one token per lane. Returns the top-layer output.
fn advance<T: Scalar>(
    params: &ModelParams<T>,
    state: &mut ModelState<T>,
    input: Array2<T>,
    mut cache: Option<&mut Vec<StepCache<T>>>,
) -> Array2<T> {
    let mut x = input;
    for (layer, st) in params.layers.iter().zip(state.layers.iter_mut()) {
        let h_new = match params.config.cell {
            CellType::Lstm => {
                let c = st.c.as_ref().expect("lstm state has cell memory");
                let (h_new, c_new, gates, tanh_c) =
                    lstm_forward(layer, x.view(), st.h.view(), c.view());
                let c_prev = std::mem::replace(st.c.as_mut().unwrap(), c_new);
                if let Some(cache) = cache.as_deref_mut() {
                    cache.push(StepCache::Lstm {
                        input: x,
                        h_prev: st.h.clone(),
                        c_prev,
                        gates,
                        tanh_c,
                    });
                }
                h_new
            }
            CellType::Gru => {
                let (h_new, gates, rh) = gru_forward(layer, x.view(), st.h.view());
                if let Some(cache) = cache.as_deref_mut() {
                    cache.push(StepCache::Gru {
                        input: x,
                        h_prev: st.h.clone(),
                        gates,
                        rh,
                    });
                }
                h_new
            }
        };
        st.h.assign(&h_new);
        x = h_new;
    }
    x
}

fn project<T: Scalar>(params: &ModelParams<T>, top: &Array2<T>) -> Array2<T> {
    let mut logits = top.dot(&params.dense_w);
    logits += &params.dense_b;
    logits
}

/// Softmax of each row in place; returns the summed −log p[target].
fn softmax_xent<T: Scalar>(logits: &mut Array2<T>, targets: impl Iterator<Item = usize>) -> f64 {
    let mut total = 0.0;
    for (mut row, y) in logits.axis_iter_mut(Axis(0)).zip(targets) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let target = row[y] - max;
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        total += (sum.ln() - target).to_f64().unwrap_or(f64::NAN);
        row.mapv_inplace(|e| e / sum);
    }
    total
}

/// Loss, per-step logits, final state and (when kept) the backward cache.
type RunOutput<T> = (f64, Vec<Array2<T>>, ModelState<T>, Option<ForwardCache<T>>);

fn run<T: Scalar>(
    params: &ModelParams<T>,
    state: &ModelState<T>,
    x: ArrayView2<'_, usize>,
    y: ArrayView2<'_, usize>,
    keep: bool,
) -> Result<RunOutput<T>, NnError> {
    let vocab = params.config.vocab;
    if x.shape() != y.shape() {
        return Err(NnError::Shape {
            what: "targets",
            expected: x.shape().to_vec(),
            got: y.shape().to_vec(),
        });
    }
    check_tokens(&x, vocab)?;
    check_tokens(&y, vocab)?;
    let (lanes, steps) = x.dim();
    check_state(params, state, lanes)?;

    let mut state = state.clone();
    let mut total = 0.0;
    let mut logits_out = Vec::with_capacity(if keep { steps } else { 0 });
    let mut cache = keep.then(|| ForwardCache {
        x: x.to_owned(),
        y: y.to_owned(),
        steps: Vec::with_capacity(steps),
        top: Vec::with_capacity(steps),
        probs: Vec::with_capacity(steps),
    });
    for t in 0..steps {
        let input = embed(params, x.column(t).iter().copied(), lanes);
        let mut step_cache = Vec::new();
        let top = advance(
            params,
            &mut state,
            input,
            cache.is_some().then_some(&mut step_cache),
        );
        let logits = project(params, &top);
        match cache.as_mut() {
            Some(c) => {
                let mut probs = logits.clone();
                total += softmax_xent(&mut probs, y.column(t).iter().copied());
                logits_out.push(logits);
                c.steps.push(step_cache);
                c.top.push(top);
                c.probs.push(probs);
            }
            None => {
                let mut probs = logits;
                total += softmax_xent(&mut probs, y.column(t).iter().copied());
            }
        }
    }
    let loss = total / (lanes * steps).max(1) as f64;
    Ok((loss, logits_out, state, cache))
}

/// Runs `x` (lanes × steps) through the model from `state` and scores it
/// against `y`. The input state is left untouched; the final state is
/// returned.
pub fn forward_sequence<T: Scalar>(
    params: &ModelParams<T>,
    state: &ModelState<T>,
    x: ArrayView2<'_, usize>,
    y: ArrayView2<'_, usize>,
) -> Result<ForwardOutput<T>, NnError> {
    let (loss, logits, state, cache) = run(params, state, x, y, true)?;
    Ok(ForwardOutput {
        loss,
        logits,
        state,
        cache: cache.expect("cache kept"),
    })
}

/// Loss and final state only, without keeping activations.
pub fn forward_loss<T: Scalar>(
    params: &ModelParams<T>,
    state: &ModelState<T>,
    x: ArrayView2<'_, usize>,
    y: ArrayView2<'_, usize>,
) -> Result<(f64, ModelState<T>), NnError> {
    let (loss, _, state, _) = run(params, state, x, y, false)?;
    Ok((loss, state))
}

/// Feeds one token per lane and returns the next-token logits.
pub fn predict_step<T: Scalar>(
    params: &ModelParams<T>,
    state: &mut ModelState<T>,
    tokens: &[usize],
) -> Result<Array2<T>, NnError> {
    let vocab = params.config.vocab;
    if let Some(&index) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(NnError::TokenOutOfRange { index, vocab });
    }
    check_state(params, state, tokens.len())?;
    let input = embed(params, tokens.iter().copied(), tokens.len());
    let top = advance(params, state, input, None);
    Ok(project(params, &top))
}

/// Exact gradient of the mean loss of a cached window. The state entering
/// the window is treated as a constant.
pub fn backward_sequence<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
) -> StepGrads<T> {
    let mut grads = params.zeros_like();
    let (lanes, steps) = cache.x.dim();
    let scale = T::one() / T::lit((lanes * steps).max(1) as f64);
    let one = T::one();

    // d loss / d top-layer output, per step
    let mut upstream: Vec<Array2<T>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut d = cache.probs[t].clone();
        for (mut row, target) in d.axis_iter_mut(Axis(0)).zip(cache.y.column(t)) {
            row[*target] -= one;
        }
        d.mapv_inplace(|v| v * scale);
        general_mat_mul(one, &cache.top[t].t(), &d, one, &mut grads.dense_w);
        grads.dense_b += &d.sum_axis(Axis(0));
        upstream.push(d.dot(&params.dense_w.t()));
    }

    for layer in (0..params.layers.len()).rev() {
        let mut dh_next: Option<Array2<T>> = None;
        let mut dc_next: Option<Array2<T>> = None;
        for t in (0..steps).rev() {
            let mut dh = std::mem::replace(&mut upstream[t], Array2::zeros((0, 0)));
            if let Some(next) = &dh_next {
                dh += next;
            }
            let (dx, dh_prev, dc_prev) = step_backward(
                &params.layers[layer],
                &mut grads.layers[layer],
                &cache.steps[t][layer],
                &dh,
                dc_next.as_ref(),
            );
            upstream[t] = dx;
            dh_next = Some(dh_prev);
            dc_next = dc_prev;
        }
    }

    for (t, up) in upstream.iter().enumerate() {
        for (lane, &token) in cache.x.column(t).iter().enumerate() {
            let mut row = grads.embedding.row_mut(token);
            row += &up.row(lane);
        }
    }
    grads
}
