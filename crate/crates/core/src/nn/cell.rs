use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{LayerParams, LayerState};
use super::{NnError, Scalar};

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Activations kept from one forward step for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum StepCache<T> {
    Lstm {
        input: Array2<T>,
        h_prev: Array2<T>,
        c_prev: Array2<T>,
        /// activated `[i | f | g | o]`
        gates: Array2<T>,
        tanh_c: Array2<T>,
    },
    Gru {
        input: Array2<T>,
        h_prev: Array2<T>,
        /// activated `[z | r | candidate]`
        gates: Array2<T>,
        /// r ⊙ h_prev
        rh: Array2<T>,
    },
}

/// Pre-activations `x·W + h·U + b` for all gate blocks.
fn affine<T: Scalar>(
    layer: &LayerParams<T>,
    x: ArrayView2<'_, T>,
    h: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut a = x.dot(&layer.w);
    general_mat_mul(T::one(), &h, &layer.u, T::one(), &mut a);
    a += &layer.b;
    a
}

pub(crate) fn lstm_forward<T: Scalar>(
    layer: &LayerParams<T>,
    x: ArrayView2<'_, T>,
    h: ArrayView2<'_, T>,
    c: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>, Array2<T>) {
    let hidden = h.ncols();
    let mut gates = affine(layer, x, h);
    let mut c_new = Array2::zeros(c.raw_dim());
    let mut tanh_c = Array2::zeros(c.raw_dim());
    let mut h_new = Array2::zeros(c.raw_dim());
    for (lane, mut g) in gates.axis_iter_mut(Axis(0)).enumerate() {
        let g = g.as_slice_mut().expect("row-major gates");
        for j in 0..hidden {
            let i = sigmoid(g[j]);
            let f = sigmoid(g[hidden + j]);
            let cand = g[2 * hidden + j].tanh();
            let o = sigmoid(g[3 * hidden + j]);
            g[j] = i;
            g[hidden + j] = f;
            g[2 * hidden + j] = cand;
            g[3 * hidden + j] = o;
            let cn = f * c[[lane, j]] + i * cand;
            let tc = cn.tanh();
            c_new[[lane, j]] = cn;
            tanh_c[[lane, j]] = tc;
            h_new[[lane, j]] = o * tc;
        }
    }
    (h_new, c_new, gates, tanh_c)
}

pub(crate) fn gru_forward<T: Scalar>(
    layer: &LayerParams<T>,
    x: ArrayView2<'_, T>,
    h: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let hidden = h.ncols();
    let mut gates = x.dot(&layer.w);
    gates += &layer.b;
    {
        let mut zr = gates.slice_mut(s![.., ..2 * hidden]);
        general_mat_mul(
            T::one(),
            &h,
            &layer.u.slice(s![.., ..2 * hidden]),
            T::one(),
            &mut zr,
        );
        zr.mapv_inplace(sigmoid);
    }
    let rh = &gates.slice(s![.., hidden..2 * hidden]) * &h;
    {
        let mut cand = gates.slice_mut(s![.., 2 * hidden..]);
        general_mat_mul(
            T::one(),
            &rh,
            &layer.u.slice(s![.., 2 * hidden..]),
            T::one(),
            &mut cand,
        );
        cand.mapv_inplace(T::tanh);
    }
    let mut h_new = Array2::zeros(h.raw_dim());
    for (lane, g) in gates.axis_iter(Axis(0)).enumerate() {
        for j in 0..hidden {
            let z = g[j];
            let cand = g[2 * hidden + j];
            h_new[[lane, j]] = (T::one() - z) * h[[lane, j]] + z * cand;
        }
    }
    (h_new, gates, rh)
}

/// Backward through one cached step. Accumulates weight gradients into
/// `grads` and returns `(d_input, d_h_prev, d_c_prev)`.
pub(crate) fn step_backward<T: Scalar>(
    layer: &LayerParams<T>,
    grads: &mut LayerParams<T>,
    cache: &StepCache<T>,
    dh: &Array2<T>,
    dc_next: Option<&Array2<T>>,
) -> (Array2<T>, Array2<T>, Option<Array2<T>>) {
    let hidden = dh.ncols();
    let one = T::one();
    match cache {
        StepCache::Lstm {
            input,
            h_prev,
            c_prev,
            gates,
            tanh_c,
        } => {
            let mut da = Array2::zeros(gates.raw_dim());
            let mut dc_prev = Array2::zeros(dh.raw_dim());
            for (lane, (g, mut d)) in gates
                .axis_iter(Axis(0))
                .zip(da.axis_iter_mut(Axis(0)))
                .enumerate()
            {
                for j in 0..hidden {
                    let (i, f, cand, o) =
                        (g[j], g[hidden + j], g[2 * hidden + j], g[3 * hidden + j]);
                    let tc = tanh_c[[lane, j]];
                    let dhv = dh[[lane, j]];
                    let d_o = dhv * tc;
                    let mut dc = dhv * o * (one - tc * tc);
                    if let Some(next) = dc_next {
                        dc += next[[lane, j]];
                    }
                    d[j] = dc * cand * i * (one - i);
                    d[hidden + j] = dc * c_prev[[lane, j]] * f * (one - f);
                    d[2 * hidden + j] = dc * i * (one - cand * cand);
                    d[3 * hidden + j] = d_o * o * (one - o);
                    dc_prev[[lane, j]] = dc * f;
                }
            }
            general_mat_mul(one, &input.t(), &da, one, &mut grads.w);
            general_mat_mul(one, &h_prev.t(), &da, one, &mut grads.u);
            grads.b += &da.sum_axis(Axis(0));
            let dh_prev = da.dot(&layer.u.t());
            let dx = da.dot(&layer.w.t());
            (dx, dh_prev, Some(dc_prev))
        }
        StepCache::Gru {
            input,
            h_prev,
            gates,
            rh,
        } => {
            let mut da = Array2::zeros(gates.raw_dim());
            let mut dh_prev = Array2::zeros(dh.raw_dim());
            for (lane, (g, mut d)) in gates
                .axis_iter(Axis(0))
                .zip(da.axis_iter_mut(Axis(0)))
                .enumerate()
            {
                for j in 0..hidden {
                    let (z, cand) = (g[j], g[2 * hidden + j]);
                    let dhv = dh[[lane, j]];
                    let hp = h_prev[[lane, j]];
                    d[j] = dhv * (cand - hp) * z * (one - z);
                    d[2 * hidden + j] = dhv * z * (one - cand * cand);
                    dh_prev[[lane, j]] = dhv * (one - z);
                }
            }
            let u_cand = layer.u.slice(s![.., 2 * hidden..]);
            let d_rh = da.slice(s![.., 2 * hidden..]).dot(&u_cand.t());
            {
                let mut gu = grads.u.slice_mut(s![.., 2 * hidden..]);
                general_mat_mul(one, &rh.t(), &da.slice(s![.., 2 * hidden..]), one, &mut gu);
            }
            for (lane, (g, mut d)) in gates
                .axis_iter(Axis(0))
                .zip(da.axis_iter_mut(Axis(0)))
                .enumerate()
            {
                for j in 0..hidden {
                    let r = g[hidden + j];
                    let drh = d_rh[[lane, j]];
                    d[hidden + j] = drh * h_prev[[lane, j]] * r * (one - r);
                    dh_prev[[lane, j]] += drh * r;
                }
            }
            let da_zr = da.slice(s![.., ..2 * hidden]);
            {
                let mut gu = grads.u.slice_mut(s![.., ..2 * hidden]);
                general_mat_mul(one, &h_prev.t(), &da_zr, one, &mut gu);
            }
            general_mat_mul(
                one,
                &da_zr,
                &layer.u.slice(s![.., ..2 * hidden]).t(),
                one,
                &mut dh_prev,
            );
            general_mat_mul(one, &input.t(), &da, one, &mut grads.w);
            grads.b += &da.sum_axis(Axis(0));
            let dx = da.dot(&layer.w.t());
            (dx, dh_prev, None)
        }
    }
}

fn check_shape(what: &'static str, expected: [usize; 2], got: &[usize]) -> Result<(), NnError> {
    if got != expected {
        return Err(NnError::Shape {
            what,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

fn check_layer<T: Scalar>(
    layer: &LayerParams<T>,
    gates: usize,
    state: &LayerState<T>,
    x: &ArrayView2<'_, T>,
) -> Result<usize, NnError> {
    let hidden = layer.u.nrows();
    let lanes = state.h.nrows();
    check_shape(
        "recurrent weights",
        [hidden, gates * hidden],
        layer.u.shape(),
    )?;
    check_shape(
        "input weights",
        [x.ncols(), gates * hidden],
        layer.w.shape(),
    )?;
    check_shape("hidden state", [lanes, hidden], state.h.shape())?;
    check_shape("input", [lanes, layer.w.nrows()], x.shape())?;
    if layer.b.len() != gates * hidden {
        return Err(NnError::Shape {
            what: "bias",
            expected: vec![gates * hidden],
            got: vec![layer.b.len()],
        });
    }
    Ok(hidden)
}

/// One LSTM step for every lane: returns the new hidden output and state.
pub fn lstm_step<T: Scalar>(
    layer: &LayerParams<T>,
    state: &LayerState<T>,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, LayerState<T>), NnError> {
    let hidden = check_layer(layer, 4, state, &x)?;
    let c = state.c.as_ref().ok_or(NnError::Shape {
        what: "cell state",
        expected: vec![state.h.nrows(), hidden],
        got: vec![],
    })?;
    check_shape("cell state", [state.h.nrows(), hidden], c.shape())?;
    let (h, c, _, _) = lstm_forward(layer, x, state.h.view(), c.view());
    Ok((h.clone(), LayerState { h, c: Some(c) }))
}

/// One GRU step for every lane: returns the new hidden output and state.
pub fn gru_step<T: Scalar>(
    layer: &LayerParams<T>,
    state: &LayerState<T>,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, LayerState<T>), NnError> {
    check_layer(layer, 3, state, &x)?;
    let (h, _, _) = gru_forward(layer, x, state.h.view());
    Ok((h.clone(), LayerState { h, c: None }))
}
