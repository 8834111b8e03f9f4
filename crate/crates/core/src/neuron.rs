//! Leaky integrate-and-fire dynamics with soft reset.
//!
//! Both neuron kinds share the membrane update
//!
//! ```text
//! U[t] = H[t-1] + X[t]
//! H[t] = beta * (U[t] - S[t])
//! ```
//!
//! and differ only in the firing function: the binary LIF fires `1` when
//! `U >= v_th`, the integer I-LIF emits `clip(round_half_up(U), 0, D)`.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Integer activations with a declared ceiling `D`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Shape4,
    values: Vec<u32>,
    ceiling: u32,
}

impl SpikeTensor {
    pub fn new(shape: impl Into<Shape4>, values: Vec<u32>, ceiling: u32) -> Result<Self> {
        let shape = shape.into();
        if values.len() != shape.len() {
            return Err(Error::dims("spike tensor data length", &[shape.len()], &[values.len()]));
        }
        if ceiling == 0 {
            return Err(Error::Codec("ceiling must be at least 1".into()));
        }
        if let Some(i) = values.iter().position(|&v| v > ceiling) {
            return Err(Error::Codec(format!(
                "value {} at element {i} exceeds ceiling {ceiling}",
                values[i]
            )));
        }
        Ok(SpikeTensor { shape, values, ceiling })
    }

    pub fn zeros(shape: impl Into<Shape4>, ceiling: u32) -> Result<Self> {
        let shape = shape.into();
        SpikeTensor::new(shape, vec![0; shape.len()], ceiling)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn ceiling(&self) -> u32 {
        self.ceiling
    }

    /// Sum of all integer activations; equals the number of binary spikes
    /// after expansion.
    pub fn spike_count(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(self.shape, self.values.iter().map(|&v| v as f64).collect())
            .expect("integer values are finite")
    }

    /// Rejects non-integral or out-of-range reals.
    pub fn from_tensor(t: &Tensor4, ceiling: u32) -> Result<Self> {
        let values = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.fract() != 0.0 || v < 0.0 || v > ceiling as f64 {
                    Err(Error::Codec(format!("element {i} = {v} is not an integer in [0, {ceiling}]")))
                } else {
                    Ok(v as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        SpikeTensor::new(t.shape(), values, ceiling)
    }
}

/// Membrane state of a layer of neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    /// Post-reset membrane potential, shaped `(1, c, h, w)`.
    pub h: Tensor4,
    pub beta: f64,
    /// Binary-LIF threshold; unused by I-LIF.
    pub v_th: f64,
    /// I-LIF ceiling `D`.
    pub ceiling: u32,
}

impl NeuronState {
    /// Resting state (`H = 0`) for neurons shaped `(c, h, w)`.
    pub fn rest(c: usize, h: usize, w: usize, beta: f64, ceiling: u32) -> Result<Self> {
        let st = NeuronState {
            h: Tensor4::zeros((1, c, h, w)),
            beta,
            v_th: 0.5,
            ceiling,
        };
        st.validate()?;
        Ok(st)
    }

    pub fn with_threshold(mut self, v_th: f64) -> Self {
        self.v_th = v_th;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Domain(format!("decay beta = {} outside (0, 1]", self.beta)));
        }
        if self.ceiling == 0 {
            return Err(Error::Domain("ceiling D must be at least 1".into()));
        }
        if !self.h.is_finite() {
            return Err(Error::Domain("membrane state holds non-finite values".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (s, h) = (x.shape(), self.h.shape());
        if h.t != 1 || s.c != h.c || s.h != h.h || s.w != h.w {
            return Err(Error::dims("neuron input vs state", &[s.t, h.c, h.h, h.w], &s.dims()));
        }
        Ok(())
    }
}

/// `round` with ties going up: `0.5 -> 1`, `1.5 -> 2`, `-0.5 -> 0`.
#[inline]
pub fn round_half_up(u: f64) -> f64 {
    // `u - floor(u)` is exact, unlike `floor(u + 0.5)` just below a tie
    let r = u.floor();
    if u - r >= 0.5 {
        r + 1.0
    } else {
        r
    }
}

/// I-LIF firing: `clip(round_half_up(u), 0, D)`.
#[inline]
pub fn quantize(u: f64, ceiling: u32) -> u32 {
    round_half_up(u).clamp(0.0, ceiling as f64) as u32
}

/// Runs I-LIF over every timestep of `x_seq`. Returns the integer spikes,
/// the final state and the pre-firing membrane potentials `U` for backward.
pub fn ilif_forward(x_seq: &Tensor4, state: &NeuronState) -> Result<(SpikeTensor, NeuronState, Tensor4)> {
    state.validate()?;
    state.check_input(x_seq)?;
    let shape = x_seq.shape();
    let n = shape.frame_len();
    let mut h = state.h.data().to_vec();
    let mut u_all = Vec::with_capacity(shape.len());
    let mut spikes = Vec::with_capacity(shape.len());
    for t in 0..shape.t {
        for (hv, &xv) in h.iter_mut().zip(x_seq.frame(t)) {
            let u = *hv + xv;
            let s = quantize(u, state.ceiling);
            *hv = state.beta * (u - s as f64);
            u_all.push(u);
            spikes.push(s);
        }
    }
    debug_assert_eq!(h.len(), n);
    let next = NeuronState {
        h: Tensor4::from_vec(state.h.shape(), h)?,
        ..state.clone()
    };
    Ok((
        SpikeTensor::new(shape, spikes, state.ceiling)?,
        next,
        Tensor4::from_vec(shape, u_all)?,
    ))
}

/// Binary LIF with Heaviside firing at `v_th` (fires when `U >= v_th`).
pub fn lif_forward(x_seq: &Tensor4, state: &NeuronState) -> Result<(SpikeTensor, NeuronState)> {
    state.validate()?;
    state.check_input(x_seq)?;
    let shape = x_seq.shape();
    let mut h = state.h.data().to_vec();
    let mut spikes = Vec::with_capacity(shape.len());
    for t in 0..shape.t {
        for (hv, &xv) in h.iter_mut().zip(x_seq.frame(t)) {
            let u = *hv + xv;
            let s = u32::from(u - state.v_th >= 0.0);
            *hv = state.beta * (u - s as f64);
            spikes.push(s);
        }
    }
    let next = NeuronState {
        h: Tensor4::from_vec(state.h.shape(), h)?,
        ..state.clone()
    };
    Ok((SpikeTensor::new(shape, spikes, 1)?, next))
}

/// Rectangular-window surrogate: passes `grad_out` where `0 <= U <= D`.
pub fn ilif_backward(grad_out: &Tensor4, cached_u: &Tensor4, ceiling: u32) -> Result<Tensor4> {
    if grad_out.shape() != cached_u.shape() {
        return Err(Error::dims("ilif_backward", &cached_u.shape().dims(), &grad_out.shape().dims()));
    }
    let d = ceiling as f64;
    let data = grad_out
        .data()
        .iter()
        .zip(cached_u.data())
        .map(|(&g, &u)| if (0.0..=d).contains(&u) { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(grad_out.shape(), data)
}

/// Backpropagation through time for an I-LIF layer with a detached reset.
///
/// With `S` treated as constant, `dH[t]/dU[t] = beta` and
/// `dU[t+1]/dH[t] = 1`, so `gU[t] = surrogate(gS[t]) + beta * gU[t+1]`.
/// Returns the gradient w.r.t. the layer input `X`.
pub fn ilif_bptt(grad_spikes: &Tensor4, cached_u: &Tensor4, beta: f64, ceiling: u32) -> Result<Tensor4> {
    let local = ilif_backward(grad_spikes, cached_u, ceiling)?;
    let shape = local.shape();
    let mut out = local;
    for t in (0..shape.t.saturating_sub(1)).rev() {
        let n = shape.frame_len();
        let (head, tail) = out.data_mut().split_at_mut((t + 1) * n);
        for (g, &next) in head[t * n..].iter_mut().zip(&tail[..n]) {
            *g += beta * next;
        }
    }
    Ok(out)
}
