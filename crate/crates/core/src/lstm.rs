//! Convolutional LSTM over flow features and the 1x1 future-flow head.

use crate::autodiff::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Conv2dLayer, Init, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Standard i, f, o, g gates without peepholes.
///
/// A single 3x3 convolution over `concat[x, h]` produces all four gate
/// pre-activations, stacked in that order along channels. This is the
/// same as separate input and hidden convolutions summed.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    gates: Conv2dLayer,
    input: usize,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub hidden: Var<'t>,
    pub cell: Var<'t>,
}

impl ConvLstm {
    pub const FORGET_BIAS: f64 = 1.0;

    pub fn build(params: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config("LSTM widths must be positive".into()));
        }
        let gates = params.conv("lstm.gates", input + hidden, 4 * hidden, 3, Init::LecunUniform)?;
        params.adjust(gates.bias, |b| {
            b.data_mut()[hidden..2 * hidden].fill(Self::FORGET_BIAS);
        });
        Ok(ConvLstm {
            gates,
            input,
            hidden,
        })
    }

    /// `(input, hidden)` widths from stored shapes, if an LSTM is present.
    pub fn infer_widths(store: &ParamStore) -> Option<(usize, usize)> {
        let shape = store.by_name("lstm.gates.weight")?.shape();
        let hidden = shape[0] / 4;
        Some((shape[1] - hidden, hidden))
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    /// Zero state matching the spatial extent of `like`.
    pub fn zero_state<'t>(&self, like: Var<'t>) -> Result<LstmState<'t>> {
        let (n, _, h, w) = like.value().dims4()?;
        let tape = like.tape();
        let zeros = Tensor::zeros(&[n, self.hidden, h, w]);
        Ok(LstmState {
            hidden: tape.constant(zeros.clone()),
            cell: tape.constant(zeros),
        })
    }

    pub fn step<'t>(
        &self,
        params: &Binder<'t, '_>,
        x: Var<'t>,
        state: Option<LstmState<'t>>,
    ) -> Result<LstmState<'t>> {
        let state = match state {
            Some(s) => s,
            None => self.zero_state(x)?,
        };
        let xs = x.shape();
        let hs = state.hidden.shape();
        if xs.len() != 4 || xs[1] != self.input {
            return Err(Error::dim(
                "lstm_step",
                format!("expected {} input channels, got shape {xs:?}", self.input),
            ));
        }
        if xs[0] != hs[0] || xs[2..] != hs[2..] {
            return Err(Error::dim(
                "lstm_step",
                format!("input {xs:?} does not match state {hs:?}"),
            ));
        }
        let pre = self
            .gates
            .forward(params, concat_channels(&[x, state.hidden])?)?;
        let f = self.hidden;
        let i = pre.narrow_channels(0, f)?.sigmoid();
        let fg = pre.narrow_channels(f, f)?.sigmoid();
        let o = pre.narrow_channels(2 * f, f)?.sigmoid();
        let g = pre.narrow_channels(3 * f, f)?.tanh();
        let cell = fg.mul(state.cell)?.add(i.mul(g)?)?;
        let hidden = o.mul(cell.tanh())?;
        Ok(LstmState { hidden, cell })
    }
}

/// Zero-initialized 1x1 projection to a 2-channel flow field.
#[derive(Clone, Copy, Debug)]
pub struct FlowHead {
    conv: Conv2dLayer,
}

impl FlowHead {
    pub fn build(params: &mut ParamBuilder<'_>, input: usize) -> Result<Self> {
        Ok(FlowHead {
            conv: params.conv("head.flow", input, 2, 1, Init::Zeros)?,
        })
    }

    pub fn infer_input(store: &ParamStore) -> Option<usize> {
        store.by_name("head.flow.weight").map(|t| t.shape()[1])
    }

    pub fn forward<'t>(&self, params: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.conv.forward(params, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_parameters_keep_zero_state() {
        let mut store = ParamStore::new();
        let lstm = ConvLstm::build(
            &mut ParamBuilder::fresh(&mut store, ChaCha8Rng::seed_from_u64(0)),
            3,
            2,
        )
        .unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let zeros = Tensor::zeros(store.get(id).shape());
            store.set(id, zeros).unwrap();
        }
        let tape = Tape::new();
        let params = Binder::frozen(&tape, &store);
        let x = tape.constant(Tensor::full(&[1, 3, 4, 5], 0.7));
        let s = lstm.step(&params, x, None).unwrap();
        assert_eq!(s.hidden.shape(), [1, 2, 4, 5]);
        assert_eq!(s.hidden.value().max_abs(), 0.0);
        assert_eq!(s.cell.value().max_abs(), 0.0);
    }

    #[test]
    fn scalar_instance_matches_hand_unrolled_gates() {
        let mut store = ParamStore::new();
        let lstm = ConvLstm::build(
            &mut ParamBuilder::fresh(&mut store, ChaCha8Rng::seed_from_u64(0)),
            1,
            1,
        )
        .unwrap();
        // centre taps only matter on a 1x1 image
        let wx = [0.5, -0.25, 0.75, 1.5];
        let wh = [0.125, 0.5, -0.5, 0.25];
        let bias = [0.0, 1.0, -0.5, 0.25];
        let mut weight = Tensor::zeros(&[4, 2, 3, 3]);
        for k in 0..4 {
            weight.set4(k, 0, 1, 1, wx[k]);
            weight.set4(k, 1, 1, 1, wh[k]);
        }
        let wid = store.id("lstm.gates.weight").unwrap();
        let bid = store.id("lstm.gates.bias").unwrap();
        store.set(wid, weight).unwrap();
        store.set(bid, Tensor::from_vec(&[4], bias.to_vec()).unwrap()).unwrap();

        let (x, h0, c0) = (0.8, -0.3, 0.6);
        let tape = Tape::new();
        let params = Binder::frozen(&tape, &store);
        let state = LstmState {
            hidden: tape.constant(Tensor::full(&[1, 1, 1, 1], h0)),
            cell: tape.constant(Tensor::full(&[1, 1, 1, 1], c0)),
        };
        let xv = tape.constant(Tensor::full(&[1, 1, 1, 1], x));
        let s = lstm.step(&params, xv, Some(state)).unwrap();

        let pre = |k: usize| bias[k] + wx[k] * x + wh[k] * h0;
        let (i, f, o, g) = (sigmoid(pre(0)), sigmoid(pre(1)), sigmoid(pre(2)), pre(3).tanh());
        let c = f * c0 + i * g;
        let h = o * c.tanh();
        assert!((s.cell.value().item().unwrap() - c).abs() < 1e-15);
        assert!((s.hidden.value().item().unwrap() - h).abs() < 1e-15);
    }

    #[test]
    fn forget_bias_is_one_and_widths_are_recoverable() {
        let mut store = ParamStore::new();
        ConvLstm::build(
            &mut ParamBuilder::fresh(&mut store, ChaCha8Rng::seed_from_u64(0)),
            5,
            3,
        )
        .unwrap();
        let b = store.by_name("lstm.gates.bias").unwrap();
        assert_eq!(b.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ConvLstm::infer_widths(&store), Some((5, 3)));
    }
}
