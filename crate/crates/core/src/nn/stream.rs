//! Streaming TRes-DeltaGRU inference.

use std::collections::VecDeque;

use num_complex::Complex64;

use super::delta::{delta_gru_step_unchecked, DeltaState, OpTally, OpTrace, SparsityReport, StepStats};
use super::dense::{fc_forward, tcn_point};
use super::params::{TResDeltaGru, IQ, TCN_HIDDEN, TCN_KERNEL};
use super::real::Real;
use crate::error::{Error, Result};
use crate::signal::{feature_row, IQSequence};

/// Carries DeltaGRU state and the input context needed by the lookahead
/// feature and the non-causal TCN across calls.
///
/// Output `t` is released once `x[t + max(1, D)]` has arrived; [`finish`]
/// flushes the tail with the end-of-sequence conventions (replicated
/// lookahead, zero TCN padding). Feeding a sequence in any chunking yields
/// bit-identical outputs.
///
/// [`finish`]: ModelStream::finish
#[derive(Debug, Clone)]
pub struct ModelStream<T> {
    state: DeltaState<T>,
    hist: VecDeque<Complex64>,
    hist_base: usize,
    received: usize,
    next_gru: usize,
    fc_out: VecDeque<[T; IQ]>,
    next_out: usize,
    stats: StepStats,
    trace: OpTrace,
}

impl<T: Real> ModelStream<T> {
    pub fn new(model: &TResDeltaGru<T>) -> Self {
        Self {
            state: DeltaState::new(&model.gru),
            hist: VecDeque::new(),
            hist_base: 0,
            received: 0,
            next_gru: 0,
            fc_out: VecDeque::new(),
            next_out: 0,
            stats: StepStats::default(),
            trace: OpTrace::default(),
        }
    }

    pub fn state(&self) -> &DeltaState<T> {
        &self.state
    }

    pub fn report(&self) -> SparsityReport {
        SparsityReport::from_stats(self.stats, self.next_gru as u64)
    }

    pub fn trace(&self) -> &OpTrace {
        &self.trace
    }

    /// Samples consumed by the GRU so far.
    pub fn steps(&self) -> usize {
        self.next_gru
    }

    fn sample(&self, i: isize) -> Option<Complex64> {
        if i < self.hist_base as isize || i >= self.received as isize {
            return None;
        }
        self.hist.get(i as usize - self.hist_base).copied()
    }

    fn gru_step(&mut self, model: &TResDeltaGru<T>, next: Complex64) {
        let t = self.next_gru;
        let cur = self.sample(t as isize).expect("sample retained");
        let phi: Vec<T> = feature_row(cur, next).iter().map(|&v| T::of(v)).collect();
        self.stats += delta_gru_step_unchecked(
            &model.gru,
            &model.thresholds,
            &mut self.state,
            &phi,
            Some(&mut self.trace),
        );
        let h = model.gru.hidden_size as u64;
        self.fc_out.push_back(fc_forward(&model.fc, &self.state.h_prev));
        self.trace.fc += OpTally {
            macs: IQ as u64 * h,
            adds: IQ as u64,
            mem_reads: IQ as u64 * h + IQ as u64,
            ..OpTally::default()
        };
        self.next_gru += 1;
    }

    fn emit(&mut self, model: &TResDeltaGru<T>, out: &mut Vec<Complex64>) {
        let t = self.next_out as isize;
        let fc = self.fc_out.pop_front().expect("GRU output ready");
        let mut u = fc;
        if let Some(tcn) = &model.tcn {
            let d = tcn.dilation as isize;
            let at = |i: isize| {
                self.sample(i)
                    .map_or([T::zero(); IQ], |c| [T::of(c.re), T::of(c.im)])
            };
            let v = tcn_point(tcn, &[at(t - d), at(t), at(t + d)]);
            u[0] += v[0];
            u[1] += v[1];
            let l1 = (TCN_HIDDEN * IQ * TCN_KERNEL) as u64;
            let l2 = (IQ * TCN_HIDDEN) as u64;
            self.trace.tcn += OpTally {
                macs: l1 + l2,
                adds: (TCN_HIDDEN + IQ) as u64,
                activations: (TCN_HIDDEN + IQ) as u64,
                mem_reads: tcn.num_params() as u64 + (IQ * TCN_KERNEL) as u64,
                mem_writes: IQ as u64,
                ..OpTally::default()
            };
            self.trace.overhead.adds += IQ as u64;
        }
        out.push(Complex64::new(u[0].f64(), u[1].f64()));
        self.next_out += 1;
    }

    fn lookahead(model: &TResDeltaGru<T>) -> usize {
        model.tcn.as_ref().map_or(0, |t| t.dilation)
    }

    fn trim(&mut self, model: &TResDeltaGru<T>) {
        let keep_from = self
            .next_out
            .saturating_sub(Self::lookahead(model))
            .min(self.next_gru);
        while self.hist_base < keep_from {
            self.hist.pop_front();
            self.hist_base += 1;
        }
    }

    /// Feeds samples and returns every output that is now final.
    pub fn push(&mut self, model: &TResDeltaGru<T>, x: &[Complex64]) -> Vec<Complex64> {
        self.hist.extend(x.iter().copied());
        self.received += x.len();
        while self.next_gru + 1 < self.received {
            let next = self.sample(self.next_gru as isize + 1).expect("lookahead present");
            self.gru_step(model, next);
        }
        let la = Self::lookahead(model);
        let mut out = Vec::new();
        while self.next_out < self.next_gru && self.next_out + la < self.received {
            self.emit(model, &mut out);
        }
        self.trim(model);
        out
    }

    /// Ends the stream and flushes remaining outputs.
    pub fn finish(mut self, model: &TResDeltaGru<T>) -> (Vec<Complex64>, SparsityReport, OpTrace) {
        if self.next_gru < self.received {
            let last = self.sample(self.next_gru as isize).expect("last sample");
            self.gru_step(model, last);
        }
        let mut out = Vec::new();
        while self.next_out < self.next_gru {
            self.emit(model, &mut out);
        }
        (out, self.report(), self.trace)
    }
}

/// One-shot inference from a fresh state: `U = Û + TCN(X)`.
pub fn model_forward<T: Real>(
    model: &TResDeltaGru<T>,
    x: &IQSequence,
) -> Result<(IQSequence, SparsityReport)> {
    let (u, report, _) = model_forward_traced(model, x)?;
    Ok((u, report))
}

/// [`model_forward`] plus the instrumented op counts of the run.
pub fn model_forward_traced<T: Real>(
    model: &TResDeltaGru<T>,
    x: &IQSequence,
) -> Result<(IQSequence, SparsityReport, OpTrace)> {
    if x.is_empty() {
        return Err(Error::EmptyDataset("model_forward input".into()));
    }
    if model.gru.input_size != crate::signal::FEATURE_WIDTH {
        return Err(Error::shape(format!(
            "DPD models take {} input features, model has {}",
            crate::signal::FEATURE_WIDTH,
            model.gru.input_size
        )));
    }
    let mut s = ModelStream::new(model);
    let mut u = s.push(model, x.samples());
    let (tail, report, trace) = s.finish(model);
    u.extend(tail);
    Ok((IQSequence::new(u, x.sample_rate_hz())?, report, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::{gru_forward_dense_flat, tcn_forward};
    use crate::nn::params::{DeltaThresholds, ModelDims};
    use crate::signal::{features_of, OfdmConfig};

    fn signal(n_sym: usize) -> IQSequence {
        crate::signal::generate_ofdm(&OfdmConfig {
            num_symbols: n_sym,
            ..OfdmConfig::default()
        })
        .unwrap()
    }

    fn dense_reference(model: &TResDeltaGru<f64>, x: &IQSequence) -> Vec<Complex64> {
        let flat: Vec<f64> = features_of(x.samples()).iter().flatten().copied().collect();
        let h = gru_forward_dense_flat(&model.gru, &flat).unwrap();
        let tcn = model.tcn.as_ref().map(|t| tcn_forward(t, x));
        h.chunks(model.hidden_size())
            .enumerate()
            .map(|(t, ht)| {
                let fc = fc_forward(&model.fc, ht);
                let r = tcn.as_ref().map_or([0.0; 2], |v| v[t]);
                Complex64::new(fc[0] + r[0], fc[1] + r[1])
            })
            .collect()
    }

    #[test]
    fn dense_composition_at_zero_thresholds() {
        let x = signal(2);
        let model = TResDeltaGru::<f64>::init(ModelDims::dpd(8), 5);
        let (u, rep) = model_forward(&model, &x).unwrap();
        assert_eq!(rep.gamma, 0.0);
        for (a, b) in u.samples().iter().zip(dense_reference(&model, &x)) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_gru_gives_pure_tcn() {
        let x = signal(1);
        let mut model = TResDeltaGru::<f64>::init(ModelDims::dpd(8), 6);
        model.gru = crate::nn::GruParams::zeros(6, 8);
        model.fc = crate::nn::FcParams::zeros(8);
        let (u, _) = model_forward(&model, &x).unwrap();
        let t = tcn_forward(model.tcn.as_ref().unwrap(), &x);
        for (a, b) in u.samples().iter().zip(&t) {
            assert_eq!(*a, Complex64::new(b[0], b[1]));
        }
    }

    #[test]
    fn chunked_equals_one_shot() {
        let x = signal(1);
        let model = TResDeltaGru::<f32>::init(ModelDims::dpd(8), 7)
            .with_thresholds(DeltaThresholds::new(0.02, 0.05).unwrap());
        let (u, rep) = model_forward(&model, &x).unwrap();
        for chunk in [1, 7, 16, 17, 333] {
            let mut s = ModelStream::new(&model);
            let mut out = Vec::new();
            for c in x.samples().chunks(chunk) {
                out.extend(s.push(&model, c));
            }
            let (tail, r2, _) = s.finish(&model);
            out.extend(tail);
            assert_eq!(out, u.samples(), "chunk {chunk}");
            assert_eq!(r2, rep);
        }
    }

    #[test]
    fn single_sample_input() {
        let model = TResDeltaGru::<f64>::init(ModelDims::dpd(3), 1);
        let x = IQSequence::new(vec![Complex64::new(0.3, -0.2)], 1.0).unwrap();
        let (u, _) = model_forward(&model, &x).unwrap();
        assert_eq!(u.len(), 1);
        assert!((u.samples()[0] - dense_reference(&model, &x)[0]).norm() < 1e-12);
    }
}
