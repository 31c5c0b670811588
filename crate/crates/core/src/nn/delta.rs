//! Delta encoding and the incremental DeltaGRU step.

use serde::Serialize;

use super::params::{DeltaThresholds, GruParams};
use super::real::Real;
use crate::error::{Error, Result};

/// Keeps elements whose change since the last transmitted value exceeds
/// `theta` (strictly) and refreshes the buffer only at those positions.
///
/// Returns the number of retained elements; `delta` receives the sparse
/// update (zeros elsewhere).
pub fn delta_encode<T: Real>(v: &[T], buf: &mut [T], theta: T, delta: &mut [T]) -> usize {
    assert_eq!(v.len(), buf.len());
    assert_eq!(v.len(), delta.len());
    let mut kept = 0;
    for ((&x, b), d) in v.iter().zip(buf.iter_mut()).zip(delta.iter_mut()) {
        let diff = x - *b;
        if diff.abs() > theta {
            *d = diff;
            *b = x;
            kept += 1;
        } else {
            *d = T::zero();
        }
    }
    kept
}

/// Per-stream DeltaGRU memory. Accumulators are kept in 64-bit regardless
/// of `T` so that incremental updates do not drift from the dense sum.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaState<T> {
    pub phi_buf: Vec<T>,
    pub h_buf: Vec<T>,
    pub h_prev: Vec<T>,
    pub m_r: Vec<f64>,
    pub m_z: Vec<f64>,
    pub m_nphi: Vec<f64>,
    pub m_nh: Vec<f64>,
}

impl<T: Real> DeltaState<T> {
    pub fn new(gru: &GruParams<T>) -> Self {
        let h = gru.hidden_size;
        let b = |range: std::ops::Range<usize>| gru.b_ih[range].iter().map(|v| v.f64()).collect();
        Self {
            phi_buf: vec![T::zero(); gru.input_size],
            h_buf: vec![T::zero(); h],
            h_prev: vec![T::zero(); h],
            m_r: b(0..h),
            m_z: b(h..2 * h),
            m_nphi: b(2 * h..3 * h),
            m_nh: gru.b_hn.iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn reset(&mut self, gru: &GruParams<T>) {
        *self = Self::new(gru);
    }

    pub fn hidden(&self) -> &[T] {
        &self.h_prev
    }

    fn check(&self, gru: &GruParams<T>) -> Result<()> {
        if self.phi_buf.len() != gru.input_size || self.h_prev.len() != gru.hidden_size {
            return Err(Error::shape(format!(
                "state is F={}, H={} but GRU is F={}, H={}",
                self.phi_buf.len(),
                self.h_prev.len(),
                gru.input_size,
                gru.hidden_size
            )));
        }
        Ok(())
    }
}

/// Column bookkeeping for one or more steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StepStats {
    pub phi_evaluated: u64,
    pub phi_skipped: u64,
    pub h_evaluated: u64,
    pub h_skipped: u64,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, o: Self) {
        self.phi_evaluated += o.phi_evaluated;
        self.phi_skipped += o.phi_skipped;
        self.h_evaluated += o.h_evaluated;
        self.h_skipped += o.h_skipped;
    }
}

/// Measured temporal sparsity.
///
/// `gamma` is the MAC-weighted mix `(F·γ_φ + H·γ_h)/(F + H)`: a skipped
/// input column saves `3H` MACs, as does a skipped hidden column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparsityReport {
    pub gamma_phi: f64,
    pub gamma_h: f64,
    pub gamma: f64,
    pub steps: u64,
    pub stats: StepStats,
}

impl SparsityReport {
    pub fn from_stats(stats: StepStats, steps: u64) -> Self {
        let frac = |skipped: u64, evaluated: u64| {
            let total = skipped + evaluated;
            if total == 0 {
                0.0
            } else {
                skipped as f64 / total as f64
            }
        };
        let gamma_phi = frac(stats.phi_skipped, stats.phi_evaluated);
        let gamma_h = frac(stats.h_skipped, stats.h_evaluated);
        let cols_phi = (stats.phi_skipped + stats.phi_evaluated) as f64;
        let cols_h = (stats.h_skipped + stats.h_evaluated) as f64;
        let gamma = if cols_phi + cols_h == 0.0 {
            0.0
        } else {
            (stats.phi_skipped + stats.h_skipped) as f64 / (cols_phi + cols_h)
        };
        Self {
            gamma_phi,
            gamma_h,
            gamma,
            steps,
            stats,
        }
    }
}

/// Arithmetic and memory traffic actually performed, counted inside the
/// forward loops. Activation evaluations are tallied separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct OpTally {
    pub macs: u64,
    pub muls: u64,
    pub adds: u64,
    pub activations: u64,
    pub mem_reads: u64,
    pub mem_writes: u64,
}

impl std::ops::AddAssign for OpTally {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.muls += o.muls;
        self.adds += o.adds;
        self.activations += o.activations;
        self.mem_reads += o.mem_reads;
        self.mem_writes += o.mem_writes;
    }
}

/// Instrumented counters per submodule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct OpTrace {
    pub gru_input: OpTally,
    pub gru_hidden: OpTally,
    pub gru_elementwise: OpTally,
    pub fc: OpTally,
    pub tcn: OpTally,
    pub overhead: OpTally,
}

impl std::ops::AddAssign for OpTrace {
    fn add_assign(&mut self, o: Self) {
        self.gru_input += o.gru_input;
        self.gru_hidden += o.gru_hidden;
        self.gru_elementwise += o.gru_elementwise;
        self.fc += o.fc;
        self.tcn += o.tcn;
        self.overhead += o.overhead;
    }
}

/// One DeltaGRU step; the new hidden state is left in `state.h_prev`.
///
/// Δφ and Δh are encoded against their buffers; accumulators advance by
/// `W·Δ` for retained columns only. A zero threshold runs the layer
/// densely: every column is processed and counted as evaluated.
pub fn delta_gru_step<T: Real>(
    gru: &GruParams<T>,
    th: &DeltaThresholds,
    state: &mut DeltaState<T>,
    phi: &[T],
    trace: Option<&mut OpTrace>,
) -> Result<StepStats> {
    state.check(gru)?;
    if phi.len() != gru.input_size {
        return Err(Error::shape(format!("phi has {} values, GRU expects {}", phi.len(), gru.input_size)));
    }
    Ok(delta_gru_step_unchecked(gru, th, state, phi, trace))
}

pub(crate) fn delta_gru_step_unchecked<T: Real>(
    gru: &GruParams<T>,
    th: &DeltaThresholds,
    state: &mut DeltaState<T>,
    phi: &[T],
    mut trace: Option<&mut OpTrace>,
) -> StepStats {
    let (f, h) = (gru.input_size, gru.hidden_size);
    let mut stats = StepStats::default();
    let mut t_in = OpTally::default();
    let mut t_hid = OpTally::default();
    let mut t_ew = OpTally::default();
    let mut t_ov = OpTally::default();

    // Input side: columns k of W_ir, W_iz, W_in.
    for k in 0..f {
        let diff = phi[k].f64() - state.phi_buf[k].f64();
        t_ov.adds += 1;
        t_ov.mem_reads += 1;
        let keep = diff.abs() > th.theta_phi;
        if keep || th.theta_phi == 0.0 {
            state.phi_buf[k] = phi[k];
            t_ov.mem_writes += 1;
            for i in 0..h {
                state.m_r[i] += gru.w_ih[i * f + k].f64() * diff;
                state.m_z[i] += gru.w_ih[(h + i) * f + k].f64() * diff;
                state.m_nphi[i] += gru.w_ih[(2 * h + i) * f + k].f64() * diff;
            }
            t_in.macs += 3 * h as u64;
            t_in.mem_reads += 3 * h as u64;
            stats.phi_evaluated += 1;
        } else {
            stats.phi_skipped += 1;
        }
    }

    // Hidden side: Δh is taken from the exact previous state.
    for k in 0..h {
        let diff = state.h_prev[k].f64() - state.h_buf[k].f64();
        t_ov.adds += 1;
        t_ov.mem_reads += 1;
        let keep = diff.abs() > th.theta_h;
        if keep || th.theta_h == 0.0 {
            state.h_buf[k] = state.h_prev[k];
            t_ov.mem_writes += 1;
            for i in 0..h {
                state.m_r[i] += gru.w_hh[i * h + k].f64() * diff;
                state.m_z[i] += gru.w_hh[(h + i) * h + k].f64() * diff;
                state.m_nh[i] += gru.w_hh[(2 * h + i) * h + k].f64() * diff;
            }
            t_hid.macs += 3 * h as u64;
            t_hid.mem_reads += 3 * h as u64;
            stats.h_evaluated += 1;
        } else {
            stats.h_skipped += 1;
        }
    }

    for i in 0..h {
        let r = T::of(state.m_r[i]).sigmoid();
        let z = T::of(state.m_z[i]).sigmoid();
        let n = (T::of(state.m_nphi[i]) + r * T::of(state.m_nh[i])).tanh();
        let hp = state.h_prev[i];
        state.h_prev[i] = (T::one() - z) * hp + z * n;
    }
    // r⊙M_nh, +M_nφ; (1−z), two products and their sum.
    t_ew.muls += 3 * h as u64;
    t_ew.adds += 3 * h as u64;
    t_ew.activations += 3 * h as u64;
    // Four accumulators and h: one read and one write each.
    t_ew.mem_reads += 5 * h as u64;
    t_ew.mem_writes += 5 * h as u64;

    if let Some(tr) = trace.as_deref_mut() {
        tr.gru_input += t_in;
        tr.gru_hidden += t_hid;
        tr.gru_elementwise += t_ew;
        tr.overhead += t_ov;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::gru_forward_dense_flat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_examples() {
        let mut buf = [0.3f64];
        let mut d = [0.0];
        assert_eq!(delta_encode(&[0.5], &mut buf, 0.1, &mut d), 1);
        assert!((d[0] - 0.2).abs() < 1e-15);
        assert_eq!(buf[0], 0.5);

        let mut buf = [0.3f64];
        assert_eq!(delta_encode(&[0.5], &mut buf, 0.3, &mut d), 0);
        assert_eq!((d[0], buf[0]), (0.0, 0.3));

        let mut buf = [0.5f64];
        assert_eq!(delta_encode(&[0.5], &mut buf, 0.0, &mut d), 0);
        assert_eq!((d[0], buf[0]), (0.0, 0.5));
    }

    #[test]
    fn tie_at_threshold_is_skipped() {
        let mut buf = [0.0f64];
        let mut d = [0.0];
        assert_eq!(delta_encode(&[0.25], &mut buf, 0.25, &mut d), 0);
    }

    #[test]
    fn zero_model_halves_hidden_state() {
        let gru = GruParams::<f64>::zeros(6, 4);
        let mut st = DeltaState::new(&gru);
        st.h_prev = vec![1.0, -2.0, 0.5, 0.0];
        let th = DeltaThresholds::new(0.01, 0.01).unwrap();
        delta_gru_step(&gru, &th, &mut st, &[0.3; 6], None).unwrap();
        assert_eq!(st.h_prev, vec![0.5, -1.0, 0.25, 0.0]);
        assert!(st.m_r.iter().chain(&st.m_z).chain(&st.m_nphi).chain(&st.m_nh).all(|&m| m == 0.0));

        let mut st = DeltaState::new(&gru);
        for _ in 0..5 {
            delta_gru_step(&gru, &th, &mut st, &[0.9; 6], None).unwrap();
        }
        assert!(st.h_prev.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gru = GruParams::<f64>::random(6, 8, &mut rng);
        let th = DeltaThresholds::new(0.01, 0.0).unwrap();
        let mut st = DeltaState::new(&gru);
        let phi = [0.2, -0.4, 0.1, 0.3, 0.5, 0.125];
        for t in 0..50 {
            let mut tr = OpTrace::default();
            let s = delta_gru_step(&gru, &th, &mut st, &phi, Some(&mut tr)).unwrap();
            if t == 0 {
                assert_eq!(s.phi_evaluated, 6);
            } else {
                assert_eq!(s.phi_evaluated, 0);
                assert_eq!(tr.gru_input.macs, 0);
            }
        }
    }

    #[test]
    fn reset_restores_bias_accumulators() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gru = GruParams::<f64>::random(6, 5, &mut rng);
        let mut st = DeltaState::new(&gru);
        delta_gru_step(&gru, &DeltaThresholds::DENSE, &mut st, &[0.1; 6], None).unwrap();
        st.reset(&gru);
        assert_eq!(st.m_r, gru.b_ih[..5].to_vec());
        assert_eq!(st.m_z, gru.b_ih[5..10].to_vec());
        assert_eq!(st.m_nphi, gru.b_ih[10..].to_vec());
        assert_eq!(st.m_nh, gru.b_hn);
        assert!(st.phi_buf.iter().chain(&st.h_buf).chain(&st.h_prev).all(|&v| v == 0.0));
    }

    #[test]
    fn dense_mode_matches_reference_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gru = GruParams::<f64>::random(6, 8, &mut rng);
        let x: Vec<f64> = (0..6 * 500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = gru_forward_dense_flat(&gru, &x).unwrap();
        let mut st = DeltaState::new(&gru);
        for t in 0..500 {
            delta_gru_step(&gru, &DeltaThresholds::DENSE, &mut st, &x[6 * t..6 * t + 6], None).unwrap();
            for (a, b) in st.h_prev.iter().zip(&dense[8 * t..8 * t + 8]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let gru = GruParams::<f64>::zeros(6, 4);
        let other = GruParams::<f64>::zeros(6, 5);
        let mut st = DeltaState::new(&other);
        assert!(delta_gru_step(&gru, &DeltaThresholds::DENSE, &mut st, &[0.0; 6], None).is_err());
        let mut st = DeltaState::new(&gru);
        assert!(delta_gru_step(&gru, &DeltaThresholds::DENSE, &mut st, &[0.0; 5], None).is_err());
    }

    #[test]
    fn report_weights_by_columns() {
        let stats = StepStats {
            phi_evaluated: 3,
            phi_skipped: 3,
            h_evaluated: 15,
            h_skipped: 0,
        };
        let r = SparsityReport::from_stats(stats, 1);
        assert_eq!(r.gamma_phi, 0.5);
        assert_eq!(r.gamma_h, 0.0);
        assert!((r.gamma - 3.0 / 21.0).abs() < 1e-15);
    }
}
