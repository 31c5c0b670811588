//! Analytical forward-pass energy and DPD power accounting.
//!
//! Energies are in picojoules unless a field says otherwise. A MAC costs
//! one multiply and one add; an activation evaluation is charged as one
//! multiply plus two adds. Memory is a flat L1 cost per access.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{count_active_params, ModelDims, OpTally, OpTrace, Real, SparsityReport, TResDeltaGru, IQ, TCN_HIDDEN, TCN_KERNEL};
use crate::quant::Precision;

/// 7 nm per-op and per-access energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyTable {
    pub fp32_add_pj: f64,
    pub fp32_mul_pj: f64,
    pub int16_add_pj: f64,
    pub int16_mul_pj: f64,
    pub int12_add_pj: f64,
    pub int12_mul_pj: f64,
    pub l1_access_pj: f64,
    pub dram_access_pj: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self {
            fp32_add_pj: 0.38,
            fp32_mul_pj: 1.31,
            int16_add_pj: 0.015,
            int16_mul_pj: 0.37,
            int12_add_pj: 0.011,
            int12_mul_pj: 0.21,
            l1_access_pj: 7.5,
            dram_access_pj: 1300.0,
        }
    }
}

impl EnergyTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.fp32_add_pj,
            self.fp32_mul_pj,
            self.int16_add_pj,
            self.int16_mul_pj,
            self.int12_add_pj,
            self.int12_mul_pj,
            self.l1_access_pj,
            self.dram_access_pj,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("energy table entries must be positive"))
        }
    }

    /// INT32 multiply energy implied by the INT16 entry and `α² = 1/4`.
    pub fn int32_mul_pj(&self) -> f64 {
        self.int16_mul_pj / 0.25
    }

    /// INT32 add energy implied by the INT16 entry and `α = 1/2`.
    pub fn int32_add_pj(&self) -> f64 {
        self.int16_add_pj / 0.5
    }

    /// Reference `(mul, add)` energies that [`EnergyScaling`] factors apply to.
    fn reference(&self, p: Precision) -> Result<(f64, f64)> {
        match p {
            Precision::Fp32 => Ok((self.fp32_mul_pj, self.fp32_add_pj)),
            Precision::Int16 | Precision::Int12 => Ok((self.int32_mul_pj(), self.int32_add_pj())),
            Precision::Int8 => Err(Error::invalid("no energy entries for 8-bit arithmetic")),
        }
    }
}

/// Expected operation counts of one forward step, for one submodule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OpCount {
    pub macs: f64,
    pub muls: f64,
    pub adds: f64,
    pub activations: f64,
    pub mem_reads: f64,
    pub mem_writes: f64,
}

impl OpCount {
    fn from_tally(t: &OpTally, steps: f64) -> Self {
        Self {
            macs: t.macs as f64 / steps,
            muls: t.muls as f64 / steps,
            adds: t.adds as f64 / steps,
            activations: t.activations as f64 / steps,
            mem_reads: t.mem_reads as f64 / steps,
            mem_writes: t.mem_writes as f64 / steps,
        }
    }

    /// Multiplies including those inside MACs and activations.
    pub fn total_muls(&self) -> f64 {
        self.macs + self.muls + self.activations
    }

    pub fn total_adds(&self) -> f64 {
        self.macs + self.adds + 2.0 * self.activations
    }

    pub fn total_mem(&self) -> f64 {
        self.mem_reads + self.mem_writes
    }

    fn scaled(&self, c: f64) -> Self {
        Self {
            macs: self.macs * c,
            muls: self.muls * c,
            adds: self.adds * c,
            activations: self.activations * c,
            mem_reads: self.mem_reads * c,
            mem_writes: self.mem_writes * c,
        }
    }
}

/// Per-step counts by submodule.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OpCounts {
    pub gru_input: OpCount,
    pub gru_hidden: OpCount,
    pub gru_elementwise: OpCount,
    pub fc: OpCount,
    pub tcn: OpCount,
    pub overhead: OpCount,
}

impl OpCounts {
    pub fn parts(&self) -> [(&'static str, &OpCount); 6] {
        [
            ("gru_input", &self.gru_input),
            ("gru_hidden", &self.gru_hidden),
            ("gru_elementwise", &self.gru_elementwise),
            ("fc", &self.fc),
            ("tcn", &self.tcn),
            ("overhead", &self.overhead),
        ]
    }

    pub fn total_macs(&self) -> f64 {
        self.parts().iter().map(|(_, c)| c.macs).sum()
    }

    pub fn gru_macs(&self) -> f64 {
        self.gru_input.macs + self.gru_hidden.macs
    }

    /// Measured per-step averages from an instrumented run of `steps` steps.
    pub fn from_trace(trace: &OpTrace, steps: u64) -> Self {
        let s = steps.max(1) as f64;
        Self {
            gru_input: OpCount::from_tally(&trace.gru_input, s),
            gru_hidden: OpCount::from_tally(&trace.gru_hidden, s),
            gru_elementwise: OpCount::from_tally(&trace.gru_elementwise, s),
            fc: OpCount::from_tally(&trace.fc, s),
            tcn: OpCount::from_tally(&trace.tcn, s),
            overhead: OpCount::from_tally(&trace.overhead, s),
        }
    }

    /// Every count multiplied by `c` (e.g. a number of steps).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            gru_input: self.gru_input.scaled(c),
            gru_hidden: self.gru_hidden.scaled(c),
            gru_elementwise: self.gru_elementwise.scaled(c),
            fc: self.fc.scaled(c),
            tcn: self.tcn.scaled(c),
            overhead: self.overhead.scaled(c),
        }
    }
}

/// Expected per-step counts of the streaming forward pass.
///
/// * GRU input side: `(1−γ_φ)·3H·F` MACs, one weight read per MAC.
/// * GRU hidden side: `(1−γ_h)·3H·H` MACs and reads.
/// * Gate arithmetic: `3H` multiplies, `3H` adds, `3H` activations, and a
///   read plus write of the four accumulators and `h`.
/// * Overhead: one subtract and one buffer read per delta element, one
///   buffer write per evaluated column, and the two residual adds.
/// * FC: `2H` MACs, two bias adds, `2H + 2` reads.
/// * TCN: `Σ C_out·C_in·K` MACs, bias adds and Hardswish per channel,
///   parameter and tap reads, two output writes.
pub fn count_forward_ops(dims: &ModelDims, gamma_phi: f64, gamma_h: f64) -> Result<OpCounts> {
    dims.validate()?;
    for g in [gamma_phi, gamma_h] {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::invalid(format!("sparsity must lie in [0, 1], got {g}")));
        }
    }
    let (f, h) = (dims.input_size as f64, dims.hidden_size as f64);
    let (kp, kh) = (1.0 - gamma_phi, 1.0 - gamma_h);
    let iq = IQ as f64;
    let mut c = OpCounts {
        gru_input: OpCount {
            macs: kp * 3.0 * h * f,
            mem_reads: kp * 3.0 * h * f,
            ..OpCount::default()
        },
        gru_hidden: OpCount {
            macs: kh * 3.0 * h * h,
            mem_reads: kh * 3.0 * h * h,
            ..OpCount::default()
        },
        gru_elementwise: OpCount {
            muls: 3.0 * h,
            adds: 3.0 * h,
            activations: 3.0 * h,
            mem_reads: 5.0 * h,
            mem_writes: 5.0 * h,
            ..OpCount::default()
        },
        fc: OpCount {
            macs: iq * h,
            adds: iq,
            mem_reads: iq * h + iq,
            ..OpCount::default()
        },
        tcn: OpCount::default(),
        overhead: OpCount {
            adds: f + h,
            mem_reads: f + h,
            mem_writes: kp * f + kh * h,
            ..OpCount::default()
        },
    };
    if dims.tcn_dilation.is_some() {
        let (th, k) = (TCN_HIDDEN as f64, TCN_KERNEL as f64);
        let params = th * iq * k + th + iq * th + iq;
        c.tcn = OpCount {
            macs: th * iq * k + iq * th,
            adds: th + iq,
            activations: th + iq,
            mem_reads: params + iq * k,
            mem_writes: iq,
            ..OpCount::default()
        };
        c.overhead.adds += iq;
    }
    Ok(c)
}

/// Word-width ratio `α` and temporal sparsity `Γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyScaling {
    pub alpha: f64,
    pub gamma: f64,
}

impl EnergyScaling {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(Self { alpha, gamma })
    }

    /// FP32 arithmetic is its own reference (`α = 1`).
    pub fn for_precision(p: Precision, gamma: f64) -> Result<Self> {
        let alpha = if p == Precision::Fp32 { 1.0 } else { p.alpha() };
        Self::new(alpha, gamma)
    }

    /// `(1−Γ)·α²`
    pub fn mul_factor(&self) -> f64 {
        (1.0 - self.gamma) * self.alpha * self.alpha
    }

    /// `(1−Γ)·α`, shared by additions and memory accesses.
    pub fn add_factor(&self) -> f64 {
        (1.0 - self.gamma) * self.alpha
    }

    pub fn mem_factor(&self) -> f64 {
        self.add_factor()
    }
}

/// `E_F = E_MUL + E_ADD + E_MEM`, split into the delta-skippable GRU
/// matrix-vector part and everything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub mul_pj: f64,
    pub add_pj: f64,
    pub mem_pj: f64,
    pub gru_mv_pj: f64,
    pub other_pj: f64,
    pub total_pj: f64,
}

impl EnergyBreakdown {
    pub fn total_joules(&self) -> f64 {
        self.total_pj * 1e-12
    }
}

/// Applies precision and sparsity scaling to *dense* counts.
///
/// The GRU input- and hidden-side terms get `(1−Γ)·α²` on multiplies and
/// `(1−Γ)·α` on adds and memory; the remaining terms get `α²` and `α`.
pub fn scale_energy(
    counts: &OpCounts,
    table: &EnergyTable,
    scaling: &EnergyScaling,
    precision: Precision,
) -> Result<EnergyBreakdown> {
    table.validate()?;
    let (e_mul, e_add) = table.reference(precision)?;
    let e_mem = table.l1_access_pj;
    let a = scaling.alpha;
    let part = |c: &OpCount, mf: f64, af: f64| {
        (
            c.total_muls() * e_mul * mf,
            c.total_adds() * e_add * af,
            c.total_mem() * e_mem * af,
        )
    };
    let mut mv = (0.0, 0.0, 0.0);
    for c in [&counts.gru_input, &counts.gru_hidden] {
        let (m, ad, me) = part(c, scaling.mul_factor(), scaling.add_factor());
        mv = (mv.0 + m, mv.1 + ad, mv.2 + me);
    }
    let mut rest = (0.0, 0.0, 0.0);
    for c in [&counts.gru_elementwise, &counts.fc, &counts.tcn, &counts.overhead] {
        let (m, ad, me) = part(c, a * a, a);
        rest = (rest.0 + m, rest.1 + ad, rest.2 + me);
    }
    let gru_mv_pj = mv.0 + mv.1 + mv.2;
    let other_pj = rest.0 + rest.1 + rest.2;
    Ok(EnergyBreakdown {
        mul_pj: mv.0 + rest.0,
        add_pj: mv.1 + rest.1,
        mem_pj: mv.2 + rest.2,
        gru_mv_pj,
        other_pj,
        total_pj: gru_mv_pj + other_pj,
    })
}

/// DPD system operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerScenario {
    /// Energy per forward pass, J.
    pub energy_per_forward_j: f64,
    pub sample_rate_hz: f64,
    /// Adaptation period, s.
    pub t_dpd_s: f64,
    pub p_adc_w: f64,
    pub n_sam: f64,
    pub n_epo: f64,
    #[serde(default = "default_backward_ratio")]
    pub backward_cost_ratio: f64,
}

fn default_backward_ratio() -> f64 {
    3.0
}

impl PowerScenario {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.energy_per_forward_j, self.sample_rate_hz, self.t_dpd_s, self.p_adc_w];
        if !pos.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::invalid("E_F, f_s, T_dpd and P_adc must be positive"));
        }
        if !(self.n_sam >= 0.0 && self.n_epo >= 0.0 && self.backward_cost_ratio >= 0.0) {
            return Err(Error::invalid("N_sam, N_epo and the backward ratio must be non-negative"));
        }
        if self.t_dpd_s <= self.n_sam / self.sample_rate_hz {
            return Err(Error::invalid("T_dpd must exceed the capture time N_sam/f_s"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerBreakdown {
    pub p_inf_w: f64,
    pub p_sam_w: f64,
    pub p_ada_w: f64,
    pub p_total_w: f64,
}

/// `P_inf = E_F·f_s`, `P_sam = P_adc·N_sam/(T·f_s)`,
/// `P_ada = (1 + r_B)·E_F·N_epo·N_sam/T`.
pub fn power_breakdown(s: &PowerScenario) -> PowerBreakdown {
    let p_inf_w = s.energy_per_forward_j * s.sample_rate_hz;
    let p_sam_w = s.p_adc_w * s.n_sam / (s.t_dpd_s * s.sample_rate_hz);
    let p_ada_w = (1.0 + s.backward_cost_ratio) * s.energy_per_forward_j * s.n_epo * s.n_sam / s.t_dpd_s;
    PowerBreakdown {
        p_inf_w,
        p_sam_w,
        p_ada_w,
        p_total_w: p_inf_w + p_sam_w + p_ada_w,
    }
}

/// Energy summary of one evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub estimate: &'static str,
    pub precision: Precision,
    pub gamma: f64,
    pub gamma_phi: f64,
    pub gamma_h: f64,
    pub counts_per_step: OpCounts,
    pub energy: EnergyBreakdown,
    pub fp32_dense: EnergyBreakdown,
    pub reduction_factor: f64,
    pub active_params: f64,
    pub power: Option<PowerBreakdown>,
}

/// Combines the op counts of `model` with a measured sparsity report.
///
/// When `scenario` is given its `energy_per_forward_j` is replaced by the
/// computed `E_F`.
pub fn energy_report<T: Real>(
    model: &TResDeltaGru<T>,
    sparsity: &SparsityReport,
    precision: Precision,
    table: &EnergyTable,
    scenario: Option<&PowerScenario>,
) -> Result<EnergyReport> {
    let dims = model.dims();
    let dense = count_forward_ops(&dims, 0.0, 0.0)?;
    let energy = scale_energy(&dense, table, &EnergyScaling::for_precision(precision, sparsity.gamma)?, precision)?;
    let fp32_dense = scale_energy(&dense, table, &EnergyScaling::new(1.0, 0.0)?, Precision::Fp32)?;
    let power = match scenario {
        Some(s) => {
            let s = PowerScenario {
                energy_per_forward_j: energy.total_joules(),
                ..*s
            };
            s.validate()?;
            Some(power_breakdown(&s))
        }
        None => None,
    };
    Ok(EnergyReport {
        estimate: "arithmetic + D-cache analytical estimate",
        precision,
        gamma: sparsity.gamma,
        gamma_phi: sparsity.gamma_phi,
        gamma_h: sparsity.gamma_h,
        counts_per_step: count_forward_ops(&dims, sparsity.gamma_phi, sparsity.gamma_h)?,
        energy,
        fp32_dense,
        reduction_factor: fp32_dense.total_pj / energy.total_pj,
        active_params: count_active_params(model, sparsity.gamma)?,
        power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(t_dpd_s: f64) -> PowerScenario {
        PowerScenario {
            energy_per_forward_j: 10e-9,
            sample_rate_hz: 1e9,
            t_dpd_s,
            p_adc_w: 1.0,
            n_sam: 6600.0,
            n_epo: 10.0,
            backward_cost_ratio: 3.0,
        }
    }

    #[test]
    fn power_case_study() {
        let p = power_breakdown(&case(1e-3));
        assert!((p.p_inf_w - 10.0).abs() < 1e-12);
        assert!((p.p_sam_w - 0.0066).abs() < 1e-12);
        assert!((p.p_ada_w - 2.64).abs() < 1e-12);
        assert!((p.p_total_w - 12.65).abs() < 0.005);
        let p = power_breakdown(&case(10e-3));
        assert!((p.p_total_w - 10.26).abs() < 0.005);
        let p = power_breakdown(&PowerScenario { n_sam: 0.0, ..case(1e-3) });
        assert_eq!((p.p_sam_w, p.p_ada_w, p.p_total_w), (0.0, 0.0, 10.0));
    }

    #[test]
    fn scenario_validation() {
        assert!(case(1e-3).validate().is_ok());
        assert!(PowerScenario { t_dpd_s: 1e-6, ..case(1e-3) }.validate().is_err());
        assert!(PowerScenario { p_adc_w: 0.0, ..case(1e-3) }.validate().is_err());
    }

    #[test]
    fn dense_counts_for_default_model() {
        let c = count_forward_ops(&ModelDims::dpd(15), 0.0, 0.0).unwrap();
        assert_eq!(c.gru_macs(), 945.0);
        assert_eq!(c.fc.macs, 30.0);
        assert_eq!(c.tcn.macs, 24.0);
        assert_eq!(c.total_macs(), 999.0);
        let s = count_forward_ops(&ModelDims::dpd(15), 1.0, 1.0).unwrap();
        assert_eq!(s.gru_macs(), 0.0);
        assert_eq!((s.fc, s.tcn), (c.fc, c.tcn));
        let half = count_forward_ops(&ModelDims::dpd(15), 0.0, 0.5).unwrap();
        assert_eq!(half.gru_hidden.macs * 2.0, c.gru_hidden.macs);
        assert!(count_forward_ops(&ModelDims::dpd(15), 1.5, 0.0).is_err());
    }

    #[test]
    fn scaling_factors() {
        for (g, a, m, ad) in [
            (0.0, 1.0, 1.0, 1.0),
            (0.5, 0.5, 0.125, 0.25),
            (0.725, 0.375, 0.275 * 0.140625, 0.275 * 0.375),
        ] {
            let s = EnergyScaling::new(a, g).unwrap();
            assert!((s.mul_factor() - m).abs() < 1e-15);
            assert!((s.add_factor() - ad).abs() < 1e-15);
        }
        assert!(EnergyScaling::new(0.0, 0.1).is_err());
        assert!(EnergyScaling::new(0.5, 1.1).is_err());
    }

    #[test]
    fn int16_reference_recovers_table_entries() {
        let t = EnergyTable::default();
        assert!((t.int32_mul_pj() * 0.25 - t.int16_mul_pj).abs() < 1e-15);
        assert!((t.int32_add_pj() * 0.5 - t.int16_add_pj).abs() < 1e-15);
        assert!(t.reference(Precision::Int8).is_err());
    }

    #[test]
    fn energy_is_linear_in_counts() {
        let t = EnergyTable::default();
        let c = count_forward_ops(&ModelDims::dpd(15), 0.0, 0.0).unwrap();
        let s = EnergyScaling::new(0.5, 0.3).unwrap();
        let e1 = scale_energy(&c, &t, &s, Precision::Int16).unwrap();
        let e2 = scale_energy(&c.scaled(2.0), &t, &s, Precision::Int16).unwrap();
        assert!((e2.total_pj - 2.0 * e1.total_pj).abs() < 1e-9);
        let id = scale_energy(&c, &t, &EnergyScaling::new(1.0, 0.0).unwrap(), Precision::Fp32).unwrap();
        let direct: f64 = c
            .parts()
            .iter()
            .map(|(_, p)| p.total_muls() * t.fp32_mul_pj + p.total_adds() * t.fp32_add_pj + p.total_mem() * t.l1_access_pj)
            .sum();
        assert!((id.total_pj - direct).abs() < 1e-9);
    }
}
