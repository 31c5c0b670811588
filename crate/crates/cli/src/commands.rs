//! Subcommand implementations. Stages communicate only through files in
//! the output directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use dpdlab_core::energy::{
    count_forward_ops, energy_report, scale_energy, EnergyScaling, PowerScenario,
};
use dpdlab_core::fsutil::write_atomic;
use dpdlab_core::metrics::acpr_of;
use dpdlab_core::nn::{load_model, save_model, ModelDims, TResDeltaGru};
use dpdlab_core::quant::QuantizedModel;
use dpdlab_core::train::{train_dpd_cascade, train_pa_model, train_qat, QatConfig, TrainLog};
use dpdlab_core::{
    count_active_params, evm, extract_am_curves, generate_ofdm, model_forward, nmse, psd_welch, save_iq_csv,
    DeltaThresholds, Error, IQSequence, Precision, QuantModelConfig, Result, SparsityReport, Window,
};

use crate::config::{DatasetSource, ExperimentConfig, SUPPORTED_SWEEP_BITS};
use crate::data::{data_dir, oracle, require, Data};

type Model = TResDeltaGru<f32>;

fn models_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("models")
}

fn pa_path(cfg: &ExperimentConfig) -> PathBuf {
    models_dir(cfg).join("pa_model.json")
}

fn dpd_path(cfg: &ExperimentConfig) -> PathBuf {
    models_dir(cfg).join("dpd_model.json")
}

fn qat_path(cfg: &ExperimentConfig) -> PathBuf {
    models_dir(cfg).join("dpd_qat.json")
}

fn log_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output_dir.join("logs").join(format!("{name}.csv"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

fn check_dims(model: &Model, want: ModelDims, what: &Path) -> Result<()> {
    if model.dims() != want {
        return Err(Error::shape(format!(
            "{} has dims {:?}, config expects {:?}",
            what.display(),
            model.dims(),
            want
        )));
    }
    Ok(())
}

fn load_pa(cfg: &ExperimentConfig) -> Result<Model> {
    let p = pa_path(cfg);
    let m: Model = load_model(require(&p, "train-pa")?)?;
    check_dims(&m, ModelDims::pa(cfg.pa_model.hidden_size), &p)?;
    Ok(m)
}

fn load_dpd(cfg: &ExperimentConfig) -> Result<Model> {
    let p = dpd_path(cfg);
    let m: Model = load_model(require(&p, "train-dpd")?)?;
    check_dims(&m, cfg.dpd.dims(), &p)?;
    Ok(m)
}

fn load_qat(cfg: &ExperimentConfig) -> Result<QuantizedModel> {
    let p = qat_path(cfg);
    let q = QuantizedModel::load(require(&p, "qat")?)?;
    if q.dims() != cfg.dpd.dims() {
        return Err(Error::shape(format!("{} does not match the configured DPD dims", p.display())));
    }
    Ok(q)
}

fn summarize(stage: &str, log: &TrainLog) {
    let best = log.best_epoch.and_then(|e| log.epochs.get(e - 1));
    match best {
        Some(e) => println!(
            "{stage}: {} epochs, best epoch {} (val mse {:.3e}{})",
            log.epochs.len(),
            e.epoch,
            e.val_mse,
            e.val_acpr.map_or_else(String::new, |a| format!(", val ACPR {a:.2} dBc"))
        ),
        None => println!("{stage}: {} epochs, initial model kept", log.epochs.len()),
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dataset.source != DatasetSource::Synthetic {
        return Err(Error::invalid("gen-data needs dataset.source = \"synthetic\""));
    }
    let x = generate_ofdm(&cfg.dataset.ofdm)?;
    let y = match oracle(cfg)? {
        Some(o) => o.apply(&x),
        None => return Err(Error::invalid("gen-data needs an oracle (dataset.oracle is \"none\")")),
    };
    let dir = data_dir(cfg);
    save_iq_csv(dir.join("input.csv"), &x)?;
    save_iq_csv(dir.join("output.csv"), &y)?;
    println!("gen-data: {} samples at {} Hz -> {}", x.len(), x.sample_rate_hz(), dir.display());
    Ok(())
}

pub fn train_pa(cfg: &ExperimentConfig) -> Result<()> {
    let data = Data::load(cfg)?;
    let (pa, log) = train_pa_model::<f32>(&data.split, ModelDims::pa(cfg.pa_model.hidden_size), &cfg.train.pa)?;
    save_model(&pa, pa_path(cfg))?;
    log.write_csv(log_path(cfg, "train_pa"))?;
    summarize("train-pa", &log);
    Ok(())
}

pub fn train_dpd(cfg: &ExperimentConfig) -> Result<()> {
    let pa = load_pa(cfg)?;
    let data = Data::load(cfg)?;
    let dpd = Model::init(cfg.dpd.dims(), cfg.train.dpd.seed).with_thresholds(cfg.dpd.thresholds()?);
    let (dpd, log) = train_dpd_cascade(&pa, dpd, &cfg.cascade()?, &data.split, &cfg.train.dpd)?;
    save_model(&dpd, dpd_path(cfg))?;
    log.write_csv(log_path(cfg, "train_dpd"))?;
    summarize("train-dpd", &log);
    Ok(())
}

fn run_qat(cfg: &ExperimentConfig, data: &Data, quant: QuantModelConfig, epochs: usize) -> Result<(QuantizedModel, TrainLog)> {
    let pa = load_pa(cfg)?;
    let dpd = load_dpd(cfg)?;
    let qcfg = QatConfig { quant, ..cfg.quant };
    let tcfg = dpdlab_core::train::TrainConfig {
        epochs,
        ..cfg.train.qat.clone()
    };
    let r = train_qat(&dpd, &pa, &qcfg, &cfg.cascade()?, &data.split, &tcfg)?;
    Ok((r.model, r.log))
}

pub fn qat(cfg: &ExperimentConfig) -> Result<()> {
    let data = Data::load(cfg)?;
    let (q, log) = run_qat(cfg, &data, cfg.quant(), cfg.train.qat.epochs)?;
    q.save(qat_path(cfg))?;
    log.write_csv(log_path(cfg, "qat"))?;
    summarize(&format!("qat {}", cfg.quant().label()), &log);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Dpd,
    Qat,
}

impl Which {
    fn tag(self) -> &'static str {
        match self {
            Which::Dpd => "dpd",
            Which::Qat => "qat",
        }
    }
}

enum Dpd {
    Float(Model),
    Quant(QuantizedModel),
}

impl Dpd {
    fn load(cfg: &ExperimentConfig, which: Which) -> Result<Self> {
        Ok(match which {
            Which::Dpd => Dpd::Float(load_dpd(cfg)?),
            Which::Qat => Dpd::Quant(load_qat(cfg)?),
        })
    }

    fn forward(&self, x: &IQSequence) -> Result<(IQSequence, SparsityReport)> {
        match self {
            Dpd::Float(m) => model_forward(m, x),
            Dpd::Quant(q) => q.forward(x),
        }
    }

    fn precision(&self) -> Result<Precision> {
        match self {
            Dpd::Float(_) => Ok(Precision::Fp32),
            Dpd::Quant(q) => Precision::from_bits(q.cfg.weight_bits),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
struct SignalMetrics {
    acpr_lower_dbc: f64,
    acpr_upper_dbc: f64,
    acpr_avg_dbc: f64,
    evm_db: f64,
    nmse_db: f64,
}

fn signal_metrics(cfg: &ExperimentConfig, x: &IQSequence, y: &IQSequence) -> Result<SignalMetrics> {
    let a = acpr_of(y, &cfg.acpr()?)?;
    Ok(SignalMetrics {
        acpr_lower_dbc: a.lower_dbc,
        acpr_upper_dbc: a.upper_dbc,
        acpr_avg_dbc: a.avg_dbc,
        evm_db: evm(x, y)?,
        nmse_db: nmse(x, y)?,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Comparison {
    no_dpd: SignalMetrics,
    with_dpd: SignalMetrics,
    acpr_improvement_db: f64,
    evm_improvement_db: f64,
}

impl Comparison {
    fn new(no_dpd: SignalMetrics, with_dpd: SignalMetrics) -> Self {
        Self {
            no_dpd,
            with_dpd,
            acpr_improvement_db: no_dpd.acpr_avg_dbc - with_dpd.acpr_avg_dbc,
            evm_improvement_db: no_dpd.evm_db - with_dpd.evm_db,
        }
    }
}

#[derive(Serialize)]
struct EvalReport {
    model: &'static str,
    precision: Precision,
    test_samples: usize,
    sparsity: SparsityReport,
    oracle: Option<Comparison>,
    pa_model: Comparison,
}

/// Response of the PA the metrics refer to: the oracle when there is one,
/// the learned PA model otherwise.
fn pa_response(data: &Data, pa: &Model, u: &IQSequence) -> Result<IQSequence> {
    match data.through_oracle(u) {
        Some(y) => Ok(y),
        None => Ok(model_forward(&dense(pa), u)?.0),
    }
}

fn dense(m: &Model) -> Model {
    m.clone().with_thresholds(DeltaThresholds::DENSE)
}

pub fn evaluate(cfg: &ExperimentConfig, which: Which) -> Result<()> {
    let data = Data::load(cfg)?;
    let pa = dense(&load_pa(cfg)?);
    let dpd = Dpd::load(cfg, which)?;
    let x = &data.split.test.input;
    let (u, sparsity) = dpd.forward(x)?;
    let y_pa0 = model_forward(&pa, x)?.0;
    let y_pa1 = model_forward(&pa, &u)?.0;
    let pa_cmp = Comparison::new(signal_metrics(cfg, x, &y_pa0)?, signal_metrics(cfg, x, &y_pa1)?);
    let oracle_pair = match (data.through_oracle(x), data.through_oracle(&u)) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let oracle_cmp = match &oracle_pair {
        Some((a, b)) => Some(Comparison::new(signal_metrics(cfg, x, a)?, signal_metrics(cfg, x, b)?)),
        None => None,
    };
    let report = EvalReport {
        model: which.tag(),
        precision: dpd.precision()?,
        test_samples: x.len(),
        sparsity,
        oracle: oracle_cmp,
        pa_model: pa_cmp,
    };
    let dir = cfg.output_dir.join("eval").join(which.tag());
    write_json(&dir.join("metrics.json"), &report)?;

    let (y0, y1) = oracle_pair.unwrap_or((y_pa0, y_pa1));
    write_plot_data(cfg, &dir, x, &y0, &y1)?;
    let c = oracle_cmp.unwrap_or(pa_cmp);
    println!(
        "evaluate {}: ACPR {:.2} -> {:.2} dBc, EVM {:.2} -> {:.2} dB ({}), Γ = {:.3}",
        which.tag(),
        c.no_dpd.acpr_avg_dbc,
        c.with_dpd.acpr_avg_dbc,
        c.no_dpd.evm_db,
        c.with_dpd.evm_db,
        if oracle_cmp.is_some() { "oracle PA" } else { "PA model" },
        sparsity.gamma
    );
    Ok(())
}

fn write_plot_data(cfg: &ExperimentConfig, dir: &Path, x: &IQSequence, y0: &IQSequence, y1: &IQSequence) -> Result<()> {
    let n = dpdlab_core::metrics::default_segment_len(x.len(), x.sample_rate_hz(), cfg.acpr()?.main_bw_hz());
    let psd = |s: &IQSequence| psd_welch(s, n, n / 2, Window::Hann);
    let (px, p0, p1) = (psd(x)?, psd(y0)?, psd(y1)?);
    let rows: Vec<Vec<String>> = (0..px.freqs_hz.len())
        .map(|i| {
            vec![
                format!("{}", px.freqs_hz[i]),
                format!("{}", px.psd_db[i]),
                format!("{}", p0.psd_db[i]),
                format!("{}", p1.psd_db[i]),
            ]
        })
        .collect();
    write_csv(&dir.join("psd.csv"), &["freq_hz", "input_db", "no_dpd_db", "with_dpd_db"], &rows)?;

    let bins = cfg.metrics.am_bins.unwrap_or(64);
    let (a0, a1) = (extract_am_curves(x, y0, bins)?, extract_am_curves(x, y1, bins)?);
    let db = |g: Option<f64>| g.map(|g| 20.0 * g.log10());
    let deg = |p: Option<f64>| p.map(f64::to_degrees);
    let rows: Vec<Vec<String>> = a0
        .centers()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                format!("{c}"),
                cell(db(a0.gain[i])),
                cell(deg(a0.phase[i])),
                cell(db(a1.gain[i])),
                cell(deg(a1.phase[i])),
                format!("{}", a0.counts[i]),
            ]
        })
        .collect();
    write_csv(
        &dir.join("am_curves.csv"),
        &["input_amplitude", "no_dpd_gain_db", "no_dpd_phase_deg", "with_dpd_gain_db", "with_dpd_phase_deg", "count"],
        &rows,
    )?;

    // Outputs divided by their least-squares gain so they overlay the reference.
    let aligned = |y: &IQSequence| {
        let g: num_complex::Complex64 = x.samples().iter().zip(y.samples()).map(|(a, b)| b * a.conj()).sum::<num_complex::Complex64>()
            / x.samples().iter().map(|a| a.norm_sqr()).sum::<f64>();
        y.samples().iter().map(|v| v / g).collect::<Vec<_>>()
    };
    let (c0, c1) = (aligned(y0), aligned(y1));
    let k = cfg.metrics.constellation_points.unwrap_or(4096).min(x.len());
    let rows: Vec<Vec<String>> = (0..k)
        .map(|i| {
            let r = x.samples()[i];
            [r.re, r.im, c0[i].re, c0[i].im, c1[i].re, c1[i].im].iter().map(|v| format!("{v}")).collect()
        })
        .collect();
    write_csv(
        &dir.join("constellation.csv"),
        &["ref_i", "ref_q", "no_dpd_i", "no_dpd_q", "with_dpd_i", "with_dpd_q"],
        &rows,
    )
}

/// With `finetune_epochs > 0` each grid point starts from the trained DPD
/// and is fine-tuned at its thresholds before evaluation.
pub fn sweep_thresholds(
    cfg: &ExperimentConfig,
    phi: &[f64],
    h: &[f64],
    finetune_epochs: usize,
    deterministic: bool,
) -> Result<()> {
    if phi.is_empty() || h.is_empty() {
        return Err(Error::invalid("threshold grids must not be empty"));
    }
    let grid: Vec<DeltaThresholds> = phi
        .iter()
        .flat_map(|&p| h.iter().map(move |&t| DeltaThresholds::new(p, t)))
        .collect::<Result<_>>()?;
    let data = Data::load(cfg)?;
    let pa = dense(&load_pa(cfg)?);
    let dpd = load_dpd(cfg)?;
    let x = &data.split.test.input;
    let point = |th: &DeltaThresholds| -> Result<Vec<String>> {
        let mut m = dpd.clone().with_thresholds(*th);
        if finetune_epochs > 0 && !th.is_dense() {
            let tcfg = dpdlab_core::train::TrainConfig {
                epochs: finetune_epochs,
                ..cfg.train.dpd.clone()
            };
            m = train_dpd_cascade(&pa, m, &cfg.cascade()?, &data.split, &tcfg)?.0;
        }
        let (u, rep) = model_forward(&m, x)?;
        let y = pa_response(&data, &pa, &u)?;
        let s = signal_metrics(cfg, x, &y)?;
        Ok(vec![
            format!("{}", th.theta_phi),
            format!("{}", th.theta_h),
            format!("{}", rep.gamma),
            format!("{}", rep.gamma_phi),
            format!("{}", rep.gamma_h),
            format!("{}", count_active_params(&m, rep.gamma)?),
            format!("{}", s.acpr_avg_dbc),
            format!("{}", s.evm_db),
        ])
    };
    let rows: Vec<Vec<String>> = if deterministic {
        grid.iter().map(point).collect::<Result<_>>()?
    } else {
        grid.par_iter().map(point).collect::<Result<_>>()?
    };
    let path = cfg.output_dir.join("sweeps").join("thresholds.csv");
    write_csv(
        &path,
        &["theta_phi", "theta_h", "gamma", "gamma_phi", "gamma_h", "active_params", "acpr_dbc", "evm_db"],
        &rows,
    )?;
    println!("sweep-thresholds: {} points -> {}", rows.len(), path.display());
    Ok(())
}

pub fn sweep_precision(cfg: &ExperimentConfig, bits: &[u32], with_qat: bool) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::invalid("bit list must not be empty"));
    }
    if let Some(b) = bits.iter().find(|b| !SUPPORTED_SWEEP_BITS.contains(b)) {
        return Err(Error::invalid(format!("unsupported bit width {b}; expected one of {SUPPORTED_SWEEP_BITS:?}")));
    }
    let data = Data::load(cfg)?;
    let pa = dense(&load_pa(cfg)?);
    let dpd = load_dpd(cfg)?;
    let x = &data.split.test.input;
    let dense_counts = count_forward_ops(&dpd.dims(), 0.0, 0.0)?;
    let mut rows = Vec::new();
    for &b in bits {
        let p = Precision::from_bits(b)?;
        let (u, rep) = if b == 32 {
            model_forward(&dpd, x)?
        } else {
            let q = QuantModelConfig {
                weight_bits: b,
                activation_bits: b,
            };
            let epochs = if with_qat { cfg.train.qat.epochs } else { 0 };
            run_qat(cfg, &data, q, epochs)?.0.forward(x)?
        };
        let s = signal_metrics(cfg, x, &pa_response(&data, &pa, &u)?)?;
        let e_f = EnergyScaling::for_precision(p, rep.gamma)
            .and_then(|sc| scale_energy(&dense_counts, &cfg.energy.table, &sc, p))
            .map(|e| e.total_pj)
            .ok();
        if e_f.is_none() {
            log::warn!("no energy table entry for {b}-bit arithmetic; E_F left empty");
        }
        rows.push(vec![
            format!("{p:?}").to_lowercase(),
            format!("{b}"),
            format!("{}", rep.gamma),
            format!("{}", s.acpr_avg_dbc),
            format!("{}", s.evm_db),
            cell(e_f),
        ]);
    }
    let path = cfg.output_dir.join("sweeps").join("precision.csv");
    write_csv(&path, &["precision", "bits", "gamma", "acpr_dbc", "evm_db", "energy_per_forward_pj"], &rows)?;
    println!("sweep-precision: {} rows -> {}", rows.len(), path.display());
    Ok(())
}

pub fn energy_report_cmd(cfg: &ExperimentConfig, which: Which) -> Result<()> {
    let data = Data::load(cfg)?;
    let dpd = Dpd::load(cfg, which)?;
    let (_, sparsity) = dpd.forward(&data.split.test.input)?;
    let scenario: Option<PowerScenario> = cfg.energy.scenario.map(|s| s.to_scenario());
    let model = match &dpd {
        Dpd::Float(m) => m.cast::<f64>(),
        Dpd::Quant(q) => q.model.clone(),
    };
    let r = energy_report(&model, &sparsity, dpd.precision()?, &cfg.energy.table, scenario.as_ref())?;
    let path = cfg.output_dir.join("energy").join(format!("{}_report.json", which.tag()));
    write_json(&path, &r)?;
    println!(
        "energy-report {}: E_F = {:.1} pJ, {:.2}x below FP32 dense, Γ = {:.3} -> {}",
        which.tag(),
        r.energy.total_pj,
        r.reduction_factor,
        r.gamma,
        path.display()
    );
    Ok(())
}
