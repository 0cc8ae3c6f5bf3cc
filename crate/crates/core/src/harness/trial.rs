//! One Monte Carlo trial: scene, transmission, per-satellite estimation,
//! fusion, detection and metrics.

use crate::baselines::{oracle_ls, somp, SompConfig};
use crate::coop::dequant::{ls_on_points, BackhaulMode, run_bayes_dequant, StackedObservation};
use crate::coop::{cooperative_ls, majority_vote, SatelliteReport};
use crate::detect::{clean_frequency_frame, detect_frame};
use crate::error::{Error, Result};
use crate::esprit::refine;
use crate::frame::{
    build_sensing_matrix, build_stream, extract_nonisi, modulate, random_bits, transmit, FrameConfig,
    TrainingSequenceBank,
};
use crate::harness::config::{Algorithm, Detection, ExperimentConfig, Scenario, SolverConfig};
use crate::linalg::{CMat, RMat};
use crate::metrics::{aep, aep_per_satellite, ber, nmse_db};
use crate::oamp::{run_oamp_mmv, OampOutput, SvdCache};
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::scene::{sample_realization, sample_scene, ChannelRealization};

/// Everything shared by the trials of one sweep point.
pub struct PointContext {
    pub scenario: Scenario,
    pub frame: FrameConfig,
    pub bank: TrainingSequenceBank,
    pub psi: RMat,
    pub svd: SvdCache,
    pub noise_var: f64,
}

impl PointContext {
    /// The training bank depends only on the master seed; shorter sequences
    /// are prefixes of longer ones.
    pub fn new(scenario: Scenario, master_seed: u64) -> Result<Self> {
        scenario.validate()?;
        let frame = scenario.frame_config();
        let bank = TrainingSequenceBank::generate(
            scenario.num_users,
            frame.ts_len,
            derive_seed(master_seed, &[tags::TRAINING]),
        );
        let psi = build_sensing_matrix(&bank, &frame)?;
        let svd = SvdCache::new(&psi)?;
        let noise_var = scenario.noise_var();
        Ok(Self { scenario, frame, bank, psi, svd, noise_var })
    }
}

/// Ground truth and received signals of one trial.
pub struct TrialData {
    pub truth: ChannelRealization,
    /// `sent[k]` concatenates user `k`'s bits over all frames; empty if inactive.
    pub sent: Vec<Vec<u8>>,
    pub rx: Vec<CMat>,
}

pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    derive_seed(master_seed, &[tags::TRIAL, trial as u64])
}

pub fn simulate(ctx: &PointContext, seed: u64) -> Result<TrialData> {
    let sc = &ctx.scenario;
    let mut srng = rng_from_seed(derive_seed(seed, &[tags::SCENE]));
    let scene = sample_scene(&sc.geometry(), &mut srng);
    let truth = sample_realization(&scene, &sc.channel_params(), seed)?;
    let cfg = &ctx.frame;
    let mut sent = vec![Vec::new(); sc.num_users];
    let mut streams = vec![Vec::new(); sc.num_users];
    for &k in &truth.active_set {
        let frames = (0..cfg.num_frames)
            .map(|t| {
                let mut prng = rng_from_seed(derive_seed(seed, &[tags::PAYLOAD, k as u64, t as u64]));
                modulate(&random_bits(cfg.bits_per_frame(), &mut prng), cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        for f in &frames {
            sent[k].extend_from_slice(&f.bits);
        }
        streams[k] = build_stream(&ctx.bank.sequences[k][..cfg.ts_len], &frames, cfg);
    }
    if truth.active_set.is_empty() {
        // nobody transmits, but the satellites still record a full burst of noise
        streams[0] = vec![crate::linalg::C64::new(0.0, 0.0); cfg.stream_len()];
    }
    let burst = transmit(&streams, &truth, ctx.noise_var, seed);
    Ok(TrialData { truth, sent, rx: burst.per_satellite })
}

/// Channel estimates and activity decisions of one algorithm at every satellite.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub h: Vec<CMat>,
    pub active: Vec<Vec<bool>>,
}

fn users_of(active: &[bool]) -> Vec<usize> {
    active.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k).collect()
}

pub fn run_oamp(ctx: &PointContext, data: &TrialData, solver: &SolverConfig) -> Result<Vec<OampOutput>> {
    data.rx
        .iter()
        .map(|y| {
            let obs = extract_nonisi(y, &ctx.frame, 0)?;
            run_oamp_mmv(&obs, &ctx.svd, ctx.noise_var, ctx.frame.max_delay, solver.oamp)
        })
        .collect()
}

/// Estimates of one algorithm; `oamp` is reused when already computed.
pub fn estimate(
    alg: Algorithm,
    ctx: &PointContext,
    data: &TrialData,
    solver: &SolverConfig,
    oamp: Option<&[OampOutput]>,
) -> Result<Estimate> {
    let l = ctx.frame.max_delay;
    let q = data.rx.len();
    let truth = &data.truth;
    let owned;
    Ok(match alg {
        Algorithm::Alg1 | Algorithm::Alg1Alg2 => {
            let outs: &[OampOutput] = match oamp {
                Some(o) => o,
                None => {
                    owned = run_oamp(ctx, data, solver)?;
                    &owned[..]
                }
            };
            let active = outs.iter().map(|o| o.active.clone()).collect();
            let h = if alg == Algorithm::Alg1 {
                outs.iter().map(|o| o.h.clone()).collect()
            } else {
                outs.iter()
                    .map(|o| {
                        refine(&o.h, &o.support, &o.active, l, ctx.scenario.array_x, ctx.scenario.array_y, &solver.refine)
                            .map(|r| r.h)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            Estimate { h, active }
        }
        Algorithm::Somp => {
            let cfg = SompConfig {
                max_columns: if solver.somp_known_sparsity {
                    Some(ctx.scenario.num_active * ctx.scenario.num_paths)
                } else {
                    solver.somp.max_columns
                },
                ..solver.somp
            };
            let mut est = Estimate { h: Vec::with_capacity(q), active: Vec::with_capacity(q) };
            for y in &data.rx {
                let obs = extract_nonisi(y, &ctx.frame, 0)?;
                let out = somp(&obs, &ctx.psi, ctx.noise_var, l, &cfg)?;
                est.h.push(out.h);
                est.active.push(out.active);
            }
            est
        }
        Algorithm::OracleLs => {
            let mut est = Estimate { h: Vec::with_capacity(q), active: vec![truth.activity.clone(); q] };
            for (qi, y) in data.rx.iter().enumerate() {
                let obs = extract_nonisi(y, &ctx.frame, 0)?;
                est.h.push(oracle_ls(&obs, &ctx.psi, &truth.row_support(qi))?);
            }
            est
        }
        Algorithm::PerfectCsi => Estimate { h: truth.cirm.clone(), active: vec![truth.activity.clone(); q] },
    })
}

/// Metrics of one (algorithm, detection, resolution) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub algorithm: Algorithm,
    pub detection: Detection,
    pub quant_bits: Option<u32>,
    pub nmse_db: Option<f64>,
    pub aep_coop: Option<f64>,
    pub aep_noncoop: Option<f64>,
    pub ber: Option<f64>,
    pub backhaul_bits: usize,
}

/// Run every requested detection mode on one algorithm's estimates.
pub fn detect_all(
    alg: Algorithm,
    est: &Estimate,
    ctx: &PointContext,
    data: &TrialData,
    cfg: &ExperimentConfig,
    bits: &[u32],
) -> Result<Vec<TrialRecord>> {
    let frame = &ctx.frame;
    let truth = &data.truth;
    let q = data.rx.len();
    let nr = ctx.scenario.num_antennas();
    let nmse = match alg {
        Algorithm::PerfectCsi => None,
        _ => Some(nmse_db(&est.h, &truth.cirm)),
    };
    let fused = majority_vote(&est.active)?;
    let (aep_coop, aep_noncoop) = if alg.detects_activity() {
        (Some(aep(&fused, &truth.activity)), Some(aep_per_satellite(&est.active, &truth.activity)))
    } else {
        (None, None)
    };
    let fused_users = users_of(&fused);
    let record = |detection, quant_bits, ber, backhaul_bits| TrialRecord {
        algorithm: alg,
        detection,
        quant_bits,
        nmse_db: nmse,
        aep_coop,
        aep_noncoop,
        ber,
        backhaul_bits,
    };

    // cleaned frequency-domain observations, reused by every cooperative mode
    let needs_reports = cfg.detection.iter().any(|d| *d != Detection::NonCooperative);
    let reports: Vec<Vec<SatelliteReport>> = if needs_reports {
        (0..frame.num_frames)
            .map(|t| {
                (0..q)
                    .map(|qi| {
                        let users = users_of(&est.active[qi]);
                        Ok(SatelliteReport {
                            yf: clean_frequency_frame(&data.rx[qi], &est.h[qi], &users, &ctx.bank, frame, t)?,
                            h: est.h[qi].clone(),
                            active: est.active[qi].clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let ber_of = |decoded: &[Vec<Vec<u8>>], users: &[usize]| -> Option<f64> {
        // decoded[t][i] for users[i]; concatenate frames per user
        let joined: Vec<Vec<u8>> =
            (0..users.len()).map(|i| decoded.iter().flat_map(|f| f[i].iter().copied()).collect()).collect();
        let pairs: Vec<(usize, &[u8])> = users.iter().zip(&joined).map(|(&u, b)| (u, b.as_slice())).collect();
        ber(&data.sent, &truth.active_set, &pairs)
    };

    let mut stacked: Vec<(BackhaulMode, u32, Vec<StackedObservation>)> = Vec::new();
    let mut out = Vec::new();
    for &det in &cfg.detection {
        match det {
            Detection::NonCooperative => {
                let mut per_sat = Vec::with_capacity(q);
                for qi in 0..q {
                    let users = users_of(&est.active[qi]);
                    let frames = (0..frame.num_frames)
                        .map(|t| {
                            detect_frame(&data.rx[qi], &est.h[qi], &users, &ctx.bank, frame, t, ctx.noise_var, &cfg.solver.detect)
                                .map(|d| d.bits)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    per_sat.push(ber_of(&frames, &users));
                }
                let vals: Vec<f64> = per_sat.into_iter().flatten().collect();
                let mean = if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) };
                out.push(record(det, None, mean, 0));
            }
            Detection::CooperativeLs => {
                let frames = reports
                    .iter()
                    .map(|r| cooperative_ls(r, &fused, frame).map(|d| d.bits))
                    .collect::<Result<Vec<_>>>()?;
                let backhaul = q.saturating_sub(1) * 2 * frame.data_len * nr * 64;
                out.push(record(det, None, ber_of(&frames, &fused_users), backhaul));
            }
            _ => {
                let mode = det.backhaul_mode().expect("quantized mode");
                for &b in bits {
                    // the Bayes and LS variants of a mode see the same quantized points
                    let pos = match stacked.iter().position(|(m, bb, _)| *m == mode && *bb == b) {
                        Some(p) => p,
                        None => {
                            let obs = reports
                                .iter()
                                .map(|r| StackedObservation::build(r, &fused_users, mode, Some(b), frame))
                                .collect::<Result<Vec<_>>>()?;
                            stacked.push((mode, b, obs));
                            stacked.len() - 1
                        }
                    };
                    let obs = &stacked[pos].2;
                    let frames = obs
                        .iter()
                        .map(|o| match det {
                            Detection::BayesMsctp | Detection::BayesMscbp => {
                                run_bayes_dequant(o, ctx.noise_var, frame, &cfg.solver.dequant).map(|d| d.bits)
                            }
                            _ => ls_on_points(o, frame).map(|d| d.bits),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let backhaul = obs.last().map_or(0, |o| o.backhaul_bits);
                    out.push(record(det, Some(b), ber_of(&frames, &fused_users), backhaul));
                }
            }
        }
    }
    Ok(out)
}

/// All records of one trial, in configuration order.
pub fn run_trial(ctx: &PointContext, cfg: &ExperimentConfig, bits: &[u32], seed: u64) -> Result<Vec<TrialRecord>> {
    let data = simulate(ctx, seed)?;
    let needs_oamp = cfg.algorithms.iter().any(|a| matches!(a, Algorithm::Alg1 | Algorithm::Alg1Alg2));
    let oamp = if needs_oamp { Some(run_oamp(ctx, &data, &cfg.solver)?) } else { None };
    let mut out = Vec::new();
    for &alg in &cfg.algorithms {
        let est = estimate(alg, ctx, &data, &cfg.solver, oamp.as_deref())?;
        if est.h.iter().any(|h| h.iter().any(|v| !v.re.is_finite() || !v.im.is_finite())) {
            return Err(Error::Numerical(format!("{} produced a non-finite channel estimate", alg.name())));
        }
        out.extend(detect_all(alg, &est, ctx, &data, cfg, bits)?);
    }
    Ok(out)
}
