//! Training-sequence-padded frames, DFT-s-OFDM data blocks, multipath
//! reception and non-ISI extraction.
//!
//! Each user transmits `[c, x_0, c, x_1, ..., c, x_{P_s-1}, c]`: a training
//! sequence `c` of `M` real samples before every `N`-sample data block and one
//! extra sequence at the end. Frame `t` starts at sample `t (M + N)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::linalg::{dft, CMat, RMat, C64, ZERO};
use crate::rng::{complex_normal, derive_seed, rng_from_seed, standard_normal, tags};
use crate::scene::ChannelRealization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Modulation {
    /// Gray-mapped QPSK with unit average power.
    #[default]
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
        }
    }

    /// Constellation points, indexed by their bit label read LSB-first.
    pub fn points(self) -> Vec<C64> {
        (0..1usize << self.bits_per_symbol())
            .map(|label| {
                let bits: Vec<u8> = (0..self.bits_per_symbol()).map(|b| ((label >> b) & 1) as u8).collect();
                self.map(&bits)
            })
            .collect()
    }

    pub fn map(self, bits: &[u8]) -> C64 {
        match self {
            Modulation::Qpsk => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                C64::new(s * (1.0 - 2.0 * bits[0] as f64), s * (1.0 - 2.0 * bits[1] as f64))
            }
        }
    }

    /// Nearest-point hard decision, returned as bits.
    pub fn demap(self, z: C64, out: &mut Vec<u8>) {
        match self {
            Modulation::Qpsk => {
                out.push((z.re < 0.0) as u8);
                out.push((z.im < 0.0) as u8);
            }
        }
    }

    pub fn label_bits(self, label: usize, out: &mut Vec<u8>) {
        for b in 0..self.bits_per_symbol() {
            out.push(((label >> b) & 1) as u8);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    /// Training sequence length `M`.
    pub ts_len: usize,
    /// Data block length `N`.
    pub data_len: usize,
    /// Number of used subcarriers `M_s`.
    pub used_subcarriers: usize,
    pub max_delay: usize,
    /// Subcarrier index for each spread symbol; identity when empty.
    #[serde(default)]
    pub subcarrier_map: Vec<usize>,
    #[serde(default)]
    pub modulation: Modulation,
    pub num_frames: usize,
    /// Average data sample power relative to the unit-power training sequence.
    #[serde(default = "unit")]
    pub data_power: f64,
}

fn unit() -> f64 {
    1.0
}

impl FrameConfig {
    pub fn new(ts_len: usize, data_len: usize, used_subcarriers: usize, max_delay: usize, num_frames: usize) -> Self {
        Self {
            ts_len,
            data_len,
            used_subcarriers,
            max_delay,
            subcarrier_map: Vec::new(),
            modulation: Modulation::Qpsk,
            num_frames,
            data_power: 1.0,
        }
    }

    /// Length `G = M - L + 1` of the non-ISI window.
    pub fn nonisi_len(&self) -> usize {
        self.ts_len + 1 - self.max_delay
    }

    pub fn frame_len(&self) -> usize {
        self.ts_len + self.data_len
    }

    pub fn stream_len(&self) -> usize {
        self.frame_len() * self.num_frames + self.ts_len
    }

    pub fn bits_per_frame(&self) -> usize {
        self.used_subcarriers * self.modulation.bits_per_symbol()
    }

    /// Subcarrier index of spread symbol `m`.
    pub fn subcarrier(&self, m: usize) -> usize {
        if self.subcarrier_map.is_empty() {
            m
        } else {
            self.subcarrier_map[m]
        }
    }

    /// Which subcarriers carry data.
    pub fn occupied(&self) -> Vec<bool> {
        let mut occ = vec![false; self.data_len];
        for m in 0..self.used_subcarriers {
            occ[self.subcarrier(m)] = true;
        }
        occ
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_delay == 0 {
            return Err(config_err("max_delay must be >= 1"));
        }
        if self.ts_len < self.max_delay {
            return Err(config_err(format!("ts_len {} must be >= max_delay {}", self.ts_len, self.max_delay)));
        }
        if self.data_len < self.max_delay {
            return Err(config_err("data_len must be >= max_delay"));
        }
        if self.used_subcarriers == 0 || self.used_subcarriers > self.data_len {
            return Err(config_err("need 1 <= used_subcarriers <= data_len"));
        }
        if self.num_frames == 0 {
            return Err(config_err("num_frames must be >= 1"));
        }
        if !(self.data_power > 0.0) {
            return Err(config_err("data_power must be positive"));
        }
        if !self.subcarrier_map.is_empty() {
            if self.subcarrier_map.len() != self.used_subcarriers {
                return Err(config_err("subcarrier_map length must equal used_subcarriers"));
            }
            let mut seen = vec![false; self.data_len];
            for &n in &self.subcarrier_map {
                if n >= self.data_len || seen[n] {
                    return Err(config_err("subcarrier_map must be injective into 0..data_len"));
                }
                seen[n] = true;
            }
        }
        Ok(())
    }

    /// `Xi F_{M_s} s`: spread symbols onto the `N` subcarriers.
    pub fn spread(&self, symbols: &[C64]) -> Vec<C64> {
        let f = dft(symbols, false);
        let mut out = vec![ZERO; self.data_len];
        for (m, v) in f.into_iter().enumerate() {
            out[self.subcarrier(m)] = v;
        }
        out
    }

    /// `F_{M_s}^H Xi^H x`: inverse of [`FrameConfig::spread`].
    pub fn despread(&self, freq: &[C64]) -> Vec<C64> {
        let picked: Vec<C64> = (0..self.used_subcarriers).map(|m| freq[self.subcarrier(m)]).collect();
        dft(&picked, true)
    }
}

/// Real standard-normal training sequences, one per user.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequenceBank {
    pub sequences: Vec<Vec<f64>>,
}

impl TrainingSequenceBank {
    /// User `k` draws from its own stream, so the first `M` samples do not
    /// depend on `M` or on the other users.
    pub fn generate(num_users: usize, len: usize, seed: u64) -> Self {
        let sequences = (0..num_users)
            .map(|k| {
                let mut rng = rng_from_seed(derive_seed(seed, &[tags::TRAINING, k as u64]));
                (0..len).map(|_| standard_normal(&mut rng)).collect()
            })
            .collect();
        Self { sequences }
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TspFrame {
    pub bits: Vec<u8>,
    pub symbols: Vec<C64>,
    /// Time-domain data block of length `N`.
    pub data_time: Vec<C64>,
}

pub fn modulate(bits: &[u8], cfg: &FrameConfig) -> Result<TspFrame> {
    let bps = cfg.modulation.bits_per_symbol();
    if bits.len() != cfg.bits_per_frame() {
        return Err(input_err(format!("expected {} bits, got {}", cfg.bits_per_frame(), bits.len())));
    }
    let symbols: Vec<C64> = bits.chunks(bps).map(|b| cfg.modulation.map(b)).collect();
    let scale = (cfg.data_power * cfg.data_len as f64 / cfg.used_subcarriers as f64).sqrt();
    let data_time = dft(&cfg.spread(&symbols), true).into_iter().map(|v| v * scale).collect();
    Ok(TspFrame { bits: bits.to_vec(), symbols, data_time })
}

/// Hard-decision inverse of [`modulate`] for a noiseless data block.
pub fn demodulate(data_time: &[C64], cfg: &FrameConfig) -> Vec<u8> {
    let scale = (cfg.data_power * cfg.data_len as f64 / cfg.used_subcarriers as f64).sqrt();
    let freq = dft(data_time, false);
    let mut bits = Vec::with_capacity(cfg.bits_per_frame());
    for s in cfg.despread(&freq) {
        cfg.modulation.demap(s / scale, &mut bits);
    }
    bits
}

/// Amplitude applied to spread symbols so data samples have power `data_power`.
pub fn data_scale(cfg: &FrameConfig) -> f64 {
    (cfg.data_power * cfg.data_len as f64 / cfg.used_subcarriers as f64).sqrt()
}

pub fn random_bits<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| rng.random::<bool>() as u8).collect()
}

/// Transmit stream `[c, x_0, c, ..., x_{P_s-1}, c]` of one user.
pub fn build_stream(ts: &[f64], frames: &[TspFrame], cfg: &FrameConfig) -> Vec<C64> {
    let mut s = Vec::with_capacity(cfg.stream_len());
    for f in frames {
        s.extend(ts.iter().map(|&c| C64::new(c, 0.0)));
        s.extend_from_slice(&f.data_time);
    }
    s.extend(ts.iter().map(|&c| C64::new(c, 0.0)));
    s
}

/// Received streams, one `[T x N_r]` matrix per satellite.
#[derive(Debug, Clone, PartialEq)]
pub struct RxBurst {
    pub per_satellite: Vec<CMat>,
    pub noise_var: f64,
}

/// Noiseless superposition of every user's stream through its channel at
/// satellite `q`, truncated to the stream length.
pub fn receive_noiseless(streams: &[Vec<C64>], real: &ChannelRealization, q: usize) -> CMat {
    let h = &real.cirm[q];
    let l = real.max_delay;
    let len = streams.iter().map(|s| s.len()).max().unwrap_or(0);
    let nr = h.ncols();
    let mut y = CMat::zeros(len, nr);
    for &k in &real.active_set {
        let s = &streams[k];
        for d in 0..l {
            let row = h.row(k * l + d);
            if row.iter().all(|v| *v == ZERO) {
                continue;
            }
            for j in 0..nr {
                let g = row[j];
                let col = &mut y.column_mut(j);
                for n in d..s.len() {
                    col[n] += s[n - d] * g;
                }
            }
        }
    }
    y
}

pub fn add_noise<R: Rng + ?Sized>(y: &mut CMat, noise_var: f64, rng: &mut R) {
    if noise_var > 0.0 {
        for v in y.iter_mut() {
            *v += complex_normal(rng, noise_var);
        }
    }
}

/// Reception at every satellite with independent AWGN streams derived from `seed`.
pub fn transmit(streams: &[Vec<C64>], real: &ChannelRealization, noise_var: f64, seed: u64) -> RxBurst {
    let per_satellite = (0..real.cirm.len())
        .map(|q| {
            let mut y = receive_noiseless(streams, real, q);
            let mut rng = rng_from_seed(derive_seed(seed, &[tags::NOISE, q as u64]));
            add_noise(&mut y, noise_var, &mut rng);
            y
        })
        .collect();
    RxBurst { per_satellite, noise_var }
}

fn check_frame(y: &CMat, cfg: &FrameConfig, t: usize) -> Result<usize> {
    if t >= cfg.num_frames || y.nrows() < cfg.stream_len() {
        return Err(input_err(format!("frame {t} outside burst of {} frames", cfg.num_frames)));
    }
    Ok(t * cfg.frame_len() + cfg.max_delay - 1)
}

/// The `G` training samples of frame `t` free of data interference.
pub fn extract_nonisi(y: &CMat, cfg: &FrameConfig, t: usize) -> Result<CMat> {
    let start = check_frame(y, cfg, t)?;
    Ok(y.rows(start, cfg.nonisi_len()).into_owned())
}

/// The `(M + N)` rows of frame `t` starting at its non-ISI window:
/// `[non-ISI; head; mid; trail]`.
pub fn frame_slice(y: &CMat, cfg: &FrameConfig, t: usize) -> Result<CMat> {
    let start = check_frame(y, cfg, t)?;
    Ok(y.rows(start, cfg.frame_len()).into_owned())
}

/// Toeplitz sensing matrix `[Psi_1 ... Psi_K]` with `Psi_k[g, l] = c_k[g + L - 1 - l]`.
pub fn build_sensing_matrix(bank: &TrainingSequenceBank, cfg: &FrameConfig) -> Result<RMat> {
    let (m, l) = (cfg.ts_len, cfg.max_delay);
    if m < l {
        return Err(config_err("ts_len must be >= max_delay"));
    }
    if bank.len() < m {
        return Err(input_err("training sequences shorter than ts_len"));
    }
    let g = cfg.nonisi_len();
    let k = bank.num_users();
    Ok(RMat::from_fn(g, k * l, |row, col| {
        let (user, tap) = (col / l, col % l);
        bank.sequences[user][row + l - 1 - tap]
    }))
}
