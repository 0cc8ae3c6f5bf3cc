//! Plain-text dumps of channel realizations and received bursts for
//! regression fixtures. Matrices are stored row-major as `[re, im]` pairs.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::linalg::{CMat, C64};
use crate::scene::ChannelRealization;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<[f64; 2]>,
}

impl MatrixDump {
    pub fn from_matrix(m: &CMat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push([m[(i, j)].re, m[(i, j)].im]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Result<CMat> {
        if self.data.len() != self.rows * self.cols {
            return Err(input_err(format!(
                "matrix dump holds {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(CMat::from_fn(self.rows, self.cols, |i, j| {
            let [re, im] = self.data[i * self.cols + j];
            C64::new(re, im)
        }))
    }
}

/// One trial's channel truth and, optionally, the received streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDump {
    pub activity: Vec<bool>,
    pub max_delay: usize,
    /// Per satellite `[K L x N_r]`.
    pub cirm: Vec<MatrixDump>,
    /// Per satellite `[T x N_r]`.
    #[serde(default)]
    pub received: Vec<MatrixDump>,
}

impl TrialDump {
    pub fn new(real: &ChannelRealization, received: &[CMat]) -> Self {
        Self {
            activity: real.activity.clone(),
            max_delay: real.max_delay,
            cirm: real.cirm.iter().map(MatrixDump::from_matrix).collect(),
            received: received.iter().map(MatrixDump::from_matrix).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("dump serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| input_err(format!("malformed dump: {e}")))
    }
}
