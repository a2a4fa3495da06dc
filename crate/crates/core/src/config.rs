//! Model and optimisation settings.

use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::cwa::{ChannelAgg, CwaParams};
use crate::coarse::CoarseParams;
use crate::error::{DapeError, Result};
use crate::nfa::{split_widths, NfaParams};
use crate::phi::{PhiParams, ResidualSource};

/// Where the fine update enters the image stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NfaMerge {
    /// Average the fine update onto the main grid after every layer.
    PoolAdd,
    /// Fine alignment runs only inside detail injections.
    #[default]
    SlotsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapeConfig {
    pub d: usize,
    pub n_layers: usize,
    /// Spatial size `[h, w]` of the input feature map.
    pub feature_hw: [usize; 2],
    /// Text positions per caption.
    pub text_len: usize,
    /// Channels of the incoming image and text features.
    pub image_channels: usize,
    pub text_channels: usize,
    pub s: usize,
    pub grid: [usize; 2],
    pub j: usize,
    pub k0: f64,
    pub k_c: f64,
    pub segments: usize,
    pub k1: usize,
    pub cwa_agg: ChannelAgg,
    pub mu: [f64; 3],
    pub kernels: [usize; 3],
    pub k_thr: f64,
    pub tau_d: f64,
    pub nfa_grid: [usize; 2],
    pub phi_period: usize,
    /// Learnable slots; `None` means `ceil(I / 4)`.
    pub slots: Option<usize>,
    pub cutoff_frac: f64,
    pub mask_mode: MaskMode,
    pub eq8_literal: bool,
    pub residual_source: ResidualSource,
    pub nfa_merge: NfaMerge,
    pub enable_cwa: bool,
    pub enable_nfa: bool,
    pub enable_phi: bool,
    pub temperature: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for DapeConfig {
    fn default() -> Self {
        DapeConfig {
            d: 48,
            n_layers: 4,
            feature_hw: [16, 16],
            text_len: 32,
            image_channels: 16,
            text_channels: 16,
            s: 2,
            grid: [8, 8],
            j: 8,
            k0: 0.5,
            k_c: 0.5,
            segments: 8,
            k1: 4,
            cwa_agg: ChannelAgg::Mean,
            mu: [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0],
            kernels: [3, 5, 7],
            k_thr: 0.6,
            tau_d: 0.25,
            nfa_grid: [4, 4],
            phi_period: 4,
            slots: None,
            cutoff_frac: 0.25,
            mask_mode: MaskMode::PostSoftmax,
            eq8_literal: false,
            residual_source: ResidualSource::M3,
            nfa_merge: NfaMerge::SlotsOnly,
            enable_cwa: true,
            enable_nfa: true,
            enable_phi: true,
            temperature: 0.07,
            seed: 0,
            learning_rate: 0.05,
            batch_size: 8,
        }
    }
}

impl DapeConfig {
    /// Image tokens on the main grid.
    pub fn i(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn n_slots(&self) -> usize {
        self.slots.unwrap_or_else(|| self.i().div_ceil(4))
    }

    /// Fine alignment feeds the main stream every layer.
    pub fn pool_add(&self) -> bool {
        self.enable_nfa && (self.nfa_merge == NfaMerge::PoolAdd || !self.enable_phi)
    }

    pub fn is_phi_layer(&self, layer: usize) -> bool {
        self.enable_phi && layer % self.phi_period == self.phi_period - 1
    }

    pub fn injections(&self) -> usize {
        if self.enable_phi {
            self.n_layers / self.phi_period
        } else {
            0
        }
    }

    pub fn coarse(&self) -> CoarseParams {
        CoarseParams { k0: self.k0, mode: self.mask_mode }
    }

    pub fn cwa(&self) -> CwaParams {
        CwaParams { segments: self.segments, k1: self.k1, k_c: self.k_c, agg: self.cwa_agg, mode: self.mask_mode }
    }

    pub fn nfa(&self) -> NfaParams {
        NfaParams {
            mu: self.mu,
            kernels: self.kernels,
            k_thr: self.k_thr,
            tau_d: self.tau_d,
            grid: (self.nfa_grid[0], self.nfa_grid[1]),
            refine: self.enable_nfa,
            eq8_literal: self.eq8_literal,
            mode: self.mask_mode,
        }
    }

    pub fn phi(&self) -> PhiParams {
        PhiParams { period: self.phi_period, residual: self.residual_source, nfa: self.nfa() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DapeError::Config(m));
        for (name, v) in [("k0", self.k0), ("k_c", self.k_c), ("k_thr", self.k_thr)] {
            if !(-1.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [-1, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau_d) {
            return bad(format!("tau_d = {} outside [0, 1]", self.tau_d));
        }
        if self.d == 0 || self.n_layers == 0 || self.image_channels == 0 || self.text_channels == 0 {
            return bad("d, n_layers and feature channels must be positive".into());
        }
        if self.segments == 0 || self.d % self.segments != 0 {
            return bad(format!("{} segments do not divide d = {}", self.segments, self.d));
        }
        if self.k1 == 0 || self.k1 > self.d / self.segments {
            return bad(format!("k1 = {} outside 1..={}", self.k1, self.d / self.segments));
        }
        if (self.mu.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad(format!("mu {:?} does not sum to 1", self.mu));
        }
        split_widths(self.mu, self.d)?;
        for &k in &self.kernels {
            crate::tensor::check_kernel_size(k)?;
        }
        if self.phi_period == 0 {
            return bad("phi_period must be at least 1".into());
        }
        let [h, w] = self.feature_hw;
        if self.s == 0 || h % self.s != 0 || w % self.s != 0 {
            return bad(format!("stride {} does not divide {h}×{w}", self.s));
        }
        let [gy, gx] = self.grid;
        if gy == 0 || gx == 0 || (h / self.s) % gy != 0 || (w / self.s) % gx != 0 {
            return bad(format!("grid {gy}×{gx} does not divide the {}×{} downsampled map", h / self.s, w / self.s));
        }
        if self.j == 0 || self.text_len / self.j < 4 {
            return bad(format!("{} text positions cannot give {} spans of at least 4", self.text_len, self.j));
        }
        let [ny, nx] = self.nfa_grid;
        if ny == 0 || nx == 0 || h % (2 * ny) != 0 || w % (2 * nx) != 0 {
            return bad(format!("fine grid {ny}×{nx} needs a map divisible by {}×{}", 2 * ny, 2 * nx));
        }
        if (2 * ny) % gy != 0 || (2 * nx) % gx != 0 {
            return bad(format!("finest fine grid {}×{} is not a refinement of grid {gy}×{gx}", 2 * ny, 2 * nx));
        }
        if !(self.cutoff_frac > 0.0 && self.cutoff_frac <= 1.0) {
            return bad(format!("cutoff_frac = {} outside (0, 1]", self.cutoff_frac));
        }
        if self.enable_phi && self.n_slots() == 0 {
            return bad("detail injection needs at least one slot".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature = {} must be positive", self.temperature));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate = {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        Ok(())
    }
}
