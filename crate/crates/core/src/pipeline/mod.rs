//! Three-stage training: teacher on labeled data, frozen pseudo-labels on
//! unlabeled data, student on the union.

pub mod data;
pub mod eval;
pub mod optim;
pub mod run;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crc::CrcParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

pub use data::{build_dataset, DataConfig, Dataset, Sample};
pub use eval::{evaluate, predict, MaskSource};
pub use run::{run_from_teacher, run_pipeline, RunOutcome, RunRecord};
pub use train::{train_student, train_teacher, StepLoss, TrainedModel};

/// Which student mask heads are trained (the contrastive head is optional).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadFlags {
    pub nmh: bool,
    pub lrd: bool,
    pub crc: bool,
}

impl HeadFlags {
    pub const ALL: HeadFlags = HeadFlags {
        nmh: true,
        lrd: true,
        crc: true,
    };
    pub const NMH: HeadFlags = HeadFlags {
        nmh: true,
        lrd: false,
        crc: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.nmh || self.lrd) {
            return Err(Error::InvalidArgument(
                "at least one mask head (nmh or lrd) must be enabled".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for HeadFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.nmh, "NMH"), (self.lrd, "LRD"), (self.crc, "CRC")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for HeadFlags {
    type Err = Error;

    /// Parses `nmh+lrd+crc`-style lists (case-insensitive, `+` or `,` separated).
    fn from_str(s: &str) -> Result<Self> {
        let mut h = HeadFlags {
            nmh: false,
            lrd: false,
            crc: false,
        };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "nmh" => h.nmh = true,
                "lrd" => h.lrd = true,
                "crc" => h.crc = true,
                other => return Err(Error::InvalidArgument(format!("unknown head {other:?}"))),
            }
        }
        h.validate()?;
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    Scratch,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub alpha: f64,
    /// Band half-width in 14x14 RoI cells.
    pub d: f64,
    pub t_box: f64,
    pub t_pix: f64,
    pub heads: HeadFlags,
    pub seed: u64,
    pub student_init: StudentInit,
    /// Ground-truth/pseudo instances sampled as RoIs per image and step.
    pub rois_per_image: usize,
    /// Box jitter as a fraction of box width/height.
    pub box_jitter: f64,
    pub lrd_band: f64,
    pub lrd_w_boundary: f64,
    pub lrd_w_interior: f64,
    pub flip_augment: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.001,
            epochs_teacher: 12,
            epochs_student: 12,
            batch_size: 2,
            loss_weights: LossWeights::default(),
            alpha: 0.7,
            d: 4.0,
            t_box: 0.7,
            t_pix: 0.5,
            heads: HeadFlags::ALL,
            seed: 0,
            student_init: StudentInit::Scratch,
            rois_per_image: 8,
            box_jitter: 0.1,
            lrd_band: 1.0,
            lrd_w_boundary: 0.2,
            lrd_w_interior: 1.0,
            flip_augment: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.heads.validate()?;
        self.loss_weights.validate()?;
        self.crc_params().validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        if self.batch_size == 0 || self.rois_per_image == 0 {
            return bad("batch size and rois per image must be positive");
        }
        if !(0.0..=1.0).contains(&self.t_box) || !(0.0..=1.0).contains(&self.t_pix) {
            return bad("thresholds must lie in [0, 1]");
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return bad("box jitter must lie in [0, 0.5)");
        }
        if !(self.lrd_band >= 0.0 && 0.0 <= self.lrd_w_boundary && self.lrd_w_boundary <= self.lrd_w_interior) {
            return bad("boundary weights need band >= 0 and 0 <= w_boundary <= w_interior");
        }
        Ok(())
    }

    pub fn crc_params(&self) -> CrcParams {
        CrcParams {
            d: self.d,
            alpha: self.alpha,
            tau: self.loss_weights.tau,
        }
    }
}

/// Independent sub-seed `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_flags_parse_and_print() {
        let h: HeadFlags = "nmh+LRD".parse().unwrap();
        assert_eq!(h.to_string(), "NMH+LRD");
        assert_eq!(HeadFlags::ALL.to_string(), "NMH+LRD+CRC");
        assert!("crc".parse::<HeadFlags>().is_err());
        assert!("nmh+foo".parse::<HeadFlags>().is_err());
    }

    #[test]
    fn defaults_carry_the_optimizer_triple() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.02, 0.9, 0.001));
        c.validate().unwrap();
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 5), derive_seed(1, 5));
    }
}
