use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! str_enum {
    ($(#[$m:meta])* $name:ident { $($(#[$vm:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($(#[$vm])* $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn valid_values() -> String {
                [$($text),+].join(", ")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unsupported value `{other}`; expected one of: {}",
                        Self::valid_values()
                    )),
                }
            }
        }
    };
}

pub(crate) use str_enum;

str_enum!(
    /// Distance between the detached target and the prediction.
    LossType {
        Mse => "mse",
        MseNormalized => "mse_normalized",
        L1 => "l1",
        Cosine => "cosine",
    }
);

str_enum!(
    /// Where the stop-gradient sits on the target branch.
    StopgradMode {
        /// after H1 and normalization; H1 never receives gradient
        Literal => "literal",
        /// on the raw sampled block input, before H1; H1 trains
        Feature => "feature",
    }
);

str_enum!(
    NormAxes {
        /// per (batch, channel) over the sampled tokens
        Token => "token",
        /// over all tokens and channels of each batch element
        Flat => "flat",
    }
);

str_enum!(
    /// Which blocks are tapped when a block changes the token count.
    Alignment {
        SkipMismatched => "skip_mismatched",
        StrideAlign => "stride_align",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Token sampling fraction, in (0, 1].
    pub rho: f64,
    /// Weight of the SIM term in the total loss.
    pub lambda: f64,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    /// Added to the standard deviation in token normalization.
    pub epsilon: f64,
    pub loss_type: LossType,
    pub stopgrad_mode: StopgradMode,
    pub norm_axes: NormAxes,
    pub alignment: Alignment,
    /// Seed for head initialization and token sampling.
    pub sim_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rho: 0.2,
            lambda: 5e-3,
            proj_dim: 64,
            proj_hidden: 64,
            epsilon: 1e-5,
            loss_type: LossType::MseNormalized,
            stopgrad_mode: StopgradMode::Literal,
            norm_axes: NormAxes::Token,
            alignment: Alignment::SkipMismatched,
            sim_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("sim.rho", format!("{} is outside (0,1]", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "sim.lambda",
                format!("{} must be a finite value >= 0", self.lambda),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("sim.epsilon", format!("{} must be > 0", self.epsilon)));
        }
        if self.proj_dim == 0 {
            return Err(Error::config("sim.proj_dim", "must be positive"));
        }
        if self.proj_hidden == 0 {
            return Err(Error::config("sim.proj_hidden", "must be positive"));
        }
        Ok(())
    }
}
