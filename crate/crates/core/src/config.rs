//! Model configuration files.
//!
//! ```toml
//! seed = 7
//!
//! [block]
//! kind = "eelan"          # conv | elan | eelan | planned-rep-elan | csp-dark | csp-reversed
//! in_channels = 64
//! branch_channels = 32
//! depth = 2
//! transition_channels = 64
//! groups = 2
//! multiplier = 2
//! activation = "silu"     # identity | leaky-relu | silu
//! ```

use serde::{Deserialize, Serialize};

use crate::blocks::{
    build_csp_block, build_eelan, build_elan, build_planned_rep_elan, CspKind, EelanConfig, ElanConfig, PlannedVariant,
    INPUT_NAME, OUTPUT_NAME,
};
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, GraphIR};
use crate::init::WeightInit;
use crate::tensor::ActivationKind;

fn default_activation() -> ActivationKind {
    ActivationKind::Silu
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigFile {
    pub seed: u64,
    pub block: BlockConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BlockConfig {
    /// A single convolution, optionally followed by batch norm and an activation.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        groups: usize,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default)]
        activation: Option<ActivationKind>,
    },
    Elan {
        in_channels: usize,
        branch_channels: usize,
        depth: usize,
        transition_channels: usize,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
    },
    Eelan {
        in_channels: usize,
        branch_channels: usize,
        depth: usize,
        transition_channels: usize,
        groups: usize,
        multiplier: usize,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
    },
    PlannedRepElan {
        variant: PlannedVariant,
    },
    CspDark {
        channels: usize,
        #[serde(default)]
        rep: bool,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
    },
    CspReversed {
        channels: usize,
        #[serde(default)]
        rep: bool,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
    },
}

impl ModelConfigFile {
    /// Parses a configuration; syntax errors report line and column.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Builds the block with weights drawn from the configured seed.
    pub fn build(&self) -> Result<GraphIR> {
        self.block.build(&mut WeightInit::new(self.seed))
    }
}

impl BlockConfig {
    pub fn elan(&self) -> Option<ElanConfig> {
        match *self {
            BlockConfig::Elan { in_channels, branch_channels, depth, transition_channels, activation } => {
                Some(ElanConfig { in_channels, branch_channels, depth, transition_channels, activation })
            }
            _ => None,
        }
    }

    pub fn eelan(&self) -> Option<EelanConfig> {
        match *self {
            BlockConfig::Eelan {
                in_channels,
                branch_channels,
                depth,
                transition_channels,
                groups,
                multiplier,
                activation,
            } => Some(EelanConfig {
                elan: ElanConfig { in_channels, branch_channels, depth, transition_channels, activation },
                groups,
                multiplier,
            }),
            _ => None,
        }
    }

    pub fn build(&self, init: &mut WeightInit) -> Result<GraphIR> {
        match self {
            BlockConfig::Conv { in_channels, out_channels, kernel, stride, groups, batch_norm, activation } => {
                if *kernel == 0 {
                    return Err(Error::Config("kernel must be positive".into()));
                }
                let mut b = GraphBuilder::new();
                let x = b.input(INPUT_NAME, *in_channels);
                let mut h = b.conv(x, init.conv(*in_channels, *out_channels, *kernel, *stride, *groups)?, "");
                if *batch_norm {
                    h = b.batch_norm(h, init.batch_norm(*out_channels), "");
                }
                if let Some(a) = activation {
                    h = b.activation(h, *a, "");
                }
                b.output(OUTPUT_NAME, h, "");
                let g = b.finish();
                let report = g.validate();
                if !report.is_empty() {
                    return Err(Error::Invalid(report.to_string()));
                }
                Ok(g)
            }
            BlockConfig::Elan { .. } => build_elan(&self.elan().unwrap(), init),
            BlockConfig::Eelan { .. } => build_eelan(&self.eelan().unwrap(), init),
            BlockConfig::PlannedRepElan { variant } => build_planned_rep_elan(*variant, init),
            BlockConfig::CspDark { channels, rep, activation } => {
                build_csp_block(CspKind::Dark, *channels, *rep, *activation, init)
            }
            BlockConfig::CspReversed { channels, rep, activation } => {
                build_csp_block(CspKind::Reversed, *channels, *rep, *activation, init)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_config_counts() {
        let cfg = ModelConfigFile::parse(
            "seed = 1\n[block]\nkind = \"conv\"\nin_channels = 3\nout_channels = 16\nkernel = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.build().unwrap().count_params().total, 448);
    }

    #[test]
    fn builds_are_deterministic() {
        let text = "seed = 9\n[block]\nkind = \"eelan\"\nin_channels = 16\nbranch_channels = 8\ndepth = 1\ntransition_channels = 16\ngroups = 2\nmultiplier = 2\n";
        let cfg = ModelConfigFile::parse(text).unwrap();
        assert_eq!(cfg.build().unwrap(), cfg.build().unwrap());
        assert_eq!(ModelConfigFile::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_kinds() {
        let err = ModelConfigFile::parse("seed = 1\n[block]\nkind = \"elan\"\nin_channels = 3\nbranch_channels = 8\ndepth = 1\ntransition_channels = 8\nwidth = 2\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(ModelConfigFile::parse("seed = 1\n[block]\nkind = \"resnet\"\n").is_err());
        assert!(ModelConfigFile::parse("seed = 1\nextra = 2\n[block]\nkind = \"planned-rep-elan\"\nvariant = \"a\"\n")
            .is_err());
        let err = ModelConfigFile::parse("seed = \n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn domain_errors_surface_at_build() {
        let cfg = ModelConfigFile::parse("seed = 1\n[block]\nkind = \"eelan\"\nin_channels = 16\nbranch_channels = 12\ndepth = 1\ntransition_channels = 16\ngroups = 8\nmultiplier = 1\n").unwrap();
        assert!(cfg.build().is_err());
    }
}
