use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ops::conv_out_len;

/// Convolution geometry of the input stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockConfig {
    /// `layers` composites of BN → act → 3×3 conv emitting `growth` channels,
    /// each concatenated onto everything before it.
    Dense { growth: usize, layers: usize },
    /// BN → act → 1×1 compress → BN → act → strided conv.
    Down {
        compress: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// BN → act → 1×1 compress → BN → act → nearest resize → 3×3 conv.
    Up {
        compress: usize,
        target: (usize, usize),
    },
}

impl BlockConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockConfig::Dense { .. } => "dense",
            BlockConfig::Down { .. } => "down",
            BlockConfig::Up { .. } => "up",
        }
    }
}

/// BN → act → resize to the grid → 3×3 conv to `mid_channels` → BN → act → 3×3 conv to 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mid_channels: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; turns the whole network affine in its input.
    Identity,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_months: usize,
    pub grid: (usize, usize),
    pub stem: StemConfig,
    pub blocks: Vec<BlockConfig>,
    pub head: HeadConfig,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

impl ArchConfig {
    /// The 36-month, 70×125 encoder-decoder with 144-channel stem.
    pub fn canonical() -> Self {
        ArchConfig {
            input_months: 36,
            grid: (70, 125),
            stem: StemConfig {
                kernel: 5,
                stride: 2,
                padding: 2,
                out_channels: 144,
            },
            blocks: vec![
                BlockConfig::Dense {
                    growth: 16,
                    layers: 3,
                },
                BlockConfig::Down {
                    compress: 96,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                BlockConfig::Dense {
                    growth: 16,
                    layers: 6,
                },
                BlockConfig::Up {
                    compress: 96,
                    target: (36, 64),
                },
                BlockConfig::Dense {
                    growth: 16,
                    layers: 3,
                },
            ],
            head: HeadConfig { mid_channels: 24 },
            activation: Activation::Relu,
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    /// Same block layout at desk scale: 12 months on a 24×40 grid.
    pub fn desk() -> Self {
        ArchConfig {
            input_months: 12,
            grid: (24, 40),
            stem: StemConfig {
                kernel: 5,
                stride: 2,
                padding: 2,
                out_channels: 16,
            },
            blocks: vec![
                BlockConfig::Dense {
                    growth: 4,
                    layers: 2,
                },
                BlockConfig::Down {
                    compress: 12,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                BlockConfig::Dense {
                    growth: 4,
                    layers: 2,
                },
                BlockConfig::Up {
                    compress: 12,
                    target: (12, 20),
                },
                BlockConfig::Dense {
                    growth: 4,
                    layers: 2,
                },
            ],
            head: HeadConfig { mid_channels: 8 },
            activation: Activation::Relu,
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Shape-chain the configuration, enumerating stages and parameters.
    pub fn plan(&self) -> Result<Plan> {
        let bad = |block: &str, reason: String| CoreError::InvalidArchitecture {
            block: block.to_string(),
            reason,
        };
        let (gh, gw) = self.grid;
        if self.input_months == 0 || gh == 0 || gw == 0 {
            return Err(bad("input", "months and grid extents must be >= 1".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(bad("input", "bn_eps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(bad("input", "bn_momentum must lie in [0, 1]".into()));
        }
        let mut plan = Plan::default();
        plan.stages.push(Stage {
            name: "input".into(),
            kind: "input",
            shape: [self.input_months, gh, gw],
            params: 0,
        });

        let st = self.stem;
        if st.out_channels == 0 || st.stride == 0 || st.kernel == 0 {
            return Err(bad(
                "stem",
                "kernel, stride and channels must be >= 1".into(),
            ));
        }
        let (h, w) = match (
            conv_out_len(gh, st.kernel, st.stride, st.padding),
            conv_out_len(gw, st.kernel, st.stride, st.padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(bad(
                    "stem",
                    format!("kernel {} does not fit grid {gh}×{gw}", st.kernel),
                ))
            }
        };
        let mut c = st.out_channels;
        let before = plan.params.len();
        plan.conv("stem.conv", c, self.input_months, st.kernel);
        plan.stage("stem", "stem", [c, h, w], before);
        plan.axis_rows.push(AxisOp::Conv {
            kernel: st.kernel,
            stride: st.stride,
            padding: st.padding,
            in_len: gh,
        });
        plan.axis_cols.push(AxisOp::Conv {
            kernel: st.kernel,
            stride: st.stride,
            padding: st.padding,
            in_len: gw,
        });
        let (mut h, mut w) = (h, w);

        for (i, block) in self.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            let before = plan.params.len();
            match *block {
                BlockConfig::Dense { growth, layers } => {
                    if growth == 0 || layers == 0 {
                        return Err(bad(
                            &name,
                            "dense block needs growth >= 1 and layers >= 1".into(),
                        ));
                    }
                    for l in 0..layers {
                        let p = format!("{name}.layer{l}");
                        plan.bn(&format!("{p}.bn"), c);
                        plan.conv(&format!("{p}.conv"), growth, c, 3);
                        plan.axis_rows.push(AxisOp::conv3(h));
                        plan.axis_cols.push(AxisOp::conv3(w));
                        c += growth;
                    }
                }
                BlockConfig::Down {
                    compress,
                    kernel,
                    stride,
                    padding,
                } => {
                    if compress == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(
                            &name,
                            "down block needs compress, kernel, stride >= 1".into(),
                        ));
                    }
                    let (nh, nw) = match (
                        conv_out_len(h, kernel, stride, padding),
                        conv_out_len(w, kernel, stride, padding),
                    ) {
                        (Some(a), Some(b)) => (a, b),
                        _ => {
                            return Err(bad(&name, format!("kernel {kernel} does not fit {h}×{w}")))
                        }
                    };
                    plan.bn(&format!("{name}.bn1"), c);
                    plan.conv(&format!("{name}.compress"), compress, c, 1);
                    plan.bn(&format!("{name}.bn2"), compress);
                    plan.conv(&format!("{name}.conv"), compress, compress, kernel);
                    plan.axis_rows.push(AxisOp::Conv {
                        kernel,
                        stride,
                        padding,
                        in_len: h,
                    });
                    plan.axis_cols.push(AxisOp::Conv {
                        kernel,
                        stride,
                        padding,
                        in_len: w,
                    });
                    c = compress;
                    h = nh;
                    w = nw;
                }
                BlockConfig::Up { compress, target } => {
                    if compress == 0 {
                        return Err(bad(&name, "up block needs compress >= 1".into()));
                    }
                    if target.0 < h || target.1 < w {
                        return Err(bad(
                            &name,
                            format!(
                                "up target {}×{} is smaller than its {h}×{w} input",
                                target.0, target.1
                            ),
                        ));
                    }
                    plan.bn(&format!("{name}.bn1"), c);
                    plan.conv(&format!("{name}.compress"), compress, c, 1);
                    plan.bn(&format!("{name}.bn2"), compress);
                    plan.conv(&format!("{name}.conv"), compress, compress, 3);
                    plan.axis_rows.push(AxisOp::Resize {
                        in_len: h,
                        out_len: target.0,
                    });
                    plan.axis_cols.push(AxisOp::Resize {
                        in_len: w,
                        out_len: target.1,
                    });
                    plan.axis_rows.push(AxisOp::conv3(target.0));
                    plan.axis_cols.push(AxisOp::conv3(target.1));
                    c = compress;
                    h = target.0;
                    w = target.1;
                }
            }
            plan.stage(&name, block.kind(), [c, h, w], before);
        }

        if self.head.mid_channels == 0 {
            return Err(bad("head", "mid_channels must be >= 1".into()));
        }
        if gh < h || gw < w {
            return Err(bad(
                "head",
                format!("decoder ends at {h}×{w}, larger than grid {gh}×{gw}"),
            ));
        }
        let before = plan.params.len();
        let mid = self.head.mid_channels;
        plan.bn("head.bn1", c);
        plan.conv("head.conv1", mid, c, 3);
        plan.bn("head.bn2", mid);
        plan.conv("head.conv2", 1, mid, 3);
        plan.axis_rows.push(AxisOp::Resize {
            in_len: h,
            out_len: gh,
        });
        plan.axis_cols.push(AxisOp::Resize {
            in_len: w,
            out_len: gw,
        });
        for _ in 0..2 {
            plan.axis_rows.push(AxisOp::conv3(gh));
            plan.axis_cols.push(AxisOp::conv3(gw));
        }
        plan.stage("head", "head", [c, gh, gw], before);
        plan.stages.push(Stage {
            name: "output".into(),
            kind: "output",
            shape: [1, gh, gw],
            params: 0,
        });
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Whether the optimizer updates this tensor.
    pub fn learnable(self) -> bool {
        matches!(
            self,
            ParamKind::ConvKernel | ParamKind::BnScale | ParamKind::BnShift
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One row of the layer table: a block's output shape and learnable parameter count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub name: String,
    pub kind: &'static str,
    /// `[C, H, W]`. For the head this is the resized feature map entering its convolutions.
    pub shape: [usize; 3],
    pub params: usize,
}

/// One spatial operation along a single axis, used for receptive-field bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisOp {
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
        in_len: usize,
    },
    Resize {
        in_len: usize,
        out_len: usize,
    },
}

impl AxisOp {
    fn conv3(in_len: usize) -> Self {
        AxisOp::Conv {
            kernel: 3,
            stride: 1,
            padding: 1,
            in_len,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Plan {
    pub stages: Vec<Stage>,
    pub params: Vec<ParamSpec>,
    pub(crate) axis_rows: Vec<AxisOp>,
    pub(crate) axis_cols: Vec<AxisOp>,
}

impl Plan {
    fn conv(&mut self, path: &str, c_out: usize, c_in: usize, k: usize) {
        self.params.push(ParamSpec {
            path: path.to_string(),
            shape: vec![c_out, c_in, k, k],
            kind: ParamKind::ConvKernel,
        });
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        for (suffix, kind) in [
            ("scale", ParamKind::BnScale),
            ("shift", ParamKind::BnShift),
            ("running_mean", ParamKind::BnRunningMean),
            ("running_var", ParamKind::BnRunningVar),
        ] {
            self.params.push(ParamSpec {
                path: format!("{prefix}.{suffix}"),
                shape: vec![c],
                kind,
            });
        }
    }

    fn stage(&mut self, name: &str, kind: &'static str, shape: [usize; 3], from: usize) {
        let params = self.params[from..]
            .iter()
            .filter(|p| p.kind.learnable())
            .map(ParamSpec::numel)
            .sum();
        self.stages.push(Stage {
            name: name.to_string(),
            kind,
            shape,
            params,
        });
    }

    pub fn total_params(&self) -> usize {
        self.stages.iter().map(|s| s.params).sum()
    }
}
