//! Declarative layer graphs and the two-path blind-spot architecture.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::activation::{Activation, DEFAULT_LEAKY_SLOPE};
use crate::error::{N2kError, Result};

/// Reserved node name for the single-channel image input.
pub const INPUT: &str = "input";

/// One layer of a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `K x K` convolution whose center tap is structurally zero.
    DonutConv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// `3 x 3` convolution with taps spaced `dilation` pixels apart.
    DilatedConv {
        dilation: usize,
        in_channels: usize,
        out_channels: usize,
    },
    PointwiseConv {
        in_channels: usize,
        out_channels: usize,
    },
    /// Leaky rectifier; `slope = 1` is the identity.
    Activation {
        slope: f64,
    },
    Concat,
    SkipAdd,
}

impl LayerSpec {
    /// `(kernel size, dilation, donut)` for convolution layers.
    pub fn conv_geometry(&self) -> Option<(usize, usize, bool)> {
        match *self {
            LayerSpec::DonutConv { kernel, .. } => Some((kernel, 1, true)),
            LayerSpec::DilatedConv { dilation, .. } => Some((3, dilation, false)),
            LayerSpec::PointwiseConv { .. } => Some((1, 1, false)),
            _ => None,
        }
    }

    pub fn conv_channels(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::DonutConv {
                in_channels,
                out_channels,
                ..
            }
            | LayerSpec::DilatedConv {
                in_channels,
                out_channels,
                ..
            }
            | LayerSpec::PointwiseConv {
                in_channels,
                out_channels,
            } => Some((in_channels, out_channels)),
            _ => None,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match *self {
            LayerSpec::Activation { slope } => Some(Activation::LeakyRelu { slope }),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::DonutConv { .. } => "donut-conv",
            LayerSpec::DilatedConv { .. } => "dilated-conv",
            LayerSpec::PointwiseConv { .. } => "pointwise-conv",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::Concat => "concat",
            LayerSpec::SkipAdd => "skip-add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub name: String,
    pub inputs: Vec<String>,
    pub layer: LayerSpec,
}

/// Architecture summary carried alongside the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkMeta {
    pub donut_kernel: usize,
    pub path_dilations: Vec<usize>,
    pub path_depth: usize,
    pub channel_width: usize,
    /// When set, every dilated layer must satisfy `d >= ceil(K / 2)`.
    pub invariant_by_construction: bool,
}

/// Directed acyclic graph of layers with one image input and one image output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub meta: NetworkMeta,
    pub output: String,
    pub nodes: Vec<Node>,
}

/// Parameters of the two-path architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub donut_kernel: usize,
    pub path_dilations: Vec<usize>,
    pub path_depth: usize,
    pub channel_width: usize,
    pub invariant_by_construction: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            donut_kernel: 3,
            path_dilations: vec![2, 3],
            path_depth: 4,
            channel_width: 32,
            invariant_by_construction: true,
        }
    }
}

/// Where a node reads its operands from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

/// A validated graph in execution order.
#[derive(Debug, Clone)]
pub struct Plan {
    /// Node indices in topological order.
    pub order: Vec<usize>,
    pub sources: Vec<Vec<Source>>,
    pub channels: Vec<usize>,
    /// Parameter slot of each convolution node.
    pub param_slot: Vec<Option<usize>>,
    pub output: usize,
}

impl Plan {
    pub fn conv_count(&self) -> usize {
        self.param_slot.iter().flatten().count()
    }
}

/// The canonical architecture with `K = 3` donut and 2-/3-dilated paths.
pub fn build_default_n2k(channel_width: usize, path_depth: usize) -> Result<NetworkSpec> {
    NetworkSpec::two_path(&ArchConfig {
        channel_width,
        path_depth,
        ..ArchConfig::default()
    })
}

fn ceil_half(k: usize) -> usize {
    k.div_ceil(2)
}

impl NetworkSpec {
    /// Donut layer, one dilated path per entry of `path_dilations`, channel
    /// concatenation, projected skip of the donut features, two pointwise layers.
    pub fn two_path(arch: &ArchConfig) -> Result<NetworkSpec> {
        let w = arch.channel_width;
        if w == 0 || arch.path_depth == 0 {
            return Err(N2kError::config(
                "channel_width and path_depth must be at least 1",
            ));
        }
        if arch.path_dilations.is_empty() {
            return Err(N2kError::config("at least one dilated path is required"));
        }
        let slope = DEFAULT_LEAKY_SLOPE;
        let mut nodes = Vec::new();
        let mut push = |name: String, inputs: Vec<String>, layer: LayerSpec| {
            nodes.push(Node {
                name: name.clone(),
                inputs,
                layer,
            });
            name
        };
        let donut = push(
            "donut".into(),
            vec![INPUT.into()],
            LayerSpec::DonutConv {
                kernel: arch.donut_kernel,
                in_channels: 1,
                out_channels: w,
            },
        );
        let donut_act = push(
            "donut_act".into(),
            vec![donut],
            LayerSpec::Activation { slope },
        );
        let mut path_outputs = Vec::new();
        for (p, &d) in arch.path_dilations.iter().enumerate() {
            let mut prev = donut_act.clone();
            for layer in 0..arch.path_depth {
                let conv = push(
                    format!("path{p}_conv{layer}"),
                    vec![prev],
                    LayerSpec::DilatedConv {
                        dilation: d,
                        in_channels: w,
                        out_channels: w,
                    },
                );
                prev = push(
                    format!("path{p}_act{layer}"),
                    vec![conv],
                    LayerSpec::Activation { slope },
                );
            }
            path_outputs.push(prev);
        }
        let merged_ch = w * path_outputs.len();
        let merged = if path_outputs.len() > 1 {
            push("concat".into(), path_outputs, LayerSpec::Concat)
        } else {
            path_outputs.pop().unwrap_or_default()
        };
        let skip = push(
            "skip_proj".into(),
            vec![donut_act],
            LayerSpec::PointwiseConv {
                in_channels: w,
                out_channels: merged_ch,
            },
        );
        let fused = push("skip_add".into(), vec![merged, skip], LayerSpec::SkipAdd);
        let head0 = push(
            "head0".into(),
            vec![fused],
            LayerSpec::PointwiseConv {
                in_channels: merged_ch,
                out_channels: w,
            },
        );
        let head_act = push(
            "head_act".into(),
            vec![head0],
            LayerSpec::Activation { slope },
        );
        let out = push(
            "head1".into(),
            vec![head_act],
            LayerSpec::PointwiseConv {
                in_channels: w,
                out_channels: 1,
            },
        );
        let spec = NetworkSpec {
            meta: NetworkMeta {
                donut_kernel: arch.donut_kernel,
                path_dilations: arch.path_dilations.clone(),
                path_depth: arch.path_depth,
                channel_width: w,
                invariant_by_construction: arch.invariant_by_construction,
            },
            output: out,
            nodes,
        };
        spec.plan()?;
        Ok(spec)
    }

    /// Replaces the dilation of every layer in path `path`.
    pub fn with_path_dilation(&self, path: usize, dilation: usize) -> Result<NetworkSpec> {
        let mut spec = self.clone();
        let prefix = format!("path{path}_");
        for node in &mut spec.nodes {
            if let LayerSpec::DilatedConv { dilation: d, .. } = &mut node.layer {
                if node.name.starts_with(&prefix) {
                    *d = dilation;
                }
            }
        }
        if let Some(d) = spec.meta.path_dilations.get_mut(path) {
            *d = dilation;
        }
        spec.plan()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| N2kError::config(format!("serializing network: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<NetworkSpec> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| N2kError::config(format!("network spec: {e}")))?;
        Ok(spec)
    }

    /// Largest donut kernel in the graph, if any.
    pub fn max_donut_kernel(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n.layer {
                LayerSpec::DonutConv { kernel, .. } => Some(kernel),
                _ => None,
            })
            .max()
    }

    /// Validates the graph, including the dilation rule when the spec is
    /// flagged invariant-by-construction, and resolves execution order.
    pub fn plan(&self) -> Result<Plan> {
        let plan = self.graph()?;
        if self.meta.invariant_by_construction {
            self.check_dilation_rule()?;
        }
        Ok(plan)
    }

    /// Structural validation only: names, arity, channels, acyclicity.
    pub fn graph(&self) -> Result<Plan> {
        let n = self.nodes.len();
        let mut index = HashMap::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.name == INPUT {
                return Err(N2kError::config(format!("node name `{INPUT}` is reserved")));
            }
            if index.insert(node.name.as_str(), i).is_some() {
                return Err(N2kError::config(format!("duplicate node `{}`", node.name)));
            }
        }
        let mut sources = Vec::with_capacity(n);
        for node in &self.nodes {
            let arity_ok = match node.layer {
                LayerSpec::Concat | LayerSpec::SkipAdd => node.inputs.len() >= 2,
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(N2kError::config(format!(
                    "node `{}` ({}) has {} inputs",
                    node.name,
                    node.layer.kind_name(),
                    node.inputs.len()
                )));
            }
            let src = node
                .inputs
                .iter()
                .map(|name| {
                    if name == INPUT {
                        Ok(Source::Input)
                    } else {
                        index
                            .get(name.as_str())
                            .map(|&i| Source::Node(i))
                            .ok_or_else(|| {
                                N2kError::config(format!(
                                    "node `{}` reads unknown node `{name}`",
                                    node.name
                                ))
                            })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            sources.push(src);
        }
        let output = *index
            .get(self.output.as_str())
            .ok_or_else(|| N2kError::config(format!("output node `{}` not found", self.output)))?;

        // Kahn's algorithm, ties broken by declaration order.
        let mut indegree = vec![0usize; n];
        let mut consumers = vec![Vec::new(); n];
        for (i, src) in sources.iter().enumerate() {
            for s in src {
                if let Source::Node(j) = *s {
                    indegree[i] += 1;
                    consumers[j].push(i);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck: Vec<&str> = (0..n)
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].name.as_str())
                .collect();
            return Err(N2kError::config(format!(
                "network graph has a cycle through {}",
                stuck.join(", ")
            )));
        }

        let mut channels = vec![0usize; n];
        let mut param_slot = vec![None; n];
        let mut slot = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.layer.conv_geometry().is_some() {
                param_slot[i] = Some(slot);
                slot += 1;
            }
        }
        for &i in &order {
            let node = &self.nodes[i];
            let in_ch: Vec<usize> = sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input => 1,
                    Source::Node(j) => channels[j],
                })
                .collect();
            channels[i] = match node.layer {
                LayerSpec::DonutConv { kernel, .. } if kernel % 2 == 0 || kernel < 3 => {
                    return Err(N2kError::config(format!(
                        "donut layer `{}` needs an odd kernel >= 3, got {kernel}",
                        node.name
                    )));
                }
                LayerSpec::DilatedConv { dilation: 0, .. } => {
                    return Err(N2kError::config(format!(
                        "dilated layer `{}` has zero dilation",
                        node.name
                    )));
                }
                LayerSpec::DonutConv { .. }
                | LayerSpec::DilatedConv { .. }
                | LayerSpec::PointwiseConv { .. } => {
                    let (cin, cout) = node.layer.conv_channels().unwrap_or_default();
                    if cin != in_ch[0] || cout == 0 {
                        return Err(N2kError::config(format!(
                            "layer `{}` expects {cin} input channels but receives {}",
                            node.name, in_ch[0]
                        )));
                    }
                    cout
                }
                LayerSpec::Activation { slope } => {
                    if !slope.is_finite() {
                        return Err(N2kError::config(format!(
                            "activation `{}` has non-finite slope",
                            node.name
                        )));
                    }
                    in_ch[0]
                }
                LayerSpec::Concat => in_ch.iter().sum(),
                LayerSpec::SkipAdd => {
                    if in_ch.iter().any(|&c| c != in_ch[0]) {
                        return Err(N2kError::config(format!(
                            "skip-add `{}` mixes channel counts {in_ch:?}",
                            node.name
                        )));
                    }
                    in_ch[0]
                }
            };
        }
        if channels[output] != 1 {
            return Err(N2kError::config(format!(
                "output node `{}` has {} channels; a single-channel image is required",
                self.output, channels[output]
            )));
        }
        Ok(Plan {
            order,
            sources,
            channels,
            param_slot,
            output,
        })
    }

    /// Checks `d >= ceil(K / 2)` for every dilated layer against the largest donut kernel.
    pub fn check_dilation_rule(&self) -> Result<()> {
        let Some(k) = self.max_donut_kernel() else {
            return Err(N2kError::config(
                "invariant-by-construction network has no donut layer",
            ));
        };
        let needed = ceil_half(k);
        for node in &self.nodes {
            if let LayerSpec::DilatedConv { dilation, .. } = node.layer {
                if dilation < needed {
                    return Err(N2kError::config(format!(
                        "layer `{}` has dilation {dilation} < ceil({k}/2) = {needed}; \
                         the invariant-by-construction flag forbids this",
                        node.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Count of nodes per layer kind, for reports.
    pub fn kind_histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut h = BTreeMap::new();
        for node in &self.nodes {
            *h.entry(node.layer.kind_name()).or_insert(0) += 1;
        }
        h
    }
}
