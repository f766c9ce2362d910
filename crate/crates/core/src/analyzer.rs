//! Receptive-field prover for blind-spot (J-invariant) networks.
//!
//! A receptive field is the set of offsets `(di, dj)` such that output pixel
//! `(i, j)` reads input pixel `(i + di, j + dj)`. Convolutions take the
//! Minkowski sum with their tap stencil; pointwise maps leave the set alone;
//! merges take the union. A network is blind at a pixel iff `(0, 0)` never
//! enters the output's set. The analysis models an unbounded canvas: with zero
//! padding, border pixels read a subset of what interior pixels read.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{N2kError, Result};
use crate::net::{forward, LayerSpec, ModelParams, NetworkSpec, Source};
use crate::tensor::Tensor;

pub type Offset = (i64, i64);

/// Finite set of input offsets an output pixel depends on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReceptiveFieldSet {
    offsets: BTreeSet<Offset>,
}

impl ReceptiveFieldSet {
    /// `{(0, 0)}`: a pixel depends on itself.
    pub fn identity() -> Self {
        [(0, 0)].into_iter().collect()
    }

    pub fn contains(&self, offset: Offset) -> bool {
        self.offsets.contains(&offset)
    }

    pub fn contains_origin(&self) -> bool {
        self.contains((0, 0))
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Offset> {
        self.offsets.iter()
    }

    pub fn is_superset(&self, other: &ReceptiveFieldSet) -> bool {
        self.offsets.is_superset(&other.offsets)
    }

    /// Largest `max(|di|, |dj|)` over the set.
    pub fn radius(&self) -> i64 {
        self.offsets
            .iter()
            .map(|&(a, b)| a.abs().max(b.abs()))
            .max()
            .unwrap_or(0)
    }

    /// Minkowski sum with a tap stencil.
    pub fn minkowski(&self, stencil: &[Offset]) -> ReceptiveFieldSet {
        self.offsets
            .iter()
            .flat_map(|&(a, b)| stencil.iter().map(move |&(u, v)| (a + u, b + v)))
            .collect()
    }

    pub fn union(&self, other: &ReceptiveFieldSet) -> ReceptiveFieldSet {
        self.offsets.union(&other.offsets).copied().collect()
    }
}

impl FromIterator<Offset> for ReceptiveFieldSet {
    fn from_iter<I: IntoIterator<Item = Offset>>(iter: I) -> Self {
        ReceptiveFieldSet {
            offsets: iter.into_iter().collect(),
        }
    }
}

/// Taps of a `K x K` kernel without its center.
pub fn donut_stencil(k: usize) -> Result<Vec<Offset>> {
    if k.is_multiple_of(2) || k < 3 {
        return Err(N2kError::config(format!(
            "donut kernel size must be odd and >= 3, got {k}"
        )));
    }
    let r = (k / 2) as i64;
    Ok((-r..=r)
        .flat_map(|a| (-r..=r).map(move |b| (a, b)))
        .filter(|&o| o != (0, 0))
        .collect())
}

/// Taps of a `3 x 3` kernel spaced `d` apart.
pub fn dilated_stencil(d: usize) -> Vec<Offset> {
    let d = d as i64;
    [-d, 0, d]
        .iter()
        .flat_map(|&a| [-d, 0, d].map(move |b| (a, b)))
        .collect()
}

fn layer_stencil(layer: &LayerSpec) -> Result<Option<Vec<Offset>>> {
    Ok(match *layer {
        LayerSpec::DonutConv { kernel, .. } => Some(donut_stencil(kernel)?),
        LayerSpec::DilatedConv { dilation, .. } => Some(dilated_stencil(dilation)),
        LayerSpec::PointwiseConv { .. } => Some(vec![(0, 0)]),
        _ => None,
    })
}

/// Receptive field of a donut layer applied directly to the image.
pub fn rf_seed_donut(k: usize) -> Result<ReceptiveFieldSet> {
    Ok(donut_stencil(k)?.into_iter().collect())
}

pub fn rf_propagate_dilated(rf: &ReceptiveFieldSet, d: usize) -> ReceptiveFieldSet {
    rf.minkowski(&dilated_stencil(d))
}

pub fn rf_propagate_pointwise(rf: &ReceptiveFieldSet) -> ReceptiveFieldSet {
    rf.clone()
}

pub fn rf_propagate_activation(rf: &ReceptiveFieldSet) -> ReceptiveFieldSet {
    rf.clone()
}

pub fn rf_merge_concat(parts: &[&ReceptiveFieldSet]) -> ReceptiveFieldSet {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn rf_merge_add(parts: &[&ReceptiveFieldSet]) -> ReceptiveFieldSet {
    rf_merge_concat(parts)
}

/// Partition of pixel coordinates into cells that must be jointly blind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PixelPartition {
    #[default]
    Singletons,
    /// Axis-aligned `height x width` tiles anchored at the origin.
    Blocks { height: usize, width: usize },
}

impl PixelPartition {
    pub fn cell_of(&self, i: usize, j: usize) -> (usize, usize) {
        match *self {
            PixelPartition::Singletons => (i, j),
            PixelPartition::Blocks { height, width } => (i / height, j / width),
        }
    }

    /// First offset in `rf` that links a pixel to a member of its own cell.
    pub fn violation(&self, rf: &ReceptiveFieldSet) -> Option<Offset> {
        match *self {
            PixelPartition::Singletons => rf.contains_origin().then_some((0, 0)),
            PixelPartition::Blocks { height, width } => {
                let (h, w) = (height as i64, width as i64);
                rf.iter()
                    .copied()
                    .find(|&(a, b)| a.abs() < h && b.abs() < w)
            }
        }
    }
}

/// One hop of a dependency chain from the input image to the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WitnessStep {
    /// Index of the node in the spec's `nodes` list.
    pub layer: usize,
    pub name: String,
    pub kind: &'static str,
    /// Tap taken by this layer.
    pub tap: Offset,
    /// Accumulated offset after this layer.
    pub offset: Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerField {
    pub name: String,
    pub kind: &'static str,
    pub size: usize,
    pub radius: i64,
}

/// Outcome of the static analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependencyReport {
    pub invariant: bool,
    /// Present iff `invariant` is false.
    pub witness: Option<Vec<WitnessStep>>,
    pub layers: Vec<LayerField>,
    pub partition: PixelPartition,
    /// Whether every dilation satisfies `d >= ceil(K / 2)`.
    pub dilation_rule: bool,
    pub invariant_by_construction: bool,
}

impl DependencyReport {
    /// A spec flagged invariant-by-construction must pass both checks.
    pub fn flag_violated(&self) -> bool {
        self.invariant_by_construction && !(self.invariant && self.dilation_rule)
    }
}

impl fmt::Display for DependencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invariant: {}", self.invariant)?;
        writeln!(f, "partition: {:?}", self.partition)?;
        writeln!(f, "dilation_rule: {}", self.dilation_rule)?;
        writeln!(
            f,
            "invariant_by_construction: {}",
            self.invariant_by_construction
        )?;
        writeln!(f, "layers:")?;
        for l in &self.layers {
            writeln!(
                f,
                "  {:<16} {:<15} rf_size={:<6} radius={}",
                l.name, l.kind, l.size, l.radius
            )?;
        }
        match &self.witness {
            None => writeln!(f, "witness: none")?,
            Some(steps) => {
                writeln!(f, "witness:")?;
                for s in steps {
                    writeln!(
                        f,
                        "  [{}] {:<16} tap=({}, {}) offset=({}, {})",
                        s.layer, s.name, s.tap.0, s.tap.1, s.offset.0, s.offset.1
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Where an offset entered a node's receptive field.
#[derive(Debug, Clone, Copy)]
struct Origin {
    from: Source,
    prev: Offset,
}

type TracedField = BTreeMap<Offset, Option<Origin>>;

fn field_of(traced: &TracedField) -> ReceptiveFieldSet {
    traced.keys().copied().collect()
}

/// Propagates receptive fields through every node of a spec.
pub fn receptive_fields(spec: &NetworkSpec) -> Result<Vec<ReceptiveFieldSet>> {
    let (_, fields) = trace_fields(spec)?;
    Ok(fields.iter().map(field_of).collect())
}

fn trace_fields(spec: &NetworkSpec) -> Result<(crate::net::Plan, Vec<TracedField>)> {
    let plan = spec.graph()?;
    let input: TracedField = [((0, 0), None)].into_iter().collect();
    let mut fields: Vec<TracedField> = vec![TracedField::new(); spec.nodes.len()];
    for &i in &plan.order {
        let node = &spec.nodes[i];
        let mut out = TracedField::new();
        let stencil = layer_stencil(&node.layer)?;
        for &src in &plan.sources[i] {
            let upstream = match src {
                Source::Input => &input,
                Source::Node(j) => &fields[j],
            };
            let taps = stencil.as_deref().unwrap_or(&[(0, 0)]);
            for &prev in upstream.keys() {
                for &(u, v) in taps {
                    out.entry((prev.0 + u, prev.1 + v))
                        .or_insert(Some(Origin { from: src, prev }));
                }
            }
        }
        fields[i] = out;
    }
    Ok((plan, fields))
}

/// Decides per-pixel invariance of a spec by exact receptive-field propagation.
pub fn check_invariance_static(spec: &NetworkSpec) -> Result<DependencyReport> {
    check_invariance_partition(spec, PixelPartition::Singletons)
}

pub fn check_invariance_partition(
    spec: &NetworkSpec,
    partition: PixelPartition,
) -> Result<DependencyReport> {
    let (plan, fields) = trace_fields(spec)?;
    let out_rf = field_of(&fields[plan.output]);
    let violation = partition.violation(&out_rf);
    let witness = violation.map(|target| {
        let mut steps = Vec::new();
        let mut node = plan.output;
        let mut offset = target;
        loop {
            let origin = fields[node][&offset].expect("non-input nodes record origins");
            let n = &spec.nodes[node];
            steps.push(WitnessStep {
                layer: node,
                name: n.name.clone(),
                kind: n.layer.kind_name(),
                tap: (offset.0 - origin.prev.0, offset.1 - origin.prev.1),
                offset,
            });
            match origin.from {
                Source::Input => break,
                Source::Node(j) => {
                    node = j;
                    offset = origin.prev;
                }
            }
        }
        steps.reverse();
        steps
    });
    let layers = plan
        .order
        .iter()
        .map(|&i| {
            let rf = field_of(&fields[i]);
            LayerField {
                name: spec.nodes[i].name.clone(),
                kind: spec.nodes[i].layer.kind_name(),
                size: rf.len(),
                radius: rf.radius(),
            }
        })
        .collect();
    Ok(DependencyReport {
        invariant: violation.is_none(),
        witness,
        layers,
        partition,
        dilation_rule: spec.check_dilation_rule().is_ok(),
        invariant_by_construction: spec.meta.invariant_by_construction,
    })
}

/// Replaces `x[.., i, j]` with random finite values and checks that the output
/// at `(i, j)` stays bit-identical across `trials` replacements.
pub fn check_invariance_empirical(
    params: &ModelParams,
    x: &Tensor,
    pixel: (usize, usize),
    trials: usize,
    seed: u64,
) -> Result<bool> {
    let s = x.shape();
    let (i, j) = pixel;
    if i >= s.height || j >= s.width {
        return Err(N2kError::config(format!(
            "pixel ({i}, {j}) outside {}x{} image",
            s.height, s.width
        )));
    }
    let reference = forward(params, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = x.clone();
    for _ in 0..trials {
        for b in 0..s.batch {
            let magnitude = 10f64.powi(rng.random_range(-3..=3));
            probe.set(b, 0, i, j, rng.random_range(-1.0..1.0) * magnitude);
        }
        let out = forward(params, &probe)?;
        let same = (0..s.batch)
            .all(|b| out.get(b, 0, i, j).to_bits() == reference.get(b, 0, i, j).to_bits());
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One cell of the kernel-size / dilation / depth sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub kernel: usize,
    pub dilation: usize,
    pub depth: usize,
    /// `d >= ceil(K / 2)`.
    pub predicate: bool,
    /// Enumeration found `(0, 0)` absent after `depth` dilated layers.
    pub enumerated_invariant: bool,
}

impl SweepRow {
    /// The predicate is sufficient; only `predicate && !enumerated` is a contradiction.
    pub fn contradicts_sufficiency(&self) -> bool {
        self.predicate && !self.enumerated_invariant
    }
}

/// Donut layer of size `K` followed by `n` layers of dilation `d`, for every
/// combination in the given ranges.
pub fn verify_prop2_sweep(
    kernels: impl IntoIterator<Item = usize>,
    dilations: impl IntoIterator<Item = usize> + Clone,
    depths: impl IntoIterator<Item = usize> + Clone,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for k in kernels {
        let seed = rf_seed_donut(k)?;
        for d in dilations.clone() {
            let wanted: BTreeSet<usize> = depths.clone().into_iter().collect();
            let max_depth = wanted.iter().copied().max().unwrap_or(0);
            let mut rf = seed.clone();
            for n in 1..=max_depth {
                rf = rf_propagate_dilated(&rf, d);
                if wanted.contains(&n) {
                    rows.push(SweepRow {
                        kernel: k,
                        dilation: d,
                        depth: n,
                        predicate: d >= k.div_ceil(2),
                        enumerated_invariant: !rf.contains_origin(),
                    });
                }
            }
        }
    }
    Ok(rows)
}
