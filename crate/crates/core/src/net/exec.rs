//! Forward and reverse passes over a planned [`NetworkSpec`](super::NetworkSpec).

use super::params::{KernelGrad, ModelParams, ParamGrads};
use super::spec::{LayerSpec, Plan, Source};
use crate::activation::{activation_backward, activation_forward};
use crate::conv::{conv2d_backward_input, conv2d_backward_params, conv2d_forward};
use crate::error::{N2kError, Result};
use crate::tensor::{Shape, Tensor};

/// Node activations retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace {
    plan: Plan,
    input: Tensor,
    values: Vec<Option<Tensor>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.values[self.plan.output]
            .as_ref()
            .expect("output computed during forward")
    }

    /// Values of every evaluated node in plan order.
    pub fn node_values(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().flatten()
    }

    pub fn into_output(mut self) -> Tensor {
        self.values[self.plan.output]
            .take()
            .expect("output computed during forward")
    }
}

fn check_image(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.channels != 1 || s.height == 0 || s.width == 0 || s.batch == 0 {
        return Err(N2kError::Shape {
            op: "forward",
            left: format!("input {s}"),
            right: "Nx1xHxW image batch".into(),
        });
    }
    Ok(())
}

/// Network output for a batch of single-channel images.
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    Ok(forward_trace(params, x)?.into_output())
}

pub fn forward_trace(params: &ModelParams, x: &Tensor) -> Result<Trace> {
    check_image(x)?;
    let plan = params.plan()?;
    if plan.conv_count() != params.kernels.len() {
        return Err(N2kError::config(format!(
            "network has {} convolution layers but {} kernels were supplied",
            plan.conv_count(),
            params.kernels.len()
        )));
    }
    let mut values: Vec<Option<Tensor>> = vec![None; params.spec.nodes.len()];
    for &i in &plan.order {
        let node = &params.spec.nodes[i];
        let read = |s: &Source| -> &Tensor {
            match *s {
                Source::Input => x,
                Source::Node(j) => values[j].as_ref().expect("topological order"),
            }
        };
        let srcs = &plan.sources[i];
        let out = match node.layer {
            LayerSpec::DonutConv { .. }
            | LayerSpec::DilatedConv { .. }
            | LayerSpec::PointwiseConv { .. } => {
                let slot = plan.param_slot[i].expect("conv node has a slot");
                conv2d_forward(read(&srcs[0]), &params.kernels[slot])?
            }
            LayerSpec::Activation { .. } => {
                let act = node.layer.activation().expect("activation layer");
                activation_forward(read(&srcs[0]), act)
            }
            LayerSpec::Concat => {
                let parts: Vec<&Tensor> = srcs.iter().map(read).collect();
                concat_channels(&parts)
            }
            LayerSpec::SkipAdd => {
                let mut acc = read(&srcs[0]).clone();
                for s in &srcs[1..] {
                    acc.add_assign(read(s))?;
                }
                acc
            }
        };
        values[i] = Some(out);
    }
    Ok(Trace {
        plan,
        input: x.clone(),
        values,
    })
}

fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let s0 = parts[0].shape();
    let total: usize = parts.iter().map(|t| t.shape().channels).sum();
    let mut out = Tensor::zeros(Shape::new(s0.batch, total, s0.height, s0.width));
    for b in 0..s0.batch {
        let mut c_out = 0;
        for t in parts {
            for c in 0..t.shape().channels {
                out.plane_mut(b, c_out).copy_from_slice(t.plane(b, c));
                c_out += 1;
            }
        }
    }
    out
}

fn split_channels(grad: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let s = grad.shape();
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let mut part = Tensor::zeros(Shape::new(s.batch, w, s.height, s.width));
            for b in 0..s.batch {
                for c in 0..w {
                    part.plane_mut(b, c)
                        .copy_from_slice(grad.plane(b, start + c));
                }
            }
            start += w;
            part
        })
        .collect()
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Parameter gradients of `<loss_grad, forward(x)>` from a recorded trace.
pub fn backward(params: &ModelParams, trace: &Trace, loss_grad: &Tensor) -> Result<ParamGrads> {
    let plan = &trace.plan;
    let out_shape = trace.output().shape();
    if loss_grad.shape() != out_shape {
        return Err(N2kError::Shape {
            op: "forward_backward",
            left: format!("loss_grad {}", loss_grad.shape()),
            right: format!("output {out_shape}"),
        });
    }
    let mut grads = ParamGrads::zeros_like(params);
    let mut node_grad: Vec<Option<Tensor>> = vec![None; params.spec.nodes.len()];
    node_grad[plan.output] = Some(loss_grad.clone());

    for &i in plan.order.iter().rev() {
        let Some(g) = node_grad[i].take() else {
            continue;
        };
        let node = &params.spec.nodes[i];
        let srcs = &plan.sources[i];
        let value_of = |s: &Source| -> &Tensor {
            match *s {
                Source::Input => &trace.input,
                Source::Node(j) => trace.values[j].as_ref().expect("forward value"),
            }
        };
        match node.layer {
            LayerSpec::DonutConv { .. }
            | LayerSpec::DilatedConv { .. }
            | LayerSpec::PointwiseConv { .. } => {
                let slot = plan.param_slot[i].expect("conv node has a slot");
                let kernel = &params.kernels[slot];
                let input = value_of(&srcs[0]);
                let (gw, gb) = conv2d_backward_params(input, kernel, &g)?;
                grads.kernels[slot] = KernelGrad {
                    weights: gw,
                    bias: gb,
                };
                if let Source::Node(j) = srcs[0] {
                    let gi = conv2d_backward_input(kernel, &g, input.shape())?;
                    accumulate(&mut node_grad[j], gi)?;
                }
            }
            LayerSpec::Activation { .. } => {
                if let Source::Node(j) = srcs[0] {
                    let act = node.layer.activation().expect("activation layer");
                    let gi = activation_backward(value_of(&srcs[0]), &g, act)?;
                    accumulate(&mut node_grad[j], gi)?;
                }
            }
            LayerSpec::Concat => {
                let widths: Vec<usize> =
                    srcs.iter().map(|s| value_of(s).shape().channels).collect();
                for (s, part) in srcs.iter().zip(split_channels(&g, &widths)) {
                    if let Source::Node(j) = *s {
                        accumulate(&mut node_grad[j], part)?;
                    }
                }
            }
            LayerSpec::SkipAdd => {
                for s in srcs {
                    if let Source::Node(j) = *s {
                        accumulate(&mut node_grad[j], g.clone())?;
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Exact adjoint of [`forward`] with respect to every parameter.
pub fn forward_backward(
    params: &ModelParams,
    x: &Tensor,
    loss_grad: &Tensor,
) -> Result<ParamGrads> {
    let trace = forward_trace(params, x)?;
    backward(params, &trace, loss_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::init_params;
    use crate::net::spec::build_default_n2k;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::image(
            h,
            w,
            (0..h * w)
                .map(|v| ((v * 37 % 101) as f64) / 101.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_net_preserves_shape() {
        let params = init_params(&build_default_n2k(1, 1).unwrap(), 0).unwrap();
        let y = forward(&params, &ramp(16, 16)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 16, 16));
        assert!(y.is_finite());
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let mut params = init_params(&build_default_n2k(3, 2).unwrap(), 0)
            .unwrap()
            .zeroed();
        let last = params.kernels.len() - 1;
        params.kernels[last].bias_mut()[0] = 0.25;
        let a = forward(&params, &ramp(12, 12)).unwrap();
        let b = forward(&params, &Tensor::zeros(Shape::new(1, 1, 12, 12))).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn rejects_multichannel_input() {
        let params = init_params(&build_default_n2k(1, 1).unwrap(), 0).unwrap();
        assert!(forward(&params, &Tensor::zeros(Shape::new(1, 2, 8, 8))).is_err());
    }

    #[test]
    fn zero_loss_grad_gives_zero_param_grads() {
        let params = init_params(&build_default_n2k(2, 1).unwrap(), 1).unwrap();
        let x = ramp(8, 8);
        let g = forward_backward(&params, &x, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(forward_backward(&params, &x, &Tensor::zeros(Shape::new(1, 1, 8, 7))).is_err());
    }

    #[test]
    fn donut_center_gradient_is_exactly_zero() {
        let params = init_params(&build_default_n2k(2, 1).unwrap(), 1).unwrap();
        let x = ramp(8, 8);
        let g = forward_backward(&params, &x, &Tensor::full(x.shape(), 1.0)).unwrap();
        let donut = &g.kernels[0].weights;
        for o in 0..2 {
            assert_eq!(donut.get(o, 0, 1, 1).to_bits(), 0f64.to_bits());
        }
    }
}
