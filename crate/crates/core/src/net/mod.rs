//! The blind-spot network: graph description, parameters, execution, checkpoints.

mod checkpoint;
mod exec;
mod params;
mod spec;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC,
};
pub use exec::{backward, forward, forward_backward, forward_trace, Trace};
pub use params::{init_params, KernelGrad, ModelParams, ParamGrads, PARAMS_VERSION};
pub use spec::{
    build_default_n2k, ArchConfig, LayerSpec, NetworkMeta, NetworkSpec, Node, Plan, Source, INPUT,
};
