//! Computation-graph intermediate representation.

pub mod graph;
pub mod io;
pub mod model;
pub mod tensor;
pub mod validate;

pub use graph::{
    immediate_dominator, subgraph_between, topo_order, Anchor, Dominators, GraphError, GraphIndex,
    Subgraph,
};
pub use io::{load_model, save_model, IrError};
pub use model::{AttrValue, GraphModel, InputSpec, Layout, NodeDef, Op, PreprocessingConfig};
pub use tensor::{DType, Tensor, TensorData, TensorError};
pub use validate::validate;
