//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
pub mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_gradients, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, Adjacency, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Softmax of `x` along `axis`, computed with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "softmax",
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
