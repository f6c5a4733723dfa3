//! Every differentiable tape op on small random inputs.

use medkgqa::autodiff::{Tape, Tensor, Var};
use medkgqa::Result;

use super::rng;

pub type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

/// Entries bounded away from zero so kinked ops are differentiable at the
/// sample points.
pub fn rand_off_zero(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed)).map(|x| {
        if x.abs() >= 0.1 {
            x
        } else if x >= 0.0 {
            x + 0.2
        } else {
            x - 0.2
        }
    })
}

impl OpCase {
    pub fn inputs(&self) -> Vec<Tensor> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_off_zero(s, 11 + i as u64))
            .collect()
    }
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |_, v| v[0].matmul(v[1])),
        case("transpose", &[&[3, 2]], |_, v| v[0].transpose()),
        case("add", &[&[2, 3], &[2, 3]], |_, v| v[0].add(v[1])),
        case("add_scalar", &[&[2, 3], &[1, 1]], |_, v| v[0].add(v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |_, v| v[0].sub(v[1])),
        case("sub_scalar_lhs", &[&[1, 1], &[2, 3]], |_, v| v[0].sub(v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |_, v| v[0].mul(v[1])),
        case("mul_scalar", &[&[2, 3], &[1, 1]], |_, v| v[0].mul(v[1])),
        case("scale", &[&[2, 3]], |_, v| Ok(v[0].scale(-1.7))),
        case("one_minus", &[&[2, 3]], |_, v| Ok(v[0].one_minus())),
        case("sigmoid", &[&[2, 3]], |_, v| Ok(v[0].sigmoid())),
        case("tanh", &[&[2, 3]], |_, v| Ok(v[0].tanh())),
        case("elu", &[&[3, 3]], |_, v| Ok(v[0].elu())),
        case("leaky_relu", &[&[3, 3]], |_, v| Ok(v[0].leaky_relu(0.2))),
        case("softmax_rows", &[&[3, 4]], |_, v| v[0].softmax(1)),
        case("softmax_cols", &[&[3, 4]], |_, v| v[0].softmax(0)),
        case("concat_cols", &[&[2, 3], &[2, 1]], |_, v| Var::concat(&[v[0], v[1]], 1)),
        case("concat_rows", &[&[2, 3], &[1, 3]], |_, v| Var::concat(&[v[0], v[1]], 0)),
        case("slice_cols", &[&[3, 5]], |_, v| v[0].slice_cols(1, 4)),
        case("slice_rows", &[&[5, 3]], |_, v| v[0].slice_rows(2, 4)),
        case("row", &[&[4, 3]], |_, v| v[0].row(2)),
        case("gather_rows", &[&[4, 3]], |_, v| v[0].gather_rows(&[3, 0, 3, 1])),
        case("scale_rows", &[&[3, 4], &[3, 1]], |_, v| v[0].scale_rows(v[1])),
        case("segment_mean", &[&[5, 3]], |_, v| v[0].segment_mean(&[0, 2, 0, 2, 2], 4)),
        case("segment_softmax", &[&[6, 1]], |_, v| v[0].segment_softmax(&[1, 0, 1, 1, 0, 2])),
        case("sum", &[&[2, 3]], |_, v| Ok(v[0].sum())),
        case("mean_rows", &[&[4, 3]], |_, v| v[0].mean_rows()),
        case("max", &[&[5, 1]], |_, v| v[0].max()),
        case("l2_norm", &[&[2, 3]], |_, v| Ok(v[0].l2_norm())),
        case("softmax_cross_entropy", &[&[1, 5]], |_, v| v[0].softmax_cross_entropy(3)),
        case("three_layer_net", &[&[4, 5], &[5, 6], &[6, 3], &[3, 1], &[2, 4]], |_, v| {
            let h1 = v[4].matmul(v[0])?.tanh();
            let h2 = h1.matmul(v[1])?.sigmoid();
            h2.matmul(v[2])?.elu().matmul(v[3])
        }),
    ]
}
