use ndarray::{ArrayD, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("data length matches shape")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

/// Row-major reshape; copies only when the input is not contiguous.
pub fn reshape(t: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(
        t.len(),
        shape.iter().product::<usize>(),
        "cannot reshape {:?} into {:?}",
        t.shape(),
        shape
    );
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("contiguous reshape")
}

/// Sum a broadcast gradient back down to `shape`.
pub fn reduce_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}
