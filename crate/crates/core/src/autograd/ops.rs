use crate::kernels::conv::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward, ConvGeometry,
};
use crate::kernels::norm::{instance_norm_backward, instance_norm_forward};
use crate::kernels::resample::AxisOperator;
use crate::tensor::{Scalar, Tensor};

use super::Var;

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let value = zip_map(a.value(), b.value(), |x, y| x + y);
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
    )
}

/// `sum_i weights[i] * vars[i]` over equally shaped variables.
pub fn weighted_sum<T: Scalar>(vars: &[Var<T>], weights: &[f64]) -> Var<T> {
    assert_eq!(vars.len(), weights.len());
    assert!(!vars.is_empty());
    let mut value = Tensor::zeros(vars[0].shape().to_vec());
    for (v, w) in vars.iter().zip(weights) {
        let w = T::lit(*w);
        for (acc, x) in value.data_mut().iter_mut().zip(v.value().data()) {
            *acc += w * *x;
        }
    }
    let weights = weights.to_vec();
    Var::from_op(
        value,
        vars.to_vec(),
        Box::new(move |args| {
            weights
                .iter()
                .zip(&args.needs)
                .map(|(w, need)| {
                    need.then(|| {
                        let mut g = args.grad.clone();
                        g.scale(T::lit(*w));
                        g
                    })
                })
                .collect()
        }),
    )
}

/// `x[B, C, ...] * gate[B, 1, ...]`, broadcasting the gate over channels.
pub fn mul_channel_broadcast<T: Scalar>(x: &Var<T>, gate: &Var<T>) -> Var<T> {
    let (xs, gs) = (x.shape(), gate.shape());
    assert_eq!(xs[0], gs[0]);
    assert_eq!(gs[1], 1);
    assert_eq!(xs[2..], gs[2..]);
    let (b, c) = (xs[0], xs[1]);
    let n: usize = xs[2..].iter().product();
    let mut value = x.value().clone();
    for bi in 0..b {
        let g = &gate.value().data()[bi * n..(bi + 1) * n];
        for ci in 0..c {
            let s = (bi * c + ci) * n;
            for (v, gv) in value.data_mut()[s..s + n].iter_mut().zip(g) {
                *v *= *gv;
            }
        }
    }
    Var::from_op(
        value,
        vec![x.clone(), gate.clone()],
        Box::new(move |args| {
            let (xv, gv) = (args.inputs[0], args.inputs[1]);
            let dx = args.needs[0].then(|| {
                let mut dx = args.grad.clone();
                for bi in 0..b {
                    let g = &gv.data()[bi * n..(bi + 1) * n];
                    for ci in 0..c {
                        let s = (bi * c + ci) * n;
                        for (v, w) in dx.data_mut()[s..s + n].iter_mut().zip(g) {
                            *v *= *w;
                        }
                    }
                }
                dx
            });
            let dg = args.needs[1].then(|| {
                let mut dg = Tensor::zeros(gv.shape().to_vec());
                for bi in 0..b {
                    let acc = &mut dg.data_mut()[bi * n..(bi + 1) * n];
                    for ci in 0..c {
                        let s = (bi * c + ci) * n;
                        let go = &args.grad.data()[s..s + n];
                        let xs = &xv.data()[s..s + n];
                        for ((a, g), xv) in acc.iter_mut().zip(go).zip(xs) {
                            *a += *g * *xv;
                        }
                    }
                }
                dg
            });
            vec![dx, dg]
        }),
    )
}

/// Elementwise product with a constant mask.
pub fn mul_const<T: Scalar>(x: &Var<T>, mask: Tensor<T>) -> Var<T> {
    let value = zip_map(x.value(), &mask, |a, m| a * m);
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |args| vec![Some(zip_map(args.grad, &mask, |g, m| g * m))]),
    )
}

/// Concatenation of `[B, C1, ...]` and `[B, C2, ...]` along channels.
pub fn concat_channels<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    assert_eq!(sa[0], sb[0]);
    assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
    let batch = sa[0];
    let n: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1], sb[1]);
    let mut shape = sa.clone();
    shape[1] = ca + cb;
    let mut data = Vec::with_capacity(batch * (ca + cb) * n);
    for bi in 0..batch {
        data.extend_from_slice(&a.value().data()[bi * ca * n..(bi + 1) * ca * n]);
        data.extend_from_slice(&b.value().data()[bi * cb * n..(bi + 1) * cb * n]);
    }
    Var::from_op(
        Tensor::from_vec(shape, data),
        vec![a.clone(), b.clone()],
        Box::new(move |args| {
            let g = args.grad.data();
            let split = |c0: usize, c: usize, shape: &Vec<usize>| {
                let mut d = Vec::with_capacity(batch * c * n);
                for bi in 0..batch {
                    let s = (bi * (ca + cb) + c0) * n;
                    d.extend_from_slice(&g[s..s + c * n]);
                }
                Tensor::from_vec(shape.clone(), d)
            };
            vec![
                args.needs[0].then(|| split(0, ca, &sa)),
                args.needs[1].then(|| split(ca, cb, &sb)),
            ]
        }),
    )
}

pub fn leaky_relu<T: Scalar>(x: &Var<T>, slope: f64) -> Var<T> {
    let s = T::lit(slope);
    let value = x.value().map(|v| if *v > T::zero() { *v } else { *v * s });
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |args| {
            vec![Some(zip_map(args.grad, args.inputs[0], |g, v| {
                if v > T::zero() {
                    g
                } else {
                    g * s
                }
            }))]
        }),
    )
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    leaky_relu(x, 0.0)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = x.value().map(|v| sigmoid_scalar(*v));
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(|args| {
            vec![Some(zip_map(args.grad, args.output, |g, y| g * y * (T::one() - y)))]
        }),
    )
}

/// 3D convolution, `w: [Cout, Cin, k, k, k]`.
pub fn conv3d<T: Scalar>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
    let ws = w.shape();
    assert_eq!(x.shape()[1], ws[1], "conv input channels");
    let sp = x.value().spatial();
    let g = ConvGeometry::new(ws[1], ws[0], ws[2], stride, pad, sp).expect("input smaller than kernel");
    let value = conv3d_forward(x.value(), w.value(), b.map(|b| b.value()), &g);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Var::from_op(
        value,
        parents,
        Box::new(move |args| {
            let need_b = args.needs.get(2).copied().unwrap_or(false);
            let grads = conv3d_backward(args.inputs[0], args.inputs[1], args.grad, &g, [args.needs[0], args.needs[1], need_b]);
            let mut out = vec![grads.input, grads.weight];
            if args.inputs.len() == 3 {
                out.push(grads.bias);
            }
            out
        }),
    )
}

/// 2x2x2 stride-2 transposed convolution, `w: [Cin, Cout, 2, 2, 2]`.
pub fn conv_transpose3d<T: Scalar>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
    assert_eq!(x.shape()[1], w.shape()[0], "transposed conv input channels");
    let value = conv_transpose3d_forward(x.value(), w.value(), b.map(|b| b.value()));
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Var::from_op(
        value,
        parents,
        Box::new(|args| {
            let need_b = args.needs.get(2).copied().unwrap_or(false);
            let grads = conv_transpose3d_backward(args.inputs[0], args.inputs[1], args.grad, [args.needs[0], args.needs[1], need_b]);
            let mut out = vec![grads.input, grads.weight];
            if args.inputs.len() == 3 {
                out.push(grads.bias);
            }
            out
        }),
    )
}

pub fn instance_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Var<T> {
    let (value, stats) = instance_norm_forward(x.value(), gamma.value(), beta.value(), eps);
    Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |args| {
            let (dx, dg, db) = instance_norm_backward(args.inputs[0], args.inputs[1], &stats, args.grad);
            vec![Some(dx), Some(dg), Some(db)]
        }),
    )
}

/// Trilinear resize of `[B, C, h, w, d]` to the given spatial extent.
pub fn resize_trilinear<T: Scalar>(x: &Var<T>, out: [usize; 3]) -> Var<T> {
    let sp = x.value().spatial();
    let ops: Vec<AxisOperator> = (0..3).map(|a| AxisOperator::linear(sp[a], out[a])).collect();
    let mut value = x.value().clone();
    for (a, op) in ops.iter().enumerate() {
        if !op.is_identity() {
            value = op.apply(&value, 2 + a);
        }
    }
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |args| {
            let mut g = args.grad.clone();
            for (a, op) in ops.iter().enumerate().rev() {
                if !op.is_identity() {
                    g = op.apply_transpose(&g, 2 + a);
                }
            }
            vec![Some(g)]
        }),
    )
}

/// Wraps a scalar objective whose gradient with respect to `input` has
/// already been computed analytically.
pub fn scalar_objective<T: Scalar>(input: &Var<T>, value: T, grad: Tensor<T>) -> Var<T> {
    assert_eq!(grad.shape(), input.shape());
    Var::from_op(
        Tensor::from_vec(vec![1], vec![value]),
        vec![input.clone()],
        Box::new(move |args| {
            let mut g = grad.clone();
            g.scale(args.grad.data()[0]);
            vec![Some(g)]
        }),
    )
}

pub fn sum_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let value = Tensor::from_vec(vec![1], vec![x.value().sum()]);
    let shape = x.shape().to_vec();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |args| vec![Some(Tensor::full(shape.clone(), args.grad.data()[0]))]),
    )
}
