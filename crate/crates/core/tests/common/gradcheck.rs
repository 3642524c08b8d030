//! Finite-difference harness shared by the gradient-check and acceptance
//! targets.

use super::reference::{self as r, T};
use super::{randn, to_ref};
use rand::Rng;
use supernet_core::tensor::{distill_loss, softmax_xent, BnMode, Graph, NodeId};
use supernet_core::Tensor;

pub const PROBES: usize = 5;
pub const TOL: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
type Reference = Box<dyn Fn(&[T]) -> T>;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
    reference: Reference,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Pushes values away from zero so kinks are never within a finite
/// difference step.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 } + *v;
        }
    }
    t
}

/// Returns the worst relative error over forward values and probed
/// gradient entries.
pub fn check(case: &Case, seed: u64) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t.clone(), &format!("in{i}")))
        .collect();
    let out = (case.build)(&mut g, &ids);
    let y = g.value(out).clone();
    let refs: Vec<T> = case.inputs.iter().map(to_ref).collect();
    let y_ref = (case.reference)(&refs);
    assert_eq!(y.shape(), &y_ref.shape[..], "{}: shape", case.name);
    let scale = y_ref.data.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    let mut worst = y
        .data()
        .iter()
        .zip(&y_ref.data)
        .map(|(&a, b)| (f64::from(a) - b).abs() / scale)
        .fold(0.0, f64::max);

    let upstream = randn(y.shape(), seed ^ 0xfeed);
    let up = to_ref(&upstream);
    let grads = g.backward(out, &upstream).unwrap();
    let loss = |inputs: &[T]| -> f64 {
        let o = (case.reference)(inputs);
        o.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
    };
    let mut rng = super::rng(seed);
    for (i, t) in refs.iter().enumerate() {
        let analytic = grads
            .get(i)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.data.len()]);
        for _ in 0..PROBES {
            let j = rng.random_range(0..t.data.len());
            let h = 1e-3 * t.data[j].abs().max(1.0);
            let mut plus = refs.clone();
            plus[i].data[j] += h;
            let mut minus = refs.clone();
            minus[i].data[j] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let e = rel_err(f64::from(analytic[j]), numeric);
            assert!(
                e < TOL,
                "{}: input {i} entry {j}: analytic {} numeric {numeric}",
                case.name,
                analytic[j]
            );
            worst = worst.max(e);
        }
    }
    worst
}

fn conv_case(name: &'static str, x: &[usize], w: &[usize], stride: usize, depthwise: bool) -> Case {
    Case {
        name,
        inputs: vec![randn(x, 1), randn(w, 2)],
        build: Box::new(move |g, v| {
            if depthwise {
                g.depthwise_conv2d(v[0], v[1], stride, "dw").unwrap()
            } else {
                g.conv2d(v[0], v[1], stride, "conv").unwrap()
            }
        }),
        reference: Box::new(move |v| r::conv(&v[0], &v[1], stride, depthwise)),
    }
}

pub fn cases() -> Vec<Case> {
    let running_mean = vec![0.3f32, -0.2, 0.1, 0.0];
    let running_var = vec![1.5f32, 0.5, 2.0, 0.8];
    let (rm, rv) = (running_mean.clone(), running_var.clone());
    let dropout_probe = {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 3, 4, 4], 1.0), "x");
        let d = g.dropout(x, 0.3, 99, "drop").unwrap();
        g.value(d)
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect::<Vec<_>>()
    };
    vec![
        conv_case("conv 1x1", &[2, 3, 5, 5], &[4, 3, 1, 1], 1, false),
        conv_case("conv 3x3", &[2, 3, 6, 6], &[4, 3, 3, 3], 1, false),
        conv_case(
            "conv 3x3 stride 2 odd",
            &[2, 3, 7, 7],
            &[4, 3, 3, 3],
            2,
            false,
        ),
        conv_case(
            "conv 5x5 stride 2 even",
            &[1, 2, 8, 8],
            &[3, 2, 5, 5],
            2,
            false,
        ),
        conv_case("conv 1x1 stride 2", &[2, 3, 5, 5], &[2, 3, 1, 1], 2, false),
        conv_case("depthwise 3x3", &[2, 4, 6, 6], &[4, 1, 3, 3], 1, true),
        conv_case(
            "depthwise 5x5 stride 2",
            &[2, 3, 7, 7],
            &[3, 1, 5, 5],
            2,
            true,
        ),
        Case {
            name: "batch norm (batch statistics)",
            inputs: vec![randn(&[3, 4, 3, 3], 3), randn(&[4], 4), randn(&[4], 5)],
            build: Box::new(|g, v| g.batch_norm(v[0], v[1], v[2], BnMode::Batch, "bn").unwrap()),
            reference: Box::new(|v| r::batch_norm(&v[0], &v[1].data, &v[2].data, None)),
        },
        Case {
            name: "batch norm (running statistics)",
            inputs: vec![randn(&[2, 4, 3, 3], 6), randn(&[4], 7), randn(&[4], 8)],
            build: Box::new(move |g, v| {
                g.batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    BnMode::Running {
                        mean: &running_mean,
                        var: &running_var,
                    },
                    "bn",
                )
                .unwrap()
            }),
            reference: Box::new(move |v| {
                let m: Vec<f64> = rm.iter().map(|&x| f64::from(x)).collect();
                let s: Vec<f64> = rv.iter().map(|&x| f64::from(x)).collect();
                r::batch_norm(&v[0], &v[1].data, &v[2].data, Some((&m, &s)))
            }),
        },
        Case {
            name: "swish",
            inputs: vec![randn(&[2, 3, 4, 4], 9)],
            build: Box::new(|g, v| g.swish(v[0], "swish")),
            reference: Box::new(|v| r::swish(&v[0])),
        },
        Case {
            name: "relu",
            inputs: vec![away_from_zero(randn(&[2, 3, 4, 4], 10))],
            build: Box::new(|g, v| g.relu(v[0], "relu")),
            reference: Box::new(|v| r::relu(&v[0])),
        },
        Case {
            name: "avgpool 2x2 odd size",
            inputs: vec![randn(&[2, 3, 5, 5], 11)],
            build: Box::new(|g, v| g.avgpool2(v[0], "pool").unwrap()),
            reference: Box::new(|v| r::avgpool2(&v[0])),
        },
        Case {
            name: "global average pool",
            inputs: vec![randn(&[2, 3, 4, 5], 12)],
            build: Box::new(|g, v| g.global_avgpool(v[0], "gap").unwrap()),
            reference: Box::new(|v| r::global_avgpool(&v[0])),
        },
        Case {
            name: "linear with bias",
            inputs: vec![randn(&[3, 5], 13), randn(&[4, 5], 14), randn(&[4], 15)],
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]), "fc").unwrap()),
            reference: Box::new(|v| r::linear(&v[0], &v[1], Some(&v[2].data))),
        },
        Case {
            name: "linear without bias",
            inputs: vec![randn(&[3, 5], 16), randn(&[2, 5], 17)],
            build: Box::new(|g, v| g.linear(v[0], v[1], None, "fc").unwrap()),
            reference: Box::new(|v| r::linear(&v[0], &v[1], None)),
        },
        Case {
            name: "add",
            inputs: vec![randn(&[2, 3, 3, 3], 18), randn(&[2, 3, 3, 3], 19)],
            build: Box::new(|g, v| g.add(v[0], v[1], "add").unwrap()),
            reference: Box::new(|v| r::add(&v[0], &v[1])),
        },
        Case {
            name: "dropout",
            inputs: vec![randn(&[2, 3, 4, 4], 20)],
            build: Box::new(|g, v| g.dropout(v[0], 0.3, 99, "drop").unwrap()),
            reference: Box::new(move |v| r::mul(&v[0], &dropout_probe)),
        },
        Case {
            name: "channel mask (rank 4)",
            inputs: vec![randn(&[2, 5, 3, 3], 21)],
            build: Box::new(|g, v| g.channel_mask(v[0], 3, "mask").unwrap()),
            reference: Box::new(|v| r::channel_mask(&v[0], 3)),
        },
        Case {
            name: "channel mask (rank 2)",
            inputs: vec![randn(&[3, 6], 22)],
            build: Box::new(|g, v| g.channel_mask(v[0], 2, "mask").unwrap()),
            reference: Box::new(|v| r::channel_mask(&v[0], 2)),
        },
        Case {
            name: "channel adapt (pad)",
            inputs: vec![randn(&[2, 3, 3, 3], 23)],
            build: Box::new(|g, v| g.channel_adapt(v[0], 5, "adapt").unwrap()),
            reference: Box::new(|v| r::channel_adapt(&v[0], 5)),
        },
        Case {
            name: "channel adapt (truncate)",
            inputs: vec![randn(&[2, 5, 3, 3], 24)],
            build: Box::new(|g, v| g.channel_adapt(v[0], 2, "adapt").unwrap()),
            reference: Box::new(|v| r::channel_adapt(&v[0], 2)),
        },
        Case {
            name: "kernel mask 5 -> 3",
            inputs: vec![randn(&[3, 1, 5, 5], 25)],
            build: Box::new(|g, v| g.kernel_mask(v[0], 3, "km").unwrap()),
            reference: Box::new(|v| r::kernel_mask(&v[0], 3)),
        },
        Case {
            name: "block: conv, batch norm, swish, masked depthwise, pool, linear",
            inputs: vec![
                randn(&[2, 3, 6, 6], 26),
                randn(&[4, 3, 1, 1], 27),
                randn(&[4], 28),
                randn(&[4], 29),
                randn(&[4, 1, 5, 5], 30),
                randn(&[3, 4], 31),
            ],
            build: Box::new(|g, v| {
                let c = g.conv2d(v[0], v[1], 1, "c").unwrap();
                let b = g.batch_norm(c, v[2], v[3], BnMode::Batch, "bn").unwrap();
                let a = g.swish(b, "a");
                let k = g.kernel_mask(v[4], 3, "km").unwrap();
                let d = g.depthwise_conv2d(a, k, 2, "dw").unwrap();
                let p = g.global_avgpool(d, "gap").unwrap();
                g.linear(p, v[5], None, "fc").unwrap()
            }),
            reference: Box::new(|v| {
                let c = r::conv(&v[0], &v[1], 1, false);
                let b = r::batch_norm(&c, &v[2].data, &v[3].data, None);
                let a = r::swish(&b);
                let d = r::conv(&a, &r::kernel_mask(&v[4], 3), 2, true);
                r::linear(&r::global_avgpool(&d), &v[5], None)
            }),
        },
    ]
}

pub fn check_loss(name: &str, logits: &Tensor, grad: &Tensor, value: f32, f: impl Fn(&T) -> f64) {
    let base = to_ref(logits);
    assert!(
        rel_err(f64::from(value), f(&base)) < TOL,
        "{name}: value {value} vs {}",
        f(&base)
    );
    for j in 0..base.data.len() {
        let h = 1e-4;
        let mut p = base.clone();
        p.data[j] += h;
        let mut m = base.clone();
        m.data[j] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        let e = rel_err(f64::from(grad.data()[j]), numeric);
        assert!(
            e < TOL,
            "{name}: entry {j}: analytic {} numeric {numeric}",
            grad.data()[j]
        );
    }
}

/// Cross-entropy (with and without smoothing) and distillation gradients.
pub fn check_losses() {
    let logits = randn(&[4, 6], 40);
    let labels = [0, 5, 2, 2];
    for smoothing in [0.0f32, 0.1] {
        let (l, g) = softmax_xent(&logits, &labels, smoothing).unwrap();
        check_loss("softmax_xent", &logits, &g, l, |t| {
            r::softmax_xent(t, &labels, f64::from(smoothing))
        });
    }
    let teacher = randn(&[3, 5], 41);
    let student = randn(&[3, 5], 42);
    let (l, g) = distill_loss(&teacher, &student).unwrap();
    let t = to_ref(&teacher);
    check_loss("distill", &student, &g, l, |s| r::distill(&t, s));
}
