mod common;

use common::{gradcheck, model_gradcheck, random_tensor, rng, weighted_sum};
use danhar::attention::{
    apply_attention, channel_attention, temporal_attention, ChannelAttentionParams, TemporalAttentionParams,
};
use danhar::graph::{Mode, PoolKind, RunningStats};
use danhar::{AttentionConfig, AttentionVariant, Backbone, Model, ModelConfig, Padding};

const TOL: f64 = 1e-4;

fn check(name: &str, worst: f64) {
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(1);
    let x = random_tensor(&[2, 3, 4, 7], &mut r);
    let w = random_tensor(&[2, 3, 2, 3], &mut r);
    let b = random_tensor(&[2], &mut r);
    check(
        "conv2d stride 1 pad 1",
        gradcheck(&[x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1)).unwrap();
            weighted_sum(g, y, 9)
        }),
    );
    let x = random_tensor(&[2, 3, 6, 9], &mut r);
    check(
        "conv2d stride 2",
        gradcheck(&[x, w.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], None, (2, 2), (1, 1)).unwrap();
            weighted_sum(g, y, 9)
        }),
    );
    let x = random_tensor(&[1, 3, 2, 8], &mut r);
    let w = random_tensor(&[2, 3, 1, 6], &mut r);
    check(
        "conv2d asymmetric same padding",
        gradcheck(&[x, w], |g, v| {
            let y = g.conv2d_padded(v[0], v[1], None, (1, 1), Padding::same_width(6)).unwrap();
            weighted_sum(g, y, 9)
        }),
    );
}

#[test]
fn dense_gradients() {
    let mut r = rng(2);
    let ins = [
        random_tensor(&[3, 5], &mut r),
        random_tensor(&[4, 5], &mut r),
        random_tensor(&[4], &mut r),
    ];
    check(
        "dense",
        gradcheck(&ins, |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(g, y, 3)
        }),
    );
}

#[test]
fn batchnorm_gradients() {
    let mut r = rng(3);
    let ins = [
        random_tensor(&[3, 2, 2, 4], &mut r),
        random_tensor(&[2], &mut r),
        random_tensor(&[2], &mut r),
    ];
    let stats = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.5, 0.7],
    };
    for mode in [Mode::Train, Mode::Eval] {
        check(
            &format!("batchnorm {mode:?}"),
            gradcheck(&ins, |g, v| {
                let (y, _) = g.batchnorm(v[0], v[1], v[2], &stats, mode).unwrap();
                weighted_sum(g, y, 4)
            }),
        );
    }
}

#[test]
fn pooling_gradients() {
    let mut r = rng(4);
    let x = random_tensor(&[2, 3, 2, 6], &mut r);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        check(
            &format!("channelwise {kind:?}"),
            gradcheck(std::slice::from_ref(&x), |g, v| {
                let y = g.pool_channelwise(v[0], kind).unwrap();
                weighted_sum(g, y, 5)
            }),
        );
        check(
            &format!("across channels {kind:?}"),
            gradcheck(std::slice::from_ref(&x), |g, v| {
                let y = g.pool_across_channels(v[0], kind).unwrap();
                weighted_sum(g, y, 5)
            }),
        );
    }
    check(
        "max_pool2d",
        gradcheck(&[random_tensor(&[2, 2, 3, 9], &mut r)], |g, v| {
            let y = g.max_pool2d(v[0], (1, 2)).unwrap();
            weighted_sum(g, y, 5)
        }),
    );
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(5);
    let a = random_tensor(&[2, 3, 1, 4], &mut r);
    let b = random_tensor(&[2, 1, 3, 1], &mut r);
    // Keep inputs away from the ReLU kink.
    let mut c = random_tensor(&[2, 6], &mut r);
    c.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    check(
        "relu",
        gradcheck(std::slice::from_ref(&c), |g, v| {
            let y = g.relu(v[0]).unwrap();
            weighted_sum(g, y, 6)
        }),
    );
    check(
        "sigmoid",
        gradcheck(std::slice::from_ref(&c), |g, v| {
            let y = g.sigmoid(v[0]).unwrap();
            weighted_sum(g, y, 6)
        }),
    );
    check(
        "broadcast add",
        gradcheck(&[a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, y, 6)
        }),
    );
    check(
        "broadcast mul",
        gradcheck(&[a.clone(), b], |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, y, 6)
        }),
    );
    check(
        "scale",
        gradcheck(std::slice::from_ref(&a), |g, v| {
            let y = g.scale(v[0], -1.7).unwrap();
            weighted_sum(g, y, 6)
        }),
    );
    let d = random_tensor(&[2, 2, 1, 4], &mut r);
    check(
        "concat and reshape",
        gradcheck(&[a, d], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1).unwrap();
            let y = g.reshape(y, &[2, 20]).unwrap();
            weighted_sum(g, y, 6)
        }),
    );
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(6);
    let logits = random_tensor(&[4, 5], &mut r);
    check(
        "cross_entropy",
        gradcheck(&[logits], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()),
    );
}

#[test]
fn attention_gradients_for_every_variant() {
    let mut r = rng(7);
    let a = random_tensor(&[2, 8, 3, 10], &mut r);
    let cp = ChannelAttentionParams::init(8, 2, &mut r);
    let tp = TemporalAttentionParams::init(5, &mut r);
    let ins = [a.clone(), cp.w1.clone(), cp.b1.clone(), cp.w2.clone(), cp.b2.clone(), tp.kernel.clone(), tp.bias.clone()];
    check(
        "channel attention",
        gradcheck(&ins, |g, v| {
            let vars = danhar::attention::ChannelAttentionVars {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            };
            let w = channel_attention(g, v[0], &vars).unwrap();
            weighted_sum(g, w, 8)
        }),
    );
    check(
        "temporal attention",
        gradcheck(&ins, |g, v| {
            let vars = danhar::attention::TemporalAttentionVars { kernel: v[5], bias: v[6] };
            let w = temporal_attention(g, v[0], &vars).unwrap();
            weighted_sum(g, w, 8)
        }),
    );
    for variant in AttentionVariant::ALL {
        check(
            variant.as_str(),
            gradcheck(&ins, |g, v| {
                let cv = danhar::attention::ChannelAttentionVars {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let tv = danhar::attention::TemporalAttentionVars { kernel: v[5], bias: v[6] };
                let y = apply_attention(g, v[0], variant, Some(&cv), Some(&tv), None).unwrap();
                weighted_sum(g, y, 8)
            }),
        );
    }
}

fn miniature(variant: AttentionVariant, backbone: Backbone) -> Model {
    Model::build(ModelConfig {
        backbone,
        channel_plan: vec![4, 4, 8, 8],
        num_classes: 3,
        sensor_axes: 3,
        window_length: 32,
        attention: AttentionConfig::with_variant(variant),
        seed: 21,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn end_to_end_model_gradients() {
    let batch = random_tensor(&[2, 1, 3, 32], &mut rng(8));
    for (variant, backbone) in [
        (AttentionVariant::ChannelThenTemporal, Backbone::Residual),
        (AttentionVariant::TemporalThenChannel, Backbone::Plain),
    ] {
        let model = miniature(variant, backbone);
        check(&format!("{variant} {backbone:?}"), model_gradcheck(&model, &batch, &[0, 2]));
    }
}
