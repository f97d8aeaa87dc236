//! Randomized finite-difference cases, one generator per operation or block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_module, check_op, jitter_parameters, FdSettings, GradCheck};
use crate::autograd::Mode;
use crate::blocks::{
    Downsample, DilatedReparamBlock, DySampleUpsampler, GatedConvLayer, GatedUniPoseBlock, GlaceEmbed, SqueezeExcite,
};
use crate::error::Result;
use crate::model::{GatedUniPoseModel, ModelConfig};
use crate::ops::ConvSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type CaseFn = fn(&mut ChaCha8Rng, FdSettings) -> Result<GradCheck>;

/// Operations and blocks under finite-difference test, by name.
pub fn registry<S: Scalar>() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", conv2d::<S>),
        ("conv2d_depthwise", conv2d_depthwise::<S>),
        ("transposed_conv2d", transposed_conv2d::<S>),
        ("linear", linear::<S>),
        ("grid_sample", grid_sample::<S>),
        ("pixel_shuffle", pixel_shuffle::<S>),
        ("reshape", reshape::<S>),
        ("sigmoid", sigmoid::<S>),
        ("gelu", gelu::<S>),
        ("add", add::<S>),
        ("sub", sub::<S>),
        ("mul", mul::<S>),
        ("scale", scale::<S>),
        ("clamp", clamp::<S>),
        ("scale_channels", scale_channels::<S>),
        ("concat_channels", concat_channels::<S>),
        ("global_avg_pool", global_avg_pool::<S>),
        ("avg_pool2d", avg_pool2d::<S>),
        ("batch_norm_train", batch_norm_train::<S>),
        ("batch_norm_eval", batch_norm_eval::<S>),
        ("sum", sum::<S>),
        ("mse", mse::<S>),
        ("gated_conv", gated_conv::<S>),
        ("squeeze_excite", squeeze_excite::<S>),
        ("dilated_reparam", dilated_reparam::<S>),
        ("dilated_reparam_deployed", dilated_reparam_deployed::<S>),
        ("glace_embed", glace_embed::<S>),
        ("patchify_downsample", patchify::<S>),
        ("dysample", dysample::<S>),
        ("unipose_block", unipose_block::<S>),
        ("model_mse", model_mse::<S>),
    ]
}

fn tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<S>> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn mode(rng: &mut ChaCha8Rng) -> Mode {
    if rng.gen_bool(0.5) {
        Mode::Train
    } else {
        Mode::Eval
    }
}

fn random_spec(rng: &mut ChaCha8Rng, groups: usize) -> ConvSpec {
    let k = rng.gen_range(1..=3);
    ConvSpec::new(groups * rng.gen_range(1..=3), groups * rng.gen_range(1..=3), k)
        .stride(rng.gen_range(1..=2))
        .dilation(rng.gen_range(1..=2))
        .padding(rng.gen_range(0..=1))
        .groups(groups)
        .bias(rng.gen_bool(0.5))
}

fn conv_inputs<S: Scalar>(rng: &mut ChaCha8Rng, spec: &ConvSpec, weight: [usize; 4]) -> Result<Vec<Tensor<S>>> {
    let n = rng.gen_range(1..=2);
    let (h, w) = (rng.gen_range(5..=8), rng.gen_range(5..=8));
    let mut v = vec![
        tensor(rng, &[n, spec.in_channels, h, w], -1.0, 1.0)?,
        tensor(rng, &weight, -1.0, 1.0)?,
    ];
    if spec.has_bias {
        v.push(tensor(rng, &[spec.out_channels], -1.0, 1.0)?);
    }
    Ok(v)
}

fn conv_with<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings, spec: ConvSpec) -> Result<GradCheck> {
    let inputs = conv_inputs::<S>(rng, &spec, spec.weight_shape())?;
    check_op(&inputs, Mode::Eval, fd, rng, move |t, v| t.conv2d(&v[0], &v[1], v.get(2), &spec))
}

fn conv2d<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let groups = rng.gen_range(1..=2);
    let spec = random_spec(rng, groups);
    conv_with::<S>(rng, fd, spec)
}

fn conv2d_depthwise<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let c = rng.gen_range(1..=4);
    let k = [3, 5][rng.gen_range(0..2)];
    let spec = ConvSpec::depthwise(c, k, rng.gen_range(1..=2)).bias(rng.gen_bool(0.5));
    conv_with::<S>(rng, fd, spec)
}

fn transposed_conv2d<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let groups = rng.gen_range(1..=2);
    let spec = random_spec(rng, groups);
    let inputs = conv_inputs::<S>(rng, &spec, spec.transposed_weight_shape())?;
    check_op(&inputs, Mode::Eval, fd, rng, move |t, v| {
        t.transposed_conv2d(&v[0], &v[1], v.get(2), &spec)
    })
}

fn linear<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let (n, i, o) = (rng.gen_range(1..=3), rng.gen_range(1..=6), rng.gen_range(1..=6));
    let inputs = vec![
        tensor::<S>(rng, &[n, i], -1.0, 1.0)?,
        tensor(rng, &[o, i], -1.0, 1.0)?,
        tensor(rng, &[o], -1.0, 1.0)?,
    ];
    check_op(&inputs, Mode::Eval, fd, rng, |t, v| t.linear(&v[0], &v[1], &v[2]))
}

fn grid_sample<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let (oh, ow) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let x = tensor::<S>(rng, &[n, c, h, w], -1.0, 1.0)?;
    // stay clear of integer grid lines, where bilinear weights have kinks
    let mut coords = Tensor::<S>::zeros(&[n, 2, oh, ow])?;
    let plane = oh * ow;
    for (i, v) in coords.data_mut().iter_mut().enumerate() {
        let extent = if (i / plane) % 2 == 0 { w } else { h };
        let cell = rng.gen_range(-1..extent as i64) as f64;
        *v = S::from_f64(cell + rng.gen_range(0.05..0.95));
    }
    check_op(&[x, coords], Mode::Eval, fd, rng, |t, v| t.grid_sample(&v[0], &v[1]))
}

fn pixel_shuffle<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let s = rng.gen_range(2..=3);
    let shape = [rng.gen_range(1..=2), s * s * rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let x = tensor::<S>(rng, &shape, -1.0, 1.0)?;
    check_op(&[x], Mode::Eval, fd, rng, move |t, v| t.pixel_shuffle(&v[0], s))
}

fn small_map<S: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Result<Tensor<S>> {
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    tensor(rng, &shape, lo, hi)
}

fn reshape<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -1.0, 1.0)?;
    let (n, rest) = (x.shape()[0], x.numel() / x.shape()[0]);
    check_op(&[x], Mode::Eval, fd, rng, move |t, v| t.reshape(&v[0], &[n, rest]))
}

fn sigmoid<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -4.0, 4.0)?;
    check_op(&[x], Mode::Eval, fd, rng, |t, v| t.sigmoid(&v[0]))
}

fn gelu<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -4.0, 4.0)?;
    check_op(&[x], Mode::Eval, fd, rng, |t, v| t.gelu(&v[0]))
}

fn pair<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<S>>> {
    let a = small_map::<S>(rng, -2.0, 2.0)?;
    let b = tensor(rng, a.shape(), -2.0, 2.0)?;
    Ok(vec![a, b])
}

fn add<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let inputs = pair::<S>(rng)?;
    check_op(&inputs, Mode::Eval, fd, rng, |t, v| t.add(&v[0], &v[1]))
}

fn sub<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let inputs = pair::<S>(rng)?;
    check_op(&inputs, Mode::Eval, fd, rng, |t, v| t.sub(&v[0], &v[1]))
}

fn mul<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let inputs = pair::<S>(rng)?;
    check_op(&inputs, Mode::Eval, fd, rng, |t, v| t.mul(&v[0], &v[1]))
}

fn scale<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -2.0, 2.0)?;
    let k = rng.gen_range(-3.0..3.0);
    check_op(&[x], Mode::Eval, fd, rng, move |t, v| t.scale(&v[0], k))
}

fn clamp<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let mut x = small_map::<S>(rng, -2.0, 2.0)?;
    // keep entries away from the two kinks
    for v in x.data_mut() {
        let f = v.to_f64();
        if (f.abs() - 1.0).abs() < 0.05 {
            *v = S::from_f64(f * 0.9);
        }
    }
    check_op(&[x], Mode::Eval, fd, rng, |t, v| t.clamp(&v[0], -1.0, 1.0))
}

fn scale_channels<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -2.0, 2.0)?;
    let k = tensor(rng, &x.shape()[..2], -2.0, 2.0)?;
    check_op(&[x, k], Mode::Eval, fd, rng, |t, v| t.scale_channels(&v[0], &v[1]))
}

fn concat_channels<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let parts = rng.gen_range(2..=3);
    let inputs = (0..parts)
        .map(|_| {
            let c = rng.gen_range(1..=3);
            tensor::<S>(rng, &[n, c, h, w], -1.0, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    check_op(&inputs, Mode::Eval, fd, rng, |t, v| {
        let refs: Vec<_> = v.iter().collect();
        t.concat_channels(&refs)
    })
}

fn global_avg_pool<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -2.0, 2.0)?;
    check_op(&[x], Mode::Eval, fd, rng, |t, v| t.global_avg_pool(&v[0]))
}

fn avg_pool2d<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let k = rng.gen_range(1..=3);
    let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), k * rng.gen_range(1..=3), k * rng.gen_range(1..=3)];
    let x = tensor::<S>(rng, &shape, -2.0, 2.0)?;
    check_op(&[x], Mode::Eval, fd, rng, move |t, v| t.avg_pool2d(&v[0], k))
}

fn batch_norm_with<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings, mode: Mode) -> Result<GradCheck> {
    let c = rng.gen_range(1..=3);
    let shape = [rng.gen_range(2..=3), c, rng.gen_range(2..=3), rng.gen_range(2..=3)];
    let inputs = vec![
        tensor::<S>(rng, &shape, -2.0, 2.0)?,
        tensor(rng, &[c], 0.5, 1.5)?,
        tensor(rng, &[c], -0.5, 0.5)?,
    ];
    let mean = tensor::<S>(rng, &[c], -0.2, 0.2)?;
    let var = tensor::<S>(rng, &[c], 0.5, 1.5)?;
    check_op(&inputs, mode, fd, rng, move |t, v| t.batch_norm(&v[0], &v[1], &v[2], &mean, &var, "bn"))
}

fn batch_norm_train<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    batch_norm_with::<S>(rng, fd, Mode::Train)
}

fn batch_norm_eval<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    batch_norm_with::<S>(rng, fd, Mode::Eval)
}

fn sum<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let x = small_map::<S>(rng, -2.0, 2.0)?;
    check_op(&[x], Mode::Eval, fd, rng, |t, v| t.sum(&v[0]))
}

fn mse<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let inputs = pair::<S>(rng)?;
    let joints = inputs[0].shape()[1];
    let mut mask: Vec<bool> = (0..joints).map(|_| rng.gen_bool(0.7)).collect();
    mask[rng.gen_range(0..joints)] = true;
    check_op(&inputs, Mode::Eval, fd, rng, move |t, v| t.mse(&v[0], &v[1], Some(&mask)))
}

fn feature_map<S: Scalar>(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let n = rng.gen_range(1..=2);
    tensor(rng, &[n, c, h, w], -1.0, 1.0)
}

fn gated_conv<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let k = [1, 3][rng.gen_range(0..2)];
    let spec = ConvSpec::new(rng.gen_range(1..=3), rng.gen_range(1..=3), k).padding(k / 2);
    let mut layer = GatedConvLayer::<S>::new("g", spec, rng.gen())?;
    jitter_parameters(&mut layer, 0.3, rng);
    let x = feature_map::<S>(rng, spec.in_channels, 4, 4)?;
    check_module(&layer, &[x], Mode::Eval, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn squeeze_excite<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let c = rng.gen_range(1..=8);
    let mut se = SqueezeExcite::<S>::new("se", c, 4, rng.gen())?;
    jitter_parameters(&mut se, 0.3, rng);
    let x = feature_map::<S>(rng, c, 3, 3)?;
    check_module(&se, &[x], Mode::Eval, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn reparam_block<S: Scalar>(rng: &mut ChaCha8Rng) -> Result<DilatedReparamBlock<S>> {
    let k = [7, 9, 13][rng.gen_range(0..3)];
    let mut block = DilatedReparamBlock::<S>::new("r", rng.gen_range(1..=3), k, rng.gen())?;
    jitter_parameters(&mut block, 0.2, rng);
    Ok(block)
}

fn dilated_reparam<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let block = reparam_block::<S>(rng)?;
    let x = feature_map::<S>(rng, block.channels(), 4, 5)?;
    let mode = mode(rng);
    check_module(&block, &[x], mode, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn dilated_reparam_deployed<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let mut block = reparam_block::<S>(rng)?;
    block.merge_reparam()?;
    let x = feature_map::<S>(rng, block.channels(), 4, 5)?;
    check_module(&block, &[x], Mode::Eval, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn glace_embed<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let stride = [2, 4][rng.gen_range(0..2)];
    let cout = 4 * rng.gen_range(1..=2);
    let mut embed = GlaceEmbed::<S>::stem("stem", 3, cout, stride, rng.gen())?;
    jitter_parameters(&mut embed, 0.2, rng);
    let x = feature_map::<S>(rng, 3, 2 * stride, 2 * stride)?;
    let mode = mode(rng);
    check_module(&embed, &[x], mode, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn patchify<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let mut down = Downsample::<S>::stage(false, "down", cin, cout, rng.gen())?;
    jitter_parameters(&mut down, 0.2, rng);
    let x = feature_map::<S>(rng, cin, 4, 6)?;
    check_module(&down, &[x], Mode::Eval, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn dysample<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let s = [2, 4][rng.gen_range(0..2)];
    let c = rng.gen_range(1..=3);
    let mut up = DySampleUpsampler::<S>::new("up", c, s)?;
    // small offsets keep sample points inside their cells, away from kinks
    jitter_parameters(&mut up, 0.05, rng);
    let x = feature_map::<S>(rng, c, 3, 3)?;
    check_module(&up, &[x], Mode::Eval, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

fn unipose_block<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let k = [3, 5, 7, 9][rng.gen_range(0..4)];
    let c = rng.gen_range(2..=4);
    let mut block = GatedUniPoseBlock::<S>::new("b", c, k, rng.gen_bool(0.5), rng.gen())?;
    jitter_parameters(&mut block, 0.2, rng);
    let x = feature_map::<S>(rng, c, 3, 4)?;
    let mode = mode(rng);
    check_module(&block, &[x], mode, fd, rng, |m, t, v| m.forward(t, &v[0]))
}

/// A narrow model with every switch drawn at random.
pub fn micro_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.input_size = [64, 64];
    cfg.heatmap_size = [16, 16];
    cfg.joints = 3;
    cfg.stem_channels = 4;
    cfg.decoder_channels = 4;
    cfg.use_gconv = rng.gen_bool(0.5);
    cfg.use_glace = rng.gen_bool(0.5);
    cfg.use_dysample = rng.gen_bool(0.5);
    cfg.seed = rng.gen();
    for (i, st) in cfg.stages.iter_mut().enumerate() {
        st.depth = 1;
        st.channels = 4 * (1 + i / 2);
        st.kernel_sizes = vec![[3, 7, 9, 13][i]];
    }
    cfg
}

fn model_mse<S: Scalar>(rng: &mut ChaCha8Rng, fd: FdSettings) -> Result<GradCheck> {
    let cfg = micro_config(rng);
    let mut model = GatedUniPoseModel::<S>::build(&cfg)?;
    jitter_parameters(&mut model, 0.1, rng);
    let [h, w] = cfg.input_size;
    let [hh, hw] = cfg.heatmap_size;
    let x = tensor::<S>(rng, &[2, 3, h, w], 0.0, 1.0)?;
    let target = Tensor::<S>::uniform(&[2, cfg.joints, hh, hw], 0.0, 1.0, rng)?;
    let fd = FdSettings { probes: 2, ..fd };
    check_module(&model, &[x], Mode::Train, fd, rng, move |m, t, v| {
        let pred = m.forward(t, &v[0])?;
        let target = crate::autograd::Var::constant(target.clone());
        t.mse(&pred, &target, None)
    })
}
