//! Whole-network tests: parameter accounting, ablation switches, deploy
//! equivalence, checkpoints and shapes.

use std::collections::BTreeMap;

use gatedunipose::autograd::{Tape, Var};
use gatedunipose::model::checkpoint::{decode, encode};
use gatedunipose::verify::model_deploy_gap;
use gatedunipose::{count_parameters, Error, GatedUniPoseModel, Module, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Closed-form trainable parameter count, written from the layer list alone.
fn spreadsheet(cfg: &ModelConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
    let mut total = 0;
    // stem: stride-2 units doubling up to the stem width, or one patchify conv
    let stem = cfg.stem_channels;
    if cfg.use_glace {
        let steps = cfg.stem_stride.trailing_zeros() as usize;
        let units: Vec<(usize, usize)> = if steps == 1 {
            vec![(3, stem / 2), (stem / 2, stem)]
        } else {
            let first = stem >> (steps - 1);
            std::iter::once((3, first))
                .chain((1..steps).map(|i| (first << (i - 1), first << i)))
                .collect()
        };
        total += units.iter().map(|&(i, o)| conv(i, o, 3, false) + bn(o)).sum::<usize>();
    } else {
        total += conv(3, stem, cfg.stem_stride, true);
    }
    let mut prev = cfg.stem_channels;
    for (i, st) in cfg.stages.iter().enumerate() {
        let c = st.channels;
        if i > 0 {
            total += if cfg.use_glace { conv(prev, c, 3, false) + bn(c) } else { conv(prev, c, 2, true) };
        }
        for &k in &st.kernel_sizes {
            total += if k >= 7 {
                let branches: &[usize] = match k {
                    7 => &[5, 3, 3],
                    9 => &[5, 3, 3, 3],
                    13 => &[5, 7, 3, 3, 3],
                    _ => unreachable!("spreadsheet covers 7, 9 and 13"),
                };
                c * k * k + bn(c) + branches.iter().map(|&b| c * b * b + bn(c)).sum::<usize>()
            } else {
                conv(1, c, k, true)
            };
            total += bn(c);
            let h = (c / 4).max(1);
            total += c * h + h + h * c + c;
            total += if cfg.use_gconv {
                2 * conv(c, 4 * c, 1, true) + conv(4 * c, c, 1, true)
            } else {
                conv(c, 4 * c, 1, true) + conv(4 * c, c, 1, true)
            };
        }
        if i > 0 && cfg.use_dysample {
            let s = 1 << i;
            total += conv(c, 2 * s * s, 1, true);
        }
        prev = c;
    }
    let d = cfg.decoder_channels;
    let concat: usize = cfg.stages.iter().map(|s| s.channels).sum();
    total += conv(concat, d, 1, true);
    total += 2 * (conv(d, d, 4, false) + bn(d));
    total += conv(d, cfg.joints, 1, true);
    total
}

fn all_switches() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for bits in 0..8u8 {
        let mut cfg = ModelConfig::toy();
        cfg.use_gconv = bits & 1 != 0;
        cfg.use_glace = bits & 2 != 0;
        cfg.use_dysample = bits & 4 != 0;
        out.push(cfg);
    }
    out
}

#[test]
fn toy_count_matches_spreadsheet() {
    let cfg = ModelConfig::toy();
    let model = GatedUniPoseModel::<f32>::build(&cfg).unwrap();
    assert_eq!(count_parameters(model.parameters()), spreadsheet(&cfg));
    assert_eq!(spreadsheet(&cfg), 564_285);
    let breakdown: usize = model.parameter_breakdown().iter().map(|(_, n)| n).sum();
    assert_eq!(breakdown, 564_285);
}

#[test]
fn every_switch_combination_matches_spreadsheet() {
    for cfg in all_switches() {
        let model = GatedUniPoseModel::<f32>::build(&cfg).unwrap();
        assert_eq!(count_parameters(model.parameters()), spreadsheet(&cfg), "{cfg:?}");
    }
}

#[test]
fn full_size_count_matches_spreadsheet() {
    let cfg = ModelConfig::full();
    assert_eq!(spreadsheet(&cfg), 51_801_401);
}

fn registry(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let model = GatedUniPoseModel::<f32>::build(cfg).unwrap();
    model
        .parameters()
        .into_iter()
        .map(|p| (p.name().to_string(), p.shape().to_vec()))
        .collect()
}

/// Names whose presence or shape differs between two registries.
fn changed(a: &BTreeMap<String, Vec<usize>>, b: &BTreeMap<String, Vec<usize>>) -> Vec<String> {
    let mut names: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| a.get(n) != b.get(n)).collect()
}

#[test]
fn each_switch_touches_only_its_subtree() {
    let base = ModelConfig::toy();
    let reference = registry(&base);
    type Rule = fn(&str) -> bool;
    type Toggle = fn(&mut ModelConfig);
    let cases: [(&str, Toggle, Rule); 3] = [
        ("use_gconv", |c| c.use_gconv = false, |n| n.contains(".ffn.")),
        (
            "use_glace",
            |c| c.use_glace = false,
            |n| n.starts_with("stem.") || n.contains(".downsample."),
        ),
        ("use_dysample", |c| c.use_dysample = false, |n| n.starts_with("head.upsample.")),
    ];
    for (name, toggle, inside) in cases {
        let mut cfg = base.clone();
        toggle(&mut cfg);
        let diff = changed(&reference, &registry(&cfg));
        assert!(!diff.is_empty(), "{name} changed nothing");
        for n in &diff {
            assert!(inside(n), "{name} touched {n}");
        }
    }
    // the gated FFN swaps its gate/value pair for a single expansion
    let mut cfg = base.clone();
    cfg.use_gconv = false;
    let plain = registry(&cfg);
    assert!(plain.contains_key("stages.0.blocks.0.ffn.expand.weight"));
    assert!(reference.contains_key("stages.0.blocks.0.ffn.gconv.gate.weight"));
    assert!(!plain.keys().any(|k| k.contains("gconv")));
}

#[test]
fn four_switch_matrix_builds_and_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Var::constant(Tensor::<f32>::uniform(&[1, 3, 256, 192], 0.0, 1.0, &mut rng).unwrap());
    for cfg in all_switches() {
        let model = GatedUniPoseModel::<f32>::build(&cfg).unwrap();
        let y = model.forward(&mut Tape::inference(), &x).unwrap();
        assert_eq!(y.shape(), &[1, 17, 64, 48]);
        assert!(y.value().data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn deploy_preserves_outputs() {
    let cfg = ModelConfig::toy();
    let gap32 = model_deploy_gap::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(1), 10).unwrap();
    assert!(gap32 <= 1e-4, "{gap32:e}");
    let gap64 = model_deploy_gap::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(1), 10).unwrap();
    assert!(gap64 <= 1e-8, "{gap64:e}");
}

#[test]
fn deploy_requires_eval_mode() {
    let mut model = GatedUniPoseModel::<f32>::build(&ModelConfig::toy()).unwrap();
    model.set_mode(gatedunipose::Mode::Train);
    assert!(matches!(model.switch_to_deploy(), Err(Error::State(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = GatedUniPoseModel::<f32>::build(&ModelConfig::toy()).unwrap();
    gatedunipose::verify::gradcheck::jitter_parameters(&mut model, 0.05, &mut ChaCha8Rng::seed_from_u64(2));
    let aux = vec![("aux.note".to_string(), Tensor::<f32>::scalar(3.5))];
    let bytes = encode(&model, &aux).unwrap();
    let (back, aux_back) = decode::<f32>(&bytes).unwrap();
    assert_eq!(aux_back, aux);
    assert_eq!(back.config(), model.config());
    for (a, b) in model.parameters().iter().zip(back.parameters()) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.tensor().data(), b.tensor().data());
    }
    assert_eq!(encode(&back, &aux_back).unwrap(), bytes);

    let mut deployed = model.clone();
    deployed.switch_to_deploy().unwrap();
    let (dback, _) = decode::<f32>(&encode(&deployed, &[]).unwrap()).unwrap();
    assert!(dback.is_deployed());
    let x = Var::constant(Tensor::<f32>::uniform(&[1, 3, 256, 192], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    let a = deployed.forward(&mut Tape::inference(), &x).unwrap();
    let b = dback.forward(&mut Tape::inference(), &x).unwrap();
    assert_eq!(a.value(), b.value());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = GatedUniPoseModel::<f32>::build(&ModelConfig::toy()).unwrap();
    let bytes = encode(&model, &[]).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode::<f32>(&bad_magic), Err(Error::Format(_))));
    assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode::<f32>(&trailing), Err(Error::Format(_))));
}

#[test]
fn full_size_stem_shape() {
    let model = GatedUniPoseModel::<f32>::build(&ModelConfig::full()).unwrap();
    let x = Var::constant(Tensor::<f32>::zeros(&[1, 3, 256, 192]).unwrap());
    let stem = model.stem_forward(&mut Tape::inference(), &x).unwrap();
    assert_eq!(stem.shape(), &[1, 768, 128, 96]);
}

#[test]
fn wrong_input_shape_is_a_shape_error() {
    let model = GatedUniPoseModel::<f32>::build(&ModelConfig::toy()).unwrap();
    let x = Var::constant(Tensor::<f32>::zeros(&[1, 3, 128, 96]).unwrap());
    assert!(matches!(model.forward(&mut Tape::inference(), &x), Err(Error::Shape { .. })));
}
