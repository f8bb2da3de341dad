use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::*;

fn random_input<T: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect())
}

fn tiny(variant: Variant, ds: bool) -> ModelConfig {
    ModelConfig {
        variant,
        deep_supervision: ds,
        ..ModelConfig::tiny(3, vec![4, 8, 16])
    }
}

#[test]
fn tiny_model_output_shapes() {
    for variant in [Variant::Base, Variant::Residual, Variant::Attention] {
        let m: Model<f32> = build_model(&tiny(variant, true), 1).unwrap();
        let out = m.forward(&random_input(vec![2, 5, 16, 16, 16], 2)).unwrap();
        assert_eq!(out.main.shape(), &[2, 3, 16, 16, 16]);
        assert_eq!(out.ds.len(), 2);
        assert_eq!(out.ds[0].shape(), &[2, 3, 8, 8, 8]);
        assert_eq!(out.ds[1].shape(), &[2, 3, 4, 4, 4]);
    }
}

#[test]
fn stride_one_first_level_keeps_full_resolution() {
    let cfg = ModelConfig {
        first_level_stride_one: true,
        deep_supervision: true,
        ..ModelConfig::tiny(4, vec![4, 8, 8, 8])
    };
    assert_eq!(cfg.divisor(), 8);
    let m: Model<f32> = build_model(&cfg, 1).unwrap();
    let out = m.forward(&random_input(vec![1, 5, 8, 8, 8], 2)).unwrap();
    assert_eq!(out.main.shape(), &[1, 3, 8, 8, 8]);
    assert_eq!(out.ds[1].shape(), &[1, 3, 2, 2, 2]);
}

#[test]
fn rejects_bad_configs_and_inputs() {
    let mut cfg = tiny(Variant::Base, false);
    cfg.channels.pop();
    assert!(Model::<f32>::new(&cfg).is_err());
    let cfg = ModelConfig {
        ds_heads: 3,
        ..tiny(Variant::Base, true)
    };
    assert!(Model::<f32>::new(&cfg).is_err());
    let m: Model<f32> = build_model(&tiny(Variant::Base, false), 0).unwrap();
    assert!(m.forward(&Tensor::zeros(vec![1, 5, 12, 16, 16])).is_err());
    assert!(m.forward(&Tensor::zeros(vec![1, 4, 16, 16, 16])).is_err());
}

#[test]
fn parameter_count_matches_per_layer_arithmetic() {
    let cfg = ModelConfig {
        in_channels: 5,
        ..ModelConfig::tiny(2, vec![4, 8])
    };
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k * k + cout;
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + conv(cout, cout, 3) + 4 * cout;
    let expected = block(5, 4)
        + block(4, 8)
        // decoder at 1/2: up 8->4, concat enc0 (4)
        + (8 * 4 * 8 + 4) + block(8, 4)
        // decoder at full: up 4->4, concat input (5)
        + (4 * 4 * 8 + 4) + block(9, 4)
        + conv(4, 3, 1);
    assert_eq!(Model::<f32>::new(&cfg).unwrap().count_parameters(), expected);
}

#[test]
fn best_config_has_more_parameters_than_baseline() {
    let base = Model::<f32>::new(&ModelConfig::baseline()).unwrap().count_parameters();
    let best = Model::<f32>::new(&ModelConfig::best()).unwrap().count_parameters();
    assert!(best > base, "{best} <= {base}");
}

#[test]
fn eval_forward_is_bit_identical() {
    let m: Model<f32> = build_model(&tiny(Variant::Attention, true), 3).unwrap();
    let x = random_input(vec![1, 5, 16, 16, 16], 4);
    let a = m.forward(&x).unwrap().main.into_value();
    let b = m.forward(&x).unwrap().main.into_value();
    assert_eq!(a.data(), b.data());
}

#[test]
fn zero_input_gives_constant_logits_per_channel() {
    let m: Model<f64> = build_model(&tiny(Variant::Base, false), 5).unwrap();
    let out = m.forward(&Tensor::zeros(vec![1, 5, 16, 16, 16])).unwrap().main.into_value();
    for c in 0..3 {
        let v = out.volume(c);
        assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-12));
    }
}

#[test]
fn residual_with_zero_branch_weights_matches_base() {
    let base: Model<f64> = build_model(&tiny(Variant::Base, false), 6).unwrap();
    let mut res: Model<f64> = build_model(&tiny(Variant::Residual, false), 7).unwrap();
    for e in res.params_mut().entries_mut() {
        match base.params().find(&e.name) {
            Some(id) => e.value = base.params().get(id).clone(),
            None => e.value.data_mut().fill(0.0),
        }
    }
    let x = random_input(vec![1, 5, 16, 16, 16], 8);
    let a = base.forward(&x).unwrap().main.into_value();
    let b = res.forward(&x).unwrap().main.into_value();
    assert_eq!(a.max_abs_diff(&b), 0.0);
}

#[test]
fn attention_coefficients_lie_in_unit_interval_and_saturate_to_identity() {
    let mut store = ParamStore::<f64>::new();
    let gate = AttentionGate::new(&mut store, "g", 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for e in store.entries_mut() {
        for v in e.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let skip = Var::constant(random_input(vec![1, 4, 8, 8, 8], 10));
    let g = Var::constant(random_input(vec![1, 8, 4, 4, 4], 11));
    let ctx = Ctx::new(store.vars(false), 0.01);
    let alpha = gate.coefficients(&ctx, &skip, &g);
    assert_eq!(alpha.shape(), &[1, 1, 8, 8, 8]);
    assert!(alpha.value().data().iter().all(|a| *a > 0.0 && *a < 1.0));

    // force alpha to 1 through the psi bias
    let psi_w = gate.psi.weight;
    store.get_mut(psi_w).data_mut().fill(0.0);
    store.get_mut(gate.psi.bias).data_mut().fill(50.0);
    let ctx = Ctx::new(store.vars(false), 0.01);
    let out = gate.forward(&ctx, &skip, &g);
    assert_eq!(out.value().max_abs_diff(skip.value()), 0.0);
}

#[test]
fn attention_gate_parameter_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let gate = AttentionGate::new(&mut store, "g", 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for e in store.entries_mut() {
        for v in e.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let skip = Var::constant(random_input(vec![1, 3, 8, 8, 8], 13));
    let g = Var::constant(random_input(vec![1, 4, 4, 4, 4], 14));
    let probe = random_input::<f64>(vec![1, 3, 8, 8, 8], 15);
    let loss = |store: &ParamStore<f64>, trainable: bool| {
        let ctx = Ctx::new(store.vars(trainable), 0.01);
        let out = gate.forward(&ctx, &skip, &g);
        let l = ag::sum_all(&ag::mul_const(&out, probe.clone()));
        (l, ctx)
    };
    let (l, ctx) = loss(&store, true);
    let grads = ctx.params.gradients(&l.backward());
    let eps = 1e-6;
    for (pi, grad) in grads.iter().enumerate() {
        for i in 0..grad.numel() {
            let mut plus = store.clone();
            plus.entries_mut()[pi].value.data_mut()[i] += eps;
            let mut minus = store.clone();
            minus.entries_mut()[pi].value.data_mut()[i] -= eps;
            let fd = (loss(&plus, false).0.item() - loss(&minus, false).0.item()) / (2.0 * eps);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-5 || (fd - an).abs() < 1e-9, "param {pi}[{i}]: fd {fd} vs {an}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m: Model<f32> = build_model(&tiny(Variant::Attention, true), 16).unwrap();
    save_checkpoint(&m, 42, 3, 0.75, &path).unwrap();
    let (back, header) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(header.step, 42);
    assert_eq!(header.epoch, 3);
    assert_eq!(header.val_dice, 0.75);
    assert_eq!(back.config(), m.config());
    for (a, b) in back.params().entries().iter().zip(m.params().entries()) {
        assert_eq!(a.value.data(), b.value.data());
    }
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn drop_block_only_changes_training_passes() {
    let cfg = ModelConfig {
        drop_block: Some(DropBlockConfig {
            block_size: 2,
            drop_prob: 0.3,
        }),
        ..tiny(Variant::Base, false)
    };
    let m: Model<f32> = build_model(&cfg, 17).unwrap();
    let x = random_input(vec![1, 5, 16, 16, 16], 18);
    let eval = m.forward(&x).unwrap().main.into_value();
    let ctx = m.train_ctx(1);
    let train = m.forward_ctx(&ctx, &Var::constant(x.clone())).unwrap().main.into_value();
    assert!(eval.max_abs_diff(&train) > 0.0);
}
