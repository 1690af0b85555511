use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wdiff::nn::{midplanes, Forward};
use wdiff::unet::{InputBlock, Layout};
use wdiff::{Model, ModelConfig, Tensor, Variant};

/// Independent per-layer parameter formulas, summed by hand.
fn formula_count(cfg: &ModelConfig) -> usize {
    let c = cfg.base_channels;
    let emb = 4 * c;
    let (taps, spatfreq) = match cfg.variant {
        Variant::Sfunet | Variant::SpatialPlusFreqconv => (9, true),
        Variant::Full3d => (27, false),
        _ => (9, false),
    };
    let attn_per_site = match cfg.variant {
        Variant::Sfunet | Variant::SpatialPlusFreqattn => 2,
        _ => 1,
    };
    let io = if cfg.variant == Variant::Concat2d { 12 } else { 3 };
    let gn = |n: usize| 2 * n;
    let stage = |a: usize, b: usize| {
        if spatfreq {
            let m = midplanes(a, b, 3, 3);
            gn(a) + m * a * 9 + m + gn(m) + b * m * 3 + b
        } else {
            gn(a) + a * b * taps + b
        }
    };
    let res = |a: usize, b: usize| stage(a, b) + stage(b, b) + emb * b + b + if a != b { a * b + b } else { 0 };
    let attn = |n: usize| attn_per_site * (gn(n) + 3 * n * n + 3 * n + n * n + n);
    let res_sizes = cfg.resolutions();
    let attends = |l: usize| cfg.attention_resolutions.contains(&res_sizes[l]);

    let mut p = c * emb + emb + emb * emb + emb;
    p += io * c * taps + c;
    let mut chans = vec![c];
    let mut ch = c;
    let levels = cfg.channel_mult.len();
    for (l, &m) in cfg.channel_mult.iter().enumerate() {
        for _ in 0..cfg.num_res_blocks {
            p += res(ch, m * c);
            ch = m * c;
            if attends(l) {
                p += attn(ch);
            }
            chans.push(ch);
        }
        if l + 1 != levels {
            p += ch * ch * taps + ch;
            chans.push(ch);
        }
    }
    p += 2 * res(ch, ch) + attn(ch);
    for (l, &m) in cfg.channel_mult.iter().enumerate().rev() {
        for i in 0..=cfg.num_res_blocks {
            let s = chans.pop().unwrap();
            p += res(ch + s, m * c);
            ch = m * c;
            if attends(l) {
                p += attn(ch);
            }
            if l > 0 && i == cfg.num_res_blocks {
                p += ch * ch * taps + ch;
            }
        }
    }
    p + gn(ch) + ch * io * taps + io
}

#[test]
fn toy_counts_match_layer_formulas() {
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(v);
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.param_count(), formula_count(&cfg), "{v}");
        assert_eq!(cfg.param_count().unwrap(), model.param_count(), "{v}");
        let total: usize = model.param_breakdown(1).iter().map(|(_, n)| n).sum();
        assert_eq!(total, model.param_count());
    }
}

#[test]
fn large_config_counts_match_layer_formulas() {
    for v in Variant::ALL {
        let cfg = ModelConfig::res256(v, 128);
        assert_eq!(cfg.param_count().unwrap(), formula_count(&cfg), "{v}");
        let cfg = ModelConfig::cifar(v);
        assert_eq!(cfg.param_count().unwrap(), formula_count(&cfg), "{v}");
    }
}

#[test]
fn variant_lattice_is_ordered() {
    let configs = [ModelConfig::toy(Variant::Sfunet), ModelConfig::res256(Variant::Sfunet, 64)];
    for base in configs {
        let count = |v: Variant| ModelConfig { variant: v, ..base.clone() }.param_count().unwrap();
        let spatial = count(Variant::SpatialOnly);
        let freqconv = count(Variant::SpatialPlusFreqconv);
        let freqattn = count(Variant::SpatialPlusFreqattn);
        let full = count(Variant::Sfunet);
        assert!(spatial < freqconv && spatial < freqattn);
        assert!(freqconv < full && freqattn < full);
        assert!(full < count(Variant::Full3d));
    }
}

#[test]
fn every_spatfreq_stage_tracks_full_3d_parameters() {
    let cfg = ModelConfig::res256(Variant::Sfunet, 128);
    let specs = cfg.param_specs().unwrap();
    let mut checked = 0;
    for s in specs.iter().filter(|s| s.name.ends_with(".spatial.weight")) {
        let prefix = s.name.trim_end_matches("spatial.weight");
        let freq = specs.iter().find(|f| f.name == format!("{prefix}freq.weight")).unwrap();
        let (m, n_in) = (s.shape[0], s.shape[1]);
        let n_out = freq.shape[0];
        assert_eq!(freq.shape[1], m);
        let factored = m * n_in * 9 + n_out * m * 3;
        let full = n_in * n_out * 27;
        assert!(factored <= full);
        assert!(factored as f64 / full as f64 >= 0.99, "{}: {factored}/{full}", s.name);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn rebuild_gives_identical_name_table() {
    let cfg = ModelConfig::toy(Variant::Sfunet);
    let a = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let b = Model::<f32>::new(cfg.clone(), 2).unwrap();
    assert_eq!(a.params().names(), b.params().names());
    let specs: Vec<String> = cfg.param_specs().unwrap().into_iter().map(|s| s.name).collect();
    assert_eq!(specs, a.params().names());
    for name in a.params().names() {
        assert!(name.split('.').all(|part| !part.is_empty()), "{name}");
    }
}

#[test]
fn same_seed_same_params() {
    let cfg = ModelConfig::toy(Variant::Sfunet);
    let a = Model::<f32>::new(cfg.clone(), 9).unwrap();
    let b = Model::<f32>::new(cfg, 9).unwrap();
    assert_eq!(a.params(), b.params());
}

#[test]
fn skip_audit() {
    for v in Variant::ALL {
        let model = Model::<f32>::new(ModelConfig::toy(v), 0).unwrap();
        let net = model.net();
        let sources = net.input_blocks.len() + 1;
        assert_eq!(net.skips.len(), sources, "{v}");
        let expected: Vec<usize> = (0..sources).rev().collect();
        assert_eq!(net.skips, expected, "{v}: every encoder output consumed once, mirrored");
        let downs = net.input_blocks.iter().filter(|b| matches!(b, InputBlock::Down(_))).count();
        let ups = net.output_blocks.iter().filter(|b| b.up.is_some()).count();
        assert_eq!(downs, ups);
    }
}

#[test]
fn toy_forward_preserves_shape_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(v);
        let mut model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        // Perturb the zero-initialized output so the check is non-trivial.
        for t in model.params_mut().tensors_mut() {
            *t = Tensor::rand_uniform(t.shape(), -0.3, 0.3, &mut rng);
        }
        let shape = cfg.input_shape(2);
        let x = Tensor::<f32>::rand_uniform(&shape, -3.0, 3.0, &mut rng);
        let a = model.predict(&x, &[1, 50]).unwrap();
        let b = model.predict(&x, &[1, 50]).unwrap();
        assert_eq!(a.shape(), x.shape(), "{v}");
        assert!(a.is_finite(), "{v}");
        assert_eq!(a, b, "{v}");
    }
}

#[test]
fn wavelet_input_shape_contract() {
    let cfg = ModelConfig::toy(Variant::Sfunet);
    assert_eq!(cfg.input_shape(2), [2, 3, 4, 8, 8]);
    assert_eq!(ModelConfig::toy(Variant::Concat2d).input_shape(2), [2, 12, 8, 8]);
    assert_eq!(ModelConfig::toy(Variant::Pixel2d).input_shape(2), [2, 3, 16, 16]);
    assert_eq!(Variant::Concat2d.layout(), Layout::Concat);
    let model = Model::<f32>::new(cfg, 0).unwrap();
    let wrong = Tensor::<f32>::zeros(&[2, 3, 16, 16]);
    assert!(model.predict(&wrong, &[1, 2]).is_err());
    let x = Tensor::<f32>::zeros(&[2, 3, 4, 8, 8]);
    assert!(model.predict(&x, &[1]).is_err());
}

#[test]
fn fresh_model_predicts_zero() {
    let cfg = ModelConfig::toy(Variant::Sfunet);
    let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&cfg.input_shape(2), &mut rng);
    let y = model.predict(&x, &[3, 7]).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn probe_parameter_gradient_matches_finite_differences() {
    let mut cfg = ModelConfig::toy(Variant::Sfunet);
    cfg.base_channels = 8;
    cfg.image_size = 8;
    cfg.attention_resolutions = BTreeSet::from([2]);
    let mut model = Model::<f64>::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in model.params_mut().tensors_mut() {
        *t = Tensor::rand_uniform(t.shape(), -0.5, 0.5, &mut rng);
    }
    let x = Tensor::<f64>::randn(&cfg.input_shape(2), &mut rng);
    let ts = [4, 90];
    let loss_of = |m: &Model<f64>| {
        let y = m.predict(&x, &ts).unwrap();
        y.sum_sq() / y.numel() as f64
    };

    let mut f = Forward::train(model.params(), None);
    let xv = f.graph.constant(x.clone());
    let y = model.net().forward(&mut f, xv, &ts).unwrap();
    let sq = f.graph.mul(y, y).unwrap();
    let loss = f.graph.mean_all(sq);
    f.graph.backward(loss).unwrap();
    let grads = f.param_grads();

    let probes = ["conv_in.weight", "input.0.res.in.spatial.weight", "middle.0.attn1.qkv.weight", "out.conv.weight"];
    for name in probes {
        let id = model.params().id(name).unwrap_or_else(|| panic!("{name}"));
        let g = grads[id.index()].as_ref().unwrap();
        for k in [0, 7, 13] {
            let h = 1e-5;
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = g.data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "{name}[{k}]: fd {fd} vs {an}");
        }
    }
}
