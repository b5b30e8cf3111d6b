//! Reverse-mode gradients against central finite differences for every
//! graph operation, loss and model block, over 20 seeds each. A failing
//! check panics with the block name, seed and relative error.

use super::{max_relative_error, numeric_gradient, values};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waitk::autodiff::{Graph, Var};
use waitk::boundary::BoundaryMlp;
use waitk::encoder::{fuse_graph, FusionMode};
use waitk::losses::{ctc_graph, hard_ce, if_loss, soft_kd, total_loss_graph, LossWeights};
use waitk::mask::{build_causal_mask, AttentionMask};
use waitk::model::{Model, ModelConfig, Segmentation, TrainExample, TrainOptions};
use waitk::params::{GradStore, ParamStore};
use waitk::transformer::{DecoderStack, Linear, TransformerStack};
use waitk::{Result, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

/// Reduces any output to a scalar with fixed random coefficients so every
/// output entry contributes.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let v = g.value(out);
    if v.is_scalar() {
        return Ok(out);
    }
    let shape = v.shape().to_vec();
    let r = Tensor::new(shape.clone(), values(seed ^ 0xABCD, v.numel(), 1.0))?;
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Checks gradients with respect to graph inputs of the given shapes.
fn check_inputs(name: &str, shapes: &[Vec<usize>], scale: f64, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    for seed in 0..SEEDS {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                Tensor::new(s.clone(), values(seed * 31 + i as u64, n, scale)).unwrap()
            })
            .collect();
        let eval = |xs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
            let out = build(&mut g, &vars).unwrap();
            let loss = project(&mut g, out, seed).unwrap();
            g.value(loss).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = project(&mut g, out, seed).unwrap();
        let grads = g.backward(loss, &mut GradStore::empty()).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; x.numel()]);
            let numeric = numeric_gradient(x.data(), STEP, |probe| {
                let mut xs = inputs.clone();
                xs[i] = Tensor::new(x.shape().to_vec(), probe.to_vec()).unwrap();
                eval(&xs)
            });
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < TOL, "{name}: input {i}, seed {seed}: relative error {err}");
        }
    }
}

/// Checks parameter gradients on up to `probes` random coordinates per
/// seed. `build` may use `seed` to vary its inputs.
fn check_params(
    name: &str,
    probes: usize,
    setup: impl Fn(u64) -> ParamStore,
    build: impl Fn(&mut Graph, u64) -> Result<Var>,
) {
    for seed in 0..SEEDS {
        let params = setup(seed);
        let loss_at = |p: &ParamStore| -> f64 {
            let mut g = Graph::with_params(p);
            let out = build(&mut g, seed).unwrap();
            let loss = project(&mut g, out, seed).unwrap();
            g.value(loss).item()
        };
        let mut store = GradStore::for_params(&params);
        {
            let mut g = Graph::with_params(&params);
            let out = build(&mut g, seed).unwrap();
            let loss = project(&mut g, out, seed).unwrap();
            g.backward(loss, &mut store).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for (id, t) in params.tensors().iter().enumerate() {
            for i in 0..t.numel() {
                coords.push((id, i));
            }
        }
        let picks: Vec<(usize, usize)> = if coords.len() <= probes {
            coords
        } else {
            (0..probes).map(|_| coords[rng.random_range(0..coords.len())]).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (id, i) in picks {
            analytic.push(store.grads()[id].data()[i]);
            let mut p = params.clone();
            let orig = p.tensors()[id].data()[i];
            p.tensors_mut()[id].data_mut()[i] = orig + STEP;
            let up = loss_at(&p);
            p.tensors_mut()[id].data_mut()[i] = orig - STEP;
            let down = loss_at(&p);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: seed {seed}: relative error {err}");
    }
}

fn m(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

pub fn elementwise_and_linear_ops() {
    check_inputs("matmul", &[m(3, 4), m(4, 2)], 1.0, |g, v| g.matmul(v[0], v[1]));
    check_inputs("add", &[m(2, 3), m(2, 3)], 1.0, |g, v| g.add(v[0], v[1]));
    check_inputs("sub", &[m(2, 3), m(2, 3)], 1.0, |g, v| g.sub(v[0], v[1]));
    check_inputs("mul", &[m(2, 3), m(2, 3)], 1.0, |g, v| g.mul(v[0], v[1]));
    check_inputs("add_bias", &[m(3, 4), vec![4]], 1.0, |g, v| g.add_bias(v[0], v[1]));
    check_inputs("linear", &[m(3, 4), m(4, 2), vec![2]], 1.0, |g, v| g.linear(v[0], v[1], v[2]));
    check_inputs("scale", &[m(2, 2)], 1.0, |g, v| Ok(g.scale(v[0], -1.7)));
    check_inputs("add_scalar", &[m(2, 2)], 1.0, |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check_inputs("sigmoid", &[m(3, 3)], 3.0, |g, v| Ok(g.sigmoid(v[0])));
    check_inputs("sum", &[m(3, 3)], 1.0, |g, v| Ok(g.sum(v[0])));
    check_inputs("concat", &[m(2, 3), m(2, 1)], 1.0, |g, v| g.concat_cols(&[v[0], v[1]]));
    check_inputs("gather", &[m(5, 3)], 1.0, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
}

pub fn relu() {
    // Uniform inputs land within one probe step of the kink with
    // probability ~1e-5 per entry; the seeds used here do not.
    check_inputs("relu", &[m(3, 4)], 1.0, |g, v| Ok(g.relu(v[0])));
}

pub fn layer_norm() {
    check_inputs("layer_norm", &[m(3, 5), vec![5], vec![5]], 1.0, |g, v| g.layer_norm(v[0], v[1], v[2]));
}

pub fn masked_attention() {
    let masks = [
        build_causal_mask(4),
        AttentionMask::full(4, 4),
        AttentionMask::from_rows(&[
            vec![true, false, true, false],
            vec![true, true, false, false],
            vec![false, false, false, true],
            vec![true, true, true, true],
        ])
        .unwrap(),
    ];
    for (i, mask) in masks.iter().enumerate() {
        check_inputs(&format!("attention mask {i}"), &[m(4, 4), m(4, 4), m(4, 4)], 1.0, |g, v| {
            g.attention(v[0], v[1], v[2], mask, 2)
        });
    }
}

pub fn integrate_and_fire_alignment() {
    // Weights stay inside (0.2, 0.9) so small probes cannot move a firing
    // frame; H enters through the alignment product.
    check_inputs("fire_align", &[m(7, 1), m(7, 3)], 1.0, |g, v| {
        let w = g.sigmoid(v[0]);
        let w = g.scale(w, 0.7);
        let w = g.add_scalar(w, 0.2);
        let (a, _) = g.fire_align(w, 1.0, Some(0.5))?;
        g.matmul(a, v[1])
    });
    check_inputs("rescale_to_sum", &[m(6, 1)], 1.0, |g, v| {
        let w = g.sigmoid(v[0]);
        g.rescale_to_sum(w, 3.0)
    });
}

pub fn losses() {
    check_inputs("ctc", &[m(6, 4)], 2.0, |g, v| ctc_graph(g, v[0], &[0, 2, 2], 3, true));
    check_inputs("hard_ce", &[m(4, 5)], 2.0, |g, v| hard_ce(g, v[0], &[Some(1), None, Some(4), Some(0)]));
    let teacher = Tensor::new(vec![3, 5], values(5, 15, 2.0)).unwrap();
    check_inputs("soft_kd", &[m(3, 5)], 2.0, |g, v| soft_kd(g, v[0], &teacher, 2.0));
    check_inputs("if_loss", &[m(3, 4), m(9, 1)], 1.0, |g, v| {
        let w = g.sigmoid(v[1]);
        if_loss(g, v[0], &[1, 3, 0], w, 3)
    });
    check_inputs("total", &[m(5, 3), m(3, 4)], 1.0, |g, v| {
        let c = ctc_graph(g, v[0], &[0, 1], 2, true)?;
        let h = hard_ce(g, v[1], &[Some(0), Some(3), Some(2)])?;
        Ok(total_loss_graph(g, [Some(c), None, None, Some(h)], &LossWeights::default())?.0)
    });
}

fn input_rows(seed: u64, n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], values(seed + 77, n * d, 1.0)).unwrap()
}

pub fn boundary_mlp() {
    let d = 6;
    let setup = |seed: u64| {
        let mut p = ParamStore::new();
        BoundaryMlp::init(&mut p, "bp", d, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    };
    check_params("boundary mlp params", 40, setup, |g, seed| {
        let mlp = BoundaryMlp {
            w1: 0,
            b1: 1,
            w2: 2,
            b2: 3,
        };
        let h = g.constant(input_rows(seed, 5, d));
        mlp.forward(g, h)
    });
    let params = setup(3);
    let mlp = BoundaryMlp {
        w1: 0,
        b1: 1,
        w2: 2,
        b2: 3,
    };
    for seed in 0..SEEDS {
        let h = input_rows(seed, 5, d);
        let f = |x: &[f64]| {
            let mut g = Graph::with_params(&params);
            let h = g.input(Tensor::new(vec![5, d], x.to_vec()).unwrap());
            let w = mlp.forward(&mut g, h).unwrap();
            let loss = project(&mut g, w, seed).unwrap();
            g.value(loss).item()
        };
        let mut g = Graph::with_params(&params);
        let hv = g.input(h.clone());
        let w = mlp.forward(&mut g, hv).unwrap();
        let loss = project(&mut g, w, seed).unwrap();
        let grads = g.backward(loss, &mut GradStore::for_params(&params)).unwrap();
        let err = max_relative_error(grads.wrt(hv).unwrap().data(), &numeric_gradient(h.data(), STEP, f));
        assert!(err < TOL, "boundary mlp input, seed {seed}: {err}");
    }
}

pub fn encoder_layer_and_heads() {
    let (d, heads) = (8, 2);
    let setup = |seed: u64| {
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TransformerStack::init(&mut p, "enc", d, heads, 12, 1, &mut rng).unwrap();
        Linear::init(&mut p, "head", d, 5, &mut rng);
        p
    };
    let structure = {
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = TransformerStack::init(&mut p, "enc", d, heads, 12, 1, &mut rng).unwrap();
        let head = Linear::init(&mut p, "head", d, 5, &mut rng);
        (stack, head)
    };
    check_params("encoder layer + head", 60, setup, |g, seed| {
        let x = g.constant(input_rows(seed, 5, d));
        let h = structure.0.encode_with_mask(g, x, &build_causal_mask(5), 0.0)?;
        structure.1.forward(g, h)
    });
    check_params("reencode + concat fusion", 40, |seed| {
        let mut p = setup(seed);
        Linear::init(&mut p, "fuse", 2 * d, d, &mut ChaCha8Rng::seed_from_u64(seed + 5));
        p
    }, |g, seed| {
        let mut p = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = TransformerStack::init(&mut p, "enc", d, heads, 12, 1, &mut rng).unwrap();
        Linear::init(&mut p, "head", d, 5, &mut rng);
        let fuse = Linear::init(&mut p, "fuse", 2 * d, d, &mut rng);
        let x = g.constant(input_rows(seed, 6, d));
        let first = stack.encode_with_mask(g, x, &build_causal_mask(6), 0.0)?;
        let b = waitk::boundary::BoundarySet::from_frames(&[2, 5], 1.0);
        let mask = waitk::mask::build_reencode_once_mask(&b, 6)?;
        let second = stack.encode_with_mask(g, x, &mask, 0.0)?;
        fuse_graph(g, first, second, FusionMode::ConcatProject, &fuse)
    });
}

pub fn decoder_with_cross_attention() {
    let (d, heads) = (8, 2);
    let build_stack = |p: &mut ParamStore, seed: u64| {
        DecoderStack::init(p, "dec", d, heads, 12, 2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    };
    let structure = build_stack(&mut ParamStore::new(), 0);
    let setup = |seed: u64| {
        let mut p = ParamStore::new();
        build_stack(&mut p, seed);
        p
    };
    check_params("decoder stack", 60, setup, |g, seed| {
        let x = g.constant(input_rows(seed, 3, d));
        let memory = g.constant(input_rows(seed + 1, 5, d));
        let mem = structure.project_memory(g, memory)?;
        let cross = AttentionMask::from_rows(&[
            vec![true, true, false, false, false],
            vec![true, true, true, true, false],
            vec![true; 5],
        ])?;
        structure.forward(g, x, &build_causal_mask(3), Some((&mem, &cross)), 0.0)
    });
}

fn tiny_config(segmentation: Segmentation, reencode: bool, fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ff_dim: 12,
        encoder_layers: 1,
        decoder_layers: 1,
        aux_layers: 1,
        segmentation,
        reencode,
        fusion,
        ..ModelConfig::desk(4, 3, 4)
    }
}

pub fn full_training_loss_end_to_end() {
    let configs = [
        tiny_config(Segmentation::Predictor, true, FusionMode::Add),
        tiny_config(Segmentation::Predictor, true, FusionMode::ConcatProject),
        tiny_config(Segmentation::Static { rate: 2.5 }, false, FusionMode::Add),
    ];
    for (ci, config) in configs.iter().enumerate() {
        let features = |seed: u64| Tensor::new(vec![7, 4], values(seed + 9, 28, 1.0)).unwrap();
        let teacher = |seed: u64| Tensor::new(vec![4, 7], values(seed + 19, 28, 2.0)).unwrap();
        let opts = TrainOptions {
            dropout_encoder: 0.0,
            dropout_decoder: 0.0,
            ..TrainOptions::default()
        };
        let model = Model::new(config.clone(), 0).unwrap();
        check_params(
            &format!("model config {ci}"),
            40,
            |seed| Model::new(config.clone(), seed).unwrap().params,
            |g, seed| {
                let f = features(seed);
                let t = teacher(seed);
                let ex = TrainExample {
                    features: &f,
                    gloss: &[0, 2, 1],
                    text: &[3, 1, 0],
                    teacher_logits: Some(&t),
                };
                Ok(model.forward_train(g, &ex, &opts)?.loss)
            },
        );
    }
}

/// Every check above, in order, with its name.
pub const ALL: [(&str, fn()); 10] = [
    ("elementwise_and_linear_ops", elementwise_and_linear_ops),
    ("relu", relu),
    ("layer_norm", layer_norm),
    ("masked_attention", masked_attention),
    ("integrate_and_fire_alignment", integrate_and_fire_alignment),
    ("losses", losses),
    ("boundary_mlp", boundary_mlp),
    ("encoder_layer_and_heads", encoder_layer_and_heads),
    ("decoder_with_cross_attention", decoder_with_cross_attention),
    ("full_training_loss_end_to_end", full_training_loss_end_to_end),
];
