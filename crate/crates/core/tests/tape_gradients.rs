//! Reverse-mode gradients of every tape operation against central
//! differences in 64-bit precision.

use lhgnn_core::model::{ForwardCtx, Lhgnn};
use lhgnn_core::tape::Gather;
use lhgnn_core::train::check_gradients;
use lhgnn_core::{ModelConfig, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = random(&shape, &mut ChaCha8Rng::seed_from_u64(99));
    let r = tape.constant(r)?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn max_error<F>(inputs: &[&[usize]], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, shape) in inputs.iter().enumerate() {
        store
            .insert(format!("p{i}"), random(shape, &mut rng), true)
            .unwrap();
    }
    let report = check_gradients(&store, |tape, s| {
        let vars = (0..inputs.len())
            .map(|i| tape.param(s, &format!("p{i}")))
            .collect::<Result<Vec<_>>>()?;
        let y = f(tape, &vars)?;
        if tape.shape(y).iter().product::<usize>() == 1 && tape.shape(y).len() <= 1 {
            Ok(y)
        } else {
            project(tape, y)
        }
    })
    .unwrap();
    report.max_rel_error
}

const TOL: f64 = 1e-6;

#[test]
fn elementwise_ops() {
    assert!(max_error(&[&[3, 4], &[3, 4]], 1, |t, v| t.add(v[0], v[1])) < TOL);
    assert!(max_error(&[&[3, 4], &[3, 4]], 2, |t, v| t.sub(v[0], v[1])) < TOL);
    assert!(max_error(&[&[3, 4], &[3, 4]], 3, |t, v| t.mul(v[0], v[1])) < TOL);
    assert!(max_error(&[&[5]], 4, |t, v| t.scale(v[0], -2.5)) < TOL);
    assert!(max_error(&[&[2, 6]], 5, |t, v| t.gelu(v[0])) < TOL);
}

#[test]
fn shape_ops() {
    assert!(max_error(&[&[2, 3, 4]], 6, |t, v| t.reshape(v[0], &[6, 4])) < TOL);
    assert!(max_error(&[&[2, 3], &[2, 5]], 7, |t, v| t.concat(&[v[0], v[1]])) < TOL);
    assert!(max_error(&[&[2, 3, 4, 5]], 8, |t, v| t.mean_spatial(v[0])) < TOL);
    assert!(max_error(&[&[4, 4]], 9, |t, v| t.sum(v[0])) < TOL);
}

#[test]
fn matmul_and_linear() {
    assert!(max_error(&[&[3, 4], &[4, 2]], 10, |t, v| t.matmul(v[0], v[1])) < TOL);
    assert!(
        max_error(&[&[2, 3, 4], &[4, 5], &[5]], 11, |t, v| t
            .linear(v[0], v[1], v[2]))
            < TOL
    );
}

#[test]
fn convolutions() {
    for stride in [1, 2] {
        let e = max_error(
            &[&[2, 5, 6, 3], &[3, 3, 3, 4], &[4]],
            12 + stride as u64,
            |t, v| t.conv2d(v[0], v[1], v[2], stride, 1, false),
        );
        assert!(e < TOL, "stride {stride}: {e:e}");
    }
    let e = max_error(&[&[2, 4, 4, 3], &[3, 3, 1, 3], &[3]], 15, |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1, true)
    });
    assert!(e < TOL, "depthwise: {e:e}");
}

#[test]
fn normalization_in_both_modes() {
    let e = max_error(&[&[2, 3, 3, 4], &[4], &[4]], 16, |t, v| {
        Ok(t.norm(v[0], v[1], v[2], None)?.0)
    });
    assert!(e < 1e-5, "batch statistics: {e:e}");
    let mean = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let var = Tensor::from_vec(&[4], vec![1.5, 0.5, 2.0, 1.0]).unwrap();
    let e = max_error(&[&[2, 3, 4], &[4], &[4]], 17, |t, v| {
        Ok(t.norm(v[0], v[1], v[2], Some((&mean, &var)))?.0)
    });
    assert!(e < TOL, "running statistics: {e:e}");
}

#[test]
fn max_relative_gather() {
    // well separated values keep every argmax away from a tie
    let idx = vec![vec![1, 2, 0, 2, 3, 1, 0, 3], vec![3, 2, 2, 0, 1, 0, 0, 1]];
    let e = max_error(&[&[2, 4, 3]], 18, |t, v| {
        let spread = t.scale(v[0], 10.0)?;
        t.max_relative(
            spread,
            Gather {
                indices: &idx,
                per_node: 2,
            },
        )
    });
    assert!(e < TOL, "{e:e}");
}

#[test]
fn losses() {
    let targets = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.0]).unwrap();
    let e = max_error(&[&[2, 3]], 19, |t, v| t.bce_with_logits(v[0], &targets));
    assert!(e < TOL, "bce: {e:e}");
    let soft = Tensor::from_vec(&[2, 3], vec![0.2, 0.8, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let e = max_error(&[&[2, 3]], 20, |t, v| t.softmax_cross_entropy(v[0], &soft));
    assert!(e < TOL, "softmax: {e:e}");
}

#[test]
fn conv_ffn_block_on_a_small_map() {
    let mut cfg = ModelConfig::tiny(3);
    cfg.channels[0] = 8;
    let model = Lhgnn::new(cfg).unwrap();
    let full = model.init_params::<f64>(21).unwrap();
    let prefix = "stages.0.blocks.0.ffn";
    let mut store = ParamStore::new();
    for (name, e) in full.iter().filter(|(n, _)| n.starts_with(prefix)) {
        store
            .insert(name, e.tensor.clone(), e.requires_grad)
            .unwrap();
    }
    let x = random(&[1, 4, 4, 8], &mut ChaCha8Rng::seed_from_u64(22));
    let report = check_gradients(&store, |tape, s| {
        let mut ctx = ForwardCtx::train();
        let xv = tape.constant(x.clone())?;
        let y = model.conv_ffn(tape, s, &mut ctx, prefix, xv)?;
        project(tape, y)
    })
    .unwrap();
    assert_eq!(report.params.len(), 8);
    assert!(report.max_rel_error < 1e-5, "{:e}", report.max_rel_error);
}
