//! The finite-difference suite behind `grad-check`: every differentiable op
//! in isolation, then the stage-1 and stage-2 objectives end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::gradcheck::{
    check_gradients, choose_probes_per_tensor, GradCheckReport, GradCheckTolerance,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::pcem::PcemConfig;
use crate::phantom::Mask;
use crate::segnet::{Bound, NetConfig, SegNetwork};
use crate::trainer::{batch_loss_with_masks, predicted_masks, Batch, LossSpec, Member, Role};

type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("dims")
}

/// `sum(y * c)` with a fixed random `c`, so every output coordinate counts.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dims = g.dims(y).to_vec();
    let c = g.constant(random(&dims, &mut r));
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn all_probes(params: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect()
}

/// One report per differentiable op, probing every input coordinate.
pub fn op_checks(tol: &GradCheckTolerance) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = random(&[2, 6, 6], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let pos = Tensor::from_vec(&[2, 6, 6], x.data().iter().map(|v| v.abs() + 0.5).collect())?;
    let gamma = random(&[2], &mut rng);
    let beta = random(&[2], &mut rng);
    let v = random(&[5], &mut rng);
    let x7 = random(&[2, 7, 7], &mut rng);
    let sel: Vec<bool> = (0..36).map(|i| i % 3 != 0).collect();

    let cases: Vec<(&str, Vec<Tensor<f64>>, LossFn)> = vec![
        (
            "conv2d",
            vec![x.clone(), w.clone(), b],
            Box::new(|g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), 1, 1)?;
                readout(g, y, 1)
            }),
        ),
        (
            "conv2d_stride2",
            vec![x7, w],
            Box::new(|g, p| {
                let y = g.conv2d(p[0], p[1], None, 2, 1)?;
                readout(g, y, 2)
            }),
        ),
        (
            "relu",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.relu(p[0]);
                readout(g, y, 3)
            }),
        ),
        (
            "max_pool2",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.max_pool2(p[0])?;
                readout(g, y, 4)
            }),
        ),
        (
            "upsample2",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.upsample2(p[0])?;
                readout(g, y, 5)
            }),
        ),
        (
            "bilinear_down",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.bilinear_resize(p[0], 4, 3)?;
                readout(g, y, 6)
            }),
        ),
        (
            "bilinear_up",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.bilinear_resize(p[0], 9, 13)?;
                readout(g, y, 7)
            }),
        ),
        (
            "instance_norm",
            vec![x.clone(), gamma, beta],
            Box::new(|g, p| {
                let y = g.instance_norm(p[0], p[1], p[2])?;
                readout(g, y, 8)
            }),
        ),
        (
            "add_sub_mul_div",
            vec![x.clone(), pos.clone()],
            Box::new(|g, p| {
                let a = g.add(p[0], p[1])?;
                let s = g.sub(a, p[0])?;
                let m = g.mul(s, p[0])?;
                let d = g.div(m, p[1])?;
                readout(g, d, 9)
            }),
        ),
        (
            "scale_add_scalar",
            vec![x.clone()],
            Box::new(|g, p| {
                let s = g.scale(p[0], -1.7);
                let a = g.add_scalar(s, 0.3);
                readout(g, a, 10)
            }),
        ),
        (
            "concat",
            vec![x.clone(), pos.clone()],
            Box::new(|g, p| {
                let c = g.concat(&[p[0], p[1], p[0]])?;
                readout(g, c, 11)
            }),
        ),
        (
            "log_exp",
            vec![pos],
            Box::new(|g, p| {
                let l = g.log(p[0]);
                let e = g.exp(l);
                let l2 = g.log(e);
                readout(g, l2, 12)
            }),
        ),
        (
            "sum_mean",
            vec![x.clone()],
            Box::new(|g, p| {
                let s = g.sum(p[0]);
                let m = g.mean(p[0]);
                g.mul(s, m)
            }),
        ),
        (
            "sum_spatial",
            vec![x.clone()],
            Box::new(|g, p| {
                let s = g.sum_spatial(p[0]);
                readout(g, s, 13)
            }),
        ),
        (
            "dot",
            vec![v.clone(), v.clone()],
            Box::new(|g, p| {
                let e = g.exp(p[1]);
                g.dot(p[0], e)
            }),
        ),
        (
            "softmax",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.softmax_channel(p[0]);
                readout(g, y, 14)
            }),
        ),
        (
            "log_softmax",
            vec![x.clone()],
            Box::new(|g, p| {
                let y = g.log_softmax_channel(p[0]);
                readout(g, y, 15)
            }),
        ),
        (
            "masked_mean",
            vec![x],
            Box::new(move |g, p| {
                let y = g.masked_mean(p[0], &sel)?;
                readout(g, y, 16)
            }),
        ),
        (
            "l2_normalize",
            vec![v.clone()],
            Box::new(|g, p| {
                let y = g.l2_normalize(p[0]);
                readout(g, y, 17)
            }),
        ),
        (
            "logsumexp_index",
            vec![v],
            Box::new(|g, p| {
                let s = g.scale(p[0], 1.0 / 0.07);
                let l = g.logsumexp(s);
                let i = g.index(p[0], 2);
                g.sub(l, i)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| check_gradients(name, &params, &all_probes(&params), tol, f))
        .collect()
}

/// A `[1,16,16]` image and a mask with a rectangle of each organ class.
fn toy_member(role: Role, seed: u64) -> Member {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask::zeros(16, 16);
    for k in 1..=2u8 {
        let (y, x) = (r.random_range(0..10), r.random_range(0..10));
        for yy in y..y + 5 {
            for xx in x..x + 6 {
                mask.set(yy, xx, k);
            }
        }
    }
    let image = (0..256)
        .map(|i| 0.2 * mask.data()[i] as f32 + r.random_range(0.0..0.3))
        .collect();
    Member {
        role,
        id: format!("toy-{seed}"),
        image: Tensor::from_vec(&[1, 16, 16], image).expect("16x16"),
        target: mask,
    }
}

/// The small network the composite checks run on.
pub fn toy_network() -> Result<SegNetwork<f64>> {
    let cfg = NetConfig {
        in_channels: 1,
        num_outputs: 3,
        widths: vec![4, 6],
        embed_channels: 6,
        convs_per_block: 1,
        height: 16,
        width: 16,
    };
    SegNetwork::new(cfg, 5)
}

/// Stage-1 (exemplar + synthetic) and stage-2 (exemplar + pseudo-labelled)
/// objectives with the contrastive term, probing `per_tensor` coordinates
/// of every parameter tensor. Prototype masks are held at their values
/// under the unperturbed parameters.
pub fn composite_checks(
    tol: &GradCheckTolerance,
    per_tensor: usize,
) -> Result<Vec<GradCheckReport>> {
    let net = toy_network()?;
    let params = net.params().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probes = choose_probes_per_tensor(&params, per_tensor, &mut rng);
    let spec = LossSpec {
        lambda_s: 1.0,
        lambda_c: 1.0,
        lambda_u: 1.0,
        pcem: Some(PcemConfig::default()),
        seed: 3,
        step: 0,
    };
    let batches = [
        (
            "stage1_loss",
            Batch {
                members: vec![
                    toy_member(Role::Exemplar, 1),
                    toy_member(Role::Synthetic, 2),
                ],
            },
        ),
        (
            "stage2_loss",
            Batch {
                members: vec![toy_member(Role::Exemplar, 1), toy_member(Role::Pseudo, 3)],
            },
        ),
    ];
    batches
        .iter()
        .map(|(name, batch)| {
            let masks = predicted_masks(&net, batch)?;
            check_gradients(name, &params, &probes, tol, |g, vars| {
                let bound = Bound(vars.to_vec());
                Ok(batch_loss_with_masks(g, &net, &bound, batch, &spec, &masks)?.total)
            })
        })
        .collect()
}

/// Everything `grad-check` runs.
pub fn full_suite(tol: &GradCheckTolerance) -> Result<Vec<GradCheckReport>> {
    let mut out = op_checks(tol)?;
    out.extend(composite_checks(tol, 4)?);
    Ok(out)
}
