//! Central finite-difference oracle for reverse-mode gradients.

use rand::Rng;
use saol::autodiff::{PadMode, Tape, Var};
use saol::config::RunConfig;
use saol::cutmix::downsample_mask;
use saol::losses::{loss_ce, loss_sd, loss_ss1, loss_ss2, LossConfig};
use saol::train::{build_objective, prepare_step};
use saol::Tensor;

use super::{away_from_zero, one_hot, random_distributions, random_model, rng, tiny_configs, uniform};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS: u64 = 30;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Builder<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> saol::Result<Var>;

/// Worst relative error over `inputs` between the tape's gradients and
/// central differences of `f`. Outputs are contracted with fixed random
/// weights so every component is exercised.
pub fn check(inputs: &[Tensor], seed: u64, f: Builder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let weights = uniform(tape.shape(out), -1.0, 1.0, &mut rng(seed ^ 0xabcdef));
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs).unwrap();
        t.value(o).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().data().to_vec();
        let mut xs = inputs.to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

pub const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "affine", "relu", "sigmoid", "log", "matmul", "concat", "sum", "mean", "reshape",
    "softmax_classes", "softmax_spatial", "conv_zero_pad", "conv_strided", "conv_replicate", "resize_up",
    "resize_down", "global_avg_pool", "loss_ce", "loss_ss1", "loss_ss2", "loss_sd",
];

/// Error of one randomized trial of the named primitive.
pub fn primitive_trial(name: &str, trial: u64) -> f64 {
    let r = &mut rng(trial * 7919 + name.len() as u64);
    let n = r.random_range(1..3usize);
    let c = r.random_range(1..4usize);
    let h = r.random_range(2..5usize);
    let w = r.random_range(2..5usize);
    let x4 = |r: &mut rand_chacha::ChaCha8Rng| uniform(&[n, c, h, w], -1.0, 1.0, r);
    match name {
        "add" => check(&[x4(r), uniform(&[1, c, 1, w], -1.0, 1.0, r)], trial, &|t, v| t.add(v[0], v[1])),
        "sub" => check(&[x4(r), uniform(&[n, 1, h, 1], -1.0, 1.0, r)], trial, &|t, v| t.sub(v[0], v[1])),
        "mul" => check(&[x4(r), uniform(&[n, c, 1, w], -1.0, 1.0, r)], trial, &|t, v| t.mul(v[0], v[1])),
        "affine" => {
            let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
            check(&[x4(r)], trial, &move |t, v| Ok(t.affine(v[0], a, b)))
        }
        "relu" => check(&[away_from_zero(&[n, c, h, w], 1e-3, 1.0, r)], trial, &|t, v| Ok(t.relu(v[0]))),
        "sigmoid" => check(&[uniform(&[n, c, h, w], -4.0, 4.0, r)], trial, &|t, v| Ok(t.sigmoid(v[0]))),
        "log" => check(&[uniform(&[n, c, h, w], 0.2, 3.0, r)], trial, &|t, v| Ok(t.log(v[0]))),
        "matmul" => {
            let k = r.random_range(1..5);
            check(
                &[uniform(&[h, k], -1.0, 1.0, r), uniform(&[k, w], -1.0, 1.0, r)],
                trial,
                &|t, v| t.matmul(v[0], v[1]),
            )
        }
        "concat" => check(
            &[x4(r), uniform(&[n, 2, h, w], -1.0, 1.0, r)],
            trial,
            &|t, v| t.concat(&[v[0], v[1]], 1),
        ),
        "sum" => check(&[x4(r)], trial, &|t, v| t.sum(v[0], &[1, 3], trial % 2 == 0)),
        "mean" => check(&[x4(r)], trial, &|t, v| t.mean(v[0], &[0, 2], trial % 2 == 1)),
        "reshape" => check(&[x4(r)], trial, &|t, v| {
            let s = t.shape(v[0]).to_vec();
            t.reshape(v[0], &[s[0] * s[1], s[2] * s[3]])
        }),
        "softmax_classes" => check(&[uniform(&[n, c + 1, h, w], -3.0, 3.0, r)], trial, &|t, v| t.softmax(v[0], &[1])),
        "softmax_spatial" => check(&[uniform(&[n, 1, h, w], -3.0, 3.0, r)], trial, &|t, v| t.softmax(v[0], &[2, 3])),
        "conv_zero_pad" | "conv_strided" | "conv_replicate" => {
            let k = if name == "conv_strided" { 1 + 2 * r.random_range(0..2usize) } else { 3 };
            let stride = if name == "conv_strided" { 2 } else { 1 };
            let mode = if name == "conv_replicate" { PadMode::Replicate } else { PadMode::Zeros };
            let co = r.random_range(1..4);
            let inputs = [
                uniform(&[n, c, h + 1, w + 1], -1.0, 1.0, r),
                uniform(&[co, c, k, k], -1.0, 1.0, r),
                uniform(&[co], -1.0, 1.0, r),
            ];
            check(&inputs, trial, &move |t, v| t.conv2d_padded(v[0], v[1], Some(v[2]), stride, k / 2, mode))
        }
        "resize_up" => {
            let (oh, ow) = (h + r.random_range(1..4), w + r.random_range(1..4));
            check(&[x4(r)], trial, &move |t, v| t.bilinear_resize(v[0], oh, ow))
        }
        "resize_down" => {
            let x = uniform(&[n, c, h + 4, w + 3], -1.0, 1.0, r);
            check(&[x], trial, &move |t, v| t.bilinear_resize(v[0], h, w))
        }
        "global_avg_pool" => check(&[x4(r)], trial, &|t, v| t.global_avg_pool(v[0])),
        "loss_ce" => {
            let labels = random_distributions(n + 1, c + 1, r);
            check(&[uniform(&[n + 1, c + 1], -2.0, 2.0, r)], trial, &move |t, v| {
                let p = t.softmax(v[0], &[1])?;
                let y = t.constant(labels.clone());
                loss_ce(t, p, y, 1e-12)
            })
        }
        "loss_ss1" => {
            let target = uniform(&[n, 1, h, w], 0.0, 1.0, r);
            check(&[uniform(&[n, 1, h, w], -3.0, 3.0, r)], trial, &move |t, v| {
                let p = t.sigmoid(v[0]);
                let m = t.constant(target.clone());
                loss_ss1(t, p, m, 1e-12)
            })
        }
        "loss_ss2" => {
            let k = c + 1;
            let source = uniform(&[n, k, h, w], -2.0, 2.0, r);
            let mask = uniform(&[n, 1, h * 2, w * 2], 0.0, 1.0, r);
            let mask = downsample_mask(&Tensor::from_fn(mask.shape().to_vec(), |i| mask.data()[i].round()), h, w).unwrap();
            check(&[uniform(&[n, k, h, w], -2.0, 2.0, r)], trial, &move |t, v| {
                let q = t.softmax(v[0], &[1])?;
                let s = t.constant(source.clone());
                let p = t.softmax(s, &[1])?;
                loss_ss2(t, q, p, &mask, 1e-12)
            })
        }
        "loss_sd" => {
            let k = c + 1;
            let teacher = random_distributions(n + 1, k, r);
            let labels = one_hot(&(0..n + 1).map(|i| i % k).collect::<Vec<_>>(), k);
            check(&[uniform(&[n + 1, k], -2.0, 2.0, r)], trial, &move |t, v| {
                let s = t.softmax(v[0], &[1])?;
                let te = t.constant(teacher.clone());
                let y = t.constant(labels.clone());
                loss_sd(t, te, s, y, 0.5, 1e-12)
            })
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Error of one randomized trial of the full training objective with all
/// four loss terms, differentiated with respect to every model parameter.
pub fn objective_trial(trial: u64) -> f64 {
    let k = 3;
    let n = 3;
    let loss = LossConfig::default();
    let cfg = RunConfig {
        cutmix_alpha: 1.0,
        ..RunConfig::default()
    };
    // Redraw until no relu input lies within a few steps of its kink.
    let (model, batch, tape, p, total, parts) = (0u64..)
        .find_map(|attempt| {
            let seed = trial * 1000 + attempt;
            let r = &mut rng(seed);
            let (bb, head) = tiny_configs(k);
            let model = random_model(bb, head, 0.5, seed);
            let x = uniform(&[n, 3, 8, 8], -1.0, 1.0, r);
            let y = one_hot(&(0..n).map(|i| (i + trial as usize) % k).collect::<Vec<_>>(), k);
            let batch = prepare_step(x, y, &cfg, r).unwrap();
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let (total, parts) = build_objective(&model, &loss, &mut tape, &p, &batch).unwrap();
            (tape.relu_margin().unwrap() > 100.0 * STEP).then_some((model, batch, tape, p, total, parts))
        })
        .unwrap();
    assert!(batch.cutmix.is_some());
    assert!(parts.ss1.is_some() && parts.ss2.is_some() && parts.sd.is_some());
    let mut grads = tape.backward(total).unwrap();
    let analytic: Vec<f64> = p
        .collect_grads(&model.params, &mut grads)
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();

    // Stop-gradient operands are constants of the objective: freeze the
    // teacher distribution and the patch-source logits at the base point.
    let c = batch.cutmix.as_ref().unwrap();
    let (frozen_teacher, frozen_source) = {
        let mut t = Tape::new();
        let p = model.params.bind(&mut t, false);
        let xv = t.constant(batch.input.clone());
        let out = model.forward(&mut t, &p, xv).unwrap();
        let xa = t.constant(c.source.clone());
        let ya = model.spatial_logits(&mut t, &p, xa).unwrap();
        (t.value(out.final_logits).clone(), t.value(ya).clone())
    };
    let (ho, wo) = model.head.output_size();
    let m = downsample_mask(&c.mask, ho, wo).unwrap();
    let eval = |m_: &saol::head::SaolModel| {
        let mut t = Tape::new();
        let p = m_.params.bind(&mut t, false);
        let xv = t.constant(batch.input.clone());
        let yv = t.constant(batch.labels.clone());
        let out = m_.forward(&mut t, &p, xv).unwrap();
        let sl = loss_ce(&mut t, out.final_logits, yv, 1e-12).unwrap();
        let mv = t.constant(m.clone());
        let ss1 = loss_ss1(&mut t, out.mask_pred, mv, 1e-12).unwrap();
        let ya = t.constant(frozen_source.clone());
        let ss2 = loss_ss2(&mut t, out.spatial_logits, ya, &m, 1e-12).unwrap();
        let te = t.constant(frozen_teacher.clone());
        let sd = loss_sd(&mut t, te, out.gapfc_logits, yv, 0.5, 1e-12).unwrap();
        [sl, ss1, ss2, sd].iter().map(|&v| t.value(v).item()).sum::<f64>()
    };
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for id in model.params.ids() {
        for j in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data()[j];
            probe.params.get_mut(id).data_mut()[j] = orig + STEP;
            let up = eval(&probe);
            probe.params.get_mut(id).data_mut()[j] = orig - STEP;
            let down = eval(&probe);
            probe.params.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}
