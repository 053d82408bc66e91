//! End-to-end acceptance gate. Runs ten criteria in order, prints one
//! pass/fail line per criterion, and fails the test if any criterion fails.
//!
//! Property criteria (1-6) are cheap; the experiment criteria (7-10) train a
//! teacher and several students on the default synthetic dataset at reduced
//! epoch counts sized for a small CPU budget.

use std::fmt::Write as _;
use std::time::Instant;

use qdnet::data::{generate_shapes_dataset, default_class_counts, Dataset};
use qdnet::distill::{kd_loss, kd_loss_grad_f64, KDConfig};
use qdnet::int8::{qconv2d, qmatmul, quantized_forward, QLayer, QuantizedTensor};
use qdnet::io;
use qdnet::nn::{
    build_student, build_teacher, cross_entropy, one_hot, softmax, BatchNormLayer, Conv2dLayer,
    DenseLayer, FusedConvLayer, Layer, Mode, Model, TrainConfig,
};
use qdnet::quant::{
    compute_qparams, dequantize, derive_requant_multiplier, fuse_layers, quantize, QuantParams,
};
use qdnet::tensor::{conv2d, matmul};
use qdnet::train::{
    evaluate_float, evaluate_quantized, quantized_distillation_train, train_float,
};
use qdnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// experiment configuration (criteria 7-10)
const TEACHER_EPOCHS: usize = 60;
const STUDENT_EPOCHS: usize = 45;
const QD_EPOCHS: usize = 12;
const SWEEP_EPOCHS: usize = 12;
const SEEDS: [u64; 3] = [0, 1, 2];
const NUM_CLASSES: usize = 10;
const KD_BETA: f64 = 0.9;
const KD_TEMPERATURE: f64 = 3.0;
const STUDENT_WIDTH: f32 = 0.5;

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_range(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    rng.gen_range(lo..hi)
}

type Crit = Result<String, String>;

fn fail(msg: impl Into<String>) -> Crit {
    Err(msg.into())
}

// ---------------------------------------------------------------- criterion 1

fn criterion1_quant_round_trip() -> Crit {
    let mut rng = seeded(101);
    let mut checked = 0usize;
    for _ in 0..100 {
        let lo = -rand_range(&mut rng, 0.01, 50.0);
        let hi = rand_range(&mut rng, 0.01, 50.0);
        let qp = compute_qparams(lo, hi).map_err(|e| e.to_string())?;
        if quantize(0.0, qp) != qp.zero_point {
            return fail(format!("zero does not map to Z for {qp:?}"));
        }
        if dequantize(qp.zero_point, qp) != 0.0 {
            return fail(format!("Z does not dequantize to zero for {qp:?}"));
        }
        let r_lo = (qp.scale * (0.0 - qp.zero_point as f64)) as f32;
        let r_hi = (qp.scale * (255.0 - qp.zero_point as f64)) as f32;
        for _ in 0..10_000 {
            let r = rand_range(&mut rng, r_lo, r_hi);
            let back = dequantize(quantize(r, qp), qp);
            // S/2 plus one f32 ulp of slack for the round trip arithmetic
            let tol = qp.scale / 2.0 + (r.abs() as f64) * f32::EPSILON as f64;
            if ((back - r).abs() as f64) > tol {
                return fail(format!("round trip error {} > S/2 for {qp:?}", back - r));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} round trips within S/2; zero exact at Z"))
}

// ---------------------------------------------------------------- criterion 2

fn criterion2_fixed_point_multiplier() -> Crit {
    let mut rng = seeded(202);
    for i in 0..100_000 {
        let s1 = 10f64.powf(rng.gen_range(-6.0..0.0));
        let s2 = 10f64.powf(rng.gen_range(-6.0..0.0));
        // s3 chosen above s1*s2 so M < 1 per the conversion contract
        let s3 = s1 * s2 * 10f64.powf(rng.gen_range(0.01..4.0));
        let m = s1 * s2 / s3;
        let rm = derive_requant_multiplier(s1, s2, s3)
            .map_err(|e| format!("triple {i}: {e}"))?;
        let m0 = rm.m0_fixed as f64 / (1u64 << 31) as f64;
        if !(0.5..1.0).contains(&m0) {
            return fail(format!("M0 {m0} outside [0.5, 1) for triple {i}"));
        }
        let rel = (rm.reconstruct() - m).abs() / m;
        if rel > 1e-6 {
            return fail(format!("reconstruction error {rel} > 1e-6 for triple {i}"));
        }
    }
    Ok("100000 triples reconstructed within 1e-6; M0 in [0.5, 1)".into())
}

// ---------------------------------------------------------------- criterion 3

fn random_qtensor(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> QuantizedTensor {
    let qp = compute_qparams(lo, hi).unwrap();
    let t = Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
    QuantizedTensor::from_float(&t, qp)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

fn clamp_to_range(t: &Tensor, qp: QuantParams) -> Tensor {
    let lo = (qp.scale * (0.0 - qp.zero_point as f64)) as f32;
    let hi = (qp.scale * (255.0 - qp.zero_point as f64)) as f32;
    t.map(|v| v.clamp(lo, hi))
}

fn criterion3_integer_kernel_oracle() -> Crit {
    let mut rng = seeded(303);
    let mut worst: f64 = 0.0;

    // 500 matmul cases
    for i in 0..500 {
        let (m, k, n) = (
            rng.gen_range(1..8usize),
            rng.gen_range(1..=64usize),
            rng.gen_range(1..8usize),
        );
        let qa = random_qtensor(vec![m, k], -1.0, 1.0, &mut rng);
        let qb = random_qtensor(vec![k, n], -1.0, 1.0, &mut rng);
        let fa = qa.dequantize();
        let fb = qb.dequantize();
        let reference = matmul(&fa, &fb).map_err(|e| e.to_string())?;
        let out_qp = compute_qparams(reference.min() - 0.1, reference.max() + 0.1)
            .map_err(|e| e.to_string())?;
        let rm = derive_requant_multiplier(qa.qp.scale, qb.qp.scale, out_qp.scale)
            .map_err(|e| e.to_string())?;
        let got = qmatmul(&qa, &qb, out_qp, rm).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(&got.dequantize(), &clamp_to_range(&reference, out_qp));
        worst = worst.max(diff / out_qp.scale);
        if diff > 1.5 * out_qp.scale {
            return fail(format!("qmatmul case {i}: error {diff} > 1.5*S3"));
        }
    }

    // 500 conv cases, inner K = ci*kh*kw kept small
    let mut thread_checked = false;
    for i in 0..500 {
        let k = *[1usize, 2, 3].get(rng.gen_range(0..3)).unwrap();
        let ci = rng.gen_range(1..=(64 / (k * k)).min(6));
        let co = rng.gen_range(1..5usize);
        let (stride, padding) = match k {
            2 => (2usize, 0usize),
            _ => (1, k / 2),
        };
        let h = if stride == 2 { 6 } else { rng.gen_range(4..8usize) };
        let qin = random_qtensor(vec![2, ci, h, h], -1.0, 1.0, &mut rng);
        let w_qp = compute_qparams(-0.8, 0.8).unwrap();
        let wt = Tensor::from_fn(vec![co, ci, k, k], |_| rng.gen_range(-0.8..0.8f32));
        let weight: Vec<u8> = wt.data().iter().map(|&r| quantize(r, w_qp)).collect();
        let w_deq = Tensor::new(
            wt.shape().to_vec(),
            weight.iter().map(|&q| dequantize(q, w_qp)).collect(),
        )
        .unwrap();
        let bias_real = Tensor::from_fn(vec![co], |_| rng.gen_range(-0.5..0.5f32));
        let bias_scale = qin.qp.scale * w_qp.scale;
        let bias_q: Vec<i32> = bias_real
            .data()
            .iter()
            .map(|&b| (b as f64 / bias_scale).round() as i32)
            .collect();
        let bias_deq = Tensor::new(
            vec![co],
            bias_q
                .iter()
                .map(|&b| (b as f64 * bias_scale) as f32)
                .collect(),
        )
        .unwrap();
        let reference = conv2d(&qin.dequantize(), &w_deq, &bias_deq, stride, padding)
            .map_err(|e| e.to_string())?;
        let out_qp = compute_qparams(reference.min() - 0.1, reference.max() + 0.1)
            .map_err(|e| e.to_string())?;
        let rm = derive_requant_multiplier(qin.qp.scale, w_qp.scale, out_qp.scale)
            .map_err(|e| e.to_string())?;
        let layer = QLayer::Conv {
            weight,
            weight_shape: wt.shape().to_vec(),
            bias: bias_q,
            in_qp: qin.qp,
            weight_qp: w_qp,
            out_qp,
            rm,
            stride,
            padding,
            depthwise: false,
            relu: false,
        };
        let got = qconv2d(&qin, &layer).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(&got.dequantize(), &clamp_to_range(&reference, out_qp));
        worst = worst.max(diff / out_qp.scale);
        if diff > 1.5 * out_qp.scale {
            return fail(format!("qconv case {i}: error {diff} > 1.5*S3"));
        }

        if !thread_checked {
            let one = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap()
                .install(|| qconv2d(&qin, &layer).unwrap());
            let four = rayon::ThreadPoolBuilder::new()
                .num_threads(4)
                .build()
                .unwrap()
                .install(|| qconv2d(&qin, &layer).unwrap());
            if one.data != four.data {
                return fail("qconv output differs between 1 and 4 threads");
            }
            thread_checked = true;
        }
    }
    Ok(format!(
        "1000 kernels within 1.5*S3 (worst {worst:.3}*S3); 1 vs 4 threads bit-identical"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn randomize_batchnorm(model: &mut Model, rng: &mut ChaCha8Rng) {
    for layer in &mut model.layers {
        if let Layer::BatchNorm(bn) = layer {
            let c = bn.gamma.numel();
            bn.gamma = Tensor::from_fn(vec![c], |_| rng.gen_range(0.5..1.5f32));
            bn.beta = Tensor::from_fn(vec![c], |_| rng.gen_range(-0.3..0.3f32));
            bn.running_mean = Tensor::from_fn(vec![c], |_| rng.gen_range(-0.5..0.5f32));
            bn.running_var = Tensor::from_fn(vec![c], |_| rng.gen_range(0.3..2.0f32));
        }
    }
}

fn criterion4_fusion_equivalence() -> Crit {
    let mut rng = seeded(404);
    for (name, mut model) in [
        ("teacher", build_teacher(6, 0.5, &mut rng).map_err(|e| e.to_string())?),
        (
            "student",
            build_student(6, 1.0, 0.5, &mut rng).map_err(|e| e.to_string())?,
        ),
    ] {
        randomize_batchnorm(&mut model, &mut rng);
        let fused = fuse_layers(&model).map_err(|e| e.to_string())?;
        for i in 0..50 {
            let x = Tensor::from_fn(vec![2, 1, 32, 32], |_| rng.gen_range(0.0..1.0f32));
            let a = model.forward_eval(&x).map_err(|e| e.to_string())?;
            let b = fused.forward_eval(&x).map_err(|e| e.to_string())?;
            let diff = max_abs_diff(&a, &b);
            if diff > 1e-5 {
                return fail(format!("{name} input {i}: fused differs by {diff}"));
            }
        }
    }
    Ok("fused == unfused within 1e-5 on 100 random inputs".into())
}

// ---------------------------------------------------------------- criterion 5

const FD_H: f32 = 1.0 / 1024.0;

fn probe_loss(out: &Tensor, lw: &[f32]) -> f64 {
    out.data()
        .iter()
        .zip(lw)
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

fn layer_fd_check(mut layer: Layer, input: Tensor, name: &str) -> Result<(), String> {
    let mut rng = seeded(99);
    let (out, cache) = layer
        .forward(&input, Mode::Train, &mut rng)
        .map_err(|e| e.to_string())?;
    let mut lw_rng = seeded(4242);
    let lw: Vec<f32> = (0..out.numel()).map(|_| lw_rng.gen_range(-1.0..1.0)).collect();
    let grad_out = Tensor::new(out.shape().to_vec(), lw.clone()).unwrap();
    let (grad_in, _) = layer.backward(&cache, &grad_out).map_err(|e| e.to_string())?;
    let mut x = input.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let eval = |x: &Tensor, layer: &mut Layer| -> f64 {
            let mut r = seeded(99);
            let (o, _) = layer.forward(x, Mode::Train, &mut r).unwrap();
            probe_loss(&o, &lw)
        };
        x.data_mut()[i] = orig + FD_H;
        let plus = eval(&x, &mut layer);
        x.data_mut()[i] = orig - FD_H;
        let minus = eval(&x, &mut layer);
        x.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_H as f64);
        let a = grad_in.data()[i] as f64;
        let denom = a.abs().max(fd.abs()).max(1.0);
        if (a - fd).abs() / denom > 1e-3 {
            return Err(format!("{name} input[{i}]: analytic {a} vs fd {fd}"));
        }
    }
    Ok(())
}

/// Values bounded away from zero so ReLU kinks cannot straddle the FD step.
fn safe_rand(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.05..1.0f32);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn criterion5_gradient_checks() -> Crit {
    let mut rng = seeded(505);
    let conv = |co: usize, ci: usize, k: usize, s: usize, p: usize, dw: bool,
                rng: &mut ChaCha8Rng| Conv2dLayer {
        weight: safe_rand(vec![co, if dw { 1 } else { ci }, k, k], rng),
        bias: safe_rand(vec![co], rng),
        stride: s,
        padding: p,
        depthwise: dw,
    };
    let cases: Vec<(&str, Layer, Tensor)> = vec![
        (
            "conv s1 p1",
            Layer::Conv(conv(3, 2, 3, 1, 1, false, &mut rng)),
            safe_rand(vec![2, 2, 6, 6], &mut rng),
        ),
        (
            "conv s2 p0",
            Layer::Conv(conv(3, 2, 2, 2, 0, false, &mut rng)),
            safe_rand(vec![2, 2, 6, 6], &mut rng),
        ),
        (
            "depthwise",
            Layer::Conv(conv(3, 3, 3, 1, 1, true, &mut rng)),
            safe_rand(vec![2, 3, 5, 5], &mut rng),
        ),
        (
            "batchnorm",
            Layer::BatchNorm(BatchNormLayer::new(3)),
            safe_rand(vec![4, 3, 4, 4], &mut rng),
        ),
        (
            "dense",
            Layer::Dense(DenseLayer {
                weight: safe_rand(vec![4, 6], &mut rng),
                bias: safe_rand(vec![4], &mut rng),
            }),
            safe_rand(vec![3, 6], &mut rng),
        ),
        (
            "fused conv relu",
            Layer::FusedConv(FusedConvLayer {
                conv: conv(3, 2, 3, 1, 1, false, &mut rng),
                relu: true,
            }),
            safe_rand(vec![2, 2, 5, 5], &mut rng),
        ),
        ("relu", Layer::Relu, safe_rand(vec![2, 3, 4, 4], &mut rng)),
        ("gap", Layer::GlobalAvgPool, safe_rand(vec![2, 4, 3, 3], &mut rng)),
        (
            "dropout",
            Layer::Dropout { p: 0.3 },
            safe_rand(vec![3, 8], &mut rng),
        ),
    ];
    for (name, layer, input) in cases {
        layer_fd_check(layer, input, name)?;
    }

    // KD loss gradient in f64
    let teacher = safe_rand(vec![4, 6], &mut rng);
    let mut student = safe_rand(vec![4, 6], &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
    let kd = KDConfig::new(0.85, 4.0).map_err(|e| e.to_string())?;
    let grad = kd_loss_grad_f64(&teacher, &student, &labels, &kd).map_err(|e| e.to_string())?;
    for i in 0..student.numel() {
        let orig = student.data()[i];
        student.data_mut()[i] = orig + FD_H;
        let plus = kd_loss(&teacher, &student, &labels, &kd).unwrap();
        student.data_mut()[i] = orig - FD_H;
        let minus = kd_loss(&teacher, &student, &labels, &kd).unwrap();
        student.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_H as f64);
        let denom = grad[i].abs().max(fd.abs()).max(1.0);
        if (grad[i] - fd).abs() / denom > 1e-5 {
            return fail(format!("kd grad[{i}]: analytic {} vs fd {fd}", grad[i]));
        }
    }
    Ok("9 layer backwards within 1e-3 of FD; KD gradient within 1e-5".into())
}

// ---------------------------------------------------------------- criterion 6

fn criterion6_kd_reductions() -> Crit {
    let mut rng = seeded(606);
    let logits = Tensor::from_fn(vec![5, 7], |_| rng.gen_range(-3.0..3.0f32));
    let teacher = Tensor::from_fn(vec![5, 7], |_| rng.gen_range(-3.0..3.0f32));
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..7)).collect();

    // beta = 0 reduces to plain cross entropy on the student softmax
    let kd0 = KDConfig::hard_only();
    let kd_val = kd_loss(&teacher, &logits, &labels, &kd0).map_err(|e| e.to_string())?;
    let probs = softmax(&logits).map_err(|e| e.to_string())?;
    let targets = one_hot(&labels, 7).map_err(|e| e.to_string())?;
    let ce = cross_entropy(&targets, &probs).map_err(|e| e.to_string())?;
    if (kd_val - ce).abs() > 1e-9 {
        return fail(format!("beta=0 KD {kd_val} != CE {ce}"));
    }

    // z_t = z_s, beta = 1 (alpha = 0), T = 1: the loss is the entropy of the
    // teacher distribution; uniform binary logits give ln 2
    let uniform = Tensor::zeros(vec![3, 2]);
    let kd1 = KDConfig::new(1.0, 1.0).map_err(|e| e.to_string())?;
    let h = kd_loss(&uniform, &uniform, &[0, 1, 0], &kd1).map_err(|e| e.to_string())?;
    let ln2 = std::f64::consts::LN_2;
    if (h - ln2).abs() > 1e-12 {
        return fail(format!("uniform binary entropy {h} != ln 2"));
    }
    Ok("beta=0 == CE; self-distillation entropy == ln 2".into())
}

// ------------------------------------------------------- criteria 7 to 10

struct Experiment {
    dataset: Dataset,
    teacher: Model,
    teacher_acc: f64,
    plain: Vec<Model>,
    kd: Vec<Model>,
    plain_acc: Vec<f64>,
    kd_acc: Vec<f64>,
    qd_acc: Vec<f64>,
    ptq_acc: Vec<f64>,
    float_bytes: usize,
    quant_bytes: usize,
    float_model_path: std::path::PathBuf,
    quant_model_path: std::path::PathBuf,
}

fn train_cfg(epochs: usize, lr: f32, freeze: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        momentum: 0.9,
        weight_decay: 1e-4,
        milestones: vec![epochs * 6 / 10, epochs * 8 / 10],
        lr_gamma: 0.2,
        dropout_p: 0.5,
        freeze_epoch: freeze,
        batch_size: 32,
        seed,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn run_experiment(dir: &std::path::Path) -> Result<Experiment, String> {
    let counts = default_class_counts(NUM_CLASSES, 120);
    let dataset = generate_shapes_dataset(NUM_CLASSES, &counts, 1).map_err(|e| e.to_string())?;

    eprintln!("[experiment] training teacher ({TEACHER_EPOCHS} epochs)");
    let mut rng = seeded(7);
    let mut teacher = build_teacher(NUM_CLASSES, 0.5, &mut rng).map_err(|e| e.to_string())?;
    let tcfg = train_cfg(TEACHER_EPOCHS, 0.05, TEACHER_EPOCHS, 7);
    train_float(
        &mut teacher,
        None,
        &KDConfig::hard_only(),
        &dataset,
        &tcfg,
        |_| {},
    )
    .map_err(|e| e.to_string())?;
    let teacher_acc = evaluate_float(&teacher, &dataset.test).map_err(|e| e.to_string())?;
    eprintln!("[experiment] teacher test mpca {}", pct(teacher_acc));

    let kd = KDConfig::new(KD_BETA, KD_TEMPERATURE).map_err(|e| e.to_string())?;
    let mut exp = Experiment {
        dataset,
        teacher,
        teacher_acc,
        plain: Vec::new(),
        kd: Vec::new(),
        plain_acc: Vec::new(),
        kd_acc: Vec::new(),
        qd_acc: Vec::new(),
        ptq_acc: Vec::new(),
        float_bytes: 0,
        quant_bytes: 0,
        float_model_path: dir.join("student_float.qdk"),
        quant_model_path: dir.join("student_int8.qdk"),
    };

    for &seed in &SEEDS {
        eprintln!("[experiment] seed {seed}");
        // plain student: cross entropy only, no BN freeze
        let mut rng = seeded(seed);
        let mut plain =
            build_student(NUM_CLASSES, STUDENT_WIDTH, 0.5, &mut rng).map_err(|e| e.to_string())?;
        let cfg = train_cfg(STUDENT_EPOCHS, 0.05, STUDENT_EPOCHS, seed);
        train_float(
            &mut plain,
            None,
            &KDConfig::hard_only(),
            &exp.dataset,
            &cfg,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        exp.plain_acc
            .push(evaluate_float(&plain, &exp.dataset.test).map_err(|e| e.to_string())?);

        // KD student: identical schedule, teacher soft targets mixed in
        let mut rng = seeded(seed);
        let mut kd_student =
            build_student(NUM_CLASSES, STUDENT_WIDTH, 0.5, &mut rng).map_err(|e| e.to_string())?;
        let kcfg = train_cfg(STUDENT_EPOCHS, 0.05, STUDENT_EPOCHS, seed);
        train_float(
            &mut kd_student,
            Some(&exp.teacher),
            &kd,
            &exp.dataset,
            &kcfg,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        exp.kd_acc
            .push(evaluate_float(&kd_student, &exp.dataset.test).map_err(|e| e.to_string())?);

        // quantized distillation: fine-tune the KD student under simulated
        // quantization against the same teacher
        // gentle fine-tune: the student is already trained, so large steps
        // under fake-quant noise destroy more than they adapt
        let qcfg = train_cfg(QD_EPOCHS, 0.002, QD_EPOCHS / 2, seed);
        let (qd_model, _) = quantized_distillation_train(
            &exp.teacher,
            &kd_student,
            &exp.dataset,
            &kd,
            &qcfg,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        exp.qd_acc
            .push(evaluate_quantized(&qd_model, &exp.dataset.test).map_err(|e| e.to_string())?);

        // plain post-training quantization of the plain student
        let ptq = ptq_quantize(&plain, &exp.dataset).map_err(|e| e.to_string())?;
        exp.ptq_acc
            .push(evaluate_quantized(&ptq, &exp.dataset.test).map_err(|e| e.to_string())?);

        if seed == SEEDS[0] {
            exp.float_bytes =
                io::save_model(&kd_student, &exp.float_model_path).map_err(|e| e.to_string())?;
            exp.quant_bytes =
                io::save_qmodel(&qd_model, &exp.quant_model_path).map_err(|e| e.to_string())?;
        }
        exp.plain.push(plain);
        exp.kd.push(kd_student);
        eprintln!(
            "[experiment]   plain {} kd {} qd {} ptq {}",
            pct(*exp.plain_acc.last().unwrap()),
            pct(*exp.kd_acc.last().unwrap()),
            pct(*exp.qd_acc.last().unwrap()),
            pct(*exp.ptq_acc.last().unwrap()),
        );
    }
    Ok(exp)
}

fn ptq_quantize(
    model: &Model,
    dataset: &Dataset,
) -> qdnet::Result<qdnet::int8::QuantizedModel> {
    use qdnet::data::make_batch;
    use qdnet::quant::{calibrate, convert_to_int8, QatModel};
    let fused = fuse_layers(model)?;
    let mut qat = QatModel::from_fused(&fused)?;
    let mut rng = seeded(0);
    let indices: Vec<usize> = (0..dataset.train.len()).collect();
    let batches: Vec<Tensor> = indices
        .chunks(32)
        .map(|c| Ok(make_batch(&dataset.train, c, false, &mut rng)?.0))
        .collect::<qdnet::Result<_>>()?;
    calibrate(&mut qat, &batches)?;
    convert_to_int8(&qat)
}

fn criterion7_ordering(exp: &Experiment) -> Crit {
    let plain = mean(&exp.plain_acc);
    let kd = mean(&exp.kd_acc);
    let qd = mean(&exp.qd_acc);
    let ptq = mean(&exp.ptq_acc);
    let mut msg = String::new();
    write!(
        msg,
        "mean over {} seeds: teacher {} plain {} kd {} qd {} ptq {}",
        SEEDS.len(),
        pct(exp.teacher_acc),
        pct(plain),
        pct(kd),
        pct(qd),
        pct(ptq)
    )
    .unwrap();
    if exp.teacher_acc < 0.90 {
        return fail(format!(
            "teacher {} below the 90% learnability bar; {msg}",
            pct(exp.teacher_acc)
        ));
    }
    if exp.teacher_acc < kd || exp.teacher_acc < plain {
        return fail(format!("teacher does not dominate the students; {msg}"));
    }
    if kd < plain + 0.02 {
        return fail(format!("(a) KD {} < plain {} + 2 points; {msg}", pct(kd), pct(plain)));
    }
    if qd < ptq + 0.02 {
        return fail(format!("(b) QD {} < PTQ {} + 2 points; {msg}", pct(qd), pct(ptq)));
    }
    if qd < kd - 0.03 {
        return fail(format!("(c) QD {} more than 3 points below KD {}; {msg}", pct(qd), pct(kd)));
    }
    Ok(msg)
}

fn criterion8_resource_ratios(exp: &Experiment) -> Crit {
    let ratio = exp.quant_bytes as f64 / exp.float_bytes as f64;
    if ratio > 0.35 {
        return fail(format!(
            "size ratio {ratio:.3} > 0.35 ({} / {} bytes)",
            exp.quant_bytes, exp.float_bytes
        ));
    }
    // single-thread single-sample latency, same student shape
    let float_model = io::load_float(&exp.float_model_path).map_err(|e| e.to_string())?;
    let quant_model = io::load_quantized(&exp.quant_model_path).map_err(|e| e.to_string())?;
    let input = Tensor::from_fn(vec![1, 1, 32, 32], |_| 0.5);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let time_it = |f: &dyn Fn() -> ()| -> f64 {
        for _ in 0..50 {
            f();
        }
        let t0 = Instant::now();
        for _ in 0..300 {
            f();
        }
        t0.elapsed().as_secs_f64() * 1e3 / 300.0
    };
    let (float_ms, quant_ms) = pool.install(|| {
        (
            time_it(&|| {
                std::hint::black_box(float_model.forward_eval(&input).unwrap());
            }),
            time_it(&|| {
                std::hint::black_box(quantized_forward(&quant_model, &input).unwrap());
            }),
        )
    });
    if quant_ms >= float_ms {
        return fail(format!(
            "quantized latency {quant_ms:.3} ms >= float {float_ms:.3} ms"
        ));
    }
    Ok(format!(
        "size ratio {ratio:.3} <= 0.35; latency {quant_ms:.3} ms < {float_ms:.3} ms"
    ))
}

fn criterion9_sweep(exp: &Experiment, dir: &std::path::Path) -> Crit {
    use qdnet_cli::config::{load_config, RunConfig};
    let teacher_path = dir.join("sweep_teacher.qdk");
    io::save_model(&exp.teacher, &teacher_path).map_err(|e| e.to_string())?;
    let overrides: Vec<(String, String)> = [
        ("seed", "0"),
        ("train.epochs", &SWEEP_EPOCHS.to_string()),
        ("train.lr", "0.05"),
        ("train.milestones", "[7, 9]"),
        ("train.freeze_epoch", &SWEEP_EPOCHS.to_string()),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let cfg: RunConfig = load_config(None, &overrides).map_err(|e| e.to_string())?;
    let report = qdnet_cli::sweep::run_sweep(&cfg, &teacher_path).map_err(|e| e.to_string())?;
    let rows = report["rows"].as_array().ok_or("missing rows")?;
    if rows.len() != 12 {
        return fail(format!("sweep produced {} rows, expected 12", rows.len()));
    }
    let mut worst_margin = f64::INFINITY;
    for row in rows {
        let val = row["val_mpca"].as_f64().ok_or("missing val_mpca")?;
        let base = row["baseline_mpca"].as_f64().ok_or("missing baseline")?;
        worst_margin = worst_margin.min(val - base);
        if val <= base {
            return fail(format!(
                "KD config (w={} T={} beta={}) val {} <= baseline {}",
                row["width"], row["temperature"], row["beta"],
                pct(val), pct(base)
            ));
        }
    }
    Ok(format!(
        "12 rows; every KD config beats its no-KD baseline (worst margin {})",
        pct(worst_margin)
    ))
}

fn criterion10_determinism(exp: &Experiment) -> Crit {
    let kd = KDConfig::new(KD_BETA, KD_TEMPERATURE).map_err(|e| e.to_string())?;
    let cfg = train_cfg(2, 0.01, 1, 123);
    let run = || -> Result<Vec<u8>, String> {
        let (qmodel, _) = quantized_distillation_train(
            &exp.teacher,
            &exp.kd[0],
            &exp.dataset,
            &kd,
            &cfg,
            |_| {},
        )
        .map_err(|e| e.to_string())?;
        Ok(io::serialize_qmodel(&qmodel))
    };
    let a = run()?;
    let b = run()?;
    if a != b {
        return fail("repeated qat-distill runs produced different bytes");
    }
    Ok(format!("two runs byte-identical ({} bytes)", a.len()))
}

// -------------------------------------------------------------------- driver

#[test]
fn acceptance() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Crit)> = Vec::new();

    results.push((1, "quantization round trip", criterion1_quant_round_trip()));
    results.push((2, "fixed-point multiplier", criterion2_fixed_point_multiplier()));
    results.push((3, "integer kernel oracle", criterion3_integer_kernel_oracle()));
    results.push((4, "fusion equivalence", criterion4_fusion_equivalence()));
    results.push((5, "gradient checks", criterion5_gradient_checks()));
    results.push((6, "KD reductions", criterion6_kd_reductions()));

    match run_experiment(dir.path()) {
        Ok(exp) => {
            results.push((7, "end-to-end ordering", criterion7_ordering(&exp)));
            results.push((8, "resource ratios", criterion8_resource_ratios(&exp)));
            results.push((9, "sweep smoke test", criterion9_sweep(&exp, dir.path())));
            results.push((10, "determinism", criterion10_determinism(&exp)));
        }
        Err(e) => {
            for (i, name) in [
                (7, "end-to-end ordering"),
                (8, "resource ratios"),
                (9, "sweep smoke test"),
                (10, "determinism"),
            ] {
                results.push((i, name, Err(format!("experiment setup failed: {e}"))));
            }
        }
    }

    let mut failed = Vec::new();
    for (i, name, r) in &results {
        match r {
            Ok(msg) => eprintln!("criterion {i} ({name}): PASS - {msg}"),
            Err(msg) => {
                eprintln!("criterion {i} ({name}): FAIL - {msg}");
                failed.push(*i);
            }
        }
    }
    eprintln!(
        "acceptance suite finished in {:.1} s",
        start.elapsed().as_secs_f64()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
