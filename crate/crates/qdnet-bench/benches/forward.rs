use criterion::{criterion_group, criterion_main, Criterion};
use qdnet::int8::quantized_forward;
use qdnet_bench::{float_student, quantized_student, rand_tensor};
use std::hint::black_box;

fn bench_forward(c: &mut Criterion) {
    let input = rand_tensor(vec![1, 1, 32, 32], 3);
    for width in [0.5f32, 1.0] {
        let float = float_student(width).unwrap();
        c.bench_function(&format!("student_float_forward_w{width}"), |bench| {
            bench.iter(|| float.forward_eval(black_box(&input)).unwrap())
        });
        let quant = quantized_student(width).unwrap();
        c.bench_function(&format!("student_int8_forward_w{width}"), |bench| {
            bench.iter(|| quantized_forward(black_box(&quant), black_box(&input)).unwrap())
        });
    }
}

criterion_group!(forward, bench_forward);
criterion_main!(forward);
