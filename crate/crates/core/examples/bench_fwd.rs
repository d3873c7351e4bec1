use plantxvit::model::{build_model, PlantXViTConfig};
use plantxvit::tensor::{GradTape, Init, Tensor};
use std::time::Instant;

fn main() {
    let cfg = PlantXViTConfig { input_size: 64, num_classes: 4, seed: 7, ..Default::default() };
    let m = build_model(&cfg).unwrap();
    let x = Tensor::new(&[64, 64, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed: 1 }).unwrap();

    // warmup
    let mut tape = GradTape::no_grad();
    m.forward(&mut tape, &x, None).unwrap();

    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let mut tape = GradTape::no_grad();
        m.forward(&mut tape, &x, None).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward (no grad): {:.1} ms", fwd * 1e3);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut tape = GradTape::new();
        let out = m.forward(&mut tape, &x, None).unwrap();
        let loss = tape.nll_row(&out.probs, 0).unwrap();
        let grads = tape.backward(&loss).unwrap();
        std::hint::black_box(grads.len());
    }
    let fb = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward+backward:  {:.1} ms", fb * 1e3);
    println!("epoch of 56 train samples ≈ {:.1} s", fb * 56.0);
    println!("200 epochs ≈ {:.0} s", fb * 56.0 * 200.0);
}
