use plantxvit::data::{synth_dataset, SynthSpec};
use plantxvit::model::{build_model, PlantXViTConfig, Trace};
use plantxvit::tensor::GradTape;
use plantxvit::train::{Trainer, TrainConfig};

fn main() {
    let ds = synth_dataset(&SynthSpec { classes: 2, per_class: 16, image_size: 64, seed: 7 }).unwrap();
    let cfg = PlantXViTConfig { input_size: 64, num_classes: 2, seed: 7, ..Default::default() };
    let mut model = build_model(&cfg).unwrap();
    let tcfg = TrainConfig { epochs: 200, seed: 7, ..Default::default() };
    let mut trainer = Trainer::new(&mut model, &ds, &tcfg).unwrap();
    for _ in 0..200 {
        let r = trainer.run_epoch().unwrap();
        if r.train_acc >= 1.0 && r.train_loss < 0.05 { break; }
    }
    let test = synth_dataset(&SynthSpec { classes: 2, per_class: 1, image_size: 64, seed: 8 }).unwrap();
    for s in &test.samples {
        let mut tape = GradTape::new();
        let mut trace = Trace { activations: Vec::new() };
        let fwd = model.forward(&mut tape, &s.pixels, Some(&mut trace)).unwrap();
        println!("sample class {}: logits {:?}", s.label, fwd.logits.data());
        for class in 0..2 {
            let score = tape.select(&fwd.logits, class).unwrap();
            let grads = tape.backward(&score).unwrap();
            let act = trace.get("inception").unwrap();
            let g = grads.get(act).unwrap();
            let norm: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            // channel-weight stats (spatial means)
            let k = 512;
            let mut w = vec![0.0f64; k];
            for px in g.data().chunks_exact(k) {
                for (wk, &gv) in w.iter_mut().zip(px) { *wk += gv as f64; }
            }
            let spatial = (g.len() / k) as f64;
            for wk in &mut w { *wk /= spatial; }
            let pos = w.iter().filter(|&&x| x > 0.0).count();
            println!("  d logit_{class}/dA: norm {norm:.5}, {pos}/512 channels positive-weight");
        }
    }
}
