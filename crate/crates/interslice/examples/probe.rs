use interslice::model::{build_model, Arch, ModelBundle, ModelConfig};
use interslice::tensor::graph::Graph;
use interslice::tensor::Tensor;
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig { channels: 32, blocks: 12, shuffle_r: 2, s_max: 2.0, growth: 32 };
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
    let bundle: ModelBundle<f32> = build_model(Arch::M3, &cfg, &mut rng).unwrap();
    let ModelBundle::M3(m) = &bundle else { panic!() };
    let x = Tensor::<f32>::randn(vec![8, 32, 48, 48], 0.3, &mut rng);

    for trial in 0..2 {
        let mut g: Graph<f32> = Graph::new();
        let bound = m.bind(&mut g, false);
        let xid = g.leaf(x.clone());
        let t = Instant::now();
        let _f1 = bound.core_forward(&mut g, xid).unwrap();
        let t1 = t.elapsed().as_secs_f64();
        let xid2 = g.leaf(x.clone());
        let t = Instant::now();
        let _f2 = bound.core_forward(&mut g, xid2).unwrap();
        let t2 = t.elapsed().as_secs_f64();
        let xid3 = g.leaf(x.clone());
        let t = Instant::now();
        let _i1 = bound.core_inverse(&mut g, xid3).unwrap();
        let t3 = t.elapsed().as_secs_f64();
        println!("trial {trial}: fwd#1 {t1:.2}s fwd#2 {t2:.2}s inv {t3:.2}s");
    }
}
