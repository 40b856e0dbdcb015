use cf_fuse_core::config::Config;
use cf_fuse_core::detect::assign_targets;
use cf_fuse_core::losses;
use cf_fuse_core::model::{Model, ModelConfig};
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    cfg.set("data.count", 8);
    cfg.set("data.size", 64);
    let corpus = cf_fuse_core::data::generate_corpus(&cfg.data_config().unwrap(), 1).unwrap();
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let scene = &corpus.scenes[0];
    let v = scene.tensor_v();
    let i = scene.tensor_i();

    let t0 = Instant::now();
    for _ in 0..20 {
        let _ = model.forward(&v, &i, true);
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64() / 20.0 * 1000.0);

    let t0 = Instant::now();
    for _ in 0..20 {
        let trace = model.forward(&v, &i, true);
        let head = model.head.forward(&trace.fused);
        let target = assign_targets(&scene.boxes, 16, 64, 64);
        let (l_i, l_v) = losses::shared_specific_losses(&trace.c_sha, &trace.dfs.fused_i, &trace.dfs.fused_v);
        let (l_obj, l_cls, l_reg) = losses::detection_losses(&head, &target, 2, 4.0);
        let total = losses::total_loss(&l_i, &l_v, &l_obj, &l_reg, &l_cls, 0.001);
        total.backward();
        for p in model.params() { p.tensor.zero_grad(); }
    }
    println!("forward+backward: {:.1} ms", t0.elapsed().as_secs_f64() / 20.0 * 1000.0);
}
