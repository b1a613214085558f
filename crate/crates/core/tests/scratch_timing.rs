use std::time::Instant;

use snapvit_core::data::synth_shapes;
use snapvit_core::fitness::FitnessContext;
use snapvit_core::pruner::{extract_mask, run_snapvit, PruneBasis, SnapConfig, SparsityRequest};
use snapvit_core::ssl::SslHeadWeights;
use snapvit_core::vit::forward::forward;
use snapvit_core::vit::{ModelWeights, PruneMask, ViTConfig};

#[test]
#[ignore]
fn scratch_timing() {
    let cfg = ViTConfig::toy();
    let mut w = ModelWeights::random_init(&cfg, 1).unwrap();
    w.ssl_head = Some(SslHeadWeights::random_init(cfg.d_model, 64, 2));
    let data = synth_shapes(512, cfg.image_size, 2);
    let probe = data.image_slice(0, 256).unwrap();

    let t0 = Instant::now();
    let ctx = FitnessContext::new(&w, &probe, 16).unwrap();
    println!("FitnessContext::new: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let emb = forward(&w, &PruneMask::all_keep_for(&w), &probe).unwrap();
    println!("plain forward 256 imgs: {:?} (emb {:?})", t0.elapsed(), emb.shape());

    let mut sc = SnapConfig::new(0);
    sc.iterations = 0;
    sc.n_samples_grad = 64;
    let t0 = Instant::now();
    let ranking = run_snapvit(&w, &data.images, None, &sc).unwrap();
    println!("local-only ranking: {:?}", t0.elapsed());

    let (mask, _) = extract_mask(
        &ranking,
        SparsityRequest { target: 0.5, basis: PruneBasis::ParameterCount },
        &cfg,
        &ranking.provenance.caps,
    )
    .unwrap();

    let t0 = Instant::now();
    for _ in 0..4 {
        ctx.mask_fitness(&mask).unwrap();
    }
    println!("4x mask_fitness(0.5): {:?}", t0.elapsed());

    let t0 = Instant::now();
    for _ in 0..4 {
        forward(&w, &mask, &probe).unwrap();
    }
    println!("4x masked forward: {:?}", t0.elapsed());
}
