//! Trains one desk-scale reconstruction and prints its log.
//!
//! `cargo run --release -p tnt-core --example desk_run -- [mode] [views] [iters] [lr] [seed]`

use tnt::geometry::{make_circular_trajectory, ScannerGeometry};
use tnt::phantom::{generate_head_phantom, PhantomSpec};
use tnt::training::{Scene, TrainConfig, TrainMode, Trainer};

fn main() -> tnt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode = match args.get(1).map(String::as_str).unwrap_or("tnt") {
        "tnt" => TrainMode::Tnt,
        "tnt_const_lambda" => TrainMode::TntConstLambda,
        "tnt_nosup" => TrainMode::TntNosup,
        "mlp" => TrainMode::Mlp,
        "mlp_thresh_sup" => TrainMode::MlpThreshSup,
        other => panic!("unknown mode {other}"),
    };
    let views: usize = args.get(2).map_or(20, |s| s.parse().unwrap());
    let iters: usize = args.get(3).map_or(2000, |s| s.parse().unwrap());
    let seed: u64 = args.get(5).map_or(0, |s| s.parse().unwrap());
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let (truth, masks) = generate_head_phantom(&spec)?;
    let geom = ScannerGeometry::desk(make_circular_trajectory(views, 180.0)?)?;
    let mut cfg = TrainConfig::desk(mode, spec.size);
    cfg.total_iterations = iters;
    cfg.seed = seed;
    if let Some(lr) = args.get(4) {
        cfg.lr = lr.parse().unwrap();
    }
    let scene = Scene::for_config(truth.clone(), geom, &cfg)?;
    let mut t = Trainer::new(&scene, cfg)?;
    t.run()?;
    for r in &t.log.records {
        println!(
            "{:5} psnr {:7.3} ssim {:.4} loss {:?} lambda {:.3} t {:.1}s",
            r.iteration,
            r.psnr.value(),
            r.ssim,
            r.loss.map(|l| l.total),
            r.lambda,
            r.seconds.unwrap_or(0.0)
        );
    }
    let recon = t.field.extract_volume(&truth.extent)?;
    let mut acc = [(0.0f64, 0usize); 3];
    for i in 0..truth.len() {
        let class = (masks.alpha.data[i] + masks.beta.data[i]) as usize;
        let d = (recon.data[i] - truth.data[i]) as f64;
        acc[class].0 += d * d;
        acc[class].1 += 1;
    }
    for (name, (se, n)) in ["air", "soft", "hard"].iter().zip(acc) {
        println!("{name:5} voxels {n:7} sse {se:9.3} rmse {:.4}", (se / n as f64).sqrt());
    }
    Ok(())
}
