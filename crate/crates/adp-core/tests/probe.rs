//! Temporary tuning probe (deleted before release); run with --ignored.

use adp_core::config::{Config, TrainConfig};
use adp_core::data::{gen_shapes, Style};
use adp_core::gan::{train, AdpModel, FreezeSet, ModelMeta, Variant};
use adp_core::lfs::{build_lfs, parse_lf_specs};
use adp_core::metrics::{c_rg, c_rt, generated_pairs};
use adp_core::rng;

#[test]
#[ignore]
fn probe_toy_adp() {
    let iters: usize = std::env::var("PROBE_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000);
    let lf_spec = std::env::var("PROBE_LFS")
        .unwrap_or_else(|_| "template, enclosure, vsym, quad_mass, noisy(acc=0.8,salt=3)".into());
    let mut cfg = Config::default();
    cfg.set("iterations", iters);
    cfg.set("log_every", (iters / 20).max(1));
    let tc = TrainConfig::from_config(&cfg).unwrap();

    let ds = gen_shapes(7, 2000, 3, 8, 8, Style::A).unwrap();
    let lfs = build_lfs(&parse_lf_specs(&lf_spec).unwrap(), &ds, tc.seed).unwrap();
    let meta = ModelMeta {
        classes: 3,
        height: 8,
        width: 8,
        lf_count: lfs.len(),
        latent_dim: tc.latent_dim,
        cond_dim: 0,
    };
    let model = AdpModel::new(&tc, meta, &mut rng::derive(tc.seed, "model-init", 0));
    let start = std::time::Instant::now();
    let out = train(&tc, &ds, &lfs, Variant::Standard, FreezeSet::none(), None, model).unwrap();
    println!("trained {} iters in {:.1}s", iters, start.elapsed().as_secs_f64());
    for row in out.log.iter().step_by(2) {
        println!(
            "iter {:5}  L_D {:.4}  L_G {:.4}  L_DLFB {:.4}  L_Gphi {:.4}  Hθ {:.4}",
            row.iteration, row.loss_d, row.loss_g, row.loss_dlfb, row.loss_g_phi, row.theta_entropy
        );
    }
    let pairs = generated_pairs(&out.model, &lfs, 600, 99).unwrap();
    let mut hist = [0usize; 3];
    for (_, y) in &pairs {
        hist[*y] += 1;
    }
    println!("generated label histogram: {hist:?}");
    let crt = c_rt(ds.train(), &pairs, 3, 42).unwrap();
    let crg = c_rg(&pairs, ds.test(), 3, 42).unwrap();
    println!("C_RT = {crt:.1}%, C_RG = {crg:.1}%, gap = {:.1}", (crt - crg).abs());
}

#[test]
#[ignore]
fn probe_variant() {
    let iters: usize = std::env::var("PROBE_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(1000);
    let lr_gen: f64 = std::env::var("PROBE_LRG").ok().and_then(|v| v.parse().ok()).unwrap_or(5e-5);
    let lr_disc: f64 = std::env::var("PROBE_LRD").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-4);
    let dwidth = std::env::var("PROBE_DW").unwrap_or_else(|_| "64".into());
    let mut cfg = Config::default();
    cfg.set("iterations", iters);
    cfg.set("lr_gen", lr_gen);
    cfg.set("lr_disc", lr_disc);
    cfg.set("disc_image", dwidth.clone());
    cfg.set("disc_common", dwidth);
    cfg.set("log_every", (iters / 10).max(1));
    let tc = TrainConfig::from_config(&cfg).unwrap();
    let ds = gen_shapes(7, 2000, 3, 8, 8, Style::A).unwrap();
    let lfs = build_lfs(&parse_lf_specs("template, enclosure, vsym, quad_mass, noisy(acc=0.8,salt=3)").unwrap(), &ds, tc.seed).unwrap();
    let meta = ModelMeta { classes: 3, height: 8, width: 8, lf_count: lfs.len(), latent_dim: tc.latent_dim, cond_dim: 0 };
    let model = AdpModel::new(&tc, meta, &mut rng::derive(tc.seed, "model-init", 0));
    let out = train(&tc, &ds, &lfs, Variant::Standard, FreezeSet::none(), None, model).unwrap();
    for row in out.log.iter() {
        println!("iter {:5}  L_D {:.4}  L_G {:.4}  L_DLFB {:.4}  L_Gphi {:.4}  Hθ {:.4}", row.iteration, row.loss_d, row.loss_g, row.loss_dlfb, row.loss_g_phi, row.theta_entropy);
    }
    let pairs = generated_pairs(&out.model, &lfs, 600, 99).unwrap();
    let mut hist = [0usize; 3];
    for (_, y) in &pairs { hist[*y] += 1; }
    println!("histogram {hist:?}");
    let crt = c_rt(ds.train(), &pairs, 3, 42).unwrap();
    let crg = c_rg(&pairs, ds.test(), 3, 42).unwrap();
    println!("C_RT={crt:.1} C_RG={crg:.1} gap={:.1}", (crt - crg).abs());
}

#[test]
#[ignore]
fn probe_grid() {
    let iters: usize = std::env::var("PROBE_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(5000);
    let lr_gen: f64 = std::env::var("PROBE_LRG").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-4);
    let lr_disc: f64 = std::env::var("PROBE_LRD").ok().and_then(|v| v.parse().ok()).unwrap_or(5e-5);
    let mut cfg = Config::default();
    cfg.set("iterations", iters);
    cfg.set("lr_gen", lr_gen);
    cfg.set("lr_disc", lr_disc);
    cfg.set("disc_image", std::env::var("PROBE_DW").unwrap_or_else(|_| "32".into()));
    cfg.set("disc_common", std::env::var("PROBE_DW").unwrap_or_else(|_| "32".into()));
    cfg.set("log_every", (iters / 10).max(1));
    if let Ok(v) = std::env::var("PROBE_BATCH") { cfg.set("batch", v); }
    if let Ok(v) = std::env::var("PROBE_Z") { cfg.set("latent_dim", v); }
    if let Ok(v) = std::env::var("PROBE_TRUNK") { cfg.set("trunk", v); }
    if let Ok(v) = std::env::var("PROBE_K") { cfg.set("disc_steps", v); }
    if let Ok(v) = std::env::var("PROBE_IH") { cfg.set("image_head", v); }
    if let Ok(v) = std::env::var("PROBE_INST") { cfg.set("instance_noise", v); }
    if let Ok(v) = std::env::var("PROBE_DIV") { cfg.set("lambda_diversity", v); }
    let tc = TrainConfig::from_config(&cfg).unwrap();
    let ds = gen_shapes(7, 2000, 3, 8, 8, Style::A).unwrap();
    let lfs = build_lfs(&parse_lf_specs("template, enclosure, vsym, quad_mass, noisy(acc=0.8,salt=3)").unwrap(), &ds, tc.seed).unwrap();
    let meta = ModelMeta { classes: 3, height: 8, width: 8, lf_count: lfs.len(), latent_dim: tc.latent_dim, cond_dim: 0 };
    let model = AdpModel::new(&tc, meta, &mut rng::derive(tc.seed, "model-init", 0));
    let out = train(&tc, &ds, &lfs, Variant::Standard, FreezeSet::none(), None, model).unwrap();
    for row in out.log.iter() {
        println!("iter {:5}  L_D {:.4}  L_G {:.4}  Hθ {:.4}", row.iteration, row.loss_d, row.loss_g, row.theta_entropy);
    }
    let pairs = generated_pairs(&out.model, &lfs, 600, 99).unwrap();
    let imgs: Vec<adp_core::data::Image> = pairs.iter().take(24).map(|(i,_)| i.clone()).collect();
    adp_core::container::write_pgm_grid(std::path::Path::new("/tmp/probe_grid.pgm"), &imgs, 6, "probe").unwrap();
    let mut hist = [0usize; 3];
    for (_, y) in &pairs { hist[*y] += 1; }
    // per-LF theta from a fresh generation
    let (_, thetas, _) = adp_core::gan::generate(&out.model, 8, 5, None).unwrap();
    for t in thetas.iter().take(3) { println!("theta {:?}", t.values().iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>()); }
    println!("histogram {hist:?}");
    let crt = c_rt(ds.train(), &pairs, 3, 42).unwrap();
    let crg = c_rg(&pairs, ds.test(), 3, 42).unwrap();
    println!("C_RT={crt:.1} C_RG={crg:.1} gap={:.1}", (crt - crg).abs());
}
