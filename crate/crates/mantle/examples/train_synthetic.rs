//! End-to-end smoke run: synthesize the default 400-vertex dataset, train
//! for a few epochs, and report test-split error against the PCA baseline.
//!
//! ```sh
//! cargo run --release -p mantle --example train_synthetic -- [epochs]
//! ```

use std::time::Instant;

use mantle::{
    eval_pca, eval_reconstruction, generate, pca_baseline, train, Split, SyntheticSpec,
    TrainConfig, TrainSet,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr_init: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let mut ablation = mantle::AblationFlags::default();
    for a in args.iter().skip(2) {
        ablation.set_label(a).expect("known ablation label");
    }

    let spec = SyntheticSpec::default();
    let t0 = Instant::now();
    let ds = generate(&spec).expect("generate dataset");
    eprintln!(
        "generated {} records on {} vertices in {:.2?}",
        ds.records.len(),
        ds.body.vertex_count(),
        t0.elapsed()
    );

    let train_recs = ds.split_records(Split::Train);
    let test_recs = ds.split_records(Split::Test);
    let set = TrainSet {
        spec: &ds.body,
        graph: &ds.graph,
        mask: &ds.mask,
        records: &train_recs,
    };
    let test_set = TrainSet {
        spec: &ds.body,
        graph: &ds.graph,
        mask: &ds.mask,
        records: &test_recs,
    };

    let cfg = TrainConfig {
        epochs,
        seed: 7,
        ablation,
        lr_init,
        warmup_increment: lr_init,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let out = train(&set, &cfg, |m, _| {
        eprintln!(
            "epoch {:>3}  lr {:.4e}  recon {:>12.6}  edge {:>10.6}  kl {:>10.4}  err_mean {:.6}  [{:.1?}]",
            m.epoch, m.lr, m.recon, m.edge, m.kl, m.err_mean, t1.elapsed()
        );
        Ok(())
    });
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            eprintln!("training aborted: {e}");
            std::process::exit(4);
        }
    };

    let model = eval_reconstruction(&out.net, &test_set, cfg.batch_size).expect("eval");
    let codec = pca_baseline(&train_recs, out.net.config.latent_dim).expect("pca fit");
    let pca = eval_pca(&codec, &test_recs, &ds.mask).expect("pca eval");
    eprintln!(
        "test error  model mean {:.6} median {:.6} | pca mean {:.6} median {:.6}",
        model.err_mean, model.err_median, pca.err_mean, pca.err_median
    );
}
