//! Rough wall-clock probes for sizing desk-scale runs. Ignored by default.

use std::time::Instant;

use relight_core::codec::{encode, Provenance};
use relight_core::config::RunConfig;
use relight_core::data::{generate_corpus, CorpusSpec};
use relight_core::train::{load_stage1, load_unpaired, train_stage1, train_stage2, ModelParams};

#[test]
#[ignore]
fn probe_iteration_costs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let text = format!(
        "seed = 1\n\
         train.iterations = 10\n\
         train.batch = 1\n\
         train.lr_initial = 1e-3\n\
         data.stage1_pairs = 8\n\
         data.stage2_low = 8\n\
         data.stage2_high = 8\n\
         data.val = 2\n\
         data.root = {}\n",
        root.display()
    );
    let run = RunConfig::parse_str(&text).unwrap();

    let t0 = Instant::now();
    generate_corpus(&root, &CorpusSpec { seed: 1, image_size: 64, stage1_pairs: 8, stage2_low: 8, stage2_high: 8, val_pairs: 2 }).unwrap();
    eprintln!("corpus gen (28 images): {:.2?}", t0.elapsed());

    let data = load_stage1(&root, 8).unwrap();
    let mut params = ModelParams::init(&run);

    // single encode timing
    let tape = relight_core::Tape::new();
    let t0 = Instant::now();
    let f = encode(&tape, &data.0[0].0, &run.codec, &params.encoder, Provenance::Low).unwrap();
    eprintln!("encode 64x64 k=3 C=64 (no grad): {:.2?} -> {:?}", t0.elapsed(), f.data.shape());

    let t0 = Instant::now();
    train_stage1(&run, &data, &mut params, dir.path().join("o1")).unwrap();
    eprintln!("stage1, 10 iters batch 1: {:.2?}  ({:.0?}/iter)", t0.elapsed(), t0.elapsed() / 10);

    let unpaired = load_unpaired(&root, 8, 8).unwrap();
    let t0 = Instant::now();
    train_stage2(&run, &unpaired, &mut params, dir.path().join("o2")).unwrap();
    eprintln!("stage2, 10 iters (S=20 scc): {:.2?}  ({:.0?}/iter)", t0.elapsed(), t0.elapsed() / 10);

    let mut run2 = run.clone();
    run2.loss.lambda_scc = 0.0;
    let mut params2 = ModelParams::load(dir.path().join("o1").join("stage1.ckpt"), &run).unwrap();
    let t0 = Instant::now();
    train_stage2(&run2, &unpaired, &mut params2, dir.path().join("o3")).unwrap();
    eprintln!("stage2 no-scc, 10 iters: {:.2?}  ({:.0?}/iter)", t0.elapsed(), t0.elapsed() / 10);
}

#[test]
#[ignore]
fn probe_stage1_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let base: usize = std::env::var("PB_BASE").map(|v| v.parse().unwrap()).unwrap_or(8);
    let chans: usize = std::env::var("PB_C").map(|v| v.parse().unwrap()).unwrap_or(64);
    let iters: usize = std::env::var("PB_ITERS").map(|v| v.parse().unwrap()).unwrap_or(600);
    let lr: f64 = std::env::var("PB_LR").map(|v| v.parse().unwrap()).unwrap_or(2e-3);
    let batch: usize = std::env::var("PB_BATCH").map(|v| v.parse().unwrap()).unwrap_or(2);
    let text = format!(
        "seed = 1\n\
         codec.base_width = {base}\n\
         codec.channels = {chans}\n\
         train.iterations = {iters}\n\
         train.batch = {batch}\n\
         train.lr_initial = {lr}\n\
         data.stage1_pairs = 64\n\
         data.root = {}\n",
        root.display()
    );
    let run = RunConfig::parse_str(&text).unwrap();
    generate_corpus(&root, &run.corpus).unwrap();
    let data = load_stage1(&root, 64).unwrap();
    let mut params = ModelParams::init(&run);
    let t0 = Instant::now();
    let report = train_stage1(&run, &data, &mut params, dir.path().join("o1")).unwrap();
    let rows = &report.rows_stage1;
    eprintln!("config: base={base} C={chans} lr={lr} batch={batch} -> {:.1?} total, {:.0?}/iter",
        t0.elapsed(), t0.elapsed() / rows.len() as u32);
    for r in rows.iter().step_by(50) {
        eprintln!("  iter {:4}  l_con {:.4}  l_rec {:.4}  l_ref {:.4}  l_ill {:.4}", r.iter, r.l_con, r.l_ref, r.l_rec, r.l_ill);
    }
    let tail = &rows[rows.len().saturating_sub(25)..];
    let mean_tail: f64 = tail.iter().map(|r| r.l_con).sum::<f64>() / tail.len() as f64;
    eprintln!("  tail-25 mean l_con = {mean_tail:.4}");
}

#[test]
#[ignore]
fn probe_codec_only() {
    use relight_core::losses::loss_con;
    use relight_core::nn::ParamContainer;
    use relight_core::optim::Adam;
    use relight_core::Tape;
    use rand::{Rng, SeedableRng};

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let base: usize = std::env::var("PB_BASE").map(|v| v.parse().unwrap()).unwrap_or(16);
    let lr: f64 = std::env::var("PB_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    let iters: usize = std::env::var("PB_ITERS").map(|v| v.parse().unwrap()).unwrap_or(300);
    let text = format!(
        "seed = 1\ncodec.base_width = {base}\ndata.stage1_pairs = 16\ndata.root = {}\n",
        root.display()
    );
    let run = RunConfig::parse_str(&text).unwrap();
    generate_corpus(&root, &run.corpus).unwrap();
    let data = load_stage1(&root, 16).unwrap();
    let mut params = ModelParams::init(&run);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
    let mut adam_e = Adam::new();
    let mut adam_d = Adam::new();
    for iter in 0..iters {
        let tape = Tape::new();
        let enc = params.encoder.watch(&tape);
        let dec = params.decoder.watch(&tape);
        let (a, b) = &data.0[rng.random_range(0..data.0.len())];
        let fa = enc.forward(&tape, a, &run.codec).unwrap();
        let fb = enc.forward(&tape, b, &run.codec).unwrap();
        let ra = dec.forward(&tape, &fa, &run.codec).unwrap();
        let rb = dec.forward(&tape, &fb, &run.codec).unwrap();
        let l = loss_con(&tape, [a, b], [&ra, &rb]).unwrap();
        let lv = l.scalar().unwrap();
        let grads = tape.backward(&l).unwrap();
        if iter % 50 == 0 || iter == iters - 1 {
            let fmean = fa.data().iter().map(|v| v.abs()).sum::<f64>() / fa.numel() as f64;
            let fdead =
                fa.data().iter().filter(|&&v| v < 1e-4).count() as f64 / fa.numel() as f64;
            let rmin = ra.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let rmax = ra.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let gnorm = |p: &dyn Fn() -> Vec<f64>| -> f64 {
                let v = p();
                (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
            };
            let enc_g: Vec<f64> = enc
                .named_params()
                .iter()
                .filter_map(|(_, t)| grads.get(t))
                .flat_map(|g| g.data().to_vec())
                .collect();
            let dec_g: Vec<f64> = dec
                .named_params()
                .iter()
                .filter_map(|(_, t)| grads.get(t))
                .flat_map(|g| g.data().to_vec())
                .collect();
            eprintln!(
                "iter {iter:4} l_con {lv:.4}  |F| {fmean:.3} dead {fdead:.2}  rec [{rmin:.3},{rmax:.3}]  g_enc {:.2e} g_dec {:.2e}",
                gnorm(&|| enc_g.clone()),
                gnorm(&|| dec_g.clone())
            );
        }
        adam_e.apply(&mut params.encoder, &enc, &grads, lr).unwrap();
        adam_d.apply(&mut params.decoder, &dec, &grads, lr).unwrap();
    }
}
