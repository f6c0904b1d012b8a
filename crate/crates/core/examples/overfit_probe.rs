use citrinet::config::ModelConfig;
use citrinet::synth::synth_dataset;
use citrinet::train::{run_training, Trainer, TrainOptions};

fn tiny(attc: bool) -> ModelConfig {
    let mut cfg = if attc { ModelConfig::att_citrinet(32) } else { ModelConfig::citrinet(32) };
    cfg.total_blocks = 5;
    cfg.vocab = 16;
    cfg.decoder_dim = 32;
    cfg.epilog_dim = 64;
    cfg.dropout = 0.0;
    cfg.spec_augment = std::env::var("SPECAUG").map(|v| v == "1").unwrap_or(false);
    cfg.warmup_steps = 100;
    cfg.total_steps = 2000;
    cfg.lr_max = 0.05;
    cfg.max_frames_per_batch = 360;
    cfg.ckpt_interval = 0;
    if let Ok(w) = std::env::var("W_CTC") { cfg.w_ctc = w.parse().unwrap(); }
    cfg
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let attc = args.get(1).map(|s| s == "attc").unwrap_or(true);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let dseed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(42);
    let minl: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(2);
    let maxl: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(5);
    let ds = synth_dataset(10, dseed, 16, minl, maxl).unwrap();
    let cfg = tiny(attc);
    let t0 = std::time::Instant::now();
    let mut trainer = Trainer::new(&cfg, &ds, seed).unwrap();
    let opts = TrainOptions {
        steps,
        eval_every: Some(10),
        stop_at_cer: args.get(4).and_then(|s| s.parse().ok()),
        ..Default::default()
    };
    let out = run_training(&mut trainer, &ds, &opts).unwrap();
    println!("variant {} seed {seed}: diverged={} final_step={} elapsed={:?}",
        if attc { "att-c" } else { "c" }, out.diverged, out.final_step, t0.elapsed());
    for (s, c) in &out.eval_history {
        println!("  step {s}: CER {c:.4}");
    }
    if let Some(m) = out.metrics.last() {
        println!("  last loss: ctc {:.4} combined {:.4}", m.ctc, m.combined);
    }
}
