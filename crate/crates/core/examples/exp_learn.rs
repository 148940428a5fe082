// learnability probe: desk model on memory_recall at acceptance scale
use std::time::Instant;
use webhc_core::baselines::{BaselineConfig, HistoryMode};
use webhc_core::compressor::CompressorConfig;
use webhc_core::env::{generate_episode, TaskKind, TaskSpec};
use webhc_core::eval::{element_accuracy, evaluate_model, step_accuracy};
use webhc_core::model::{ModelConfig, ModelParams};
use webhc_core::rng::Rng;
use webhc_core::train::{run_stage, StageConfig, TrainingLog};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s1_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let s2_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let lr1: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let lr2: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let n_train: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(300);
    let layers: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1);

    let spec = TaskSpec {
        kind: TaskKind::MemoryRecall,
        num_items: 8,
        episode_len: 5,
        verbosity: 200,
        memory_depth: 2,
        vocab_seed: 0,
    };
    let t0 = Instant::now();
    let train: Vec<_> = (0..n_train as u64)
        .map(|i| generate_episode(&spec, Rng::stream_indexed(1, "data/train", i).next_u64()).unwrap())
        .collect();
    let val: Vec<_> = (0..40u64)
        .map(|i| generate_episode(&spec, Rng::stream_indexed(1, "data/val", i).next_u64()).unwrap())
        .collect();
    println!("datagen: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = ModelConfig {
        vocab: webhc_core::env::VOCAB_SIZE,
        width: 64,
        heads: 2,
        encoder_layers: layers,
        compressor: CompressorConfig::desk(),
        history_mode: HistoryMode::Ours,
        baselines: BaselineConfig::default(),
        concat_mode: false,
    };
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, 1).unwrap();

    let stage = |lr: f64, steps: usize| StageConfig {
        lr,
        batch_size: batch,
        max_steps: steps,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        eval_every: 50,
    };
    let mut log = TrainingLog::default();
    let t1 = Instant::now();
    run_stage(&mut params, &train, &val, &stage(lr1, s1_steps), 1, 7, &mut log).unwrap();
    println!("stage1 {} steps: {:.1}s", s1_steps, t1.elapsed().as_secs_f64());
    let t2 = Instant::now();
    run_stage(&mut params, &train, &val, &stage(lr2, s2_steps), 2, 7, &mut log).unwrap();
    println!("stage2 {} steps: {:.1}s", s2_steps, t2.elapsed().as_secs_f64());

    for rec in &log.records {
        if let (Some(e), Some(s)) = (rec.val_element_acc, rec.val_step_acc) {
            println!(
                "stage{} step {:>4} loss {:.4} val_el {:.3} val_step {:.3}",
                rec.stage, rec.step, rec.loss, e, s
            );
        }
    }
    let t3 = Instant::now();
    let results = evaluate_model(&params, &val).unwrap();
    println!(
        "final val: element {:.3} step {:.3} ({:.1}s eval)",
        element_accuracy(&results).unwrap(),
        step_accuracy(&results).unwrap(),
        t3.elapsed().as_secs_f64()
    );
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
