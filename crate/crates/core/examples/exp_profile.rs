// coarse phase timing for one training batch at acceptance scale
use std::time::Instant;
use webhc_core::baselines::{BaselineConfig, HistoryMode};
use webhc_core::compressor::CompressorConfig;
use webhc_core::env::{generate_episode, TaskKind, TaskSpec};
use webhc_core::model::{forward_loss, gold_candidate_index, step_input_from_episode, ModelConfig, ModelParams};
use webhc_core::rng::Rng;
use webhc_core::tape::Tape;
use webhc_core::train::{optimizer_step, trainable_set, OptimizerState, StageConfig};

fn main() {
    let spec = TaskSpec {
        kind: TaskKind::MemoryRecall,
        num_items: 8,
        episode_len: 5,
        verbosity: 200,
        memory_depth: 2,
        vocab_seed: 0,
    };
    let eps: Vec<_> = (0..2u64)
        .map(|i| generate_episode(&spec, Rng::stream_indexed(1, "p", i).next_u64()).unwrap())
        .collect();
    let cfg = ModelConfig {
        vocab: webhc_core::env::VOCAB_SIZE,
        width: 64,
        heads: 2,
        encoder_layers: 1,
        compressor: CompressorConfig::desk(),
        history_mode: HistoryMode::Ours,
        baselines: BaselineConfig::default(),
        concat_mode: false,
    };
    let mut params: ModelParams<f32> = ModelParams::init(&cfg, 1).unwrap();
    // batch of 8: steps 1..5 of both episodes (mixed history counts)
    let batch: Vec<_> = eps
        .iter()
        .flat_map(|ep| {
            (1..5).map(move |t| {
                (
                    step_input_from_episode(ep, t, 5),
                    gold_candidate_index(&ep.steps[t]),
                    ep.steps[t].gold_op,
                )
            })
        })
        .collect();
    let sc = StageConfig { lr: 1e-3, batch_size: 8, max_steps: 1, beta1: 0.9, beta2: 0.999, eps: 1e-8, eval_every: 0 };
    let trainable = trainable_set(2, &params);
    let mut state = OptimizerState::new();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape).unwrap();
        let t_reg = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let loss = forward_loss(&mut tape, &batch, &nodes, &cfg).unwrap();
        let t_fwd = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let grads = tape.backward(loss).unwrap();
        let t_bwd = t2.elapsed().as_secs_f64();

        let t3 = Instant::now();
        drop(tape);
        let t_drop = t3.elapsed().as_secs_f64();

        let t4 = Instant::now();
        optimizer_step(&mut params, &grads, &mut state, &sc, &trainable).unwrap();
        let t_opt = t4.elapsed().as_secs_f64();

        println!(
            "round {round}: register {t_reg:.3}s forward {t_fwd:.3}s backward {t_bwd:.3}s drop {t_drop:.3}s optimizer {t_opt:.3}s total {:.3}s",
            t0.elapsed().as_secs_f64()
        );
    }
}
