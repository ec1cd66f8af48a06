//! Train the trend-benchmark models once and cache every checkpoint so
//! evaluation-side questions don't pay for retraining.
use simulmt::lm::{NGramLM, Token};
use simulmt::model::{build_examples, train, ModelConfig, TrainSchedule, Vocab};
use simulmt::tasks::{generate, split, TaskKind, TaskSpec};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).cloned().unwrap_or("/tmp/trendcache".into()));
    let stage1: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let stage2: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.003);
    let brake: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let noise: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let seeds: Vec<u64> = args
        .get(7)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or(vec![1, 2, 3]);

    let spec = TaskSpec {
        kind: TaskKind::BigramGrammar,
        vocab_size: 32,
        len_range: (5, 9),
        determinism: 0.8,
        seed: 42,
    };
    let data = generate(&spec, 2500).unwrap();
    let (train_data, _dev, test) = split(&data, (0.8, 0.04, 0.16), 42).unwrap();
    std::fs::create_dir_all(&out).unwrap();
    simulmt::tasks::write_parallel(&out.join("test.src"), &out.join("test.tgt"), &test).unwrap();
    simulmt::tasks::write_parallel(&out.join("train.src"), &out.join("train.tgt"), &train_data)
        .unwrap();
    let targets: Vec<Vec<Token>> = train_data.iter().map(|(_, t)| t.clone()).collect();
    let lm = NGramLM::fit(&targets, 2).unwrap();
    lm.save(&out.join("lm.json")).unwrap();

    for seed in seeds {
        for future in [false, true] {
            let name = if future { "fused" } else { "base" };
            let dir = out.join(format!("seed{seed}/{name}"));
            std::fs::create_dir_all(&dir).unwrap();
            let src_vocab = Vocab::build(train_data.iter().map(|(s, _)| s), &[]);
            let tgt_vocab = Vocab::build(train_data.iter().map(|(_, t)| t), &[]);
            let mut config = ModelConfig::desk_default(
                src_vocab.tokens().to_vec(),
                tgt_vocab.tokens().to_vec(),
            );
            config.base_lr = lr;
            config.warmup_steps = 200;
            config.seed = seed;
            config.future_lr_scale = brake;
            config.train_noise_var = noise;
            config.future_info_enabled = future;
            let schedule = TrainSchedule {
                stage1_epochs: stage1,
                stage2_epochs: stage2,
                lambdas: vec![0.01, 0.05, 0.1],
                batch_size: 8,
            };
            let examples = build_examples(&train_data, future.then_some(&lm));
            let t0 = std::time::Instant::now();
            let result = train(&config, &schedule, &examples).unwrap();
            for (lambda, model) in &result.finetuned {
                model
                    .to_checkpoint()
                    .save(&dir.join(format!("lambda_{lambda}.ckpt.json")))
                    .unwrap();
            }
            eprintln!("seed {seed} {name}: {:.0}s", t0.elapsed().as_secs_f64());
        }
    }
}
