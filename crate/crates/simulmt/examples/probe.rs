//! Quick training-stability probe for one seed/lr.
use simulmt::lm::{NGramLM, Token};
use simulmt::model::{build_examples, train, ModelConfig, TrainSchedule, Vocab};
use simulmt::tasks::{generate, split, TaskKind, TaskSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.003);
    let future: bool = args.get(3).map(|s| s == "fused").unwrap_or(true);
    let spec = TaskSpec {
        kind: TaskKind::BigramGrammar,
        vocab_size: 32,
        len_range: (5, 9),
        determinism: 0.8,
        seed: 42,
    };
    let data = generate(&spec, 2500).unwrap();
    let (train_data, _dev, _test) = split(&data, (0.8, 0.04, 0.16), 42).unwrap();
    let targets: Vec<Vec<Token>> = train_data.iter().map(|(_, t)| t.clone()).collect();
    let lm = NGramLM::fit(&targets, 2).unwrap();
    let src_vocab = Vocab::build(train_data.iter().map(|(s, _)| s), &[]);
    let tgt_vocab = Vocab::build(train_data.iter().map(|(_, t)| t), &[]);
    let mut config =
        ModelConfig::desk_default(src_vocab.tokens().to_vec(), tgt_vocab.tokens().to_vec());
    config.seed = seed;
    config.base_lr = lr;
    config.warmup_steps = 200;
    config.future_info_enabled = future;
    let schedule = TrainSchedule {
        stage1_epochs: 6,
        stage2_epochs: 4,
        lambdas: vec![0.01, 0.05, 0.1],
        batch_size: 8,
    };
    let examples = build_examples(&train_data, future.then_some(&lm));
    let result = train(&config, &schedule, &examples).unwrap();
    for l in &result.log {
        println!(
            "[{} e{}] loss {:.4} nll {:.4} lat {:.3}",
            l.stage, l.epoch, l.loss, l.nll, l.latency_loss
        );
    }
}
