//! Evaluate cached trend checkpoints across eval-side knobs.
use simulmt::lm::NGramLM;
use simulmt::model::{build_examples, Checkpoint, Model};
use simulmt::streaming::{
    average_lagging, corpus_quality, simul_decode, DecodePolicy, SourceStream, Variant,
};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cache = PathBuf::from(args.get(1).cloned().unwrap_or("/tmp/trendcache".into()));
    let segment: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let threshold: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let seeds: Vec<u64> = args
        .get(4)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or(vec![1, 2, 3]);

    let test = simulmt::tasks::read_parallel(&cache.join("test.src"), &cache.join("test.tgt"))
        .unwrap();
    let lm = NGramLM::load(&cache.join("lm.json")).unwrap();
    let eval_examples = build_examples(&test[..100.min(test.len())].to_vec(), Some(&lm));

    let lambdas = ["0.01", "0.05", "0.1"];
    let mut crit6 = 0usize;
    let mut crit7 = 0usize;
    for &seed in &seeds {
        let mut rows: Vec<Vec<(f64, f64, f64, f64)>> = Vec::new(); // [variant][lambda] = (al, q, pw_decode, pw_grid)
        for name in ["base", "fused"] {
            let mut per_lambda = Vec::new();
            for l in &lambdas {
                let cp = Checkpoint::load(
                    &cache.join(format!("seed{seed}/{name}/lambda_{l}.ckpt.json")),
                )
                .unwrap();
                let model = Model::from_checkpoint(&cp).unwrap();
                let policy = DecodePolicy {
                    threshold,
                    segment_units: segment,
                    ..DecodePolicy::default()
                };
                let mut pairs = Vec::new();
                let mut al_sum = 0.0;
                let mut al_n = 0usize;
                let mut pw_sum = 0.0;
                let mut pw_n = 0usize;
                for (src, reference) in &test {
                    let stream = SourceStream::from_tokens(&model, src).unwrap();
                    let variant = if name == "fused" {
                        Variant::MmaLm { lm: &lm }
                    } else {
                        Variant::Mma
                    };
                    let (hyp, trace) = simul_decode(&model, &variant, &stream, &policy).unwrap();
                    pairs.push((hyp, reference.clone()));
                    if !trace.delays.is_empty() {
                        al_sum += average_lagging(&trace).unwrap();
                        al_n += 1;
                    }
                    if let Some(pw) = trace.lm_pw {
                        pw_sum += pw;
                        pw_n += 1;
                    }
                }
                let grid_pw = model
                    .lm_prediction_weight_eval(&eval_examples)
                    .unwrap()
                    .unwrap_or(0.0);
                per_lambda.push((
                    al_sum / al_n.max(1) as f64,
                    corpus_quality(&pairs).unwrap(),
                    if pw_n > 0 { pw_sum / pw_n as f64 } else { 0.0 },
                    grid_pw,
                ));
            }
            rows.push(per_lambda);
        }
        let base = &rows[0];
        let fused = &rows[1];
        let mut curve: Vec<(f64, f64)> = base.iter().map(|p| (p.0, p.1)).collect();
        curve.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let interp = |al: f64| -> f64 {
            if al <= curve[0].0 {
                curve[0].1
            } else if al >= curve[2].0 {
                curve[2].1
            } else {
                let w = if al <= curve[1].0 {
                    (curve[0], curve[1])
                } else {
                    (curve[1], curve[2])
                };
                let t = (al - w.0 .0) / (w.1 .0 - w.0 .0).max(1e-12);
                w.0 .1 + t * (w.1 .1 - w.0 .1)
            }
        };
        let mut wins = 0;
        for i in 0..3 {
            let pair_win = fused[i].1 >= base[i].1 - 1e-9 && fused[i].0 <= base[i].0 + 0.1;
            let win = pair_win || fused[i].1 >= interp(fused[i].0) - 1e-9;
            println!(
                "  seed {seed} lambda {}: base ({:.2}, {:.2}) fused ({:.2}, {:.2}) {}",
                lambdas[i], base[i].0, base[i].1, fused[i].0, fused[i].1,
                if win { "WIN" } else { "loss" }
            );
            if win {
                wins += 1;
            }
        }
        let gp: Vec<f64> = fused.iter().map(|p| p.3).collect();
        let dp: Vec<f64> = fused.iter().map(|p| p.2).collect();
        let gp_ok = gp[0] <= gp[1] + 1e-12 && gp[1] <= gp[2] + 1e-12;
        let dp_ok = dp[0] <= dp[1] + 1e-12 && dp[1] <= dp[2] + 1e-12;
        println!(
            "  seed {seed}: wins {wins}/3 | grid pw {:.4} {:.4} {:.4} ({}) | decode pw {:.4} {:.4} {:.4} ({})",
            gp[0], gp[1], gp[2], if gp_ok { "mono" } else { "x" },
            dp[0], dp[1], dp[2], if dp_ok { "mono" } else { "x" },
        );
        if wins >= 2 {
            crit6 += 1;
        }
        if gp_ok {
            crit7 += 1;
        }
    }
    println!("seg {segment} thr {threshold}: crit6 {crit6}/{} crit7 {crit7}/{}", seeds.len(), seeds.len());
}
