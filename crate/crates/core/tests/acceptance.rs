//! One line per acceptance criterion; exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::Rng;
use tinyllama::bench::run_bench;
use tinyllama::config::KvFile;
use tinyllama::data::{Corpus, MixtureSpec, Sampler, SamplerState};
use tinyllama::eval::{evaluate, McItem, McTask};
use tinyllama::infer::{decode_step, generate, prefill, GenerationConfig};
use tinyllama::model::{count_params, Model, ModelConfig};
use tinyllama::nn::{RotaryTable, SwiGluMlp};
use tinyllama::optim::{clip_grad_norm, global_norm, AdamWConfig, LrSchedule};
use tinyllama::tensor::grad_check;
use tinyllama::train::{
    train_loop, Checkpoint, FakeClock, MixtureSource, RunOutputs, SystemClock, TrainConfig, Trainer,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn param_count() -> Outcome {
    let n = count_params(&ModelConfig::full_scale());
    check(
        (1.045e9..=1.155e9).contains(&(n as f64)),
        format!("{n} parameters"),
    )
}

fn schedule_endpoints() -> Outcome {
    let s = LrSchedule::standard(10_000).map_err(|e| e.to_string())?;
    let peak = s.lr_at(2000);
    let end = s.lr_at(10_000);
    let mid = s.lr_at(6000);
    let before = s.lr_at(1999);
    let after = s.lr_at(2001);
    let ok = peak == 4.0e-4
        && end == 4.0e-5
        && (mid - 2.2e-4).abs() <= 1e-12
        && (peak - before).abs() < 1e-6
        && (peak - after).abs() < 1e-6;
    check(ok, format!("lr(2000)={peak:e} lr(total)={end:e} lr(mid)={mid:e} lr(1999)={before:e} lr(2001)={after:e}"))
}

fn gradient_checks() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut note = |name: &str, seed: u64, rep: tinyllama::tensor::GradCheckReport| {
        worst = worst.max(rep.max_rel_err);
        if !rep.passed {
            let w = rep.worst_index;
            failures.push(format!(
                "; {name}@{seed}: rel {:.2e} at {w} (analytic {:e}, numeric {:e})",
                rep.max_rel_err, rep.analytic[w], rep.numeric[w]
            ));
        }
    };
    for seed in 0..10 {
        let mut r = rng(1000 + seed);
        let x = random(&[6, 16], 1.0, &mut r);
        let probe = random(&[6, 16], 1.0, &mut r);
        let f = RmsNormFn {
            gain: random(&[16], 1.5, &mut r),
            probe: probe.clone(),
        };
        note(
            "rmsnorm",
            seed,
            grad_check(&f, &x, 1e-2).map_err(|e| e.to_string())?,
        );
        let f = RopeFn {
            table: RotaryTable::new(8, 32, 10000.0).unwrap(),
            start: seed as usize,
            probe: probe.clone(),
        };
        note(
            "rope",
            seed,
            grad_check(&f, &x, 1e-2).map_err(|e| e.to_string())?,
        );
        let f = SwiGluFn {
            mlp: SwiGluMlp {
                w_gate: random(&[16, 24], 0.4, &mut r),
                w_up: random(&[16, 24], 0.4, &mut r),
                w_down: random(&[24, 16], 0.4, &mut r),
            },
            probe: probe.clone(),
        };
        note(
            "swiglu",
            seed,
            grad_check(&f, &x, 1e-2).map_err(|e| e.to_string())?,
        );
        let f = AttentionFn {
            layer: random_attention(4, 2, 4, 16, &mut r),
            table: RotaryTable::new(4, 32, 10000.0).unwrap(),
            probe,
        };
        note(
            "gqa_attention",
            seed,
            grad_check(&f, &x, 1e-2).map_err(|e| e.to_string())?,
        );

        let model = small_model(seed);
        let tokens = random_tokens(12, model.cfg.vocab, &mut r);
        for index in 0..model.params.tensors().len() {
            let x = model.params.tensors()[index].2.clone();
            let f = LossFn {
                model: &model,
                tokens: tokens.clone(),
                index,
            };
            note(
                "lm_loss",
                seed,
                grad_check(&f, &x, 1e-2).map_err(|e| e.to_string())?,
            );
        }
    }
    check(
        failures.is_empty(),
        format!(
            "5 functions x 10 seeds, worst rel err {worst:.2e}{}",
            failures.concat()
        ),
    )
}

fn gqa_degeneration() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..10 {
        let mut r = rng(2000 + seed);
        let layer = random_attention(4, 4, 8, 32, &mut r);
        let table = RotaryTable::new(8, 64, 10000.0).unwrap();
        let x = random(&[r.gen_range(1..=24), 32], 1.0, &mut r);
        let got = attention(&layer, &table, &x, 0);
        worst = worst.max(max_abs_diff(
            got.data(),
            reference_mha(&layer, &x, 10000.0).data(),
        ));
    }
    check(
        worst <= 1e-5,
        format!("max abs diff {worst:.2e} over 10 inputs"),
    )
}

fn kv_cache_equivalence() -> Outcome {
    let model = Model::init(ModelConfig::desk(), 7).map_err(|e| e.to_string())?;
    let mut r = rng(3000);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let len = r.gen_range(1..=64);
        let tokens = random_tokens(len, 259, &mut r);
        let full = model.logits(&tokens, None, 0).map_err(|e| e.to_string())?;
        let (mut cache, first) = prefill(&model, &tokens[..1], len).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&first, full.row(0)));
        for (i, &t) in tokens.iter().enumerate().skip(1) {
            let row = decode_step(&model, &mut cache, t).map_err(|e| e.to_string())?;
            worst = worst.max(max_abs_diff(&row, full.row(i)));
        }
    }
    check(
        worst <= 1e-4,
        format!("20 prompts, max abs diff {worst:.2e}"),
    )
}

fn memorization() -> Outcome {
    let (trainer, tokens, loss) = memorize(300);
    let prompt = 8;
    let gen = GenerationConfig {
        max_new_tokens: tokens.len() - prompt,
        temperature: 0.0,
        stop_token: None,
        ..GenerationConfig::default()
    };
    let out = generate(&trainer.model, &tokens[..prompt], &gen).map_err(|e| e.to_string())?;
    let exact = out == tokens[prompt..];
    check(
        loss < 0.05 && exact,
        format!("loss {loss:.2e} after 300 steps, continuation reproduced: {exact}"),
    )
}

fn mixture_ratio() -> Outcome {
    let spec = MixtureSpec::default();
    let corpus = Corpus::new(&two_source_corpus(), &spec).map_err(|e| e.to_string())?;
    let mut sampler = Sampler::new(corpus, spec, 17).map_err(|e| e.to_string())?;
    let mut code = 0;
    for _ in 0..10_000 {
        let (source, _) = sampler.next_block(64).map_err(|e| e.to_string())?;
        code += (source == "code") as usize;
    }
    let frac = code as f64 / 10_000.0;
    check(
        (0.28..=0.32).contains(&frac),
        format!("code fraction {frac:.4}"),
    )
}

fn resume_run(total: u64, stop_at: Option<u64>) -> Result<Vec<u32>, String> {
    let e = |e: tinyllama::Error| e.to_string();
    let spec = MixtureSpec::default();
    let shards = two_source_corpus();
    let new_source = |state: SamplerState| -> Result<MixtureSource, String> {
        let corpus = Corpus::new(&shards, &spec).map_err(e)?;
        Ok(MixtureSource {
            sampler: Sampler::resume(corpus, spec.clone(), state).map_err(e)?,
            batch_tokens: 128,
            block_len: 64,
        })
    };
    let schedule = LrSchedule::new(3e-3, 3e-4, 10, total).map_err(e)?;
    let model = Model::init(ModelConfig::desk(), 11).map_err(e)?;
    let mut trainer = Trainer::new(model, AdamWConfig::default(), schedule, 1.0);
    let mut source = new_source(SamplerState::new(23))?;
    let mut clock = FakeClock::new(1.0);
    let out = RunOutputs::default();
    if let Some(k) = stop_at {
        train_loop(&mut trainer, k, 0, 1000, &mut source, &mut clock, &out).map_err(e)?;
        let bytes = trainer
            .checkpoint(Some(source.sampler.state().clone()))
            .to_bytes()
            .map_err(e)?;
        drop((trainer, source));
        let ck = Checkpoint::from_bytes(&bytes).map_err(e)?;
        let state = ck
            .sampler
            .clone()
            .ok_or("checkpoint lost the sampler state")?;
        trainer = Trainer::from_checkpoint(ck).map_err(e)?;
        source = new_source(state)?;
    }
    train_loop(&mut trainer, total, 0, 1000, &mut source, &mut clock, &out).map_err(e)?;
    Ok(trainer
        .model
        .params
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()))
        .chain(trainer.opt.m.iter().flatten().map(|x| x.to_bits()))
        .chain(trainer.opt.v.iter().flatten().map(|x| x.to_bits()))
        .collect())
}

fn resume_determinism() -> Outcome {
    let straight = resume_run(200, None)?;
    let mut details = Vec::new();
    let mut ok = true;
    for k in [1, 17, 100] {
        let resumed = resume_run(200, Some(k))?;
        let same = resumed == straight;
        ok &= same;
        details.push(format!(
            "k={k}: {}",
            if same { "bit-equal" } else { "differs" }
        ));
    }
    check(ok, format!("200-step desk run, {}", details.join(", ")))
}

fn clipping_invariant() -> Outcome {
    let mut r = rng(4000);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let scale = 10f32.powf(r.gen_range(-3.0..4.0));
        let mut grads: Vec<Vec<f32>> = (0..r.gen_range(1..6))
            .map(|_| {
                (0..r.gen_range(1..500))
                    .map(|_| r.gen_range(-scale..scale))
                    .collect()
            })
            .collect();
        clip_grad_norm(&mut grads, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max(global_norm(&grads));
    }
    check(
        worst <= 1.0 + 1e-6,
        format!("max post-clip norm {worst:.9} over 100 sets"),
    )
}

fn eval_sanity() -> Outcome {
    let e = |e: tinyllama::Error| e.to_string();
    // Random model, 4 choices, 400 items: chance is 0.25 with sd sqrt(.25*.75/400).
    let model = Model::init(ModelConfig::desk(), 31).map_err(e)?;
    let mut r = rng(5000);
    let items = (0..400)
        .map(|_| McItem {
            context: random_tokens(r.gen_range(3..10), 256, &mut r),
            choices: (0..4)
                .map(|_| random_tokens(r.gen_range(1..6), 256, &mut r))
                .collect(),
            answer: r.gen_range(0..4),
        })
        .collect();
    let random_report = evaluate(&model, &McTask::new("random", items).map_err(e)?).map_err(e)?;
    let sd = (0.25f64 * 0.75 / 400.0).sqrt();
    let chance_ok = (random_report.accuracy - 0.25).abs() <= 4.0 * sd;

    let (trainer, tokens, _) = memorize(300);
    let items = (8..56)
        .step_by(4)
        .map(|cut| {
            let answer = cut % 3;
            let truth = tokens[cut..cut + 6].to_vec();
            let choices = (0..3)
                .map(|c| {
                    if c == answer {
                        truth.clone()
                    } else {
                        truth.iter().map(|&t| (t + 1 + c as u32) % 256).collect()
                    }
                })
                .collect();
            McItem {
                context: tokens[..cut].to_vec(),
                choices,
                answer,
            }
        })
        .collect();
    let memo_report =
        evaluate(&trainer.model, &McTask::new("memorized", items).map_err(e)?).map_err(e)?;
    check(
        chance_ok && memo_report.accuracy == 1.0,
        format!(
            "random model {:.4} (chance 0.25 +/- {:.4}), overfit model {:.2} on {} memorized items",
            random_report.accuracy,
            4.0 * sd,
            memo_report.accuracy,
            memo_report.items
        ),
    )
}

fn bench_definition() -> Outcome {
    let e = |e: tinyllama::Error| e.to_string();
    let kv =
        KvFile::parse("preset = desk\nbatch_tokens = 256\ntotal_steps = 100\nwarmup_steps = 10\n")
            .map_err(e)?;
    let cfg = TrainConfig::from_kv(&kv).map_err(e)?;
    let fake = run_bench(&cfg, 3, &mut FakeClock::new(0.5)).map_err(e)?;
    let exact =
        fake.train_tokens_per_sec.mean == 256.0 / 0.5 && fake.train_tokens_per_sec.stddev == 0.0;
    let real = run_bench(&cfg, 10, &mut SystemClock::default()).map_err(e)?;
    let s = &real.train_tokens_per_sec;
    let reported = real.step_seconds.len() >= 10 && s.mean > 0.0 && s.stddev.is_finite();
    check(
        exact && reported,
        format!(
            "fake clock {} tok/s (want 512), real {:.0} +/- {:.0} tok/s over {} steps",
            fake.train_tokens_per_sec.mean,
            s.mean,
            s.stddev,
            real.step_seconds.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("parameter count", param_count),
        ("schedule endpoints", schedule_endpoints),
        ("gradient correctness", gradient_checks),
        ("gqa degeneration", gqa_degeneration),
        ("kv cache equivalence", kv_cache_equivalence),
        ("memorization", memorization),
        ("mixture ratio", mixture_ratio),
        ("resume determinism", resume_determinism),
        ("clipping invariant", clipping_invariant),
        ("eval scoring sanity", eval_sanity),
        ("bench definition", bench_definition),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {:>2} {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
