//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration as StdDuration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgmem_core::config::Config;
use kgmem_core::decay;
use kgmem_core::engine::{MemoryContext, MemoryEngine, Scenario, TurnRequest};
use kgmem_core::eval::{self, Category, Dataset, EvalOptions, Evaluator, Mode};
use kgmem_core::index::{EmbeddingIndex, IndexEntry};
use kgmem_core::provider::{Embedding, MockProvider, Provider};
use kgmem_core::store::SummaryRecord;
use kgmem_core::time::{from_millis, to_millis, Timestamp};
use kgmem_core::tokens::count_tokens;
use kgmem_core::EngineError;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const T0_MS: i64 = 1_700_000_000_000;

fn t(minutes: i64) -> Timestamp {
    from_millis(T0_MS + minutes * 60_000)
}

fn mock_engine(config: Config) -> MemoryEngine {
    let provider = Arc::new(MockProvider::new(config.provider.embed_dim, config.provider.mock_seed));
    MemoryEngine::in_memory(config, provider).expect("engine")
}

fn relative_error(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Straight transcription of the weighting rule, kept apart from the crate.
fn oracle_weights(ages_min: &[f64], rate: f64) -> Vec<f64> {
    let lo = ages_min.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ages_min.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = ages_min
        .iter()
        .map(|a| {
            let x = if hi > lo { (a - lo) / (hi - lo) } else { 0.0 };
            (-rate * x).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

fn weighting_matches_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rates = [0.005, 0.02, 0.1];
    let now = t(0);
    let mut worst = 0.0f64;
    for batch in 0..1000 {
        let n = rng.random_range(1..=50);
        let rate = rates[batch % rates.len()];
        let ages_ms: Vec<i64> = (0..n).map(|_| rng.random_range(0..=100_000 * 60_000)).collect();
        let items: Vec<(usize, Timestamp)> = ages_ms
            .iter()
            .enumerate()
            .map(|(i, a)| (i, from_millis(T0_MS - a)))
            .collect();
        let got = decay::weigh(items, now, rate).map_err(|e| e.to_string())?;
        let ages_min: Vec<f64> = ages_ms.iter().map(|a| *a as f64 / 60_000.0).collect();
        let want = oracle_weights(&ages_min, rate);
        let sum: f64 = got.iter().map(|w| w.weight).sum();
        ensure!((sum - 1.0).abs() <= 1e-9, "batch {batch}: weights sum to {sum}");
        for (g, w) in got.iter().zip(&want) {
            let err = relative_error(g.weight, *w);
            worst = worst.max(err);
            ensure!(err <= 1e-12, "batch {batch}: weight {} vs oracle {w} (rel {err:e})", g.weight);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < StdDuration::from_secs(5), "took {elapsed:?}");
    Ok(format!("1000 batches, worst rel err {worst:.1e}, {elapsed:.2?}"))
}

fn equal_ages_give_uniform_weights() -> Outcome {
    for rate in [0.005, 0.02, 0.1] {
        for n in 1..=50usize {
            let items: Vec<(usize, Timestamp)> = (0..n).map(|i| (i, t(-30))).collect();
            let got = decay::weigh(items, t(0), rate).map_err(|e| e.to_string())?;
            let want = 1.0 / n as f64;
            ensure!(
                got.iter().all(|w| w.weight == want),
                "rate {rate}, N={n}: {:?}",
                got.iter().map(|w| w.weight).collect::<Vec<_>>()
            );
        }
    }
    Ok("N = 1..50 exactly 1/N".into())
}

fn recency_wins_for_revised_fact() -> Outcome {
    let e = mock_engine(Config::default());
    let turn = |s: &str, text: &str, m: i64| TurnRequest::new("pat", s, text, t(m));
    e.record_turn(&turn("s1", "My shoes are under the bed.", 0), "Got it.")
        .map_err(|e| e.to_string())?;
    e.record_turn(&turn("s2", "My shoes are in the closet.", 60), "Updated.")
        .map_err(|e| e.to_string())?;
    let ctx = e
        .retrieve_context(&turn("s3", "Where are my shoes?", 61))
        .map_err(|e| e.to_string())?;
    let weight = |object: &str| {
        ctx.weighted_triplets
            .iter()
            .find(|w| w.triplet.triplet.object == object)
            .map(|w| w.weight)
    };
    let (old, new) = (weight("the bed"), weight("the closet"));
    let (Some(old), Some(new)) = (old, new) else {
        return Err(format!("missing triplets in {:?}", ctx.rendered_context));
    };
    ensure!(new > old, "revised weight {new} not above original {old}");
    for line in ["(My shoes, are under, the bed)", "(My shoes, are in, the closet)"] {
        ensure!(ctx.rendered_context.contains(line), "context lacks {line}");
    }
    Ok(format!("closet {new:.6} > bed {old:.6}, both rendered"))
}

fn brute_force_top_k(entries: &[IndexEntry], query: &[f64], user: &str, k: usize) -> Vec<u64> {
    let mut scored: Vec<(f64, i64, u64)> = entries
        .iter()
        .filter(|e| e.user_name == user)
        .map(|e| {
            let v: Vec<f64> = e.vector.iter().map(|x| f64::from(*x)).collect();
            let dot: f64 = query.iter().zip(&v).map(|(a, b)| a * b).sum();
            let nq = query.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let sim = if nq == 0.0 || nv == 0.0 { 0.0 } else { dot / (nq * nv) };
            (sim, to_millis(&e.created_at), e.entry_id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    scored.into_iter().take(k).map(|s| s.2).collect()
}

fn retrieval_matches_brute_force() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 256;
    let users = ["u0", "u1", "u2"];
    let mut compared = 0;
    for state in 0..50 {
        let index = EmbeddingIndex::in_memory(dim);
        let n = rng.random_range(0..=1000);
        let mut entries = Vec::with_capacity(n);
        let mut pool: Vec<Vec<f32>> = Vec::new();
        for id in 0..n as u64 {
            // Reuse earlier vectors and timestamps so ties actually occur.
            let vector = if !pool.is_empty() && rng.random_bool(0.2) {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                pool.push(v.clone());
                v
            };
            let entry = IndexEntry {
                entry_id: id,
                user_name: users[rng.random_range(0..users.len())].to_string(),
                vector,
                payload: format!("t-{id}"),
                created_at: t(rng.random_range(0..5)),
            };
            index.add(entry.clone()).map_err(|e| e.to_string())?;
            entries.push(entry);
        }
        for _ in 0..3 {
            let query: Vec<f64> = if !pool.is_empty() && rng.random_bool(0.5) {
                pool[rng.random_range(0..pool.len())].iter().map(|x| f64::from(*x)).collect()
            } else {
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let k = [1, 5, 20, 50][rng.random_range(0..4)];
            let user = users[rng.random_range(0..users.len())];
            let embedding = Embedding::new(query.clone()).map_err(|e| e.to_string())?;
            let got: Vec<u64> = index
                .query_top_k(&embedding, user, k)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|s| s.entry.entry_id)
                .collect();
            let want = brute_force_top_k(&entries, &query, user, k);
            ensure!(got == want, "state {state}, user {user}, k={k}: {got:?} != {want:?}");
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < StdDuration::from_secs(10), "took {elapsed:?}");
    Ok(format!("50 states, {compared} queries identical, {elapsed:.2?}"))
}

fn check_context_invariants(ctx: &MemoryContext, max_tokens: usize, k: usize) -> Result<(), String> {
    match ctx.scenario {
        Scenario::NewUserNewSession => {
            ensure!(ctx.session_summary.is_none(), "scenario 1 with a summary");
            ensure!(ctx.weighted_triplets.is_empty(), "scenario 1 with triplets");
        }
        Scenario::RepeatUserNewSession => ensure!(ctx.session_summary.is_none(), "scenario 2 with a summary"),
        Scenario::RepeatUserOngoingSession => ensure!(ctx.session_summary.is_some(), "scenario 3 without summary"),
    }
    ensure!(ctx.weighted_triplets.len() <= k, "more than k triplets");
    ensure!(ctx.context_token_count <= max_tokens, "context over budget");
    ensure!(
        ctx.context_token_count == count_tokens(&ctx.rendered_context),
        "token count disagrees with rendered text"
    );
    if !ctx.weighted_triplets.is_empty() {
        let sum: f64 = ctx.weighted_triplets.iter().map(|w| w.weight).sum();
        ensure!((sum - 1.0).abs() <= 1e-9, "weights sum to {sum}");
    }
    Ok(())
}

fn scenarios_dispatch_in_order() -> Outcome {
    let config = Config::default();
    let (budget, k) = (config.context.max_tokens, config.retrieval.k);
    let e = mock_engine(config);
    let script = [
        ("s1", "My dog is Rex.", "Cute name."),
        ("s2", "I live in Lyon.", "Nice city."),
        ("s2", "Where do I live?", "In Lyon."),
    ];
    let mut seen = Vec::new();
    for (i, (session, user, assistant)) in script.iter().enumerate() {
        let request = TurnRequest::new("quinn", *session, *user, t(i as i64));
        let ctx = e.retrieve_context(&request).map_err(|e| e.to_string())?;
        check_context_invariants(&ctx, budget, k)?;
        seen.push(ctx.scenario.number());
        e.record_turn(&request, assistant).map_err(|e| e.to_string())?;
    }
    ensure!(seen == [1, 2, 3], "scenario sequence {seen:?}");

    e.store()
        .upsert_summary(&SummaryRecord {
            session_id: "orphan".into(),
            user_name: "nobody".into(),
            summary_text: "injected".into(),
            updated_at: t(10),
            turns_covered: 1,
        })
        .map_err(|e| e.to_string())?;
    match e.retrieve_context(&TurnRequest::new("nobody", "orphan", "hi", t(11))) {
        Err(EngineError::Corruption { .. }) => {}
        other => return Err(format!("injected fourth state gave {other:?}")),
    }
    Ok("sequence 1, 2, 3; fourth state rejected as corruption".into())
}

const FILLER_USER: &str = "Yesterday the weather felt pleasant and the market near the old bridge had fresh \
bread, apples, cheese, honey, flowers and spices for sale, so we walked around for hours, chatted with \
vendors about recipes, compared prices, tasted samples and finally carried everything home before dinner";

const FILLER_ASSISTANT: &str = "That sounds like a lovely afternoon. Markets like that are a great way to \
discover seasonal produce, and chatting with vendors often turns up recipes you would never find online. \
If you bought honey and cheese together, a simple pairing board with some sliced apples and toasted bread \
makes an easy starter. Let me know if you want ideas for using the spices as well, since many of them keep \
their flavour best when toasted briefly in a dry pan before grinding";

fn memory_context_is_far_smaller() -> Outcome {
    let config = Config::default();
    let budget = config.context.max_tokens;
    ensure!(budget == 400, "default context budget is {budget}");
    let e = mock_engine(config);
    let mut worst = 0;
    for i in 0..50 {
        let user = format!("My hobby{i} is craft{i}. {FILLER_USER}");
        let request = TurnRequest::new("rae", "long", user, t(i));
        let ctx = e.retrieve_context(&request).map_err(|e| e.to_string())?;
        worst = worst.max(ctx.context_token_count);
        ensure!(ctx.context_token_count <= budget, "turn {i}: {} tokens", ctx.context_token_count);
        e.record_turn(&request, FILLER_ASSISTANT).map_err(|e| e.to_string())?;
    }
    let question = TurnRequest::new("rae", "long", "What is my hobby7?", t(50));
    let memoria = e.retrieve_context(&question).map_err(|e| e.to_string())?;
    ensure!(memoria.context_token_count <= budget, "final context {} tokens", memoria.context_token_count);
    let history = e.store().get_session_messages("long").map_err(|e| e.to_string())?;
    let full = eval::render_transcript(history.iter().map(|m| (m.role, m.content.as_str())));
    let full_tokens = count_tokens(&full);
    let ratio = full_tokens as f64 / memoria.context_token_count as f64;
    ensure!(ratio >= 20.0, "full {full_tokens} vs memoria {} = {ratio:.1}x", memoria.context_token_count);
    Ok(format!(
        "full-context {full_tokens} vs memoria {} tokens ({ratio:.1}x), max per turn {worst}",
        memoria.context_token_count
    ))
}

fn transcript_run() -> Result<String, String> {
    let e = mock_engine(Config::default());
    let mut out = String::new();
    let script = [
        ("u1", "a", "My shoes are under the bed.", "Noted."),
        ("u1", "a", "I live in Porto.", "Lovely."),
        ("u2", "x", "My cat is Tom.", "Hi Tom."),
        ("u1", "b", "My shoes are in the closet.", "Updated."),
        ("u1", "b", "Where are my shoes?", "In the closet."),
        ("u2", "y", "What is my cat called?", "Tom."),
    ];
    for (i, (user, session, text, reply)) in script.iter().enumerate() {
        let request = TurnRequest::new(*user, *session, *text, t(i as i64 * 7));
        let ctx = e.retrieve_context(&request).map_err(|e| e.to_string())?;
        let receipt = e.record_turn(&request, reply).map_err(|e| e.to_string())?;
        out.push_str(&serde_json::to_string(&ctx).unwrap());
        out.push_str(&serde_json::to_string(&receipt).unwrap());
    }
    for session in ["a", "b", "x", "y"] {
        out.push_str(&serde_json::to_string(&e.get_summary(session).map_err(|e| e.to_string())?).unwrap());
    }
    let dataset = Dataset {
        instances: eval::synthetic_dataset(3, 3),
        skipped: Vec::new(),
    };
    let config = Config::default();
    let provider: Arc<dyn Provider> = Arc::new(MockProvider::new(config.provider.embed_dim, 0));
    let options = EvalOptions {
        timing: false,
        compare_ablation: true,
        ..EvalOptions::default()
    };
    let report = Evaluator::new(config, provider)
        .run(&dataset, &options)
        .map_err(|e| e.to_string())?;
    out.push_str(&report.to_json());
    Ok(out)
}

fn replays_are_identical() -> Outcome {
    let first = transcript_run()?;
    let second = transcript_run()?;
    ensure!(first == second, "two replays differ");
    Ok(format!("{} bytes identical across runs", first.len()))
}

fn synthetic_eval_end_to_end() -> Outcome {
    let start = Instant::now();
    let dataset = Dataset {
        instances: eval::synthetic_dataset(10, 10),
        skipped: Vec::new(),
    };
    let run = |decay_rate: f64| {
        let mut config = Config::default();
        config.retrieval.decay_rate = decay_rate;
        let provider: Arc<dyn Provider> = Arc::new(MockProvider::new(config.provider.embed_dim, 0));
        let options = EvalOptions {
            mode: Mode::Memoria,
            timing: false,
            ..EvalOptions::default()
        };
        Evaluator::new(config, provider).run(&dataset, &options).map_err(|e| e.to_string())
    };
    let decayed = run(0.02)?;
    ensure!(decayed.total == 20, "scored {} instances", decayed.total);
    ensure!(decayed.accuracy == Some(1.0), "memoria accuracy {:?}", decayed.accuracy);
    let uniform = run(0.0)?;
    let ku = |r: &eval::EvalReport| r.categories.get(&Category::KnowledgeUpdate).and_then(|c| c.accuracy);
    let (with, without) = (ku(&decayed), ku(&uniform));
    let (Some(with), Some(without)) = (with, without) else {
        return Err("knowledge-update category missing".into());
    };
    ensure!(without < with, "no-decay run scored {without} vs {with}");
    let elapsed = start.elapsed();
    ensure!(elapsed < StdDuration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "accuracy 1.0; knowledge-update {with:.2} with decay vs {without:.2} without; {elapsed:.2?}"
    ))
}

fn dual_write_stays_consistent() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = Config::default();
    config.store.path = dir.path().join("memory.sqlite3");
    config.index.path = dir.path().join("memory.index");
    let users: Vec<String> = (0..10).map(|u| format!("user{u}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut plan: Vec<usize> = (0..500).map(|i| i % users.len()).collect();
    plan.shuffle(&mut rng);
    let texts = [
        "My dog is Rex.",
        "I live in Oslo. My car is blue.",
        "hello there",
        "My shoes are in the closet; I work at Acme.",
        "What is my dog?",
    ];
    let engine = Arc::new(MemoryEngine::open(config.clone()).map_err(|e| e.to_string())?);
    // Each worker owns a subset of users, so per-session order is kept
    // while calls for different users interleave.
    let mut per_worker: Vec<Vec<(usize, usize, String)>> = vec![Vec::new(); 4];
    for (step, user) in plan.iter().enumerate() {
        let text = format!("{} Item{step} is thing{step}.", texts[rng.random_range(0..texts.len())]);
        per_worker[user % 4].push((step, *user, text));
    }
    let handles: Vec<_> = per_worker
        .into_iter()
        .map(|ops| {
            let engine = engine.clone();
            let users = users.clone();
            std::thread::spawn(move || -> Result<(), String> {
                for (step, user, text) in ops {
                    let session = format!("{}-s{}", users[user], step / 100);
                    let request = TurnRequest::new(&users[user], session, text, t(step as i64));
                    let receipt = engine.record_turn(&request, "ok").map_err(|e| e.to_string())?;
                    if !receipt.failures.is_empty() {
                        return Err(format!("stage failures: {:?}", receipt.failures));
                    }
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "worker panicked".to_string())??;
    }
    let check = |engine: &MemoryEngine| -> Result<HashMap<String, u64>, String> {
        let mut counts = HashMap::new();
        for user in &users {
            let rows = engine.store().triplet_count(user).map_err(|e| e.to_string())?;
            let entries = engine.index().count_for_user(user) as u64;
            ensure!(rows == entries, "{user}: {rows} rows vs {entries} index entries");
            counts.insert(user.clone(), rows);
        }
        Ok(counts)
    };
    let live = check(&engine)?;
    drop(engine);
    let reopened = MemoryEngine::open(config).map_err(|e| e.to_string())?;
    let after = check(&reopened)?;
    ensure!(live == after, "counts changed across reopen");
    let total: u64 = live.values().sum();
    Ok(format!("500 turns, 10 users, {total} triplets, rows == entries per user (also after reopen)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("weighting matches brute-force oracle", weighting_matches_oracle),
        ("equal ages give uniform weights", equal_ages_give_uniform_weights),
        ("revised fact outweighs original", recency_wins_for_revised_fact),
        ("top-k matches brute-force cosine", retrieval_matches_brute_force),
        ("scenario dispatch 1, 2, 3", scenarios_dispatch_in_order),
        ("memory context far below full context", memory_context_is_far_smaller),
        ("deterministic replay", replays_are_identical),
        ("synthetic eval end to end", synthetic_eval_end_to_end),
        ("dual-write consistency", dual_write_stays_consistent),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
