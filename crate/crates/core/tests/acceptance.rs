//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process exits non-zero if any fail.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use normbridge_core::backends::shaping::FaultMode;
use normbridge_core::backends::{invoke_with_fallback, BackendReply, BackendRequest, Task};
use normbridge_core::config::AppConfig;
use normbridge_core::ensemble::synthetic::{self, SyntheticSet};
use normbridge_core::ensemble::{
    loss_and_gradient, one_hot, stack_features, train_stacker, FeatureVector, StackingModel,
    TrainConfig,
};
use normbridge_core::eval::{bleu, bleu_with, cohens_kappa, micro_prf, rouge_l_f1, BleuOptions};
use normbridge_core::fsm::{
    advance, EngineEvent, EngineState, EventKind, LatencyPath, TimeoutPolicy,
};
use normbridge_core::model::{
    CorrectionBundle, DeliveryKind, DialogueTurn, Impact, LangTag, NormAnalysis, Provenance, Role,
    SenderChoice, Timestamp, TurnId, Utterance,
};
use normbridge_core::replay::{replay_blocking, ReplayOutcome, ScriptedDialogue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn config(name: &str) -> AppConfig {
    AppConfig::load(&fixtures().join(name)).expect("fixture config")
}

fn script(text: &str) -> ScriptedDialogue {
    ScriptedDialogue::parse(text).expect("script")
}

fn study_script() -> ScriptedDialogue {
    script(&std::fs::read_to_string(fixtures().join("user_study.script")).unwrap())
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Routing

/// What the receiver should get, written independently of the engine.
fn expected_route(
    violated: bool,
    impact: Impact,
    choice: SenderChoice,
    default: DeliveryKind,
) -> DeliveryKind {
    match (violated, impact, choice) {
        (false, _, _) => DeliveryKind::Translation,
        (true, Impact::Low, _) => DeliveryKind::Remediation,
        (true, Impact::High, SenderChoice::Translation) => DeliveryKind::Translation,
        (true, Impact::High, SenderChoice::Remediation) => DeliveryKind::Remediation,
        (true, Impact::High, SenderChoice::TimedOut) => default,
    }
}

/// Walks one turn through the state machine and returns what was delivered.
fn route_through_fsm(
    violated: bool,
    impact: Impact,
    choice: SenderChoice,
    policy: &TimeoutPolicy,
) -> Result<(DeliveryKind, String), String> {
    let cats = config("study.json").categories;
    let category = cats.by_name("request").unwrap();
    let id = TurnId(7);
    let mut turn = DialogueTurn::new(Utterance {
        id,
        speaker: Role::Sme,
        source_text: String::new(),
        source_lang: LangTag::new("en"),
        translated_text: None,
        target_lang: LangTag::new("zh"),
        received_at: Timestamp(0),
    });
    let bundle = CorrectionBundle {
        translation: "T".into(),
        remediation: "R".into(),
        justification: "J".into(),
        remediation_provenance: Provenance::PrimaryBackend,
        justification_provenance: Provenance::PrimaryBackend,
    };
    let mut events = vec![
        EventKind::SpeechReceived,
        EventKind::TranscriptReady { text: "s".into() },
        EventKind::TranslationReady { text: "T".into() },
        EventKind::AnalysisReady {
            category: category.clone(),
            violated,
        },
    ];
    if violated {
        events.push(EventKind::GenerationReady {
            analysis: NormAnalysis::violating(category, impact),
            bundle,
        });
        if impact == Impact::High {
            events.push(match choice {
                SenderChoice::Translation => EventKind::ChoiceReceived {
                    choice: DeliveryKind::Translation,
                },
                SenderChoice::Remediation => EventKind::ChoiceReceived {
                    choice: DeliveryKind::Remediation,
                },
                SenderChoice::TimedOut => EventKind::ChoiceTimeout,
            });
        }
    }
    let mut state = EngineState::Idle;
    for (t, kind) in events.into_iter().enumerate() {
        let ev = EngineEvent::new("s", id, kind);
        state = advance(state, &ev, &mut turn, policy, Timestamp(t as u64))
            .map_err(|e| e.to_string())?
            .0;
    }
    if state != EngineState::Delivering {
        return Err(format!("ended in {state:?}"));
    }
    Ok((
        turn.delivery_kind.ok_or("no delivery kind")?,
        turn.delivered_text.ok_or("no delivered text")?,
    ))
}

fn routing_truth_table() -> Verdict {
    let started = Instant::now();
    let mut rows = 0;
    let mut bad = Vec::new();
    for default in [DeliveryKind::Translation, DeliveryKind::Remediation] {
        let policy = TimeoutPolicy {
            timeout: Duration::from_secs(60),
            on_timeout: default,
        };
        for violated in [false, true] {
            for impact in [Impact::Low, Impact::High] {
                for choice in [
                    SenderChoice::Translation,
                    SenderChoice::Remediation,
                    SenderChoice::TimedOut,
                ] {
                    rows += 1;
                    let want = expected_route(violated, impact, choice, default);
                    let want_text = match want {
                        DeliveryKind::Translation => "T",
                        DeliveryKind::Remediation => "R",
                    };
                    match route_through_fsm(violated, impact, choice, &policy) {
                        Ok((kind, text)) if kind == want && text == want_text => {}
                        other => bad.push(format!(
                            "violated={violated} {impact:?} {choice:?} default={default:?}: {other:?}"
                        )),
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    check(
        bad.is_empty() && elapsed < Duration::from_secs(1),
        format!(
            "routing truth table: {}/{rows} rows agree in {elapsed:.2?} (limit 1 s){}",
            rows - bad.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!("; {}", bad.join(" | "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// User-study replay

fn user_study_replay() -> Verdict {
    let started = Instant::now();
    let out = replay_blocking(&config("study.json"), &study_script()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let c = out.choices;
    let ratio = c.ratio.unwrap_or(f64::NAN);
    let target = 56.0 / 117.0;
    check(
        c.low_impact_count == 25
            && c.high_impact_count == 117
            && c.remediation_chosen_count == 56
            && (ratio - target).abs() <= 1e-3
            && elapsed < Duration::from_secs(30),
        format!(
            "user-study replay: low={} high={} remediation={} ratio={ratio:.6} (target {target:.6} +/- 1e-3) in {elapsed:.2?} (limit 30 s)",
            c.low_impact_count, c.high_impact_count, c.remediation_chosen_count
        ),
    )
}

// ---------------------------------------------------------------------------
// Fallback

fn all_primaries_hang() -> Verdict {
    let mut cfg = config("study.json");
    for task in Task::ALL {
        let spec = cfg.backends.spec_mut(task);
        let mut backup = spec.primary.clone();
        backup.failure_rate = 0.0;
        spec.primary.failure_rate = 1.0;
        spec.primary.failure_mode = FaultMode::Hang;
        spec.backup = Some(backup);
    }
    let dialogue = study_script();
    let out = replay_blocking(&cfg, &dialogue).map_err(|e| e.to_string())?;
    let completed = out
        .history
        .iter()
        .filter(|t| t.delivered_text.is_some())
        .count();
    let bundles_from_backup = out
        .history
        .iter()
        .filter_map(|t| t.bundle.as_ref())
        .all(|b| {
            b.remediation_provenance == Provenance::BackupBackend
                && b.justification_provenance == Provenance::BackupBackend
        });
    let mut usage = Vec::new();
    let mut all_backup = true;
    for task in Task::ALL {
        let (calls, backup) = out.backend_usage.get(&task).copied().unwrap_or((0, 0));
        all_backup &= calls > 0 && calls == backup;
        usage.push(format!("{task} {backup}/{calls}"));
    }
    check(
        completed == dialogue.steps.len() && bundles_from_backup && all_backup,
        format!(
            "fallback, primaries always time out: {completed}/{} turns delivered, backup answers {}",
            dialogue.steps.len(),
            usage.join(", ")
        ),
    )
}

fn thirty_percent_faults() -> Verdict {
    let mut cfg = config("study.json");
    let spec = cfg.backends.spec_mut(Task::Asr);
    spec.backup = Some(spec.primary.clone());
    spec.primary.failure_rate = 0.3;
    spec.primary.failure_mode = FaultMode::Error;
    spec.primary.seed = 2024;
    let backends = cfg.build_backends(None).map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .unwrap();
    let (completed, backup) = rt.block_on(async {
        let pair = backends.pair(Task::Asr);
        let (mut completed, mut backup) = (0u32, 0u32);
        for i in 0..1000 {
            let req = BackendRequest::new(Task::Asr, format!("utterance {i}"));
            if let Ok(resp) =
                invoke_with_fallback(pair, &req, |_, r: BackendReply| Ok(r.text)).await
            {
                completed += 1;
                if resp.provenance == Provenance::BackupBackend {
                    backup += 1;
                }
            }
        }
        (completed, backup)
    });
    let share = backup as f64 / 1000.0;
    check(
        completed == 1000 && (share - 0.30).abs() <= 0.02,
        format!("fallback, 30% injected failures: {completed}/1000 calls completed, backup share {share:.3} (target 0.300 +/- 0.02)"),
    )
}

// ---------------------------------------------------------------------------
// Ensemble

/// Accuracy of the rule "score = one-hot(A) + 2 * P_B", with the smallest
/// gap between the true class and the runner-up. A positive gap on every
/// row means the data is linearly separable in the stacked features.
fn linear_rule_margin(set: &SyntheticSet) -> (f64, f64) {
    let mut correct = 0;
    let mut margin = f64::INFINITY;
    for (f, &y) in set.features.iter().zip(&set.labels) {
        let k = f.classes();
        let (a, p) = f.values().split_at(k);
        let scores: Vec<f64> = (0..k).map(|c| a[c] + 2.0 * p[c]).collect();
        let best_other = (0..k)
            .filter(|&c| c != y)
            .map(|c| scores[c])
            .fold(f64::NEG_INFINITY, f64::max);
        margin = margin.min(scores[y] - best_other);
        if scores[y] > best_other {
            correct += 1;
        }
    }
    (correct as f64 / set.len() as f64, margin)
}

fn accuracy(preds: &[usize], gold: &[usize]) -> f64 {
    preds.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

fn stacker_beats_bases() -> Verdict {
    let mut wins = 0;
    let mut worst = f64::INFINITY;
    let mut separable = true;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let set = synthetic::complementary(8, 1000, seed);
        let (acc, margin) = linear_rule_margin(&set);
        separable &= acc == 1.0 && margin > 0.0;
        let (train, test) = set.split(300);
        let trained = train_stacker(
            &train.features,
            &train.labels,
            &TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let preds: Vec<usize> = test
            .features
            .iter()
            .map(|f| trained.model.predict(f).unwrap().0)
            .collect();
        let stacked = micro_prf(&preds, &test.labels, 8).unwrap().f1_micro;
        let a = micro_prf(&test.base_a, &test.labels, 8).unwrap().f1_micro;
        let b = micro_prf(&test.base_b, &test.labels, 8).unwrap().f1_micro;
        // The library metric is checked against plain accuracy elsewhere; re-derive here too.
        debug_assert_eq!(stacked, accuracy(&preds, &test.labels));
        let gap = stacked - a.max(b);
        worst = worst.min(gap);
        if gap >= 0.05 {
            wins += 1;
        } else {
            notes.push(format!(
                "seed {seed}: stacked {stacked:.3} A {a:.3} B {b:.3}"
            ));
        }
    }
    check(
        wins == 10 && separable,
        format!(
            "stacker vs base models: {wins}/10 seeds with margin >= 0.05 (smallest {worst:.3}), data separable: {separable}{}",
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join(" | ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// Metric oracles

fn ngram_list(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
}

/// Clipped n-gram matches by repeated linear search.
fn clipped_matches(cand: &[String], reference: &[String], n: usize) -> (u64, u64) {
    let cand_grams = ngram_list(cand, n);
    let mut pool = ngram_list(reference, n);
    let mut matched = 0;
    for g in &cand_grams {
        if let Some(pos) = pool.iter().position(|r| r == g) {
            pool.swap_remove(pos);
            matched += 1;
        }
    }
    (matched, cand_grams.len() as u64)
}

fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<String>], max_n: usize, smoothing: bool) -> f64 {
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    for n in 1..=max_n {
        let (mut m, mut t) = (0u64, 0u64);
        for (cand, reference) in cands.iter().zip(refs) {
            let (mm, tt) = clipped_matches(cand, reference, n);
            m += mm;
            t += tt;
        }
        if smoothing && n >= 2 {
            m += 1;
            t += 1;
        }
        if m == 0 {
            return 0.0;
        }
        product *= m as f64 / t as f64;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * product.powf(1.0 / max_n as f64)
}

/// LCS by memoised recursion from the front.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    fn go(
        a: &[String],
        b: &[String],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn rouge_oracle(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs_oracle(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn random_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let vocab = ["the", "price", "is", "fair", "please", "sign", "now"];
    let len = rng.random_range(1..=14);
    (0..len)
        .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
        .collect()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();

    // micro-F1 against brute-force accuracy
    let mut f1_worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let n = rng.random_range(1..80);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let f1 = micro_prf(&pred, &gold, k)
            .map_err(|e| e.to_string())?
            .f1_micro;
        f1_worst = f1_worst.max((f1 - accuracy(&pred, &gold)).abs());
    }
    if f1_worst > 1e-12 {
        failures.push(format!("micro-F1 off by {f1_worst:e}"));
    }

    // BLEU and ROUGE-L on random pairs
    let pairs: Vec<(Vec<String>, Vec<String>)> = (0..100)
        .map(|_| (random_sentence(&mut rng), random_sentence(&mut rng)))
        .collect();
    let mut bleu_worst = 0.0f64;
    let mut rouge_worst = 0.0f64;
    for (cand, reference) in &pairs {
        for max_n in 1..=4 {
            for smoothing in [false, true] {
                let got = bleu_with(
                    std::slice::from_ref(cand),
                    std::slice::from_ref(reference),
                    BleuOptions { max_n, smoothing },
                )
                .map_err(|e| e.to_string())?;
                let want = bleu_oracle(
                    std::slice::from_ref(cand),
                    std::slice::from_ref(reference),
                    max_n,
                    smoothing,
                );
                bleu_worst = bleu_worst.max((got - want).abs());
            }
        }
        let got = rouge_l_f1(cand, reference).map_err(|e| e.to_string())?;
        rouge_worst = rouge_worst.max((got - rouge_oracle(cand, reference)).abs());
    }
    let (cands, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let corpus = bleu(&cands, &refs, 4).map_err(|e| e.to_string())?;
    bleu_worst = bleu_worst.max((corpus - bleu_oracle(&cands, &refs, 4, false)).abs());
    if bleu_worst > 1e-9 {
        failures.push(format!("BLEU off by {bleu_worst:e}"));
    }
    if rouge_worst > 1e-9 {
        failures.push(format!("ROUGE-L off by {rouge_worst:e}"));
    }

    // fixed cases
    let bp_case = bleu(&[words("a b c")], &[words("a b c d")], 3).map_err(|e| e.to_string())?;
    let bp_want = (1.0f64 - 4.0 / 3.0).exp();
    if (bp_case - bp_want).abs() > 1e-12 {
        failures.push(format!("brevity case {bp_case} != {bp_want}"));
    }
    let rouge_case = rouge_l_f1(&words("a c"), &words("a b c")).map_err(|e| e.to_string())?;
    if (rouge_case - 0.8).abs() > 1e-12 {
        failures.push(format!("ROUGE-L case {rouge_case} != 0.8"));
    }
    let kappa_zero = cohens_kappa(&[1, 1, 2, 2], &[1, 2, 1, 2]).map_err(|e| e.to_string())?;
    let kappa_neg = cohens_kappa(&[1, 2, 1, 2], &[2, 1, 2, 1]).map_err(|e| e.to_string())?;
    if kappa_zero.abs() > 1e-12 || (kappa_neg + 1.0).abs() > 1e-12 {
        failures.push(format!("kappa cases {kappa_zero} / {kappa_neg}"));
    }

    check(
        failures.is_empty(),
        format!(
            "metric oracles: micro-F1 max |diff| {f1_worst:e} over 1000 trials, BLEU {bleu_worst:e} and ROUGE-L {rouge_worst:e} over 100 pairs (tol 1e-9), BP case {bp_case:.4}, ROUGE-L case {rouge_case}, kappa {kappa_zero} / {kappa_neg}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(" | ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// Gradient

fn random_features(rng: &mut ChaCha8Rng, k: usize) -> FeatureVector {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
    stack_features(&one_hot(rng.random_range(0..k), k).unwrap(), &probs).unwrap()
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..8);
        let features: Vec<FeatureVector> = (0..n).map(|_| random_features(&mut rng, k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let l2 = rng.random_range(0.0..0.1);
        let weights: Vec<f64> = (0..2 * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = StackingModel::new(k, weights.clone(), bias.clone()).unwrap();
        let (_, grad) =
            loss_and_gradient(&model, &features, &labels, l2).map_err(|e| e.to_string())?;

        let loss_at = |w: &[f64], b: &[f64]| {
            let m = StackingModel::new(k, w.to_vec(), b.to_vec()).unwrap();
            loss_and_gradient(&m, &features, &labels, l2).unwrap().0
        };
        let h = 1e-5;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..weights.len() {
            let (mut up, mut down) = (weights.clone(), weights.clone());
            up[i] += h;
            down[i] -= h;
            numeric.push((loss_at(&up, &bias) - loss_at(&down, &bias)) / (2.0 * h));
            analytic.push(grad.weights[i]);
        }
        for i in 0..bias.len() {
            let (mut up, mut down) = (bias.clone(), bias.clone());
            up[i] += h;
            down[i] -= h;
            numeric.push((loss_at(&weights, &up) - loss_at(&weights, &down)) / (2.0 * h));
            analytic.push(grad.bias[i]);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
    }
    check(
        worst < 1e-5,
        format!("cross-entropy gradient vs central differences: max relative error {worst:.2e} over 20 instances (limit 1e-5)"),
    )
}

// ---------------------------------------------------------------------------
// Latency

fn latency_paths() -> Verdict {
    let dialogue = script("SME\tThank you for coming.\nSME\tHurry up with the slides.\n");
    let out = replay_blocking(&config("latency.json"), &dialogue).map_err(|e| e.to_string())?;
    let none = out.latency.get(&LatencyPath::NoRemediation).copied();
    let low = out.latency.get(&LatencyPath::LowImpact).copied();
    let within = |got: Option<Duration>, want: f64| {
        got.is_some_and(|d| (d.as_secs_f64() - want).abs() <= 0.05 * want)
    };
    check(
        within(none, 1.5) && within(low, 6.7),
        format!("latency means: no remediation {none:?} (target 1.5 s +/- 5%), low impact {low:?} (target 6.7 s +/- 5%)"),
    )
}

// ---------------------------------------------------------------------------
// Determinism

fn seeded_config() -> AppConfig {
    let mut cfg = config("study.json");
    for (i, task) in Task::ALL.into_iter().enumerate() {
        let spec = cfg.backends.spec_mut(task);
        spec.backup = Some(spec.primary.clone());
        spec.primary.failure_rate = 0.2;
        spec.primary.seed = 99 + i as u64;
    }
    cfg
}

fn deterministic_replay() -> Verdict {
    let dialogue = study_script();
    let runs: Vec<ReplayOutcome> = (0..2)
        .map(|_| replay_blocking(&seeded_config(), &dialogue).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let (a, b) = (&runs[0], &runs[1]);
    let same = a.transcript == b.transcript && a.turns == b.turns;
    check(
        same && !a.transcript.is_empty(),
        format!(
            "replay determinism: transition logs {} bytes each, identical: {}; turn logs {} bytes each, identical: {}",
            a.transcript.len(),
            a.transcript == b.transcript,
            a.turns.len(),
            a.turns == b.turns
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("routing", routing_truth_table),
        ("user-study", user_study_replay),
        ("fallback-timeout", all_primaries_hang),
        ("fallback-rate", thirty_percent_faults),
        ("stacker", stacker_beats_bases),
        ("metrics", metric_oracles),
        ("gradient", gradient_check),
        ("latency", latency_paths),
        ("determinism", deterministic_replay),
    ];
    let mut failed = 0;
    for (name, criterion) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS  {name:<17} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<17} {detail}");
            }
        }
    }
    println!(
        "\nacceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
