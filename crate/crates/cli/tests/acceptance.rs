//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! test harness so the lines always reach stdout.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use navkit_core::action::{
    parse_action, serialize_action, Action, ActionError, BBox, Point, SystemButton, TerminateStatus,
    WaitTime,
};
use navkit_core::agent::HistoryConfig;
use navkit_core::dataset::{Dataset, Episode, StepRecord};
use navkit_core::eval::{
    aggregate, evaluate_episode, match_action, run_evaluation, EvalConfig, GoldChoice,
};
use navkit_core::model::mock::{MockChatServer, MockReply};
use navkit_core::model::{HttpBackend, HttpConfig, ModelBackend, ReplayProvider, ScriptedProvider};
use navkit_core::pipeline::{
    dedup_instructions, filter_elements, geometric_rejection, gr2nav, truncate_after_first_error,
    Correction, DropReason, FilterConfig, GroundingSample, StepFlag, UiElement,
};
use navkit_core::rewards::{compute_reward, group_advantages, grpo_objective, GroupSample, GrpoConfig};
use navkit_core::synth::{synthetic_episodes, write_synthetic_dataset, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("replay oracle", replay_oracle),
        ("corruption exactness", corruption_exactness),
        ("multi-choice semantics", multi_choice),
        ("action grammar", action_grammar),
        ("reward lattice", reward_lattice),
        ("GRPO math", grpo_math),
        ("filter thresholds", filter_thresholds),
        ("gr2nav self-consistency", gr2nav_consistency),
        ("efficiency direction", efficiency_direction),
        ("truncation/dedup", truncation_dedup),
        ("annotation service durability", annotation_durability),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn navkit() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_navkit"));
    c.env_remove("NAVKIT_CONFIG").env_remove("NAVKIT_TOKEN");
    c
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_ok(c: &mut Command) -> Result<String, String> {
    let out = c.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn triplet(action: &Action) -> String {
    format!(
        r#"{{"semantic_context":"progress so far","thought":"next","action":{}}}"#,
        serialize_action(action)
    )
}

/// Never a gold choice in synthetic data.
fn wrong_action() -> Action {
    Action::Wait {
        time: WaitTime::new(999.0).unwrap(),
    }
}

fn replay_oracle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        episodes: 50,
        steps: 10,
        screen: (540, 1200),
        seed: 2024,
    };
    let manifest = write_synthetic_dataset(&dir.path().join("ds"), &spec).map_err(|e| e.to_string())?;
    let report = dir.path().join("report.json");
    let start = Instant::now();
    run_ok(navkit().args(["evaluate", "--dataset", s(&manifest), "--backend", "replay", "--output", s(&report)]))?;
    let secs = start.elapsed().as_secs_f64();
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    check!(r["step_accuracy"]["value"] == 1.0, "SA {}", r["step_accuracy"]);
    check!(r["task_accuracy"]["value"] == 1.0, "TA {}", r["task_accuracy"]);
    check!(r["step_accuracy"]["total"] == 500, "steps {}", r["step_accuracy"]["total"]);
    check!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("SA=TA=100% on 50x10 in {secs:.2}s"))
}

fn corruption_exactness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        episodes: 12,
        steps: 6,
        screen: (108, 240),
        seed: 99,
    };
    let ds = Dataset::load(write_synthetic_dataset(dir.path(), &spec).unwrap()).unwrap();
    let n: usize = ds.episodes.iter().map(|e| e.steps.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for pattern in 0..100 {
        let k = rng.random_range(0..=n);
        let mut flat: Vec<(usize, usize)> = ds
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.steps.len()).map(move |t| (e, t)))
            .collect();
        // partial Fisher-Yates to pick k distinct steps
        for i in 0..k {
            let j = rng.random_range(i..flat.len());
            flat.swap(i, j);
        }
        let flipped: HashSet<(usize, usize)> = flat[..k].iter().copied().collect();
        let mut provider = ScriptedProvider::new(Default::default());
        for (e, ep) in ds.episodes.iter().enumerate() {
            let outs = ep
                .steps
                .iter()
                .enumerate()
                .map(|(t, st)| {
                    if flipped.contains(&(e, t)) {
                        triplet(&wrong_action())
                    } else {
                        triplet(&st.primary_action)
                    }
                })
                .collect();
            provider.insert(ep.id.clone(), outs);
        }
        let results = run_evaluation(&ds, &provider, &EvalConfig::default(), 4).map_err(|e| e.to_string())?;
        let report = aggregate(&results).map_err(|e| e.to_string())?;
        let sa = report.step_accuracy.value.unwrap();
        let expected_sa = (n - k) as f64 / n as f64;
        check!((sa - expected_sa).abs() <= f64::EPSILON, "pattern {pattern}: SA {sa} vs {expected_sa}");
        let touched: HashSet<usize> = flipped.iter().map(|&(e, _)| e).collect();
        let expected_ta = (ds.episodes.len() - touched.len()) as f64 / ds.episodes.len() as f64;
        let ta = report.task_accuracy.value.unwrap();
        check!((ta - expected_ta).abs() <= f64::EPSILON, "pattern {pattern}: TA {ta} vs {expected_ta}");
    }
    Ok(format!("100 random patterns over {n} steps, SA and TA exact"))
}

struct Family {
    choice: GoldChoice,
    accept: Vec<Action>,
    reject: Vec<Action>,
}

fn swipe(a: (u32, u32), b: (u32, u32)) -> Action {
    Action::swipe(Point::new(a.0, a.1), Point::new(b.0, b.1)).unwrap()
}

fn families() -> Vec<(&'static str, Family)> {
    let bbox = BBox::new(100, 100, 200, 200).unwrap();
    vec![
        ("click", Family {
            choice: GoldChoice::ClickTarget { bbox },
            accept: vec![Action::click(150, 150), Action::click(100, 100), Action::click(200, 200)],
            reject: vec![Action::click(201, 150), Action::click(99, 150), Action::click(150, 201), Action::click(0, 0)],
        }),
        ("type", Family {
            choice: GoldChoice::TypeTarget { text: "hello".into() },
            accept: vec![Action::type_text("hello").unwrap(), Action::type_text("  hello ").unwrap()],
            reject: vec![Action::type_text("Hello").unwrap(), Action::type_text("hell").unwrap()],
        }),
        ("swipe", Family {
            choice: GoldChoice::SwipeTarget { direction: navkit_core::action::SwipeDirection::Up },
            accept: vec![swipe((500, 1500), (500, 500)), swipe((500, 1500), (520, 400))],
            reject: vec![swipe((500, 500), (500, 1500)), swipe((100, 500), (900, 500)), swipe((900, 500), (100, 500))],
        }),
        ("terminate", Family {
            choice: GoldChoice::TerminateTarget { status: TerminateStatus::Success },
            accept: vec![Action::Terminate { status: TerminateStatus::Success }],
            reject: vec![Action::Terminate { status: TerminateStatus::Failure }],
        }),
        ("exact", Family {
            choice: GoldChoice::ExactTarget { action: Action::SystemButton { button: SystemButton::Back } },
            accept: vec![Action::SystemButton { button: SystemButton::Back }],
            reject: vec![
                Action::SystemButton { button: SystemButton::Home },
                Action::Wait { time: WaitTime::new(1.0).unwrap() },
            ],
        }),
    ]
}

fn multi_choice() -> Outcome {
    let fams = families();
    let mut cells = 0;
    for (na, a) in &fams {
        for (nb, b) in &fams {
            let gold: Vec<GoldChoice> = if na == nb {
                vec![a.choice.clone()]
            } else {
                vec![a.choice.clone(), b.choice.clone()]
            };
            for act in a.accept.iter().chain(&b.accept) {
                check!(match_action(act, &gold), "{{{na},{nb}}} should accept {act}");
            }
            for act in a.reject.iter().chain(&b.reject) {
                check!(!match_action(act, &gold), "{{{na},{nb}}} should reject {act}");
            }
            // a family absent from the gold set never matches
            for (nc, c) in &fams {
                if nc != na && nc != nb {
                    for act in &c.accept {
                        check!(!match_action(act, &gold), "{{{na},{nb}}} accepted foreign {nc} {act}");
                    }
                }
            }
            cells += 1;
        }
    }
    Ok(format!("{cells} gold-set cells over 5 choice types"))
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let p = |rng: &mut ChaCha8Rng| Point::new(rng.random_range(0..5000), rng.random_range(0..5000));
    match rng.random_range(0..6) {
        0 => Action::Click { coordinate: p(rng) },
        1 => loop {
            let (a, b) = (p(rng), p(rng));
            if a != b {
                break Action::swipe(a, b).unwrap();
            }
        },
        2 => {
            let len = rng.random_range(1..30);
            let text: String = (0..len)
                .map(|_| match rng.random_range(0..4) {
                    0 => char::from(rng.random_range(b'a'..=b'z')),
                    1 => ['"', '\\', '\n', ' ', '/'][rng.random_range(0..5)],
                    2 => char::from_u32(rng.random_range(0x4e00..0x9fa5)).unwrap(),
                    _ => ['é', '😀', 'ß', '\t'][rng.random_range(0..4)],
                })
                .collect();
            if text.trim().is_empty() {
                Action::type_text("x").unwrap()
            } else {
                Action::type_text(text).unwrap()
            }
        }
        3 => Action::SystemButton {
            button: SystemButton::ALL[rng.random_range(0..SystemButton::ALL.len())],
        },
        4 => Action::Wait {
            time: WaitTime::new(f64::from(rng.random_range(1..2000u32)) / 4.0).unwrap(),
        },
        _ => Action::Terminate {
            status: if rng.random_bool(0.5) { TerminateStatus::Success } else { TerminateStatus::Failure },
        },
    }
}

#[derive(Debug, PartialEq)]
enum Expect {
    Malformed,
    Unknown,
    Missing(String),
    Unexpected(String),
    Invalid(String),
}

fn classify(e: &ActionError) -> Expect {
    match e {
        ActionError::MalformedJson(_) => Expect::Malformed,
        ActionError::UnknownAction(_) => Expect::Unknown,
        ActionError::MissingArgument(f) => Expect::Missing(f.clone()),
        ActionError::UnexpectedField(f) => Expect::Unexpected(f.clone()),
        ActionError::InvalidValue { field, .. } => Expect::Invalid(field.clone()),
    }
}

fn mutations(wire: &str) -> Vec<(String, Expect)> {
    let v: Value = serde_json::from_str(wire).unwrap();
    let args = v["arguments"].as_object().unwrap().clone();
    let mut out = Vec::new();
    for key in args.keys() {
        let mut m = v.clone();
        let val = m["arguments"].as_object_mut().unwrap().remove(key).unwrap();
        let expect = if key == "action" {
            Expect::Missing("action".into())
        } else {
            Expect::Missing(key.clone())
        };
        out.push((m.to_string(), expect));
        let renamed = format!("{key}_renamed");
        m["arguments"].as_object_mut().unwrap().insert(renamed.clone(), val);
        out.push((m.to_string(), Expect::Unexpected(renamed)));
    }
    let mut m = v.clone();
    m["arguments"]["action"] = json!("fly");
    out.push((m.to_string(), Expect::Unknown));
    let mut m = v.clone();
    m["arguments"]["action"] = json!("Click!");
    out.push((m.to_string(), Expect::Unknown));
    let mut m = v.clone();
    m["name"] = json!("desktop_use");
    out.push((m.to_string(), Expect::Invalid("name".into())));
    let mut m = v.clone();
    m.as_object_mut().unwrap().remove("name");
    out.push((m.to_string(), Expect::Missing("name".into())));
    let mut m = v.clone();
    let a = m.as_object_mut().unwrap().remove("arguments").unwrap();
    m["args"] = a;
    out.push((m.to_string(), Expect::Unexpected("args".into())));
    let mut m = v.clone();
    m["arguments"]["extra"] = json!(1);
    out.push((m.to_string(), Expect::Unexpected("extra".into())));
    out.push((wire[..wire.len() - 1].to_string(), Expect::Malformed));
    out.push((format!("{wire}{wire}"), Expect::Malformed));
    match args["action"].as_str().unwrap() {
        "terminate" => {
            let mut m = v.clone();
            m["arguments"]["status"] = json!("done");
            out.push((m.to_string(), Expect::Invalid("status".into())));
        }
        "click" => {
            let mut m = v.clone();
            m["arguments"]["coordinate"] = json!([1]);
            out.push((m.to_string(), Expect::Invalid("coordinate".into())));
        }
        "wait" => {
            let mut m = v.clone();
            m["arguments"]["time"] = json!("-3");
            out.push((m.to_string(), Expect::Invalid("time".into())));
        }
        "type" => {
            let mut m = v.clone();
            m["arguments"]["text"] = json!(7);
            out.push((m.to_string(), Expect::Invalid("text".into())));
        }
        _ => {}
    }
    out
}

fn action_grammar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut kinds = BTreeSet::new();
    let mut mutants = 0;
    for i in 0..10_000 {
        let a = random_action(&mut rng);
        let wire = serialize_action(&a);
        let back = parse_action(&wire).map_err(|e| format!("#{i} {wire}: {e}"))?;
        check!(back == a, "#{i}: round trip changed {wire}");
        check!(serialize_action(&back) == wire, "#{i}: serialization not stable");
        kinds.insert(serde_json::from_str::<Value>(&wire).unwrap()["arguments"]["action"].to_string());
        if i % 5 == 0 {
            for (raw, expect) in mutations(&wire) {
                mutants += 1;
                match parse_action(&raw) {
                    Ok(a) => return Err(format!("mutant accepted as {a}: {raw}")),
                    Err(e) => check!(classify(&e) == expect, "{raw}: got {e:?}, want {expect:?}"),
                }
            }
        }
    }
    check!(kinds.len() == 6, "only {} action kinds generated", kinds.len());
    Ok(format!("10000 round trips; {mutants} mutants rejected with the expected error"))
}

fn reward_lattice() -> Outcome {
    let gold = [GoldChoice::ClickTarget {
        bbox: BBox::new(0, 0, 10, 10).unwrap(),
    }];
    let right = Action::click(5, 5);
    let wrong = Action::click(50, 50);
    let grid = [
        ("formatted, correct", triplet(&right), 1.5),
        ("formatted, wrong", triplet(&wrong), 0.5),
        ("unformatted, correct", serialize_action(&right), 0.0),
        ("unformatted, wrong", format!("I would click {}", serialize_action(&wrong)), 0.0),
    ];
    let mut reached = BTreeSet::new();
    for (name, out, want) in &grid {
        let r = compute_reward(out, &gold);
        check!(r.total == *want, "{name}: {} != {want}", r.total);
        reached.insert(r.total.to_bits());
    }
    // noise around the grid never lands anywhere else
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let a = random_action(&mut rng);
        let out = match rng.random_range(0..4) {
            0 => triplet(&a),
            1 => serialize_action(&a),
            2 => triplet(&a).replace("thought", "thougth"),
            _ => triplet(&a)[..triplet(&a).len() / 2].to_string(),
        };
        reached.insert(compute_reward(&out, &gold).total.to_bits());
    }
    let got: Vec<f64> = reached.iter().map(|b| f64::from_bits(*b)).collect();
    check!(got.len() == 3 && [0.0, 0.5, 1.5].iter().all(|v| got.contains(v)), "reached {got:?}");
    check!(!got.contains(&1.0), "1.0 reached");
    Ok(format!("reached exactly {got:?}"))
}

fn grpo_math() -> Outcome {
    let a = group_advantages(&[1.5, 0.5, 1.5, 0.5], 1e-6).map_err(|e| e.to_string())?;
    check!(a == [1.0, -1.0, 1.0, -1.0], "fixture gave {a:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for g in 0..1000 {
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let adv = group_advantages(&r, 1e-6).map_err(|e| e.to_string())?;
        let mean = adv.iter().sum::<f64>() / 16.0;
        let std = (adv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
        check!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9, "group {g}: mean {mean} std {std}");
        let scale = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let adv2 = group_advantages(&moved, 1e-6).map_err(|e| e.to_string())?;
        for (x, y) in adv.iter().zip(&adv2) {
            check!((x - y).abs() < 1e-9, "group {g}: affine drift {x} vs {y}");
        }
    }
    let cfg = GrpoConfig {
        beta: 0.0,
        ..GrpoConfig::default()
    };
    let one = |ratio: f64, adv: f64| {
        grpo_objective(
            &[GroupSample {
                reward: 0.0,
                ratios: vec![ratio],
            }],
            &[adv],
            &[vec![0.0]],
            &cfg,
        )
        .unwrap()
    };
    let hi = one(2.0, 1.0);
    let lo = one(0.5, -1.0);
    check!((hi - 1.28).abs() < 1e-12, "r=2, A=1 gave {hi}");
    check!((lo + 0.8).abs() < 1e-12, "r=0.5, A=-1 gave {lo}");
    Ok(format!("fixture exact; 1000 groups of 16 normalised; clip fixtures {hi} and {lo}"))
}

fn bb(x: u32, y: u32, w: u32, h: u32) -> BBox {
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn filter_thresholds() -> Outcome {
    let cfg = FilterConfig::default();
    let phone = (1080, 2400);
    let cases: [(&str, BBox, (u32, u32), Option<DropReason>); 11] = [
        ("area 5999", bb(0, 0, 7, 857), phone, Some(DropReason::SmallArea)),
        ("area 5999 (wide)", bb(0, 0, 857, 7), phone, Some(DropReason::SmallArea)),
        ("area 6000", bb(0, 0, 60, 100), phone, None),
        ("aspect 13.5", bb(0, 0, 1350, 100), phone, None),
        ("aspect 13.5 tall", bb(0, 0, 100, 1350), phone, None),
        ("aspect 13.5+e", bb(0, 0, 2701, 200), (3000, 3000), Some(DropReason::ExtremeAspect)),
        ("aspect 13.5-e", bb(0, 0, 2699, 200), (3000, 3000), None),
        ("aspect 14", bb(0, 0, 1400, 100), (1400, 2400), Some(DropReason::ExtremeAspect)),
        ("coverage 15%", bb(0, 0, 300, 500), (1000, 1000), None),
        ("coverage 15%+e", bb(0, 0, 301, 500), (1000, 1000), Some(DropReason::LargeArea)),
        ("coverage 15%-e", bb(0, 0, 299, 500), (1000, 1000), None),
    ];
    for (name, b, screen, want) in cases {
        let got = geometric_rejection(&b, screen, &cfg);
        check!(got == want, "{name}: got {got:?}, want {want:?}");
    }

    // repeated-signature acceptance
    let img = RgbImage::from_fn(400, 400, |x, y| Rgb([(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]));
    let el = UiElement::leaf(bb(10, 10, 100, 100));
    let trials = 10_000u32;
    let mut kept = 0u32;
    for t in 0..trials {
        let mut seen = HashSet::from([el.signature()]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(t));
        let out = filter_elements(&el, (400, 400), &img, &cfg, &mut seen, &mut rng).map_err(|e| e.to_string())?;
        kept += out.kept.len() as u32;
    }
    let p = cfg.seen_keep_prob;
    let n = f64::from(trials);
    let sigma = (n * p * (1.0 - p)).sqrt();
    let dev = (f64::from(kept) - n * p).abs();
    check!(dev <= 3.0 * sigma, "kept {kept}/{trials}, {:.2} sigma from {}", dev / sigma, n * p);
    Ok(format!("11 boundary cases; seen-before kept {kept}/{trials} ({:.2} sigma)", dev / sigma))
}

fn gr2nav_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..10_000 {
        let (x, y) = (rng.random_range(0..4000), rng.random_range(0..4000));
        let (w, h) = (rng.random_range(1..1500), rng.random_range(1..1500));
        let target = bb(x, y, w, h);
        let g = GroundingSample {
            id: None,
            app: None,
            instruction: "tap the thing".into(),
            rationale: "because".into(),
            screenshot: "s.png".into(),
            target,
        };
        let ep = gr2nav(&g, format!("g{i}"));
        let step = &ep.steps[0];
        let want = Action::click((2 * x + w) / 2, (2 * y + h) / 2);
        check!(step.primary_action == want, "{target:?}: {} != {want}", step.primary_action);
        check!(
            match_action(&step.primary_action, &[GoldChoice::ClickTarget { bbox: target }]),
            "{target:?}: centre click rejected"
        );
    }
    Ok("10000 random boxes, 100% matched their own target".into())
}

fn efficiency_direction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(
        dir.path(),
        &SynthSpec {
            episodes: 1,
            steps: 10,
            screen: (540, 1200),
            seed: 77,
        },
    )
    .unwrap();
    let ds = Dataset::load(manifest).unwrap();
    let ep = &ds.episodes[0];
    let done = triplet(&Action::Terminate {
        status: TerminateStatus::Success,
    });
    let server = MockChatServer::start(move |_| MockReply::text([done.clone()])).map_err(|e| e.to_string())?;
    let backend = HttpBackend::new(HttpConfig {
        endpoint: server.url(),
        ..HttpConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let itc = |history: HistoryConfig| -> Result<f64, String> {
        let cfg = EvalConfig {
            history,
            ..EvalConfig::default()
        };
        let mut b = backend.clone();
        let r = evaluate_episode(ep, &ds.image_root, &mut b, &cfg).map_err(|e| e.to_string())?;
        let report = aggregate(&[r]).map_err(|e| e.to_string())?;
        report.efficiency.mean_itc.ok_or_else(|| "no calls".to_string())
    };
    let series = [
        itc(HistoryConfig::none())?,
        itc(HistoryConfig::raw_history(1))?,
        itc(HistoryConfig::raw_history(2))?,
        itc(HistoryConfig::raw_history(5))?,
    ];
    check!(series.windows(2).all(|w| w[0] < w[1]), "ITC over N=0,1,2,5: {series:?}");
    let sc = itc(HistoryConfig::semantic_context())?;
    check!(sc > series[0], "semantic N=1 {sc} <= none {}", series[0]);

    let delayed = triplet(&Action::click(1, 1));
    let slow = MockChatServer::start(move |_| {
        MockReply::text([delayed.clone()]).with_delays(Duration::from_millis(50), Duration::ZERO)
    })
    .map_err(|e| e.to_string())?;
    let mut b = HttpBackend::new(HttpConfig {
        endpoint: slow.url(),
        ..HttpConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let bundle = navkit_core::agent::build_prompt(
        &navkit_core::agent::Agent::new(&ep.instruction, HistoryConfig::none())
            .unwrap()
            .input_for(ds.resolve_screenshot(ep, &ep.steps[0]).unwrap()),
        &HistoryConfig::none(),
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for run in 0..20 {
        let c = b.complete(&bundle).map_err(|e| e.to_string())?;
        let off = (c.timing.ttft - 0.050).abs();
        check!(off <= 0.020, "run {run}: TTFT {:.1} ms", c.timing.ttft * 1e3);
        worst = worst.max(off);
    }
    Ok(format!(
        "ITC N=0,1,2,5: {:.0} < {:.0} < {:.0} < {:.0}; semantic {sc:.0}; TTFT worst offset {:.1} ms over 20 runs",
        series[0], series[1], series[2], series[3], worst * 1e3
    ))
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            cur[j] = (prev[j - 1] + usize::from(a[i - 1] != b[j - 1]))
                .min(prev[j] + 1)
                .min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn truncation_dedup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let pool = synthetic_episodes(&SynthSpec {
        episodes: 40,
        steps: 12,
        screen: (540, 1200),
        seed: 5,
    });
    for case in 0..1000 {
        let mut ep: Episode = pool[case % pool.len()].clone();
        ep.steps.truncate(rng.random_range(1..=12));
        let flags: Vec<StepFlag> = ep
            .steps
            .iter()
            .map(|_| {
                if rng.random_bool(0.8) {
                    StepFlag::ok()
                } else if rng.random_bool(0.5) {
                    StepFlag::wrong(None)
                } else {
                    StepFlag::wrong(Some(Correction {
                        action: Action::SystemButton { button: SystemButton::Back },
                        bbox: None,
                    }))
                }
            })
            .collect();
        let first_bad = flags.iter().position(|f| !f.correct);
        let out = truncate_after_first_error(&ep, &flags);
        match first_bad {
            None => check!(out.as_ref() == Ok(&ep), "case {case}: all-correct episode changed"),
            Some(e) => {
                let corrected = flags[e].correction.is_some();
                let keep = if corrected { e + 1 } else { e };
                if keep == 0 {
                    check!(out.is_err(), "case {case}: expected EmptyResult");
                    continue;
                }
                let out = out.map_err(|err| format!("case {case}: {err}"))?;
                check!(out.steps.len() == keep, "case {case}: {} steps, want {keep}", out.steps.len());
                check!(out.steps[..e] == ep.steps[..e], "case {case}: prefix altered");
                if corrected {
                    let last: &StepRecord = &out.steps[e];
                    let c = &flags[e].correction.as_ref().unwrap().action;
                    check!(&last.primary_action == c, "case {case}: correction not applied");
                    check!(last.index == ep.steps[e].index, "case {case}: index moved");
                }
            }
        }
    }

    let alphabet: Vec<char> = "abcde fgh".chars().collect();
    for set in 0..1000 {
        let n = rng.random_range(1..40);
        let items: Vec<String> = (0..n)
            .map(|_| {
                let len = rng.random_range(0..14);
                (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
            })
            .collect();
        let kept = dedup_instructions(&items, 6);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                let d = levenshtein(&items[a], &items[b]);
                check!(d >= 6, "set {set}: kept {:?} and {:?} at distance {d}", items[a], items[b]);
            }
        }
        for j in 0..items.len() {
            if !kept.contains(&j) {
                check!(
                    kept.iter().any(|&k| k < j && levenshtein(&items[k], &items[j]) < 6),
                    "set {set}: {:?} dropped without a close earlier keeper",
                    items[j]
                );
            }
        }
    }
    Ok("1000 truncation cases prefix+correction; 1000 dedup sets pass pairwise Levenshtein >= 6".into())
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(data_dir: &Path, dataset: Option<&Path>) -> Result<Server, String> {
        let mut cmd = navkit();
        cmd.args(["serve", "--data-dir", s(data_dir), "--bind", "127.0.0.1:0"]);
        if let Some(d) = dataset {
            cmd.args(["--dataset", s(d)]);
        }
        let mut child = cmd
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected banner {line:?}"))?
            .to_string();
        Ok(Server { child, base })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn post(c: &reqwest::blocking::Client, url: String, body: Value) -> (u16, Value) {
    let r = c.post(url).json(&body).send().unwrap();
    let code = r.status().as_u16();
    (code, r.json().unwrap_or(Value::Null))
}

fn all_states(c: &reqwest::blocking::Client, srv: &Server, ids: &[String]) -> Vec<Value> {
    ids.iter()
        .map(|id| {
            c.get(format!("{}/api/episodes/{id}", srv.base))
                .send()
                .unwrap()
                .json::<Value>()
                .unwrap()["state"]
                .clone()
        })
        .collect()
}

fn verdict(ep: &Episode, step: u32) -> Value {
    let rec = &ep.steps[step as usize - 1];
    let mut body = json!({"step": step, "judgment": "correct", "annotator": "ann"});
    if let Action::Click { .. } = rec.primary_action {
        body["bbox"] = serde_json::to_value(&rec.gold_choices[0]).unwrap()["bbox"].clone();
    }
    body
}

fn annotation_durability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(
        &dir.path().join("batch"),
        &SynthSpec {
            episodes: 3,
            steps: 4,
            screen: (270, 600),
            seed: 31,
        },
    )
    .unwrap();
    let source = Dataset::load(&manifest).unwrap();
    let ids: Vec<String> = source.episodes.iter().map(|e| e.id.clone()).collect();
    let data = dir.path().join("data");
    let c = reqwest::blocking::Client::new();

    let srv = Server::start(&data, Some(&manifest))?;
    let (code, _) = post(&c, format!("{}/api/episodes/ep0/claim", srv.base), json!({"annotator": "ann"}));
    check!(code == 200, "claim returned {code}");
    let (code, v) = post(&c, format!("{}/api/episodes/ep0/claim", srv.base), json!({"annotator": "rival"}));
    check!(code == 409 && v["error"] == "lease_conflict", "second claim gave {code} {v}");
    for n in 1..=3 {
        let (code, v) = post(&c, format!("{}/api/episodes/ep0/verdicts", srv.base), verdict(&source.episodes[0], n));
        check!(code == 200, "verdict {n}: {code} {v}");
    }
    let before = all_states(&c, &srv, &ids);
    srv.kill();

    let srv = Server::start(&data, None)?;
    let after = all_states(&c, &srv, &ids);
    check!(before == after, "state differs after restart:\n{before:?}\n{after:?}");

    // finish the batch: ep0 and ep2 complete, ep1 truncated at step 2
    let (code, v) = post(&c, format!("{}/api/episodes/ep0/verdicts", srv.base), verdict(&source.episodes[0], 4));
    check!(code == 200, "ep0 step 4: {code} {v}");
    for (i, id) in ids.iter().enumerate().skip(1) {
        post(&c, format!("{}/api/episodes/{id}/claim", srv.base), json!({"annotator": "ann"}));
        let ep = &source.episodes[i];
        let steps = if i == 1 { 1 } else { ep.steps.len() as u32 };
        for n in 1..=steps {
            let (code, v) = post(&c, format!("{}/api/episodes/{id}/verdicts", srv.base), verdict(ep, n));
            check!(code == 200, "{id} step {n}: {code} {v}");
        }
        if i == 1 {
            let body = json!({"step": 2, "judgment": "incorrect", "annotator": "ann",
                "corrected_action": {"name": "mobile_use", "arguments": {"action": "terminate", "status": "failure"}}});
            let (code, v) = post(&c, format!("{}/api/episodes/{id}/verdicts", srv.base), body);
            check!(code == 200 && v["status"] == "truncated", "truncating verdict: {code} {v}");
        }
    }
    let final_states = all_states(&c, &srv, &ids);
    srv.kill();
    let srv = Server::start(&data, None)?;
    check!(all_states(&c, &srv, &ids) == final_states, "final state differs after restart");
    srv.kill();

    let out = dir.path().join("export");
    run_ok(navkit().args(["export", "--data-dir", s(&data), "--out", s(&out)]))?;
    let exported = Dataset::load(out.join("manifest.json")).map_err(|e| format!("export fails loader: {e}"))?;
    let lens: Vec<usize> = exported.episodes.iter().map(|e| e.steps.len()).collect();
    check!(lens == [4, 2, 4], "exported lengths {lens:?}");
    let results = run_evaluation(&exported, &ReplayProvider, &EvalConfig::default(), 2).map_err(|e| e.to_string())?;
    let report = aggregate(&results).map_err(|e| e.to_string())?;
    check!(
        report.step_accuracy.value == Some(1.0) && report.task_accuracy.value == Some(1.0),
        "replay on export: SA {:?} TA {:?}",
        report.step_accuracy.value,
        report.task_accuracy.value
    );
    Ok("kill -9 and restart reproduced state twice; lease conflict rejected; export loads and replays at SA=TA=1".into())
}
