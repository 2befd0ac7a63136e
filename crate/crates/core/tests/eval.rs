use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use bagel_core::eval::{
    run_eval, DemoMode, DemoSource, EpisodeResult, EvalConfig, EvalError, Mark, Marks, MetricsReport,
};
use bagel_core::lm::{PromptSet, Role, ScriptedBackend};
use bagel_core::retrieval::HashEmbedder;
use bagel_core::{
    ActionString, DemoBuffer, Demonstration, Instruction, Observation, Source, Step, TerminatedBy, Trajectory,
};

fn script() -> ScriptedBackend {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/scripts/toolbench.json");
    ScriptedBackend::load(&path).unwrap().capturing()
}

fn demo(id: &str, instruction: &str, actions: &[&str]) -> Demonstration {
    Demonstration {
        id: id.into(),
        instruction: Instruction::new(instruction).unwrap(),
        trajectory: Trajectory {
            steps: actions
                .iter()
                .enumerate()
                .map(|(i, a)| Step {
                    observation: Observation::new(format!("obs {id} {i}"), i as u32),
                    action: ActionString::new(*a).unwrap(),
                })
                .collect(),
            final_observation: Observation::new("end", actions.len() as u32),
            exec_failures: 0,
            terminated_by: TerminatedBy::FinishAction,
        },
        env_id: "toolbench".into(),
        source: Source::TrajectoryFirst,
        iterations_used: 0,
        filter_verdict: 1,
    }
}

fn buffer() -> DemoBuffer {
    let mut b = DemoBuffer::new("toolbench");
    b.push(demo("t1", "What is 3+7?", &["tool calculator(3+7)", "finish: 10"]))
        .unwrap();
    b.push(demo(
        "t2",
        "How many rentals have price < 600?",
        &["tool load_table(rentals)", "finish: 2"],
    ))
    .unwrap();
    b.push(demo(
        "t3",
        "Who wrote with Ada?",
        &["tool load_graph(authors)", "finish: Grace"],
    ))
    .unwrap();
    b.push(demo("t4", "What is 9*2?", &["tool calculator(9*2)", "finish: 18"]))
        .unwrap();
    b
}

fn config(mode: DemoMode) -> EvalConfig {
    let mut c = EvalConfig::new("toolbench", mode);
    c.task_seeds = vec![0];
    c
}

/// Counts every access to the underlying demos.
struct Counting<'a>(&'a DemoBuffer, AtomicUsize);

impl DemoSource for Counting<'_> {
    fn demos(&self) -> &[Demonstration] {
        self.1.fetch_add(1, Ordering::SeqCst);
        self.0.demos()
    }
}

fn follow_prompts(lm: &ScriptedBackend) -> Vec<String> {
    lm.captured()
        .into_iter()
        .filter(|(m, _)| m.role == Role::Follow)
        .map(|(_, p)| p)
        .collect()
}

#[test]
fn retrieved_demos_beat_zero_shot() {
    let prompts = PromptSet::default();
    let buf = buffer();
    let e = HashEmbedder::default();
    let zero = run_eval(&config(DemoMode::None), None, &script(), &prompts, &e).unwrap();
    let with = run_eval(&config(DemoMode::Retrieved), Some(&buf), &script(), &prompts, &e).unwrap();
    assert_eq!(zero.mean_score, 0.0);
    assert_eq!(with.mean_score, 1.0);
    assert_eq!(with.mean_f1, Some(1.0));
    assert_eq!(with.per_task[0].demo_ids[0], "t1");
    assert_eq!(with.per_task[0].demo_ids.len(), 3);
}

#[test]
fn zero_shot_never_reads_the_buffer() {
    let buf = buffer();
    let counting = Counting(&buf, AtomicUsize::new(0));
    let lm = script();
    let r = run_eval(
        &config(DemoMode::None),
        Some(&counting),
        &lm,
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    assert_eq!(counting.1.load(Ordering::SeqCst), 0);
    assert!(r.per_task[0].demo_ids.is_empty());
    assert!(follow_prompts(&lm).iter().all(|p| !p.contains("Example instruction:")));
}

#[test]
fn demo_modes_need_a_buffer() {
    let prompts = PromptSet::default();
    let e = HashEmbedder::default();
    let empty = DemoBuffer::new("toolbench");
    for mode in [
        DemoMode::Retrieved,
        DemoMode::Random,
        DemoMode::Shuffled,
        DemoMode::ManualFiltered,
    ] {
        let err = run_eval(&config(mode), Some(&empty), &script(), &prompts, &e).unwrap_err();
        assert!(matches!(err, EvalError::EmptyBuffer(m) if m == mode));
        let err = run_eval(&config(mode), None, &script(), &prompts, &e).unwrap_err();
        assert!(matches!(err, EvalError::EmptyBuffer(_)));
    }
    // nothing marked accept
    let err = run_eval(
        &config(DemoMode::ManualFiltered),
        Some(&buffer()),
        &script(),
        &prompts,
        &e,
    )
    .unwrap_err();
    assert!(matches!(err, EvalError::EmptyBuffer(DemoMode::ManualFiltered)));
}

#[test]
fn shuffled_keeps_trajectories_and_permutes_instructions() {
    let buf = buffer();
    let lm = script();
    run_eval(
        &config(DemoMode::Shuffled),
        Some(&buf),
        &lm,
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    let retrieved = script();
    run_eval(
        &config(DemoMode::Retrieved),
        Some(&buf),
        &retrieved,
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    let shuffled = &follow_prompts(&lm)[0];
    let plain = &follow_prompts(&retrieved)[0];
    assert_ne!(shuffled, plain);
    let instr = |p: &str| -> Vec<String> {
        p.lines()
            .filter_map(|l| l.strip_prefix("Example instruction: "))
            .map(String::from)
            .collect()
    };
    let (mut a, mut b) = (instr(shuffled), instr(plain));
    assert_eq!(a.len(), 3);
    assert!(
        a.iter().zip(&b).all(|(x, y)| x != y),
        "no demo keeps its own instruction"
    );
    a.sort();
    b.sort();
    assert_eq!(a, b);
    // trajectories stay in retrieval order
    let traj = |p: &str| -> Vec<String> { p.lines().filter(|l| l.starts_with("obs t")).map(String::from).collect() };
    assert_eq!(traj(shuffled), traj(plain));
}

#[test]
fn single_demo_shuffle_is_flagged() {
    let mut buf = DemoBuffer::new("toolbench");
    buf.push(demo("t1", "What is 3+7?", &["finish: 10"])).unwrap();
    let mut c = config(DemoMode::Shuffled);
    c.k = 1;
    let r = run_eval(
        &c,
        Some(&buf),
        &script(),
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    assert!(r.per_task[0].unshuffled);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn manual_filter_uses_only_accepted_ids() {
    let buf = buffer();
    let mut c = config(DemoMode::ManualFiltered);
    c.marks.set("t2", Mark::Accept);
    c.marks.set("t4", Mark::Accept);
    c.marks.set("t1", Mark::Reject);
    let r = run_eval(
        &c,
        Some(&buf),
        &script(),
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    let mut ids = r.per_task[0].demo_ids.clone();
    ids.sort();
    assert_eq!(ids, ["t2", "t4"]);
    assert!(r.warnings[0].contains("2 demonstration(s)"));
}

#[test]
fn random_selection_is_seeded() {
    let buf = buffer();
    let mut c = config(DemoMode::Random);
    c.task_seeds = (0..10).collect();
    c.k = 2;
    let run = |c: &EvalConfig| {
        run_eval(
            c,
            Some(&buf),
            &script(),
            &PromptSet::default(),
            &HashEmbedder::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(&c), run(&c));
    assert_eq!(a, b);
    let sets: std::collections::BTreeSet<_> = a.per_task.iter().map(|e| e.demo_ids.clone()).collect();
    assert!(sets.len() > 1);
    c.rng_seed = 99;
    assert_ne!(run(&c).per_task, a.per_task);
}

#[test]
fn web_episodes_score_mapped_rewards() {
    let lm = ScriptedBackend::from_rules(vec![bagel_core::lm::ScriptRule::role(Role::Follow, &["finish"])]).unwrap();
    let mut c = EvalConfig::new("choose_date", DemoMode::None);
    c.task_seeds = vec![1, 2];
    let r = run_eval(&c, None, &lm, &PromptSet::default(), &HashEmbedder::default()).unwrap();
    assert_eq!(r.mean_score, 0.0);
    assert_eq!(r.mean_f1, None);
    assert!(r.per_task.iter().all(|e| e.terminated_by == TerminatedBy::FinishAction));
}

#[test]
fn mean_exec_failures_averages_episodes() {
    let ep = |seed, fails| EpisodeResult {
        seed,
        instruction: "x".into(),
        score: 0.0,
        f1: None,
        exec_failures: fails,
        length: 1,
        terminated_by: TerminatedBy::FinishAction,
        demo_ids: vec![],
        unshuffled: false,
    };
    let r = MetricsReport::from_episodes(&config(DemoMode::None), vec![ep(0, 3), ep(1, 0), ep(2, 3)], vec![]);
    assert_eq!(r.mean_exec_failures, 2.0);
    let table = r.to_table();
    assert!(table.contains("mean exec failures 2.0000"));
    assert_eq!(table.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 3);
}

#[test]
fn parallel_eval_matches_sequential() {
    let buf = buffer();
    let mut c = config(DemoMode::Retrieved);
    c.task_seeds = (0..20).collect();
    let seq = run_eval(
        &c,
        Some(&buf),
        &script(),
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    c.jobs = 4;
    let par = run_eval(
        &c,
        Some(&buf),
        &script(),
        &PromptSet::default(),
        &HashEmbedder::default(),
    )
    .unwrap();
    assert_eq!(seq.to_json(), par.to_json());
}

#[test]
fn marks_file_round_trip() {
    let dir = std::env::temp_dir().join(format!("bagel-marks-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.jsonl");
    assert_eq!(Marks::load(&path).unwrap(), Marks::default());
    let mut m = Marks::default();
    m.set("b", Mark::Reject);
    m.set("a", Mark::Accept);
    m.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    Marks::load(&path).unwrap().save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    std::fs::remove_dir_all(&dir).unwrap();
}
