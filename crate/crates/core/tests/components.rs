use bagel_core::components::{parse_verdict, trajectory_text, Agent, ComponentError, Controller};
use bagel_core::envsim::{self, EnvSession};
use bagel_core::lm::{LanguageModel, LmError, MatchMode, PromptSet, Role, ScriptRule, ScriptedBackend, TemplateError};
use bagel_core::{ActionString, Demonstration, Instruction, Observation, Source, Step, TerminatedBy, Trajectory};

fn session(env: &str, seed: u64) -> EnvSession {
    envsim::reset(env, seed).unwrap().0
}

fn lm(rules: Vec<ScriptRule>) -> ScriptedBackend {
    ScriptedBackend::from_rules(rules).unwrap().capturing()
}

fn steps(role: Role, actions: &[&str]) -> ScriptRule {
    ScriptRule::role(role, actions).mode(MatchMode::ByStep)
}

fn agent<'a>(lm: &'a dyn LanguageModel, prompts: &'a PromptSet, env: &str) -> Agent<'a> {
    Agent::for_env(lm, prompts, env).unwrap()
}

fn trajectory(actions: &[&str]) -> Trajectory {
    Trajectory {
        steps: actions
            .iter()
            .enumerate()
            .map(|(i, a)| Step {
                observation: Observation::new(format!("screen {i}"), i as u32),
                action: ActionString::new(*a).unwrap(),
            })
            .collect(),
        final_observation: Observation::new("done", actions.len() as u32),
        exec_failures: 0,
        terminated_by: TerminatedBy::FinishAction,
    }
}

fn demo(id: &str, instruction: &str) -> Demonstration {
    Demonstration {
        id: id.into(),
        instruction: Instruction::new(instruction).unwrap(),
        trajectory: trajectory(&["click 0", "click 35"]),
        env_id: "choose_date".into(),
        source: Source::TrajectoryFirst,
        iterations_used: 0,
        filter_verdict: 1,
    }
}

#[test]
fn explore_three_steps_to_finish() {
    let prompts = PromptSet::default();
    let lm = lm(vec![steps(Role::Explore, &["click 0", "click 3", "finish"])]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 4))
        .unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(t.terminated_by, TerminatedBy::FinishAction);
    assert_eq!(t.exec_failures, 0);
    assert!(t.final_observation.text().contains("January"));
}

#[test]
fn step_budget_caps_at_fifteen() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(Role::Explore, &["click 0"])]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap();
    assert_eq!(t.len(), 15);
    assert_eq!(t.terminated_by, TerminatedBy::StepBudget);
    assert_eq!(lm.call_count(), 15);
}

#[test]
fn resample_budget_after_five_failures() {
    let prompts = PromptSet::default();
    let lm = lm(vec![
        ScriptRule::role(Role::Explore, &["click 0"]).at_step(0),
        ScriptRule::role(Role::Explore, &["click 99"]),
    ]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap();
    assert_eq!(t.terminated_by, TerminatedBy::ResampleBudget);
    assert_eq!(t.exec_failures, 5);
    assert_eq!(t.len(), 1);
    assert_eq!(t.final_observation.step_index(), 1);

    let cap = lm.captured();
    let attempts: Vec<u32> = cap
        .iter()
        .filter(|(m, _)| m.step == 1)
        .map(|(m, _)| m.attempt)
        .collect();
    assert_eq!(attempts, [0, 1, 2, 3, 4]);
    // Each re-sample carries the environment's error message.
    let retry = &cap.iter().find(|(m, _)| m.step == 1 && m.attempt == 1).unwrap().1;
    assert!(retry.contains("click 99"));
    assert!(retry.contains("no element with id 99"));
    assert!(retry.trim_end().ends_with("Action:"));
    let later = &cap.iter().find(|(m, _)| m.step == 1 && m.attempt == 4).unwrap().1;
    assert_eq!(later.matches("no element with id 99").count(), 4);
}

#[test]
fn empty_trajectory_when_first_step_never_executes() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(
        Role::Explore,
        &["clik 0", "type 0 \"x\"", "click 3"],
    )]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap();
    assert!(t.is_empty());
    assert_eq!(t.terminated_by, TerminatedBy::ResampleBudget);
    assert_eq!(t.exec_failures, 5);
    assert!(t.validate(&Default::default()).is_ok());
}

#[test]
fn parse_errors_name_the_nearest_production() {
    let prompts = PromptSet::default();
    let lm = lm(vec![
        ScriptRule::role(Role::Explore, &["finish"]).at_attempt(1),
        ScriptRule::role(Role::Explore, &["clik 0"]),
    ]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap();
    assert_eq!(t.exec_failures, 1);
    assert_eq!(t.len(), 1);
    let retry = &lm.captured()[1].1;
    assert!(retry.contains("nearest production: `click <int>`"), "{retry}");
}

#[test]
fn follow_replays_final_october_trajectory() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(
        Role::Follow,
        &["click 0", "click 1", "click 1", "click 10", "click 35"],
    )
    .mode(MatchMode::ByStep)]);
    let g = Instruction::new("Change month to October 7th and submit").unwrap();
    let t = agent(&lm, &prompts, "choose_date")
        .follow_rollout(&mut session("choose_date", 4), &g, &[])
        .unwrap();
    assert_eq!(t.len(), 5);
    assert_eq!(t.steps.last().unwrap().action.as_str(), "click 35");
    assert_eq!(t.terminated_by, TerminatedBy::FinishAction);
    assert_eq!(t.exec_failures, 0);
    assert!(t.steps[3].observation.text().contains("October"));
    assert!(lm.captured()[0]
        .1
        .contains("Instruction: Change month to October 7th and submit"));
}

#[test]
fn empty_instruction_is_unrepresentable() {
    assert!(Instruction::new("").is_err());
    assert!(Instruction::new(" \t ").is_err());
}

#[test]
fn follow_prompt_lists_demos_before_instruction_in_order() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(Role::Follow, &["finish"])]);
    let demos = [demo("a", "Select March 3 and submit"), demo("b", "Open the calendar")];
    let g = Instruction::new("Select May 9 and submit").unwrap();
    agent(&lm, &prompts, "choose_date")
        .follow_rollout(&mut session("choose_date", 2), &g, &demos)
        .unwrap();
    let prompt = &lm.captured()[0].1;
    let a = prompt.find("Example instruction: Select March 3 and submit").unwrap();
    let b = prompt.find("Example instruction: Open the calendar").unwrap();
    let q = prompt.find("Instruction: Select May 9 and submit").unwrap();
    assert!(a < b && b < q);
}

#[test]
fn label_sees_full_history() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(
        Role::Label,
        &["Change month from December to October"],
    )]);
    let t = trajectory(&[
        "click 0", "click 3", "click 1", "click 3", "click 1", "click 1", "finish",
    ]);
    let g = agent(&lm, &prompts, "choose_date").label_trajectory(&t).unwrap();
    assert_eq!(g.as_str(), "Change month from December to October");
    let prompt = &lm.captured()[0].1;
    assert_eq!(prompt.matches("\nAction: ").count(), t.len());
    for i in 0..t.len() {
        assert!(prompt.contains(&format!("screen {i}")));
    }
    assert!(prompt.contains("Final observation:\ndone"));
}

#[test]
fn label_truncates_each_observation() {
    let mut t = trajectory(&["click 0"]);
    t.steps[0].observation = Observation::new("x".repeat(1500), 0);
    let text = trajectory_text(&t, 500);
    let line = text.lines().nth(1).unwrap();
    assert_eq!(line.chars().count(), 500);
}

#[test]
fn label_rejects_empty_trajectory() {
    let prompts = PromptSet::default();
    let lm = lm(vec![]);
    let mut t = trajectory(&[]);
    t.terminated_by = TerminatedBy::ResampleBudget;
    let err = agent(&lm, &prompts, "choose_date").label_trajectory(&t).unwrap_err();
    assert!(matches!(err, ComponentError::Precondition(_)));
    assert_eq!(lm.call_count(), 0);
}

#[test]
fn label_strips_prefix_and_repairs_empty_reply() {
    let prompts = PromptSet::default();
    let lm = lm(vec![
        ScriptRule::role(Role::Label, &["Instruction: Star the email from Trixi"]).at_attempt(1),
        ScriptRule::role(Role::Label, &["   "]),
    ]);
    let g = agent(&lm, &prompts, "email_inbox")
        .label_trajectory(&trajectory(&["click 2"]))
        .unwrap();
    assert_eq!(g.as_str(), "Star the email from Trixi");
    assert_eq!(lm.call_count(), 2);

    let lm = self::lm(vec![ScriptRule::role(Role::Label, &[""])]);
    let err = agent(&lm, &prompts, "email_inbox")
        .label_trajectory(&trajectory(&["click 2"]))
        .unwrap_err();
    assert!(matches!(err, ComponentError::Lm(LmError::MalformedResponse(_))));
}

#[test]
fn generate_instruction_from_reset_observation() {
    let prompts = PromptSet::default();
    let lm = lm(vec![
        ScriptRule::contains(
            "ToolBench session ready",
            &["What are the top 5 rentals with price < 900?"],
        ),
        ScriptRule::contains("datepicker", &["Select October 7 and submit"]),
    ]);
    let (_, obs) = envsim::reset("toolbench", 0).unwrap();
    let g = agent(&lm, &prompts, "toolbench").generate_instruction(&obs).unwrap();
    assert_eq!(g.as_str(), "What are the top 5 rentals with price < 900?");
    let (_, obs) = envsim::reset("choose_date", 3).unwrap();
    let g = agent(&lm, &prompts, "choose_date").generate_instruction(&obs).unwrap();
    assert_eq!(g.as_str(), "Select October 7 and submit");
    assert!(lm.captured()[0].1.contains("load_table"));
}

#[test]
fn empty_inventory_is_unbound() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(Role::Instruct, &["x"])]);
    let (_, obs) = envsim::reset("choose_date", 3).unwrap();
    let err = Agent::new(&lm, &prompts, "").generate_instruction(&obs).unwrap_err();
    assert!(matches!(
        err,
        ComponentError::Template(TemplateError::UnboundPlaceholder("inventory_str"))
    ));
}

#[test]
fn judge_parses_and_repairs() {
    let prompts = PromptSet::default();
    let g = Instruction::new("Select May 9").unwrap();
    let t = trajectory(&["click 0"]);

    let yes = lm(vec![ScriptRule::role(Role::Filter, &["Yes."])]);
    assert_eq!(agent(&yes, &prompts, "choose_date").judge(&g, &t).unwrap(), 1);

    let repaired = lm(vec![
        ScriptRule::role(Role::Filter, &["It seems fine", "0"]).mode(MatchMode::InOrder)
    ]);
    assert_eq!(agent(&repaired, &prompts, "choose_date").judge(&g, &t).unwrap(), 0);
    let cap = repaired.captured();
    assert_eq!(cap.len(), 2);
    assert!(cap[1].1.contains("It seems fine"));
    assert!(cap[1].1.contains("only the digit 1"));

    let hopeless = lm(vec![ScriptRule::role(Role::Filter, &["maybe", "1 probably"])]);
    assert_eq!(agent(&hopeless, &prompts, "choose_date").judge(&g, &t).unwrap(), 0);
    assert_eq!(hopeless.call_count(), 2);
}

#[test]
fn verdict_parser_is_total() {
    for (s, v) in [
        ("1", Some(1)),
        ("YES", Some(1)),
        (" no ", Some(0)),
        ("0.", Some(0)),
        ("10", None),
        ("", None),
    ] {
        assert_eq!(parse_verdict(s), v, "{s:?}");
    }
}

#[test]
fn thoughts_do_not_consume_steps() {
    let prompts = PromptSet::default();
    let lm = lm(vec![
        ScriptRule::role(Role::Explore, &["think: open the picker first"])
            .at_step(0)
            .at_attempt(0),
        steps(Role::Explore, &["click 0", "finish"]),
    ]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.exec_failures, 0);
    assert!(t.actions().all(|a| !a.as_str().starts_with("think")));
    let cap = lm.captured();
    assert_eq!(cap.len(), 3);
    assert!(cap[1].1.contains("Thought: open the picker first"));
}

#[test]
fn endless_thinking_turns_into_failures() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(Role::Explore, &["think: hmm"])]);
    let t = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap();
    assert!(t.is_empty());
    assert_eq!(t.terminated_by, TerminatedBy::ResampleBudget);
    assert_eq!(t.exec_failures, 5);
    assert_eq!(lm.call_count(), 10);
}

#[test]
fn lm_controller_translates_free_text() {
    let prompts = PromptSet::default();
    let lm = lm(vec![
        ScriptRule::role(Role::Explore, &["open the date picker", "press Next", "finish"]).mode(MatchMode::ByStep),
        ScriptRule::role(Role::Controller, &["click 0"]).at_step(0),
        ScriptRule::role(Role::Controller, &["next please", "click 3"])
            .at_step(1)
            .mode(MatchMode::InOrder),
        ScriptRule::role(Role::Controller, &["finish"]),
    ]);
    let mut a = agent(&lm, &prompts, "choose_date");
    a.controller = Controller::Lm { max_attempts: 2 };
    let t = a.explore_rollout(&mut session("choose_date", 4)).unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(t.exec_failures, 0);
    assert_eq!(t.steps[1].action.as_str(), "press Next");
    assert!(t.final_observation.text().contains("January"));
    let cap = lm.captured();
    let second_try = cap
        .iter()
        .find(|(m, _)| m.role == Role::Controller && m.step == 1 && m.attempt == 1)
        .unwrap();
    assert!(second_try.1.contains("Described action: press Next"));
    assert!(second_try.1.contains("could not be parsed"));
}

#[test]
fn backend_errors_propagate() {
    let prompts = PromptSet::default();
    let lm = lm(vec![]);
    let err = agent(&lm, &prompts, "choose_date")
        .explore_rollout(&mut session("choose_date", 1))
        .unwrap_err();
    assert!(matches!(err, ComponentError::Lm(LmError::NoRuleMatched { .. })));
}

#[test]
fn rollouts_need_fresh_sessions() {
    let prompts = PromptSet::default();
    let lm = lm(vec![ScriptRule::role(Role::Explore, &["finish"])]);
    let mut s = session("choose_date", 1);
    s.execute(&envsim::parse_grammar("click 0").unwrap()).unwrap();
    let err = agent(&lm, &prompts, "choose_date").explore_rollout(&mut s).unwrap_err();
    assert!(matches!(err, ComponentError::Precondition(_)));
}

#[test]
fn toolbench_rollout_answers() {
    let prompts = PromptSet::default();
    let lm = lm(vec![steps(Role::Follow, &["tool calculator(3+7)", "finish: 10"])]);
    let mut s = session("toolbench", 0);
    let g = Instruction::new("What is 3+7?").unwrap();
    let t = agent(&lm, &prompts, "toolbench")
        .follow_rollout(&mut s, &g, &[])
        .unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(s.answer(), Some("10"));
    assert!(t.steps[1].observation.text().contains("10"));
}
