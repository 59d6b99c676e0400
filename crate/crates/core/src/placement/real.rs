//! Threaded rollout: one generation worker and one simulator worker per stage.
//!
//! Slot exclusivity is a one-permit channel per component. When the env and
//! rollout slot sets overlap both components draw from the same permit.

use super::{Activity, Component, EpochTrace, Interval, PlacementError, PlacementPlan};
use crate::policy::PolicyNet;
use crate::rollout::{assemble, Generated, RolloutSpec, Sampler, Stage};
use crate::types::{Observation, TrajectorySlab};
use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use std::time::Instant;

struct Permit {
    tx: Sender<()>,
    rx: Receiver<()>,
}

impl Permit {
    fn new() -> Self {
        let (tx, rx) = bounded(1);
        tx.send(()).expect("fresh permit");
        Self { tx, rx }
    }

    fn hold<T>(&self, f: impl FnOnce() -> T) -> T {
        self.rx.recv().expect("permit lost");
        let out = f();
        self.tx.send(()).expect("permit lost");
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub(super) struct Logged {
    pub activity: Activity,
    pub stage: usize,
    pub step: usize,
    pub start: Instant,
    pub end: Instant,
}

struct Request {
    stage: usize,
    step: usize,
    obs: Vec<Observation>,
}

pub(super) fn run(
    plan: &PlacementPlan,
    policy: &PolicyNet,
    spec: &RolloutSpec,
    stages: &[Vec<usize>],
    start: f64,
    trace: &mut EpochTrace,
) -> Result<TrajectorySlab, PlacementError> {
    let workers = stages
        .iter()
        .map(|ids| Stage::new(spec, ids))
        .collect::<Result<Vec<_>, _>>()?;
    let (logs, outputs) = run_workers(plan, policy, spec, stages, workers)?;
    let t0 = logs.iter().map(|l| l.start).min();
    for l in &logs {
        let origin = t0.expect("non-empty log");
        let (c, slots) = match l.activity {
            Activity::Generate => (Component::Rollout, &plan.rollout),
            _ => (Component::Env, &plan.env),
        };
        for &slot in slots.slots() {
            trace.intervals.push(Interval {
                slot,
                component: c,
                activity: l.activity,
                stage: Some(l.stage),
                step: Some(l.step),
                t_start: start + (l.start - origin).as_secs_f64(),
                t_end: start + (l.end - origin).as_secs_f64(),
            });
        }
    }
    let arch = policy.arch();
    Ok(assemble(outputs, arch.chunk_len, arch.tokens_per_action))
}

type WorkerResult = (Vec<Logged>, Vec<crate::rollout::StageOutput>);

pub(super) fn run_workers(
    plan: &PlacementPlan,
    policy: &PolicyNet,
    spec: &RolloutSpec,
    stages: &[Vec<usize>],
    workers: Vec<Stage>,
) -> Result<WorkerResult, PlacementError> {
    let shared = plan.env.intersects(&plan.rollout);
    let gen_permit = Permit::new();
    let sim_permit = if shared { None } else { Some(Permit::new()) };
    let sim_permit = sim_permit.as_ref().unwrap_or(&gen_permit);
    let gen_permit = &gen_permit;
    let steps = spec.steps;
    let (req_tx, req_rx) = unbounded::<Request>();
    let replies: Vec<(Sender<Vec<Generated>>, Receiver<Vec<Generated>>)> =
        stages.iter().map(|_| unbounded()).collect();

    std::thread::scope(|scope| {
        let reply_tx: Vec<Sender<Vec<Generated>>> =
            replies.iter().map(|(t, _)| t.clone()).collect();
        let gen = scope.spawn(move || {
            let mut sampler = Sampler::new(
                spec.sample_seed,
                stages.iter().flatten().copied(),
                spec.sample_mode,
            );
            let mut log = Vec::new();
            for req in req_rx.iter() {
                let (out, a, b) = gen_permit.hold(|| {
                    let a = Instant::now();
                    let out = sampler.generate(policy, &stages[req.stage], &req.obs);
                    (out, a, Instant::now())
                });
                log.push(Logged {
                    activity: Activity::Generate,
                    stage: req.stage,
                    step: req.step,
                    start: a,
                    end: b,
                });
                if reply_tx[req.stage].send(out).is_err() {
                    break;
                }
            }
            log
        });
        let handles: Vec<_> = workers
            .into_iter()
            .enumerate()
            .map(|(s, mut st)| {
                let req_tx = req_tx.clone();
                let rx = replies[s].1.clone();
                scope.spawn(move || -> Result<_, PlacementError> {
                    let mut log = Vec::new();
                    for step in 0..steps {
                        req_tx
                            .send(Request {
                                stage: s,
                                step,
                                obs: st.observations().to_vec(),
                            })
                            .map_err(|e| PlacementError::Worker(e.to_string()))?;
                        let gen = rx
                            .recv()
                            .map_err(|e| PlacementError::Worker(e.to_string()))?;
                        let (res, a, b) = sim_permit.hold(|| {
                            let a = Instant::now();
                            let res = st.apply(policy, gen);
                            (res, a, Instant::now())
                        });
                        res?;
                        log.push(Logged {
                            activity: Activity::Simulate,
                            stage: s,
                            step,
                            start: a,
                            end: b,
                        });
                    }
                    Ok((log, st.finish(policy)))
                })
            })
            .collect();
        drop(req_tx);
        let mut logs = Vec::new();
        let mut outputs = Vec::new();
        let mut err = None;
        for h in handles {
            match h.join() {
                Ok(Ok((l, o))) => {
                    logs.extend(l);
                    outputs.push(o);
                }
                Ok(Err(e)) => err = err.or(Some(e)),
                Err(_) => {
                    err = err.or(Some(PlacementError::Worker("stage worker panicked".into())))
                }
            }
        }
        match gen.join() {
            Ok(l) => logs.extend(l),
            Err(_) => {
                err = err.or(Some(PlacementError::Worker(
                    "generation worker panicked".into(),
                )))
            }
        }
        match err {
            Some(e) => Err(e),
            None => Ok((logs, outputs)),
        }
    })
}
