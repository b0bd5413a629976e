//! In-process collectives binding `N` workers.
//!
//! Workers are futures. In [`ExecMode::Sim`] they are polled round-robin
//! on the calling thread; in [`ExecMode::Parallel`] each runs on its own OS
//! thread and blocks while waiting at a rendezvous. Both modes share the
//! rendezvous table, so every collective produces the same bits: reductions
//! always fold in ascending rank order, `((v0 + v1) + v2) + ...`.
//!
//! Each rank numbers its collectives; the n-th collective of every rank meets
//! in the same slot and must carry the same `(step, op, layer)` key.

use std::collections::HashMap;
use std::future::{poll_fn, Future};
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};
use std::thread::{self, Thread};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODE_ENV: &str = "SHARDTRAIN_MODE";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FabricError {
    #[error("protocol error on rank {rank}: {msg}")]
    Protocol { rank: usize, msg: String },
    #[error("rank {rank} waited {waited:?} at a collective without progress")]
    Timeout { rank: usize, waited: Duration },
    #[error("all workers blocked: {0}")]
    Deadlock(String),
    #[error("invalid broadcast root {root} for world size {world_size}")]
    InvalidRoot { root: usize, world_size: usize },
    #[error("world aborted after a failure on rank {0}")]
    Aborted(usize),
    #[error("invalid world size {0}")]
    InvalidWorld(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    #[serde(alias = "simulated")]
    Sim,
    Parallel,
}

impl ExecMode {
    /// Reads [`MODE_ENV`]; unset means simulated.
    pub fn from_env() -> Result<Self, String> {
        match std::env::var(MODE_ENV) {
            Err(_) => Ok(ExecMode::Sim),
            Ok(v) => match v.as_str() {
                "sim" | "" => Ok(ExecMode::Sim),
                "parallel" => Ok(ExecMode::Parallel),
                other => Err(format!("{MODE_ENV} must be 'sim' or 'parallel', got '{other}'")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveOp {
    AllReduce,
    ReduceScatter,
    AllGather,
    Broadcast,
    Barrier,
}

impl CollectiveOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveOp::AllReduce => "all_reduce",
            CollectiveOp::ReduceScatter => "reduce_scatter",
            CollectiveOp::AllGather => "all_gather",
            CollectiveOp::Broadcast => "broadcast",
            CollectiveOp::Barrier => "barrier",
        }
    }
}

/// Layer id used for collectives that are not tied to a layer.
pub const NO_LAYER: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CollectiveKey {
    pub step: u64,
    pub op: CollectiveOp,
    pub layer: i64,
    /// Broadcast root; zero for other ops.
    pub root: usize,
}

/// One event-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub step: u64,
    pub op: String,
    pub layer: i64,
    pub rank: usize,
    /// Elements this rank contributed; zero for local events.
    pub len: usize,
    pub t_start: f64,
    pub t_end: f64,
}

struct Slot {
    key: CollectiveKey,
    payloads: Vec<Option<Vec<f64>>>,
    arrived: usize,
    result: Option<Result<Arc<Vec<f64>>, FabricError>>,
    taken: usize,
    wakers: Vec<Waker>,
}

#[derive(Default)]
struct Table {
    slots: HashMap<u64, Slot>,
    poisoned: Option<FabricError>,
}

struct Shared {
    world_size: usize,
    table: Mutex<Table>,
    events: Mutex<Vec<EventRecord>>,
    epoch: Instant,
}

impl Shared {
    fn poison(&self, err: FabricError) {
        let mut table = self.table.lock().expect("fabric lock");
        if table.poisoned.is_none() {
            table.poisoned = Some(err);
        }
        let wakers: Vec<Waker> = table.slots.values_mut().flat_map(|s| s.wakers.drain(..)).collect();
        drop(table);
        wakers.into_iter().for_each(Waker::wake);
    }

    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }
}

/// A rank's endpoint into the world.
pub struct WorldHandle {
    rank: usize,
    world_size: usize,
    step: u64,
    seq: u64,
    shared: Arc<Shared>,
}

impl std::fmt::Debug for WorldHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorldHandle")
            .field("rank", &self.rank)
            .field("world_size", &self.world_size)
            .field("step", &self.step)
            .finish()
    }
}

fn combine(key: &CollectiveKey, payloads: &[Vec<f64>], world: usize) -> Result<Vec<f64>, FabricError> {
    let protocol = |msg: String| FabricError::Protocol { rank: 0, msg };
    match key.op {
        CollectiveOp::Broadcast => Ok(payloads[key.root].clone()),
        CollectiveOp::Barrier => Ok(Vec::new()),
        op => {
            let len = payloads[0].len();
            if let Some(r) = payloads.iter().position(|p| p.len() != len) {
                return Err(protocol(format!(
                    "{} payload length {} on rank {r} differs from {len} on rank 0",
                    op.as_str(),
                    payloads[r].len()
                )));
            }
            match op {
                CollectiveOp::AllGather => Ok(payloads.concat()),
                _ => {
                    if op == CollectiveOp::ReduceScatter && !len.is_multiple_of(world) {
                        return Err(protocol(format!(
                            "reduce_scatter length {len} not divisible by world size {world}"
                        )));
                    }
                    let mut acc = payloads[0].clone();
                    for p in &payloads[1..] {
                        for (a, v) in acc.iter_mut().zip(p) {
                            *a += v;
                        }
                    }
                    Ok(acc)
                }
            }
        }
    }
}

impl WorldHandle {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sets the step counter stamped on subsequent collectives.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Records a non-collective event (e.g. releasing an unsharded layer).
    pub fn log_local(&self, op: &str, layer: i64) {
        let t = self.shared.now();
        self.shared.events.lock().expect("event lock").push(EventRecord {
            step: self.step,
            op: op.to_string(),
            layer,
            rank: self.rank,
            len: 0,
            t_start: t,
            t_end: t,
        });
    }

    async fn collective(&mut self, op: CollectiveOp, layer: i64, root: usize, payload: &[f64]) -> Result<Arc<Vec<f64>>, FabricError> {
        let key = CollectiveKey {
            step: self.step,
            op,
            layer,
            root,
        };
        let seq = self.seq;
        self.seq += 1;
        let rank = self.rank;
        let world = self.world_size;
        let shared = Arc::clone(&self.shared);
        let t_start = shared.now();
        let payload_len = payload.len();
        let mut payload = Some(payload.to_vec());

        let out = poll_fn(|cx| {
            let mut table = shared.table.lock().expect("fabric lock");
            if let Some(err) = &table.poisoned {
                return Poll::Ready(Err(err.clone()));
            }
            if let Some(p) = payload.take() {
                let slot = table.slots.entry(seq).or_insert_with(|| Slot {
                    key,
                    payloads: vec![None; world],
                    arrived: 0,
                    result: None,
                    taken: 0,
                    wakers: Vec::new(),
                });
                if slot.key != key {
                    let msg = format!(
                        "collective #{seq}: rank {rank} entered {:?} but the world is at {:?}",
                        key, slot.key
                    );
                    drop(table);
                    let err = FabricError::Protocol { rank, msg };
                    shared.poison(err.clone());
                    return Poll::Ready(Err(err));
                }
                slot.payloads[rank] = Some(p);
                slot.arrived += 1;
                if slot.arrived == world {
                    let payloads: Vec<Vec<f64>> =
                        slot.payloads.iter_mut().map(|p| p.take().expect("all arrived")).collect();
                    slot.result = Some(combine(&key, &payloads, world).map(Arc::new));
                    slot.wakers.drain(..).for_each(Waker::wake);
                }
            }
            let slot = table.slots.get_mut(&seq).expect("slot exists until all ranks take");
            match &slot.result {
                Some(res) => {
                    let res = res.clone().map_err(|e| match e {
                        FabricError::Protocol { msg, .. } => FabricError::Protocol { rank, msg },
                        e => e,
                    });
                    slot.taken += 1;
                    if slot.taken == world {
                        table.slots.remove(&seq);
                    }
                    Poll::Ready(res)
                }
                None => {
                    slot.wakers.push(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
        .await;

        let t_end = shared.now();
        shared.events.lock().expect("event lock").push(EventRecord {
            step: key.step,
            op: op.as_str().to_string(),
            layer,
            rank,
            len: payload_len,
            t_start,
            t_end,
        });
        out
    }

    /// Element-wise sum over ranks, folded in ascending rank order.
    pub async fn all_reduce(&mut self, layer: i64, v: &[f64]) -> Result<Vec<f64>, FabricError> {
        Ok(self.collective(CollectiveOp::AllReduce, layer, 0, v).await?.to_vec())
    }

    /// This rank's block of the rank-order sum.
    pub async fn reduce_scatter(&mut self, layer: i64, v: &[f64]) -> Result<Vec<f64>, FabricError> {
        let world = self.world_size;
        let rank = self.rank;
        let full = self.collective(CollectiveOp::ReduceScatter, layer, 0, v).await?;
        let block = full.len() / world;
        Ok(full[rank * block..(rank + 1) * block].to_vec())
    }

    /// Rank-order concatenation of every rank's shard.
    pub async fn all_gather(&mut self, layer: i64, shard: &[f64]) -> Result<Vec<f64>, FabricError> {
        Ok(self.collective(CollectiveOp::AllGather, layer, 0, shard).await?.to_vec())
    }

    /// Root's payload on every rank; non-root payloads are ignored.
    pub async fn broadcast(&mut self, layer: i64, v: &[f64], root: usize) -> Result<Vec<f64>, FabricError> {
        if root >= self.world_size {
            return Err(FabricError::InvalidRoot {
                root,
                world_size: self.world_size,
            });
        }
        Ok(self.collective(CollectiveOp::Broadcast, layer, root, v).await?.to_vec())
    }

    pub async fn barrier(&mut self) -> Result<(), FabricError> {
        self.collective(CollectiveOp::Barrier, NO_LAYER, 0, &[]).await.map(|_| ())
    }
}

/// Owns the shared rendezvous state; hands out one [`WorldHandle`] per rank.
pub struct Fabric {
    shared: Arc<Shared>,
    timeout: Duration,
}

impl Fabric {
    pub fn new(world_size: usize) -> Result<Self, FabricError> {
        if world_size == 0 {
            return Err(FabricError::InvalidWorld(world_size));
        }
        Ok(Self {
            shared: Arc::new(Shared {
                world_size,
                table: Mutex::new(Table::default()),
                events: Mutex::new(Vec::new()),
                epoch: Instant::now(),
            }),
            timeout: Duration::from_secs(30),
        })
    }

    /// How long a parallel-mode worker may wait without progress.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn world_size(&self) -> usize {
        self.shared.world_size
    }

    fn handle(&self, rank: usize) -> WorldHandle {
        WorldHandle {
            rank,
            world_size: self.shared.world_size,
            step: 0,
            seq: 0,
            shared: Arc::clone(&self.shared),
        }
    }

    /// Snapshot of the event log in recording order.
    pub fn events(&self) -> Vec<EventRecord> {
        self.shared.events.lock().expect("event lock").clone()
    }

    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        self.events()
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }

    /// Runs one worker per rank to completion and returns their outputs in
    /// rank order. The first worker error (in time) is returned; its failure
    /// aborts the remaining ranks.
    pub fn run<T, E, F, Fut>(&self, mode: ExecMode, worker: F) -> Result<Vec<T>, E>
    where
        F: Fn(WorldHandle) -> Fut + Sync,
        Fut: Future<Output = Result<T, E>>,
        T: Send,
        E: From<FabricError> + Send,
    {
        match mode {
            ExecMode::Sim => self.run_sim(worker),
            ExecMode::Parallel => self.run_parallel(worker),
        }
    }

    fn run_sim<T, E, F, Fut>(&self, worker: F) -> Result<Vec<T>, E>
    where
        F: Fn(WorldHandle) -> Fut,
        Fut: Future<Output = Result<T, E>>,
        E: From<FabricError>,
    {
        let n = self.world_size();
        let mut tasks: Vec<Pin<Box<Fut>>> = (0..n).map(|r| Box::pin(worker(self.handle(r)))).collect();
        let flags: Vec<Arc<FlagWaker>> = (0..n).map(|_| Arc::new(FlagWaker(AtomicBool::new(true)))).collect();
        let mut outputs: Vec<Option<T>> = (0..n).map(|_| None).collect();
        let mut done = vec![false; n];
        let mut first_err: Option<E> = None;
        while done.iter().any(|d| !d) {
            let mut progressed = false;
            for r in 0..n {
                if done[r] || !flags[r].0.swap(false, Ordering::SeqCst) {
                    continue;
                }
                progressed = true;
                let waker = Waker::from(Arc::clone(&flags[r]));
                let mut cx = Context::from_waker(&waker);
                if let Poll::Ready(res) = tasks[r].as_mut().poll(&mut cx) {
                    done[r] = true;
                    match res {
                        Ok(v) => outputs[r] = Some(v),
                        Err(e) => {
                            if first_err.is_none() {
                                first_err = Some(e);
                                self.shared.poison(FabricError::Aborted(r));
                            }
                        }
                    }
                }
            }
            if !progressed {
                let blocked: Vec<usize> = (0..n).filter(|&r| !done[r]).collect();
                self.shared.poison(FabricError::Deadlock(format!("ranks {blocked:?} waiting")));
                if first_err.is_none() {
                    first_err = Some(E::from(FabricError::Deadlock(format!(
                        "ranks {blocked:?} wait at a collective that the other ranks never enter"
                    ))));
                }
                break;
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(outputs.into_iter().map(|o| o.expect("all done")).collect()),
        }
    }

    fn run_parallel<T, E, F, Fut>(&self, worker: F) -> Result<Vec<T>, E>
    where
        F: Fn(WorldHandle) -> Fut + Sync,
        Fut: Future<Output = Result<T, E>>,
        T: Send,
        E: From<FabricError> + Send,
    {
        let n = self.world_size();
        let failures: Mutex<Vec<E>> = Mutex::new(Vec::new());
        let outputs: Vec<Option<T>> = thread::scope(|scope| {
            let joins: Vec<_> = (0..n)
                .map(|r| {
                    let handle = self.handle(r);
                    let worker = &worker;
                    let failures = &failures;
                    let shared = &self.shared;
                    let timeout = self.timeout;
                    scope.spawn(move || {
                        let res = block_on_timeout(worker(handle), timeout)
                            .unwrap_or_else(|waited| Err(E::from(FabricError::Timeout { rank: r, waited })));
                        match res {
                            Ok(v) => Some(v),
                            Err(e) => {
                                failures.lock().expect("failure lock").push(e);
                                shared.poison(FabricError::Aborted(r));
                                None
                            }
                        }
                    })
                })
                .collect();
            joins
                .into_iter()
                .map(|j| j.join().expect("worker thread panicked"))
                .collect()
        });
        let mut failures = failures.into_inner().expect("failure lock");
        if !failures.is_empty() {
            return Err(failures.remove(0));
        }
        Ok(outputs.into_iter().map(|o| o.expect("no failures")).collect())
    }
}

struct FlagWaker(AtomicBool);

impl Wake for FlagWaker {
    fn wake(self: Arc<Self>) {
        self.0.store(true, Ordering::SeqCst);
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.0.store(true, Ordering::SeqCst);
    }
}

struct ThreadWaker {
    thread: Thread,
    woken: AtomicBool,
}

impl Wake for ThreadWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.woken.store(true, Ordering::SeqCst);
        self.thread.unpark();
    }
}

/// Polls `fut` on the current thread; gives up when no wake-up arrives within
/// `timeout`.
fn block_on_timeout<F: Future>(fut: F, timeout: Duration) -> Result<F::Output, Duration> {
    let mut fut = std::pin::pin!(fut);
    let tw = Arc::new(ThreadWaker {
        thread: thread::current(),
        woken: AtomicBool::new(false),
    });
    let waker = Waker::from(Arc::clone(&tw));
    let mut cx = Context::from_waker(&waker);
    loop {
        if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
            return Ok(v);
        }
        let start = Instant::now();
        while !tw.woken.swap(false, Ordering::SeqCst) {
            let waited = start.elapsed();
            if waited >= timeout {
                return Err(waited);
            }
            thread::park_timeout(timeout - waited);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type R<T> = Result<T, FabricError>;

    fn both_modes() -> [ExecMode; 2] {
        [ExecMode::Sim, ExecMode::Parallel]
    }

    #[test]
    fn all_reduce_small_cases() {
        for mode in both_modes() {
            let f = Fabric::new(1).unwrap();
            let out = f.run(mode, |mut h| async move { h.all_reduce(0, &[1.0, 2.0]).await }).unwrap();
            assert_eq!(out, vec![vec![1.0, 2.0]]);

            let f = Fabric::new(2).unwrap();
            let out: Vec<Vec<f64>> = f
                .run(mode, |mut h| async move {
                    let v = if h.rank() == 0 { vec![1.0, 2.0] } else { vec![3.0, 4.0] };
                    h.all_reduce(0, &v).await
                })
                .unwrap();
            assert_eq!(out, vec![vec![4.0, 6.0]; 2]);
        }
    }

    #[test]
    fn reduce_scatter_blocks() {
        let f = Fabric::new(2).unwrap();
        let out: Vec<Vec<f64>> = f
            .run(ExecMode::Sim, |mut h| async move {
                let v = if h.rank() == 0 { vec![1.0, 2.0] } else { vec![3.0, 4.0] };
                h.reduce_scatter(0, &v).await
            })
            .unwrap();
        assert_eq!(out, vec![vec![4.0], vec![6.0]]);

        let f = Fabric::new(2).unwrap();
        let err = f
            .run(ExecMode::Sim, |mut h| async move { h.reduce_scatter(0, &[1.0, 2.0, 3.0]).await })
            .unwrap_err();
        assert!(matches!(err, FabricError::Protocol { .. }));
    }

    #[test]
    fn gather_and_broadcast() {
        for mode in both_modes() {
            let f = Fabric::new(2).unwrap();
            let out: Vec<Vec<f64>> = f
                .run(mode, |mut h| async move {
                    let shard = [h.rank() as f64 + 1.0];
                    h.all_gather(0, &shard).await
                })
                .unwrap();
            assert_eq!(out, vec![vec![1.0, 2.0]; 2]);

            let f = Fabric::new(3).unwrap();
            let out: Vec<Vec<f64>> = f
                .run(mode, |mut h| async move {
                    let v = if h.rank() == 1 { vec![7.0, 8.0, 9.0] } else { vec![] };
                    h.broadcast(NO_LAYER, &v, 1).await
                })
                .unwrap();
            assert_eq!(out, vec![vec![7.0, 8.0, 9.0]; 3]);
        }
        let f = Fabric::new(2).unwrap();
        let err = f
            .run(ExecMode::Sim, |mut h| async move { h.broadcast(0, &[1.0], 5).await })
            .unwrap_err();
        assert!(matches!(err, FabricError::InvalidRoot { .. }));
    }

    #[test]
    fn length_mismatch_is_protocol_error() {
        for mode in both_modes() {
            let f = Fabric::new(2).unwrap();
            let err = f
                .run(mode, |mut h| async move {
                    let v = vec![1.0; h.rank() + 1];
                    h.all_reduce(0, &v).await
                })
                .unwrap_err();
            assert!(matches!(err, FabricError::Protocol { .. }), "{err:?}");
        }
    }

    #[test]
    fn key_mismatch_is_protocol_error() {
        let f = Fabric::new(2).unwrap();
        let err = f
            .run(ExecMode::Sim, |mut h| async move {
                if h.rank() == 0 {
                    h.all_reduce(0, &[1.0]).await
                } else {
                    h.all_gather(0, &[1.0]).await
                }
            })
            .unwrap_err();
        assert!(matches!(err, FabricError::Protocol { .. }));
    }

    #[test]
    fn missing_rank_deadlocks_in_sim_and_times_out_in_parallel() {
        let worker = |mut h: WorldHandle| async move {
            if h.rank() == 0 {
                h.all_reduce(0, &[1.0]).await?;
            }
            R::Ok(())
        };
        let f = Fabric::new(2).unwrap();
        assert!(matches!(f.run(ExecMode::Sim, worker).unwrap_err(), FabricError::Deadlock(_)));
        let f = Fabric::new(2).unwrap().with_timeout(Duration::from_millis(100));
        assert!(matches!(
            f.run(ExecMode::Parallel, worker).unwrap_err(),
            FabricError::Timeout { rank: 0, .. }
        ));
    }

    #[test]
    fn event_log_has_one_entry_per_rank() {
        let f = Fabric::new(3).unwrap();
        f.run(ExecMode::Sim, |mut h| async move {
            h.set_step(4);
            h.all_reduce(2, &[1.0]).await?;
            h.barrier().await?;
            R::Ok(())
        })
        .unwrap();
        let events = f.events();
        assert_eq!(events.len(), 6);
        for op in ["all_reduce", "barrier"] {
            let mut ranks: Vec<usize> = events.iter().filter(|e| e.op == op).map(|e| e.rank).collect();
            ranks.sort();
            assert_eq!(ranks, vec![0, 1, 2]);
        }
        let line = f.events_jsonl();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for k in ["step", "op", "layer", "rank", "t_start", "t_end"] {
            assert!(first.get(k).is_some(), "missing {k}");
        }
        assert_eq!(first["step"], 4);
    }
}
