//! Suspension machinery and the per-worker batch scheduler.
//!
//! A suspendable operation is an ordinary future with explicitly marked
//! suspension points: [`suspend_point`] issues a software prefetch for the
//! memory it is about to dereference and then (in interleaving modes) yields
//! once. Locals survive across the yield in the compiled state machine, so
//! sequential engine code stays sequential — suspension points are inserted,
//! nothing else changes.
//!
//! Each worker runs [`run`]: admit a fixed-size batch of transaction tasks,
//! sweep the slots in fixed order resuming every unfinished task, and only
//! when the whole batch is done admit the next one. Epoch enter/exit happens
//! at batch boundaries through [`BatchHooks`]. A task is resumed only by its
//! owning worker; nothing here is shared across threads.
//!
//! Execution modes:
//! - `Sequential`: suspension points are no-ops; a task runs to completion in
//!   one resume.
//! - `SequentialPrefetch`: prefetch hints are issued but nothing yields.
//! - `TwoLevel`: each engine call is one flattened resumable; a suspension
//!   anywhere inside it reaches the scheduler through exactly one frame.
//! - `FullyNested`: engine calls are compositions of separately allocated
//!   nested resumables; suspensions unwind through every level.

use std::cell::Cell;
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::str::FromStr;
use std::task::{Context, Poll, Waker};
use std::time::{Duration, Instant};

use crate::Error;

/// How transaction tasks are executed and interleaved.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExecMode {
    Sequential,
    SequentialPrefetch,
    TwoLevel,
    FullyNested,
}

impl ExecMode {
    pub const ALL: [ExecMode; 4] = [
        ExecMode::Sequential,
        ExecMode::SequentialPrefetch,
        ExecMode::TwoLevel,
        ExecMode::FullyNested,
    ];

    /// Whether suspension points yield control to the scheduler.
    pub fn interleaves(self) -> bool {
        matches!(self, ExecMode::TwoLevel | ExecMode::FullyNested)
    }

    /// Whether suspension points issue prefetch hints.
    pub fn prefetches(self) -> bool {
        !matches!(self, ExecMode::Sequential)
    }

    pub fn label(self) -> &'static str {
        match self {
            ExecMode::Sequential => "seq",
            ExecMode::SequentialPrefetch => "seq-prefetch",
            ExecMode::TwoLevel => "two-level",
            ExecMode::FullyNested => "fully-nested",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "seq" => Ok(ExecMode::Sequential),
            "seq-prefetch" => Ok(ExecMode::SequentialPrefetch),
            "two-level" => Ok(ExecMode::TwoLevel),
            "fully-nested" => Ok(ExecMode::FullyNested),
            _ => Err(Error::InvalidArg(
                "mode must be one of seq|seq-prefetch|two-level|fully-nested",
            )),
        }
    }
}

const CACHE_LINE: usize = 64;

/// The memory a suspension point is about to dereference.
#[derive(Clone, Copy, Debug)]
pub struct PrefetchSpan {
    pub addr: *const u8,
    pub len: usize,
}

impl PrefetchSpan {
    pub fn of<T>(r: &T) -> Self {
        PrefetchSpan {
            addr: r as *const T as *const u8,
            len: std::mem::size_of::<T>(),
        }
    }

    pub fn raw<T>(ptr: *const T) -> Self {
        PrefetchSpan {
            addr: ptr as *const u8,
            len: std::mem::size_of::<T>(),
        }
    }

    pub fn bytes(b: &[u8]) -> Self {
        PrefetchSpan {
            addr: b.as_ptr(),
            len: b.len(),
        }
    }

    /// Issues prefetch hints for the span, one per cache line, at most
    /// `line_limit` lines (None: whole span).
    pub fn issue(&self, line_limit: Option<usize>) {
        let lines = self.len.div_ceil(CACHE_LINE);
        let lines = match line_limit {
            Some(limit) => lines.min(limit.max(1)),
            None => lines.max(1),
        };
        for i in 0..lines {
            prefetch_line(unsafe { self.addr.add(i * CACHE_LINE) });
        }
    }
}

#[inline]
fn prefetch_line(p: *const u8) {
    #[cfg(target_arch = "x86_64")]
    unsafe {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        _mm_prefetch::<_MM_HINT_T0>(p as *const i8);
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = p;
    }
}

/// Per-worker execution environment: mode, prefetch policy, and
/// instrumentation counters. Single-threaded by construction (`Cell`s);
/// shared by `Rc` between the scheduler, transactions and the index.
pub struct ExecEnv {
    mode: ExecMode,
    prefetch_lines: Option<usize>,
    in_task: Cell<bool>,
    /// Scratch: nested frames passed on the way out of the current yield.
    yield_hops: Cell<u64>,
    /// Node latches currently held by this worker; a suspension while this
    /// is nonzero is a protocol violation (asserted in test builds).
    pub latches_held: Cell<u64>,

    pub suspensions: Cell<u64>,
    pub prefetches: Cell<u64>,
    /// Suspensions absorbed by an intra-transaction interleaver (multi-get)
    /// instead of reaching the scheduler.
    pub inner_yields: Cell<u64>,
    pub index_nodes_visited: Cell<u64>,
    pub index_validation_retries: Cell<u64>,
    pub chain_steps: Cell<u64>,
}

impl ExecEnv {
    pub fn new(mode: ExecMode, prefetch_lines: Option<usize>) -> Rc<Self> {
        Rc::new(ExecEnv {
            mode,
            prefetch_lines,
            in_task: Cell::new(false),
            yield_hops: Cell::new(0),
            latches_held: Cell::new(0),
            suspensions: Cell::new(0),
            prefetches: Cell::new(0),
            inner_yields: Cell::new(0),
            index_nodes_visited: Cell::new(0),
            index_validation_retries: Cell::new(0),
            chain_steps: Cell::new(0),
        })
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// Whether a scheduled task is currently executing on this environment.
    /// Used by misuse assertions in test builds.
    pub fn in_task_for_assert(&self) -> bool {
        self.in_task.get()
    }

    pub fn snapshot(&self) -> EnvCounters {
        EnvCounters {
            suspensions: self.suspensions.get(),
            prefetches: self.prefetches.get(),
            inner_yields: self.inner_yields.get(),
            index_nodes_visited: self.index_nodes_visited.get(),
            index_validation_retries: self.index_validation_retries.get(),
            chain_steps: self.chain_steps.get(),
        }
    }

    fn bump(counter: &Cell<u64>) {
        counter.set(counter.get() + 1);
    }
}

/// Plain snapshot of [`ExecEnv`] counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EnvCounters {
    pub suspensions: u64,
    pub prefetches: u64,
    pub inner_yields: u64,
    pub index_nodes_visited: u64,
    pub index_validation_retries: u64,
    pub chain_steps: u64,
}

/// Issues a prefetch for `span` and, in interleaving modes, yields once.
///
/// In `SequentialPrefetch` the hint is issued but control does not yield; in
/// `Sequential` this is a no-op. Must only be polled from within a scheduled
/// task (or [`drive`]); misuse panics in test builds.
pub fn suspend_point<'a>(env: &'a ExecEnv, span: PrefetchSpan) -> SuspendPoint<'a> {
    if env.mode.prefetches() {
        span.issue(env.prefetch_lines);
        ExecEnv::bump(&env.prefetches);
    }
    SuspendPoint {
        env,
        yielded: false,
    }
}

pub struct SuspendPoint<'a> {
    env: &'a ExecEnv,
    yielded: bool,
}

impl Future for SuspendPoint<'_> {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        debug_assert!(
            self.env.in_task.get(),
            "suspension point used outside a scheduled task"
        );
        debug_assert_eq!(
            self.env.latches_held.get(),
            0,
            "suspension while holding a node latch"
        );
        if self.yielded || !self.env.mode.interleaves() {
            return Poll::Ready(());
        }
        self.yielded = true;
        ExecEnv::bump(&self.env.suspensions);
        self.env.yield_hops.set(0);
        Poll::Pending
    }
}

/// A separately allocated nested resumable. Each `Pending` that unwinds
/// through a frame is counted, yielding the per-suspension hop count the
/// scheduler observes.
pub struct NestedFrame<'a, T> {
    env: Rc<ExecEnv>,
    inner: Pin<Box<dyn Future<Output = T> + 'a>>,
}

/// Wraps `fut` in a [`NestedFrame`].
pub fn frame<'a, T>(env: &Rc<ExecEnv>, fut: impl Future<Output = T> + 'a) -> NestedFrame<'a, T> {
    NestedFrame {
        env: Rc::clone(env),
        inner: Box::pin(fut),
    }
}

impl<T> Future for NestedFrame<'_, T> {
    type Output = T;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        match self.inner.as_mut().poll(cx) {
            Poll::Ready(v) => Poll::Ready(v),
            Poll::Pending => {
                self.env.yield_hops.set(self.env.yield_hops.get() + 1);
                Poll::Pending
            }
        }
    }
}

/// A resumable computation with a completion flag and a result slot.
/// Suspension happens only at the explicit points inside the wrapped future.
pub struct Resumable<'a, T> {
    fut: Pin<Box<dyn Future<Output = T> + 'a>>,
    result: Option<T>,
    done: bool,
}

impl<'a, T> Resumable<'a, T> {
    pub fn new(fut: impl Future<Output = T> + 'a) -> Self {
        Resumable {
            fut: Box::pin(fut),
            result: None,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Runs the computation until its next suspension point (or completion).
    /// Returns true once complete. Panics if called again after completion.
    pub fn resume(&mut self) -> bool {
        assert!(!self.done, "resume after completion");
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        if let Poll::Ready(v) = self.fut.as_mut().poll(&mut cx) {
            self.result = Some(v);
            self.done = true;
        }
        self.done
    }

    pub fn result(&self) -> Option<&T> {
        self.result.as_ref()
    }

    pub fn take_result(&mut self) -> Option<T> {
        self.result.take()
    }
}

/// Polls `fut` to completion on the current thread, marking the environment
/// as task context so suspension points are legal.
pub fn drive<T>(env: &ExecEnv, fut: impl Future<Output = T>) -> T {
    let mut fut = std::pin::pin!(fut);
    let waker = Waker::noop();
    let mut cx = Context::from_waker(waker);
    let was = env.in_task.replace(true);
    loop {
        if let Poll::Ready(v) = fut.as_mut().poll(&mut cx) {
            env.in_task.set(was);
            return v;
        }
    }
}

/// Interleaves `tasks` under an explicit schedule: `chooser(n)` picks which
/// of the `n` still-unfinished tasks to resume next. Returns the results in
/// task order. Used by deterministic and exhaustive interleaving tests.
pub fn interleave<'a, T>(
    env: &ExecEnv,
    tasks: Vec<Pin<Box<dyn Future<Output = T> + 'a>>>,
    chooser: &mut dyn FnMut(usize) -> usize,
) -> Vec<T> {
    let mut tasks: Vec<_> = tasks.into_iter().map(|f| (f, None::<T>)).collect();
    let waker = Waker::noop();
    let mut cx = Context::from_waker(waker);
    loop {
        let alive: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].1.is_none()).collect();
        if alive.is_empty() {
            break;
        }
        let pick = chooser(alive.len());
        let i = alive[pick];
        let was = env.in_task.replace(true);
        if let Poll::Ready(v) = tasks[i].0.as_mut().poll(&mut cx) {
            tasks[i].1 = Some(v);
        }
        env.in_task.set(was);
    }
    tasks.into_iter().map(|(_, r)| r.unwrap()).collect()
}

/// Depth-first enumeration of every schedule a chooser-driven run can take.
/// `run` executes one scenario from scratch, calling its argument to pick
/// among the currently alive tasks. Returns the number of complete schedules
/// explored.
pub fn exhaustive_schedules<F>(mut run: F) -> u64
where
    F: FnMut(&mut dyn FnMut(usize) -> usize),
{
    let mut script: Vec<usize> = Vec::new();
    let mut leaves = 0u64;
    loop {
        let mut degrees: Vec<usize> = Vec::new();
        {
            let script_ref = &script;
            let mut depth = 0usize;
            let mut pick = |n: usize| -> usize {
                let choice = if depth < script_ref.len() {
                    script_ref[depth]
                } else {
                    0
                };
                degrees.push(n);
                depth += 1;
                choice.min(n - 1)
            };
            run(&mut pick);
        }
        leaves += 1;
        // Backtrack to the deepest position with an unexplored branch.
        script.resize(degrees.len(), 0);
        loop {
            match script.pop() {
                None => return leaves,
                Some(last) => {
                    if last + 1 < degrees[script.len()] {
                        script.push(last + 1);
                        break;
                    }
                }
            }
        }
    }
}

/// Outcome of one transaction task.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TaskOutcome {
    Committed,
    Aborted,
    /// The body hit an unrecoverable error; recorded, batch continues.
    Failed,
}

/// What a transaction task returns to the scheduler.
#[derive(Clone, Copy, Debug)]
pub struct TaskResult {
    pub outcome: TaskOutcome,
    /// Caller-chosen identifier (e.g. the transaction sequence number).
    pub id: u64,
    /// Caller-computed digest of the task's results (verify mode).
    pub checksum: u64,
}

impl TaskResult {
    pub fn committed(id: u64) -> Self {
        TaskResult {
            outcome: TaskOutcome::Committed,
            id,
            checksum: 0,
        }
    }

    pub fn aborted(id: u64) -> Self {
        TaskResult {
            outcome: TaskOutcome::Aborted,
            id,
            checksum: 0,
        }
    }
}

pub type TaskFuture = Pin<Box<dyn Future<Output = TaskResult>>>;

/// Pull-based supplier of transaction bodies. `slot` is the batch slot the
/// task will occupy, so slot-local resources can be bound at admission.
pub trait TaskSource {
    fn next_task(&mut self, slot: usize) -> Option<TaskFuture>;
}

/// Batch-boundary callbacks (epoch enter/exit).
pub trait BatchHooks {
    fn batch_start(&mut self) {}
    fn batch_end(&mut self) {}
}

/// No-op hooks for tests and standalone use.
pub struct NoHooks;

impl BatchHooks for NoHooks {}

struct TaskSlot {
    task: Resumable<'static, TaskResult>,
    admitted_at: Instant,
}

/// A fixed-size batch of transaction tasks. A new batch starts only after
/// every task in the current one is done.
pub struct Batch {
    capacity: usize,
    slots: Vec<TaskSlot>,
}

impl Batch {
    pub fn new(capacity: usize) -> Self {
        Batch {
            capacity,
            slots: Vec::with_capacity(capacity),
        }
    }

    /// Binds `body` to the next free slot and returns its index.
    pub fn admit(&mut self, body: TaskFuture) -> Result<usize, Error> {
        if self.slots.len() == self.capacity {
            return Err(Error::BatchFull);
        }
        self.slots.push(TaskSlot {
            task: Resumable::new(body),
            admitted_at: Instant::now(),
        });
        Ok(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SchedulerConfig {
    pub batch_size: usize,
    pub mode: ExecMode,
    /// Collect one [`TaskReport`] per task (verify mode); off for long runs.
    pub collect_reports: bool,
}

impl SchedulerConfig {
    pub fn new(mode: ExecMode, batch_size: usize) -> Self {
        SchedulerConfig {
            batch_size,
            mode,
            collect_reports: false,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArg("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Per-task completion record.
#[derive(Clone, Copy, Debug)]
pub struct TaskReport {
    pub slot: usize,
    pub outcome: TaskOutcome,
    pub id: u64,
    pub checksum: u64,
    pub latency_us: u64,
}

/// Statistics for one scheduler run.
#[derive(Clone, Debug, Default)]
pub struct SchedStats {
    pub batches: u64,
    pub admitted: u64,
    pub committed: u64,
    pub aborted: u64,
    pub failed: u64,
    /// Task polls issued by the scheduler.
    pub resumes: u64,
    /// Task polls that came back suspended.
    pub suspensions: u64,
    pub hops_min: u64,
    pub hops_max: u64,
    pub hops_total: u64,
    pub wall: Duration,
    pub latency: Histogram,
    pub reports: Vec<TaskReport>,
}

impl SchedStats {
    fn note_hops(&mut self, hops: u64) {
        self.hops_min = if self.suspensions == 0 {
            hops
        } else {
            self.hops_min.min(hops)
        };
        self.hops_max = self.hops_max.max(hops);
        self.hops_total += hops;
        self.suspensions += 1;
    }

    pub fn merge(&mut self, other: &SchedStats) {
        self.batches += other.batches;
        self.admitted += other.admitted;
        self.committed += other.committed;
        self.aborted += other.aborted;
        self.failed += other.failed;
        self.resumes += other.resumes;
        if other.suspensions > 0 {
            self.hops_min = if self.suspensions == 0 {
                other.hops_min
            } else {
                self.hops_min.min(other.hops_min)
            };
            self.hops_max = self.hops_max.max(other.hops_max);
        }
        self.hops_total += other.hops_total;
        self.suspensions += other.suspensions;
        self.wall = self.wall.max(other.wall);
        self.latency.merge(&other.latency);
        self.reports.extend_from_slice(&other.reports);
    }
}

/// Runs the coroutine-to-transaction loop: fetch up to `batch_size` bodies,
/// enter the epoch, round-robin resume every unfinished task in fixed slot
/// order until the whole batch is done, exit the epoch, repeat. Stops when
/// the stop signal is set or the source is drained.
pub fn run(
    config: SchedulerConfig,
    env: &Rc<ExecEnv>,
    source: &mut dyn TaskSource,
    hooks: &mut dyn BatchHooks,
    stop: &dyn Fn() -> bool,
) -> Result<SchedStats, Error> {
    config.validate()?;
    let mut stats = SchedStats::default();
    let started = Instant::now();

    loop {
        if stop() {
            break;
        }
        let mut batch = Batch::new(config.batch_size);
        while batch.len() < config.batch_size {
            match source.next_task(batch.len()) {
                Some(body) => {
                    batch.admit(body)?;
                }
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        stats.batches += 1;
        stats.admitted += batch.len() as u64;
        hooks.batch_start();

        loop {
            let mut done = 0;
            for i in 0..batch.slots.len() {
                let slot = &mut batch.slots[i];
                if slot.task.is_done() {
                    done += 1;
                    continue;
                }
                stats.resumes += 1;
                env.in_task.set(true);
                let finished = slot.task.resume();
                env.in_task.set(false);
                if finished {
                    let res = *slot.task.result().expect("finished task has a result");
                    let latency = slot.admitted_at.elapsed();
                    let us = latency.as_micros().min(u128::from(u64::MAX)) as u64;
                    stats.latency.record(us);
                    match res.outcome {
                        TaskOutcome::Committed => stats.committed += 1,
                        TaskOutcome::Aborted => stats.aborted += 1,
                        TaskOutcome::Failed => stats.failed += 1,
                    }
                    if config.collect_reports {
                        stats.reports.push(TaskReport {
                            slot: i,
                            outcome: res.outcome,
                            id: res.id,
                            checksum: res.checksum,
                            latency_us: us,
                        });
                    }
                } else {
                    stats.note_hops(env.yield_hops.get());
                }
            }
            if done == batch.slots.len() {
                break;
            }
        }
        hooks.batch_end();
    }

    stats.wall = started.elapsed();
    Ok(stats)
}

/// Log-scaled latency histogram (3 significand bits per power of two,
/// microsecond values). Mean is exact; percentiles are bucket-resolution.
#[derive(Clone, Debug)]
pub struct Histogram {
    buckets: Vec<u64>,
    count: u64,
    sum: u64,
    max: u64,
}

const HIST_SUB_BITS: u32 = 3;
const HIST_BUCKETS: usize = 64 * (1 << HIST_SUB_BITS);

impl Default for Histogram {
    fn default() -> Self {
        Histogram {
            buckets: vec![0; HIST_BUCKETS],
            count: 0,
            sum: 0,
            max: 0,
        }
    }
}

impl Histogram {
    fn index(value: u64) -> usize {
        if value < (1 << HIST_SUB_BITS) {
            return value as usize;
        }
        let msb = 63 - value.leading_zeros();
        let sub = ((value >> (msb - HIST_SUB_BITS)) & ((1 << HIST_SUB_BITS) - 1)) as usize;
        ((msb as usize) << HIST_SUB_BITS) + sub
    }

    fn bucket_value(idx: usize) -> u64 {
        if idx < (1 << HIST_SUB_BITS) {
            return idx as u64;
        }
        let msb = (idx >> HIST_SUB_BITS) as u32;
        let sub = (idx & ((1 << HIST_SUB_BITS) - 1)) as u64;
        (1u64 << msb) + (sub << (msb - HIST_SUB_BITS))
    }

    pub fn record(&mut self, value: u64) {
        self.buckets[Self::index(value)] += 1;
        self.count += 1;
        self.sum += value;
        self.max = self.max.max(value);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }

    pub fn max(&self) -> u64 {
        self.max
    }

    /// Value at quantile `q` in [0,1], at bucket resolution.
    pub fn quantile(&self, q: f64) -> u64 {
        if self.count == 0 {
            return 0;
        }
        let target = ((self.count as f64) * q).ceil() as u64;
        let mut cum = 0;
        for (i, &c) in self.buckets.iter().enumerate() {
            cum += c;
            if cum >= target.max(1) {
                return Self::bucket_value(i).min(self.max);
            }
        }
        self.max
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            *a += b;
        }
        self.count += other.count;
        self.sum += other.sum;
        self.max = self.max.max(other.max);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    /// Task that suspends `yields` times, logging each resume into `log`.
    fn scripted(
        env: Rc<ExecEnv>,
        id: u64,
        yields: usize,
        log: Rc<RefCell<Vec<u64>>>,
    ) -> TaskFuture {
        Box::pin(async move {
            for _ in 0..yields {
                log.borrow_mut().push(id);
                suspend_point(
                    &env,
                    PrefetchSpan {
                        addr: std::ptr::null(),
                        len: 0,
                    },
                )
                .await;
            }
            log.borrow_mut().push(id);
            TaskResult::committed(id)
        })
    }

    struct VecSource {
        tasks: Vec<TaskFuture>,
    }

    impl TaskSource for VecSource {
        fn next_task(&mut self, _slot: usize) -> Option<TaskFuture> {
            if self.tasks.is_empty() {
                None
            } else {
                Some(self.tasks.remove(0))
            }
        }
    }

    struct CountingHooks {
        starts: u64,
        ends: u64,
    }

    impl BatchHooks for CountingHooks {
        fn batch_start(&mut self) {
            self.starts += 1;
        }
        fn batch_end(&mut self) {
            assert_eq!(self.starts, self.ends + 1, "unbalanced batch hooks");
            self.ends += 1;
        }
    }

    #[test]
    fn three_tasks_two_suspends_round_robin() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let tasks: Vec<TaskFuture> = (0..3)
            .map(|i| scripted(env.clone(), i, 2, log.clone()))
            .collect();
        let mut source = VecSource { tasks };
        let mut hooks = CountingHooks { starts: 0, ends: 0 };
        let stats = run(
            SchedulerConfig::new(ExecMode::TwoLevel, 3),
            &env,
            &mut source,
            &mut hooks,
            &|| false,
        )
        .unwrap();
        assert_eq!(*log.borrow(), vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_eq!(stats.batches, 1);
        assert_eq!(stats.committed, 3);
        assert_eq!(stats.resumes, 9);
        assert_eq!(stats.suspensions, 6);
        assert_eq!(hooks.starts, 1);
        assert_eq!(hooks.ends, 1);
    }

    #[test]
    fn batch_size_one_is_sequential_order() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let tasks: Vec<TaskFuture> = (0..3)
            .map(|i| scripted(env.clone(), i, 2, log.clone()))
            .collect();
        let mut source = VecSource { tasks };
        let stats = run(
            SchedulerConfig::new(ExecMode::TwoLevel, 1),
            &env,
            &mut source,
            &mut NoHooks,
            &|| false,
        )
        .unwrap();
        assert_eq!(*log.borrow(), vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(stats.batches, 3);
    }

    #[test]
    fn sequential_mode_completes_in_one_resume() {
        let env = ExecEnv::new(ExecMode::Sequential, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let tasks: Vec<TaskFuture> = vec![scripted(env.clone(), 7, 5, log.clone())];
        let mut source = VecSource { tasks };
        let stats = run(
            SchedulerConfig::new(ExecMode::Sequential, 8),
            &env,
            &mut source,
            &mut NoHooks,
            &|| false,
        )
        .unwrap();
        assert_eq!(stats.resumes, 1);
        assert_eq!(stats.suspensions, 0);
        assert_eq!(log.borrow().len(), 6);
    }

    #[test]
    fn partial_batch_runs_once() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let tasks: Vec<TaskFuture> = (0..5)
            .map(|i| scripted(env.clone(), i, 1, log.clone()))
            .collect();
        let mut source = VecSource { tasks };
        let mut hooks = CountingHooks { starts: 0, ends: 0 };
        let stats = run(
            SchedulerConfig::new(ExecMode::TwoLevel, 8),
            &env,
            &mut source,
            &mut hooks,
            &|| false,
        )
        .unwrap();
        assert_eq!(stats.batches, 1);
        assert_eq!(stats.admitted, 5);
        assert_eq!(hooks.starts, 1);
        assert_eq!(hooks.ends, 1);
    }

    #[test]
    fn batch_admit_fills_slots_in_order_and_rejects_overflow() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let mut batch = Batch::new(2);
        assert_eq!(
            batch
                .admit(scripted(env.clone(), 0, 0, log.clone()))
                .unwrap(),
            0
        );
        assert_eq!(
            batch
                .admit(scripted(env.clone(), 1, 0, log.clone()))
                .unwrap(),
            1
        );
        assert!(matches!(
            batch.admit(scripted(env, 2, 0, log)),
            Err(Error::BatchFull)
        ));
    }

    #[test]
    fn sweep_fairness_between_consecutive_resumes() {
        // With per-resume logging, between two resumes of task i every other
        // unfinished task appears exactly once.
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let yields = [3usize, 1, 4, 2];
        let tasks: Vec<TaskFuture> = yields
            .iter()
            .enumerate()
            .map(|(i, &y)| scripted(env.clone(), i as u64, y, log.clone()))
            .collect();
        let mut source = VecSource { tasks };
        run(
            SchedulerConfig::new(ExecMode::TwoLevel, 4),
            &env,
            &mut source,
            &mut NoHooks,
            &|| false,
        )
        .unwrap();
        let log = log.borrow();
        for i in 0..4u64 {
            let positions: Vec<usize> = log
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == i)
                .map(|(p, _)| p)
                .collect();
            for w in positions.windows(2) {
                let between = &log[w[0] + 1..w[1]];
                for other in 0..4u64 {
                    if other == i {
                        continue;
                    }
                    let n = between.iter().filter(|&&v| v == other).count();
                    assert!(
                        n <= 1,
                        "task {other} resumed {n} times between resumes of {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn nested_frames_count_unwind_depth() {
        // Depth 3: every suspension unwinds through 3 frames.
        let env = ExecEnv::new(ExecMode::FullyNested, None);

        async fn leaf(env: Rc<ExecEnv>) -> u64 {
            suspend_point(
                &env,
                PrefetchSpan {
                    addr: std::ptr::null(),
                    len: 0,
                },
            )
            .await;
            suspend_point(
                &env,
                PrefetchSpan {
                    addr: std::ptr::null(),
                    len: 0,
                },
            )
            .await;
            42
        }
        async fn mid(env: Rc<ExecEnv>) -> u64 {
            let v = frame(&env, leaf(env.clone())).await;
            v + 1
        }
        async fn top(env: Rc<ExecEnv>) -> u64 {
            let v = frame(&env, mid(env.clone())).await;
            v + 1
        }

        let env2 = env.clone();
        let task: TaskFuture = Box::pin(async move {
            let v = frame(&env2, top(env2.clone())).await;
            TaskResult {
                outcome: TaskOutcome::Committed,
                id: v,
                checksum: 0,
            }
        });
        let mut source = VecSource { tasks: vec![task] };
        let stats = run(
            SchedulerConfig::new(ExecMode::FullyNested, 1),
            &env,
            &mut source,
            &mut NoHooks,
            &|| false,
        )
        .unwrap();
        assert_eq!(stats.suspensions, 2);
        assert_eq!(stats.hops_min, 3);
        assert_eq!(stats.hops_max, 3);
    }

    #[test]
    fn two_level_single_frame_hop_is_one() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let env2 = env.clone();
        let task: TaskFuture = Box::pin(async move {
            let env3 = env2.clone();
            let v = frame(&env2, async move {
                suspend_point(
                    &env3,
                    PrefetchSpan {
                        addr: std::ptr::null(),
                        len: 0,
                    },
                )
                .await;
                suspend_point(
                    &env3,
                    PrefetchSpan {
                        addr: std::ptr::null(),
                        len: 0,
                    },
                )
                .await;
                9u64
            })
            .await;
            TaskResult {
                outcome: TaskOutcome::Committed,
                id: v,
                checksum: 0,
            }
        });
        let mut source = VecSource { tasks: vec![task] };
        let stats = run(
            SchedulerConfig::new(ExecMode::TwoLevel, 1),
            &env,
            &mut source,
            &mut NoHooks,
            &|| false,
        )
        .unwrap();
        assert_eq!(stats.suspensions, 2);
        assert_eq!((stats.hops_min, stats.hops_max), (1, 1));
    }

    #[test]
    fn resume_after_done_panics() {
        let mut r = Resumable::new(async { 1 });
        assert!(r.resume());
        let err = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| r.resume()));
        assert!(err.is_err());
    }

    #[test]
    #[cfg(debug_assertions)]
    fn suspension_outside_task_is_rejected() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let fut = async {
            suspend_point(
                &env,
                PrefetchSpan {
                    addr: std::ptr::null(),
                    len: 0,
                },
            )
            .await;
        };
        let err = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut fut = std::pin::pin!(fut);
            let waker = Waker::noop();
            let mut cx = Context::from_waker(waker);
            let _ = fut.as_mut().poll(&mut cx);
        }));
        assert!(err.is_err());
    }

    #[test]
    fn stop_signal_prevents_next_batch() {
        let env = ExecEnv::new(ExecMode::TwoLevel, None);
        let log = Rc::new(RefCell::new(Vec::new()));
        let tasks: Vec<TaskFuture> = (0..4)
            .map(|i| scripted(env.clone(), i, 1, log.clone()))
            .collect();
        let mut source = VecSource { tasks };
        let stop_after_first = Cell::new(0u32);
        let stats = run(
            SchedulerConfig::new(ExecMode::TwoLevel, 2),
            &env,
            &mut source,
            &mut NoHooks,
            &|| {
                stop_after_first.set(stop_after_first.get() + 1);
                stop_after_first.get() > 1
            },
        )
        .unwrap();
        // one batch of 2 ran; the second pull was stopped
        assert_eq!(stats.batches, 1);
        assert_eq!(stats.committed, 2);
    }

    #[test]
    fn exhaustive_schedule_enumeration_counts_binary_tree() {
        // Two tasks, each needing 2 polls: schedules are interleavings of
        // AABB..: C(4,2)=6 minus... every complete run makes 4 picks with
        // degrees 2,2 until one finishes. Count must match a hand-derived
        // enumeration: picks available: step1: 2 choices, step2: 2, then
        // depends. Just assert determinism and coverage > 1.
        let mut outcomes = std::collections::HashSet::new();
        let n = exhaustive_schedules(|pick| {
            let mut a = 0;
            let mut b = 0;
            let mut order = Vec::new();
            while a < 2 || b < 2 {
                let alive = usize::from(a < 2) + usize::from(b < 2);
                let c = pick(alive);
                let target = if alive == 2 {
                    c
                } else if a < 2 {
                    0
                } else {
                    1
                };
                if target == 0 {
                    a += 1;
                } else {
                    b += 1;
                }
                order.push(target);
            }
            outcomes.insert(order);
        });
        assert_eq!(n, 6); // C(4,2) interleavings of two 2-step tasks
        assert_eq!(outcomes.len(), 6);
    }

    #[test]
    fn histogram_mean_and_quantiles() {
        let mut h = Histogram::default();
        for v in 1..=1000u64 {
            h.record(v);
        }
        assert_eq!(h.count(), 1000);
        assert!((h.mean() - 500.5).abs() < 1e-9);
        let p99 = h.quantile(0.99);
        assert!((900..=1000).contains(&p99), "p99 bucket estimate {p99}");
        assert_eq!(h.max(), 1000);
    }

    #[test]
    fn mode_labels_round_trip() {
        for m in ExecMode::ALL {
            assert_eq!(m.label().parse::<ExecMode>().unwrap(), m);
        }
        assert!("bogus".parse::<ExecMode>().is_err());
    }
}
