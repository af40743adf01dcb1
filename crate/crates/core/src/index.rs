//! Ordered key→RID index: a B-link-style B+-tree whose traversal is a
//! suspendable operation.
//!
//! Before dereferencing any node that may miss the cache, the traversal
//! issues a prefetch hint for that node and suspends; validation restarts
//! after resume. Readers are latch-free: each node carries a version word
//! (seqlock: odd while locked, bumped on unlock) and readers retry when a
//! concurrent writer invalidates what they read. Writers take short
//! node-local latches only across the in-node update; splits run without
//! suspending, and half-split nodes stay reachable through right-sibling
//! links until the separator lands in the parent.
//!
//! All shared fields are atomics; entries and separator keys are immutable
//! heap cells that are only freed when the tree is dropped, so a stale
//! pointer loaded by an optimistic reader always points at valid memory and
//! version validation discards inconsistent results. Keys are compared
//! lexicographically; fixed-width integer keys should be big-endian encoded
//! ([`encode_u64_key`]) so byte order equals numeric order.
//!
//! There is no key deletion (the engine deletes via tombstone versions) and
//! no node merging.

use std::cmp::Ordering as Cmp;
use std::rc::Rc;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::sched::{frame, suspend_point, ExecEnv, PrefetchSpan};
use crate::storage::Rid;

/// Keys per node. One node spans a handful of cache lines so a single
/// prefetch per node covers it.
pub const FANOUT: usize = 16;

/// Big-endian encoding: lexicographic byte order equals numeric order.
pub fn encode_u64_key(v: u64) -> [u8; 8] {
    v.to_be_bytes()
}

/// First eight key bytes packed big-endian (zero padded). Prefix order
/// agrees with lexicographic order except on ties, which fall back to a
/// full-key comparison.
fn key_prefix(key: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    let n = key.len().min(8);
    buf[..n].copy_from_slice(&key[..n]);
    u64::from_be_bytes(buf)
}

/// Immutable key cell: either a leaf entry (payload = RID), an inner entry
/// (payload = child pointer), or a node's high key (payload unused).
struct Entry {
    key: Box<[u8]>,
    payload: u64,
}

impl Entry {
    fn leaf(key: &[u8], rid: Rid) -> *mut Entry {
        Box::into_raw(Box::new(Entry {
            key: key.into(),
            payload: rid.as_u64(),
        }))
    }

    fn inner(key: Box<[u8]>, child: *mut Node) -> *mut Entry {
        Box::into_raw(Box::new(Entry {
            key,
            payload: child as usize as u64,
        }))
    }

    fn high(key: Box<[u8]>) -> *mut Entry {
        Box::into_raw(Box::new(Entry { key, payload: 0 }))
    }

    fn rid(&self) -> Rid {
        Rid::new(self.payload)
    }

    fn child(&self) -> *mut Node {
        self.payload as usize as *mut Node
    }
}

const LOCKED: u64 = 1;

struct Node {
    /// Seqlock word: odd while a writer holds the latch, incremented by two
    /// on every unlock.
    version: AtomicU64,
    /// 0 = leaf. Immutable.
    level: u8,
    count: AtomicUsize,
    /// Exclusive upper bound of this node's key range; null = +infinity.
    high: AtomicPtr<Entry>,
    /// B-link right sibling on the same level.
    right: AtomicPtr<Node>,
    /// Inner nodes: child covering keys below the first separator.
    first_child: AtomicPtr<Node>,
    prefixes: [AtomicU64; FANOUT],
    entries: [AtomicPtr<Entry>; FANOUT],
}

impl Node {
    fn alloc(level: u8) -> *mut Node {
        Box::into_raw(Box::new(Node {
            version: AtomicU64::new(0),
            level,
            count: AtomicUsize::new(0),
            high: AtomicPtr::new(std::ptr::null_mut()),
            right: AtomicPtr::new(std::ptr::null_mut()),
            first_child: AtomicPtr::new(std::ptr::null_mut()),
            prefixes: std::array::from_fn(|_| AtomicU64::new(0)),
            entries: std::array::from_fn(|_| AtomicPtr::new(std::ptr::null_mut())),
        }))
    }

    /// Waits out writers and returns an even version.
    fn stable_version(&self) -> u64 {
        let mut spins = 0u32;
        loop {
            let v = self.version.load(Ordering::Acquire);
            if v & LOCKED == 0 {
                return v;
            }
            spins += 1;
            if spins.is_multiple_of(64) {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    fn validate(&self, v: u64) -> bool {
        self.version.load(Ordering::Acquire) == v
    }

    fn try_lock(&self, v: u64) -> bool {
        self.version
            .compare_exchange(v, v | LOCKED, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    fn unlock(&self) {
        let v = self.version.load(Ordering::Relaxed);
        debug_assert!(v & LOCKED != 0);
        self.version.store(v + 1, Ordering::Release);
    }

    /// Compares slot `i` against `key` (prefix first, full key on ties).
    /// A torn slot compares as Greater; version validation will reject the
    /// traversal that saw it.
    fn cmp_slot(&self, i: usize, key: &[u8], kp: u64) -> Cmp {
        let p = self.prefixes[i].load(Ordering::Acquire);
        if p != kp {
            return p.cmp(&kp);
        }
        let e = self.entries[i].load(Ordering::Acquire);
        if e.is_null() {
            return Cmp::Greater;
        }
        unsafe { (*e).key.as_ref() }.cmp(key)
    }

    /// First index whose key is > `key` (upper bound), over a snapshot
    /// count.
    fn upper_bound(&self, key: &[u8], kp: u64, count: usize) -> usize {
        let (mut lo, mut hi) = (0usize, count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.cmp_slot(mid, key, kp) == Cmp::Greater {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    /// First index whose key is >= `key` (lower bound).
    fn lower_bound(&self, key: &[u8], kp: u64, count: usize) -> usize {
        let (mut lo, mut hi) = (0usize, count);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.cmp_slot(mid, key, kp) == Cmp::Less {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Whether `key` falls beyond this node's range (must move right).
    /// Only meaningful under a validated version or the node latch.
    fn beyond_high(&self, key: &[u8]) -> bool {
        let h = self.high.load(Ordering::Acquire);
        if h.is_null() {
            return false;
        }
        (unsafe { (*h).key.as_ref() }) <= key
    }

    /// Writer-side slot insert at `pos`, shifting the tail right. Caller
    /// holds the latch.
    fn insert_slot(&self, pos: usize, prefix: u64, entry: *mut Entry) {
        let count = self.count.load(Ordering::Relaxed);
        debug_assert!(count < FANOUT);
        let mut i = count;
        while i > pos {
            self.prefixes[i].store(
                self.prefixes[i - 1].load(Ordering::Relaxed),
                Ordering::Release,
            );
            self.entries[i].store(
                self.entries[i - 1].load(Ordering::Relaxed),
                Ordering::Release,
            );
            i -= 1;
        }
        self.prefixes[pos].store(prefix, Ordering::Release);
        self.entries[pos].store(entry, Ordering::Release);
        self.count.store(count + 1, Ordering::Release);
    }
}

/// Per-operation traversal counters, readable through
/// [`ExecEnv::snapshot`]: nodes visited, suspensions, validation retries.
///
/// B-link key→RID tree with optimistic version-validated reads and
/// suspendable traversal.
pub struct BLinkTree {
    root: AtomicPtr<Node>,
    root_latch: Mutex<()>,
    len: AtomicUsize,
    nodes: Mutex<Vec<*mut Node>>,
    /// Entry cells unlinked by inner splits. An optimistic reader may still
    /// hold a pointer to one, so they are freed only on drop.
    retired_entries: Mutex<Vec<*mut Entry>>,
}

// Safety: all shared node state is atomic; entries/keys are immutable and
// freed only on drop.
unsafe impl Send for BLinkTree {}
unsafe impl Sync for BLinkTree {}

impl Default for BLinkTree {
    fn default() -> Self {
        Self::new()
    }
}

impl BLinkTree {
    pub fn new() -> Self {
        let root = Node::alloc(0);
        BLinkTree {
            root: AtomicPtr::new(root),
            root_latch: Mutex::new(()),
            len: AtomicUsize::new(0),
            nodes: Mutex::new(vec![root]),
            retired_entries: Mutex::new(Vec::new()),
        }
    }

    /// Number of keys. Exact (inserts only, no deletion).
    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tree height in nodes along a root→leaf path.
    pub fn depth(&self) -> usize {
        unsafe { (*self.root.load(Ordering::Acquire)).level as usize + 1 }
    }

    fn alloc_node(&self, level: u8) -> *mut Node {
        let n = Node::alloc(level);
        self.nodes.lock().unwrap().push(n);
        n
    }

    /// Descends from the root to the node of `target_level` whose range
    /// held `key` at traversal time, prefetch-suspending before each node
    /// dereference. The caller re-validates (and moves right) itself.
    async fn descend(&self, env: &Rc<ExecEnv>, key: &[u8], target_level: u8) -> *mut Node {
        let kp = key_prefix(key);
        'restart: loop {
            let mut node = self.root.load(Ordering::Acquire);
            loop {
                suspend_point(env, PrefetchSpan::raw(node)).await;
                env.index_nodes_visited
                    .set(env.index_nodes_visited.get() + 1);
                let n = unsafe { &*node };
                if n.level == target_level {
                    return node;
                }
                let v = n.stable_version();
                // Move right if the node no longer covers the key.
                if n.beyond_high(key) {
                    let r = n.right.load(Ordering::Acquire);
                    if n.validate(v) && !r.is_null() {
                        node = r;
                        continue;
                    }
                    env.index_validation_retries
                        .set(env.index_validation_retries.get() + 1);
                    continue 'restart;
                }
                let count = n.count.load(Ordering::Acquire).min(FANOUT);
                let ub = n.upper_bound(key, kp, count);
                let child = if ub == 0 {
                    n.first_child.load(Ordering::Acquire)
                } else {
                    let e = n.entries[ub - 1].load(Ordering::Acquire);
                    if e.is_null() {
                        std::ptr::null_mut()
                    } else {
                        unsafe { (*e).child() }
                    }
                };
                if !n.validate(v) || child.is_null() {
                    env.index_validation_retries
                        .set(env.index_validation_retries.get() + 1);
                    continue 'restart;
                }
                node = child;
            }
        }
    }

    /// Looks up `key`. Returns its RID iff present at the linearization
    /// point; absence is a normal result.
    pub async fn search(&self, env: &Rc<ExecEnv>, key: &[u8]) -> Option<Rid> {
        let kp = key_prefix(key);
        let mut node = self.descend(env, key, 0).await;
        loop {
            let n = unsafe { &*node };
            let v = n.stable_version();
            if n.beyond_high(key) {
                let r = n.right.load(Ordering::Acquire);
                if n.validate(v) && !r.is_null() {
                    node = r;
                    suspend_point(env, PrefetchSpan::raw(node)).await;
                    env.index_nodes_visited
                        .set(env.index_nodes_visited.get() + 1);
                    continue;
                }
                env.index_validation_retries
                    .set(env.index_validation_retries.get() + 1);
                continue;
            }
            let count = n.count.load(Ordering::Acquire).min(FANOUT);
            let lb = n.lower_bound(key, kp, count);
            let mut found = None;
            if lb < count {
                let e = n.entries[lb].load(Ordering::Acquire);
                if !e.is_null() && unsafe { (*e).key.as_ref() } == key {
                    found = Some(unsafe { (*e).rid() });
                }
            }
            if n.validate(v) {
                return found;
            }
            env.index_validation_retries
                .set(env.index_validation_retries.get() + 1);
        }
    }

    /// Fully-nested flavor: the descent and the leaf lookup run as
    /// separately allocated resumables.
    pub async fn search_nested(&self, env: &Rc<ExecEnv>, key: &[u8]) -> Option<Rid> {
        frame(env, self.search(env, key)).await
    }

    /// Inserts `key` → `rid`. Returns true iff the key was newly inserted;
    /// false on duplicate. Latches are node-local and never held across a
    /// suspension point; splits do not suspend.
    pub async fn insert(&self, env: &Rc<ExecEnv>, key: &[u8], rid: Rid) -> bool {
        let kp = key_prefix(key);
        let mut node = self.descend(env, key, 0).await;
        // Lock the leaf that covers the key.
        let leaf = loop {
            let n = unsafe { &*node };
            let v = n.stable_version();
            if !n.try_lock(v) {
                env.index_validation_retries
                    .set(env.index_validation_retries.get() + 1);
                continue;
            }
            env.latches_held.set(env.latches_held.get() + 1);
            if n.beyond_high(key) {
                let r = n.right.load(Ordering::Acquire);
                n.unlock();
                env.latches_held.set(env.latches_held.get() - 1);
                debug_assert!(!r.is_null(), "high key set without right sibling");
                node = r;
                suspend_point(env, PrefetchSpan::raw(node)).await;
                env.index_nodes_visited
                    .set(env.index_nodes_visited.get() + 1);
                continue;
            }
            break n;
        };

        let count = leaf.count.load(Ordering::Relaxed);
        let pos = leaf.lower_bound(key, kp, count);
        if pos < count {
            let e = leaf.entries[pos].load(Ordering::Relaxed);
            if !e.is_null() && unsafe { (*e).key.as_ref() } == key {
                leaf.unlock();
                env.latches_held.set(env.latches_held.get() - 1);
                return false;
            }
        }

        if count < FANOUT {
            leaf.insert_slot(pos, kp, Entry::leaf(key, rid));
            leaf.unlock();
            env.latches_held.set(env.latches_held.get() - 1);
            self.len.fetch_add(1, Ordering::AcqRel);
            return true;
        }

        // Split: no suspension from here until the latches drop.
        let (sep, right_node) = self.split_insert(leaf, pos, Entry::leaf(key, rid));
        env.latches_held.set(env.latches_held.get() - 1);
        self.len.fetch_add(1, Ordering::AcqRel);
        self.install_separator(env, sep, right_node, 1).await;
        true
    }

    /// Splits the latched full `node`, inserting `entry` at logical
    /// position `pos`. Returns the separator key and the new right node;
    /// the latch is released before returning.
    fn split_insert(&self, node: &Node, pos: usize, entry: *mut Entry) -> (Box<[u8]>, *mut Node) {
        debug_assert_eq!(node.count.load(Ordering::Relaxed), FANOUT);
        let mut items: Vec<(u64, *mut Entry)> = Vec::with_capacity(FANOUT + 1);
        for i in 0..FANOUT {
            items.push((
                node.prefixes[i].load(Ordering::Relaxed),
                node.entries[i].load(Ordering::Relaxed),
            ));
        }
        let prefix = unsafe { key_prefix(&(*entry).key) };
        items.insert(pos, (prefix, entry));

        let is_leaf = node.level == 0;
        let keep = FANOUT.div_ceil(2);
        let right = self.alloc_node(node.level);
        let r = unsafe { &*right };

        let (sep, right_start): (Box<[u8]>, usize) = if is_leaf {
            // Leaf split copies the separator key: it stays as the right
            // node's first entry.
            (unsafe { (*items[keep].1).key.clone() }, keep)
        } else {
            // Inner split promotes the median: its child becomes the right
            // node's first_child and the key moves up.
            let median = items[keep].1;
            r.first_child
                .store(unsafe { (*median).child() }, Ordering::Release);
            let sep = unsafe { (*median).key.clone() };
            // Concurrent readers may still hold this cell; free it on drop.
            self.retired_entries.lock().unwrap().push(median);
            (sep, keep + 1)
        };

        for (ri, &(p, e)) in items[right_start..].iter().enumerate() {
            r.prefixes[ri].store(p, Ordering::Release);
            r.entries[ri].store(e, Ordering::Release);
        }
        r.count.store(items.len() - right_start, Ordering::Release);
        r.high
            .store(node.high.load(Ordering::Relaxed), Ordering::Release);
        r.right
            .store(node.right.load(Ordering::Relaxed), Ordering::Release);

        // Rewrite the left node under its latch, then publish the sibling.
        for (li, &(p, e)) in items[..keep].iter().enumerate() {
            node.prefixes[li].store(p, Ordering::Release);
            node.entries[li].store(e, Ordering::Release);
        }
        node.count.store(keep, Ordering::Release);
        node.high.store(Entry::high(sep.clone()), Ordering::Release);
        node.right.store(right, Ordering::Release);
        node.unlock();
        (sep, right)
    }

    /// Installs `(sep, child)` into the covering node at `level`, growing
    /// the tree when `level` is above the root. Loops upward as splits
    /// cascade. No latch is held across the suspendable descents.
    async fn install_separator(
        &self,
        env: &Rc<ExecEnv>,
        sep: Box<[u8]>,
        child: *mut Node,
        level: u8,
    ) {
        let mut sep = sep;
        let mut child = child;
        let mut level = level;
        loop {
            let root = self.root.load(Ordering::Acquire);
            if unsafe { (*root).level } < level {
                let guard = self.root_latch.lock().unwrap();
                let root = self.root.load(Ordering::Acquire);
                if unsafe { (*root).level } < level {
                    let new_root = self.alloc_node(level);
                    let nr = unsafe { &*new_root };
                    nr.first_child.store(root, Ordering::Release);
                    nr.prefixes[0].store(key_prefix(&sep), Ordering::Release);
                    nr.entries[0].store(Entry::inner(sep, child), Ordering::Release);
                    nr.count.store(1, Ordering::Release);
                    self.root.store(new_root, Ordering::Release);
                    drop(guard);
                    return;
                }
                drop(guard);
                continue;
            }

            let kp = key_prefix(&sep);
            let mut node = self.descend(env, &sep, level).await;
            let target = loop {
                let n = unsafe { &*node };
                let v = n.stable_version();
                if !n.try_lock(v) {
                    env.index_validation_retries
                        .set(env.index_validation_retries.get() + 1);
                    continue;
                }
                env.latches_held.set(env.latches_held.get() + 1);
                if n.beyond_high(&sep) {
                    let r = n.right.load(Ordering::Acquire);
                    n.unlock();
                    env.latches_held.set(env.latches_held.get() - 1);
                    debug_assert!(!r.is_null());
                    node = r;
                    suspend_point(env, PrefetchSpan::raw(node)).await;
                    env.index_nodes_visited
                        .set(env.index_nodes_visited.get() + 1);
                    continue;
                }
                break n;
            };

            let count = target.count.load(Ordering::Relaxed);
            let pos = target.lower_bound(&sep, kp, count);
            if count < FANOUT {
                target.insert_slot(pos, kp, Entry::inner(sep, child));
                target.unlock();
                env.latches_held.set(env.latches_held.get() - 1);
                return;
            }
            let (up_sep, up_right) = self.split_insert(target, pos, Entry::inner(sep, child));
            env.latches_held.set(env.latches_held.get() - 1);
            sep = up_sep;
            child = up_right;
            level += 1;
        }
    }

    /// First `count` entries with key >= `start`, ascending. Traverses
    /// internal nodes once, then follows leaf links, suspending before each
    /// leaf-link dereference.
    pub async fn scan(
        &self,
        env: &Rc<ExecEnv>,
        start: &[u8],
        count: usize,
    ) -> Vec<(Box<[u8]>, Rid)> {
        let mut out: Vec<(Box<[u8]>, Rid)> = Vec::new();
        if count == 0 {
            return out;
        }
        let mut node = self.descend(env, start, 0).await;
        let mut last: Option<Box<[u8]>> = None;
        loop {
            let n = unsafe { &*node };
            // Validated per-leaf snapshot.
            let (pairs, next) = loop {
                let v = n.stable_version();
                let cnt = n.count.load(Ordering::Acquire).min(FANOUT);
                let mut pairs: Vec<(Box<[u8]>, Rid)> = Vec::with_capacity(cnt);
                let mut torn = false;
                for i in 0..cnt {
                    let e = n.entries[i].load(Ordering::Acquire);
                    if e.is_null() {
                        torn = true;
                        break;
                    }
                    let e = unsafe { &*e };
                    pairs.push((e.key.clone(), e.rid()));
                }
                let next = n.right.load(Ordering::Acquire);
                if !torn && n.validate(v) {
                    break (pairs, next);
                }
                env.index_validation_retries
                    .set(env.index_validation_retries.get() + 1);
            };
            for (k, rid) in pairs {
                if k.as_ref() < start {
                    continue;
                }
                if let Some(prev) = &last {
                    if k <= *prev {
                        continue; // duplicate exposed by a racing split
                    }
                }
                last = Some(k.clone());
                out.push((k, rid));
                if out.len() == count {
                    return out;
                }
            }
            if next.is_null() {
                return out;
            }
            suspend_point(env, PrefetchSpan::raw(next)).await;
            env.index_nodes_visited
                .set(env.index_nodes_visited.get() + 1);
            node = next;
        }
    }

    /// Every (key, rid) pair, ascending. Single-threaded audit/test helper;
    /// does not suspend.
    pub fn collect_all(&self) -> Vec<(Box<[u8]>, Rid)> {
        let mut node = self.root.load(Ordering::Acquire);
        unsafe {
            while (*node).level > 0 {
                node = (*node).first_child.load(Ordering::Acquire);
            }
        }
        let mut out = Vec::with_capacity(self.len());
        while !node.is_null() {
            let n = unsafe { &*node };
            let cnt = n.count.load(Ordering::Acquire);
            for i in 0..cnt {
                let e = unsafe { &*n.entries[i].load(Ordering::Acquire) };
                out.push((e.key.clone(), e.rid()));
            }
            node = n.right.load(Ordering::Acquire);
        }
        out
    }
}

impl Drop for BLinkTree {
    fn drop(&mut self) {
        let nodes = std::mem::take(&mut *self.nodes.lock().unwrap());
        for &node in &nodes {
            let n = unsafe { &*node };
            let cnt = n.count.load(Ordering::Acquire);
            for i in 0..cnt {
                let e = n.entries[i].load(Ordering::Acquire);
                if !e.is_null() {
                    unsafe { drop(Box::from_raw(e)) };
                }
            }
            let h = n.high.load(Ordering::Acquire);
            if !h.is_null() {
                unsafe { drop(Box::from_raw(h)) };
            }
            unsafe { drop(Box::from_raw(node)) };
        }
        for &e in self.retired_entries.lock().unwrap().iter() {
            unsafe { drop(Box::from_raw(e)) };
        }
    }
}
