//! Exact multiply-accumulate and live-element accounting.
//!
//! Counters live in a thread-local stack of scopes. [`scoped`] pushes a fresh
//! ledger, runs the closure, pops it and merges it into the enclosing scope
//! (if any). Kernels report work with [`add_macs`]; attention code reports the
//! matrices it materializes with [`alloc`]/[`free`]. Outside any scope the
//! calls are no-ops, so training loops pay nothing for accounting.
//!
//! Work done on other threads is collected by opening a scope on that thread
//! and folding the returned ledger back with [`CostLedger::merge`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::Serialize;

/// Tag applied to MACs recorded outside any [`with_tag`] region.
pub const UNTAGGED: &str = "other";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostLedger {
    /// Scalar multiply-accumulates.
    pub macs: u64,
    /// Maximum of `live_elems` observed during the scope.
    pub peak_elems: u64,
    /// Elements currently materialized and not yet freed.
    pub live_elems: u64,
    /// MACs split by the tag active when they were recorded.
    pub by_tag: BTreeMap<&'static str, u64>,
}

impl CostLedger {
    pub fn tagged(&self, tag: &str) -> u64 {
        self.by_tag.get(tag).copied().unwrap_or(0)
    }

    /// Folds a child scope into this one. The child's peak sits on top of
    /// whatever this scope had live when the child started.
    pub fn merge(&mut self, child: &CostLedger) {
        self.macs += child.macs;
        self.peak_elems = self.peak_elems.max(self.live_elems + child.peak_elems);
        self.live_elems += child.live_elems;
        for (tag, n) in &child.by_tag {
            *self.by_tag.entry(tag).or_insert(0) += n;
        }
    }

    pub fn reset(&mut self) {
        *self = CostLedger::default();
    }
}

struct Frames {
    stack: Vec<CostLedger>,
    tags: Vec<&'static str>,
}

thread_local! {
    static FRAMES: RefCell<Frames> = const {
        RefCell::new(Frames {
            stack: Vec::new(),
            tags: Vec::new(),
        })
    };
}

/// Runs `f` under a fresh ledger and returns what it recorded.
pub fn scoped<R>(f: impl FnOnce() -> R) -> (R, CostLedger) {
    FRAMES.with(|fr| fr.borrow_mut().stack.push(CostLedger::default()));
    let out = f();
    let ledger = FRAMES.with(|fr| {
        let mut fr = fr.borrow_mut();
        let child = fr.stack.pop().expect("ledger scope stack underflow");
        if let Some(parent) = fr.stack.last_mut() {
            parent.merge(&child);
        }
        child
    });
    (out, ledger)
}

/// Runs `f` with `tag` attached to every MAC it records.
pub fn with_tag<R>(tag: &'static str, f: impl FnOnce() -> R) -> R {
    FRAMES.with(|fr| fr.borrow_mut().tags.push(tag));
    let out = f();
    FRAMES.with(|fr| fr.borrow_mut().tags.pop());
    out
}

pub fn add_macs(n: u64) {
    FRAMES.with(|fr| {
        let mut fr = fr.borrow_mut();
        let tag = fr.tags.last().copied().unwrap_or(UNTAGGED);
        if let Some(top) = fr.stack.last_mut() {
            top.macs += n;
            *top.by_tag.entry(tag).or_insert(0) += n;
        }
    });
}

pub fn alloc(elems: u64) {
    FRAMES.with(|fr| {
        if let Some(top) = fr.borrow_mut().stack.last_mut() {
            top.live_elems += elems;
            top.peak_elems = top.peak_elems.max(top.live_elems);
        }
    });
}

pub fn free(elems: u64) {
    FRAMES.with(|fr| {
        if let Some(top) = fr.borrow_mut().stack.last_mut() {
            top.live_elems = top.live_elems.saturating_sub(elems);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_scope_is_noop() {
        add_macs(10);
        alloc(5);
        let ((), l) = scoped(|| {});
        assert_eq!(l, CostLedger::default());
    }

    #[test]
    fn nested_scopes_merge() {
        let ((), outer) = scoped(|| {
            add_macs(3);
            alloc(10);
            let ((), inner) = scoped(|| {
                with_tag("scores", || add_macs(7));
                alloc(4);
                free(4);
            });
            assert_eq!(inner.macs, 7);
            assert_eq!(inner.peak_elems, 4);
            free(10);
        });
        assert_eq!(outer.macs, 10);
        assert_eq!(outer.tagged("scores"), 7);
        assert_eq!(outer.tagged(UNTAGGED), 3);
        assert_eq!(outer.peak_elems, 14);
        assert_eq!(outer.live_elems, 0);
    }

    #[test]
    fn per_thread_ledgers_merge_at_join() {
        let handles: Vec<_> = (1..=4u64)
            .map(|n| std::thread::spawn(move || scoped(|| add_macs(n * 100)).1))
            .collect();
        let mut total = CostLedger::default();
        for h in handles {
            total.merge(&h.join().unwrap());
        }
        assert_eq!(total.macs, 1000);
    }
}
