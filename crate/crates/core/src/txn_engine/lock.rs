//! Lock table with the nested-transaction grant rule and wait-die arbitration.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use super::TransactionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockMode {
    Read,
    Write,
}

impl LockMode {
    pub fn conflicts_with(self, other: LockMode) -> bool {
        self == LockMode::Write || other == LockMode::Write
    }

    pub fn join(self, other: LockMode) -> LockMode {
        if self == LockMode::Write || other == LockMode::Write {
            LockMode::Write
        } else {
            LockMode::Read
        }
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LockMode::Read => "read",
            LockMode::Write => "write",
        })
    }
}

/// Tree queries the lock rule needs from the transaction table.
pub trait Ancestry {
    fn is_ancestor_or_self(&self, ancestor: TransactionId, txn: TransactionId) -> bool;
    /// Wait-die age: true when `a` began before `b`. Transactions of different
    /// trees are ranked by their roots.
    fn older(&self, a: TransactionId, b: TransactionId) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Grant,
    Queue,
    Die,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockRequest {
    pub txn: TransactionId,
    pub mode: LockMode,
    pub tag: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ObjectLocks {
    holders: Vec<(TransactionId, LockMode)>,
    queue: VecDeque<LockRequest>,
}

impl ObjectLocks {
    pub fn holders(&self) -> &[(TransactionId, LockMode)] {
        &self.holders
    }

    pub fn queue(&self) -> impl Iterator<Item = &LockRequest> {
        self.queue.iter()
    }

    pub fn mode_of(&self, txn: TransactionId) -> Option<LockMode> {
        self.holders.iter().find(|(t, _)| *t == txn).map(|(_, m)| *m)
    }

    fn conflicting<'a, A: Ancestry>(
        &'a self,
        tree: &'a A,
        txn: TransactionId,
        mode: LockMode,
    ) -> impl Iterator<Item = TransactionId> + 'a {
        self.holders
            .iter()
            .filter(move |(h, m)| !tree.is_ancestor_or_self(*h, txn) && mode.conflicts_with(*m))
            .map(|(h, _)| *h)
    }

    /// Grant iff every conflicting holder is an ancestor; otherwise the older
    /// requester waits and the younger one dies.
    pub fn decide<A: Ancestry>(&self, tree: &A, txn: TransactionId, mode: LockMode) -> Decision {
        let mut any = false;
        let mut all_younger = true;
        for h in self.conflicting(tree, txn, mode) {
            any = true;
            if !tree.older(txn, h) {
                all_younger = false;
            }
        }
        match (any, all_younger) {
            (false, _) => Decision::Grant,
            (true, true) => Decision::Queue,
            (true, false) => Decision::Die,
        }
    }

    fn add_holder(&mut self, txn: TransactionId, mode: LockMode) -> LockMode {
        match self.holders.iter_mut().find(|(t, _)| *t == txn) {
            Some((_, m)) => {
                *m = m.join(mode);
                *m
            }
            None => {
                self.holders.push((txn, mode));
                mode
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub txn: TransactionId,
    pub obj: String,
    pub mode: LockMode,
    pub tag: u64,
}

#[derive(Debug, Clone, Default)]
pub struct LockTable {
    objects: BTreeMap<String, ObjectLocks>,
}

impl LockTable {
    pub fn get(&self, obj: &str) -> Option<&ObjectLocks> {
        self.objects.get(obj)
    }

    pub fn holders(&self, obj: &str) -> &[(TransactionId, LockMode)] {
        self.objects.get(obj).map_or(&[], |o| o.holders())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ObjectLocks)> {
        self.objects.iter()
    }

    pub fn decide<A: Ancestry>(&self, tree: &A, obj: &str, txn: TransactionId, mode: LockMode) -> Decision {
        self.objects.get(obj).map_or(Decision::Grant, |o| o.decide(tree, txn, mode))
    }

    /// Returns the effective mode now held.
    pub fn grant(&mut self, obj: &str, txn: TransactionId, mode: LockMode) -> LockMode {
        self.objects.entry(obj.to_owned()).or_default().add_holder(txn, mode)
    }

    pub fn enqueue(&mut self, obj: &str, req: LockRequest) {
        self.objects.entry(obj.to_owned()).or_default().queue.push_back(req);
    }

    pub fn release(&mut self, obj: &str, txn: TransactionId) -> Option<LockMode> {
        let o = self.objects.get_mut(obj)?;
        let pos = o.holders.iter().position(|(t, _)| *t == txn)?;
        Some(o.holders.remove(pos).1)
    }

    /// Moves `from`'s hold on `obj` to `to`, merging modes.
    pub fn transfer(&mut self, obj: &str, from: TransactionId, to: TransactionId) -> Option<LockMode> {
        let mode = self.release(obj, from)?;
        Some(self.grant(obj, to, mode))
    }

    /// Drops queued requests matching `pred`, returning them.
    pub fn cancel_where(&mut self, mut pred: impl FnMut(&str, &LockRequest) -> bool) -> Vec<(String, LockRequest)> {
        let mut out = Vec::new();
        for (name, o) in self.objects.iter_mut() {
            let mut kept = VecDeque::new();
            for r in o.queue.drain(..) {
                if pred(name, &r) {
                    out.push((name.clone(), r));
                } else {
                    kept.push_back(r);
                }
            }
            o.queue = kept;
        }
        out
    }

    /// Forgets every holder and waiter on `obj`.
    pub fn clear_object(&mut self, obj: &str) -> Option<ObjectLocks> {
        self.objects.remove(obj)
    }

    /// Re-examines the wait queue of `obj` in FIFO order. Requests that became
    /// grantable are granted; requests now blocked by an older holder die.
    pub fn reexamine<A: Ancestry>(&mut self, tree: &A, obj: &str) -> (Vec<Grant>, Vec<(String, LockRequest)>) {
        let mut grants = Vec::new();
        let mut victims = Vec::new();
        let Some(o) = self.objects.get_mut(obj) else {
            return (grants, victims);
        };
        let mut pending: VecDeque<LockRequest> = std::mem::take(&mut o.queue);
        let mut kept = VecDeque::new();
        while let Some(r) = pending.pop_front() {
            match o.decide(tree, r.txn, r.mode) {
                Decision::Grant => {
                    let mode = o.add_holder(r.txn, r.mode);
                    grants.push(Grant { txn: r.txn, obj: obj.to_owned(), mode, tag: r.tag });
                }
                Decision::Queue => kept.push_back(r),
                Decision::Die => victims.push((obj.to_owned(), r)),
            }
        }
        o.queue = kept;
        (grants, victims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parent links by index; ordinals are the ids themselves.
    struct Tree(Vec<Option<u64>>);

    impl Tree {
        fn root(&self, mut t: u64) -> u64 {
            while let Some(p) = self.0[t as usize] {
                t = p;
            }
            t
        }
    }

    impl Ancestry for Tree {
        fn is_ancestor_or_self(&self, a: TransactionId, t: TransactionId) -> bool {
            let mut cur = Some(t.0);
            while let Some(c) = cur {
                if c == a.0 {
                    return true;
                }
                cur = self.0[c as usize];
            }
            false
        }
        fn older(&self, a: TransactionId, b: TransactionId) -> bool {
            let (ra, rb) = (self.root(a.0), self.root(b.0));
            if ra == rb {
                a.0 < b.0
            } else {
                ra < rb
            }
        }
    }

    fn t(n: u64) -> TransactionId {
        TransactionId(n)
    }

    #[test]
    fn child_inherits_access_from_writing_parent() {
        // 1 is root, 2 its child
        let tree = Tree(vec![None, None, Some(1)]);
        let mut lt = LockTable::default();
        lt.grant("x", t(1), LockMode::Write);
        assert_eq!(lt.decide(&tree, "x", t(2), LockMode::Write), Decision::Grant);
    }

    #[test]
    fn sibling_write_blocks_reader() {
        // 1 root; 2 and 3 siblings
        let tree = Tree(vec![None, None, Some(1), Some(1)]);
        let mut lt = LockTable::default();
        lt.grant("x", t(3), LockMode::Write);
        // older sibling waits
        assert_eq!(lt.decide(&tree, "x", t(2), LockMode::Read), Decision::Queue);
        lt.release("x", t(3));
        lt.grant("x", t(2), LockMode::Write);
        // younger sibling dies
        assert_eq!(lt.decide(&tree, "x", t(3), LockMode::Read), Decision::Die);
    }

    #[test]
    fn readers_share() {
        let tree = Tree(vec![None, None, None]);
        let mut lt = LockTable::default();
        lt.grant("x", t(1), LockMode::Read);
        assert_eq!(lt.decide(&tree, "x", t(2), LockMode::Read), Decision::Grant);
        assert_eq!(lt.decide(&tree, "x", t(2), LockMode::Write), Decision::Die);
    }

    #[test]
    fn transfer_merges_modes_and_reexamine_grants() {
        let tree = Tree(vec![None, None, Some(1), Some(1)]);
        let mut lt = LockTable::default();
        lt.grant("x", t(1), LockMode::Read);
        lt.grant("x", t(3), LockMode::Write);
        lt.enqueue("x", LockRequest { txn: t(2), mode: LockMode::Write, tag: 7 });
        assert_eq!(lt.transfer("x", t(3), t(1)), Some(LockMode::Write));
        let (grants, victims) = lt.reexamine(&tree, "x");
        assert!(victims.is_empty());
        assert_eq!(grants, vec![Grant { txn: t(2), obj: "x".into(), mode: LockMode::Write, tag: 7 }]);
    }
}
