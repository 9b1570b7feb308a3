//! In-process messaging: bounded push-pop queues and publisher-subscriber
//! channels. Both block the producer when a buffer is full.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("queue `{0}` is closed")]
    Closed(String),
}

/// Point-in-time counters of one queue, read under its lock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub name: String,
    pub capacity: usize,
    pub depth: usize,
    pub pushed: u64,
    pub popped: u64,
    pub closed: bool,
}

/// Backend-neutral queue surface so an external queue service can stand in for
/// the in-process [`Queue`].
pub trait MessageQueue<T>: Send + Sync {
    fn push(&self, msg: T) -> Result<(), BrokerError>;
    fn pop(&self, timeout: Duration) -> Result<Option<T>, BrokerError>;
    fn stats(&self) -> QueueStats;
    fn close(&self);
}

struct QueueState<T> {
    items: VecDeque<T>,
    pushed: u64,
    popped: u64,
    closed: bool,
}

struct QueueInner<T> {
    name: String,
    capacity: usize,
    state: Mutex<QueueState<T>>,
    not_empty: Condvar,
    not_full: Condvar,
}

/// Bounded FIFO queue. Cloning yields another handle to the same queue.
pub struct Queue<T> {
    inner: Arc<QueueInner<T>>,
}

impl<T> Clone for Queue<T> {
    fn clone(&self) -> Self {
        Queue { inner: Arc::clone(&self.inner) }
    }
}

impl<T> std::fmt::Debug for Queue<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Queue").field("name", &self.inner.name).field("capacity", &self.inner.capacity).finish()
    }
}

impl<T> Queue<T> {
    /// Creates a queue. A capacity of 0 is raised to 1.
    pub fn new(name: impl Into<String>, capacity: usize) -> Self {
        Queue {
            inner: Arc::new(QueueInner {
                name: name.into(),
                capacity: capacity.max(1),
                state: Mutex::new(QueueState { items: VecDeque::new(), pushed: 0, popped: 0, closed: false }),
                not_empty: Condvar::new(),
                not_full: Condvar::new(),
            }),
        }
    }

    pub fn with_default_capacity(name: impl Into<String>) -> Self {
        Self::new(name, DEFAULT_QUEUE_CAPACITY)
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn capacity(&self) -> usize {
        self.inner.capacity
    }

    fn lock(&self) -> MutexGuard<'_, QueueState<T>> {
        // A panicking holder never leaves the deque half-updated.
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn closed_error(&self) -> BrokerError {
        BrokerError::Closed(self.inner.name.clone())
    }

    /// Appends `msg`, blocking while the queue is full.
    pub fn push(&self, msg: T) -> Result<(), BrokerError> {
        let mut st = self.lock();
        loop {
            if st.closed {
                return Err(self.closed_error());
            }
            if st.items.len() < self.inner.capacity {
                break;
            }
            st = self.inner.not_full.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.items.push_back(msg);
        st.pushed += 1;
        drop(st);
        self.inner.not_empty.notify_one();
        Ok(())
    }

    /// Appends without blocking; returns the message back when full.
    pub fn try_push(&self, msg: T) -> Result<Result<(), T>, BrokerError> {
        let mut st = self.lock();
        if st.closed {
            return Err(self.closed_error());
        }
        if st.items.len() >= self.inner.capacity {
            return Ok(Err(msg));
        }
        st.items.push_back(msg);
        st.pushed += 1;
        drop(st);
        self.inner.not_empty.notify_one();
        Ok(Ok(()))
    }

    /// Removes the oldest message, waiting up to `timeout`. `Ok(None)` means
    /// the wait timed out; a closed queue keeps serving until drained.
    pub fn pop(&self, timeout: Duration) -> Result<Option<T>, BrokerError> {
        let deadline = Instant::now().checked_add(timeout);
        let mut st = self.lock();
        loop {
            if let Some(msg) = st.items.pop_front() {
                st.popped += 1;
                drop(st);
                self.inner.not_full.notify_one();
                return Ok(Some(msg));
            }
            if st.closed {
                return Err(self.closed_error());
            }
            let wait = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    d - now
                }
                None => Duration::from_secs(3600),
            };
            st = self.inner.not_empty.wait_timeout(st, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    /// Blocks until a message arrives or the queue is closed and drained.
    pub fn recv(&self) -> Option<T> {
        loop {
            match self.pop(Duration::from_secs(3600)) {
                Ok(Some(msg)) => return Some(msg),
                Ok(None) => continue,
                Err(_) => return None,
            }
        }
    }

    /// Rejects further pushes and wakes every waiter. Buffered messages remain
    /// poppable.
    pub fn close(&self) {
        self.lock().closed = true;
        self.inner.not_empty.notify_all();
        self.inner.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn depth(&self) -> usize {
        self.lock().items.len()
    }

    pub fn stats(&self) -> QueueStats {
        let st = self.lock();
        QueueStats {
            name: self.inner.name.clone(),
            capacity: self.inner.capacity,
            depth: st.items.len(),
            pushed: st.pushed,
            popped: st.popped,
            closed: st.closed,
        }
    }
}

impl<T: Send> MessageQueue<T> for Queue<T> {
    fn push(&self, msg: T) -> Result<(), BrokerError> {
        Queue::push(self, msg)
    }

    fn pop(&self, timeout: Duration) -> Result<Option<T>, BrokerError> {
        Queue::pop(self, timeout)
    }

    fn stats(&self) -> QueueStats {
        Queue::stats(self)
    }

    fn close(&self) {
        Queue::close(self)
    }
}

struct ChannelInner<T> {
    name: String,
    buffer: usize,
    subscribers: Mutex<Vec<Queue<T>>>,
    // Serializes publishers so every subscriber observes one global order.
    publish_lock: Mutex<()>,
    next_id: Mutex<u64>,
}

/// Publisher-subscriber channel. Each subscriber owns a bounded buffer; a full
/// buffer blocks the publisher. Messages published with no subscribers are
/// dropped.
pub struct Channel<T> {
    inner: Arc<ChannelInner<T>>,
}

impl<T> Clone for Channel<T> {
    fn clone(&self) -> Self {
        Channel { inner: Arc::clone(&self.inner) }
    }
}

/// Receiving end of a channel subscription. Dropping it unsubscribes.
pub struct Subscription<T> {
    queue: Queue<T>,
}

impl<T> Subscription<T> {
    pub fn recv(&self, timeout: Duration) -> Result<Option<T>, BrokerError> {
        self.queue.pop(timeout)
    }

    pub fn stats(&self) -> QueueStats {
        self.queue.stats()
    }
}

impl<T> Drop for Subscription<T> {
    fn drop(&mut self) {
        self.queue.close();
    }
}

impl<T: Clone> Channel<T> {
    pub fn new(name: impl Into<String>, buffer: usize) -> Self {
        Channel {
            inner: Arc::new(ChannelInner {
                name: name.into(),
                buffer: buffer.max(1),
                subscribers: Mutex::new(Vec::new()),
                publish_lock: Mutex::new(()),
                next_id: Mutex::new(0),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn subscribe(&self) -> Subscription<T> {
        // Taking the publish lock keeps a new subscriber from seeing half of an
        // in-progress publish.
        let _guard = self.inner.publish_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut id = self.inner.next_id.lock().unwrap_or_else(|e| e.into_inner());
        *id += 1;
        let queue = Queue::new(format!("{}#{}", self.inner.name, id), self.inner.buffer);
        self.inner.subscribers.lock().unwrap_or_else(|e| e.into_inner()).push(queue.clone());
        Subscription { queue }
    }

    pub fn subscriber_count(&self) -> usize {
        let mut subs = self.inner.subscribers.lock().unwrap_or_else(|e| e.into_inner());
        subs.retain(|q| !q.is_closed());
        subs.len()
    }

    /// Delivers `msg` to every live subscriber and returns how many received it.
    pub fn publish(&self, msg: T) -> usize {
        let _guard = self.inner.publish_lock.lock().unwrap_or_else(|e| e.into_inner());
        let targets: Vec<Queue<T>> = {
            let mut subs = self.inner.subscribers.lock().unwrap_or_else(|e| e.into_inner());
            subs.retain(|q| !q.is_closed());
            subs.clone()
        };
        // A subscriber dropped mid-publish is simply skipped.
        targets.iter().filter(|q| q.push(msg.clone()).is_ok()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::thread;

    const SHORT: Duration = Duration::from_millis(10);

    #[test]
    fn push_sets_depth() {
        let q = Queue::new("q", 4);
        q.push(1).unwrap();
        assert_eq!(q.depth(), 1);
        let s = q.stats();
        assert_eq!((s.pushed, s.popped, s.depth), (1, 0, 1));
    }

    #[test]
    fn fifo_order() {
        let q = Queue::new("q", 16);
        for i in 0..10 {
            q.push(i).unwrap();
        }
        let out: Vec<_> = (0..10).map(|_| q.pop(SHORT).unwrap().unwrap()).collect();
        assert_eq!(out, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_pop_times_out() {
        let q: Queue<u8> = Queue::new("q", 1);
        let start = Instant::now();
        assert_eq!(q.pop(SHORT).unwrap(), None);
        assert!(start.elapsed() >= SHORT);
    }

    #[test]
    fn third_producer_blocks_until_pop() {
        let q = Queue::new("q", 2);
        let done = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..3)
            .map(|i| {
                let q = q.clone();
                let done = Arc::clone(&done);
                thread::spawn(move || {
                    q.push(i).unwrap();
                    done.fetch_add(1, Ordering::SeqCst);
                })
            })
            .collect();
        // Wait for the queue to fill; the third producer must still be parked.
        while q.depth() < 2 {
            thread::yield_now();
        }
        thread::sleep(Duration::from_millis(50));
        assert_eq!(done.load(Ordering::SeqCst), 2);
        assert_eq!(q.depth(), 2);
        q.pop(SHORT).unwrap().unwrap();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(done.load(Ordering::SeqCst), 3);
        assert_eq!(q.depth(), 2);
    }

    #[test]
    fn closed_queue_drains_then_errors() {
        let q = Queue::new("q", 4);
        q.push("a").unwrap();
        q.close();
        assert!(matches!(q.push("b"), Err(BrokerError::Closed(_))));
        assert_eq!(q.pop(SHORT).unwrap(), Some("a"));
        assert!(matches!(q.pop(SHORT), Err(BrokerError::Closed(_))));
    }

    #[test]
    fn close_wakes_blocked_producer() {
        let q = Queue::new("q", 1);
        q.push(0).unwrap();
        let q2 = q.clone();
        let h = thread::spawn(move || q2.push(1));
        thread::sleep(SHORT);
        q.close();
        assert!(h.join().unwrap().is_err());
    }

    #[test]
    fn concurrent_consumers_receive_each_message_once() {
        let q = Queue::new("q", 64);
        let consumers: Vec<_> = (0..2)
            .map(|_| {
                let q = q.clone();
                thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some(m) = q.recv() {
                        got.push(m);
                    }
                    got
                })
            })
            .collect();
        let producers: Vec<_> = (0..4)
            .map(|p| {
                let q = q.clone();
                thread::spawn(move || {
                    for i in 0..250 {
                        q.push(p * 1000 + i).unwrap();
                    }
                })
            })
            .collect();
        for p in producers {
            p.join().unwrap();
        }
        q.close();
        let lists: Vec<Vec<i32>> = consumers.into_iter().map(|c| c.join().unwrap()).collect();
        let a: HashSet<_> = lists[0].iter().copied().collect();
        let b: HashSet<_> = lists[1].iter().copied().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 1000);
        assert_eq!(lists[0].len() + lists[1].len(), 1000);
        let s = q.stats();
        assert_eq!(s.pushed, s.popped + s.depth as u64);
        assert_eq!(s.depth, 0);
    }

    #[test]
    fn publish_without_subscribers_drops() {
        let c: Channel<u32> = Channel::new("events", 8);
        assert_eq!(c.publish(1), 0);
    }

    #[test]
    fn all_subscribers_receive() {
        let c = Channel::new("events", 8);
        let a = c.subscribe();
        let b = c.subscribe();
        assert_eq!(c.publish("x"), 2);
        assert_eq!(a.recv(SHORT).unwrap(), Some("x"));
        assert_eq!(b.recv(SHORT).unwrap(), Some("x"));
    }

    #[test]
    fn late_subscriber_misses_earlier_messages() {
        let c = Channel::new("events", 8);
        let early = c.subscribe();
        c.publish("y");
        let late = c.subscribe();
        c.publish("z");
        assert_eq!(late.recv(SHORT).unwrap(), Some("z"));
        assert_eq!(early.recv(SHORT).unwrap(), Some("y"));
        assert_eq!(early.recv(SHORT).unwrap(), Some("z"));
    }

    #[test]
    fn dropped_subscription_is_pruned() {
        let c = Channel::new("events", 1);
        let a = c.subscribe();
        {
            let _b = c.subscribe();
            assert_eq!(c.subscriber_count(), 2);
        }
        assert_eq!(c.subscriber_count(), 1);
        assert_eq!(c.publish(5), 1);
        assert_eq!(a.recv(SHORT).unwrap(), Some(5));
    }

    #[test]
    fn full_subscriber_blocks_publisher() {
        let c = Channel::new("events", 1);
        let sub = c.subscribe();
        c.publish(1);
        let c2 = c.clone();
        let h = thread::spawn(move || c2.publish(2));
        thread::sleep(Duration::from_millis(30));
        assert!(!h.is_finished());
        assert_eq!(sub.recv(SHORT).unwrap(), Some(1));
        assert_eq!(h.join().unwrap(), 1);
        assert_eq!(sub.recv(SHORT).unwrap(), Some(2));
    }

    #[test]
    fn per_subscriber_order_under_concurrent_publishers() {
        let c = Channel::new("events", 4096);
        let a = c.subscribe();
        let b = c.subscribe();
        let pubs: Vec<_> = (0..4)
            .map(|p| {
                let c = c.clone();
                thread::spawn(move || {
                    for i in 0..200 {
                        c.publish((p, i));
                    }
                })
            })
            .collect();
        for p in pubs {
            p.join().unwrap();
        }
        let drain = |s: &Subscription<(i32, i32)>| {
            let mut v = Vec::new();
            while let Some(m) = s.recv(SHORT).unwrap() {
                v.push(m);
            }
            v
        };
        let va = drain(&a);
        let vb = drain(&b);
        assert_eq!(va.len(), 800);
        assert_eq!(va, vb);
        for p in 0..4 {
            let seq: Vec<_> = va.iter().filter(|m| m.0 == p).map(|m| m.1).collect();
            assert_eq!(seq, (0..200).collect::<Vec<_>>());
        }
    }
}
