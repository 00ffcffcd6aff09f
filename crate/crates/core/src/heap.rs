//! Addressable binary max-heap with increase-key.
//!
//! Items are dense indices `0..capacity`; the heap stores a position table so
//! a key can be raised in `O(log n)` without searching.

const ABSENT: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct IndexedMaxHeap<K: Ord> {
    heap: Vec<usize>,
    pos: Vec<usize>,
    keys: Vec<Option<K>>,
}

impl<K: Ord> IndexedMaxHeap<K> {
    pub fn with_capacity(capacity: usize) -> Self {
        IndexedMaxHeap {
            heap: Vec::with_capacity(capacity),
            pos: vec![ABSENT; capacity],
            keys: (0..capacity).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.pos.get(item).is_some_and(|&p| p != ABSENT)
    }

    pub fn key(&self, item: usize) -> Option<&K> {
        if self.contains(item) {
            self.keys[item].as_ref()
        } else {
            None
        }
    }

    /// Insert `item`. Panics if it is already present or out of range.
    pub fn push(&mut self, item: usize, key: K) {
        assert!(!self.contains(item), "item {item} already in heap");
        self.keys[item] = Some(key);
        self.pos[item] = self.heap.len();
        self.heap.push(item);
        self.sift_up(self.heap.len() - 1);
    }

    pub fn peek(&self) -> Option<(usize, &K)> {
        self.heap.first().map(|&i| (i, self.keys[i].as_ref().unwrap()))
    }

    pub fn pop(&mut self) -> Option<(usize, K)> {
        if self.heap.is_empty() {
            return None;
        }
        let last = self.heap.len() - 1;
        self.swap(0, last);
        let item = self.heap.pop().unwrap();
        self.pos[item] = ABSENT;
        if !self.heap.is_empty() {
            self.sift_down(0);
        }
        Some((item, self.keys[item].take().unwrap()))
    }

    /// Raise the key of `item`. Keys that would decrease are ignored.
    pub fn increase_key(&mut self, item: usize, key: K) {
        assert!(self.contains(item), "item {item} not in heap");
        if key <= *self.keys[item].as_ref().unwrap() {
            return;
        }
        self.keys[item] = Some(key);
        self.sift_up(self.pos[item]);
    }

    fn less(&self, a: usize, b: usize) -> bool {
        self.keys[self.heap[a]] < self.keys[self.heap[b]]
    }

    fn swap(&mut self, a: usize, b: usize) {
        self.heap.swap(a, b);
        self.pos[self.heap[a]] = a;
        self.pos[self.heap[b]] = b;
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if !self.less(parent, i) {
                break;
            }
            self.swap(parent, i);
            i = parent;
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.heap.len();
        loop {
            let l = 2 * i + 1;
            if l >= n {
                break;
            }
            let mut m = l;
            if l + 1 < n && self.less(l, l + 1) {
                m = l + 1;
            }
            if !self.less(i, m) {
                break;
            }
            self.swap(i, m);
            i = m;
        }
    }
}
