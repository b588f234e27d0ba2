use std::collections::VecDeque;

pub trait Timestamped {
    fn timestamp_ms(&self) -> u64;
}

/// Bounded ring keeping the newest `capacity` samples of one series.
#[derive(Debug, Clone)]
pub struct SeriesBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T: Timestamped + Clone> SeriesBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        SeriesBuffer { capacity: capacity.max(1), items: VecDeque::new() }
    }

    /// Appends a sample. Samples not newer than the last one are refused.
    pub fn push(&mut self, item: T) -> bool {
        if self.items.back().is_some_and(|last| last.timestamp_ms() >= item.timestamp_ms()) {
            return false;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
        true
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.items.iter().cloned().collect()
    }

    pub fn last(&self) -> Option<&T> {
        self.items.back()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct S(u64);
    impl Timestamped for S {
        fn timestamp_ms(&self) -> u64 {
            self.0
        }
    }

    proptest! {
        #[test]
        fn keeps_newest_in_order(ts in proptest::collection::vec(0u64..1000, 0..200), cap in 1usize..20) {
            let mut buf = SeriesBuffer::new(cap);
            let mut accepted = Vec::new();
            for t in ts {
                if buf.push(S(t)) {
                    accepted.push(t);
                }
            }
            let kept: Vec<u64> = buf.iter().map(|s| s.0).collect();
            let start = accepted.len().saturating_sub(cap);
            prop_assert_eq!(&kept[..], &accepted[start..]);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
